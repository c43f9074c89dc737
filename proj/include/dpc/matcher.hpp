#pragma once

#include <algorithm>
#include <cmath>
#include <charconv>
#include <filesystem>
#include <optional>
#include <sstream>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "dpc/affinity.hpp"
#include "dpc/feature_net.hpp"
#include "dpc/geometry.hpp"

namespace dpc {

struct CorrespondenceMap {
  std::vector<Index> target_index;  // j* for every source point
  std::vector<double> peak_weight;  // softmax weight of j* within its latent neighborhood
  std::string source_id;
  std::string target_id;

  std::size_t size() const { return target_index.size(); }
};

/// Hard assignment from an affinity matrix: global row argmax (ties to the
/// lower column), which is also the argmax of the softmax weights over the
/// top-k neighborhood since that neighborhood holds the k largest entries.
template <typename T>
CorrespondenceMap match_affinity(const Matrix<T>& s, std::size_t k_cc) {
  CorrespondenceMap map;
  map.target_index = row_argmax(s);
  const auto k = std::min<std::size_t>(k_cc, static_cast<std::size_t>(s.cols()));
  const auto nb = softmax_weights(s, top_k_neighborhood(s, k, false));
  map.peak_weight.resize(map.target_index.size());
  for (std::size_t i = 0; i < map.target_index.size(); ++i) {
    for (std::size_t t = 0; t < nb.k; ++t) {
      if (nb.indices(i, t) == map.target_index[i]) {
        map.peak_weight[i] = static_cast<double>(nb.weights(i, t));
        break;
      }
    }
  }
  return map;
}

namespace detail {

inline void require_normalized(const PointCloud& pc) {
  validate(pc);
  const double centroid = pc.points.colwise().mean().norm();
  const double radius = pc.points.rowwise().norm().maxCoeff();
  if (centroid > 1e-6 || (std::abs(radius - 1.0) > 1e-6 && radius > 0)) {
    throw InvalidArgument("cloud '" + pc.id + "' is not normalized (centroid offset " + std::to_string(centroid) +
                          ", radius " + std::to_string(radius) + ")");
  }
}

}  // namespace detail

/// Clouds must already be normalized with the checkpoint's convention.
template <typename T>
CorrespondenceMap match(const NetworkParams<T>& params, const PointCloud& x, const PointCloud& y, std::size_t k_cc = 10,
                        SimilarityKind kind = SimilarityKind::Cosine) {
  detail::require_normalized(x);
  detail::require_normalized(y);
  const Matrix<T> cx = x.points.template cast<T>();
  const Matrix<T> cy = y.points.template cast<T>();
  const auto fx = embed_batch<T>(params, std::span<const Matrix<T>>(&cx, 1), Mode::Eval);
  const auto fy = embed_batch<T>(params, std::span<const Matrix<T>>(&cy, 1), Mode::Eval);
  auto map = match_affinity<T>(similarity(kind, fx.front(), fy.front()), k_cc);
  map.source_id = x.id;
  map.target_id = y.id;
  return map;
}

/// Normalizes both clouds with the checkpoint convention, then matches.
template <typename T>
CorrespondenceMap match_raw(const NetworkParams<T>& params, const PointCloud& source, const PointCloud& target,
                            std::size_t k_cc = 10, SimilarityKind kind = SimilarityKind::Cosine) {
  return match<T>(params, normalize(source), normalize(target), k_cc, kind);
}

namespace detail {

inline void check_map(const CorrespondenceMap& map, const PointCloud& y, std::span<const Index> gt) {
  if (map.size() != gt.size()) {
    throw ShapeMismatch("prediction has " + std::to_string(map.size()) + " entries, ground truth " +
                        std::to_string(gt.size()));
  }
  const auto n = static_cast<Index>(y.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] < 0 || gt[i] >= n || map.target_index[i] < 0 || map.target_index[i] >= n) {
      throw InvalidArgument("correspondence index out of range at source point " + std::to_string(i));
    }
  }
}

inline double match_distance(const CorrespondenceMap& map, const PointCloud& y, std::span<const Index> gt, std::size_t i) {
  return std::sqrt(squared_distance(y.points, static_cast<std::size_t>(map.target_index[i]), y.points,
                                    static_cast<std::size_t>(gt[i])));
}

}  // namespace detail

/// Mean Euclidean distance between predicted and true target points, in the
/// units of `y` (pass the target in its original frame).
inline double corr_error(const CorrespondenceMap& map, const PointCloud& y, std::span<const Index> gt) {
  detail::check_map(map, y, gt);
  if (gt.empty()) return 0.0;
  double sum = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) sum += detail::match_distance(map, y, gt, i);
  return sum / static_cast<double>(gt.size());
}

/// Fraction of points with error strictly below eps * diameter(y).
inline double corr_accuracy(const CorrespondenceMap& map, const PointCloud& y, std::span<const Index> gt, double eps,
                            std::optional<double> diameter = std::nullopt) {
  detail::check_map(map, y, gt);
  if (!(eps >= 0 && eps <= 1)) throw InvalidArgument("tolerance must lie in [0, 1]");
  if (gt.empty()) return 0.0;
  const double d = diameter ? *diameter : max_pairwise_distance(y);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (detail::match_distance(map, y, gt, i) < eps * d) ++hits;
  return static_cast<double>(hits) / static_cast<double>(gt.size());
}

struct EvalResult {
  double err = 0;
  double diameter = 0;
  std::vector<double> tolerances;
  std::vector<double> accuracy;  // one per tolerance
};

/// 0.01, 0.02, ..., 0.20
inline std::vector<double> default_tolerance_grid() {
  std::vector<double> g;
  for (int i = 1; i <= 20; ++i) g.push_back(i / 100.0);
  return g;
}

inline EvalResult accuracy_curve(const CorrespondenceMap& map, const PointCloud& y, std::span<const Index> gt,
                                 const std::vector<double>& grid = default_tolerance_grid()) {
  EvalResult r;
  r.err = corr_error(map, y, gt);
  r.diameter = max_pairwise_distance(y);
  r.tolerances = grid;
  for (double eps : grid) r.accuracy.push_back(corr_accuracy(map, y, gt, eps, r.diameter));
  return r;
}

/// Header line "<n> <source_id> <target_id>", then one 0-based target index per line.
inline void write_correspondence(const std::filesystem::path& path, const CorrespondenceMap& map) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << map.size() << ' ' << (map.source_id.empty() ? "source" : map.source_id) << ' '
      << (map.target_id.empty() ? "target" : map.target_id) << '\n';
  for (auto j : map.target_index) out << j << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

/// One 0-based index per line; returns the header-less index list.
inline std::vector<Index> read_index_lines(std::istream& in, std::size_t first_line_no, const std::string& where) {
  std::vector<Index> out;
  std::string line;
  std::size_t line_no = first_line_no;
  while (std::getline(in, line)) {
    ++line_no;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    const std::string tok = line.substr(b, e - b + 1);
    Index v = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size() || v < 0) {
      throw ParseError(ParseErrorKind::NonNumeric, where + ": invalid index '" + tok + "'", line_no);
    }
    out.push_back(v);
  }
  return out;
}

inline CorrespondenceMap read_correspondence(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string header;
  if (!std::getline(in, header)) throw ParseError(ParseErrorKind::MalformedHeader, path.string() + ": empty file", 1);
  std::istringstream hs(header);
  std::size_t n = 0;
  CorrespondenceMap map;
  if (!(hs >> n >> map.source_id >> map.target_id)) {
    throw ParseError(ParseErrorKind::MalformedHeader, path.string() + ": header must be '<n> <source> <target>'", 1);
  }
  map.target_index = read_index_lines(in, 1, path.string());
  if (map.target_index.size() != n) {
    throw ParseError(ParseErrorKind::Truncated,
                     path.string() + ": header declares " + std::to_string(n) + " entries, found " +
                         std::to_string(map.target_index.size()),
                     1 + map.target_index.size());
  }
  map.peak_weight.assign(n, 0.0);
  return map;
}

inline std::vector<Index> read_ground_truth(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return read_index_lines(in, 0, path.string());
}

inline void write_ground_truth(const std::filesystem::path& path, std::span<const Index> gt) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (auto j : gt) out << j << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

/// Fixed position-to-RGB map over the cloud's bounding box.
inline Matrix<int> position_colors(const PointCloud& pc) {
  Matrix<int> rgb(static_cast<Eigen::Index>(pc.size()), 3);
  const Eigen::RowVector3d lo = pc.points.colwise().minCoeff();
  const Eigen::RowVector3d hi = pc.points.colwise().maxCoeff();
  for (Eigen::Index i = 0; i < rgb.rows(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double span = hi(c) - lo(c);
      const double u = span > 0 ? (pc.points(i, c) - lo(c)) / span : 0.5;
      rgb(i, c) = static_cast<int>(std::lround(20.0 + 215.0 * u));
    }
  }
  return rgb;
}

/// Target colored by its own positions; each source point takes the color of its match.
inline std::pair<Matrix<int>, Matrix<int>> transfer_colors(const CorrespondenceMap& map, const PointCloud& x,
                                                           const PointCloud& y) {
  if (map.size() != x.size()) throw ShapeMismatch("correspondence does not cover the source cloud");
  const Matrix<int> target = position_colors(y);
  Matrix<int> source(static_cast<Eigen::Index>(x.size()), 3);
  for (std::size_t i = 0; i < map.size(); ++i) {
    const auto j = map.target_index[i];
    if (j < 0 || j >= target.rows()) throw InvalidArgument("correspondence index out of range");
    source.row(static_cast<Eigen::Index>(i)) = target.row(j);
  }
  return {std::move(source), target};
}

}  // namespace dpc
