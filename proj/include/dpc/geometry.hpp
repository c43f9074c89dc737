#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "dpc/common.hpp"
#include "dpc/random.hpp"

namespace dpc {

/// n x 3 coordinates plus an opaque label. Row order identifies points.
struct PointCloud {
  Matrix<double> points;
  std::string id;

  PointCloud() = default;
  explicit PointCloud(Matrix<double> pts, std::string label = {})
      : points(std::move(pts)), id(std::move(label)) {}

  std::size_t size() const { return static_cast<std::size_t>(points.rows()); }
};

inline void validate(const PointCloud& pc) {
  if (pc.points.rows() < 1) throw InvalidArgument("point cloud '" + pc.id + "' is empty");
  if (pc.points.cols() != 3) throw InvalidArgument("point cloud '" + pc.id + "' must have 3 columns");
  if (!pc.points.allFinite()) throw InvalidArgument("point cloud '" + pc.id + "' has non-finite coordinates");
}

/// Row i holds the k neighbors of point i, nearest first.
struct NeighborGraph {
  IndexTable indices;
  std::size_t k = 0;
  bool excludes_self = false;

  std::size_t size() const { return indices.rows; }
};

/// Orders candidate columns by `better(a, b)` and keeps the first k.
/// `better` must be a strict total order (callers break ties by index).
template <typename Better>
void select_first_k(std::vector<Index>& candidates, std::size_t k, Better better) {
  if (k < candidates.size()) {
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k),
                      candidates.end(), better);
    candidates.resize(k);
  } else {
    std::sort(candidates.begin(), candidates.end(), better);
  }
}

/// Uniform subset without replacement, in draw order.
inline PointCloud sample_points(const PointCloud& pc, std::size_t n_out, std::uint64_t seed) {
  const std::size_t n = pc.size();
  if (n_out > n) {
    throw InvalidArgument("cannot sample " + std::to_string(n_out) + " points from " +
                          std::to_string(n));
  }
  std::vector<Index> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  // Partial Fisher-Yates: position i receives a uniform draw from the remaining pool.
  for (std::size_t i = 0; i < n_out; ++i) {
    const auto j = i + uniform_index(rng, n - i);
    std::swap(order[i], order[j]);
  }
  Matrix<double> out(n_out, 3);
  for (std::size_t i = 0; i < n_out; ++i) out.row(i) = pc.points.row(order[i]);
  return PointCloud(std::move(out), pc.id);
}

/// Centroid to origin, max radius to 1. A fully degenerate cloud maps to zeros.
inline PointCloud normalize(const PointCloud& pc) {
  if (pc.size() == 0) throw InvalidArgument("cannot normalize an empty point cloud");
  const Eigen::RowVector3d centroid = pc.points.colwise().mean();
  Matrix<double> centered = pc.points.rowwise() - centroid;
  const double radius = centered.rowwise().norm().maxCoeff();
  if (radius > 0.0) centered /= radius;
  else centered.setZero();
  return PointCloud(std::move(centered), pc.id);
}

inline double squared_distance(const Matrix<double>& a, std::size_t i, const Matrix<double>& b,
                               std::size_t j) {
  const double dx = a(i, 0) - b(j, 0);
  const double dy = a(i, 1) - b(j, 1);
  const double dz = a(i, 2) - b(j, 2);
  return dx * dx + dy * dy + dz * dz;
}

/// Exact kNN by exhaustive search over rows of an arbitrary-width matrix.
/// Ties go to the lower index.
template <typename T>
IndexTable knn_rows(const Matrix<T>& x, std::size_t k, bool excludes_self) {
  const std::size_t n = static_cast<std::size_t>(x.rows());
  const std::size_t available = n - (excludes_self ? 1 : 0);
  if (n == 0 || k == 0 || k > available) {
    throw InvalidArgument("k=" + std::to_string(k) + " is invalid for " + std::to_string(n) +
                          " points" + (excludes_self ? " (self excluded)" : ""));
  }
  IndexTable out(n, k);
  std::vector<T> dist(n);
  std::vector<Index> cand;
  cand.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j) {
      dist[j] = (x.row(i) - x.row(j)).squaredNorm();
      if (!(excludes_self && j == i)) cand.push_back(static_cast<Index>(j));
    }
    select_first_k(cand, k, [&](Index a, Index b) {
      return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
    });
    std::copy(cand.begin(), cand.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return out;
}

inline NeighborGraph knn_euclidean(const PointCloud& pc, std::size_t k, bool excludes_self) {
  NeighborGraph g;
  g.indices = knn_rows(pc.points, k, excludes_self);
  g.k = k;
  g.excludes_self = excludes_self;
  return g;
}

/// Diameter of the cloud (exhaustive).
inline double max_pairwise_distance(const PointCloud& pc) {
  const std::size_t n = pc.size();
  if (n < 2) throw InvalidArgument("max pairwise distance needs at least 2 points");
  double best = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) best = std::max(best, squared_distance(pc.points, i, pc.points, j));
  return std::sqrt(best);
}

}  // namespace dpc
