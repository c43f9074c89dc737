#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "dpc/common.hpp"
#include "dpc/geometry.hpp"

namespace dpc {

enum class SimilarityKind { Cosine, Dot };

inline constexpr double kNormFloor = 1e-12;

template <typename T>
struct AffinityMatrix {
  Matrix<T> values;  // values(i, j) = s_ij
  std::string row_source;
  std::string col_source;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(values.cols()); }
  T operator()(std::size_t i, std::size_t j) const { return values(i, j); }
};

/// Top-k latent neighbors of each row with their softmax weights.
template <typename T>
struct LatentNeighborhood {
  IndexTable indices;
  Matrix<T> weights;  // same shape as indices
  std::size_t k = 0;
};

namespace detail {

template <typename T>
void check_feature_dims(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeMismatch("feature dimension mismatch: " + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.cols()));
  }
}

template <typename T>
Vector<T> floored_row_norms(const Matrix<T>& f) {
  Vector<T> norms(f.rows());
  for (Eigen::Index i = 0; i < f.rows(); ++i) norms(i) = std::max(f.row(i).norm(), T(kNormFloor));
  return norms;
}

// Element-wise dot products rather than a blocked GEMM: s_ij and s_ji are then
// computed by the same reduction and agree bitwise.
template <typename T>
Matrix<T> pairwise_dots(const Matrix<T>& a, const Matrix<T>& b) {
  Matrix<T> s(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) s(i, j) = a.row(i).dot(b.row(j));
  return s;
}

template <typename T>
Matrix<T> unit_rows(const Matrix<T>& f) {
  return f.array().colwise() / floored_row_norms(f).array();
}

}  // namespace detail

/// s_ij = <a_i, b_j> / (|a_i| |b_j|), norms floored at kNormFloor.
template <typename T>
Matrix<T> cosine_similarity(const Matrix<T>& fx, const Matrix<T>& fy) {
  detail::check_feature_dims(fx, fy);
  return detail::pairwise_dots(detail::unit_rows(fx), detail::unit_rows(fy));
}

/// Unnormalized numerator of the cosine similarity.
template <typename T>
Matrix<T> dot_similarity(const Matrix<T>& fx, const Matrix<T>& fy) {
  detail::check_feature_dims(fx, fy);
  return detail::pairwise_dots(fx, fy);
}

template <typename T>
Matrix<T> similarity(SimilarityKind kind, const Matrix<T>& fx, const Matrix<T>& fy) {
  return kind == SimilarityKind::Cosine ? cosine_similarity(fx, fy) : dot_similarity(fx, fy);
}

/// Gradients of a scalar objective w.r.t. both feature sets given dL/dS.
/// For a self-affinity (fx and fy the same field) the caller sums the two parts.
template <typename T>
std::pair<Matrix<T>, Matrix<T>> similarity_backward(SimilarityKind kind, const Matrix<T>& fx,
                                                    const Matrix<T>& fy, const Matrix<T>& grad_s) {
  if (kind == SimilarityKind::Dot) {
    return {grad_s * fy, grad_s.transpose() * fx};
  }
  const Vector<T> nx = detail::floored_row_norms(fx);
  const Vector<T> ny = detail::floored_row_norms(fy);
  const Matrix<T> ux = fx.array().colwise() / nx.array();
  const Matrix<T> uy = fy.array().colwise() / ny.array();
  Matrix<T> gux = grad_s * uy;
  Matrix<T> guy = grad_s.transpose() * ux;
  // Through u = f / max(|f|, floor): tangential projection when the norm is not floored.
  auto through_norm = [](const Matrix<T>& f, const Matrix<T>& u, const Vector<T>& norms, Matrix<T>& g) {
    for (Eigen::Index i = 0; i < f.rows(); ++i) {
      if (f.row(i).norm() > T(kNormFloor)) g.row(i) -= u.row(i) * u.row(i).dot(g.row(i));
      g.row(i) /= norms(i);
    }
  };
  through_norm(fx, ux, nx, gux);
  through_norm(fy, uy, ny, guy);
  return {std::move(gux), std::move(guy)};
}

/// k largest entries per row, best first; ties go to the lower column.
template <typename T>
IndexTable top_k_neighborhood(const Matrix<T>& s, std::size_t k, bool exclude_diagonal) {
  const std::size_t n = static_cast<std::size_t>(s.rows());
  const std::size_t m = static_cast<std::size_t>(s.cols());
  const std::size_t available = m - (exclude_diagonal ? 1 : 0);
  if (k == 0 || k > available) {
    throw InvalidArgument("top-k size " + std::to_string(k) + " exceeds the " + std::to_string(available) +
                          " available columns");
  }
  if (exclude_diagonal && n != m) throw ShapeMismatch("diagonal exclusion needs a square affinity matrix");
  IndexTable out(n, k);
  std::vector<Index> cand;
  cand.reserve(m);
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < m; ++j)
      if (!(exclude_diagonal && j == i)) cand.push_back(static_cast<Index>(j));
    const auto row = s.row(static_cast<Eigen::Index>(i));
    select_first_k(cand, k, [&](Index a, Index b) { return row(a) > row(b) || (row(a) == row(b) && a < b); });
    std::copy(cand.begin(), cand.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return out;
}

/// w_ij = exp(s_ij) / sum over the row's neighborhood, with max subtraction.
template <typename T>
LatentNeighborhood<T> softmax_weights(const Matrix<T>& s, const IndexTable& indices) {
  LatentNeighborhood<T> out;
  out.indices = indices;
  out.k = indices.cols;
  out.weights.resize(static_cast<Eigen::Index>(indices.rows), static_cast<Eigen::Index>(indices.cols));
  if (indices.rows != static_cast<std::size_t>(s.rows())) throw ShapeMismatch("neighborhood rows do not match S");
  for (std::size_t i = 0; i < indices.rows; ++i) {
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t < indices.cols; ++t) {
      const Index j = indices(i, t);
      if (j < 0 || j >= s.cols()) throw InvalidArgument("neighbor index out of range");
      peak = std::max(peak, s(i, j));
    }
    T total = 0;
    for (std::size_t t = 0; t < indices.cols; ++t) {
      const T e = std::exp(s(i, indices(i, t)) - peak);
      out.weights(i, t) = e;
      total += e;
    }
    out.weights.row(i) /= total;
  }
  return out;
}

/// Scatters dL/dw back onto the selected entries of S (others stay zero).
template <typename T>
void softmax_backward(const LatentNeighborhood<T>& nb, const Matrix<T>& grad_w, Matrix<T>& grad_s) {
  for (std::size_t i = 0; i < nb.indices.rows; ++i) {
    const auto w = nb.weights.row(i);
    const T mean = w.dot(grad_w.row(i));
    for (std::size_t t = 0; t < nb.k; ++t) grad_s(i, nb.indices(i, t)) += w(t) * (grad_w(i, t) - mean);
  }
}

/// Row-wise argmax with ties to the lower column.
template <typename T>
std::vector<Index> row_argmax(const Matrix<T>& s) {
  std::vector<Index> out(static_cast<std::size_t>(s.rows()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < s.cols(); ++j)
      if (s(i, j) > s(i, best)) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<Index>(best);
  }
  return out;
}

/// Debug dump of S: rows and cols as little-endian uint64, then row-major float64.
template <typename T>
void write_affinity_dump(const std::filesystem::path& path, const Matrix<T>& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::uint64_t dims[2] = {static_cast<std::uint64_t>(s.rows()), static_cast<std::uint64_t>(s.cols())};
  out.write(reinterpret_cast<const char*>(dims), sizeof dims);
  const Matrix<double> d = s.template cast<double>();
  out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
  if (!out) throw IoError("failed writing " + path.string());
}

inline Matrix<double> read_affinity_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::uint64_t dims[2] = {0, 0};
  if (!in.read(reinterpret_cast<char*>(dims), sizeof dims)) throw CorruptFile(path.string() + ": short header");
  const auto size = std::filesystem::file_size(path);
  if (dims[0] == 0 || dims[1] == 0 || size != sizeof dims + dims[0] * dims[1] * sizeof(double)) {
    throw CorruptFile(path.string() + ": size does not match header");
  }
  Matrix<double> s(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
  in.read(reinterpret_cast<char*>(s.data()), static_cast<std::streamsize>(s.size() * sizeof(double)));
  return s;
}

}  // namespace dpc
