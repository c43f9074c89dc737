#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dpc/affinity.hpp"
#include "dpc/common.hpp"
#include "dpc/geometry.hpp"

namespace dpc {

struct LossWeights {
  double lambda_cc = 1.0;
  double lambda_sc = 10.0;
  double lambda_m = 1.0;
  double alpha = 8.0;  // mapping-loss proximity bandwidth
  std::size_t k_cc = 10;
  std::size_t k_sc = 10;
  std::size_t k_m = 10;
  bool k_cc_full = false;  // cross-construct over every target point

  void validate() const {
    if (lambda_cc < 0 || lambda_sc < 0 || lambda_m < 0) throw InvalidArgument("loss weights must be >= 0");
    if (!(alpha > 0)) throw InvalidArgument("alpha must be > 0");
    if (k_cc < 1 || k_sc < 1 || k_m < 1) throw InvalidArgument("neighborhood sizes must be >= 1");
  }
};

struct LossBreakdown {
  double cc_target = 0;   // CD(Y, Y_hat_X)
  double cc_source = 0;   // CD(X, X_hat_Y)
  double sc_source = 0;   // CD(X, X_hat_X)
  double sc_target = 0;   // CD(Y, Y_hat_Y)
  double map_source = 0;  // L_m(X, Y_hat_X)
  double map_target = 0;  // L_m(Y, X_hat_Y)
  double total = 0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    cc_target += o.cc_target;
    cc_source += o.cc_source;
    sc_source += o.sc_source;
    sc_target += o.sc_target;
    map_source += o.map_source;
    map_target += o.map_target;
    total += o.total;
    return *this;
  }
  LossBreakdown& operator/=(double s) {
    cc_target /= s;
    cc_source /= s;
    sc_source /= s;
    sc_target /= s;
    map_source /= s;
    map_target /= s;
    total /= s;
    return *this;
  }
};

inline double weighted_total(const LossBreakdown& b, const LossWeights& w) {
  return w.lambda_cc * (b.cc_target + b.cc_source) + w.lambda_sc * (b.sc_source + b.sc_target) +
         w.lambda_m * (b.map_source + b.map_target);
}

/// Points rebuilt as convex combinations of another cloud's points.
template <typename T>
struct ConstructionResult {
  Matrix<T> constructed;
  LatentNeighborhood<T> neighborhood;
};

template <typename T>
Matrix<T> cast_points(const PointCloud& pc) {
  return pc.points.template cast<T>();
}

/// y_hat_i = sum_t w_it * y_{j(i,t)}
template <typename T>
ConstructionResult<T> cross_construct(const LatentNeighborhood<T>& nb, const Matrix<T>& y) {
  ConstructionResult<T> out{Matrix<T>::Zero(static_cast<Eigen::Index>(nb.indices.rows), 3), nb};
  for (std::size_t i = 0; i < nb.indices.rows; ++i) {
    for (std::size_t t = 0; t < nb.k; ++t) {
      const Index j = nb.indices(i, t);
      if (j < 0 || j >= y.rows()) throw InvalidArgument("construction index out of range");
      out.constructed.row(i) += nb.weights(i, t) * y.row(j);
    }
  }
  return out;
}

/// dL/dw given dL/d(constructed); coordinates are constants.
template <typename T>
Matrix<T> construct_backward(const LatentNeighborhood<T>& nb, const Matrix<T>& y, const Matrix<T>& grad_constructed) {
  Matrix<T> gw(static_cast<Eigen::Index>(nb.indices.rows), static_cast<Eigen::Index>(nb.k));
  for (std::size_t i = 0; i < nb.indices.rows; ++i)
    for (std::size_t t = 0; t < nb.k; ++t) gw(i, t) = grad_constructed.row(i).dot(y.row(nb.indices(i, t)));
  return gw;
}

/// Each point rebuilt from its k_sc latent neighbors within the same cloud, itself excluded.
template <typename T>
ConstructionResult<T> self_construct(const Matrix<T>& f, const Matrix<T>& x, std::size_t k_sc,
                                     SimilarityKind kind = SimilarityKind::Cosine) {
  if (f.rows() != x.rows()) throw ShapeMismatch("feature rows do not match point count");
  if (k_sc + 1 > static_cast<std::size_t>(x.rows())) {
    throw InvalidArgument("k_sc=" + std::to_string(k_sc) + " needs at least " + std::to_string(k_sc + 1) + " points");
  }
  const Matrix<T> s = similarity(kind, f, f);
  return cross_construct(softmax_weights(s, top_k_neighborhood(s, k_sc, true)), x);
}

template <typename T>
struct ChamferResult {
  T value = 0;
  std::vector<Index> p_to_q;  // nearest q for each p
  std::vector<Index> q_to_p;
};

template <typename T>
ChamferResult<T> chamfer(const Matrix<T>& p, const Matrix<T>& q) {
  if (p.rows() == 0 || q.rows() == 0) throw InvalidArgument("chamfer distance of an empty cloud");
  const auto np = static_cast<std::size_t>(p.rows());
  const auto nq = static_cast<std::size_t>(q.rows());
  ChamferResult<T> r;
  r.p_to_q.assign(np, 0);
  r.q_to_p.assign(nq, 0);
  std::vector<T> best_q(nq, std::numeric_limits<T>::infinity());
  T sum_p = 0;
  for (std::size_t i = 0; i < np; ++i) {
    T best = std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < nq; ++j) {
      const T dx = p(i, 0) - q(j, 0);
      const T dy = p(i, 1) - q(j, 1);
      const T dz = p(i, 2) - q(j, 2);
      const T d = dx * dx + dy * dy + dz * dz;
      if (d < best) {
        best = d;
        r.p_to_q[i] = static_cast<Index>(j);
      }
      if (d < best_q[j]) {
        best_q[j] = d;
        r.q_to_p[j] = static_cast<Index>(i);
      }
    }
    sum_p += best;
  }
  T sum_q = 0;
  for (const T d : best_q) sum_q += d;
  r.value = sum_p / static_cast<T>(np) + sum_q / static_cast<T>(nq);
  return r;
}

template <typename T>
T chamfer_distance(const Matrix<T>& p, const Matrix<T>& q) {
  return chamfer(p, q).value;
}

inline double chamfer_distance(const PointCloud& p, const PointCloud& q) {
  return chamfer(p.points, q.points).value;
}

/// Accumulates scale * dCD/dp and scale * dCD/dq; nearest indices are constants.
template <typename T>
void chamfer_backward(const Matrix<T>& p, const Matrix<T>& q, const ChamferResult<T>& r, T scale, Matrix<T>* grad_p,
                      Matrix<T>* grad_q) {
  const T cp = T(2) * scale / static_cast<T>(p.rows());
  const T cq = T(2) * scale / static_cast<T>(q.rows());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const auto j = r.p_to_q[static_cast<std::size_t>(i)];
    const auto diff = (p.row(i) - q.row(j)).eval();
    if (grad_p) grad_p->row(i) += cp * diff;
    if (grad_q) grad_q->row(j) -= cp * diff;
  }
  for (Eigen::Index j = 0; j < q.rows(); ++j) {
    const auto i = r.q_to_p[static_cast<std::size_t>(j)];
    const auto diff = (q.row(j) - p.row(i)).eval();
    if (grad_q) grad_q->row(j) += cq * diff;
    if (grad_p) grad_p->row(i) -= cq * diff;
  }
}

template <typename T>
T cross_loss(const Matrix<T>& y, const ConstructionResult<T>& yhat) {
  return chamfer_distance(y, yhat.constructed);
}

/// Euclidean k_m-neighborhood of each source point (self excluded) with
/// proximity weights v_il = exp(-|x_i - x_l|^2 / alpha).
template <typename T>
struct MappingNeighborhood {
  IndexTable indices;
  Matrix<T> weights;
};

template <typename T>
MappingNeighborhood<T> mapping_neighborhood(const Matrix<T>& x, std::size_t k_m, double alpha) {
  MappingNeighborhood<T> nb;
  nb.indices = knn_rows(x, k_m, true);
  nb.weights.resize(x.rows(), static_cast<Eigen::Index>(k_m));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (std::size_t t = 0; t < k_m; ++t)
      nb.weights(i, t) = std::exp(-(x.row(i) - x.row(nb.indices(i, t))).squaredNorm() / T(alpha));
  return nb;
}

template <typename T>
T mapping_loss(const MappingNeighborhood<T>& nb, const Matrix<T>& yhat) {
  const std::size_t n = nb.indices.rows;
  const std::size_t k = nb.indices.cols;
  if (static_cast<std::size_t>(yhat.rows()) != n) throw ShapeMismatch("mapping loss: row count mismatch");
  T sum = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < k; ++t) sum += nb.weights(i, t) * (yhat.row(i) - yhat.row(nb.indices(i, t))).squaredNorm();
  return sum / static_cast<T>(n * k);
}

template <typename T>
T mapping_loss(const Matrix<T>& x, const ConstructionResult<T>& yhat, std::size_t k_m, double alpha) {
  return mapping_loss(mapping_neighborhood(x, k_m, alpha), yhat.constructed);
}

template <typename T>
void mapping_loss_backward(const MappingNeighborhood<T>& nb, const Matrix<T>& yhat, T scale, Matrix<T>& grad) {
  const std::size_t n = nb.indices.rows;
  const std::size_t k = nb.indices.cols;
  const T c = T(2) * scale / static_cast<T>(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      const Index l = nb.indices(i, t);
      const auto g = (c * nb.weights(i, t) * (yhat.row(i) - yhat.row(l))).eval();
      grad.row(i) += g;
      grad.row(l) -= g;
    }
  }
}

template <typename T>
struct PairLoss {
  LossBreakdown breakdown;
  Matrix<T> grad_fx;  // empty unless gradients were requested
  Matrix<T> grad_fy;
  // Fingerprint of every discrete selection (top-k sets, Chamfer nearest
  // points); equal fingerprints mean the loss is on the same smooth piece.
  std::uint64_t selection_hash = 0;
};

namespace detail {

inline std::uint64_t hash_indices(std::uint64_t h, const std::vector<Index>& v) {
  for (Index x : v) {
    h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(x));
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace detail

/// Full objective for one (source, target) pair in the normalized frame, with
/// optional gradients w.r.t. both feature fields. Every top-k and nearest-point
/// selection is treated as a constant.
template <typename T>
PairLoss<T> total_loss(const Matrix<T>& x, const Matrix<T>& y, const Matrix<T>& fx, const Matrix<T>& fy,
                       const LossWeights& w, SimilarityKind kind = SimilarityKind::Cosine, bool with_grad = false) {
  w.validate();
  if (fx.rows() != x.rows() || fy.rows() != y.rows()) throw ShapeMismatch("feature rows do not match point count");
  const auto nx = static_cast<std::size_t>(x.rows());
  const auto ny = static_cast<std::size_t>(y.rows());
  const std::size_t kx = w.k_cc_full ? ny : w.k_cc;  // neighbors of source points in Y
  const std::size_t ky = w.k_cc_full ? nx : w.k_cc;

  const Matrix<T> s_xy = similarity(kind, fx, fy);
  const Matrix<T> s_yx = s_xy.transpose();
  const auto nb_xy = softmax_weights(s_xy, top_k_neighborhood(s_xy, kx, false));
  const auto nb_yx = softmax_weights(s_yx, top_k_neighborhood(s_yx, ky, false));
  const auto yhat_x = cross_construct(nb_xy, y);
  const auto xhat_y = cross_construct(nb_yx, x);

  const Matrix<T> s_xx = similarity(kind, fx, fx);
  const Matrix<T> s_yy = similarity(kind, fy, fy);
  if (w.k_sc + 1 > nx || w.k_sc + 1 > ny) throw InvalidArgument("k_sc too large for the clouds");
  const auto nb_xx = softmax_weights(s_xx, top_k_neighborhood(s_xx, w.k_sc, true));
  const auto nb_yy = softmax_weights(s_yy, top_k_neighborhood(s_yy, w.k_sc, true));
  const auto xhat_x = cross_construct(nb_xx, x);
  const auto yhat_y = cross_construct(nb_yy, y);

  const auto cd_cc_t = chamfer(y, yhat_x.constructed);
  const auto cd_cc_s = chamfer(x, xhat_y.constructed);
  const auto cd_sc_s = chamfer(x, xhat_x.constructed);
  const auto cd_sc_t = chamfer(y, yhat_y.constructed);
  const auto map_x = mapping_neighborhood(x, w.k_m, w.alpha);
  const auto map_y = mapping_neighborhood(y, w.k_m, w.alpha);

  PairLoss<T> out;
  auto& b = out.breakdown;
  b.cc_target = static_cast<double>(cd_cc_t.value);
  b.cc_source = static_cast<double>(cd_cc_s.value);
  b.sc_source = static_cast<double>(cd_sc_s.value);
  b.sc_target = static_cast<double>(cd_sc_t.value);
  b.map_source = static_cast<double>(mapping_loss(map_x, yhat_x.constructed));
  b.map_target = static_cast<double>(mapping_loss(map_y, xhat_y.constructed));
  b.total = weighted_total(b, w);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* t : {&nb_xy.indices, &nb_yx.indices, &nb_xx.indices, &nb_yy.indices}) h = detail::hash_indices(h, t->data);
  for (const auto* c : {&cd_cc_t, &cd_cc_s, &cd_sc_s, &cd_sc_t}) {
    h = detail::hash_indices(h, c->p_to_q);
    h = detail::hash_indices(h, c->q_to_p);
  }
  out.selection_hash = h;
  if (!with_grad) return out;

  const T lcc = T(w.lambda_cc);
  const T lsc = T(w.lambda_sc);
  const T lm = T(w.lambda_m);

  Matrix<T> g_yhat_x = Matrix<T>::Zero(yhat_x.constructed.rows(), 3);
  Matrix<T> g_xhat_y = Matrix<T>::Zero(xhat_y.constructed.rows(), 3);
  if (lcc != T(0)) {
    chamfer_backward<T>(y, yhat_x.constructed, cd_cc_t, lcc, nullptr, &g_yhat_x);
    chamfer_backward<T>(x, xhat_y.constructed, cd_cc_s, lcc, nullptr, &g_xhat_y);
  }
  if (lm != T(0)) {
    mapping_loss_backward(map_x, yhat_x.constructed, lm, g_yhat_x);
    mapping_loss_backward(map_y, xhat_y.constructed, lm, g_xhat_y);
  }
  Matrix<T> g_sxy = Matrix<T>::Zero(s_xy.rows(), s_xy.cols());
  softmax_backward(nb_xy, construct_backward(nb_xy, y, g_yhat_x), g_sxy);
  Matrix<T> g_syx = Matrix<T>::Zero(s_yx.rows(), s_yx.cols());
  softmax_backward(nb_yx, construct_backward(nb_yx, x, g_xhat_y), g_syx);
  g_sxy += g_syx.transpose();
  auto [gfx, gfy] = similarity_backward(kind, fx, fy, g_sxy);

  if (lsc != T(0)) {
    auto self_grad = [&](const Matrix<T>& pts, const Matrix<T>& f, const LatentNeighborhood<T>& nb,
                         const ConstructionResult<T>& rebuilt, const ChamferResult<T>& cd, Matrix<T>& gf) {
      Matrix<T> g_rebuilt = Matrix<T>::Zero(rebuilt.constructed.rows(), 3);
      chamfer_backward<T>(pts, rebuilt.constructed, cd, lsc, nullptr, &g_rebuilt);
      Matrix<T> g_s = Matrix<T>::Zero(f.rows(), f.rows());
      softmax_backward(nb, construct_backward(nb, pts, g_rebuilt), g_s);
      auto [ga, gb] = similarity_backward(kind, f, f, g_s);
      gf += ga + gb;
    };
    self_grad(x, fx, nb_xx, xhat_x, cd_sc_s, gfx);
    self_grad(y, fy, nb_yy, yhat_y, cd_sc_t, gfy);
  }
  out.grad_fx = std::move(gfx);
  out.grad_fy = std::move(gfy);
  return out;
}

}  // namespace dpc
