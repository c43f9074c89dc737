#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "dpc/common.hpp"
#include "dpc/geometry.hpp"
#include "dpc/random.hpp"

namespace dpc {

enum class GraphMode { StaticEuclidean, DynamicLatent };
enum class Mode { Train, Eval };

struct NetworkConfig {
  std::vector<std::size_t> edge_widths{96, 192, 384, 768};
  std::size_t knn_k = 27;
  double leaky_slope = 0.2;
  std::vector<std::size_t> head_widths{1044, 512};
  GraphMode graph_mode = GraphMode::StaticEuclidean;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  std::size_t out_dim() const { return head_widths.empty() ? 0 : head_widths.back(); }
  std::size_t concat_width() const { return std::accumulate(edge_widths.begin(), edge_widths.end(), std::size_t{0}); }

  void validate() const {
    if (edge_widths.size() != 4) throw InvalidArgument("edge_widths needs 4 entries");
    if (head_widths.size() != 2) throw InvalidArgument("head_widths needs 2 entries");
    for (auto w : edge_widths)
      if (w == 0) throw InvalidArgument("edge layer width must be positive");
    for (auto w : head_widths)
      if (w == 0) throw InvalidArgument("head layer width must be positive");
    if (knn_k == 0) throw InvalidArgument("knn_k must be positive");
    if (!(leaky_slope >= 0 && leaky_slope < 1)) throw InvalidArgument("leaky_slope must be in [0, 1)");
    if (!(bn_momentum > 0 && bn_momentum <= 1)) throw InvalidArgument("bn_momentum must be in (0, 1]");
    if (!(bn_eps > 0)) throw InvalidArgument("bn_eps must be positive");
  }

  bool operator==(const NetworkConfig&) const = default;
};

/// One linear map followed by batch norm. Edge layers see [h_i, h_j - h_i]
/// (weight has 2*in rows); head layers see h_i.
template <typename T>
struct LayerParams {
  Matrix<T> weight;  // in x out
  Matrix<T> gamma;   // 1 x out
  Matrix<T> beta;
  Matrix<T> running_mean;
  Matrix<T> running_var;
};

template <typename T>
struct NetworkParams {
  NetworkConfig config;
  std::vector<LayerParams<T>> layers;  // edge layers, then head layers
  std::uint64_t seed = 0;

  std::size_t num_edge_layers() const { return config.edge_widths.size(); }
};

/// Weights, BN scales and BN shifts, in a fixed order shared by gradients,
/// the optimizer and checkpoints.
template <typename T>
std::vector<Matrix<T>*> trainable_tensors(NetworkParams<T>& p) {
  std::vector<Matrix<T>*> out;
  for (auto& l : p.layers) {
    out.push_back(&l.weight);
    out.push_back(&l.gamma);
    out.push_back(&l.beta);
  }
  return out;
}

template <typename T>
std::vector<const Matrix<T>*> trainable_tensors(const NetworkParams<T>& p) {
  std::vector<const Matrix<T>*> out;
  for (const auto& l : p.layers) {
    out.push_back(&l.weight);
    out.push_back(&l.gamma);
    out.push_back(&l.beta);
  }
  return out;
}

inline std::string layer_name(std::size_t layer, std::size_t num_edge) {
  return layer < num_edge ? "edge" + std::to_string(layer) : "head" + std::to_string(layer - num_edge);
}

inline std::vector<std::string> trainable_names(const NetworkConfig& cfg) {
  std::vector<std::string> out;
  const auto ne = cfg.edge_widths.size();
  for (std::size_t l = 0; l < ne + cfg.head_widths.size(); ++l) {
    const auto base = layer_name(l, ne);
    out.push_back(base + ".weight");
    out.push_back(base + ".bn.gamma");
    out.push_back(base + ".bn.beta");
  }
  return out;
}

/// (rows, cols) of every layer's weight, edge layers first.
inline std::vector<std::pair<std::size_t, std::size_t>> weight_shapes(const NetworkConfig& cfg) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t in = 3;
  for (auto w : cfg.edge_widths) {
    out.emplace_back(2 * in, w);
    in = w;
  }
  in = cfg.concat_width();
  for (auto w : cfg.head_widths) {
    out.emplace_back(in, w);
    in = w;
  }
  return out;
}

/// Kaiming-uniform weights for leaky ReLU, unit BN scale, zero shift.
template <typename T>
NetworkParams<T> init_params(const NetworkConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  NetworkParams<T> p;
  p.config = cfg;
  p.seed = seed;
  Rng rng(seed);
  const double gain2 = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);
  for (const auto& [in, out] : weight_shapes(cfg)) {
    LayerParams<T> l;
    const double bound = std::sqrt(3.0 * gain2 / static_cast<double>(in));
    l.weight.resize(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = static_cast<T>(uniform(rng, -bound, bound));
    l.gamma = Matrix<T>::Ones(1, static_cast<Eigen::Index>(out));
    l.beta = Matrix<T>::Zero(1, static_cast<Eigen::Index>(out));
    l.running_mean = Matrix<T>::Zero(1, static_cast<Eigen::Index>(out));
    l.running_var = Matrix<T>::Ones(1, static_cast<Eigen::Index>(out));
    p.layers.push_back(std::move(l));
  }
  return p;
}

/// Intermediates of one train-mode forward pass over a batch of clouds.
template <typename T>
struct ForwardTape {
  struct Layer {
    Matrix<T> input;  // stacked rows of all clouds
    Matrix<T> pre;    // head: pre-BN activations; edge: u - v (per-point part)
    Matrix<T> v;      // edge only: neighbor part
    IndexTable graph; // edge only: global row indices
    Matrix<T> slot;      // edge only: winning neighbor slot per (row, channel)
    Matrix<T> selected;  // edge only: pre-BN value of the winning edge
    Matrix<T> mean;
    Matrix<T> inv_std;
    Matrix<T> var_unbiased;
    Matrix<T> output;
  };
  std::vector<Layer> layers;
  std::vector<std::size_t> offsets;  // first row of each cloud, plus total
  bool recorded = false;
};

template <typename T>
using ParamGrads = std::vector<Matrix<T>>;

namespace detail {

template <typename T>
T leaky(T z, T slope) {
  return z > T(0) ? z : slope * z;
}

template <typename T>
void check_finite(const Matrix<T>& m, const std::string& where) {
  if (!m.allFinite()) throw NumericalError("non-finite activations in " + where);
}

template <typename T>
void accumulate(T* __restrict acc, const T* __restrict x, Eigen::Index n) {
  for (Eigen::Index c = 0; c < n; ++c) acc[c] += x[c];
}

template <typename T>
void edge_sum(T* __restrict acc, const T* __restrict pi, const T* __restrict vj, Eigen::Index n) {
  for (Eigen::Index c = 0; c < n; ++c) acc[c] += pi[c] + vj[c];
}

template <typename T>
void edge_sqdev(T* __restrict acc, const T* __restrict pi, const T* __restrict vj, const T* __restrict mu,
                Eigen::Index n) {
  for (Eigen::Index c = 0; c < n; ++c) {
    const T d = pi[c] + vj[c] - mu[c];
    acc[c] += d * d;
  }
}

// Max over the k edges of row i after BN and activation; slot receives the first winning neighbor.
template <typename T>
void pool_row(T* __restrict yi, T* __restrict slot, const T* __restrict pi, const T* __restrict v,
              const IndexTable& graph, std::size_t i, std::size_t k, Eigen::Index n, const T* __restrict scale,
              const T* __restrict shift, T slope) {
  for (std::size_t t = 0; t < k; ++t) {
    const T* __restrict vj = v + static_cast<std::size_t>(graph(i, t)) * static_cast<std::size_t>(n);
    const T tt = static_cast<T>(t);
    if (t == 0) {
      for (Eigen::Index c = 0; c < n; ++c) {
        const T z = (pi[c] + vj[c]) * scale[c] + shift[c];
        yi[c] = std::max(z, slope * z);
        slot[c] = T(0);
      }
      continue;
    }
    for (Eigen::Index c = 0; c < n; ++c) {
      const T z = (pi[c] + vj[c]) * scale[c] + shift[c];
      const T a = std::max(z, slope * z);
      const T prev = yi[c];
      slot[c] = a > prev ? tt : slot[c];
      yi[c] = std::max(prev, a);
    }
  }
}

// gv_j += ge_i on the channels where neighbor slot t of row i won the pool.
template <typename T>
void scatter_winners(T* __restrict gvj, const T* __restrict ge, const T* __restrict slot, T t, Eigen::Index n) {
  for (Eigen::Index c = 0; c < n; ++c) gvj[c] += slot[c] == t ? ge[c] : T(0);
}

// Row-stacked kNN graph with global indices.
template <typename T>
IndexTable batched_graph(const Matrix<T>& h, const std::vector<std::size_t>& offsets, std::size_t k) {
  const std::size_t total = offsets.back();
  IndexTable g(total, k);
  for (std::size_t c = 0; c + 1 < offsets.size(); ++c) {
    const auto begin = static_cast<Eigen::Index>(offsets[c]);
    const auto n = static_cast<Eigen::Index>(offsets[c + 1] - offsets[c]);
    const Matrix<T> block = h.middleRows(begin, n);
    const IndexTable local = knn_rows(block, k, true);
    for (std::size_t i = 0; i < local.rows; ++i)
      for (std::size_t t = 0; t < k; ++t) g(offsets[c] + i, t) = static_cast<Index>(offsets[c] + local(i, t));
  }
  return g;
}

}  // namespace detail

/// Per-point embeddings for a batch of normalized clouds. Train mode normalizes
/// with statistics over every point (or edge) of the whole batch and, when a
/// tape is supplied, records what backward() needs. Running statistics are not
/// touched here; see update_running_stats().
template <typename T>
std::vector<Matrix<T>> embed_batch(const NetworkParams<T>& params, std::span<const Matrix<T>> clouds, Mode mode,
                                   ForwardTape<T>* tape = nullptr) {
  const auto& cfg = params.config;
  if (mode == Mode::Eval && clouds.size() > 1) {
    // One cloud at a time so results are bitwise independent of the batch.
    std::vector<Matrix<T>> out;
    for (const auto& c : clouds)
      out.push_back(std::move(embed_batch<T>(params, std::span<const Matrix<T>>(&c, 1), mode, tape).front()));
    return out;
  }
  const T slope = T(cfg.leaky_slope);
  const T eps = T(cfg.bn_eps);
  std::vector<std::size_t> offsets{0};
  for (const auto& c : clouds) {
    if (c.cols() != 3) throw ShapeMismatch("clouds must be n x 3");
    if (static_cast<std::size_t>(c.rows()) < cfg.knn_k + 1) {
      throw InvalidArgument("cloud with " + std::to_string(c.rows()) + " points is too small for a " +
                            std::to_string(cfg.knn_k) + "-NN graph");
    }
    offsets.push_back(offsets.back() + static_cast<std::size_t>(c.rows()));
  }
  const std::size_t total = offsets.back();
  if (total == 0) throw InvalidArgument("empty batch");
  Matrix<T> h(static_cast<Eigen::Index>(total), 3);
  for (std::size_t c = 0; c < clouds.size(); ++c) h.middleRows(static_cast<Eigen::Index>(offsets[c]), clouds[c].rows()) = clouds[c];

  if (tape) {
    tape->layers.clear();
    tape->offsets = offsets;
    tape->recorded = false;
  }
  const bool train = mode == Mode::Train;
  const std::size_t ne = params.num_edge_layers();
  const std::size_t k = cfg.knn_k;
  IndexTable graph = detail::batched_graph(h, offsets, k);
  std::vector<Matrix<T>> stage_outputs;

  for (std::size_t l = 0; l < ne; ++l) {
    const auto& lp = params.layers[l];
    const Eigen::Index in = h.cols();
    const Eigen::Index out = lp.weight.cols();
    if (cfg.graph_mode == GraphMode::DynamicLatent && l > 0) graph = detail::batched_graph(h, offsets, k);
    // W [h_i ; h_j - h_i] = (Wa - Wb) h_i + Wb h_j
    const Matrix<T> v = h * lp.weight.bottomRows(in);
    const Matrix<T> p = h * lp.weight.topRows(in) - v;

    Matrix<T> mean(1, out), inv_std(1, out), var_unbiased(1, out);
    if (train) {
      const T m = static_cast<T>(total * k);
      std::vector<T> sum(static_cast<std::size_t>(out), T(0)), sq(static_cast<std::size_t>(out), T(0));
      for (std::size_t i = 0; i < total; ++i)
        for (std::size_t t = 0; t < k; ++t) detail::edge_sum(sum.data(), p.data() + i * out, v.data() + graph(i, t) * out, out);
      for (Eigen::Index c = 0; c < out; ++c) mean(0, c) = sum[static_cast<std::size_t>(c)] / m;
      for (std::size_t i = 0; i < total; ++i)
        for (std::size_t t = 0; t < k; ++t)
          detail::edge_sqdev(sq.data(), p.data() + i * out, v.data() + graph(i, t) * out, mean.data(), out);
      const Matrix<T> sqm = Eigen::Map<const Matrix<T>>(sq.data(), 1, out);
      const Matrix<T> var = sqm / m;
      var_unbiased = m > T(1) ? Matrix<T>(sqm / (m - T(1))) : var;
      inv_std = (var.array() + eps).rsqrt();
    } else {
      mean = lp.running_mean;
      inv_std = (lp.running_var.array() + eps).rsqrt();
    }
    const Matrix<T> scale = lp.gamma.cwiseProduct(inv_std);
    const Matrix<T> shift = lp.beta - mean.cwiseProduct(scale);

    Matrix<T> y(static_cast<Eigen::Index>(total), out);
    Matrix<T> slot(static_cast<Eigen::Index>(total), out);
    for (std::size_t i = 0; i < total; ++i) {
      detail::pool_row(y.data() + i * out, slot.data() + i * out, p.data() + i * out, v.data(), graph, i, k, out,
                       scale.data(), shift.data(), slope);
    }
    detail::check_finite(y, layer_name(l, ne));
    if (tape) {
      typename ForwardTape<T>::Layer rec;
      rec.input = h;
      rec.pre = p;
      rec.v = v;
      rec.graph = graph;
      rec.selected.resize(static_cast<Eigen::Index>(total), out);
      for (std::size_t i = 0; i < total; ++i)
        for (Eigen::Index c = 0; c < out; ++c) {
          const auto j = graph(i, static_cast<std::size_t>(slot(static_cast<Eigen::Index>(i), c)));
          rec.selected(static_cast<Eigen::Index>(i), c) = p(static_cast<Eigen::Index>(i), c) + v(j, c);
        }
      rec.slot = std::move(slot);
      rec.mean = mean;
      rec.inv_std = inv_std;
      rec.var_unbiased = var_unbiased;
      rec.output = y;
      tape->layers.push_back(std::move(rec));
    }
    stage_outputs.push_back(y);
    h = std::move(y);
  }

  Matrix<T> x(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(cfg.concat_width()));
  Eigen::Index col = 0;
  for (const auto& s : stage_outputs) {
    x.middleCols(col, s.cols()) = s;
    col += s.cols();
  }
  for (std::size_t l = ne; l < params.layers.size(); ++l) {
    const auto& lp = params.layers[l];
    const Matrix<T> pre = x * lp.weight;
    Matrix<T> mean, inv_std, var_unbiased;
    if (train) {
      const T m = static_cast<T>(total);
      mean = pre.colwise().mean();
      const Matrix<T> sq = (pre.rowwise() - mean.row(0)).array().square().colwise().sum();
      inv_std = ((sq / m).array() + eps).rsqrt();
      var_unbiased = m > T(1) ? Matrix<T>(sq / (m - T(1))) : Matrix<T>(sq / m);
    } else {
      mean = lp.running_mean;
      inv_std = (lp.running_var.array() + eps).rsqrt();
    }
    const Matrix<T> scale = lp.gamma.cwiseProduct(inv_std);
    const Matrix<T> shift = lp.beta - mean.cwiseProduct(scale);
    Matrix<T> z = (pre.array().rowwise() * scale.row(0).array()).rowwise() + shift.row(0).array();
    Matrix<T> y = z.unaryExpr([slope](T a) { return detail::leaky(a, slope); });
    detail::check_finite(y, layer_name(l, ne));
    if (tape) {
      typename ForwardTape<T>::Layer rec;
      rec.input = std::move(x);
      rec.pre = pre;
      rec.mean = mean;
      rec.inv_std = inv_std;
      rec.var_unbiased = var_unbiased;
      rec.output = y;
      tape->layers.push_back(std::move(rec));
    }
    x = std::move(y);
  }
  if (tape) tape->recorded = train;

  std::vector<Matrix<T>> out;
  out.reserve(clouds.size());
  for (std::size_t c = 0; c < clouds.size(); ++c)
    out.emplace_back(x.middleRows(static_cast<Eigen::Index>(offsets[c]), clouds[c].rows()));
  return out;
}

template <typename T>
Matrix<T> embed(const NetworkParams<T>& params, const PointCloud& pc, Mode mode) {
  const Matrix<T> coords = pc.points.template cast<T>();
  return std::move(embed_batch<T>(params, std::span<const Matrix<T>>(&coords, 1), mode).front());
}

/// Running-statistics update from the batch statistics of a recorded pass.
template <typename T>
void update_running_stats(NetworkParams<T>& params, const ForwardTape<T>& tape) {
  if (!tape.recorded) throw Error("running-statistics update needs a recorded train-mode pass");
  const T mom = T(params.config.bn_momentum);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& lp = params.layers[l];
    lp.running_mean = (T(1) - mom) * lp.running_mean + mom * tape.layers[l].mean;
    lp.running_var = (T(1) - mom) * lp.running_var + mom * tape.layers[l].var_unbiased;
  }
}

/// Exact reverse-mode gradients of the recorded train-mode computation.
/// Neighbor selection is a constant; max-pooling routes to the winning neighbor.
template <typename T>
ParamGrads<T> backward(const NetworkParams<T>& params, const ForwardTape<T>& tape,
                       std::span<const Matrix<T>> upstream) {
  if (!tape.recorded) throw Error("backward called without a recorded train-mode forward pass");
  const auto& cfg = params.config;
  const std::size_t ne = params.num_edge_layers();
  const std::size_t nl = params.layers.size();
  if (upstream.size() + 1 != tape.offsets.size()) throw ShapeMismatch("upstream gradient count does not match batch");
  const std::size_t total = tape.offsets.back();
  const T slope = T(cfg.leaky_slope);

  Matrix<T> g(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(cfg.out_dim()));
  for (std::size_t c = 0; c < upstream.size(); ++c) {
    const auto rows = static_cast<Eigen::Index>(tape.offsets[c + 1] - tape.offsets[c]);
    if (upstream[c].rows() != rows || upstream[c].cols() != g.cols()) {
      throw ShapeMismatch("upstream gradient " + std::to_string(c) + " has the wrong shape");
    }
    g.middleRows(static_cast<Eigen::Index>(tape.offsets[c]), rows) = upstream[c];
  }

  ParamGrads<T> grads(3 * nl);
  const T m_head = static_cast<T>(total);
  for (std::size_t l = nl; l-- > ne;) {
    const auto& lp = params.layers[l];
    const auto& rec = tape.layers[l];
    const Matrix<T> xhat = (rec.pre.rowwise() - rec.mean.row(0)).array().rowwise() * rec.inv_std.row(0).array();
    const Matrix<T> z = (xhat.array().rowwise() * lp.gamma.row(0).array()).rowwise() + lp.beta.row(0).array();
    const Matrix<T> gz = g.array() * z.unaryExpr([slope](T a) { return a > T(0) ? T(1) : slope; }).array();
    grads[3 * l + 1] = (gz.cwiseProduct(xhat)).colwise().sum();
    grads[3 * l + 2] = gz.colwise().sum();
    const Matrix<T> gxhat = gz.array().rowwise() * lp.gamma.row(0).array();
    const Matrix<T> s1 = gxhat.colwise().sum() / m_head;
    const Matrix<T> s2 = gxhat.cwiseProduct(xhat).colwise().sum() / m_head;
    const Matrix<T> gpre = ((gxhat.rowwise() - s1.row(0)).array() - xhat.array().rowwise() * s2.row(0).array()).rowwise() *
                           rec.inv_std.row(0).array();
    grads[3 * l] = rec.input.transpose() * gpre;
    g = gpre * lp.weight.transpose();
  }

  // g now holds d/d(concat); split it back into stage outputs.
  std::vector<Matrix<T>> g_stage(ne);
  {
    Eigen::Index col = 0;
    for (std::size_t l = 0; l < ne; ++l) {
      const auto w = static_cast<Eigen::Index>(cfg.edge_widths[l]);
      g_stage[l] = g.middleCols(col, w);
      col += w;
    }
  }

  const std::size_t k = cfg.knn_k;
  const T m_edge = static_cast<T>(total * k);
  Matrix<T> g_next;  // gradient flowing into this stage's output from the next stage
  for (std::size_t l = ne; l-- > 0;) {
    const auto& lp = params.layers[l];
    const auto& rec = tape.layers[l];
    const Eigen::Index out = lp.weight.cols();
    const Eigen::Index in = rec.input.cols();
    Matrix<T> gy = g_stage[l];
    if (l + 1 < ne) gy += g_next;

    // Sparse part: only the pooled edge of each (row, channel) receives gradient.
    Matrix<T> gp = Matrix<T>::Zero(static_cast<Eigen::Index>(total), out);
    Matrix<T> gv = Matrix<T>::Zero(static_cast<Eigen::Index>(total), out);
    Matrix<T> ggamma = Matrix<T>::Zero(1, out), gbeta = Matrix<T>::Zero(1, out);
    Matrix<T> s1 = Matrix<T>::Zero(1, out), s2 = Matrix<T>::Zero(1, out);
    const Matrix<T> xhat = (rec.selected.rowwise() - rec.mean.row(0)).array().rowwise() * rec.inv_std.row(0).array();
    const Matrix<T> z = (xhat.array().rowwise() * lp.gamma.row(0).array()).rowwise() + lp.beta.row(0).array();
    const Matrix<T> gz = gy.array() * z.unaryExpr([slope](T a) { return a > T(0) ? T(1) : slope; }).array();
    ggamma = gz.cwiseProduct(xhat).colwise().sum();
    gbeta = gz.colwise().sum();
    const Matrix<T> gxhat = gz.array().rowwise() * lp.gamma.row(0).array();
    s1 = gxhat.colwise().sum() / m_edge;
    s2 = gxhat.cwiseProduct(xhat).colwise().sum() / m_edge;
    const Matrix<T> ge_sel = gxhat.array().rowwise() * rec.inv_std.row(0).array();
    gp += ge_sel;
    for (std::size_t i = 0; i < total; ++i)
      for (std::size_t t = 0; t < k; ++t)
        detail::scatter_winners(gv.data() + rec.graph(i, t) * out, ge_sel.data() + i * out, rec.slot.data() + i * out,
                                static_cast<T>(t), out);
    // Dense part of the BN backward, present on every edge (i, j):
    // dE = a + b * (p_i + v_j). Summed per endpoint:
    // gp_i += k a + b (k p_i + sum_t v_j), gv_j += indeg_j (a + b v_j) + b sum_{i->j} p_i.
    const Matrix<T> a = -(rec.inv_std.cwiseProduct(s1) - rec.inv_std.cwiseProduct(rec.inv_std).cwiseProduct(s2).cwiseProduct(rec.mean));
    const Matrix<T> b = -rec.inv_std.cwiseProduct(rec.inv_std).cwiseProduct(s2);
    Matrix<T> vsum = Matrix<T>::Zero(static_cast<Eigen::Index>(total), out);
    Matrix<T> psum = Matrix<T>::Zero(static_cast<Eigen::Index>(total), out);
    std::vector<T> indeg(total, T(0));
    for (std::size_t i = 0; i < total; ++i) {
      const T* pi = rec.pre.data() + i * out;
      T* vs = vsum.data() + i * out;
      for (std::size_t t = 0; t < k; ++t) {
        const auto j = static_cast<std::size_t>(rec.graph(i, t));
        detail::accumulate(vs, rec.v.data() + j * out, out);
        detail::accumulate(psum.data() + j * out, pi, out);
        indeg[j] += T(1);
      }
    }
    const T kk = static_cast<T>(k);
    const Eigen::Map<const Vector<T>> deg(indeg.data(), static_cast<Eigen::Index>(total));
    gp.array() += ((kk * rec.pre + vsum).array().rowwise() * b.row(0).array()).rowwise() + kk * a.row(0).array();
    gv.array() += (((rec.v.array().rowwise() * b.row(0).array()).rowwise() + a.row(0).array()).colwise() * deg.array()) +
                  psum.array().rowwise() * b.row(0).array();
    // p = h Wa - v, v = h Wb
    const Matrix<T> gu = gp;
    const Matrix<T> gv_total = gv - gp;
    Matrix<T> gw(2 * in, out);
    gw.topRows(in) = rec.input.transpose() * gu;
    gw.bottomRows(in) = rec.input.transpose() * gv_total;
    grads[3 * l] = std::move(gw);
    grads[3 * l + 1] = ggamma;
    grads[3 * l + 2] = gbeta;
    if (l > 0) g_next = gu * lp.weight.topRows(in).transpose() + gv_total * lp.weight.bottomRows(in).transpose();
  }
  return grads;
}

}  // namespace dpc
