#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <utility>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dpc/affinity.hpp"
#include "dpc/checkpoint.hpp"
#include "dpc/config.hpp"
#include "dpc/feature_net.hpp"
#include "dpc/losses.hpp"
#include "dpc/optimizer.hpp"
#include "dpc/random.hpp"

namespace dpc {

struct TrainConfig {
  std::size_t batch_size = 8;
  double learning_rate = 0.0003;
  AdamOptions adam;
  std::vector<std::size_t> lr_drop_epochs{6, 9};
  double lr_drop_factor = 0.1;
  std::size_t epochs = 300;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // epochs between periodic checkpoints; 0 disables
  LossWeights loss;
  SimilarityKind similarity = SimilarityKind::Cosine;
  NetworkConfig network;

  void validate() const {
    if (!(learning_rate >= 0)) throw InvalidArgument("learning_rate must be >= 0");
    if (!(lr_drop_factor > 0 && lr_drop_factor <= 1)) throw InvalidArgument("lr_drop_factor must be in (0, 1]");
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
    loss.validate();
    network.validate();
  }

  /// Base rate times the drop factor once per drop epoch already reached
  /// (epochs counted from 0).
  double lr_at_epoch(std::size_t epoch) const {
    double lr = learning_rate;
    for (auto d : lr_drop_epochs)
      if (epoch >= d) lr *= lr_drop_factor;
    return lr;
  }
};

inline const std::vector<std::string>& train_config_keys() {
  static const std::vector<std::string> keys{
      "batch_size", "learning_rate", "beta1", "beta2", "adam_eps", "weight_decay", "lr_drop_epochs",
      "lr_drop_factor", "epochs", "seed", "checkpoint_every", "lambda_cc", "lambda_sc", "lambda_m", "alpha",
      "k_cc", "k_sc", "k_m", "k_cc_full", "similarity", "edge_widths", "knn_k", "leaky_slope", "head_widths",
      "graph_mode"};
  return keys;
}

inline TrainConfig train_config_from(const KeyValues& kv) {
  TrainConfig c;
  auto sizes = [](const std::vector<std::uint64_t>& v) { return std::vector<std::size_t>(v.begin(), v.end()); };
  c.batch_size = kv.get_uint("batch_size", c.batch_size);
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.adam.beta1 = kv.get_double("beta1", c.adam.beta1);
  c.adam.beta2 = kv.get_double("beta2", c.adam.beta2);
  c.adam.eps = kv.get_double("adam_eps", c.adam.eps);
  c.adam.weight_decay = kv.get_double("weight_decay", c.adam.weight_decay);
  c.lr_drop_epochs = sizes(kv.get_uint_list("lr_drop_epochs", {6, 9}));
  c.lr_drop_factor = kv.get_double("lr_drop_factor", c.lr_drop_factor);
  c.epochs = kv.get_uint("epochs", c.epochs);
  c.seed = kv.get_uint("seed", c.seed);
  c.checkpoint_every = kv.get_uint("checkpoint_every", c.checkpoint_every);
  c.loss.lambda_cc = kv.get_double("lambda_cc", c.loss.lambda_cc);
  c.loss.lambda_sc = kv.get_double("lambda_sc", c.loss.lambda_sc);
  c.loss.lambda_m = kv.get_double("lambda_m", c.loss.lambda_m);
  c.loss.alpha = kv.get_double("alpha", c.loss.alpha);
  c.loss.k_cc = kv.get_uint("k_cc", c.loss.k_cc);
  c.loss.k_sc = kv.get_uint("k_sc", c.loss.k_sc);
  c.loss.k_m = kv.get_uint("k_m", c.loss.k_m);
  c.loss.k_cc_full = kv.get_bool("k_cc_full", c.loss.k_cc_full);
  const auto sim = kv.get_string("similarity", "cosine");
  if (sim == "cosine") c.similarity = SimilarityKind::Cosine;
  else if (sim == "dot") c.similarity = SimilarityKind::Dot;
  else throw UsageError("similarity must be 'cosine' or 'dot'");
  c.network.edge_widths = sizes(kv.get_uint_list("edge_widths", {96, 192, 384, 768}));
  c.network.knn_k = kv.get_uint("knn_k", c.network.knn_k);
  c.network.leaky_slope = kv.get_double("leaky_slope", c.network.leaky_slope);
  c.network.head_widths = sizes(kv.get_uint_list("head_widths", {1044, 512}));
  const auto gm = kv.get_string("graph_mode", "static-euclidean");
  if (gm == "static-euclidean") c.network.graph_mode = GraphMode::StaticEuclidean;
  else if (gm == "dynamic-latent") c.network.graph_mode = GraphMode::DynamicLatent;
  else throw UsageError("graph_mode must be 'static-euclidean' or 'dynamic-latent'");
  return c;
}

inline KeyValues to_key_values(const TrainConfig& c) {
  KeyValues kv;
  auto real = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  kv.set("batch_size", std::to_string(c.batch_size));
  kv.set("learning_rate", real(c.learning_rate));
  kv.set("beta1", real(c.adam.beta1));
  kv.set("beta2", real(c.adam.beta2));
  kv.set("adam_eps", real(c.adam.eps));
  kv.set("weight_decay", real(c.adam.weight_decay));
  kv.set("lr_drop_epochs", join_uints(c.lr_drop_epochs));
  kv.set("lr_drop_factor", real(c.lr_drop_factor));
  kv.set("epochs", std::to_string(c.epochs));
  kv.set("seed", std::to_string(c.seed));
  kv.set("checkpoint_every", std::to_string(c.checkpoint_every));
  kv.set("lambda_cc", real(c.loss.lambda_cc));
  kv.set("lambda_sc", real(c.loss.lambda_sc));
  kv.set("lambda_m", real(c.loss.lambda_m));
  kv.set("alpha", real(c.loss.alpha));
  kv.set("k_cc", std::to_string(c.loss.k_cc));
  kv.set("k_sc", std::to_string(c.loss.k_sc));
  kv.set("k_m", std::to_string(c.loss.k_m));
  kv.set("k_cc_full", c.loss.k_cc_full ? "true" : "false");
  kv.set("similarity", c.similarity == SimilarityKind::Cosine ? "cosine" : "dot");
  kv.set("edge_widths", join_uints(c.network.edge_widths));
  kv.set("knn_k", std::to_string(c.network.knn_k));
  kv.set("leaky_slope", real(c.network.leaky_slope));
  kv.set("head_widths", join_uints(c.network.head_widths));
  kv.set("graph_mode", c.network.graph_mode == GraphMode::StaticEuclidean ? "static-euclidean" : "dynamic-latent");
  return kv;
}

enum class PairingMode { AnyPair, WithinCategory };

/// Training clouds (already normalized). Only coordinates are held here.
struct PairDataset {
  std::vector<PointCloud> clouds;
  std::vector<std::string> categories;  // empty, or one label per cloud
  PairingMode pairing = PairingMode::AnyPair;
};

struct CloudPair {
  std::size_t source = 0;
  std::size_t target = 0;
  bool operator==(const CloudPair&) const = default;
};

/// Ordered pairs (source != target) drawn uniformly from the valid set.
inline std::vector<CloudPair> next_batch(const PairDataset& ds, std::size_t batch_size, Rng& rng) {
  const std::size_t n = ds.clouds.size();
  std::vector<CloudPair> out;
  out.reserve(batch_size);
  if (ds.pairing == PairingMode::AnyPair) {
    if (n < 2) throw InvalidArgument("pairing needs at least 2 clouds");
    for (std::size_t b = 0; b < batch_size; ++b) {
      const auto r = uniform_index(rng, n * (n - 1));
      const std::size_t s = r / (n - 1);
      std::size_t t = r % (n - 1);
      if (t >= s) ++t;
      out.push_back({s, t});
    }
    return out;
  }
  if (ds.categories.size() != n) throw InvalidArgument("within-category pairing needs one label per cloud");
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) groups[ds.categories[i]].push_back(i);
  std::uint64_t total = 0;
  for (const auto& [label, members] : groups) total += members.size() * (members.size() - 1);
  if (total == 0) throw InvalidArgument("no category has at least 2 clouds");
  for (std::size_t b = 0; b < batch_size; ++b) {
    auto r = uniform_index(rng, total);
    for (const auto& [label, members] : groups) {
      const std::uint64_t m = members.size();
      if (r < m * (m - 1)) {
        const auto s = r / (m - 1);
        auto t = r % (m - 1);
        if (t >= s) ++t;
        out.push_back({members[s], members[t]});
        break;
      }
      r -= m * (m - 1);
    }
  }
  return out;
}

/// One optimization step on a batch of pairs: joint forward of every cloud in
/// the batch, objective averaged over pairs, exact backward, Adam update.
template <typename T>
LossBreakdown train_step(NetworkParams<T>& params, AdamState<T>& adam, const PairDataset& ds,
                         const std::vector<CloudPair>& pairs, const TrainConfig& cfg, double lr) {
  if (pairs.empty()) throw InvalidArgument("empty batch");
  std::vector<Matrix<T>> coords;
  coords.reserve(2 * pairs.size());
  for (const auto& pr : pairs) {
    coords.push_back(ds.clouds.at(pr.source).points.template cast<T>());
    coords.push_back(ds.clouds.at(pr.target).points.template cast<T>());
  }
  ForwardTape<T> tape;
  const auto feats = embed_batch<T>(params, coords, Mode::Train, &tape);

  LossBreakdown mean;
  std::vector<Matrix<T>> upstream(coords.size());
  const T inv_batch = T(1) / static_cast<T>(pairs.size());
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    auto pl = total_loss<T>(coords[2 * b], coords[2 * b + 1], feats[2 * b], feats[2 * b + 1], cfg.loss, cfg.similarity,
                            true);
    if (!std::isfinite(pl.breakdown.total) || !pl.grad_fx.allFinite() || !pl.grad_fy.allFinite()) {
      const auto& b_ = pl.breakdown;
      throw NumericalError("non-finite loss for pair (" + ds.clouds[pairs[b].source].id + ", " +
                           ds.clouds[pairs[b].target].id + "): cc=" + std::to_string(b_.cc_target) + "/" +
                           std::to_string(b_.cc_source) + " sc=" + std::to_string(b_.sc_source) + "/" +
                           std::to_string(b_.sc_target) + " map=" + std::to_string(b_.map_source) + "/" +
                           std::to_string(b_.map_target));
    }
    mean += pl.breakdown;
    upstream[2 * b] = pl.grad_fx * inv_batch;
    upstream[2 * b + 1] = pl.grad_fy * inv_batch;
  }
  mean /= static_cast<double>(pairs.size());

  auto grads = backward<T>(params, tape, upstream);
  update_running_stats(params, tape);
  adam_update(trainable_tensors(params), grads, adam, cfg.adam, lr);
  return mean;
}

/// Training state: parameters, optimizer moments, pair-sampling stream and
/// progress counters. Everything needed to continue a run bit-for-bit.
template <typename T>
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg)
      : cfg_(std::move(cfg)),
        params_(init_params<T>(cfg_.network, derive_seed(cfg_.seed, 1))),
        adam_(make_adam_state(trainable_tensors(std::as_const(params_)))),
        rng_(derive_seed(cfg_.seed, 2)) {
    cfg_.validate();
  }

  static Trainer resume(const std::filesystem::path& path) {
    const Archive ar = read_archive(path);
    if (!ar.meta.contains("train_state")) throw CorruptFile(path.string() + ": no training state in checkpoint");
    const auto& st = ar.meta.at("train_state");
    KeyValues kv;
    for (const auto& item : st.at("config").items()) kv.set(item.key(), item.value().get<std::string>());
    Trainer t(train_config_from(kv));
    t.params_ = params_from_archive<T>(ar, &t.cfg_.network);
    const auto names = trainable_names(t.cfg_.network);
    for (std::size_t i = 0; i < names.size(); ++i) {
      t.adam_.m[i] = load_like(ar, "adam.m." + names[i], t.adam_.m[i]);
      t.adam_.v[i] = load_like(ar, "adam.v." + names[i], t.adam_.v[i]);
    }
    t.adam_.step = st.at("adam_step").get<std::uint64_t>();
    t.step_ = st.at("step").get<std::uint64_t>();
    t.epoch_ = st.at("epoch").get<std::uint64_t>();
    set_rng_state(t.rng_, st.at("rng").get<std::string>());
    return t;
  }

  void save(const std::filesystem::path& path) const {
    Archive ar;
    add_params(ar, params_);
    const auto names = trainable_names(cfg_.network);
    for (std::size_t i = 0; i < names.size(); ++i) {
      ar.tensors.emplace_back("adam.m." + names[i], adam_.m[i].template cast<double>());
      ar.tensors.emplace_back("adam.v." + names[i], adam_.v[i].template cast<double>());
    }
    nlohmann::json config = nlohmann::json::object();
    const KeyValues kv = to_key_values(cfg_);
    for (const auto& [k, v] : kv.values()) config[k] = v;
    ar.meta["train_state"] = {{"step", step_},
                              {"epoch", epoch_},
                              {"adam_step", adam_.step},
                              {"rng", rng_state(rng_)},
                              {"config", config}};
    write_archive(path, ar);
  }

  std::size_t steps_per_epoch(const PairDataset& ds) const {
    return (ds.clouds.size() + cfg_.batch_size - 1) / cfg_.batch_size;
  }

  double current_lr() const { return cfg_.lr_at_epoch(epoch_); }

  /// Draws a batch and runs one step at the current epoch's learning rate.
  LossBreakdown step(const PairDataset& ds) {
    const auto pairs = next_batch(ds, cfg_.batch_size, rng_);
    const auto loss = train_step(params_, adam_, ds, pairs, cfg_, current_lr());
    ++step_;
    return loss;
  }

  void finish_epoch() { ++epoch_; }

  const TrainConfig& config() const { return cfg_; }
  const NetworkParams<T>& params() const { return params_; }
  NetworkParams<T>& params() { return params_; }
  const AdamState<T>& adam() const { return adam_; }
  std::uint64_t steps_done() const { return step_; }
  std::uint64_t epoch() const { return epoch_; }

 private:
  static Matrix<T> load_like(const Archive& ar, const std::string& name, const Matrix<T>& like) {
    const auto& m = ar.get(name);
    if (m.rows() != like.rows() || m.cols() != like.cols()) throw ShapeMismatch("optimizer state shape for " + name);
    return m.template cast<T>();
  }

  TrainConfig cfg_;
  NetworkParams<T> params_;
  AdamState<T> adam_;
  Rng rng_;
  std::uint64_t step_ = 0;
  std::uint64_t epoch_ = 0;
};

inline std::string loss_csv_header() {
  return "step,epoch,cc_target,cc_source,sc_source,sc_target,map_source,map_target,total,lr";
}

inline std::string loss_csv_row(std::uint64_t step, std::uint64_t epoch, const LossBreakdown& b, double lr) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%llu,%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g",
                static_cast<unsigned long long>(step), static_cast<unsigned long long>(epoch), b.cc_target,
                b.cc_source, b.sc_source, b.sc_target, b.map_source, b.map_target, b.total, lr);
  return buf;
}

struct FitOptions {
  std::optional<std::filesystem::path> resume_from;
  std::function<void(std::uint64_t epoch, const LossBreakdown& epoch_mean)> on_epoch;
};

/// Runs the configured number of epochs, writing `loss.csv`, periodic
/// `checkpoint_epoch_NNNN.ckpt` files and `final.ckpt` into out_dir.
template <typename T>
std::filesystem::path fit(const PairDataset& ds, const TrainConfig& cfg, const std::filesystem::path& out_dir,
                          const FitOptions& opts = {}) {
  std::filesystem::create_directories(out_dir);
  Trainer<T> trainer = opts.resume_from ? Trainer<T>::resume(*opts.resume_from) : Trainer<T>(cfg);
  const auto csv_path = out_dir / "loss.csv";
  std::ofstream csv(csv_path, opts.resume_from ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  if (!opts.resume_from) csv << loss_csv_header() << '\n';

  const std::size_t per_epoch = trainer.steps_per_epoch(ds);
  const std::size_t epochs = trainer.config().epochs;
  while (trainer.epoch() < epochs) {
    LossBreakdown epoch_mean;
    for (std::size_t s = 0; s < per_epoch; ++s) {
      const double lr = trainer.current_lr();
      const auto loss = trainer.step(ds);
      csv << loss_csv_row(trainer.steps_done(), trainer.epoch(), loss, lr) << '\n';
      epoch_mean += loss;
    }
    epoch_mean /= static_cast<double>(per_epoch);
    csv.flush();
    if (opts.on_epoch) opts.on_epoch(trainer.epoch(), epoch_mean);
    trainer.finish_epoch();
    const auto every = trainer.config().checkpoint_every;
    if (every > 0 && trainer.epoch() % every == 0 && trainer.epoch() < epochs) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_epoch_%04llu.ckpt", static_cast<unsigned long long>(trainer.epoch()));
      trainer.save(out_dir / name);
    }
  }
  if (!csv) throw IoError("failed writing " + csv_path.string());
  const auto final_path = out_dir / "final.ckpt";
  trainer.save(final_path);
  return final_path;
}

}  // namespace dpc
