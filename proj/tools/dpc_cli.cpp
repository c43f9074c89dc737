#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dpc/checkpoint.hpp"
#include "dpc/config.hpp"
#include "dpc/dataset.hpp"
#include "dpc/datagen.hpp"
#include "dpc/matcher.hpp"
#include "dpc/point_io.hpp"
#include "dpc/testing/selfcheck.hpp"
#include "dpc/trainer.hpp"

namespace fs = std::filesystem;

namespace {

enum class Level { Quiet = 0, Info = 1, Debug = 2 };

Level log_level() {
  const char* v = std::getenv("DPC_LOG");
  if (!v) return Level::Info;
  const std::string s(v);
  if (s == "quiet" || s == "0") return Level::Quiet;
  if (s == "debug" || s == "2") return Level::Debug;
  return Level::Info;
}

void log(Level lvl, const std::string& msg) {
  if (static_cast<int>(lvl) <= static_cast<int>(log_level())) std::cerr << msg << '\n';
}

struct Invocation {
  std::string config_path;
  std::vector<std::string> overrides;
};

dpc::KeyValues settings(const Invocation& inv, const std::vector<std::string>& valid) {
  dpc::KeyValues kv = inv.config_path.empty() ? dpc::KeyValues{} : dpc::KeyValues::load(inv.config_path);
  for (const auto& o : inv.overrides) kv.apply_override(o);
  kv.reject_unknown(valid);
  return kv;
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::string required(const dpc::KeyValues& kv, const std::string& key) {
  if (!kv.has(key)) throw dpc::UsageError("missing required setting '" + key + "'");
  return kv.get_string(key, "");
}

void echo(const std::string& command, const dpc::KeyValues& effective) {
  log(Level::Info, "# dpc " + command + " effective settings\n" + effective.dump());
}

dpc::SimilarityKind similarity_from(const dpc::KeyValues& kv) {
  const auto s = kv.get_string("similarity", "cosine");
  if (s == "cosine") return dpc::SimilarityKind::Cosine;
  if (s == "dot") return dpc::SimilarityKind::Dot;
  throw dpc::UsageError("similarity must be 'cosine' or 'dot'");
}

bool use_double(const dpc::KeyValues& kv, const std::string& fallback) {
  const auto p = kv.get_string("precision", fallback);
  if (p == "double") return true;
  if (p == "float") return false;
  throw dpc::UsageError("precision must be 'float' or 'double'");
}

// ---- gen-synth ----

int cmd_gen_synth(const Invocation& inv) {
  const auto kv = settings(inv, concat(dpc::synth_config_keys(), {"out_dir"}));
  const auto cfg = dpc::synth_config_from(kv);
  const fs::path out = required(kv, "out_dir");
  dpc::KeyValues eff = kv;
  eff.set("base_shape", dpc::to_string(cfg.base_shape));
  eff.set("n", std::to_string(cfg.n));
  eff.set("deform_amplitude", dpc::format_real(cfg.deform_amplitude));
  eff.set("deform_frequency", dpc::format_real(cfg.deform_frequency));
  eff.set("rigid", cfg.rigid ? "true" : "false");
  eff.set("noise_sigma", dpc::format_real(cfg.noise_sigma));
  eff.set("seed", std::to_string(cfg.seed));
  eff.set("num_pairs", std::to_string(cfg.num_pairs));
  echo("gen-synth", eff);
  const auto manifest = dpc::gen_dataset(cfg, out);
  std::cout << manifest.string() << '\n';
  return 0;
}

// ---- train ----

const std::vector<std::string> kTrainExtra{"data_dir", "out_dir", "pairing_mode", "num_points", "sample_seed",
                                           "precision", "resume"};

int cmd_train(const Invocation& inv) {
  const auto kv = settings(inv, concat(dpc::train_config_keys(), kTrainExtra));
  const auto cfg = dpc::train_config_from(kv);
  cfg.validate();
  dpc::CloudDirectoryOptions opts;
  opts.num_points = kv.get_uint("num_points", 0);
  opts.sample_seed = kv.get_uint("sample_seed", 0);
  const auto pairing = kv.get_string("pairing_mode", "any-pair");
  if (pairing == "any-pair") opts.pairing = dpc::PairingMode::AnyPair;
  else if (pairing == "within-category") opts.pairing = dpc::PairingMode::WithinCategory;
  else throw dpc::UsageError("pairing_mode must be 'any-pair' or 'within-category'");
  const fs::path data_dir = required(kv, "data_dir");
  const fs::path out_dir = required(kv, "out_dir");
  const bool dbl = use_double(kv, "float");

  dpc::KeyValues eff = dpc::to_key_values(cfg);
  eff.set("data_dir", data_dir.string());
  eff.set("out_dir", out_dir.string());
  eff.set("pairing_mode", pairing);
  eff.set("num_points", std::to_string(opts.num_points));
  eff.set("sample_seed", std::to_string(opts.sample_seed));
  eff.set("precision", dbl ? "double" : "float");
  if (kv.has("resume")) eff.set("resume", kv.get_string("resume", ""));
  echo("train", eff);
  fs::create_directories(out_dir);
  {
    std::ofstream f(out_dir / "effective_config.txt");
    f << eff.dump();
    if (!f) throw dpc::IoError("cannot write " + (out_dir / "effective_config.txt").string());
  }

  const auto ds = dpc::load_cloud_directory(data_dir, opts);
  log(Level::Info, "loaded " + std::to_string(ds.clouds.size()) + " clouds from " + data_dir.string());
  dpc::FitOptions fo;
  if (kv.has("resume")) fo.resume_from = fs::path(kv.get_string("resume", ""));
  fo.on_epoch = [](std::uint64_t epoch, const dpc::LossBreakdown& b) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %llu  mean loss %.6g  (cc %.4g/%.4g sc %.4g/%.4g map %.4g/%.4g)",
                  static_cast<unsigned long long>(epoch), b.total, b.cc_target, b.cc_source, b.sc_source, b.sc_target,
                  b.map_source, b.map_target);
    log(Level::Info, buf);
  };
  const auto final_path = dbl ? dpc::fit<double>(ds, cfg, out_dir, fo) : dpc::fit<float>(ds, cfg, out_dir, fo);
  std::cout << final_path.string() << '\n';
  return 0;
}

// ---- infer ----

const std::vector<std::string> kNetworkKeys{"edge_widths", "knn_k", "leaky_slope", "head_widths", "graph_mode"};

std::optional<dpc::NetworkConfig> expected_network(const dpc::KeyValues& kv) {
  bool any = false;
  for (const auto& k : kNetworkKeys) any = any || kv.has(k);
  if (!any) return std::nullopt;
  dpc::KeyValues net;
  for (const auto& k : kNetworkKeys)
    if (kv.has(k)) net.set(k, kv.get_string(k, ""));
  return dpc::train_config_from(net).network;
}

template <typename T>
int run_infer(const dpc::KeyValues& kv) {
  const auto expected = expected_network(kv);
  const auto params = dpc::load_params<T>(required(kv, "checkpoint"), expected ? &*expected : nullptr);
  const auto k_cc = kv.get_uint("k_cc", 10);
  const auto kind = similarity_from(kv);
  if (kv.has("manifest")) {
    const fs::path out_dir = required(kv, "out_dir");
    fs::create_directories(out_dir);
    const auto rows = dpc::read_manifest_rows(kv.get_string("manifest", ""), 3);
    std::ofstream eval_manifest(out_dir / "eval_manifest.txt");
    eval_manifest << "# <prediction> <gt> <target>\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto x = dpc::load_point_cloud(rows[r][0]);
      const auto y = dpc::load_point_cloud(rows[r][1]);
      const auto map = dpc::match_raw<T>(params, x, y, k_cc, kind);
      char name[48];
      std::snprintf(name, sizeof name, "pair_%04zu_pred.txt", r);
      dpc::write_correspondence(out_dir / name, map);
      eval_manifest << name << ' ' << fs::absolute(rows[r][2]).string() << ' ' << fs::absolute(rows[r][1]).string()
                    << '\n';
      log(Level::Debug, "matched " + x.id + " -> " + y.id);
    }
    if (!eval_manifest) throw dpc::IoError("cannot write " + (out_dir / "eval_manifest.txt").string());
    std::cout << (out_dir / "eval_manifest.txt").string() << '\n';
    return 0;
  }
  const auto x = dpc::load_point_cloud(required(kv, "source"));
  const auto y = dpc::load_point_cloud(required(kv, "target"));
  const auto map = dpc::match_raw<T>(params, x, y, k_cc, kind);
  const fs::path out = required(kv, "output");
  dpc::write_correspondence(out, map);
  if (kv.has("affinity_dump")) {
    const fs::path dump = kv.get_string("affinity_dump", "");
    const auto fx = dpc::embed<T>(params, dpc::normalize(x), dpc::Mode::Eval);
    const auto fy = dpc::embed<T>(params, dpc::normalize(y), dpc::Mode::Eval);
    dpc::write_affinity_dump(dump, dpc::similarity(kind, fx, fy));
    log(Level::Info, "wrote affinity matrix to " + dump.string());
  }
  std::cout << out.string() << '\n';
  return 0;
}

int cmd_infer(const Invocation& inv) {
  const auto kv = settings(inv, concat({"checkpoint", "source", "target", "output", "manifest", "out_dir", "k_cc",
                                        "similarity", "precision", "affinity_dump"},
                                       kNetworkKeys));
  if (kv.has("manifest") == (kv.has("source") || kv.has("target"))) {
    throw dpc::UsageError("give either 'manifest' (with out_dir) or 'source' and 'target' (with output)");
  }
  dpc::KeyValues eff = kv;
  eff.set("k_cc", std::to_string(kv.get_uint("k_cc", 10)));
  eff.set("similarity", similarity_from(kv) == dpc::SimilarityKind::Cosine ? "cosine" : "dot");
  const bool dbl = use_double(kv, "double");
  eff.set("precision", dbl ? "double" : "float");
  echo("infer", eff);
  return dbl ? run_infer<double>(kv) : run_infer<float>(kv);
}

// ---- eval ----

int cmd_eval(const Invocation& inv) {
  const auto kv = settings(inv, {"manifest", "output"});
  const fs::path manifest = required(kv, "manifest");
  const fs::path output = required(kv, "output");
  echo("eval", kv);
  const auto rows = dpc::read_manifest_rows(manifest, 3);
  if (rows.empty()) throw dpc::InvalidArgument(manifest.string() + ": no entries");
  const auto grid = dpc::default_tolerance_grid();
  std::vector<double> acc(grid.size(), 0.0);
  double err = 0, diameter = 0;
  for (const auto& row : rows) {
    const auto map = dpc::read_correspondence(row[0]);
    const auto gt = dpc::read_ground_truth(row[1]);
    const auto y = dpc::load_point_cloud(row[2]);
    const auto r = dpc::accuracy_curve(map, y, gt, grid);
    for (std::size_t i = 0; i < grid.size(); ++i) acc[i] += r.accuracy[i];
    err += r.err;
    diameter += r.diameter;
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s: err %.6g  d %.6g  acc(0.01) %.4f  acc(0.05) %.4f", row[0].filename().c_str(),
                  r.err, r.diameter, r.accuracy[0], r.accuracy[4]);
    log(Level::Info, buf);
  }
  const double m = static_cast<double>(rows.size());
  std::ofstream out(output);
  if (!out) throw dpc::IoError("cannot write " + output.string());
  out << "epsilon,accuracy,err,d\n";
  for (std::size_t i = 0; i < grid.size(); ++i) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.2f,%.17g,%.17g,%.17g", grid[i], acc[i] / m, err / m, diameter / m);
    out << buf << '\n';
  }
  if (!out) throw dpc::IoError("failed writing " + output.string());
  std::cout << output.string() << '\n';
  return 0;
}

// ---- export-colored ----

int cmd_export_colored(const Invocation& inv) {
  const auto kv = settings(inv, concat({"source", "target", "correspondence", "checkpoint", "out_dir", "k_cc",
                                        "similarity"},
                                       kNetworkKeys));
  const auto x = dpc::load_point_cloud(required(kv, "source"));
  const auto y = dpc::load_point_cloud(required(kv, "target"));
  const fs::path out_dir = required(kv, "out_dir");
  if (kv.has("correspondence") == kv.has("checkpoint")) {
    throw dpc::UsageError("give exactly one of 'correspondence' or 'checkpoint'");
  }
  echo("export-colored", kv);
  dpc::CorrespondenceMap map;
  if (kv.has("correspondence")) {
    map = dpc::read_correspondence(kv.get_string("correspondence", ""));
  } else {
    const auto expected = expected_network(kv);
    const auto params = dpc::load_params<double>(kv.get_string("checkpoint", ""), expected ? &*expected : nullptr);
    map = dpc::match_raw<double>(params, x, y, kv.get_uint("k_cc", 10), similarity_from(kv));
  }
  const auto [src_rgb, tgt_rgb] = dpc::transfer_colors(map, x, y);
  fs::create_directories(out_dir);
  auto write = [](const fs::path& p, const dpc::PointCloud& pc, const dpc::Matrix<int>& rgb) {
    std::ofstream f(p);
    if (!f) throw dpc::IoError("cannot write " + p.string());
    dpc::write_ply(f, pc, rgb);
    if (!f) throw dpc::IoError("failed writing " + p.string());
    std::cout << p.string() << '\n';
  };
  write(out_dir / ((x.id.empty() ? "source" : x.id) + "_colored.ply"), x, src_rgb);
  write(out_dir / ((y.id.empty() ? "target" : y.id) + "_colored.ply"), y, tgt_rgb);
  return 0;
}

// ---- selfcheck ----

int cmd_selfcheck(const Invocation& inv) {
  const auto kv = settings(inv, {"work_dir"});
  const fs::path work = kv.get_string("work_dir", (fs::temp_directory_path() / "dpc_selfcheck").string());
  dpc::KeyValues eff = kv;
  eff.set("work_dir", work.string());
  echo("selfcheck", eff);
  fs::create_directories(work);
  bool all = true;
  for (const auto& r : dpc::selfcheck::run_quick(work)) {
    std::printf("%s  %s  (%s)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    all = all && r.passed;
  }
  std::fflush(stdout);
  return all ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unsupervised dense point-cloud correspondence"};
  app.require_subcommand(1);
  Invocation inv;
  auto add = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", inv.config_path, "key = value settings file");
    sub->add_option("-s,--set", inv.overrides, "override one setting, key=value (repeatable)");
    return sub;
  };
  auto* gen = add("gen-synth", "generate synthetic pairs with ground truth");
  auto* train = add("train", "train the embedding network on a directory of clouds");
  auto* infer = add("infer", "predict correspondences from a checkpoint");
  auto* eval = add("eval", "accuracy curve of predictions against ground truth");
  auto* colored = add("export-colored", "colour-transfer PLY pair");
  auto* check = add("selfcheck", "run the oracle and invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_gen_synth(inv);
    if (train->parsed()) return cmd_train(inv);
    if (infer->parsed()) return cmd_infer(inv);
    if (eval->parsed()) return cmd_eval(inv);
    if (colored->parsed()) return cmd_export_colored(inv);
    if (check->parsed()) return cmd_selfcheck(inv);
  } catch (const dpc::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const dpc::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const dpc::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const dpc::ShapeMismatch& e) {
    std::cerr << "shape mismatch: " << e.what() << '\n';
    return 2;
  } catch (const dpc::CorruptFile& e) {
    std::cerr << "corrupt file: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
