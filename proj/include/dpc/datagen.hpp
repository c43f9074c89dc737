#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <Eigen/Geometry>
#include <string>
#include <vector>

#include "dpc/config.hpp"
#include "dpc/geometry.hpp"
#include "dpc/matcher.hpp"
#include "dpc/point_io.hpp"
#include "dpc/random.hpp"

namespace dpc {

enum class BaseShape { Sphere, Cylinder, TwoLobe };

struct SynthConfig {
  BaseShape base_shape = BaseShape::TwoLobe;
  std::size_t n = 1024;
  double deform_amplitude = 0.15;
  double deform_frequency = 2.0;
  bool rigid = false;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  std::size_t num_pairs = 8;

  void validate() const {
    if (!(deform_amplitude >= 0)) throw InvalidArgument("deform_amplitude must be >= 0");
    if (!(deform_frequency >= 0)) throw InvalidArgument("deform_frequency must be >= 0");
    if (!(noise_sigma >= 0)) throw InvalidArgument("noise_sigma must be >= 0");
    if (n < 64) throw InvalidArgument("synthetic clouds need n >= 64");
  }
};

inline std::string to_string(BaseShape s) {
  switch (s) {
    case BaseShape::Sphere: return "sphere";
    case BaseShape::Cylinder: return "cylinder";
    case BaseShape::TwoLobe: return "two-lobe";
  }
  return "?";
}

inline const std::vector<std::string>& synth_config_keys() {
  static const std::vector<std::string> keys{"base_shape", "n",           "deform_amplitude", "deform_frequency",
                                             "rigid",      "noise_sigma", "seed",             "num_pairs"};
  return keys;
}

inline SynthConfig synth_config_from(const KeyValues& kv) {
  SynthConfig c;
  const auto shape = kv.get_string("base_shape", to_string(c.base_shape));
  if (shape == "sphere") c.base_shape = BaseShape::Sphere;
  else if (shape == "cylinder") c.base_shape = BaseShape::Cylinder;
  else if (shape == "two-lobe") c.base_shape = BaseShape::TwoLobe;
  else throw UsageError("base_shape must be sphere, cylinder or two-lobe");
  c.n = kv.get_uint("n", c.n);
  c.deform_amplitude = kv.get_double("deform_amplitude", c.deform_amplitude);
  c.deform_frequency = kv.get_double("deform_frequency", c.deform_frequency);
  c.rigid = kv.get_bool("rigid", c.rigid);
  c.noise_sigma = kv.get_double("noise_sigma", c.noise_sigma);
  c.seed = kv.get_uint("seed", c.seed);
  c.num_pairs = kv.get_uint("num_pairs", c.num_pairs);
  return c;
}

/// Source, warped-and-permuted target, and gt[i] = target row of source point i.
struct SynthPair {
  PointCloud source;
  PointCloud target;
  std::vector<Index> gt;
  // Generation record, for tests: rigid motion applied after the warp.
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::RowVector3d translation = Eigen::RowVector3d::Zero();
};

namespace detail {

inline Eigen::RowVector3d random_direction(Rng& rng) {
  Eigen::RowVector3d v;
  do {
    v = {standard_normal(rng), standard_normal(rng), standard_normal(rng)};
  } while (v.norm() < 1e-12);
  return v.normalized();
}

inline Matrix<double> sample_base(BaseShape shape, std::size_t n, Rng& rng) {
  Matrix<double> p(static_cast<Eigen::Index>(n), 3);
  if (shape == BaseShape::Sphere) {
    for (std::size_t i = 0; i < n; ++i) p.row(i) = random_direction(rng);
  } else if (shape == BaseShape::Cylinder) {
    // Lateral surface, radius 0.5, height 2.
    for (std::size_t i = 0; i < n; ++i) {
      const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      p.row(i) << 0.5 * std::cos(a), 0.5 * std::sin(a), uniform(rng, -1.0, 1.0);
    }
  } else {
    // Union surface of two overlapping spheres of different radii.
    const std::array<Eigen::RowVector3d, 2> centers{Eigen::RowVector3d(-0.55, 0, 0), Eigen::RowVector3d(0.6, 0.1, 0)};
    const std::array<double, 2> radii{0.75, 0.5};
    const double p0 = radii[0] * radii[0] / (radii[0] * radii[0] + radii[1] * radii[1]);
    std::size_t i = 0;
    while (i < n) {
      const int s = uniform01(rng) < p0 ? 0 : 1;
      const Eigen::RowVector3d q = centers[s] + radii[s] * random_direction(rng);
      if ((q - centers[1 - s]).norm() < radii[1 - s]) continue;
      p.row(static_cast<Eigen::Index>(i++)) = q;
    }
  }
  return p;
}

inline Eigen::Matrix3d random_rotation(Rng& rng) {
  Eigen::Quaterniond q(standard_normal(rng), standard_normal(rng), standard_normal(rng), standard_normal(rng));
  q.normalize();
  return q.toRotationMatrix();
}

}  // namespace detail

/// Smooth sinusoidal displacement with Lipschitz constant amplitude * frequency:
/// d(p) = A (sin(w p_y + a), sin(w p_z + b), sin(w p_x + c)).
inline Matrix<double> sinusoidal_warp(const Matrix<double>& p, double amplitude, double frequency,
                                      const std::array<double, 3>& phase) {
  Matrix<double> out = p;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    out(i, 0) += amplitude * std::sin(frequency * p(i, 1) + phase[0]);
    out(i, 1) += amplitude * std::sin(frequency * p(i, 2) + phase[1]);
    out(i, 2) += amplitude * std::sin(frequency * p(i, 0) + phase[2]);
  }
  return out;
}

inline SynthPair gen_pair(const SynthConfig& cfg, std::uint64_t pair_index) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, pair_index));
  SynthPair out;
  const Matrix<double> base = detail::sample_base(cfg.base_shape, cfg.n, rng);
  const std::array<double, 3> phase{uniform(rng, 0, 2 * std::numbers::pi), uniform(rng, 0, 2 * std::numbers::pi),
                                    uniform(rng, 0, 2 * std::numbers::pi)};
  Matrix<double> moved = sinusoidal_warp(base, cfg.deform_amplitude, cfg.deform_frequency, phase);
  if (cfg.rigid) {
    out.rotation = detail::random_rotation(rng);
    out.translation << uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1);
    moved = (moved * out.rotation.transpose()).rowwise() + out.translation;
  }
  if (cfg.noise_sigma > 0) {
    for (Eigen::Index i = 0; i < moved.size(); ++i) moved.data()[i] += cfg.noise_sigma * standard_normal(rng);
  }
  std::vector<Index> order(cfg.n);  // order[r] = source index placed at target row r
  std::iota(order.begin(), order.end(), 0);
  shuffle(order.begin(), order.end(), rng);
  Matrix<double> target(static_cast<Eigen::Index>(cfg.n), 3);
  out.gt.assign(cfg.n, 0);
  for (std::size_t r = 0; r < cfg.n; ++r) {
    target.row(static_cast<Eigen::Index>(r)) = moved.row(order[r]);
    out.gt[static_cast<std::size_t>(order[r])] = static_cast<Index>(r);
  }
  char id[32];
  std::snprintf(id, sizeof id, "pair_%04llu", static_cast<unsigned long long>(pair_index));
  out.source = PointCloud(base, std::string(id) + "_source");
  out.target = PointCloud(std::move(target), std::string(id) + "_target");
  return out;
}

struct ManifestEntry {
  std::filesystem::path source;
  std::filesystem::path target;
  std::filesystem::path gt;
};

/// Writes XYZ clouds, gt index files and `manifest.txt`; returns the manifest path.
inline std::filesystem::path gen_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const auto manifest_path = out_dir / "manifest.txt";
  std::ofstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot write " + manifest_path.string());
  manifest << "# synthetic correspondence pairs: <source> <target> <gt>\n"
           << "# base_shape = " << to_string(cfg.base_shape) << "\n"
           << "# n = " << cfg.n << "\n"
           << "# deform_amplitude = " << format_real(cfg.deform_amplitude) << "\n"
           << "# deform_frequency = " << format_real(cfg.deform_frequency) << "\n"
           << "# rigid = " << (cfg.rigid ? "true" : "false") << "\n"
           << "# noise_sigma = " << format_real(cfg.noise_sigma) << "\n"
           << "# seed = " << cfg.seed << "\n"
           << "# num_pairs = " << cfg.num_pairs << "\n";
  for (std::size_t p = 0; p < cfg.num_pairs; ++p) {
    const auto pair = gen_pair(cfg, p);
    const auto src = pair.source.id + ".xyz";
    const auto tgt = pair.target.id + ".xyz";
    char gt_name[32];
    std::snprintf(gt_name, sizeof gt_name, "pair_%04zu_gt.txt", p);
    save_point_cloud(out_dir / src, pair.source);
    save_point_cloud(out_dir / tgt, pair.target);
    write_ground_truth(out_dir / gt_name, pair.gt);
    manifest << src << ' ' << tgt << ' ' << gt_name << '\n';
  }
  if (!manifest) throw IoError("failed writing " + manifest_path.string());
  return manifest_path;
}

/// Whitespace-separated path columns, relative to the manifest's directory.
inline std::vector<std::vector<std::filesystem::path>> read_manifest_rows(const std::filesystem::path& path,
                                                                         std::size_t columns) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  const auto base = path.parent_path();
  std::vector<std::vector<std::filesystem::path>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto tok = detail::split_ws(std::string_view(line).substr(0, line.find('#')));
    if (tok.empty()) continue;
    if (tok.size() != columns) {
      throw ParseError(ParseErrorKind::MalformedHeader,
                       path.string() + ": expected " + std::to_string(columns) + " paths per line", line_no);
    }
    std::vector<std::filesystem::path> row;
    for (auto t : tok) {
      std::filesystem::path p(t);
      row.push_back(p.is_absolute() ? p : base / p);
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::vector<ManifestEntry> out;
  for (auto& row : read_manifest_rows(path, 3)) out.push_back({row[0], row[1], row[2]});
  return out;
}

}  // namespace dpc
