#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dpc/common.hpp"
#include "dpc/feature_net.hpp"

namespace dpc {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'D', 'P', 'C', 'C', 'K', 'P', 'T', '1'};
inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kNormalizationId = "centroid-unit-radius";

/// Named float64 tensors plus JSON metadata.
struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix<double>>> tensors;

  const Matrix<double>& get(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return m;
    throw CorruptFile("checkpoint has no tensor '" + name + "'");
  }
  bool has(const std::string& name) const {
    for (const auto& [n, m] : tensors)
      if (n == name) return true;
    return false;
  }
};

inline std::uint64_t fnv1a64(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Layout: magic, u64 header length, JSON header, raw payload. Written to a
/// temporary and renamed into place.
inline void write_archive(const std::filesystem::path& path, const Archive& ar) {
  std::string payload;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, m] : ar.tensors) {
    index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    payload.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  nlohmann::json header = ar.meta;
  header["format_version"] = kCheckpointVersion;
  header["tensors"] = index;
  header["payload_bytes"] = payload.size();
  header["checksum"] = fnv1a64(payload.data(), payload.size());
  const std::string head = header.dump();
  const std::uint64_t head_len = head.size();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    out.write(reinterpret_cast<const char*>(&head_len), sizeof head_len);
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (bytes.size() < sizeof kCheckpointMagic + 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CorruptFile(where + "not a checkpoint file");
  }
  std::uint64_t head_len = 0;
  std::memcpy(&head_len, bytes.data() + 8, 8);
  if (head_len > bytes.size() - 16) throw CorruptFile(where + "truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(where + "unreadable header (" + e.what() + ")");
  }
  try {
    if (header.at("format_version").get<int>() != kCheckpointVersion) {
      throw CorruptFile(where + "unsupported checkpoint version " + header.at("format_version").dump());
    }
    const std::size_t offset = 16 + head_len;
    const auto payload_bytes = header.at("payload_bytes").get<std::size_t>();
    if (bytes.size() - offset != payload_bytes) throw CorruptFile(where + "truncated or padded payload");
    if (fnv1a64(bytes.data() + offset, payload_bytes) != header.at("checksum").get<std::uint64_t>()) {
      throw CorruptFile(where + "checksum mismatch");
    }
    Archive ar;
    std::size_t pos = offset;
    for (const auto& t : header.at("tensors")) {
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      const auto n = static_cast<std::size_t>(rows * cols) * sizeof(double);
      if (rows < 0 || cols < 0 || pos + n > bytes.size()) throw CorruptFile(where + "tensor table exceeds payload");
      Matrix<double> m(rows, cols);
      std::memcpy(m.data(), bytes.data() + pos, n);
      pos += n;
      ar.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
    }
    if (pos != bytes.size()) throw CorruptFile(where + "tensor table does not cover payload");
    header.erase("tensors");
    header.erase("payload_bytes");
    header.erase("checksum");
    header.erase("format_version");
    ar.meta = std::move(header);
    return ar;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(where + "malformed header (" + e.what() + ")");
  }
}

inline nlohmann::json to_json(const NetworkConfig& c) {
  return {{"edge_widths", c.edge_widths},
          {"knn_k", c.knn_k},
          {"leaky_slope", c.leaky_slope},
          {"head_widths", c.head_widths},
          {"graph_mode", c.graph_mode == GraphMode::StaticEuclidean ? "static-euclidean" : "dynamic-latent"},
          {"bn_momentum", c.bn_momentum},
          {"bn_eps", c.bn_eps}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  c.edge_widths = j.at("edge_widths").get<std::vector<std::size_t>>();
  c.knn_k = j.at("knn_k").get<std::size_t>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.head_widths = j.at("head_widths").get<std::vector<std::size_t>>();
  const auto mode = j.at("graph_mode").get<std::string>();
  if (mode == "static-euclidean") c.graph_mode = GraphMode::StaticEuclidean;
  else if (mode == "dynamic-latent") c.graph_mode = GraphMode::DynamicLatent;
  else throw CorruptFile("unknown graph_mode '" + mode + "'");
  c.bn_momentum = j.at("bn_momentum").get<double>();
  c.bn_eps = j.at("bn_eps").get<double>();
  return c;
}

template <typename T>
void add_params(Archive& ar, const NetworkParams<T>& p) {
  ar.meta["network"] = to_json(p.config);
  ar.meta["normalization"] = kNormalizationId;
  ar.meta["init_seed"] = p.seed;
  const auto ne = p.num_edge_layers();
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto base = layer_name(l, ne);
    const auto& lp = p.layers[l];
    ar.tensors.emplace_back(base + ".weight", lp.weight.template cast<double>());
    ar.tensors.emplace_back(base + ".bn.gamma", lp.gamma.template cast<double>());
    ar.tensors.emplace_back(base + ".bn.beta", lp.beta.template cast<double>());
    ar.tensors.emplace_back(base + ".bn.running_mean", lp.running_mean.template cast<double>());
    ar.tensors.emplace_back(base + ".bn.running_var", lp.running_var.template cast<double>());
  }
}

/// Rebuilds parameters, validating every tensor shape against the stored
/// config and, when given, against the caller's expected config.
template <typename T>
NetworkParams<T> params_from_archive(const Archive& ar, const NetworkConfig* expected = nullptr) {
  NetworkParams<T> p;
  try {
    p.config = network_config_from_json(ar.meta.at("network"));
    p.seed = ar.meta.at("init_seed").get<std::uint64_t>();
    if (ar.meta.at("normalization").get<std::string>() != kNormalizationId) {
      throw ShapeMismatch("checkpoint uses normalization '" + ar.meta.at("normalization").get<std::string>() + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("checkpoint metadata: ") + e.what());
  }
  p.config.validate();
  const auto shapes = weight_shapes(expected ? *expected : p.config);
  const auto ne = (expected ? *expected : p.config).edge_widths.size();
  auto fetch = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (!ar.has(name)) throw ShapeMismatch("checkpoint is missing tensor '" + name + "'");
    const auto& m = ar.get(name);
    if (m.rows() != rows || m.cols() != cols) {
      throw ShapeMismatch("shape mismatch for '" + name + "': checkpoint has " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (!m.allFinite()) throw CorruptFile("tensor '" + name + "' has non-finite entries");
    return Matrix<T>(m.template cast<T>());
  };
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto base = layer_name(l, ne);
    const auto [in, out] = shapes[l];
    LayerParams<T> lp;
    lp.weight = fetch(base + ".weight", static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out));
    lp.gamma = fetch(base + ".bn.gamma", 1, static_cast<Eigen::Index>(out));
    lp.beta = fetch(base + ".bn.beta", 1, static_cast<Eigen::Index>(out));
    lp.running_mean = fetch(base + ".bn.running_mean", 1, static_cast<Eigen::Index>(out));
    lp.running_var = fetch(base + ".bn.running_var", 1, static_cast<Eigen::Index>(out));
    p.layers.push_back(std::move(lp));
  }
  if (expected && !(*expected == p.config)) {
    throw ShapeMismatch("checkpoint network config differs from the requested one");
  }
  if (p.layers.size() != weight_shapes(p.config).size()) throw ShapeMismatch("layer count mismatch");
  return p;
}

template <typename T>
void save_params(const std::filesystem::path& path, const NetworkParams<T>& p) {
  Archive ar;
  add_params(ar, p);
  write_archive(path, ar);
}

template <typename T>
NetworkParams<T> load_params(const std::filesystem::path& path, const NetworkConfig* expected = nullptr) {
  return params_from_archive<T>(read_archive(path), expected);
}

}  // namespace dpc
