#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dpc/geometry.hpp"
#include "dpc/point_io.hpp"
#include "dpc/random.hpp"
#include "dpc/trainer.hpp"

namespace dpc {

struct CloudDirectoryOptions {
  std::size_t num_points = 0;  // 0 keeps every point
  std::uint64_t sample_seed = 0;
  PairingMode pairing = PairingMode::AnyPair;
};

namespace detail {

inline std::vector<std::filesystem::path> cloud_files(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && format_from_extension(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace detail

/// Training set from a directory of cloud files. Clouds in a subdirectory take
/// the subdirectory name as their category; files at the top level have none.
/// Every cloud is optionally subsampled and then normalized.
inline PairDataset load_cloud_directory(const std::filesystem::path& dir, const CloudDirectoryOptions& opts = {}) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::pair<std::filesystem::path, std::string>> entries;
  for (const auto& f : detail::cloud_files(dir)) entries.emplace_back(f, std::string());
  std::vector<std::filesystem::path> subdirs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory()) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  for (const auto& sub : subdirs)
    for (const auto& f : detail::cloud_files(sub)) entries.emplace_back(f, sub.filename().string());

  PairDataset ds;
  ds.pairing = opts.pairing;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    PointCloud pc = load_point_cloud(entries[i].first);
    if (opts.num_points > 0) pc = sample_points(pc, opts.num_points, derive_seed(opts.sample_seed, i));
    ds.clouds.push_back(normalize(pc));
    ds.categories.push_back(entries[i].second);
  }
  if (ds.clouds.size() < 2) throw InvalidArgument(dir.string() + ": need at least 2 point clouds");
  return ds;
}

}  // namespace dpc
