#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dpc/geometry.hpp"

namespace dpc {

enum class CloudFormat { PlyAscii, Off, Xyz };

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view tok) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<std::size_t> parse_count(std::string_view tok) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) return std::nullopt;
  return v;
}

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}
  bool next(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_no_;
    return true;
  }
  std::size_t line_no() const { return line_no_; }

 private:
  std::istream& in_;
  std::size_t line_no_ = 0;
};

inline std::array<double, 3> parse_xyz_tokens(const std::vector<std::string_view>& tok, std::size_t offset,
                                              std::size_t line) {
  std::array<double, 3> p{};
  for (std::size_t c = 0; c < 3; ++c) {
    const auto v = parse_double(tok[offset + c]);
    if (!v) {
      throw ParseError(ParseErrorKind::NonNumeric,
                       "non-numeric coordinate '" + std::string(tok[offset + c]) + "'", line);
    }
    p[c] = *v;
  }
  return p;
}

inline Matrix<double> to_matrix(const std::vector<std::array<double, 3>>& pts) {
  Matrix<double> m(pts.size(), 3);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) m(i, c) = pts[i][c];
  return m;
}

inline Matrix<double> read_xyz(std::istream& in) {
  LineReader r(in);
  std::string line;
  std::vector<std::array<double, 3>> pts;
  while (r.next(line)) {
    const auto hash = line.find('#');
    const auto tok = split_ws(std::string_view(line).substr(0, hash));
    if (tok.empty()) continue;
    if (tok.size() < 3) {
      throw ParseError(ParseErrorKind::NonNumeric, "expected 3 coordinates, got " + std::to_string(tok.size()),
                       r.line_no());
    }
    pts.push_back(parse_xyz_tokens(tok, 0, r.line_no()));
  }
  if (pts.empty()) throw ParseError(ParseErrorKind::EmptyVertexList, "no points in XYZ data", r.line_no());
  return to_matrix(pts);
}

// Skips blank lines and '#' comments; returns false at EOF.
inline bool next_content_line(LineReader& r, std::string& line, std::vector<std::string_view>& tok) {
  while (r.next(line)) {
    const auto hash = line.find('#');
    tok = split_ws(std::string_view(line).substr(0, hash));
    if (!tok.empty()) return true;
  }
  return false;
}

inline Matrix<double> read_off(std::istream& in) {
  LineReader r(in);
  std::string line;
  std::vector<std::string_view> tok;
  if (!next_content_line(r, line, tok) || tok[0].substr(0, 3) != "OFF" || tok[0].size() != 3) {
    throw ParseError(ParseErrorKind::MalformedHeader, "missing OFF signature", r.line_no());
  }
  // Counts may share the signature line ("OFF 8 6 0").
  std::vector<std::string_view> counts(tok.begin() + 1, tok.end());
  std::string counts_line;
  if (counts.empty()) {
    if (!next_content_line(r, counts_line, tok)) {
      throw ParseError(ParseErrorKind::MalformedHeader, "missing OFF element counts", r.line_no());
    }
    counts = tok;
  }
  if (counts.size() < 2) throw ParseError(ParseErrorKind::MalformedHeader, "malformed OFF element counts", r.line_no());
  const auto nv = parse_count(counts[0]);
  if (!nv || !parse_count(counts[1])) {
    throw ParseError(ParseErrorKind::MalformedHeader, "malformed OFF element counts", r.line_no());
  }
  if (*nv == 0) throw ParseError(ParseErrorKind::EmptyVertexList, "OFF declares zero vertices", r.line_no());
  std::vector<std::array<double, 3>> pts;
  pts.reserve(*nv);
  while (pts.size() < *nv) {
    if (!next_content_line(r, line, tok)) {
      throw ParseError(ParseErrorKind::Truncated,
                       "expected " + std::to_string(*nv) + " vertices, found " + std::to_string(pts.size()),
                       r.line_no());
    }
    if (tok.size() < 3) throw ParseError(ParseErrorKind::NonNumeric, "vertex needs 3 coordinates", r.line_no());
    pts.push_back(parse_xyz_tokens(tok, 0, r.line_no()));
  }
  return to_matrix(pts);
}

inline Matrix<double> read_ply(std::istream& in) {
  LineReader r(in);
  std::string line;
  if (!r.next(line) || split_ws(line).size() != 1 || split_ws(line)[0] != "ply") {
    throw ParseError(ParseErrorKind::MalformedHeader, "missing ply signature", r.line_no());
  }
  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> props;
    bool has_list = false;
  };
  std::vector<Element> elements;
  bool have_format = false;
  bool header_done = false;
  while (r.next(line)) {
    const auto tok = split_ws(line);
    if (tok.empty()) continue;
    if (tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "format") {
      if (tok.size() != 3 || tok[1] != "ascii") {
        throw ParseError(ParseErrorKind::MalformedHeader, "only 'format ascii 1.0' is supported", r.line_no());
      }
      have_format = true;
    } else if (tok[0] == "element") {
      const auto count = tok.size() == 3 ? parse_count(tok[2]) : std::nullopt;
      if (!count) throw ParseError(ParseErrorKind::MalformedHeader, "malformed element line", r.line_no());
      elements.push_back({std::string(tok[1]), *count, {}, false});
    } else if (tok[0] == "property") {
      if (elements.empty() || tok.size() < 3) {
        throw ParseError(ParseErrorKind::MalformedHeader, "property outside an element", r.line_no());
      }
      if (tok[1] == "list") {
        if (tok.size() != 5) throw ParseError(ParseErrorKind::MalformedHeader, "malformed list property", r.line_no());
        elements.back().has_list = true;
        elements.back().props.emplace_back(tok[4]);
      } else {
        if (tok.size() != 3) throw ParseError(ParseErrorKind::MalformedHeader, "malformed property", r.line_no());
        elements.back().props.emplace_back(tok[2]);
      }
    } else if (tok[0] == "end_header") {
      header_done = true;
      break;
    } else {
      throw ParseError(ParseErrorKind::MalformedHeader, "unexpected header keyword '" + std::string(tok[0]) + "'",
                       r.line_no());
    }
  }
  if (!header_done) throw ParseError(ParseErrorKind::MalformedHeader, "missing end_header", r.line_no());
  if (!have_format) throw ParseError(ParseErrorKind::MalformedHeader, "missing format line", r.line_no());

  std::vector<std::array<double, 3>> pts;
  bool found_vertex = false;
  for (const auto& el : elements) {
    if (el.name != "vertex") {
      for (std::size_t i = 0; i < el.count; ++i) {
        if (!r.next(line)) {
          throw ParseError(ParseErrorKind::Truncated, "unexpected end of '" + el.name + "' data", r.line_no());
        }
      }
      continue;
    }
    found_vertex = true;
    if (el.has_list) throw ParseError(ParseErrorKind::MalformedHeader, "list property on vertex element", r.line_no());
    std::array<std::size_t, 3> col{};
    const std::array<const char*, 3> names{"x", "y", "z"};
    for (std::size_t c = 0; c < 3; ++c) {
      const auto it = std::find(el.props.begin(), el.props.end(), names[c]);
      if (it == el.props.end()) {
        throw ParseError(ParseErrorKind::MalformedHeader, std::string("vertex has no '") + names[c] + "' property",
                         r.line_no());
      }
      col[c] = static_cast<std::size_t>(it - el.props.begin());
    }
    if (el.count == 0) throw ParseError(ParseErrorKind::EmptyVertexList, "ply declares zero vertices", r.line_no());
    pts.reserve(el.count);
    for (std::size_t i = 0; i < el.count; ++i) {
      if (!r.next(line)) throw ParseError(ParseErrorKind::Truncated, "unexpected end of vertex data", r.line_no());
      const auto tok = split_ws(line);
      if (tok.size() != el.props.size()) {
        throw ParseError(ParseErrorKind::NonNumeric,
                         "vertex line has " + std::to_string(tok.size()) + " values, expected " +
                             std::to_string(el.props.size()),
                         r.line_no());
      }
      std::array<double, 3> p{};
      for (std::size_t c = 0; c < 3; ++c) {
        const auto v = parse_double(tok[col[c]]);
        if (!v) {
          throw ParseError(ParseErrorKind::NonNumeric, "non-numeric coordinate '" + std::string(tok[col[c]]) + "'",
                           r.line_no());
        }
        p[c] = *v;
      }
      pts.push_back(p);
    }
    break;  // connectivity after the vertices is not needed
  }
  if (!found_vertex) throw ParseError(ParseErrorKind::EmptyVertexList, "no vertex element", r.line_no());
  return to_matrix(pts);
}

}  // namespace detail

inline std::optional<CloudFormat> format_from_extension(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (ext == ".ply") return CloudFormat::PlyAscii;
  if (ext == ".off") return CloudFormat::Off;
  if (ext == ".xyz" || ext == ".pts") return CloudFormat::Xyz;
  return std::nullopt;
}

inline Matrix<double> read_points(std::istream& in, CloudFormat format) {
  switch (format) {
    case CloudFormat::PlyAscii: return detail::read_ply(in);
    case CloudFormat::Off: return detail::read_off(in);
    case CloudFormat::Xyz: return detail::read_xyz(in);
  }
  throw InvalidArgument("unknown cloud format");
}

/// Vertex coordinates only; faces and other elements are skipped.
inline PointCloud load_point_cloud(const std::filesystem::path& path, CloudFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return PointCloud(read_points(in, format), path.stem().string());
  } catch (const ParseError& e) {
    throw ParseError(e.kind(), path.string() + ": " + e.what(), e.line());
  }
}

inline PointCloud load_point_cloud(const std::filesystem::path& path) {
  const auto fmt = format_from_extension(path);
  if (!fmt) throw InvalidArgument("unrecognized point cloud extension: " + path.string());
  return load_point_cloud(path, *fmt);
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_xyz(std::ostream& out, const PointCloud& pc) {
  for (Eigen::Index i = 0; i < pc.points.rows(); ++i) {
    out << format_real(pc.points(i, 0)) << ' ' << format_real(pc.points(i, 1)) << ' '
        << format_real(pc.points(i, 2)) << '\n';
  }
}

/// ASCII PLY; `rgb` (n x 3, 0..255) adds uchar color properties when non-empty.
inline void write_ply(std::ostream& out, const PointCloud& pc, const Matrix<int>& rgb = {}) {
  const bool colored = rgb.rows() > 0;
  if (colored && (rgb.rows() != pc.points.rows() || rgb.cols() != 3)) {
    throw ShapeMismatch("color table does not match point count");
  }
  out << "ply\nformat ascii 1.0\n";
  if (!pc.id.empty()) out << "comment " << pc.id << '\n';
  out << "element vertex " << pc.points.rows() << "\n"
      << "property float x\nproperty float y\nproperty float z\n";
  if (colored) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "end_header\n";
  for (Eigen::Index i = 0; i < pc.points.rows(); ++i) {
    out << format_real(pc.points(i, 0)) << ' ' << format_real(pc.points(i, 1)) << ' '
        << format_real(pc.points(i, 2));
    if (colored) out << ' ' << rgb(i, 0) << ' ' << rgb(i, 1) << ' ' << rgb(i, 2);
    out << '\n';
  }
}

inline void save_point_cloud(const std::filesystem::path& path, const PointCloud& pc) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  const auto fmt = format_from_extension(path);
  if (fmt == CloudFormat::PlyAscii) write_ply(out, pc);
  else if (fmt == CloudFormat::Xyz) write_xyz(out, pc);
  else throw InvalidArgument("unsupported output format: " + path.string());
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace dpc
