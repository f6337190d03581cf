// SPDX-License-Identifier: Apache-2.0
#pragma once

// Row-major float32 matrices on disk: a JSON manifest {dimension, count}, a flat
// little-endian float32 payload (count x dimension) and a sidecar row-id list, one id per
// line. Score matrices add a column-id list in the same style.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "querec/error.hpp"
#include "querec/io.hpp"

namespace querec {

struct DenseMatrix {
  std::vector<std::string> row_ids;
  std::vector<std::string> col_ids;  // empty for embedding matrices
  std::size_t dimension = 0;
  std::vector<float> values;

  std::size_t rows() const { return row_ids.size(); }

  std::span<const float> row(std::size_t r) const {
    return {values.data() + r * dimension, dimension};
  }
  std::span<float> row(std::size_t r) { return {values.data() + r * dimension, dimension}; }

  bool operator==(const DenseMatrix&) const = default;
};

struct MatrixPaths {
  fs::path manifest, data, ids, cols;
};

/// `stem` may be given with or without the ".json" suffix.
inline MatrixPaths matrix_paths(fs::path stem) {
  if (stem.extension() == ".json") stem.replace_extension();
  auto with = [&](const char* ext) {
    fs::path p = stem;
    p += ext;
    return p;
  };
  return {with(".json"), with(".bin"), with(".ids"), with(".cols")};
}

namespace detail {

inline std::string join_lines(std::span<const std::string> ids) {
  std::string s;
  for (const auto& id : ids) {
    if (id.find('\n') != std::string::npos) throw InvalidArgument("id contains a newline: " + id);
    s += id;
    s += '\n';
  }
  return s;
}

inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(std::move(line));
    pos = nl + 1;
  }
  return out;
}

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
  }
  return v;
}

}  // namespace detail

inline void save_matrix(const fs::path& stem, const DenseMatrix& m) {
  if (m.values.size() != m.rows() * m.dimension)
    throw InvalidArgument("matrix payload does not match rows x dimension");
  const MatrixPaths p = matrix_paths(stem);

  std::string bytes(m.values.size() * 4, '\0');
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(m.values[i]));
    std::memcpy(bytes.data() + 4 * i, &bits, 4);
  }
  json manifest{{"dimension", m.dimension},
                {"count", m.rows()},
                {"dtype", "float32"},
                {"byte_order", "little"},
                {"data", p.data.filename().string()},
                {"ids", p.ids.filename().string()}};
  if (!m.col_ids.empty()) {
    if (m.col_ids.size() != m.dimension)
      throw InvalidArgument("column id count does not match dimension");
    manifest["columns"] = p.cols.filename().string();
    write_file(p.cols, detail::join_lines(m.col_ids));
  }
  write_file(p.data, bytes);
  write_file(p.ids, detail::join_lines(m.row_ids));
  write_file(p.manifest, manifest.dump(2) + "\n");
}

inline DenseMatrix load_matrix(const fs::path& stem) {
  const MatrixPaths p = matrix_paths(stem);
  const std::string source = p.manifest.string();
  json manifest;
  try {
    manifest = json::parse(read_file(p.manifest));
  } catch (const json::parse_error& e) {
    throw ParseError(source, 0, e.what());
  }
  auto field = [&](const char* k) -> std::size_t {
    auto it = manifest.find(k);
    if (it == manifest.end() || !it->is_number_unsigned())
      throw ParseError(source, 0, std::string("manifest needs a non-negative integer '") + k + "'");
    return it->get<std::size_t>();
  };
  DenseMatrix m;
  m.dimension = field("dimension");
  const std::size_t count = field("count");
  if (m.dimension == 0) throw ParseError(source, 0, "dimension must be at least 1");
  const fs::path dir = p.manifest.parent_path();
  auto sidecar = [&](const char* key, const fs::path& fallback) {
    auto it = manifest.find(key);
    return (it != manifest.end() && it->is_string()) ? dir / it->get<std::string>() : fallback;
  };

  m.row_ids = detail::split_lines(read_file(sidecar("ids", p.ids)));
  if (m.row_ids.size() != count)
    throw ParseError(source, 0, "id list has " + std::to_string(m.row_ids.size()) +
                                    " entries, manifest says " + std::to_string(count));
  if (manifest.contains("columns")) {
    m.col_ids = detail::split_lines(read_file(sidecar("columns", p.cols)));
    if (m.col_ids.size() != m.dimension)
      throw ParseError(source, 0, "column list does not match dimension");
  }
  const std::string bytes = read_file(sidecar("data", p.data));
  if (bytes.size() != count * m.dimension * 4)
    throw ParseError(source, 0, "payload is " + std::to_string(bytes.size()) +
                                    " bytes, expected " + std::to_string(count * m.dimension * 4));
  m.values.resize(count * m.dimension);
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    m.values[i] = std::bit_cast<float>(detail::to_little(bits));
    if (!std::isfinite(m.values[i]))
      throw ParseError(source, 0, "non-finite value in row " + std::to_string(i / m.dimension));
  }
  return m;
}

}  // namespace querec
