// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "querec/error.hpp"
#include "querec/hash.hpp"

namespace querec {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return std::move(ss).str();
}

/// Writes via a sibling temp file and rename, so readers never observe a half-written file.
inline void write_file(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::uint64_t hash_file(const fs::path& path) { return fnv1a64(read_file(path)); }

/// Calls `fn(record, line_no)` for each non-blank line. Malformed JSON raises ParseError.
inline void for_each_jsonl(const fs::path& path,
                           const std::function<void(const json&, std::size_t)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path.string(), line_no, std::string("invalid JSON: ") + e.what());
    }
    try {
      fn(record, line_no);
    } catch (const ParseError&) {
      throw;
    } catch (const json::exception& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
  }
  if (in.bad()) throw IoError("read failed: " + path.string());
}

inline std::string to_jsonl(const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

inline void write_jsonl(const fs::path& path, const std::vector<json>& records) {
  write_file(path, to_jsonl(records));
}

// Field accessors that name the missing key instead of surfacing a bare json type_error.
inline const json& require_field(const json& obj, const char* key, const std::string& source,
                                 std::size_t line) {
  if (!obj.is_object()) throw ParseError(source, line, "expected a JSON object");
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null())
    throw ParseError(source, line, std::string("missing field '") + key + "'");
  return *it;
}

inline std::string require_string(const json& obj, const char* key, const std::string& source,
                                  std::size_t line) {
  const json& v = require_field(obj, key, source, line);
  if (!v.is_string())
    throw ParseError(source, line, std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace querec
