// SPDX-License-Identifier: Apache-2.0
#pragma once

// Ranked lists and the shared top-k rule: score descending, ties by ascending item id.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "querec/error.hpp"
#include "querec/io.hpp"

namespace querec {

struct ScoredItem {
  std::string item_id;
  double score = 0.0;

  bool operator==(const ScoredItem&) const = default;
};

struct ScoredList {
  std::vector<ScoredItem> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  /// 1-based rank of `item_id`, or 0 when absent.
  std::size_t rank_of(const std::string& item_id) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].item_id == item_id) return i + 1;
    return 0;
  }

  bool operator==(const ScoredList&) const = default;
};

/// Per-user ranked lists keyed by user id.
using RankedRuns = std::map<std::string, ScoredList>;

/// Builds a boolean mask over `ids` marking members of `exclude`.
inline std::vector<char> exclusion_mask(std::span<const std::string> ids,
                                        const std::unordered_set<std::string>& exclude) {
  std::vector<char> mask(ids.size(), 0);
  if (exclude.empty()) return mask;
  for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = exclude.count(ids[i]) ? 1 : 0;
  return mask;
}

/// Top-k over a full score vector aligned with `ids`. `excluded` may be empty (no exclusions)
/// or aligned with `ids`. Returns fewer than k entries when fewer remain.
inline ScoredList top_k(std::span<const double> scores, std::span<const std::string> ids,
                        std::size_t k, std::span<const char> excluded = {}) {
  if (scores.size() != ids.size()) throw InvalidArgument("scores and ids differ in length");
  if (!excluded.empty() && excluded.size() != ids.size())
    throw InvalidArgument("exclusion mask and ids differ in length");
  std::vector<std::size_t> order;
  order.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (excluded.empty() || !excluded[i]) order.push_back(i);
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  };
  const std::size_t take = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    better);
  ScoredList out;
  out.entries.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.entries.push_back({ids[order[i]], scores[order[i]]});
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: {"user_id": ..., "items": [{"item_id": ..., "score": ...}, ...]}

inline json to_json(const std::string& user_id, const ScoredList& list) {
  json items = json::array();
  for (const auto& e : list.entries) items.push_back(json{{"item_id", e.item_id}, {"score", e.score}});
  return json{{"user_id", user_id}, {"items", std::move(items)}};
}

inline void write_runs(const fs::path& path, const RankedRuns& runs) {
  std::vector<json> records;
  records.reserve(runs.size());
  for (const auto& [user, list] : runs) records.push_back(to_json(user, list));
  write_jsonl(path, records);
}

/// Reads a run file. Duplicate users or duplicate items within a list are errors.
inline RankedRuns read_runs(const fs::path& path) {
  RankedRuns runs;
  const std::string source = path.string();
  for_each_jsonl(path, [&](const json& j, std::size_t line) {
    std::string user = require_string(j, "user_id", source, line);
    const json& items = require_field(j, "items", source, line);
    if (!items.is_array()) throw ParseError(source, line, "field 'items' must be an array");
    ScoredList list;
    std::unordered_set<std::string> seen;
    for (const auto& it : items) {
      std::string item = require_string(it, "item_id", source, line);
      const json& score = require_field(it, "score", source, line);
      if (!score.is_number()) throw ParseError(source, line, "score must be a number");
      double s = score.get<double>();
      if (!std::isfinite(s)) throw ParseError(source, line, "non-finite score");
      if (!seen.insert(item).second)
        throw ParseError(source, line, "duplicate item " + item + " for user " + user);
      list.entries.push_back({std::move(item), s});
    }
    if (!runs.emplace(user, std::move(list)).second)
      throw ParseError(source, line, "duplicate user " + user);
  });
  return runs;
}

}  // namespace querec
