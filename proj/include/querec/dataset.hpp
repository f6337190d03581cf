// SPDX-License-Identifier: Apache-2.0
#pragma once

// Interaction logs, item metadata, and the leave-one-out split.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "querec/error.hpp"
#include "querec/io.hpp"

namespace querec {

struct Interaction {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;
  std::string review;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

struct ItemMeta {
  std::string item_id;
  std::string title;
  std::string brand = "Unknown";
  std::vector<std::string> categories;
  std::string description;

  bool operator==(const ItemMeta&) const = default;
};

using Catalog = std::map<std::string, ItemMeta>;

inline json to_json(const Interaction& x) {
  return json{{"user_id", x.user_id},
              {"item_id", x.item_id},
              {"rating", x.rating},
              {"review", x.review},
              {"timestamp", x.timestamp}};
}

inline Interaction interaction_from_json(const json& j, const std::string& source,
                                         std::size_t line) {
  Interaction x;
  x.user_id = require_string(j, "user_id", source, line);
  x.item_id = require_string(j, "item_id", source, line);
  if (x.user_id.empty()) throw ParseError(source, line, "empty user_id");
  if (x.item_id.empty()) throw ParseError(source, line, "empty item_id");
  const json& rating = require_field(j, "rating", source, line);
  if (!rating.is_number()) throw ParseError(source, line, "field 'rating' must be a number");
  x.rating = rating.get<double>();
  if (!(x.rating >= 1.0 && x.rating <= 5.0))
    throw ParseError(source, line, "rating outside [1, 5]");
  if (auto it = j.find("review"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) throw ParseError(source, line, "field 'review' must be a string");
    x.review = it->get<std::string>();
  }
  const json& ts = require_field(j, "timestamp", source, line);
  if (!ts.is_number_integer()) throw ParseError(source, line, "field 'timestamp' must be an integer");
  x.timestamp = ts.get<std::int64_t>();
  if (x.timestamp < 0) throw ParseError(source, line, "negative timestamp");
  return x;
}

/// Loads line-delimited JSON interactions in file order. Blank lines are skipped.
inline std::vector<Interaction> load_interactions(const fs::path& path) {
  std::vector<Interaction> out;
  const std::string source = path.string();
  for_each_jsonl(path, [&](const json& j, std::size_t line) {
    out.push_back(interaction_from_json(j, source, line));
  });
  return out;
}

inline json to_json(const ItemMeta& m) {
  return json{{"item_id", m.item_id},
              {"title", m.title},
              {"brand", m.brand},
              {"categories", m.categories},
              {"description", m.description}};
}

namespace detail {

// Amazon dumps nest categories one level deep and sometimes ship descriptions as string arrays.
inline void flatten_strings(const json& j, std::vector<std::string>& out) {
  if (j.is_string()) {
    out.push_back(j.get<std::string>());
  } else if (j.is_array()) {
    for (const auto& e : j) flatten_strings(e, out);
  }
}

}  // namespace detail

inline ItemMeta item_meta_from_json(const json& j, const std::string& source, std::size_t line) {
  ItemMeta m;
  m.item_id = require_string(j, "item_id", source, line);
  if (m.item_id.empty()) throw ParseError(source, line, "empty item_id");
  m.title = require_string(j, "title", source, line);
  if (m.title.empty()) throw ParseError(source, line, "empty title for item " + m.item_id);
  if (auto it = j.find("brand"); it != j.end() && it->is_string() && !it->get<std::string>().empty())
    m.brand = it->get<std::string>();
  if (auto it = j.find("categories"); it != j.end()) detail::flatten_strings(*it, m.categories);
  if (auto it = j.find("description"); it != j.end()) {
    std::vector<std::string> parts;
    detail::flatten_strings(*it, parts);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (i) m.description += ' ';
      m.description += parts[i];
    }
  }
  return m;
}

inline Catalog load_catalog(const fs::path& path) {
  Catalog catalog;
  const std::string source = path.string();
  for_each_jsonl(path, [&](const json& j, std::size_t line) {
    ItemMeta m = item_meta_from_json(j, source, line);
    std::string id = m.item_id;
    if (!catalog.emplace(id, std::move(m)).second)
      throw ParseError(source, line, "duplicate item_id " + id);
  });
  return catalog;
}

// ---------------------------------------------------------------------------
// Split

enum class SplitView { Validation, Test };

inline const char* to_string(SplitView v) { return v == SplitView::Validation ? "valid" : "test"; }

struct UserSplit {
  std::vector<Interaction> train;
  std::optional<Interaction> valid;
  std::optional<Interaction> test;

  bool has_targets() const { return valid.has_value() && test.has_value(); }

  /// Interactions visible when predicting the target of `view`.
  std::vector<Interaction> history(SplitView view) const {
    std::vector<Interaction> h = train;
    if (view == SplitView::Test && valid) h.push_back(*valid);
    return h;
  }

  const Interaction& target(SplitView view) const {
    const auto& t = view == SplitView::Validation ? valid : test;
    if (!t) throw InvalidArgument("user has no target");
    return *t;
  }
};

struct SplitDataset {
  std::map<std::string, UserSplit> users;

  std::map<std::string, std::string> targets(SplitView view) const {
    std::map<std::string, std::string> out;
    for (const auto& [user, s] : users)
      if (s.has_targets()) out.emplace(user, s.target(view).item_id);
    return out;
  }

  std::vector<std::string> evaluated_users() const {
    std::vector<std::string> out;
    for (const auto& [user, s] : users)
      if (s.has_targets()) out.push_back(user);
    return out;
  }

  /// All training-slice interactions, users in id order, each in chronological order.
  std::vector<Interaction> train_interactions() const {
    std::vector<Interaction> out;
    for (const auto& [user, s] : users) out.insert(out.end(), s.train.begin(), s.train.end());
    return out;
  }
};

struct SplitOptions {
  std::size_t min_len = 3;
  /// Keep only the first (earliest) interaction per (user, item) pair.
  bool dedup = false;
};

inline SplitDataset leave_one_out_split(const std::vector<Interaction>& interactions,
                                        const SplitOptions& opts = {}) {
  if (opts.min_len < 3) throw InvalidArgument("min_len must be at least 3");
  std::map<std::string, std::vector<Interaction>> per_user;
  for (const auto& x : interactions) per_user[x.user_id].push_back(x);

  SplitDataset split;
  for (auto& [user, seq] : per_user) {
    std::stable_sort(seq.begin(), seq.end(), [](const Interaction& a, const Interaction& b) {
      return a.timestamp < b.timestamp;
    });
    if (opts.dedup) {
      std::unordered_set<std::string> seen;
      std::erase_if(seq, [&](const Interaction& x) { return !seen.insert(x.item_id).second; });
    }
    UserSplit us;
    if (seq.size() < opts.min_len) {
      us.train = std::move(seq);
    } else {
      us.test = seq.back();
      us.valid = seq[seq.size() - 2];
      seq.resize(seq.size() - 2);
      us.train = std::move(seq);
    }
    split.users.emplace(user, std::move(us));
  }
  return split;
}

/// Training frequency of every item (duplicates counted).
inline std::unordered_map<std::string, std::size_t> train_frequencies(const SplitDataset& split) {
  std::unordered_map<std::string, std::size_t> freq;
  for (const auto& [user, s] : split.users)
    for (const auto& x : s.train) ++freq[x.item_id];
  return freq;
}

struct DatasetStats {
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  std::size_t n_reviews = 0;
  double density_pct = 0.0;

  bool operator==(const DatasetStats&) const = default;
};

inline DatasetStats dataset_stats(const std::vector<Interaction>& interactions) {
  std::unordered_set<std::string> users, items;
  for (const auto& x : interactions) {
    users.insert(x.user_id);
    items.insert(x.item_id);
  }
  DatasetStats s;
  s.n_users = users.size();
  s.n_items = items.size();
  s.n_reviews = interactions.size();
  if (s.n_users && s.n_items)
    s.density_pct = 100.0 * static_cast<double>(s.n_reviews) /
                    (static_cast<double>(s.n_users) * static_cast<double>(s.n_items));
  return s;
}

inline json to_json(const DatasetStats& s) {
  return json{{"n_users", s.n_users},
              {"n_items", s.n_items},
              {"n_reviews", s.n_reviews},
              {"density_pct", s.density_pct}};
}

/// Writes train.jsonl, valid.jsonl, test.jsonl and stats.json into `dir`.
inline void write_split(const fs::path& dir, const SplitDataset& split, const DatasetStats& stats) {
  std::vector<json> train, valid, test;
  for (const auto& [user, s] : split.users) {
    for (const auto& x : s.train) train.push_back(to_json(x));
    if (s.valid) valid.push_back(to_json(*s.valid));
    if (s.test) test.push_back(to_json(*s.test));
  }
  write_jsonl(dir / "train.jsonl", train);
  write_jsonl(dir / "valid.jsonl", valid);
  write_jsonl(dir / "test.jsonl", test);
  write_file(dir / "stats.json", to_json(stats).dump(2) + "\n");
}

inline SplitDataset read_split(const fs::path& dir) {
  SplitDataset split;
  for (auto& x : load_interactions(dir / "train.jsonl")) split.users[x.user_id].train.push_back(x);
  for (auto& x : load_interactions(dir / "valid.jsonl")) {
    auto& us = split.users[x.user_id];
    if (us.valid) throw ParseError((dir / "valid.jsonl").string(), 0, "duplicate user " + x.user_id);
    us.valid = x;
  }
  for (auto& x : load_interactions(dir / "test.jsonl")) {
    auto& us = split.users[x.user_id];
    if (us.test) throw ParseError((dir / "test.jsonl").string(), 0, "duplicate user " + x.user_id);
    us.test = x;
  }
  for (const auto& [user, s] : split.users)
    if (s.valid.has_value() != s.test.has_value())
      throw ParseError(dir.string(), 0, "user " + user + " has only one of valid/test targets");
  return split;
}

}  // namespace querec
