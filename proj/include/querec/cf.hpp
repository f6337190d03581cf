// SPDX-License-Identifier: Apache-2.0
#pragma once

// Collaborative-filtering score sources: imported model scores (full matrices or top-N
// lists) and two self-contained baselines.

#include <algorithm>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <variant>
#include <vector>

#include "querec/dataset.hpp"
#include "querec/error.hpp"
#include "querec/matrix_io.hpp"
#include "querec/ranking.hpp"

namespace querec {

/// Either a full users x items matrix or per-user top-N lists.
struct CfScores {
  std::variant<DenseMatrix, RankedRuns> data;

  bool is_dense() const { return std::holds_alternative<DenseMatrix>(data); }
};

namespace detail {

inline void check_known(const std::string& item, const std::unordered_set<std::string>& known,
                        const std::string& source) {
  if (!known.count(item)) throw ParseError(source, 0, "unknown item_id '" + item + "'");
}

}  // namespace detail

/// Loads a score matrix (manifest path ending in .json) or a JSONL top-N file, rejecting
/// item ids that are not in `known_items`.
inline CfScores import_cf_scores(const fs::path& path,
                                 const std::unordered_set<std::string>& known_items) {
  const std::string source = path.string();
  if (path.extension() == ".json") {
    DenseMatrix m = load_matrix(path);
    if (m.col_ids.empty()) throw ParseError(source, 0, "score matrix needs a column id list");
    for (const auto& id : m.col_ids) detail::check_known(id, known_items, source);
    std::unordered_set<std::string> users;
    for (const auto& u : m.row_ids)
      if (!users.insert(u).second) throw ParseError(source, 0, "duplicate user " + u);
    std::unordered_set<std::string> cols(m.col_ids.begin(), m.col_ids.end());
    if (cols.size() != m.col_ids.size()) throw ParseError(source, 0, "duplicate column id");
    return {std::move(m)};
  }
  RankedRuns runs = read_runs(path);
  for (const auto& [user, list] : runs)
    for (const auto& e : list.entries) detail::check_known(e.item_id, known_items, source);
  return {std::move(runs)};
}

inline CfScores import_cf_scores(const fs::path& path, const Catalog& catalog) {
  std::unordered_set<std::string> known;
  for (const auto& [id, meta] : catalog) known.insert(id);
  return import_cf_scores(path, known);
}

inline void export_cf_scores(const fs::path& path, const CfScores& scores) {
  if (scores.is_dense()) {
    save_matrix(path, std::get<DenseMatrix>(scores.data));
  } else {
    write_runs(path, std::get<RankedRuns>(scores.data));
  }
}

/// Full-pool scores for `users` over `item_ids`. Items missing from a top-N list take that
/// list's minimum score, so they normalize to 0 downstream.
inline DenseMatrix dense_cf_scores(const CfScores& scores, std::span<const std::string> users,
                                   std::span<const std::string> item_ids) {
  DenseMatrix out;
  out.row_ids.assign(users.begin(), users.end());
  out.col_ids.assign(item_ids.begin(), item_ids.end());
  out.dimension = item_ids.size();
  out.values.assign(users.size() * item_ids.size(), 0.0f);

  if (const auto* m = std::get_if<DenseMatrix>(&scores.data)) {
    std::unordered_map<std::string, std::size_t> row_of, col_of;
    for (std::size_t r = 0; r < m->rows(); ++r) row_of.emplace(m->row_ids[r], r);
    for (std::size_t c = 0; c < m->col_ids.size(); ++c) col_of.emplace(m->col_ids[c], c);
    std::vector<std::size_t> cols(item_ids.size());
    for (std::size_t i = 0; i < item_ids.size(); ++i) {
      auto it = col_of.find(item_ids[i]);
      if (it == col_of.end()) throw Error("CF matrix has no column for item '" + item_ids[i] + "'");
      cols[i] = it->second;
    }
    for (std::size_t u = 0; u < users.size(); ++u) {
      auto it = row_of.find(users[u]);
      if (it == row_of.end()) throw Error("CF scores missing user '" + users[u] + "'");
      auto src = m->row(it->second);
      auto dst = out.row(u);
      for (std::size_t i = 0; i < item_ids.size(); ++i) dst[i] = src[cols[i]];
    }
    return out;
  }

  const auto& runs = std::get<RankedRuns>(scores.data);
  std::unordered_map<std::string, std::size_t> col_of;
  for (std::size_t i = 0; i < item_ids.size(); ++i) col_of.emplace(item_ids[i], i);
  for (std::size_t u = 0; u < users.size(); ++u) {
    auto it = runs.find(users[u]);
    if (it == runs.end() || it->second.empty())
      throw Error("CF scores missing user '" + users[u] + "'");
    double lo = it->second.entries.front().score;
    for (const auto& e : it->second.entries) lo = std::min(lo, e.score);
    auto dst = out.row(u);
    std::fill(dst.begin(), dst.end(), static_cast<float>(lo));
    for (const auto& e : it->second.entries) {
      auto c = col_of.find(e.item_id);
      if (c != col_of.end()) dst[c->second] = static_cast<float>(e.score);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Baselines

/// score(u, i) = training frequency of i, identical for every user.
inline DenseMatrix popularity_baseline(const SplitDataset& split,
                                       std::span<const std::string> users,
                                       std::span<const std::string> item_ids) {
  const auto freq = train_frequencies(split);
  std::vector<float> row(item_ids.size(), 0.0f);
  for (std::size_t i = 0; i < item_ids.size(); ++i) {
    auto it = freq.find(item_ids[i]);
    if (it != freq.end()) row[i] = static_cast<float>(it->second);
  }
  DenseMatrix out;
  out.row_ids.assign(users.begin(), users.end());
  out.col_ids.assign(item_ids.begin(), item_ids.end());
  out.dimension = item_ids.size();
  out.values.reserve(users.size() * item_ids.size());
  for (std::size_t u = 0; u < users.size(); ++u) out.values.insert(out.values.end(), row.begin(), row.end());
  return out;
}

/// Item-item co-occurrence counts: co(i, j) is the number of users whose training
/// sequence contains both i and j (i != j).
class CooccurrenceModel {
public:
  explicit CooccurrenceModel(const SplitDataset& split) {
    for (const auto& [user, s] : split.users) {
      std::set<std::string> distinct;
      for (const auto& x : s.train) distinct.insert(x.item_id);
      std::vector<std::string> items(distinct.begin(), distinct.end());
      for (std::size_t a = 0; a < items.size(); ++a)
        for (std::size_t b = 0; b < items.size(); ++b)
          if (a != b) ++co_[items[a]][items[b]];
    }
  }

  std::size_t count(const std::string& i, const std::string& j) const {
    auto it = co_.find(i);
    if (it == co_.end()) return 0;
    auto jt = it->second.find(j);
    return jt == it->second.end() ? 0 : jt->second;
  }

  /// score(i) = sum over distinct history items j != i of co(j, i).
  std::vector<double> score(const std::unordered_set<std::string>& history,
                            std::span<const std::string> item_ids) const {
    std::unordered_map<std::string, std::size_t> col_of;
    for (std::size_t i = 0; i < item_ids.size(); ++i) col_of.emplace(item_ids[i], i);
    std::vector<double> out(item_ids.size(), 0.0);
    for (const auto& j : history) {
      auto it = co_.find(j);
      if (it == co_.end()) continue;
      for (const auto& [i, c] : it->second) {
        auto col = col_of.find(i);
        if (col != col_of.end() && i != j) out[col->second] += static_cast<double>(c);
      }
    }
    return out;
  }

private:
  std::unordered_map<std::string, std::unordered_map<std::string, std::size_t>> co_;
};

/// Co-occurrence scores for each user, with the user's history taken from `view`.
inline DenseMatrix cooccurrence_baseline(const SplitDataset& split,
                                         std::span<const std::string> users,
                                         std::span<const std::string> item_ids, SplitView view) {
  const CooccurrenceModel model(split);
  DenseMatrix out;
  out.row_ids.assign(users.begin(), users.end());
  out.col_ids.assign(item_ids.begin(), item_ids.end());
  out.dimension = item_ids.size();
  out.values.reserve(users.size() * item_ids.size());
  for (const auto& user : users) {
    std::unordered_set<std::string> history;
    if (auto it = split.users.find(user); it != split.users.end())
      for (const auto& x : it->second.history(view)) history.insert(x.item_id);
    for (double s : model.score(history, item_ids)) out.values.push_back(static_cast<float>(s));
  }
  return out;
}

}  // namespace querec
