// SPDX-License-Identifier: Apache-2.0
#pragma once

// Exact cosine scoring over the whole item pool.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "querec/embed.hpp"
#include "querec/error.hpp"
#include "querec/matrix_io.hpp"
#include "querec/ranking.hpp"

namespace querec {

inline double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

inline double cosine_similarity(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size())
    throw InvalidArgument("dimension mismatch: " + std::to_string(u.size()) + " vs " +
                          std::to_string(v.size()));
  const double nu = std::sqrt(dot(u, u));
  const double nv = std::sqrt(dot(v, v));
  if (!(nu > 0.0) || !(nv > 0.0)) throw InvalidArgument("cosine of a zero vector");
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

/// Immutable matrix of unit-normalized item vectors with an aligned id list.
class ItemIndex {
public:
  ItemIndex() = default;

  /// Normalizes every row. Duplicate ids and zero rows are rejected.
  static ItemIndex build(std::vector<std::string> ids, std::span<const EmbeddingVector> vectors) {
    if (ids.size() != vectors.size())
      throw InvalidArgument("ids and vectors differ in length");
    ItemIndex idx;
    idx.matrix_.dimension = vectors.empty() ? 0 : vectors.front().size();
    idx.matrix_.values.reserve(ids.size() * idx.matrix_.dimension);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (vectors[i].size() != idx.matrix_.dimension)
        throw InvalidArgument("dimension mismatch for item '" + ids[i] + "'");
      EmbeddingVector unit;
      try {
        unit = l2_normalize(vectors[i]);
      } catch (const InvalidArgument&) {
        throw InvalidArgument("item '" + ids[i] + "' has a zero embedding");
      }
      idx.matrix_.values.insert(idx.matrix_.values.end(), unit.begin(), unit.end());
    }
    idx.matrix_.row_ids = std::move(ids);
    idx.index_rows();
    return idx;
  }

  static ItemIndex build(const DenseMatrix& embeddings) {
    std::vector<EmbeddingVector> rows;
    rows.reserve(embeddings.rows());
    for (std::size_t r = 0; r < embeddings.rows(); ++r) {
      auto row = embeddings.row(r);
      rows.emplace_back(row.begin(), row.end());
    }
    return build(embeddings.row_ids, rows);
  }

  void save(const fs::path& stem) const { save_matrix(stem, matrix_); }

  /// Loads a persisted index and re-checks its invariants.
  static ItemIndex load(const fs::path& stem) {
    ItemIndex idx;
    idx.matrix_ = load_matrix(stem);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const double n = std::sqrt(dot(idx.matrix_.row(r), idx.matrix_.row(r)));
      if (std::abs(n - 1.0) > 1e-5)
        throw ParseError(stem.string(), 0, "row for '" + idx.matrix_.row_ids[r] + "' is not unit-norm");
    }
    idx.index_rows();
    return idx;
  }

  std::size_t size() const { return matrix_.rows(); }
  std::size_t dimension() const { return matrix_.dimension; }
  const std::vector<std::string>& item_ids() const { return matrix_.row_ids; }
  std::span<const float> row(std::size_t r) const { return matrix_.row(r); }
  const DenseMatrix& matrix() const { return matrix_; }

  std::optional<std::size_t> row_of(const std::string& id) const {
    auto it = rows_.find(id);
    if (it == rows_.end()) return std::nullopt;
    return it->second;
  }

  bool operator==(const ItemIndex& o) const { return matrix_ == o.matrix_; }

private:
  void index_rows() {
    rows_.clear();
    for (std::size_t r = 0; r < matrix_.rows(); ++r)
      if (!rows_.emplace(matrix_.row_ids[r], r).second)
        throw InvalidArgument("duplicate item id '" + matrix_.row_ids[r] + "'");
  }

  DenseMatrix matrix_;
  std::unordered_map<std::string, std::size_t> rows_;
};

/// Cosine score of every indexed item against `user_vec`, aligned with `index.item_ids()`.
inline std::vector<double> score_all(const ItemIndex& index, std::span<const float> user_vec) {
  if (index.size() == 0) return {};
  if (user_vec.size() != index.dimension())
    throw InvalidArgument("user vector has dimension " + std::to_string(user_vec.size()) +
                          ", index has " + std::to_string(index.dimension()));
  const double norm = std::sqrt(dot(user_vec, user_vec));
  if (!(norm > 0.0)) throw InvalidArgument("user vector is zero");
  std::vector<double> scores(index.size());
  for (std::size_t r = 0; r < index.size(); ++r) scores[r] = dot(index.row(r), user_vec) / norm;
  return scores;
}

inline ScoredList retrieve_topk(const ItemIndex& index, std::span<const float> user_vec,
                                std::size_t k,
                                const std::unordered_set<std::string>& exclude = {}) {
  if (k == 0) throw InvalidArgument("k must be at least 1");
  const auto scores = score_all(index, user_vec);
  const auto mask = exclusion_mask(index.item_ids(), exclude);
  return top_k(scores, index.item_ids(), k, mask);
}

/// Scores every row of `users` against the index; the result has users as rows and
/// items as columns. Rows are processed in parallel.
inline DenseMatrix score_users(const ItemIndex& index, const DenseMatrix& users,
                               unsigned threads = std::thread::hardware_concurrency()) {
  DenseMatrix out;
  out.row_ids = users.row_ids;
  out.col_ids = index.item_ids();
  out.dimension = index.size();
  out.values.assign(users.rows() * index.size(), 0.0f);
  if (users.rows() && users.dimension != index.dimension())
    throw InvalidArgument("user embeddings and index differ in dimension");
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t u = begin; u < end; ++u) {
      auto s = score_all(index, users.row(u));
      auto dst = out.row(u);
      for (std::size_t i = 0; i < s.size(); ++i) dst[i] = static_cast<float>(s[i]);
    }
  };
  const std::size_t n = users.rows();
  const std::size_t t = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (t == 1) {
    work(0, n);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < t; ++w) pool.emplace_back(work, n * w / t, n * (w + 1) / t);
  }
  return out;
}

}  // namespace querec
