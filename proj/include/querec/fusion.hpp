// SPDX-License-Identifier: Apache-2.0
#pragma once

// Divergent-perspective reranking: per-user min-max normalization of LLM-retrieval and CF
// scores over the full item pool, fused by a convex combination whose weight comes from
// validation Hit@10 and is pulled toward 0.5 when the two models hit different users.
// Fixed-weight and reciprocal-rank fusion are provided as baselines.

#include <algorithm>
#include <charconv>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "querec/error.hpp"
#include "querec/io.hpp"
#include "querec/log.hpp"
#include "querec/matrix_io.hpp"
#include "querec/ranking.hpp"

namespace querec {

inline constexpr std::size_t kHitSetDepth = 10;
inline constexpr int kDefaultRrfK = 60;

enum class FusionMode { AdaptiveCC, FixedCC, Rrf };

struct FusionConfig {
  FusionMode mode = FusionMode::AdaptiveCC;
  double fixed_lambda = 0.5;
  int rrf_k = kDefaultRrfK;
  std::size_t k_eval = 10;

  /// Parses "adaptive", "fixed:<lambda>", "rrf" or "rrf:<k>".
  static FusionConfig parse(std::string_view spec) {
    FusionConfig cfg;
    auto number_after = [&](std::string_view prefix) { return spec.substr(prefix.size()); };
    if (spec == "adaptive" || spec == "adaptive_cc") {
      cfg.mode = FusionMode::AdaptiveCC;
    } else if (spec.starts_with("fixed:")) {
      cfg.mode = FusionMode::FixedCC;
      std::string num(number_after("fixed:"));
      std::size_t used = 0;
      try {
        cfg.fixed_lambda = std::stod(num, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != num.size() || !(cfg.fixed_lambda >= 0.0 && cfg.fixed_lambda <= 1.0))
        throw InvalidArgument("fixed fusion weight must be a number in [0, 1]: " + std::string(spec));
    } else if (spec == "rrf") {
      cfg.mode = FusionMode::Rrf;
    } else if (spec.starts_with("rrf:")) {
      cfg.mode = FusionMode::Rrf;
      auto num = number_after("rrf:");
      auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), cfg.rrf_k);
      if (ec != std::errc() || p != num.data() + num.size() || cfg.rrf_k <= 0)
        throw InvalidArgument("rrf constant must be a positive integer: " + std::string(spec));
    } else {
      throw InvalidArgument("unknown fusion mode '" + std::string(spec) +
                            "' (expected adaptive, fixed:<lambda>, rrf[:<k>])");
    }
    return cfg;
  }

  std::string to_string() const {
    switch (mode) {
      case FusionMode::AdaptiveCC: return "adaptive";
      case FusionMode::FixedCC: return "fixed:" + json(fixed_lambda).dump();
      case FusionMode::Rrf: return "rrf:" + std::to_string(rrf_k);
    }
    return {};
  }
};

struct FusionDiagnostics {
  double lambda_init = 0.5;
  double omega = 0.0;
  double lambda = 0.5;
  double hit10_llm = 0.0;
  double hit10_cf = 0.0;

  bool operator==(const FusionDiagnostics&) const = default;
};

inline json to_json(const FusionDiagnostics& d) {
  return json{{"lambda_init", d.lambda_init},
              {"omega", d.omega},
              {"lambda", d.lambda},
              {"hit10_llm", d.hit10_llm},
              {"hit10_cf", d.hit10_cf}};
}

inline FusionDiagnostics diagnostics_from_json(const json& j) {
  FusionDiagnostics d;
  d.lambda_init = j.at("lambda_init").get<double>();
  d.omega = j.at("omega").get<double>();
  d.lambda = j.at("lambda").get<double>();
  d.hit10_llm = j.at("hit10_llm").get<double>();
  d.hit10_cf = j.at("hit10_cf").get<double>();
  return d;
}

// ---------------------------------------------------------------------------
// Formulas

/// Maps scores affinely onto [0, 1]. A constant vector maps to 0.5 everywhere.
inline std::vector<double> minmax_normalize(std::span<const double> scores) {
  std::vector<double> out(scores.size());
  if (scores.empty()) return out;
  auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    std::fill(out.begin(), out.end(), 0.5);
    return out;
  }
  const double range = hi - lo;
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = (scores[i] - lo) / range;
  return out;
}

/// Users whose target item is among the first k entries of their list. Users without a
/// target are skipped.
inline std::set<std::string> hit_sets(const RankedRuns& ranked,
                                      const std::map<std::string, std::string>& targets,
                                      std::size_t k = kHitSetDepth) {
  std::set<std::string> out;
  std::size_t missing = 0;
  for (const auto& [user, list] : ranked) {
    auto t = targets.find(user);
    if (t == targets.end()) {
      ++missing;
      continue;
    }
    const std::size_t r = list.rank_of(t->second);
    if (r != 0 && r <= k) out.insert(user);
  }
  if (missing) log::warn(std::to_string(missing) + " ranked users have no target; skipped");
  return out;
}

/// Performance-proportional weight; 0.5 when neither model has any hit.
inline double lambda_init(double hit10_llm, double hit10_cf) {
  const double total = hit10_llm + hit10_cf;
  if (!(total > 0.0)) return 0.5;
  return hit10_llm / total;
}

/// Jaccard index of the two hit sets; 0 when both are empty.
inline double intersection_ratio(const std::set<std::string>& h_llm,
                                 const std::set<std::string>& h_cf) {
  std::size_t inter = 0;
  for (const auto& u : h_llm) inter += h_cf.count(u);
  const std::size_t uni = h_llm.size() + h_cf.size() - inter;
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double adaptive_lambda(double lambda_init_value, double omega) {
  return omega * lambda_init_value + (1.0 - omega) * 0.5;
}

inline std::vector<double> convex_combine(std::span<const double> llm_norm,
                                          std::span<const double> cf_norm, double lambda) {
  if (llm_norm.size() != cf_norm.size())
    throw InvalidArgument("cannot combine score vectors of different length");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("lambda must lie in [0, 1]");
  std::vector<double> out(llm_norm.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = lambda * llm_norm[i] + (1.0 - lambda) * cf_norm[i];
  return out;
}

/// Reciprocal rank fusion: each list contributes 1 / (rrf_k + rank), rank starting at 1.
inline ScoredList rrf_fuse(const ScoredList& a, const ScoredList& b, int rrf_k = kDefaultRrfK) {
  if (rrf_k <= 0) throw InvalidArgument("rrf_k must be positive");
  std::unordered_map<std::string, double> acc;
  for (const ScoredList* list : {&a, &b})
    for (std::size_t r = 0; r < list->entries.size(); ++r)
      acc[list->entries[r].item_id] += 1.0 / static_cast<double>(rrf_k + static_cast<int>(r) + 1);
  std::vector<std::string> ids;
  std::vector<double> scores;
  ids.reserve(acc.size());
  scores.reserve(acc.size());
  for (const auto& [id, s] : acc) {
    ids.push_back(id);
    scores.push_back(s);
  }
  return top_k(scores, ids, ids.size());
}

// ---------------------------------------------------------------------------
// Global weight from validation rankings

/// Hit rate over the users that have both a ranked list and a target.
inline double hit_rate_of(const std::set<std::string>& hits, const RankedRuns& ranked,
                          const std::map<std::string, std::string>& targets) {
  std::size_t n = 0;
  for (const auto& [user, list] : ranked) n += targets.count(user);
  if (n == 0) throw InvalidArgument("no ranked user has a validation target");
  return static_cast<double>(hits.size()) / static_cast<double>(n);
}

inline FusionDiagnostics estimate_adaptive_lambda(const RankedRuns& valid_llm,
                                                  const RankedRuns& valid_cf,
                                                  const std::map<std::string, std::string>& valid_targets) {
  if (valid_targets.empty() || valid_llm.empty() || valid_cf.empty())
    throw InvalidArgument(
        "adaptive fusion needs validation rankings and targets; use fixed:<lambda> or rrf instead");
  const auto h_llm = hit_sets(valid_llm, valid_targets, kHitSetDepth);
  const auto h_cf = hit_sets(valid_cf, valid_targets, kHitSetDepth);
  FusionDiagnostics d;
  d.hit10_llm = hit_rate_of(h_llm, valid_llm, valid_targets);
  d.hit10_cf = hit_rate_of(h_cf, valid_cf, valid_targets);
  d.lambda_init = lambda_init(d.hit10_llm, d.hit10_cf);
  d.omega = intersection_ratio(h_llm, h_cf);
  d.lambda = adaptive_lambda(d.lambda_init, d.omega);
  return d;
}

// ---------------------------------------------------------------------------
// Per-user fusion

struct FusedRanking {
  ScoredList list;
  /// Range of the normalized scores actually produced (for post-run checks).
  double norm_min = 0.0;
  double norm_max = 0.0;
};

/// Fuses one user's full-pool score vectors with weight `lambda` and returns the top
/// `config.k_eval` non-excluded items. For rrf mode `lambda` is ignored.
inline FusedRanking fuse_and_rank(std::span<const double> llm_scores,
                                  std::span<const double> cf_scores,
                                  std::span<const std::string> item_ids,
                                  std::span<const char> excluded, const FusionConfig& config,
                                  double lambda) {
  if (llm_scores.size() != item_ids.size() || cf_scores.size() != item_ids.size())
    throw InvalidArgument("score vectors must cover the full item pool");
  FusedRanking out;
  if (config.mode == FusionMode::Rrf) {
    const auto a = top_k(llm_scores, item_ids, item_ids.size(), excluded);
    const auto b = top_k(cf_scores, item_ids, item_ids.size(), excluded);
    out.list = rrf_fuse(a, b, config.rrf_k);
    if (out.list.entries.size() > config.k_eval) out.list.entries.resize(config.k_eval);
    return out;
  }
  const auto llm_norm = minmax_normalize(llm_scores);
  const auto cf_norm = minmax_normalize(cf_scores);
  if (!llm_norm.empty()) {
    auto [a_lo, a_hi] = std::minmax_element(llm_norm.begin(), llm_norm.end());
    auto [b_lo, b_hi] = std::minmax_element(cf_norm.begin(), cf_norm.end());
    out.norm_min = std::min(*a_lo, *b_lo);
    out.norm_max = std::max(*a_hi, *b_hi);
  }
  const auto fused = convex_combine(llm_norm, cf_norm, lambda);
  out.list = top_k(fused, item_ids, config.k_eval, excluded);
  return out;
}

/// Top-k lists from a users x items score matrix. `exclude` maps users to item ids that
/// must not be ranked.
inline RankedRuns rank_matrix(const DenseMatrix& scores, std::size_t k,
                              const std::map<std::string, std::unordered_set<std::string>>& exclude = {}) {
  RankedRuns runs;
  std::vector<double> row(scores.dimension);
  for (std::size_t u = 0; u < scores.rows(); ++u) {
    auto src = scores.row(u);
    std::copy(src.begin(), src.end(), row.begin());
    auto ex = exclude.find(scores.row_ids[u]);
    std::vector<char> mask;
    if (ex != exclude.end()) mask = exclusion_mask(scores.col_ids, ex->second);
    runs.emplace(scores.row_ids[u], top_k(row, scores.col_ids, k, mask));
  }
  return runs;
}

struct FusionInputs {
  const DenseMatrix* llm_test = nullptr;
  const DenseMatrix* cf_test = nullptr;
  const DenseMatrix* llm_valid = nullptr;  // adaptive mode only
  const DenseMatrix* cf_valid = nullptr;   // adaptive mode only
  std::map<std::string, std::string> valid_targets;
  std::map<std::string, std::unordered_set<std::string>> exclude_valid;
  std::map<std::string, std::unordered_set<std::string>> exclude_test;
};

struct FusionResult {
  RankedRuns runs;
  std::optional<FusionDiagnostics> diagnostics;  // absent for rrf
  double norm_min = 0.0;
  double norm_max = 0.0;
};

/// Fuses every user of `inputs.llm_test`. Adaptive mode estimates one global weight from the
/// validation matrices unless `precomputed` is given.
inline FusionResult fuse_all(const FusionInputs& inputs, const FusionConfig& config,
                             std::optional<FusionDiagnostics> precomputed = std::nullopt) {
  if (!inputs.llm_test || !inputs.cf_test) throw InvalidArgument("fusion needs LLM and CF scores");
  const DenseMatrix& llm = *inputs.llm_test;
  const DenseMatrix& cf = *inputs.cf_test;
  if (llm.col_ids != cf.col_ids) throw InvalidArgument("LLM and CF scores use different item orders");

  FusionResult result;
  double lambda = 0.5;
  switch (config.mode) {
    case FusionMode::AdaptiveCC:
      if (precomputed) {
        result.diagnostics = precomputed;
      } else {
        if (!inputs.llm_valid || !inputs.cf_valid)
          throw InvalidArgument(
              "adaptive fusion needs validation scores; use fixed:<lambda> or rrf instead");
        result.diagnostics = estimate_adaptive_lambda(
            rank_matrix(*inputs.llm_valid, kHitSetDepth, inputs.exclude_valid),
            rank_matrix(*inputs.cf_valid, kHitSetDepth, inputs.exclude_valid), inputs.valid_targets);
      }
      lambda = result.diagnostics->lambda;
      break;
    case FusionMode::FixedCC:
      lambda = config.fixed_lambda;
      result.diagnostics = FusionDiagnostics{lambda, 1.0, lambda, 0.0, 0.0};
      break;
    case FusionMode::Rrf:
      break;
  }

  std::unordered_map<std::string, std::size_t> cf_row;
  for (std::size_t r = 0; r < cf.rows(); ++r) cf_row.emplace(cf.row_ids[r], r);

  std::vector<double> a(llm.dimension), b(llm.dimension);
  bool first = true;
  for (std::size_t u = 0; u < llm.rows(); ++u) {
    const auto& user = llm.row_ids[u];
    auto c = cf_row.find(user);
    if (c == cf_row.end()) throw Error("CF scores missing user '" + user + "'");
    auto la = llm.row(u);
    auto lb = cf.row(c->second);
    std::copy(la.begin(), la.end(), a.begin());
    std::copy(lb.begin(), lb.end(), b.begin());
    std::vector<char> mask;
    if (auto ex = inputs.exclude_test.find(user); ex != inputs.exclude_test.end())
      mask = exclusion_mask(llm.col_ids, ex->second);
    auto fused = fuse_and_rank(a, b, llm.col_ids, mask, config, lambda);
    if (config.mode != FusionMode::Rrf) {
      result.norm_min = first ? fused.norm_min : std::min(result.norm_min, fused.norm_min);
      result.norm_max = first ? fused.norm_max : std::max(result.norm_max, fused.norm_max);
      first = false;
    }
    result.runs.emplace(user, std::move(fused.list));
  }
  return result;
}

}  // namespace querec
