// SPDX-License-Identifier: Apache-2.0
#pragma once

// Ranking accuracy (HR@k, NDCG@k), novelty, popularity skew and overlap between methods.

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "querec/error.hpp"
#include "querec/fusion.hpp"
#include "querec/io.hpp"
#include "querec/ranking.hpp"

namespace querec {

using Targets = std::map<std::string, std::string>;
using Frequencies = std::unordered_map<std::string, std::size_t>;

namespace detail {

template <class PerUser>
double mean_over_targets(const RankedRuns& ranked, const Targets& targets, PerUser&& per_user) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [user, list] : ranked) {
    auto t = targets.find(user);
    if (t == targets.end()) continue;
    sum += per_user(list.rank_of(t->second));
    ++n;
  }
  if (n == 0) throw InvalidArgument("no evaluated users (no ranked user has a target)");
  return sum / static_cast<double>(n);
}

}  // namespace detail

inline double hit_rate_at_k(const RankedRuns& ranked, const Targets& targets, std::size_t k) {
  if (k == 0) throw InvalidArgument("k must be at least 1");
  return detail::mean_over_targets(ranked, targets, [k](std::size_t rank) {
    return (rank != 0 && rank <= k) ? 1.0 : 0.0;
  });
}

/// Single-relevant-item NDCG: 1 / log2(rank + 1) inside the cutoff.
inline double ndcg_at_k(const RankedRuns& ranked, const Targets& targets, std::size_t k) {
  if (k == 0) throw InvalidArgument("k must be at least 1");
  return detail::mean_over_targets(ranked, targets, [k](std::size_t rank) {
    return (rank != 0 && rank <= k) ? 1.0 / std::log2(static_cast<double>(rank) + 1.0) : 0.0;
  });
}

inline std::size_t total_frequency(const Frequencies& freqs) {
  std::size_t total = 0;
  for (const auto& [id, f] : freqs) total += f;
  return total;
}

/// -ln(freq(i) / total); unseen items are smoothed to a count of one.
inline double novelty_of_item(std::size_t freq, std::size_t total) {
  if (total == 0) throw InvalidArgument("novelty needs a non-empty training frequency table");
  const double f = freq == 0 ? 1.0 : static_cast<double>(freq);
  return -std::log(f / static_cast<double>(total));
}

inline double novelty_of_item(const std::string& item, const Frequencies& freqs) {
  auto it = freqs.find(item);
  return novelty_of_item(it == freqs.end() ? 0 : it->second, total_frequency(freqs));
}

/// Mean over users of the mean novelty of each user's top-k items.
inline double mean_novelty_at_k(const RankedRuns& ranked, const Frequencies& freqs,
                                std::size_t k = 10) {
  const std::size_t total = total_frequency(freqs);
  double sum = 0.0;
  std::size_t users = 0;
  for (const auto& [user, list] : ranked) {
    const std::size_t n = std::min(k, list.entries.size());
    if (n == 0) continue;
    double per_user = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      auto it = freqs.find(list.entries[i].item_id);
      per_user += novelty_of_item(it == freqs.end() ? 0 : it->second, total);
    }
    sum += per_user / static_cast<double>(n);
    ++users;
  }
  if (users == 0) throw InvalidArgument("novelty needs at least one non-empty list");
  return sum / static_cast<double>(users);
}

/// Appearances of each item in the users' top-k lists.
inline std::map<std::string, std::size_t> item_distribution(const RankedRuns& ranked,
                                                            std::size_t k = 10) {
  std::map<std::string, std::size_t> counts;
  for (const auto& [user, list] : ranked) {
    const std::size_t n = std::min(k, list.entries.size());
    for (std::size_t i = 0; i < n; ++i) ++counts[list.entries[i].item_id];
  }
  return counts;
}

/// Fisher-Pearson g1 = m3 / m2^1.5 of a sample; 0 when the sample has no spread.
inline double fisher_pearson_skewness(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double m2 = 0.0, m3 = 0.0;
  for (double x : xs) {
    const double d = x - mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  if (!(m2 > 0.0)) return 0.0;
  return m3 / std::pow(m2, 1.5);
}

/// Skewness of per-item top-k recommendation counts over `catalog_items` (never-recommended
/// items count as 0). Items recommended but absent from `catalog_items` are appended.
inline double recommendation_skewness(const RankedRuns& ranked,
                                      std::span<const std::string> catalog_items,
                                      std::size_t k = 10) {
  auto counts = item_distribution(ranked, k);
  std::vector<double> xs;
  xs.reserve(catalog_items.size());
  for (const auto& id : catalog_items) {
    auto it = counts.find(id);
    xs.push_back(it == counts.end() ? 0.0 : static_cast<double>(it->second));
    if (it != counts.end()) counts.erase(it);
  }
  for (const auto& [id, c] : counts) xs.push_back(static_cast<double>(c));
  return fisher_pearson_skewness(xs);
}

struct OverlapEntry {
  std::string method_a;
  std::string method_b;
  std::size_t intersection = 0;
  std::size_t union_size = 0;
  double jaccard = 0.0;
};

using OverlapReport = std::vector<OverlapEntry>;

inline OverlapReport overlap_report(const std::map<std::string, std::set<std::string>>& hit_sets_by_method) {
  if (hit_sets_by_method.size() < 2) throw InvalidArgument("overlap needs at least two methods");
  OverlapReport out;
  for (auto a = hit_sets_by_method.begin(); a != hit_sets_by_method.end(); ++a) {
    for (auto b = std::next(a); b != hit_sets_by_method.end(); ++b) {
      OverlapEntry e{a->first, b->first};
      for (const auto& u : a->second) e.intersection += b->second.count(u);
      e.union_size = a->second.size() + b->second.size() - e.intersection;
      e.jaccard = intersection_ratio(a->second, b->second);
      out.push_back(std::move(e));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct MetricsReport {
  std::map<std::size_t, double> hr;    // k -> HR@k
  std::map<std::size_t, double> ndcg;  // k -> NDCG@k
  double mean_novelty_10 = 0.0;
  double skewness = 0.0;
  std::size_t n_users = 0;

  double hr_at(std::size_t k) const { return hr.at(k); }
  double ndcg_at(std::size_t k) const { return ndcg.at(k); }
};

inline std::size_t count_evaluated(const RankedRuns& ranked, const Targets& targets) {
  std::size_t n = 0;
  for (const auto& [user, list] : ranked) n += targets.count(user);
  return n;
}

inline MetricsReport evaluate(const RankedRuns& ranked, const Targets& targets,
                              const Frequencies& train_freqs,
                              std::span<const std::string> catalog_items,
                              std::span<const std::size_t> ks = std::array<std::size_t, 2>{5, 10}) {
  MetricsReport r;
  r.n_users = count_evaluated(ranked, targets);
  for (std::size_t k : ks) {
    r.hr[k] = hit_rate_at_k(ranked, targets, k);
    r.ndcg[k] = ndcg_at_k(ranked, targets, k);
  }
  r.mean_novelty_10 = mean_novelty_at_k(ranked, train_freqs, 10);
  r.skewness = recommendation_skewness(ranked, catalog_items, 10);
  return r;
}

inline json to_json(const MetricsReport& r) {
  json j;
  for (const auto& [k, v] : r.hr) j["hr_" + std::to_string(k)] = v;
  for (const auto& [k, v] : r.ndcg) j["ndcg_" + std::to_string(k)] = v;
  j["mean_novelty_10"] = r.mean_novelty_10;
  j["novelty_log_base"] = "e";
  j["skewness"] = r.skewness;
  j["n_users"] = r.n_users;
  return j;
}

inline MetricsReport metrics_from_json(const json& j) {
  MetricsReport r;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    if (key.starts_with("hr_")) r.hr[std::stoul(key.substr(3))] = it->get<double>();
    if (key.starts_with("ndcg_")) r.ndcg[std::stoul(key.substr(5))] = it->get<double>();
  }
  r.mean_novelty_10 = j.at("mean_novelty_10").get<double>();
  r.skewness = j.at("skewness").get<double>();
  r.n_users = j.at("n_users").get<std::size_t>();
  return r;
}

inline json to_json(const OverlapReport& o) {
  json arr = json::array();
  for (const auto& e : o)
    arr.push_back(json{{"a", e.method_a},
                       {"b", e.method_b},
                       {"intersection", e.intersection},
                       {"union", e.union_size},
                       {"jaccard", e.jaccard}});
  return arr;
}

/// Aligned plain-text table, one row per named report.
inline std::string format_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::size_t name_w = 6;
  for (const auto& [name, r] : rows) name_w = std::max(name_w, name.size());
  std::set<std::size_t> ks;
  for (const auto& [name, r] : rows)
    for (const auto& [k, v] : r.hr) ks.insert(k);

  std::ostringstream out;
  char buf[64];
  out << "# novelty uses the natural log; skewness is Fisher-Pearson g1 of top-10 counts\n";
  out << std::string(name_w - 6, ' ') << "method";
  for (std::size_t k : ks) {
    std::snprintf(buf, sizeof buf, "  %9s  %9s", ("HR@" + std::to_string(k)).c_str(),
                  ("NDCG@" + std::to_string(k)).c_str());
    out << buf;
  }
  out << "  novelty@10   skewness  users\n";
  for (const auto& [name, r] : rows) {
    out << std::string(name_w - name.size(), ' ') << name;
    for (std::size_t k : ks) {
      auto h = r.hr.find(k);
      auto n = r.ndcg.find(k);
      std::snprintf(buf, sizeof buf, "  %9.4f  %9.4f", h == r.hr.end() ? 0.0 : h->second,
                    n == r.ndcg.end() ? 0.0 : n->second);
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "  %10.4f  %9.4f  %5zu\n", r.mean_novelty_10, r.skewness,
                  r.n_users);
    out << buf;
  }
  return out.str();
}

/// CSV histogram "item_id,count".
inline std::string histogram_csv(const std::map<std::string, std::size_t>& counts) {
  std::string s = "item_id,count\n";
  for (const auto& [id, c] : counts) {
    if (id.find_first_of(",\"\n") == std::string::npos) {
      s += id;
    } else {
      s += '"';
      for (char ch : id) s += ch == '"' ? std::string("\"\"") : std::string(1, ch);
      s += '"';
    }
    s += "," + std::to_string(c) + "\n";
  }
  return s;
}

}  // namespace querec
