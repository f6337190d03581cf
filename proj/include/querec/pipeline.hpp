// SPDX-License-Identifier: Apache-2.0
#pragma once

// End-to-end experiment driver. Every stage persists its outputs under the run directory
// together with a stamp of its input hash, so reruns skip completed stages and a partial
// run resumes where it stopped.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <cstdio>
#include <cstring>
#include <memory>
#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "querec/cf.hpp"
#include "querec/dataset.hpp"
#include "querec/embed.hpp"
#include "querec/error.hpp"
#include "querec/fusion.hpp"
#include "querec/hash.hpp"
#include "querec/io.hpp"
#include "querec/llm_client.hpp"
#include "querec/log.hpp"
#include "querec/matrix_io.hpp"
#include "querec/metrics.hpp"
#include "querec/querygen.hpp"
#include "querec/ranking.hpp"
#include "querec/vectorstore.hpp"

namespace querec {

struct AblationFlags {
  bool no_cf = false;
  bool no_recent_item = false;
  bool no_item_desc = false;
  bool no_user_queries = false;
};

enum class CfSource { Cooccurrence, Popularity, Import, None };

enum class ItemPool { Catalog, Interacted };

struct PipelineConfig {
  fs::path interactions;
  fs::path metadata;
  SplitOptions split;
  ItemPool pool = ItemPool::Catalog;

  LlmClientConfig llm;
  fs::path llm_cache;                      // default: <output_dir>/llm_cache.jsonl
  std::vector<fs::path> llm_cache_fallbacks;  // read-only
  std::size_t review_cap = kDefaultReviewCap;
  UserPromptOptions user_prompt;

  EmbeddingProviderConfig embedding;
  bool exclude_history = true;

  CfSource cf_source = CfSource::Cooccurrence;
  fs::path cf_valid_path;
  fs::path cf_test_path;

  FusionConfig fusion;
  std::vector<std::size_t> ks{5, 10};
  AblationFlags ablation;
  fs::path output_dir;
  std::uint64_t seed = 42;

  bool cf_enabled() const { return !ablation.no_cf && cf_source != CfSource::None; }

  std::size_t list_depth() const {
    std::size_t d = std::max<std::size_t>(fusion.k_eval, 10);
    for (auto k : ks) d = std::max(d, k);
    return d;
  }

  fs::path cache_path() const { return llm_cache.empty() ? output_dir / "llm_cache.jsonl" : llm_cache; }

  void validate() const {
    if (interactions.empty() || metadata.empty())
      throw InvalidArgument("dataset.interactions and dataset.metadata are required");
    if (output_dir.empty()) throw InvalidArgument("output_dir is required");
    if (ks.empty()) throw InvalidArgument("eval.ks must not be empty");
    for (auto k : ks)
      if (k == 0) throw InvalidArgument("eval.ks entries must be positive");
    if (llm.max_concurrency < 1) throw InvalidArgument("llm.max_concurrency must be at least 1");
    if (ablation.no_recent_item && ablation.no_user_queries)
      throw InvalidArgument("no_recent_item and no_user_queries together leave no user document");
    if (cf_source == CfSource::Import && cf_enabled() && (cf_valid_path.empty() || cf_test_path.empty()) &&
        fusion.mode == FusionMode::AdaptiveCC)
      throw InvalidArgument("adaptive fusion with imported CF scores needs cf.valid and cf.test");
    if (cf_source == CfSource::Import && cf_enabled() && cf_test_path.empty())
      throw InvalidArgument("cf.test is required when cf.source is import");
  }

  /// Stable JSON rendering, used both for display and for stage cache keys.
  json to_json() const {
    auto opt = [](const auto& o) { return o ? json(*o) : json(nullptr); };
    auto cf_name = [&] {
      switch (cf_source) {
        case CfSource::Cooccurrence: return "cooccurrence";
        case CfSource::Popularity: return "popularity";
        case CfSource::Import: return "import";
        case CfSource::None: return "none";
      }
      return "none";
    };
    auto emb_kind = [&] {
      switch (embedding.kind) {
        case EmbeddingKind::Mock: return "mock";
        case EmbeddingKind::File: return "file";
        case EmbeddingKind::Http: return "http";
      }
      return "mock";
    };
    return json{
        {"dataset",
         {{"interactions", interactions.string()},
          {"metadata", metadata.string()},
          {"min_len", split.min_len},
          {"dedup", split.dedup},
          {"pool", pool == ItemPool::Catalog ? "catalog" : "interacted"}}},
        {"llm",
         {{"mock", llm.mock_mode},
          {"endpoint_url", llm.endpoint_url},
          {"model", llm.model_name},
          {"api_key_env", llm.api_key_env_var},
          {"max_concurrency", llm.max_concurrency},
          {"timeout_s", llm.timeout_s},
          {"max_retries", llm.max_retries},
          {"temperature", opt(llm.temperature)},
          {"max_tokens", opt(llm.max_tokens)}}},
        {"querygen",
         {{"review_cap", review_cap},
          {"history_max", user_prompt.history_max},
          {"review_char_budget", user_prompt.review_char_budget}}},
        {"embedding",
         {{"kind", emb_kind()},
          {"dimension", embedding.dimension},
          {"endpoint_url", embedding.endpoint_url},
          {"model", embedding.model_name},
          {"path", embedding.path.string()},
          {"batch_size", embedding.batch_size}}},
        {"retrieval", {{"exclude_history", exclude_history}}},
        {"cf", {{"source", cf_name()}, {"valid", cf_valid_path.string()}, {"test", cf_test_path.string()}}},
        {"fusion", {{"mode", fusion.to_string()}, {"k_eval", fusion.k_eval}}},
        {"eval", {{"ks", ks}}},
        {"ablation",
         {{"no_cf", ablation.no_cf},
          {"no_recent_item", ablation.no_recent_item},
          {"no_item_desc", ablation.no_item_desc},
          {"no_user_queries", ablation.no_user_queries}}},
        {"output_dir", output_dir.string()},
        {"seed", seed}};
  }
};

namespace detail {

/// Replaces ${NAME} in every string value with the environment variable NAME.
inline void interpolate_env(json& j) {
  if (j.is_string()) {
    static const std::regex var(R"(\$\{([A-Za-z_][A-Za-z0-9_]*)\})");
    std::string s = j.get<std::string>();
    std::string out;
    auto begin = std::sregex_iterator(s.begin(), s.end(), var);
    std::size_t last = 0;
    for (auto it = begin; it != std::sregex_iterator(); ++it) {
      const auto& m = *it;
      const char* v = std::getenv(m[1].str().c_str());
      if (!v) throw InvalidArgument("config references unset environment variable " + m[1].str());
      out += s.substr(last, static_cast<std::size_t>(m.position(0)) - last);
      out += v;
      last = static_cast<std::size_t>(m.position(0) + m.length(0));
    }
    out += s.substr(last);
    j = out;
  } else if (j.is_object() || j.is_array()) {
    for (auto& e : j) interpolate_env(e);
  }
}

template <class T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.is_object()) return fallback;
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config field '") + key + "': " + e.what());
  }
}

inline fs::path resolve(const fs::path& base, const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace detail

/// Builds a config from parsed JSON; relative paths resolve against `base_dir`.
inline PipelineConfig config_from_json(json j, const fs::path& base_dir) {
  using detail::get_or;
  detail::interpolate_env(j);
  const json empty = json::object();
  auto section = [&](const char* name) -> const json& {
    auto it = j.find(name);
    if (it == j.end()) return empty;
    if (!it->is_object()) throw InvalidArgument(std::string("config section '") + name + "' must be an object");
    return *it;
  };

  PipelineConfig c;
  c.seed = get_or<std::uint64_t>(j, "seed", 42);

  const json& ds = section("dataset");
  c.interactions = detail::resolve(base_dir, get_or<std::string>(ds, "interactions", ""));
  c.metadata = detail::resolve(base_dir, get_or<std::string>(ds, "metadata", ""));
  c.split.min_len = get_or<std::size_t>(ds, "min_len", 3);
  c.split.dedup = get_or<bool>(ds, "dedup", false);
  const auto pool = get_or<std::string>(ds, "pool", "catalog");
  if (pool == "catalog") c.pool = ItemPool::Catalog;
  else if (pool == "interacted") c.pool = ItemPool::Interacted;
  else throw InvalidArgument("dataset.pool must be 'catalog' or 'interacted'");

  const json& llm = section("llm");
  c.llm.mock_mode = get_or<bool>(llm, "mock", false);
  c.llm.endpoint_url = get_or<std::string>(llm, "endpoint_url", c.llm.endpoint_url);
  c.llm.model_name = get_or<std::string>(llm, "model", "");
  c.llm.api_key_env_var = get_or<std::string>(llm, "api_key_env", c.llm.api_key_env_var);
  c.llm.max_concurrency = get_or<int>(llm, "max_concurrency", c.llm.max_concurrency);
  c.llm.timeout_s = get_or<double>(llm, "timeout_s", c.llm.timeout_s);
  c.llm.max_retries = get_or<int>(llm, "max_retries", c.llm.max_retries);
  if (llm.contains("temperature") && !llm["temperature"].is_null())
    c.llm.temperature = get_or<double>(llm, "temperature", 0.0);
  if (llm.contains("max_tokens") && !llm["max_tokens"].is_null())
    c.llm.max_tokens = get_or<int>(llm, "max_tokens", 0);
  c.llm_cache = detail::resolve(base_dir, get_or<std::string>(llm, "cache", ""));
  c.llm.seed = c.seed;

  const json& qg = section("querygen");
  c.review_cap = get_or<std::size_t>(qg, "review_cap", kDefaultReviewCap);
  c.user_prompt.history_max = get_or<std::size_t>(qg, "history_max", kDefaultHistoryMax);
  c.user_prompt.review_char_budget = get_or<std::size_t>(qg, "review_char_budget", 0);

  const json& emb = section("embedding");
  const auto kind = get_or<std::string>(emb, "kind", "mock");
  if (kind == "mock") c.embedding.kind = EmbeddingKind::Mock;
  else if (kind == "file") c.embedding.kind = EmbeddingKind::File;
  else if (kind == "http") c.embedding.kind = EmbeddingKind::Http;
  else throw InvalidArgument("embedding.kind must be mock, file or http");
  c.embedding.dimension = get_or<std::size_t>(emb, "dimension", 64);
  c.embedding.endpoint_url = get_or<std::string>(emb, "endpoint_url", "");
  c.embedding.model_name = get_or<std::string>(emb, "model", "");
  c.embedding.api_key_env_var = get_or<std::string>(emb, "api_key_env", c.embedding.api_key_env_var);
  c.embedding.path = detail::resolve(base_dir, get_or<std::string>(emb, "path", ""));
  c.embedding.batch_size = get_or<std::size_t>(emb, "batch_size", 64);
  c.embedding.seed = c.seed;

  c.exclude_history = get_or<bool>(section("retrieval"), "exclude_history", true);

  const json& cf = section("cf");
  const auto src = get_or<std::string>(cf, "source", "cooccurrence");
  if (src == "cooccurrence") c.cf_source = CfSource::Cooccurrence;
  else if (src == "popularity") c.cf_source = CfSource::Popularity;
  else if (src == "import") c.cf_source = CfSource::Import;
  else if (src == "none") c.cf_source = CfSource::None;
  else throw InvalidArgument("cf.source must be cooccurrence, popularity, import or none");
  c.cf_valid_path = detail::resolve(base_dir, get_or<std::string>(cf, "valid", ""));
  c.cf_test_path = detail::resolve(base_dir, get_or<std::string>(cf, "test", ""));

  const json& fu = section("fusion");
  c.fusion = FusionConfig::parse(get_or<std::string>(fu, "mode", "adaptive"));
  c.fusion.k_eval = get_or<std::size_t>(fu, "k_eval", 10);

  c.ks = get_or<std::vector<std::size_t>>(section("eval"), "ks", {5, 10});

  const json& ab = section("ablation");
  c.ablation.no_cf = get_or<bool>(ab, "no_cf", false);
  c.ablation.no_recent_item = get_or<bool>(ab, "no_recent_item", false);
  c.ablation.no_item_desc = get_or<bool>(ab, "no_item_desc", false);
  c.ablation.no_user_queries = get_or<bool>(ab, "no_user_queries", false);

  c.output_dir = detail::resolve(base_dir, get_or<std::string>(j, "output_dir", ""));
  c.validate();
  return c;
}

inline PipelineConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path), nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  return config_from_json(std::move(j), fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------------------
// Output-directory lock

/// Exclusive lock file; one pipeline per output directory.
class OutputLock {
public:
  explicit OutputLock(const fs::path& dir) : path_(dir / ".querec.lock") {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST)
        throw IoError("output directory " + dir.string() +
                      " is locked by another run (remove " + path_.string() + " if stale)");
      throw IoError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
  }
  ~OutputLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

private:
  fs::path path_;
  int fd_ = -1;
};

// ---------------------------------------------------------------------------
// Run result

struct RunResult {
  MetricsReport metrics;                       // final ranking (fused, or LLM when CF is off)
  std::optional<FusionDiagnostics> diagnostics;
  std::map<std::string, MetricsReport> methods;  // "llm", "cf", "fused"
  OverlapReport overlap;
  std::vector<std::string> executed_stages;
  std::vector<std::string> skipped_stages;
  double norm_min = 0.0;
  double norm_max = 1.0;
};

/// Post-run sanity checks; throws StageError("checks") on the first violation.
inline void check_run_invariants(const RunResult& r) {
  auto fail = [](const std::string& what) { throw StageError("checks", what); };
  auto check_report = [&](const std::string& name, const MetricsReport& m) {
    std::optional<double> prev;
    for (const auto& [k, hr] : m.hr) {
      if (!(hr >= 0.0 && hr <= 1.0)) fail(name + ": HR@" + std::to_string(k) + " outside [0, 1]");
      if (prev && hr < *prev) fail(name + ": HR decreases at k=" + std::to_string(k));
      prev = hr;
      auto nd = m.ndcg.find(k);
      if (nd != m.ndcg.end() && nd->second > hr)
        fail(name + ": NDCG@" + std::to_string(k) + " exceeds HR@" + std::to_string(k));
    }
  };
  check_report("final", r.metrics);
  for (const auto& [name, m] : r.methods) check_report(name, m);
  if (r.diagnostics) {
    const auto& d = *r.diagnostics;
    if (!(d.lambda >= 0.0 && d.lambda <= 1.0)) fail("lambda outside [0, 1]");
    if (!(d.omega >= 0.0 && d.omega <= 1.0)) fail("omega outside [0, 1]");
    if (!(d.lambda_init >= 0.0 && d.lambda_init <= 1.0)) fail("lambda_init outside [0, 1]");
  }
  if (!(r.norm_min >= 0.0 && r.norm_max <= 1.0)) fail("normalized scores outside [0, 1]");
}

// ---------------------------------------------------------------------------
// Stage building blocks

using ExclusionMap = std::map<std::string, std::unordered_set<std::string>>;

/// Items each evaluated user has already seen in `view`.
inline ExclusionMap history_exclusions(const SplitDataset& split, SplitView view) {
  ExclusionMap out;
  for (const auto& [user, s] : split.users) {
    if (!s.has_targets()) continue;
    auto& set = out[user];
    for (const auto& x : s.history(view)) set.insert(x.item_id);
  }
  return out;
}

inline std::vector<std::string> interacted_items(const SplitDataset& split) {
  std::set<std::string> seen;
  for (const auto& [user, s] : split.users) {
    for (const auto& x : s.train) seen.insert(x.item_id);
    if (s.valid) seen.insert(s.valid->item_id);
    if (s.test) seen.insert(s.test->item_id);
  }
  return {seen.begin(), seen.end()};
}

inline std::vector<std::string> catalog_items(const Catalog& catalog) {
  std::vector<std::string> ids;
  ids.reserve(catalog.size());
  for (const auto& [id, meta] : catalog) ids.push_back(id);
  return ids;
}

inline std::map<std::string, QuerySet> by_subject(std::vector<QuerySet> sets) {
  std::map<std::string, QuerySet> m;
  for (auto& qs : sets) {
    std::string id = qs.subject_id;
    if (!m.emplace(id, std::move(qs)).second) throw Error("duplicate query set for '" + id + "'");
  }
  return m;
}

/// One prompt per item. Reviews come from the training slice only, oldest first.
inline std::vector<GenerationJob> item_generation_jobs(const SplitDataset& split, const Catalog& catalog,
                                                       std::span<const std::string> item_ids,
                                                       std::size_t review_cap) {
  std::map<std::string, std::vector<const Interaction*>> by_item;
  for (const auto& [user, s] : split.users)
    for (const auto& x : s.train)
      if (!x.review.empty()) by_item[x.item_id].push_back(&x);
  std::vector<GenerationJob> jobs;
  jobs.reserve(item_ids.size());
  for (const auto& id : item_ids) {
    auto meta = catalog.find(id);
    if (meta == catalog.end()) throw Error("item '" + id + "' has no metadata");
    std::vector<std::string> reviews;
    if (auto it = by_item.find(id); it != by_item.end()) {
      auto& rs = it->second;
      std::stable_sort(rs.begin(), rs.end(),
                       [](const Interaction* a, const Interaction* b) { return a->timestamp < b->timestamp; });
      for (const auto* x : rs) reviews.push_back(x->review);
    }
    jobs.push_back({id, build_item_prompt(meta->second, reviews, review_cap)});
  }
  return jobs;
}

/// One prompt per evaluated user, with history taken from `view`.
inline std::vector<GenerationJob> user_generation_jobs(const SplitDataset& split, const Catalog& catalog,
                                                       const std::map<std::string, QuerySet>& item_queries,
                                                       SplitView view, const UserPromptOptions& opts) {
  std::vector<GenerationJob> jobs;
  for (const auto& [user, s] : split.users) {
    if (!s.has_targets()) continue;
    std::vector<HistoryEntry> history;
    for (const auto& x : s.history(view)) history.push_back({catalog.at(x.item_id), x.review});
    std::vector<std::string> last_queries;
    if (auto it = item_queries.find(history.back().meta.item_id); it != item_queries.end())
      last_queries = it->second.queries;
    jobs.push_back({user, build_user_prompt(history, last_queries, opts)});
  }
  return jobs;
}

/// Metadata-only documents when `queries` is null.
inline std::vector<EnrichedDocument> item_documents(const Catalog& catalog, std::span<const std::string> item_ids,
                                                    const std::map<std::string, QuerySet>* queries) {
  std::vector<EnrichedDocument> docs;
  docs.reserve(item_ids.size());
  for (const auto& id : item_ids) {
    const auto& meta = catalog.at(id);
    if (!queries) {
      docs.push_back(metadata_document(id, meta));
      continue;
    }
    auto it = queries->find(id);
    if (it == queries->end()) throw Error("no generated queries for item '" + id + "'");
    docs.push_back(compose_item_document(meta, it->second));
  }
  return docs;
}

enum class UserDocKind { Full, QueriesOnly, MetadataOnly };

inline std::vector<EnrichedDocument> user_documents(const SplitDataset& split, const Catalog& catalog,
                                                    const std::map<std::string, QuerySet>& queries,
                                                    SplitView view, UserDocKind kind) {
  std::vector<EnrichedDocument> docs;
  for (const auto& [user, s] : split.users) {
    if (!s.has_targets()) continue;
    const ItemMeta& last = catalog.at(s.history(view).back().item_id);
    if (kind == UserDocKind::MetadataOnly) {
      docs.push_back(metadata_document(user, last));
      continue;
    }
    auto it = queries.find(user);
    if (it == queries.end()) throw Error("no generated queries for user '" + user + "'");
    docs.push_back(kind == UserDocKind::QueriesOnly ? queries_only_document(it->second)
                                                    : compose_user_document(last, it->second));
  }
  return docs;
}

// ---------------------------------------------------------------------------
// Pipeline

class Pipeline {
public:
  explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)), out_(cfg_.output_dir) {
    cfg_.validate();
  }

  /// Runs all stages without taking the output lock (callers own it).
  RunResult run() {
    fs::create_directories(out_);
    write_file(out_ / "config.json", cfg_.to_json().dump(2) + "\n");
    stage_ingest();
    stage_item_queries();
    stage_item_docs();
    stage_item_index();
    stage_user_queries();
    stage_user_docs();
    stage_user_embeddings();
    stage_llm_scores();
    stage_cf_scores();
    stage_rank();
    stage_fuse();
    stage_eval();
    check_run_invariants(result_);
    return result_;
  }

  const fs::path& output_dir() const { return out_; }

private:
  // --- stage bookkeeping -------------------------------------------------

  fs::path p(const std::string& rel) const { return out_ / rel; }

  static bool matrix_exists(const fs::path& stem) {
    auto mp = matrix_paths(stem);
    return fs::exists(mp.manifest) && fs::exists(mp.data) && fs::exists(mp.ids);
  }

  static void hash_input(std::string& material, const fs::path& path) {
    material += path.filename().string();
    material += '=';
    if (fs::exists(path)) {
      material += hex64(hash_file(path));
    } else {
      material += "absent";
    }
    material += ';';
  }

  /// Returns true when the stage must run. Inputs are hashed by content; `params` is the
  /// config subsection the stage depends on.
  bool needs_run(const std::string& stage, const std::vector<fs::path>& inputs,
                 const json& params, const std::vector<fs::path>& outputs) {
    std::string material = stage + "|" + params.dump() + "|";
    for (const auto& in : inputs) {
      if (in.extension() == ".json" && matrix_exists(in)) {
        auto mp = matrix_paths(in);
        hash_input(material, mp.manifest);
        hash_input(material, mp.data);
        hash_input(material, mp.ids);
        if (fs::exists(mp.cols)) hash_input(material, mp.cols);
      } else {
        hash_input(material, in);
      }
    }
    pending_key_ = hex64(fnv1a64(material));
    const fs::path stamp = p("stamps/" + stage + ".key");
    bool fresh = fs::exists(stamp) && read_file(stamp) == pending_key_;
    for (const auto& o : outputs) fresh = fresh && fs::exists(o);
    if (fresh) {
      result_.skipped_stages.push_back(stage);
      log::info("stage " + stage + ": up to date");
      return false;
    }
    log::info("stage " + stage + ": running");
    return true;
  }

  void mark_done(const std::string& stage) {
    write_file(p("stamps/" + stage + ".key"), pending_key_);
    result_.executed_stages.push_back(stage);
  }

  template <class F>
  void guarded(const std::string& stage, F&& body) {
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(stage, e.what());
    }
  }

  // --- shared state ------------------------------------------------------

  const Catalog& catalog() {
    if (!catalog_) catalog_ = load_catalog(cfg_.metadata);
    return *catalog_;
  }

  const SplitDataset& split() {
    if (!split_) split_ = read_split(p("split"));
    return *split_;
  }

  std::vector<std::string> pool_ids() {
    return cfg_.pool == ItemPool::Catalog ? catalog_items(catalog()) : interacted_items(split());
  }

  std::unique_ptr<ChatClient>& client() {
    if (!client_) client_ = make_chat_client(cfg_.llm);
    return client_;
  }

  ResponseCache& cache() {
    if (!cache_) cache_.emplace(cfg_.cache_path(), cfg_.llm_cache_fallbacks);
    return *cache_;
  }

  ExclusionMap exclusions(SplitView view) {
    return cfg_.exclude_history ? history_exclusions(split(), view) : ExclusionMap{};
  }

  json stage_params(std::initializer_list<const char*> sections) const {
    const json all = cfg_.to_json();
    json out = json::object();
    for (const char* s : sections) out[s] = all.at(s);
    return out;
  }

  json llm_params() const {
    json j = stage_params({"llm", "querygen", "ablation", "seed"});
    // Concurrency and timeouts do not change the generated text.
    j["llm"].erase("max_concurrency");
    j["llm"].erase("timeout_s");
    j["llm"].erase("max_retries");
    return j;
  }

  // --- stages ------------------------------------------------------------

  void stage_ingest() {
    const std::vector<fs::path> outs{p("split/train.jsonl"), p("split/valid.jsonl"),
                                     p("split/test.jsonl"), p("split/stats.json")};
    if (!needs_run("ingest", {cfg_.interactions, cfg_.metadata}, stage_params({"dataset"}), outs)) return;
    guarded("ingest", [&] {
      auto interactions = load_interactions(cfg_.interactions);
      const auto& cat = catalog();
      const std::size_t before = interactions.size();
      std::erase_if(interactions, [&](const Interaction& x) { return !cat.count(x.item_id); });
      if (interactions.size() != before)
        log::warn("dropped " + std::to_string(before - interactions.size()) +
                  " interactions whose item has no metadata");
      auto sp = leave_one_out_split(interactions, cfg_.split);
      write_split(p("split"), sp, dataset_stats(interactions));
      split_ = std::move(sp);
    });
    mark_done("ingest");
  }

  void stage_item_queries() {
    if (cfg_.ablation.no_item_desc) return;
    const fs::path out = p("queries/items.jsonl");
    if (!needs_run("item-queries", {p("split/train.jsonl"), cfg_.metadata}, llm_params(), {out})) return;
    guarded("item-queries", [&] {
      const auto jobs = item_generation_jobs(split(), catalog(), pool_ids(), cfg_.review_cap);
      write_query_sets(out, generate_query_sets(jobs, *client(), cfg_.llm.max_concurrency, &cache()));
    });
    mark_done("item-queries");
  }

  std::map<std::string, QuerySet> item_query_map() {
    if (cfg_.ablation.no_item_desc) return {};
    return by_subject(read_query_sets(p("queries/items.jsonl")));
  }

  void stage_item_docs() {
    const fs::path out = p("docs/items.jsonl");
    std::vector<fs::path> ins{cfg_.metadata, p("split/train.jsonl")};
    if (!cfg_.ablation.no_item_desc) ins.push_back(p("queries/items.jsonl"));
    if (!needs_run("item-docs", ins, stage_params({"ablation", "dataset"}), {out})) return;
    guarded("item-docs", [&] {
      const auto queries = item_query_map();
      write_documents(out, item_documents(catalog(), pool_ids(), cfg_.ablation.no_item_desc ? nullptr : &queries));
    });
    mark_done("item-docs");
  }

  void stage_item_index() {
    const fs::path stem = p("index/items.json");
    if (!needs_run("item-index", {p("docs/items.jsonl")}, stage_params({"embedding", "seed"}),
                   {stem, matrix_paths(stem).data, matrix_paths(stem).ids}))
      return;
    guarded("item-index", [&] {
      auto docs = read_documents(p("docs/items.jsonl"));
      auto embedder = make_embedder(cfg_.embedding);
      ItemIndex::build(embed_documents(docs, *embedder)).save(stem);
    });
    mark_done("item-index");
  }

  void stage_user_queries() {
    if (cfg_.ablation.no_user_queries) return;
    const std::vector<fs::path> outs{p("queries/users_valid.jsonl"), p("queries/users_test.jsonl")};
    std::vector<fs::path> ins{p("split/train.jsonl"), p("split/valid.jsonl"), cfg_.metadata};
    if (!cfg_.ablation.no_item_desc) ins.push_back(p("queries/items.jsonl"));
    if (!needs_run("user-queries", ins, llm_params(), outs)) return;
    guarded("user-queries", [&] {
      const auto item_queries = item_query_map();
      UserPromptOptions opts = cfg_.user_prompt;
      opts.emphasize_last = !cfg_.ablation.no_recent_item;
      auto jobs = user_generation_jobs(split(), catalog(), item_queries, SplitView::Validation, opts);
      const auto half = static_cast<std::ptrdiff_t>(jobs.size());
      auto test_jobs = user_generation_jobs(split(), catalog(), item_queries, SplitView::Test, opts);
      jobs.insert(jobs.end(), test_jobs.begin(), test_jobs.end());
      auto sets = generate_query_sets(jobs, *client(), cfg_.llm.max_concurrency, &cache());
      write_query_sets(outs[0], std::vector<QuerySet>(sets.begin(), sets.begin() + half));
      write_query_sets(outs[1], std::vector<QuerySet>(sets.begin() + half, sets.end()));
    });
    mark_done("user-queries");
  }

  void stage_user_docs() {
    const std::vector<fs::path> outs{p("docs/users_valid.jsonl"), p("docs/users_test.jsonl")};
    std::vector<fs::path> ins{p("split/train.jsonl"), p("split/valid.jsonl"), cfg_.metadata};
    if (!cfg_.ablation.no_user_queries) {
      ins.push_back(p("queries/users_valid.jsonl"));
      ins.push_back(p("queries/users_test.jsonl"));
    }
    if (!needs_run("user-docs", ins, stage_params({"ablation"}), outs)) return;
    guarded("user-docs", [&] {
      const UserDocKind kind = cfg_.ablation.no_user_queries  ? UserDocKind::MetadataOnly
                               : cfg_.ablation.no_recent_item ? UserDocKind::QueriesOnly
                                                              : UserDocKind::Full;
      std::size_t slot = 0;
      for (SplitView view : {SplitView::Validation, SplitView::Test}) {
        std::map<std::string, QuerySet> queries;
        if (kind != UserDocKind::MetadataOnly)
          queries = by_subject(read_query_sets(p(std::string("queries/users_") + to_string(view) + ".jsonl")));
        write_documents(outs[slot++], user_documents(split(), catalog(), queries, view, kind));
      }
    });
    mark_done("user-docs");
  }

  void stage_user_embeddings() {
    const fs::path valid = p("embeddings/users_valid.json"), test = p("embeddings/users_test.json");
    if (!needs_run("user-embeddings", {p("docs/users_valid.jsonl"), p("docs/users_test.jsonl")},
                   stage_params({"embedding", "seed"}),
                   {valid, matrix_paths(valid).data, test, matrix_paths(test).data}))
      return;
    guarded("user-embeddings", [&] {
      auto embedder = make_embedder(cfg_.embedding);
      save_matrix(valid, embed_documents(read_documents(p("docs/users_valid.jsonl")), *embedder));
      save_matrix(test, embed_documents(read_documents(p("docs/users_test.jsonl")), *embedder));
    });
    mark_done("user-embeddings");
  }

  void stage_llm_scores() {
    const fs::path valid = p("scores/llm_valid.json"), test = p("scores/llm_test.json");
    if (!needs_run("llm-scores",
                   {p("index/items.json"), p("embeddings/users_valid.json"), p("embeddings/users_test.json")},
                   json::object(), {valid, matrix_paths(valid).data, test, matrix_paths(test).data}))
      return;
    guarded("llm-scores", [&] {
      const auto index = ItemIndex::load(p("index/items.json"));
      save_matrix(valid, score_users(index, load_matrix(p("embeddings/users_valid.json"))));
      save_matrix(test, score_users(index, load_matrix(p("embeddings/users_test.json"))));
    });
    mark_done("llm-scores");
  }

  void stage_cf_scores() {
    if (!cfg_.cf_enabled()) return;
    const fs::path valid = p("scores/cf_valid.json"), test = p("scores/cf_test.json");
    std::vector<fs::path> ins{p("split/train.jsonl"), p("split/valid.jsonl"), p("index/items.json")};
    if (cfg_.cf_source == CfSource::Import) {
      if (!cfg_.cf_valid_path.empty()) ins.push_back(cfg_.cf_valid_path);
      ins.push_back(cfg_.cf_test_path);
    }
    std::vector<fs::path> outs{test, matrix_paths(test).data};
    const bool want_valid = cfg_.cf_source != CfSource::Import || !cfg_.cf_valid_path.empty();
    if (want_valid) outs.insert(outs.end(), {valid, matrix_paths(valid).data});
    if (!needs_run("cf-scores", ins, stage_params({"cf"}), outs)) return;
    guarded("cf-scores", [&] {
      const auto items = load_matrix(p("index/items.json")).row_ids;
      const auto users = split().evaluated_users();
      auto build = [&](SplitView view) {
        switch (cfg_.cf_source) {
          case CfSource::Popularity: return popularity_baseline(split(), users, items);
          case CfSource::Cooccurrence: return cooccurrence_baseline(split(), users, items, view);
          case CfSource::Import: {
            const std::unordered_set<std::string> known(items.begin(), items.end());
            const auto& path = view == SplitView::Validation ? cfg_.cf_valid_path : cfg_.cf_test_path;
            return dense_cf_scores(import_cf_scores(path, known), users, items);
          }
          case CfSource::None: break;
        }
        throw Error("CF disabled");
      };
      if (want_valid) save_matrix(valid, build(SplitView::Validation));
      save_matrix(test, build(SplitView::Test));
    });
    mark_done("cf-scores");
  }

  void stage_rank() {
    std::vector<fs::path> ins{p("scores/llm_test.json"), p("split/train.jsonl"), p("split/valid.jsonl")};
    std::vector<fs::path> outs{p("runs/llm_test.jsonl")};
    if (cfg_.cf_enabled()) {
      ins.push_back(p("scores/cf_test.json"));
      outs.push_back(p("runs/cf_test.jsonl"));
    }
    json params = stage_params({"retrieval", "fusion", "eval"});
    params["cf_enabled"] = cfg_.cf_enabled();
    if (!needs_run("rank", ins, params, outs)) return;
    guarded("rank", [&] {
      const auto ex = exclusions(SplitView::Test);
      write_runs(outs[0], rank_matrix(load_matrix(p("scores/llm_test.json")), cfg_.list_depth(), ex));
      if (cfg_.cf_enabled())
        write_runs(outs[1], rank_matrix(load_matrix(p("scores/cf_test.json")), cfg_.list_depth(), ex));
    });
    mark_done("rank");
  }

  void stage_fuse() {
    const fs::path run = p("runs/final_test.jsonl"), diag = p("fusion/diagnostics.json");
    std::vector<fs::path> ins{p("scores/llm_test.json"), p("split/train.jsonl"), p("split/valid.jsonl")};
    if (cfg_.cf_enabled()) {
      ins.push_back(p("scores/cf_test.json"));
      ins.push_back(p("scores/llm_valid.json"));
      ins.push_back(p("scores/cf_valid.json"));
    }
    json params = stage_params({"retrieval", "fusion"});
    params["cf_enabled"] = cfg_.cf_enabled();
    if (!needs_run("fuse", ins, params, {run, diag})) {
      const json d = json::parse(read_file(diag));
      if (!d.at("diagnostics").is_null()) result_.diagnostics = diagnostics_from_json(d.at("diagnostics"));
      result_.norm_min = d.value("normalized_min", 0.0);
      result_.norm_max = d.value("normalized_max", 1.0);
      return;
    }
    guarded("fuse", [&] {
      json d{{"mode", cfg_.cf_enabled() ? cfg_.fusion.to_string() : "none"}, {"diagnostics", nullptr}};
      if (!cfg_.cf_enabled()) {
        write_runs(run, rank_matrix(load_matrix(p("scores/llm_test.json")), cfg_.fusion.k_eval,
                                    exclusions(SplitView::Test)));
        result_.norm_min = 0.0;
        result_.norm_max = 1.0;
      } else {
        const DenseMatrix llm_test = load_matrix(p("scores/llm_test.json"));
        const DenseMatrix cf_test = load_matrix(p("scores/cf_test.json"));
        std::optional<DenseMatrix> llm_valid, cf_valid;
        if (cfg_.fusion.mode == FusionMode::AdaptiveCC) {
          llm_valid = load_matrix(p("scores/llm_valid.json"));
          if (!matrix_exists(p("scores/cf_valid.json")))
            throw InvalidArgument("adaptive fusion needs validation CF scores; use fixed:<lambda> or rrf");
          cf_valid = load_matrix(p("scores/cf_valid.json"));
        }
        FusionInputs in;
        in.llm_test = &llm_test;
        in.cf_test = &cf_test;
        in.llm_valid = llm_valid ? &*llm_valid : nullptr;
        in.cf_valid = cf_valid ? &*cf_valid : nullptr;
        in.valid_targets = split().targets(SplitView::Validation);
        in.exclude_valid = exclusions(SplitView::Validation);
        in.exclude_test = exclusions(SplitView::Test);
        auto fused = fuse_all(in, cfg_.fusion);
        if (fused.diagnostics && cfg_.fusion.mode != FusionMode::Rrf) {
          result_.diagnostics = fused.diagnostics;
          d["diagnostics"] = to_json(*fused.diagnostics);
        }
        result_.norm_min = fused.norm_min;
        result_.norm_max = fused.norm_max;
        write_runs(run, fused.runs);
      }
      d["normalized_min"] = result_.norm_min;
      d["normalized_max"] = result_.norm_max;
      write_file(diag, d.dump(2) + "\n");
    });
    mark_done("fuse");
  }

  void stage_eval() {
    const fs::path report = p("report.json");
    std::vector<fs::path> ins{p("runs/final_test.jsonl"), p("runs/llm_test.jsonl"), p("split/train.jsonl"),
                              p("split/test.jsonl"), p("index/items.json"), p("fusion/diagnostics.json")};
    if (cfg_.cf_enabled()) ins.push_back(p("runs/cf_test.jsonl"));
    if (!needs_run("eval", ins, stage_params({"eval", "ablation"}),
                   {report, p("report.txt"), p("histogram.csv")})) {
      load_report(report);
      return;
    }
    guarded("eval", [&] {
      const auto targets = split().targets(SplitView::Test);
      const auto freqs = train_frequencies(split());
      const auto items = load_matrix(p("index/items.json")).row_ids;
      std::map<std::string, RankedRuns> runs;
      runs["llm"] = read_runs(p("runs/llm_test.jsonl"));
      if (cfg_.cf_enabled()) runs["cf"] = read_runs(p("runs/cf_test.jsonl"));
      const RankedRuns final_run = read_runs(p("runs/final_test.jsonl"));
      if (cfg_.cf_enabled()) runs["fused"] = final_run;

      result_.metrics = evaluate(final_run, targets, freqs, items, cfg_.ks);
      std::map<std::string, std::set<std::string>> hits;
      std::vector<std::pair<std::string, MetricsReport>> rows;
      for (const auto& [name, r] : runs) {
        result_.methods[name] = evaluate(r, targets, freqs, items, cfg_.ks);
        hits[name] = hit_sets(r, targets, kHitSetDepth);
        rows.emplace_back(name, result_.methods[name]);
      }
      if (hits.size() >= 2) result_.overlap = overlap_report(hits);

      json methods = json::object();
      for (const auto& [name, m] : result_.methods) methods[name] = to_json(m);
      json j{{"metrics", to_json(result_.metrics)},
             {"diagnostics", result_.diagnostics ? to_json(*result_.diagnostics) : json(nullptr)},
             {"fusion_mode", cfg_.cf_enabled() ? cfg_.fusion.to_string() : "none"},
             {"methods", methods},
             {"overlap", to_json(result_.overlap)}};
      if (cfg_.ablation.no_recent_item)
        j["notes"] = "no_recent_item: last item neither emphasized nor prefixed to the user document";
      write_file(report, j.dump(2) + "\n");
      std::string table = format_table(rows);
      if (result_.diagnostics) {
        const auto& d = *result_.diagnostics;
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "lambda_init=%.6f omega=%.6f lambda=%.6f (valid HR@10: llm=%.4f cf=%.4f)\n",
                      d.lambda_init, d.omega, d.lambda, d.hit10_llm, d.hit10_cf);
        table += buf;
      }
      write_file(p("report.txt"), table);
      write_file(p("histogram.csv"), histogram_csv(item_distribution(final_run, 10)));
    });
    mark_done("eval");
  }

  void load_report(const fs::path& report) {
    const json j = json::parse(read_file(report));
    result_.metrics = metrics_from_json(j.at("metrics"));
    for (auto it = j.at("methods").begin(); it != j.at("methods").end(); ++it)
      result_.methods[it.key()] = metrics_from_json(*it);
    if (!j.at("diagnostics").is_null()) result_.diagnostics = diagnostics_from_json(j.at("diagnostics"));
    for (const auto& e : j.at("overlap"))
      result_.overlap.push_back({e.at("a").get<std::string>(), e.at("b").get<std::string>(),
                                 e.at("intersection").get<std::size_t>(),
                                 e.at("union").get<std::size_t>(), e.at("jaccard").get<double>()});
  }

  PipelineConfig cfg_;
  fs::path out_;
  std::optional<Catalog> catalog_;
  std::optional<SplitDataset> split_;
  std::unique_ptr<ChatClient> client_;
  std::optional<ResponseCache> cache_;
  std::string pending_key_;
  RunResult result_;
};

/// Runs the full pipeline under an exclusive lock on the output directory.
inline RunResult run_pipeline(const PipelineConfig& config) {
  OutputLock lock(config.output_dir);
  return Pipeline(config).run();
}

// ---------------------------------------------------------------------------
// Ablations

inline const std::vector<std::string>& ablation_variants() {
  static const std::vector<std::string> names{"no_cf", "no_recent_item", "no_item_desc",
                                              "no_user_queries"};
  return names;
}

inline PipelineConfig ablation_config(const PipelineConfig& base, const std::string& variant) {
  PipelineConfig c = base;
  c.ablation = {};
  if (variant == "no_cf") c.ablation.no_cf = true;
  else if (variant == "no_recent_item") c.ablation.no_recent_item = true;
  else if (variant == "no_item_desc") c.ablation.no_item_desc = true;
  else if (variant == "no_user_queries") c.ablation.no_user_queries = true;
  else throw InvalidArgument("unknown ablation variant " + variant);
  c.output_dir = base.output_dir / "ablation" / variant;
  c.llm_cache = base.output_dir / "ablation" / "llm_cache.jsonl";
  c.llm_cache_fallbacks = {base.cache_path()};
  return c;
}

struct AblationRow {
  std::string name;
  RunResult result;
};

/// Base run (in the configured output directory) plus one run per removed component, each in
/// its own subdirectory. Variants read the base response cache but never write to base files.
inline std::vector<AblationRow> run_ablation(const PipelineConfig& config) {
  OutputLock lock(config.output_dir);
  PipelineConfig base = config;
  base.ablation = {};
  std::vector<AblationRow> rows;
  rows.push_back({"base", Pipeline(base).run()});
  for (const auto& v : ablation_variants()) rows.push_back({v, Pipeline(ablation_config(base, v)).run()});

  json j = json::array();
  std::vector<std::pair<std::string, MetricsReport>> table;
  for (const auto& r : rows) {
    j.push_back(json{{"variant", r.name},
                     {"metrics", to_json(r.result.metrics)},
                     {"diagnostics", r.result.diagnostics ? to_json(*r.result.diagnostics) : json(nullptr)}});
    table.emplace_back(r.name, r.result.metrics);
  }
  write_file(config.output_dir / "ablation" / "ablation.json", j.dump(2) + "\n");
  write_file(config.output_dir / "ablation" / "ablation.txt",
             format_table(table) +
                 "# no_recent_item drops both the emphasized last item and its metadata prefix\n");
  return rows;
}

}  // namespace querec
