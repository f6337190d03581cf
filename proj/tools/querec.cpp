// SPDX-License-Identifier: Apache-2.0
// Command-line front end. Each subcommand runs one stage on explicit files; `run` and
// `ablate` drive the whole experiment from a config file.

#include <charconv>
#include <iostream>

#include "CLI11.hpp"
#include "querec/querec.hpp"

using namespace querec;

namespace {

struct LlmFlags {
  std::string config;
  bool mock = false;
  std::string endpoint;
  std::string model;
  std::uint64_t seed = 42;
  int concurrency = 4;
  std::string cache;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Take LLM settings from this pipeline config");
    app->add_flag("--mock", mock, "Use the deterministic offline LLM");
    app->add_option("--endpoint", endpoint, "Chat-completions URL");
    app->add_option("--model", model, "Model name sent to the endpoint");
    app->add_option("--seed", seed, "Seed for the mock LLM")->capture_default_str();
    app->add_option("--concurrency", concurrency, "Requests in flight")->capture_default_str();
    app->add_option("--cache", cache, "Response cache (JSONL)");
  }

  LlmClientConfig resolve() const {
    LlmClientConfig c;
    if (!config.empty()) c = load_config(config).llm;
    if (!endpoint.empty()) c.endpoint_url = endpoint;
    if (!model.empty()) c.model_name = model;
    if (mock) c.mock_mode = true;
    if (config.empty()) {
      c.seed = seed;
      c.max_concurrency = concurrency;
    }
    if (!c.mock_mode && c.model_name.empty())
      throw InvalidArgument("--model (or --mock) is required for LLM generation");
    return c;
  }
};

struct EmbedFlags {
  std::string kind = "mock";
  std::size_t dim = 64;
  std::uint64_t seed = 42;
  std::string endpoint;
  std::string model;
  std::string path;

  void add(CLI::App* app) {
    app->add_option("--provider", kind, "mock, file or http")
        ->check(CLI::IsMember({"mock", "file", "http"}))
        ->capture_default_str();
    app->add_option("--dim", dim, "Mock embedding dimension")->capture_default_str();
    app->add_option("--seed", seed, "Seed for the mock encoder")->capture_default_str();
    app->add_option("--endpoint", endpoint, "Embeddings URL (http provider)");
    app->add_option("--model", model, "Embedding model name (http provider)");
    app->add_option("--vectors", path, "Precomputed vectors stem (file provider)");
  }

  EmbeddingProviderConfig resolve() const {
    EmbeddingProviderConfig c;
    c.kind = kind == "file" ? EmbeddingKind::File : kind == "http" ? EmbeddingKind::Http : EmbeddingKind::Mock;
    c.dimension = dim;
    c.seed = seed;
    c.endpoint_url = endpoint;
    c.model_name = model;
    c.path = path;
    return c;
  }
};

SplitView parse_view(const std::string& v) { return v == "valid" ? SplitView::Validation : SplitView::Test; }

std::vector<std::size_t> parse_ks(const std::string& text) {
  std::vector<std::size_t> ks;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const std::string part = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    std::size_t k = 0;
    auto [end, ec] = std::from_chars(part.data(), part.data() + part.size(), k);
    if (ec != std::errc() || end != part.data() + part.size() || k == 0)
      throw InvalidArgument("bad --k list '" + text + "'");
    ks.push_back(k);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  return ks;
}

void print_list(const std::string& user, const ScoredList& list) {
  std::cout << "user " << user << "\n";
  char buf[64];
  for (std::size_t i = 0; i < list.entries.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%4zu  %.6f  ", i + 1, list.entries[i].score);
    std::cout << buf << list.entries[i].item_id << "\n";
  }
}

void print_metrics(const RunResult& r) {
  std::vector<std::pair<std::string, MetricsReport>> rows(r.methods.begin(), r.methods.end());
  if (rows.empty()) rows.emplace_back("final", r.metrics);
  std::cout << format_table(rows);
  if (r.diagnostics)
    std::cout << "lambda_init=" << r.diagnostics->lambda_init << " omega=" << r.diagnostics->omega
              << " lambda=" << r.diagnostics->lambda << "\n";
  std::cout << "stages run: " << r.executed_stages.size() << ", cached: " << r.skipped_stages.size() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Query-enriched retrieval recommender with adaptive score fusion"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only print warnings and results");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Leave-one-out split of an interaction log");
  std::string in_interactions, in_metadata, in_out;
  std::size_t in_min_len = 3;
  bool in_dedup = false;
  ingest->add_option("--interactions", in_interactions)->required()->check(CLI::ExistingFile);
  ingest->add_option("--metadata", in_metadata, "Drop interactions whose item has no metadata")
      ->check(CLI::ExistingFile);
  ingest->add_option("--out", in_out)->required();
  ingest->add_option("--min-len", in_min_len)->capture_default_str();
  ingest->add_flag("--dedup", in_dedup, "Keep only the first interaction per (user, item)");

  // gen-item-queries
  auto* giq = app.add_subcommand("gen-item-queries", "Generate queries for every item");
  std::string giq_split, giq_metadata, giq_out, giq_pool = "catalog";
  std::size_t giq_reviews = kDefaultReviewCap;
  LlmFlags giq_llm;
  giq->add_option("--split", giq_split)->required()->check(CLI::ExistingDirectory);
  giq->add_option("--metadata", giq_metadata)->required()->check(CLI::ExistingFile);
  giq->add_option("--out", giq_out)->required();
  giq->add_option("--pool", giq_pool)->check(CLI::IsMember({"catalog", "interacted"}))->capture_default_str();
  giq->add_option("--review-cap", giq_reviews)->capture_default_str();
  giq_llm.add(giq);

  // gen-user-queries
  auto* guq = app.add_subcommand("gen-user-queries", "Generate queries for every evaluated user");
  std::string guq_split, guq_metadata, guq_items, guq_out, guq_view = "test";
  UserPromptOptions guq_opts;
  bool guq_no_recent = false;
  LlmFlags guq_llm;
  guq->add_option("--split", guq_split)->required()->check(CLI::ExistingDirectory);
  guq->add_option("--metadata", guq_metadata)->required()->check(CLI::ExistingFile);
  guq->add_option("--item-queries", guq_items, "Queries of the most recent item")->check(CLI::ExistingFile);
  guq->add_option("--view", guq_view)->check(CLI::IsMember({"valid", "test"}))->capture_default_str();
  guq->add_option("--out", guq_out)->required();
  guq->add_option("--history-max", guq_opts.history_max)->capture_default_str();
  guq->add_option("--review-chars", guq_opts.review_char_budget, "Per-review byte budget, 0 = whole");
  guq->add_flag("--no-recent-item", guq_no_recent, "Do not single out the last purchase");
  guq_llm.add(guq);

  // embed
  auto* emb = app.add_subcommand("embed", "Compose documents and embed them");
  std::string emb_docs, emb_subject = "item", emb_metadata, emb_queries, emb_split, emb_view = "test", emb_out,
                        emb_docs_out, emb_user_doc = "full";
  EmbedFlags emb_flags;
  emb->add_option("--docs", emb_docs, "Embed an existing document file")->check(CLI::ExistingFile);
  emb->add_option("--subject", emb_subject)->check(CLI::IsMember({"item", "user"}))->capture_default_str();
  emb->add_option("--metadata", emb_metadata)->check(CLI::ExistingFile);
  emb->add_option("--queries", emb_queries, "Generated queries; omit for metadata-only documents")
      ->check(CLI::ExistingFile);
  emb->add_option("--split", emb_split, "Split directory (user documents)")->check(CLI::ExistingDirectory);
  emb->add_option("--view", emb_view)->check(CLI::IsMember({"valid", "test"}))->capture_default_str();
  emb->add_option("--user-doc", emb_user_doc)
      ->check(CLI::IsMember({"full", "queries-only", "metadata-only"}))
      ->capture_default_str();
  emb->add_option("--docs-out", emb_docs_out, "Also write the composed documents");
  emb->add_option("--out", emb_out, "Output matrix stem")->required();
  emb_flags.add(emb);

  // build-index
  auto* bidx = app.add_subcommand("build-index", "Normalize item embeddings into an index");
  std::string bidx_in, bidx_out;
  bidx->add_option("--embeddings", bidx_in)->required();
  bidx->add_option("--out", bidx_out)->required();

  // retrieve
  auto* ret = app.add_subcommand("retrieve", "Cosine top-k over the item index");
  std::string ret_index, ret_users, ret_user, ret_split, ret_view = "test", ret_out, ret_scores;
  std::size_t ret_k = 10;
  ret->add_option("--index", ret_index)->required();
  ret->add_option("--users", ret_users, "User embedding matrix")->required();
  ret->add_option("--k", ret_k)->capture_default_str();
  ret->add_option("--user", ret_user, "Print one user's list");
  ret->add_option("--split", ret_split, "Exclude each user's history")->check(CLI::ExistingDirectory);
  ret->add_option("--view", ret_view)->check(CLI::IsMember({"valid", "test"}))->capture_default_str();
  ret->add_option("--out", ret_out, "Write top-k runs (JSONL)");
  ret->add_option("--scores", ret_scores, "Write the full score matrix");

  // cf
  auto* cf = app.add_subcommand("cf", "Produce or import collaborative-filtering scores");
  std::string cf_baseline, cf_import, cf_split, cf_items, cf_view = "test", cf_out;
  auto* cf_base_opt = cf->add_option("--baseline", cf_baseline)->check(CLI::IsMember({"popularity", "cooccurrence"}));
  auto* cf_import_opt = cf->add_option("--import", cf_import, "Dense matrix (.json) or top-N JSONL")
                            ->check(CLI::ExistingFile);
  cf_base_opt->excludes(cf_import_opt);
  cf->add_option("--split", cf_split)->required()->check(CLI::ExistingDirectory);
  cf->add_option("--items", cf_items, "Item index stem that fixes the column order")->required();
  cf->add_option("--view", cf_view)->check(CLI::IsMember({"valid", "test"}))->capture_default_str();
  cf->add_option("--out", cf_out, "Output matrix stem")->required();

  // fuse
  auto* fu = app.add_subcommand("fuse", "Fuse LLM and CF scores");
  std::string fu_mode = "adaptive", fu_llm, fu_cf, fu_llm_valid, fu_cf_valid, fu_split, fu_out, fu_diag;
  std::size_t fu_k = 10;
  bool fu_keep_history = false;
  fu->add_option("--mode", fu_mode, "adaptive | fixed:<lambda> | rrf[:<k>]")->capture_default_str();
  fu->add_option("--llm-scores", fu_llm)->required();
  fu->add_option("--cf-scores", fu_cf)->required();
  fu->add_option("--llm-valid", fu_llm_valid, "Validation LLM scores (adaptive)");
  fu->add_option("--cf-valid", fu_cf_valid, "Validation CF scores (adaptive)");
  fu->add_option("--split", fu_split)->required()->check(CLI::ExistingDirectory);
  fu->add_option("--k", fu_k)->capture_default_str();
  fu->add_flag("--keep-history", fu_keep_history, "Do not exclude previously seen items");
  fu->add_option("--out", fu_out)->required();
  fu->add_option("--diagnostics", fu_diag, "Write fusion diagnostics (JSON)");

  // eval
  auto* ev = app.add_subcommand("eval", "Score ranked runs against the test targets");
  std::vector<std::string> ev_runs;
  std::string ev_split, ev_ks = "5,10", ev_report, ev_hist, ev_metadata;
  ev->add_option("--runs", ev_runs)->required()->expected(1, -1)->check(CLI::ExistingFile);
  ev->add_option("--split", ev_split)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--k", ev_ks)->capture_default_str();
  ev->add_option("--metadata", ev_metadata, "Catalog for the skewness item axis")->check(CLI::ExistingFile);
  ev->add_option("--report", ev_report);
  ev->add_option("--histogram", ev_hist, "CSV item_id,count of the first run");

  // run / ablate / report
  auto* run = app.add_subcommand("run", "Full pipeline from a config file");
  auto* abl = app.add_subcommand("ablate", "Base run plus one run per removed component");
  std::string cfg_path;
  bool cfg_mock = false;
  for (auto* sub : {run, abl}) {
    sub->add_option("--config", cfg_path)->required()->check(CLI::ExistingFile);
    sub->add_flag("--mock", cfg_mock, "Force the offline LLM and encoder");
  }
  auto* rep = app.add_subcommand("report", "Print the reports of a finished run");
  std::string rep_dir;
  rep->add_option("--dir", rep_dir)->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  log::set_quiet(quiet);

  try {
    if (*ingest) {
      auto interactions = load_interactions(in_interactions);
      if (!in_metadata.empty()) {
        const auto catalog = load_catalog(in_metadata);
        std::erase_if(interactions, [&](const Interaction& x) { return !catalog.count(x.item_id); });
      }
      const auto split = leave_one_out_split(interactions, {in_min_len, in_dedup});
      const auto stats = dataset_stats(interactions);
      write_split(in_out, split, stats);
      std::cout << to_json(stats).dump(2) << "\n";
    } else if (*giq) {
      const auto split = read_split(giq_split);
      const auto catalog = load_catalog(giq_metadata);
      const auto ids = giq_pool == "catalog" ? catalog_items(catalog) : interacted_items(split);
      auto client = make_chat_client(giq_llm.resolve());
      std::optional<ResponseCache> cache;
      if (!giq_llm.cache.empty()) cache.emplace(giq_llm.cache);
      const auto jobs = item_generation_jobs(split, catalog, ids, giq_reviews);
      write_query_sets(giq_out, generate_query_sets(jobs, *client, giq_llm.resolve().max_concurrency,
                                                    cache ? &*cache : nullptr));
      std::cout << "wrote " << jobs.size() << " item query sets to " << giq_out << "\n";
    } else if (*guq) {
      const auto split = read_split(guq_split);
      const auto catalog = load_catalog(guq_metadata);
      std::map<std::string, QuerySet> items;
      if (!guq_items.empty()) items = by_subject(read_query_sets(guq_items));
      guq_opts.emphasize_last = !guq_no_recent;
      auto client = make_chat_client(guq_llm.resolve());
      std::optional<ResponseCache> cache;
      if (!guq_llm.cache.empty()) cache.emplace(guq_llm.cache);
      const auto jobs = user_generation_jobs(split, catalog, items, parse_view(guq_view), guq_opts);
      write_query_sets(guq_out, generate_query_sets(jobs, *client, guq_llm.resolve().max_concurrency,
                                                    cache ? &*cache : nullptr));
      std::cout << "wrote " << jobs.size() << " user query sets to " << guq_out << "\n";
    } else if (*emb) {
      std::vector<EnrichedDocument> docs;
      if (!emb_docs.empty()) {
        docs = read_documents(emb_docs);
      } else {
        if (emb_metadata.empty()) throw InvalidArgument("--metadata is required unless --docs is given");
        const auto catalog = load_catalog(emb_metadata);
        std::map<std::string, QuerySet> queries;
        if (!emb_queries.empty()) queries = by_subject(read_query_sets(emb_queries));
        if (emb_subject == "item") {
          docs = item_documents(catalog, catalog_items(catalog), emb_queries.empty() ? nullptr : &queries);
        } else {
          if (emb_split.empty()) throw InvalidArgument("user documents need --split");
          UserDocKind kind = emb_user_doc == "metadata-only" ? UserDocKind::MetadataOnly
                             : emb_user_doc == "queries-only" ? UserDocKind::QueriesOnly
                                                              : UserDocKind::Full;
          if (kind != UserDocKind::MetadataOnly && emb_queries.empty())
            throw InvalidArgument("--queries is required unless --user-doc metadata-only");
          docs = user_documents(read_split(emb_split), catalog, queries, parse_view(emb_view), kind);
        }
      }
      if (!emb_docs_out.empty()) write_documents(emb_docs_out, docs);
      auto embedder = make_embedder(emb_flags.resolve());
      save_matrix(emb_out, embed_documents(docs, *embedder));
      std::cout << "embedded " << docs.size() << " documents into " << emb_out << "\n";
    } else if (*bidx) {
      const auto index = ItemIndex::build(load_matrix(bidx_in));
      index.save(bidx_out);
      std::cout << "indexed " << index.size() << " items (dimension " << index.dimension() << ")\n";
    } else if (*ret) {
      const auto index = ItemIndex::load(ret_index);
      const auto users = load_matrix(ret_users);
      ExclusionMap exclude;
      if (!ret_split.empty()) exclude = history_exclusions(read_split(ret_split), parse_view(ret_view));
      const auto scores = score_users(index, users);
      if (!ret_scores.empty()) save_matrix(ret_scores, scores);
      const auto runs = rank_matrix(scores, ret_k, exclude);
      if (!ret_out.empty()) write_runs(ret_out, runs);
      if (!ret_user.empty()) {
        auto it = runs.find(ret_user);
        if (it == runs.end()) throw InvalidArgument("unknown user '" + ret_user + "'");
        print_list(ret_user, it->second);
      } else if (ret_out.empty() && ret_scores.empty()) {
        for (const auto& [user, list] : runs) print_list(user, list);
      }
    } else if (*cf) {
      if (cf_baseline.empty() && cf_import.empty()) throw InvalidArgument("give --baseline or --import");
      const auto split = read_split(cf_split);
      const auto items = load_matrix(cf_items).row_ids;
      const auto users = split.evaluated_users();
      DenseMatrix scores;
      if (!cf_import.empty()) {
        const std::unordered_set<std::string> known(items.begin(), items.end());
        scores = dense_cf_scores(import_cf_scores(cf_import, known), users, items);
      } else if (cf_baseline == "popularity") {
        scores = popularity_baseline(split, users, items);
      } else {
        scores = cooccurrence_baseline(split, users, items, parse_view(cf_view));
      }
      save_matrix(cf_out, scores);
      std::cout << "wrote CF scores for " << scores.rows() << " users to " << cf_out << "\n";
    } else if (*fu) {
      FusionConfig config = FusionConfig::parse(fu_mode);
      config.k_eval = fu_k;
      const auto split = read_split(fu_split);
      const DenseMatrix llm = load_matrix(fu_llm), cfm = load_matrix(fu_cf);
      std::optional<DenseMatrix> llm_valid, cf_valid;
      if (!fu_llm_valid.empty()) llm_valid = load_matrix(fu_llm_valid);
      if (!fu_cf_valid.empty()) cf_valid = load_matrix(fu_cf_valid);
      FusionInputs in;
      in.llm_test = &llm;
      in.cf_test = &cfm;
      in.llm_valid = llm_valid ? &*llm_valid : nullptr;
      in.cf_valid = cf_valid ? &*cf_valid : nullptr;
      in.valid_targets = split.targets(SplitView::Validation);
      if (!fu_keep_history) {
        in.exclude_valid = history_exclusions(split, SplitView::Validation);
        in.exclude_test = history_exclusions(split, SplitView::Test);
      }
      const auto result = fuse_all(in, config);
      write_runs(fu_out, result.runs);
      const json diag = result.diagnostics ? to_json(*result.diagnostics) : json(nullptr);
      if (!fu_diag.empty()) write_file(fu_diag, diag.dump(2) + "\n");
      std::cout << diag.dump() << "\n";
    } else if (*ev) {
      const auto split = read_split(ev_split);
      const auto targets = split.targets(SplitView::Test);
      const auto freqs = train_frequencies(split);
      const auto ks = parse_ks(ev_ks);
      std::map<std::string, RankedRuns> runs;
      std::vector<std::string> names;
      for (const auto& path : ev_runs) {
        std::string name = fs::path(path).stem().string();
        while (runs.count(name)) name += "'";
        runs.emplace(name, read_runs(path));
        names.push_back(name);
      }
      std::vector<std::string> items;
      if (!ev_metadata.empty()) {
        items = catalog_items(load_catalog(ev_metadata));
      } else {
        log::warn("no --metadata given; skewness uses the items seen in the split and runs");
        std::set<std::string> seen;
        for (const auto& id : interacted_items(split)) seen.insert(id);
        for (const auto& [n, r] : runs)
          for (const auto& [u, list] : r)
            for (const auto& e : list.entries) seen.insert(e.item_id);
        items.assign(seen.begin(), seen.end());
      }
      std::vector<std::pair<std::string, MetricsReport>> rows;
      std::map<std::string, std::set<std::string>> hits;
      json methods = json::object();
      for (const auto& name : names) {
        rows.emplace_back(name, evaluate(runs[name], targets, freqs, items, ks));
        hits[name] = hit_sets(runs[name], targets, kHitSetDepth);
        methods[name] = to_json(rows.back().second);
      }
      const std::string table = format_table(rows);
      std::cout << table;
      if (!ev_report.empty()) {
        json j{{"methods", methods}};
        if (hits.size() >= 2) j["overlap"] = to_json(overlap_report(hits));
        write_file(ev_report, j.dump(2) + "\n");
        fs::path txt = ev_report;
        txt.replace_extension(".txt");
        write_file(txt, table);
      }
      if (!ev_hist.empty()) write_file(ev_hist, histogram_csv(item_distribution(runs[names.front()], 10)));
    } else if (*run || *abl) {
      PipelineConfig config = load_config(cfg_path);
      if (cfg_mock) {
        config.llm.mock_mode = true;
        config.embedding.kind = EmbeddingKind::Mock;
      }
      if (*run) {
        print_metrics(run_pipeline(config));
      } else {
        const auto rows = run_ablation(config);
        std::vector<std::pair<std::string, MetricsReport>> table;
        for (const auto& r : rows) table.emplace_back(r.name, r.result.metrics);
        std::cout << format_table(table);
      }
    } else if (*rep) {
      const fs::path dir = rep_dir;
      bool any = false;
      for (const fs::path rel : {"report.txt", "ablation/ablation.txt"}) {
        if (!fs::exists(dir / rel)) continue;
        std::cout << "== " << rel.string() << "\n" << read_file(dir / rel);
        any = true;
      }
      if (fs::exists(dir / "fusion/diagnostics.json"))
        std::cout << "== fusion\n" << read_file(dir / "fusion/diagnostics.json");
      if (!any) throw Error("no reports under " + dir.string());
    }
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
