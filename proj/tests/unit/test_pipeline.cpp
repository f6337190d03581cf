// SPDX-License-Identifier: Apache-2.0
#include "catch_amalgamated.hpp"

#include <cstdlib>

#include "querec/pipeline.hpp"
#include "support.hpp"

using namespace querec;
using querec::testing::data_dir;
using querec::testing::synth_config;
using querec::testing::TempDir;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

/// Content hash of every regular file under `dir`, keyed by relative path.
std::map<std::string, std::uint64_t> snapshot(const fs::path& dir, const std::set<std::string>& skip_dirs = {}) {
  std::map<std::string, std::uint64_t> out;
  for (auto it = fs::recursive_directory_iterator(dir); it != fs::recursive_directory_iterator(); ++it) {
    const auto rel = fs::relative(it->path(), dir).generic_string();
    if (it->is_directory() && skip_dirs.count(rel)) {
      it.disable_recursion_pending();
      continue;
    }
    if (it->is_regular_file()) out[rel] = fnv1a64(read_file(it->path()));
  }
  return out;
}

void check_close(const MetricsReport& got, const json& want, double tol) {
  for (const auto& [k, v] : got.hr) CHECK_THAT(v, WithinAbs(want.at("hr_" + std::to_string(k)).get<double>(), tol));
  for (const auto& [k, v] : got.ndcg) CHECK_THAT(v, WithinAbs(want.at("ndcg_" + std::to_string(k)).get<double>(), tol));
  CHECK_THAT(got.mean_novelty_10, WithinAbs(want.at("mean_novelty_10").get<double>(), tol));
  CHECK_THAT(got.skewness, WithinAbs(want.at("skewness").get<double>(), tol));
  CHECK(got.n_users == want.at("n_users").get<std::size_t>());
}

std::vector<std::string> ids_of(const ScoredList& l) {
  std::vector<std::string> out;
  for (const auto& e : l.entries) out.push_back(e.item_id);
  return out;
}

}  // namespace

TEST_CASE("config files interpolate the environment", "[pipeline][config]") {
  TempDir dir;
  const std::string text = R"({
    // comments are allowed
    "dataset": {"interactions": "${QUEREC_TEST_ROOT}/x.jsonl", "metadata": "m.jsonl"},
    "llm": {"mock": true},
    "fusion": {"mode": "fixed:0.3"},
    "output_dir": "out"
  })";
  write_file(dir / "c.json", text);
  ::setenv("QUEREC_TEST_ROOT", "/data", 1);
  const auto c = load_config(dir / "c.json");
  CHECK(c.interactions == fs::path("/data/x.jsonl"));
  CHECK(c.metadata == dir / "m.jsonl");
  CHECK(c.output_dir == dir / "out");
  CHECK(c.fusion.mode == FusionMode::FixedCC);
  CHECK(c.fusion.fixed_lambda == 0.3);
  CHECK(c.ks == std::vector<std::size_t>{5, 10});
  ::unsetenv("QUEREC_TEST_ROOT");
  CHECK_THROWS_WITH(load_config(dir / "c.json"), ContainsSubstring("QUEREC_TEST_ROOT"));

  auto base = json::parse(R"({"dataset": {"interactions": "a", "metadata": "b"}, "output_dir": "o"})");
  CHECK_NOTHROW(config_from_json(base, dir.path()));
  for (const char* patch : {R"({"dataset": {"pool": "everything"}})", R"({"cf": {"source": "magic"}})",
                            R"({"embedding": {"kind": "psychic"}})", R"({"eval": {"ks": []}})",
                            R"({"eval": {"ks": [0]}})", R"({"output_dir": ""})", R"({"fusion": {"mode": "avg"}})",
                            R"({"cf": {"source": "import", "test": "t.jsonl"}})",
                            R"({"ablation": {"no_recent_item": true, "no_user_queries": true}})"}) {
    auto j = base;
    j.merge_patch(json::parse(patch));
    CHECK_THROWS_AS(config_from_json(j, dir.path()), InvalidArgument);
  }
  write_file(dir / "broken.json", "{");
  CHECK_THROWS_AS(load_config(dir / "broken.json"), ParseError);
}

TEST_CASE("synthetic run matches the golden report", "[pipeline][golden]") {
  TempDir dir;
  const auto golden = json::parse(read_file(data_dir() / "synth" / "golden_report.json"));
  const auto r = run_pipeline(synth_config(dir / "out"));
  check_close(r.metrics, golden.at("metrics"), 1e-9);
  for (const auto& name : {"llm", "cf", "fused"}) check_close(r.methods.at(name), golden.at("methods").at(name), 1e-9);
  REQUIRE(r.diagnostics);
  const auto want = diagnostics_from_json(golden.at("diagnostics"));
  CHECK_THAT(r.diagnostics->lambda, WithinAbs(want.lambda, 1e-9));
  CHECK_THAT(r.diagnostics->omega, WithinAbs(want.omega, 1e-9));
  CHECK_THAT(r.diagnostics->lambda_init, WithinAbs(want.lambda_init, 1e-9));
  CHECK(r.skipped_stages.empty());
  CHECK(r.overlap.size() == 3);

  const auto report = json::parse(read_file(dir / "out" / "report.json"));
  CHECK(report.at("fusion_mode") == "adaptive");
  CHECK(report.at("metrics").at("novelty_log_base") == "e");
  CHECK(fs::exists(dir / "out" / "histogram.csv"));
  CHECK(read_file(dir / "out" / "report.txt").find("lambda=") != std::string::npos);
  const auto stats = json::parse(read_file(dir / "out" / "split" / "stats.json"));
  CHECK(stats.at("n_reviews") == 359);  // one event has no catalog entry
  CHECK_FALSE(fs::exists(dir / "out" / ".querec.lock"));
}

TEST_CASE("a rerun resumes from cached stages", "[pipeline][resume]") {
  TempDir dir;
  const auto cfg = synth_config(dir / "out");
  const auto first = run_pipeline(cfg);
  CHECK(first.executed_stages.size() == 12);

  const auto again = run_pipeline(cfg);
  CHECK(again.executed_stages.empty());
  CHECK(again.skipped_stages.size() == 12);
  CHECK(again.metrics.hr == first.metrics.hr);

  fs::remove(dir / "out" / "runs" / "final_test.jsonl");
  const auto resumed = run_pipeline(cfg);
  REQUIRE_FALSE(resumed.executed_stages.empty());
  CHECK(resumed.executed_stages.front() == "fuse");
  for (const auto& s : resumed.executed_stages) CHECK((s == "fuse" || s == "eval"));
  CHECK(resumed.metrics.ndcg == first.metrics.ndcg);

  auto changed = cfg;
  changed.fusion = FusionConfig::parse("fixed:0.5");
  const auto refit = run_pipeline(changed);
  CHECK(std::find(refit.skipped_stages.begin(), refit.skipped_stages.end(), "user-queries") !=
        refit.skipped_stages.end());
  CHECK(std::find(refit.executed_stages.begin(), refit.executed_stages.end(), "fuse") !=
        refit.executed_stages.end());
}

TEST_CASE("runs are byte-for-byte reproducible", "[pipeline][determinism]") {
  TempDir a, b;
  run_pipeline(synth_config(a / "out"));
  run_pipeline(synth_config(b / "out"));
  // The response cache is appended in completion order and config.json records the path.
  const auto sa = snapshot(a / "out"), sb = snapshot(b / "out");
  REQUIRE(sa.size() == sb.size());
  std::size_t compared = 0;
  for (const auto& [rel, h] : sa) {
    if (rel == "llm_cache.jsonl" || rel == "config.json" || rel.starts_with("stamps/")) continue;
    INFO(rel);
    CHECK(sb.at(rel) == h);
    ++compared;
  }
  CHECK(compared > 20);
}

TEST_CASE("fixed weight one reproduces the LLM ranking", "[pipeline]") {
  TempDir dir;
  auto cfg = synth_config(dir / "out");
  cfg.fusion = FusionConfig::parse("fixed:1");
  const auto r = run_pipeline(cfg);
  const auto llm = read_runs(dir / "out" / "runs" / "llm_test.jsonl");
  const auto fin = read_runs(dir / "out" / "runs" / "final_test.jsonl");
  REQUIRE(llm.size() == fin.size());
  for (const auto& [user, list] : llm) CHECK(ids_of(list) == ids_of(fin.at(user)));
  CHECK(r.metrics.hr == r.methods.at("llm").hr);
  CHECK(r.metrics.ndcg == r.methods.at("llm").ndcg);
}

TEST_CASE("ablation runs leave the base run untouched", "[pipeline][ablation]") {
  TempDir dir;
  const auto cfg = synth_config(dir / "out");
  const auto base = run_pipeline(cfg);
  const auto before = snapshot(dir / "out");

  const auto rows = run_ablation(cfg);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].name == "base");
  CHECK(rows[0].result.metrics.hr == base.metrics.hr);
  CHECK(snapshot(dir / "out", {"ablation"}) == before);

  std::map<std::string, const RunResult*> by_name;
  for (const auto& row : rows) by_name[row.name] = &row.result;
  CHECK_FALSE(by_name.at("no_cf")->diagnostics.has_value());
  CHECK(by_name.at("no_cf")->metrics.hr == base.methods.at("llm").hr);
  for (const auto& v : ablation_variants()) CHECK(fs::exists(dir / "out" / "ablation" / v / "report.json"));
  CHECK(read_file(dir / "out" / "ablation" / "no_user_queries" / "runs" / "llm_test.jsonl") !=
        read_file(dir / "out" / "runs" / "llm_test.jsonl"));
  CHECK_FALSE(fs::exists(dir / "out" / "ablation" / "no_item_desc" / "queries" / "items.jsonl"));

  const auto table = json::parse(read_file(dir / "out" / "ablation" / "ablation.json"));
  CHECK(table.size() == 5);
  CHECK(table[1].at("diagnostics").is_null());
  CHECK_THROWS_AS(ablation_config(cfg, "no_everything"), InvalidArgument);
}

TEST_CASE("one run per output directory", "[pipeline][lock]") {
  TempDir dir;
  const auto cfg = synth_config(dir / "out");
  {
    OutputLock held(dir / "out");
    CHECK_THROWS_WITH(run_pipeline(cfg), ContainsSubstring("locked"));
    CHECK_THROWS_AS(OutputLock(dir / "out"), IoError);
  }
  CHECK_NOTHROW(run_pipeline(cfg));
}

TEST_CASE("stage failures name the stage", "[pipeline][errors]") {
  TempDir dir;
  auto cfg = synth_config(dir / "out");
  write_file(dir / "bad.jsonl", "{not json}\n");
  cfg.metadata = dir / "bad.jsonl";
  try {
    run_pipeline(cfg);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "ingest");
    CHECK_THAT(e.what(), ContainsSubstring("bad.jsonl") && ContainsSubstring("line 1"));
  }

  auto imported = synth_config(dir / "imp");
  imported.cf_source = CfSource::Import;
  imported.fusion = FusionConfig::parse("rrf");
  imported.cf_test_path = dir / "missing.jsonl";
  CHECK_THROWS_WITH(run_pipeline(imported), ContainsSubstring("cf-scores"));
}

TEST_CASE("post-run checks reject impossible results", "[pipeline][checks]") {
  RunResult r;
  r.metrics.hr = {{5, 0.4}, {10, 0.3}};
  CHECK_THROWS_WITH(check_run_invariants(r), ContainsSubstring("HR decreases"));
  r.metrics.hr = {{5, 0.3}, {10, 0.4}};
  r.metrics.ndcg = {{5, 0.35}};
  CHECK_THROWS_WITH(check_run_invariants(r), ContainsSubstring("NDCG@5"));
  r.metrics.ndcg = {{5, 0.2}};
  CHECK_NOTHROW(check_run_invariants(r));
  r.diagnostics = FusionDiagnostics{0.5, 1.2, 0.5, 0, 0};
  CHECK_THROWS_WITH(check_run_invariants(r), ContainsSubstring("omega"));
  r.diagnostics.reset();
  r.norm_max = 1.5;
  try {
    check_run_invariants(r);
    FAIL("expected a stage error");
  } catch (const StageError& e) {
    CHECK(e.stage() == "checks");
  }
}
