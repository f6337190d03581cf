// SPDX-License-Identifier: Apache-2.0
#include "catch_amalgamated.hpp"

#include <atomic>
#include <cstdlib>
#include <thread>

#include "querec/llm_client.hpp"
#include "support.hpp"

using namespace querec;
using querec::testing::TempDir;

namespace {

class FakeServer {
public:
  explicit FakeServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    svr_.Post("/v1/chat/completions", [this, handler](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      handler(req, res);
    });
    port_ = svr_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { svr_.listen_after_bind(); });
    svr_.wait_until_ready();
  }
  ~FakeServer() {
    svr_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }

  std::atomic<int> hits{0};

private:
  httplib::Server svr_;
  int port_ = 0;
  std::thread thread_;
};

json chat_reply(const std::string& content) {
  return {{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}};
}

LlmClientConfig http_config(const std::string& url) {
  LlmClientConfig cfg;
  cfg.endpoint_url = url;
  cfg.model_name = "test-model";
  cfg.api_key_env_var = "QUEREC_TEST_API_KEY";
  cfg.retry_backoff_s = 0;
  cfg.timeout_s = 5;
  cfg.max_retries = 2;
  return cfg;
}

PromptText item_prompt(const std::string& title) {
  ItemMeta m;
  m.item_id = title;
  m.title = title;
  m.brand = "Acme";
  return build_item_prompt(m, {}, 10);
}

/// Counts calls and fails on request.
class CountingClient final : public ChatClient {
public:
  std::string complete(const PromptText& prompt) override {
    ++calls;
    if (prompt.user.find("Broken") != std::string::npos) return "### nope";
    return inner.complete(prompt);
  }
  std::string identity() const override { return "counting"; }

  std::atomic<int> calls{0};
  MockChatClient inner{1};
};

}  // namespace

TEST_CASE("mock client is a pure function of seed and prompt", "[llm][mock]") {
  MockChatClient a(7), b(7), c(8);
  const auto p = item_prompt("Kettlebell Set");
  CHECK(a.complete(p) == b.complete(p));
  CHECK(a.complete(p) != c.complete(p));
  CHECK(a.complete(p) != a.complete(item_prompt("Yoga Mat")));
  CHECK(a.identity() != c.identity());

  LlmClientConfig cfg;
  CHECK_THROWS_AS(make_chat_client(cfg), InvalidArgument);
  cfg.mock_mode = true;
  cfg.seed = 7;
  CHECK(make_chat_client(cfg)->complete(p) == a.complete(p));
}

TEST_CASE("http client speaks chat completions", "[llm][http]") {
  json seen;
  std::string auth;
  FakeServer server([&](const httplib::Request& req, httplib::Response& res) {
    seen = json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(chat_reply("1. alpha\n2. beta").dump(), "application/json");
  });

  ::setenv("QUEREC_TEST_API_KEY", "sekret", 1);
  auto cfg = http_config(server.url());
  cfg.temperature = 0.0;
  HttpChatClient client(cfg);
  const PromptText p{"sys", "usr"};
  CHECK(client.complete(p) == "1. alpha\n2. beta");
  CHECK(seen.at("model") == "test-model");
  CHECK(seen.at("messages").size() == 2);
  CHECK(seen.at("messages")[0] == json{{"role", "system"}, {"content", "sys"}});
  CHECK(seen.at("messages")[1] == json{{"role", "user"}, {"content", "usr"}});
  CHECK(seen.at("temperature") == 0.0);
  CHECK_FALSE(seen.contains("max_tokens"));
  CHECK(auth == "Bearer sekret");
  ::unsetenv("QUEREC_TEST_API_KEY");

  HttpChatClient anonymous(cfg);
  anonymous.complete(p);
  CHECK(auth.empty());
}

TEST_CASE("http client retries server errors", "[llm][http]") {
  FakeServer server([&](const httplib::Request&, httplib::Response& res) {
    res.status = 500;
    res.set_content("busy", "text/plain");
  });
  std::atomic<int>& hits = server.hits;

  SECTION("gives up after the configured attempts") {
    HttpChatClient client(http_config(server.url()));
    try {
      client.complete({"s", "u"});
      FAIL("expected a transport error");
    } catch (const TransportError& e) {
      CHECK(e.attempts() == 3);
      CHECK(hits == 3);
      CHECK(std::string(e.what()).find("500") != std::string::npos);
    }
  }
}

TEST_CASE("http client recovers after a transient failure", "[llm][http]") {
  FakeServer server([](const httplib::Request&, httplib::Response& res) {
    static std::atomic<int> calls{0};
    if (calls++ == 0) {
      res.status = 503;
      return;
    }
    res.set_content(chat_reply("ok").dump(), "application/json");
  });
  HttpChatClient client(http_config(server.url()));
  CHECK(client.complete({"s", "u"}) == "ok");
  CHECK(server.hits == 2);
}

TEST_CASE("http client treats client errors and bad bodies as fatal", "[llm][http]") {
  FakeServer bad_request([](const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content("no such model", "text/plain");
  });
  HttpChatClient a(http_config(bad_request.url()));
  CHECK_THROWS_WITH(a.complete({"s", "u"}), Catch::Matchers::ContainsSubstring("no such model"));
  CHECK(bad_request.hits == 1);

  FakeServer wrong_shape([](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"choices":[]})", "application/json");
  });
  HttpChatClient b(http_config(wrong_shape.url()));
  CHECK_THROWS_WITH(b.complete({"s", "u"}), Catch::Matchers::ContainsSubstring("response shape"));

  auto cfg = http_config("http://127.0.0.1:1/v1/chat/completions");
  cfg.max_retries = 0;
  HttpChatClient unreachable(cfg);
  CHECK_THROWS_AS(unreachable.complete({"s", "u"}), TransportError);
  CHECK_THROWS_AS(HttpChatClient(http_config("localhost/v1")).complete({"s", "u"}), InvalidArgument);
}

TEST_CASE("response cache persists and reloads", "[llm][cache]") {
  TempDir dir;
  const auto path = dir / "cache.jsonl";
  const auto k1 = ResponseCache::key("mock:1", {"s", "u"});
  CHECK(k1 != ResponseCache::key("mock:2", {"s", "u"}));
  CHECK(k1 != ResponseCache::key("mock:1", {"s", "u2"}));
  CHECK(k1 != ResponseCache::key("mock:1", {"su", ""}));
  {
    ResponseCache cache(path);
    CHECK(cache.size() == 0);
    cache.put(k1, "1. one\n2. two");
    cache.put(k1, "ignored");
    cache.put("k2", "x");
  }
  ResponseCache again(path);
  CHECK(again.size() == 2);
  CHECK(again.get(k1) == std::optional<std::string>("1. one\n2. two"));
  CHECK_FALSE(again.get("missing").has_value());

  write_file(dir / "fallback.jsonl", json{{"key", "k3"}, {"raw", "from fallback"}}.dump() + "\n");
  ResponseCache layered(dir / "fresh.jsonl", {dir / "fallback.jsonl", dir / "absent.jsonl"});
  CHECK(layered.get("k3") == std::optional<std::string>("from fallback"));
  layered.put("k4", "y");
  CHECK(read_file(dir / "fallback.jsonl").find("k4") == std::string::npos);
}

TEST_CASE("response cache tolerates only a torn trailing line", "[llm][cache]") {
  TempDir dir;
  const std::string good = json{{"key", "a"}, {"raw", "1"}}.dump() + "\n";
  write_file(dir / "torn.jsonl", good + R"({"key":"b","ra)");
  CHECK(ResponseCache(dir / "torn.jsonl").size() == 1);

  write_file(dir / "corrupt.jsonl", R"({"key":"b","ra)" "\n" + good);
  CHECK_THROWS_AS(ResponseCache(dir / "corrupt.jsonl"), ParseError);
}

TEST_CASE("generate_query_sets keeps job order and uses the cache", "[llm][generate]") {
  TempDir dir;
  std::vector<GenerationJob> jobs;
  for (int i = 0; i < 25; ++i) jobs.push_back({"s" + std::to_string(i), item_prompt("Item " + std::to_string(i))});

  CountingClient client;
  ResponseCache cache(dir / "c.jsonl");
  const auto first = generate_query_sets(jobs, client, 4, &cache);
  REQUIRE(first.size() == jobs.size());
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    CHECK(first[i].subject_id == jobs[i].subject_id);
    CHECK(first[i].raw_response == client.inner.complete(jobs[i].prompt));
  }
  CHECK(client.calls == 25);

  ResponseCache reloaded(dir / "c.jsonl");
  const auto second = generate_query_sets(jobs, client, 1, &reloaded);
  CHECK(client.calls == 25);
  for (std::size_t i = 0; i < jobs.size(); ++i) CHECK(second[i].queries == first[i].queries);

  CHECK(generate_query_sets({}, client, 4).empty());
}

TEST_CASE("generate_query_sets surfaces the first failure", "[llm][generate]") {
  std::vector<GenerationJob> jobs;
  for (int i = 0; i < 10; ++i) jobs.push_back({"s" + std::to_string(i), item_prompt("Item " + std::to_string(i))});
  jobs[3] = {"bad", item_prompt("Broken Thing")};
  CountingClient client;
  try {
    generate_query_sets(jobs, client, 3);
    FAIL("expected a generation error");
  } catch (const GenerationError& e) {
    CHECK(e.raw_response() == "### nope");
  }
}
