// SPDX-License-Identifier: Apache-2.0
#pragma once

// Chat-completion clients (HTTP and deterministic mock), a persistent response cache and
// order-preserving concurrent query generation.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "httplib.h"
#include "querec/error.hpp"
#include "querec/hash.hpp"
#include "querec/io.hpp"
#include "querec/log.hpp"
#include "querec/querygen.hpp"

namespace querec {

struct LlmClientConfig {
  std::string endpoint_url = "http://localhost:8000/v1/chat/completions";
  std::string model_name;
  std::string api_key_env_var = "QUEREC_LLM_API_KEY";
  int max_concurrency = 4;
  double timeout_s = 120.0;
  int max_retries = 3;
  double retry_backoff_s = 1.0;
  std::optional<double> temperature;
  std::optional<int> max_tokens;
  bool mock_mode = false;
  std::uint64_t seed = 0;
};

class ChatClient {
public:
  virtual ~ChatClient() = default;

  /// Returns the assistant message text for `prompt`.
  virtual std::string complete(const PromptText& prompt) = 0;

  /// Distinguishes response caches of different models/seeds.
  virtual std::string identity() const = 0;
};

// ---------------------------------------------------------------------------
// Mock

namespace detail {

inline std::vector<std::string> title_tokens(std::string_view title) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : title) {
    if (c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9')) {
      cur += static_cast<char>(c);
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline void append_unique(std::vector<std::string>& pool, const std::vector<std::string>& toks) {
  for (const auto& t : toks)
    if (std::find(pool.begin(), pool.end(), t) == pool.end()) pool.push_back(t);
}

}  // namespace detail

/// Deterministic stand-in for a model server. The output is a pure function of
/// (seed, system, user): ten numbered, bolded lines built from the tokens of the item
/// titles found in the prompt, weighted toward the last title.
class MockChatClient final : public ChatClient {
public:
  explicit MockChatClient(std::uint64_t seed = 0) : seed_(seed) {}

  std::string complete(const PromptText& prompt) override {
    static constexpr std::string_view kItemTitle = "- **Item Title**: ";
    static constexpr std::string_view kHistTitle = "**Title:** `";
    static constexpr const char* kTemplates[] = {"best",    "affordable", "durable",  "top rated",
                                                 "gift idea", "premium",  "compact",  "popular",
                                                 "reliable",  "everyday"};

    std::vector<std::string> titles;
    std::string_view u = prompt.user;
    while (!u.empty()) {
      std::size_t nl = u.find('\n');
      std::string_view line = u.substr(0, nl);
      if (line.starts_with(kItemTitle)) {
        titles.emplace_back(line.substr(kItemTitle.size()));
      } else if (line.starts_with(kHistTitle) && line.size() > kHistTitle.size() &&
                 line.back() == '`') {
        titles.emplace_back(line.substr(kHistTitle.size(), line.size() - kHistTitle.size() - 1));
      }
      if (nl == std::string_view::npos) break;
      u.remove_prefix(nl + 1);
    }

    std::vector<std::string> all_pool, last_pool;
    for (const auto& t : titles) detail::append_unique(all_pool, detail::title_tokens(t));
    if (!titles.empty()) detail::append_unique(last_pool, detail::title_tokens(titles.back()));
    if (all_pool.empty() || last_pool.empty())
      return "### I could not find an item to write queries for.";

    SplitMix64 rng(fnv1a64(std::to_string(seed_) + "\x1f" + prompt.system + "\x1e" + prompt.user));
    std::string out;
    for (std::size_t j = 0; j < kQueriesPerSubject; ++j) {
      std::string_view tmpl = kTemplates[rng.next() % std::size(kTemplates)];
      const auto& a = last_pool[rng.next() % last_pool.size()];
      const auto& b = last_pool[rng.next() % last_pool.size()];
      const auto& c = all_pool[rng.next() % all_pool.size()];
      const auto& d = all_pool[rng.next() % all_pool.size()];
      if (j) out += '\n';
      out += std::to_string(j + 1) + ". **" + std::string(tmpl) + " " + a + " " + b + " " + c +
             " " + d + "**";
    }
    return out;
  }

  std::string identity() const override { return "mock:" + std::to_string(seed_); }

private:
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// HTTP

namespace detail {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline SplitUrl split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw InvalidArgument("endpoint URL needs a scheme: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline std::string api_key_from_env(const std::string& var) {
  if (var.empty()) return {};
  const char* v = std::getenv(var.c_str());
  return v ? std::string(v) : std::string();
}

/// POSTs JSON with retries on transport failures, 429 and 5xx. Other statuses are fatal.
inline json post_json_with_retry(const std::string& url, const json& body,
                                 const std::string& api_key, double timeout_s, int max_retries,
                                 double backoff_s) {
  const SplitUrl target = split_url(url);
  const std::string payload = body.dump();
  std::string last_error;
  const int attempts = std::max(0, max_retries) + 1;
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    httplib::Client cli(target.origin);
    const auto timeout = std::chrono::duration<double>(timeout_s);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
    cli.set_connection_timeout(secs.count(), usecs.count());
    cli.set_read_timeout(secs.count(), usecs.count());
    cli.set_write_timeout(secs.count(), usecs.count());
    httplib::Headers headers;
    if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);

    auto res = cli.Post(target.path, headers, payload, "application/json");
    if (!res) {
      last_error = "request to " + url + " failed: " + httplib::to_string(res.error());
    } else if (res->status == 429 || res->status >= 500) {
      last_error = "server returned HTTP " + std::to_string(res->status);
    } else if (res->status != 200) {
      throw Error("HTTP " + std::to_string(res->status) + " from " + url + ": " + res->body);
    } else {
      try {
        return json::parse(res->body);
      } catch (const json::parse_error& e) {
        throw Error("malformed JSON response from " + url + ": " + e.what());
      }
    }
    if (attempt < attempts && backoff_s > 0)
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff_s * (1 << (attempt - 1))));
  }
  throw TransportError(last_error, attempts);
}

}  // namespace detail

/// OpenAI-compatible chat-completions client (vLLM, llama.cpp server, hosted APIs).
class HttpChatClient final : public ChatClient {
public:
  explicit HttpChatClient(LlmClientConfig cfg)
      : cfg_(std::move(cfg)), api_key_(detail::api_key_from_env(cfg_.api_key_env_var)) {}

  json request_body(const PromptText& prompt) const {
    json body{{"model", cfg_.model_name},
              {"messages",
               json::array({json{{"role", "system"}, {"content", prompt.system}},
                            json{{"role", "user"}, {"content", prompt.user}}})}};
    if (cfg_.temperature) body["temperature"] = *cfg_.temperature;
    if (cfg_.max_tokens) body["max_tokens"] = *cfg_.max_tokens;
    return body;
  }

  std::string complete(const PromptText& prompt) override {
    json res = detail::post_json_with_retry(cfg_.endpoint_url, request_body(prompt), api_key_,
                                            cfg_.timeout_s, cfg_.max_retries,
                                            cfg_.retry_backoff_s);
    try {
      return res.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw Error(std::string("unexpected chat-completions response shape: ") + e.what());
    }
  }

  std::string identity() const override {
    return "http:" + cfg_.endpoint_url + ":" + cfg_.model_name;
  }

private:
  LlmClientConfig cfg_;
  std::string api_key_;
};

inline std::unique_ptr<ChatClient> make_chat_client(const LlmClientConfig& cfg) {
  if (cfg.mock_mode) return std::make_unique<MockChatClient>(cfg.seed);
  if (cfg.model_name.empty()) throw InvalidArgument("llm.model is required unless mock mode is on");
  return std::make_unique<HttpChatClient>(cfg);
}

// ---------------------------------------------------------------------------
// Response cache

/// Append-only JSONL store of raw completions keyed by client identity and prompt.
/// Lookups consult the writable file first, then any read-only fallbacks.
class ResponseCache {
public:
  explicit ResponseCache(fs::path path, std::vector<fs::path> read_only = {})
      : path_(std::move(path)) {
    for (const auto& p : read_only)
      if (fs::exists(p)) load(p);
    if (fs::exists(path_)) load(path_);
  }

  static std::string key(const std::string& identity, const PromptText& prompt) {
    const std::string material = identity + "\x1f" + prompt.system + "\x1e" + prompt.user;
    return hex64(fnv1a64(material)) + hex64(fnv1a64(material, 0x84222325cbf29ce4ULL));
  }

  std::optional<std::string> get(const std::string& key) const {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const std::string& key, const std::string& raw) {
    std::lock_guard lock(mu_);
    if (!entries_.emplace(key, raw).second) return;
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw IoError("cannot append to " + path_.string());
    out << json{{"key", key}, {"raw", raw}}.dump() << '\n';
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return entries_.size();
  }

private:
  void load(const fs::path& p) {
    const std::string source = p.string();
    std::ifstream in(p, std::ios::binary);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        json j = json::parse(line);
        entries_.emplace(j.at("key").get<std::string>(), j.at("raw").get<std::string>());
      } catch (const json::exception&) {
        // A crash mid-append can leave one torn trailing line; anything else is corruption.
        if (in.peek() != std::char_traits<char>::eof())
          throw ParseError(source, line_no, "corrupt response cache entry");
        log::warn("ignoring truncated trailing entry in " + source);
      }
    }
  }

  fs::path path_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::string> entries_;
};

// ---------------------------------------------------------------------------
// Generation

struct GenerationJob {
  std::string subject_id;
  PromptText prompt;
};

inline QuerySet generate_query_set(const GenerationJob& job, ChatClient& client,
                                   ResponseCache* cache = nullptr) {
  std::string key;
  if (cache) {
    key = ResponseCache::key(client.identity(), job.prompt);
    if (auto hit = cache->get(key)) return make_query_set(job.subject_id, *hit);
  }
  std::string raw = client.complete(job.prompt);
  QuerySet qs = make_query_set(job.subject_id, raw);
  if (cache) cache->put(key, raw);
  return qs;
}

/// Runs up to `max_concurrency` requests in flight. Output order matches `jobs`.
/// The first failure stops the remaining work and is rethrown.
inline std::vector<QuerySet> generate_query_sets(const std::vector<GenerationJob>& jobs,
                                                 ChatClient& client, int max_concurrency,
                                                 ResponseCache* cache = nullptr) {
  std::vector<QuerySet> out(jobs.size());
  if (jobs.empty()) return out;
  const std::size_t n_workers =
      std::min<std::size_t>(static_cast<std::size_t>(std::max(1, max_concurrency)), jobs.size());

  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex err_mu;

  auto worker = [&] {
    while (!failed) {
      const std::size_t i = next++;
      if (i >= jobs.size()) return;
      try {
        out[i] = generate_query_set(jobs[i], client, cache);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        failed = true;
      }
    }
  };

  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(n_workers);
    for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
  }
  if (first_error) std::rethrow_exception(first_error);
  return out;
}

}  // namespace querec
