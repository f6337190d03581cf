// SPDX-License-Identifier: Apache-2.0
#pragma once

// Prompt construction for item and user query generation, response parsing,
// and composition of the enriched documents that get embedded.

#include <algorithm>
#include <cctype>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "querec/dataset.hpp"
#include "querec/error.hpp"
#include "querec/io.hpp"
#include "querec/log.hpp"

namespace querec {

inline constexpr std::size_t kQueriesPerSubject = 10;
inline constexpr std::size_t kDefaultReviewCap = 10;
inline constexpr std::size_t kDefaultHistoryMax = 8;

struct PromptText {
  std::string system;
  std::string user;

  bool operator==(const PromptText&) const = default;
};

struct QuerySet {
  std::string subject_id;
  std::vector<std::string> queries;
  std::string raw_response;

  bool operator==(const QuerySet&) const = default;
};

struct EnrichedDocument {
  std::string subject_id;
  std::string text;

  bool operator==(const EnrichedDocument&) const = default;
};

namespace detail {

/// Collapses line breaks so a field stays on one prompt line.
inline std::string one_line(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) out += (c == '\n' || c == '\r') ? ' ' : c;
  return out;
}

inline std::string join(std::span<const std::string> parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

/// Truncates to at most `budget` bytes on a UTF-8 boundary and marks the cut with "...".
inline std::string clip_utf8(std::string s, std::size_t budget) {
  if (budget == 0 || s.size() <= budget) return s;
  std::size_t cut = budget;
  while (cut > 0 && (static_cast<unsigned char>(s[cut]) & 0xC0) == 0x80) --cut;
  s.resize(cut);
  s += "...";
  return s;
}

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Item prompt

inline constexpr std::string_view kItemSystemPrompt =
    "You are an intelligent assistant designed to create detailed and precise search queries "
    "for items based on their descriptions and aggregated user reviews.\n"
    "Your task is to generate 10 distinct and comprehensive search queries that effectively "
    "help users find the specified item.\n"
    "Focus on incorporating key features, standout aspects, brand, and practical benefits into "
    "each query to enhance search accuracy.\n"
    "Emphasize the unique attributes that differentiate the item from similar products.\n"
    "Each query should be concise, factual, and separated by line breaks.";

/// `reviews` are in chronological order; the `cap` most recent are kept.
inline PromptText build_item_prompt(const ItemMeta& meta, std::span<const std::string> reviews,
                                    std::size_t cap = kDefaultReviewCap) {
  if (reviews.size() > cap) reviews = reviews.subspan(reviews.size() - cap);

  std::string u;
  u += "### Task:\n";
  u += "Analyze the provided item metadata and user reviews to generate 10 detailed and "
       "objective search queries for the item.\n";
  u += "Your goal is to create queries that highlight the item's key features, benefits, and "
       "unique aspects based on its description and user feedback.\n\n";
  u += "### Input:\n";
  u += "- **Item Title**: " + detail::one_line(meta.title) + "\n";
  u += "- **Brand**: " + detail::one_line(meta.brand) + "\n";
  u += "- **Categories**: " + detail::one_line(detail::join(meta.categories, ", ")) + "\n";
  u += "- **Description**: " + detail::one_line(meta.description) + "\n";
  u += "- **User Reviews**:\n";
  for (std::size_t i = 0; i < reviews.size(); ++i)
    u += std::to_string(i + 1) + ". " + detail::one_line(reviews[i]) + "\n";
  u += "\n\n### Requirements:\n";
  u += "- Generate exactly 10 distinct search queries, each on a **separate line**.\n";
  u += "- Incorporate key metadata and review insights to create effective, descriptive "
       "queries.\n";
  u += "- Highlight the item's purpose, standout features, brand, and practical benefits in "
       "each query.\n";
  u += "- Emphasize the **unique attributes that differentiate the item from other similar "
       "products**.\n";
  u += "- Avoid redundant details and ensure each query is unique and precise.\n\n";
  u += "### Response:\n";
  return {std::string(kItemSystemPrompt), std::move(u)};
}

// ---------------------------------------------------------------------------
// User prompt

inline constexpr std::string_view kUserSystemPrompt =
    "You are an intelligent assistant designed to analyze a user's purchase history and "
    "behavior to generate **10 effective search queries** for predicting the **next items** "
    "they are most likely to purchase.\n"
    "Your task is to evaluate past purchase patterns, item metadata, and related search queries "
    "to construct concise and accurate search queries that can be used to find the next "
    "recommended items.\n"
    "Focus on identifying recurring patterns, shifts in preferences, and evolving interests to "
    "enhance the relevance of the search queries.\n"
    "For the most recent item, make sure to include **related queries** that were associated "
    "with it to improve search accuracy.\n"
    "Ensure each query highlights the **unique characteristics of items** and reflects the "
    "**user's preferences and interests** for more personalized recommendations.\n"
    "Ensure each query is clear, specific, and optimized for retrieving relevant items.";

inline constexpr std::string_view kMostRecentMarker = "This is the most recently purchased product:";

struct HistoryEntry {
  ItemMeta meta;
  std::string review;
};

struct UserPromptOptions {
  std::size_t history_max = kDefaultHistoryMax;
  /// Per-review byte budget; 0 keeps reviews whole.
  std::size_t review_char_budget = 0;
  /// When false the last item is rendered like any other entry and its queries are dropped.
  bool emphasize_last = true;
};

namespace detail {

inline std::string render_history_entry(const HistoryEntry& e, std::size_t budget) {
  std::string s;
  s += "**Title:** `" + one_line(e.meta.title) + "`\n";
  s += "**Brand:** " + one_line(e.meta.brand) + "\n";
  s += "**Categories:** " + one_line(join(e.meta.categories, ", ")) + "\n";
  s += "**User Review:**\n";
  s += clip_utf8(one_line(e.review), budget) + "\n\n";
  return s;
}

}  // namespace detail

/// `history` is chronological. Only the `history_max` most recent entries are rendered; the
/// last one is emphasized and followed by `last_item_queries` (the generated queries of its
/// enriched document).
inline PromptText build_user_prompt(std::span<const HistoryEntry> history,
                                    std::span<const std::string> last_item_queries,
                                    const UserPromptOptions& opts = {}) {
  if (history.empty()) throw InvalidArgument("user prompt needs a non-empty history");
  if (opts.history_max == 0) throw InvalidArgument("history_max must be positive");
  if (history.size() > opts.history_max) history = history.subspan(history.size() - opts.history_max);

  std::string hist;
  for (std::size_t i = 0; i + 1 < history.size(); ++i)
    hist += detail::render_history_entry(history[i], opts.review_char_budget);
  if (opts.emphasize_last) hist += std::string(kMostRecentMarker) + "\n";
  hist += detail::render_history_entry(history.back(), opts.review_char_budget);

  std::string related;
  if (opts.emphasize_last && !last_item_queries.empty()) {
    related += "**Related Queries:**\n";
    for (std::size_t i = 0; i < last_item_queries.size(); ++i)
      related += std::to_string(i + 1) + ". " + detail::one_line(last_item_queries[i]) + "\n";
  }

  std::string u;
  u += "### Task:\n";
  u += "You are an intelligent assistant tasked with generating **10 optimized search queries** "
       "to predict the **next items** a user is likely to purchase based on their chronological "
       "purchase history, item metadata, and related search queries.\n\n";
  u += "**Purchase History:** A chronological list of items the user has purchased, including "
       "item brands, categories, descriptions, associated metadata, and related search queries. "
       "For the **most recent item**, related queries are also provided to enhance search "
       "relevance.\n\n\n";
  u += "### Output Format:\n";
  u += "Your response should follow this exact format, ensuring:\n";
  u += "1. Each search query is presented on a **separate line**.\n";
  u += "2. **No newlines or additional formatting** within each query.\n";
  u += "3. The queries should be concise, specific, and optimized for accurate item retrieval.\n\n\n";
  u += "### Requirements:\n";
  u += "- Generate **10 precise search queries** based on the user's purchase history, item "
       "metadata, and related search queries.\n";
  u += "- For the **most recent item**, ensure that **related queries** are incorporated to "
       "improve relevance.\n";
  u += "- Ensure each query captures key patterns, preferences, and interests derived from the "
       "provided data.\n";
  u += "- **Highlight the unique characteristics of items** (e.g., special features, distinctive "
       "attributes) and reflect the **user's preferences and behavioral trends** in the "
       "queries.\n";
  u += "- Do **not** include explanations, introductions, or follow-up comments.\n";
  u += "- Keep each query **clear, concise, and limited to a single line**.\n\n\n";
  u += "### Input:\n";
  u += hist;
  u += related;
  u += "\n### Output:\n";
  return {std::string(kUserSystemPrompt), std::move(u)};
}

// ---------------------------------------------------------------------------
// Response parsing

/// Cleans one response line: drops list numbering, bullets, bold markers and quotes.
/// Returns nullopt for blank lines and markdown headings.
inline std::optional<std::string> clean_query_line(std::string_view line) {
  line = detail::trim(line);
  if (line.empty() || line.front() == '#') return std::nullopt;

  std::size_t digits = 0;
  while (digits < line.size() && std::isdigit(static_cast<unsigned char>(line[digits]))) ++digits;
  if (digits > 0 && digits < line.size() && (line[digits] == '.' || line[digits] == ')')) {
    line.remove_prefix(digits + 1);
  } else if (line.size() >= 2 && (line[0] == '-' || line[0] == '*') && line[1] == ' ') {
    line.remove_prefix(2);
  }
  line = detail::trim(line);

  for (bool changed = true; changed;) {
    changed = false;
    if (line.size() >= 4 && line.starts_with("**") && line.ends_with("**")) {
      line = detail::trim(line.substr(2, line.size() - 4));
      changed = true;
    }
    if (line.size() >= 2 && line.front() == '"' && line.back() == '"') {
      line = detail::trim(line.substr(1, line.size() - 2));
      changed = true;
    }
  }
  if (line.find_first_not_of("*_`\"") == std::string_view::npos) return std::nullopt;
  return std::string(line);
}

/// Splits a raw completion into at most `limit` clean queries, preserving order.
inline std::vector<std::string> parse_queries(std::string_view raw,
                                              std::size_t limit = kQueriesPerSubject) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= raw.size() && out.size() < limit) {
    std::size_t nl = raw.find('\n', pos);
    std::string_view line = raw.substr(pos, nl == std::string_view::npos ? raw.npos : nl - pos);
    if (auto q = clean_query_line(line)) out.push_back(std::move(*q));
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return out;
}

/// Parses `raw` into a QuerySet; zero usable lines is a GenerationError.
inline QuerySet make_query_set(std::string subject_id, std::string raw) {
  QuerySet qs;
  qs.subject_id = std::move(subject_id);
  qs.queries = parse_queries(raw);
  if (qs.queries.empty())
    throw GenerationError("no queries could be parsed for " + qs.subject_id, raw);
  if (qs.queries.size() < kQueriesPerSubject)
    log::warn("only " + std::to_string(qs.queries.size()) + " queries parsed for " +
              qs.subject_id);
  qs.raw_response = std::move(raw);
  return qs;
}

// ---------------------------------------------------------------------------
// Documents

/// Four-line metadata block; embedded newlines are flattened so the block height is fixed.
inline std::string metadata_block(const ItemMeta& meta) {
  std::string s;
  s += "Title: " + detail::one_line(meta.title) + "\n";
  s += "Brand: " + detail::one_line(meta.brand) + "\n";
  s += "Categories: " + detail::one_line(detail::join(meta.categories, ", ")) + "\n";
  s += "Description: " + detail::one_line(meta.description);
  return s;
}

inline constexpr std::size_t kMetadataBlockLines = 4;

namespace detail {

inline std::string with_queries(std::string head, std::span<const std::string> queries) {
  for (const auto& q : queries) {
    if (!head.empty()) head += '\n';
    head += one_line(q);
  }
  return head;
}

}  // namespace detail

inline EnrichedDocument compose_item_document(const ItemMeta& meta, const QuerySet& qs) {
  if (qs.subject_id != meta.item_id)
    throw InvalidArgument("query set for '" + qs.subject_id + "' does not belong to item '" +
                          meta.item_id + "'");
  return {meta.item_id, detail::with_queries(metadata_block(meta), qs.queries)};
}

/// Metadata-only item document (no generated queries).
inline EnrichedDocument metadata_document(const std::string& subject_id, const ItemMeta& meta) {
  return {subject_id, metadata_block(meta)};
}

/// User document: metadata of the last interacted item followed by the user's queries.
inline EnrichedDocument compose_user_document(const ItemMeta& last_meta, const QuerySet& qs) {
  return {qs.subject_id, detail::with_queries(metadata_block(last_meta), qs.queries)};
}

inline EnrichedDocument queries_only_document(const QuerySet& qs) {
  return {qs.subject_id, detail::with_queries(std::string(), qs.queries)};
}

// ---------------------------------------------------------------------------
// Persistence

inline json to_json(const QuerySet& qs) {
  return json{{"subject_id", qs.subject_id}, {"queries", qs.queries}, {"raw", qs.raw_response}};
}

inline void write_query_sets(const fs::path& path, std::span<const QuerySet> sets) {
  std::vector<json> records;
  records.reserve(sets.size());
  for (const auto& qs : sets) records.push_back(to_json(qs));
  write_jsonl(path, records);
}

inline std::vector<QuerySet> read_query_sets(const fs::path& path) {
  std::vector<QuerySet> out;
  const std::string source = path.string();
  for_each_jsonl(path, [&](const json& j, std::size_t line) {
    QuerySet qs;
    qs.subject_id = require_string(j, "subject_id", source, line);
    const json& qs_json = require_field(j, "queries", source, line);
    if (!qs_json.is_array()) throw ParseError(source, line, "field 'queries' must be an array");
    qs.queries = qs_json.get<std::vector<std::string>>();
    qs.raw_response = require_string(j, "raw", source, line);
    out.push_back(std::move(qs));
  });
  return out;
}

inline void write_documents(const fs::path& path, std::span<const EnrichedDocument> docs) {
  std::vector<json> records;
  records.reserve(docs.size());
  for (const auto& d : docs) records.push_back(json{{"subject_id", d.subject_id}, {"text", d.text}});
  write_jsonl(path, records);
}

inline std::vector<EnrichedDocument> read_documents(const fs::path& path) {
  std::vector<EnrichedDocument> out;
  const std::string source = path.string();
  for_each_jsonl(path, [&](const json& j, std::size_t line) {
    out.push_back({require_string(j, "subject_id", source, line),
                   require_string(j, "text", source, line)});
  });
  return out;
}

}  // namespace querec
