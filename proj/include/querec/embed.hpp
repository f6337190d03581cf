// SPDX-License-Identifier: Apache-2.0
#pragma once

// Document embedding providers: HTTP (OpenAI-style /embeddings), precomputed file lookup,
// and a deterministic n-gram hashing mock.

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "querec/error.hpp"
#include "querec/hash.hpp"
#include "querec/llm_client.hpp"
#include "querec/matrix_io.hpp"
#include "querec/querygen.hpp"

namespace querec {

using EmbeddingVector = std::vector<float>;

/// Unit-normalizes `v`. The norm is accumulated in double, in index order.
inline EmbeddingVector l2_normalize(std::span<const float> v) {
  double sq = 0.0;
  for (float x : v) sq += static_cast<double>(x) * static_cast<double>(x);
  const double norm = std::sqrt(sq);
  if (!(norm > 0.0)) throw InvalidArgument("cannot normalize a zero vector");
  if (!std::isfinite(norm)) throw InvalidArgument("cannot normalize a non-finite vector");
  EmbeddingVector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(v[i]) / norm);
  return out;
}

enum class EmbeddingKind { Http, File, Mock };

struct EmbeddingProviderConfig {
  EmbeddingKind kind = EmbeddingKind::Mock;
  std::string endpoint_url;
  std::string model_name;
  std::string api_key_env_var = "QUEREC_EMBED_API_KEY";
  fs::path path;  // file provider: matrix stem
  std::size_t dimension = 64;
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;
  double timeout_s = 120.0;
  int max_retries = 3;
};

class Embedder {
public:
  virtual ~Embedder() = default;
  virtual std::vector<EmbeddingVector> embed(std::span<const EnrichedDocument> docs) = 0;
  virtual std::size_t dimension() const = 0;
};

/// Signed feature hashing of lowercase byte trigrams into `dimension` buckets, then unit
/// normalization. Texts sharing vocabulary land close together.
class MockEmbedder final : public Embedder {
public:
  MockEmbedder(std::size_t dimension, std::uint64_t seed)
      : dimension_(dimension), basis_(fnv1a64("querec-embed:" + std::to_string(seed))) {
    if (dimension_ == 0) throw InvalidArgument("embedding dimension must be at least 1");
  }

  EmbeddingVector embed_text(std::string_view text) const {
    std::string lower(text);
    for (char& c : lower)
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    std::vector<double> acc(dimension_, 0.0);
    auto add = [&](std::string_view gram) {
      const std::uint64_t h = fnv1a64(gram, basis_);
      acc[h % dimension_] += ((h >> 32) & 1U) ? -1.0 : 1.0;
    };
    if (lower.size() >= 3) {
      for (std::size_t i = 0; i + 3 <= lower.size(); ++i) add(std::string_view(lower).substr(i, 3));
    } else if (!lower.empty()) {
      add(lower);
    }
    double sq = 0.0;
    for (double a : acc) sq += a * a;
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0)) throw InvalidArgument("mock embedding of this text is the zero vector");
    EmbeddingVector out(dimension_);
    for (std::size_t i = 0; i < dimension_; ++i) out[i] = static_cast<float>(acc[i] / norm);
    return out;
  }

  std::vector<EmbeddingVector> embed(std::span<const EnrichedDocument> docs) override {
    std::vector<EmbeddingVector> out;
    out.reserve(docs.size());
    for (const auto& d : docs) out.push_back(embed_text(d.text));
    return out;
  }

  std::size_t dimension() const override { return dimension_; }

private:
  std::size_t dimension_;
  std::uint64_t basis_;
};

/// Serves precomputed vectors keyed by subject id.
class FileEmbedder final : public Embedder {
public:
  explicit FileEmbedder(const fs::path& stem) : matrix_(load_matrix(stem)) {
    for (std::size_t r = 0; r < matrix_.rows(); ++r)
      if (!row_of_.emplace(matrix_.row_ids[r], r).second)
        throw ParseError(stem.string(), 0, "duplicate id " + matrix_.row_ids[r]);
  }

  std::vector<EmbeddingVector> embed(std::span<const EnrichedDocument> docs) override {
    std::vector<EmbeddingVector> out;
    out.reserve(docs.size());
    for (const auto& d : docs) {
      auto it = row_of_.find(d.subject_id);
      if (it == row_of_.end())
        throw Error("no precomputed embedding for '" + d.subject_id + "'");
      auto row = matrix_.row(it->second);
      out.emplace_back(row.begin(), row.end());
    }
    return out;
  }

  std::size_t dimension() const override { return matrix_.dimension; }

private:
  DenseMatrix matrix_;
  std::unordered_map<std::string, std::size_t> row_of_;
};

/// OpenAI-compatible embeddings endpoint: {model, input:[...]} -> {data:[{embedding:[...]}]}.
class HttpEmbedder final : public Embedder {
public:
  explicit HttpEmbedder(EmbeddingProviderConfig cfg)
      : cfg_(std::move(cfg)), api_key_(detail::api_key_from_env(cfg_.api_key_env_var)) {
    if (cfg_.batch_size == 0) throw InvalidArgument("batch_size must be positive");
  }

  std::vector<EmbeddingVector> embed(std::span<const EnrichedDocument> docs) override {
    std::vector<EmbeddingVector> out;
    out.reserve(docs.size());
    for (std::size_t start = 0; start < docs.size(); start += cfg_.batch_size) {
      auto batch = docs.subspan(start, std::min(cfg_.batch_size, docs.size() - start));
      json input = json::array();
      for (const auto& d : batch) input.push_back(d.text);
      json body{{"model", cfg_.model_name}, {"input", std::move(input)}};
      json res = detail::post_json_with_retry(cfg_.endpoint_url, body, api_key_, cfg_.timeout_s,
                                              cfg_.max_retries, 1.0);
      const json* data = res.contains("data") ? &res["data"] : nullptr;
      if (!data || !data->is_array() || data->size() != batch.size())
        throw Error("embedding response does not contain one vector per input");
      for (const auto& row : *data) {
        EmbeddingVector v = row.at("embedding").get<EmbeddingVector>();
        if (v.size() != cfg_.dimension)
          throw Error("embedding dimension " + std::to_string(v.size()) + " != configured " +
                      std::to_string(cfg_.dimension));
        out.push_back(std::move(v));
      }
    }
    return out;
  }

  std::size_t dimension() const override { return cfg_.dimension; }

private:
  EmbeddingProviderConfig cfg_;
  std::string api_key_;
};

inline std::unique_ptr<Embedder> make_embedder(const EmbeddingProviderConfig& cfg) {
  switch (cfg.kind) {
    case EmbeddingKind::Mock:
      return std::make_unique<MockEmbedder>(cfg.dimension, cfg.seed);
    case EmbeddingKind::File:
      return std::make_unique<FileEmbedder>(cfg.path);
    case EmbeddingKind::Http:
      if (cfg.dimension == 0) throw InvalidArgument("embedding dimension must be at least 1");
      return std::make_unique<HttpEmbedder>(cfg);
  }
  throw InvalidArgument("unknown embedding provider");
}

/// Embeds documents into a matrix whose row ids are the subject ids, checking dimensions.
inline DenseMatrix embed_documents(std::span<const EnrichedDocument> docs, Embedder& embedder) {
  DenseMatrix m;
  m.dimension = embedder.dimension();
  auto vectors = embedder.embed(docs);
  if (vectors.size() != docs.size()) throw Error("embedder returned the wrong number of vectors");
  m.values.reserve(docs.size() * m.dimension);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (vectors[i].size() != m.dimension)
      throw Error("dimension mismatch for '" + docs[i].subject_id + "'");
    for (float x : vectors[i])
      if (!std::isfinite(x)) throw Error("non-finite embedding for '" + docs[i].subject_id + "'");
    m.row_ids.push_back(docs[i].subject_id);
    m.values.insert(m.values.end(), vectors[i].begin(), vectors[i].end());
  }
  return m;
}

}  // namespace querec
