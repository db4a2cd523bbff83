#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "laip/bidiratt.hpp"
#include "laip/data.hpp"
#include "laip/model.hpp"

// Candidate selection: coarse cosine ranking over the whole gallery, then
// cross-encoder reranking of the top-k.
namespace laip::retrieval {

struct Gallery {
  std::vector<model::EncoderOutput> outputs;  // image encoder outputs, reused for reranking
  Tensor embeddings;                          // n x proj_dim, L2-normalized
  std::size_t size() const { return outputs.size(); }
};

// Encodes every image once (parallel over the gallery, inference mode).
Gallery embed_gallery(const std::vector<Tensor>& images, const model::Params& params,
                      const model::ModelConfig& config);

// Cosine of the query's coarse embedding with every gallery embedding.
std::vector<double> coarse_rank(const std::vector<text::TokenId>& query, const Gallery& gallery,
                                const model::Params& params, const model::ModelConfig& config);

// sim_fine of the query against the listed gallery items.
std::vector<double> fine_scores(const std::vector<text::TokenId>& query, const Gallery& gallery,
                                const std::vector<std::size_t>& items, const model::Params& params,
                                const model::ModelConfig& config);

struct RetrievalResult {
  std::size_t query = 0;
  std::vector<std::size_t> ranking;          // gallery indices, best first
  std::vector<double> coarse;                // per gallery index
  std::vector<std::optional<double>> fine;   // set for the reranked items only
};

// Gallery indices by coarse score descending, ties by index.
std::vector<std::size_t> coarse_order(const std::vector<double>& coarse);
// Top-k of the coarse order sorted by (fine desc, coarse desc, index asc); the
// rest keeps the coarse order. fine must hold a value for every top-k item.
std::vector<std::size_t> two_stage_order(const std::vector<double>& coarse,
                                         const std::vector<std::optional<double>>& fine, std::size_t k);
// Every item sorted by (fine desc, coarse desc, index asc).
std::vector<std::size_t> exhaustive_fine_order(const std::vector<double>& coarse, const std::vector<double>& fine);

// Throws ConfigError unless 1 <= k <= gallery size.
RetrievalResult rerank_topk(std::size_t query_index, const std::vector<text::TokenId>& query, const Gallery& gallery,
                            const std::vector<double>& coarse, std::size_t k, const model::Params& params,
                            const model::ModelConfig& config);

struct QueryStats {
  std::size_t query = 0;
  std::size_t first_relevant_rank = 0;  // 1-based
  double average_precision = 0.0;
};

struct Metrics {
  std::map<std::size_t, double> r_at;  // k in {1, 5, 10}
  double map_score = 0.0;
  std::size_t n_queries = 0;  // queries with at least one relevant item
  std::vector<QueryStats> per_query;

  double r1() const { return r_at.at(1); }
  double r5() const { return r_at.at(5); }
  double r10() const { return r_at.at(10); }
};

// rankings[q] is a permutation of gallery indices; relevant[q][g] marks the
// ground truth. Queries without any relevant item are skipped with a warning.
Metrics metrics_from_rankings(const std::vector<std::vector<std::size_t>>& rankings,
                              const std::vector<std::vector<bool>>& relevant);
// Ranks each row of a query x gallery score matrix (descending, ties by index).
Metrics metrics_from_scores(const Tensor& scores, const std::vector<std::vector<bool>>& relevant);

struct Evaluation {
  Metrics metrics;
  std::vector<RetrievalResult> results;
  std::size_t k = 0;  // effective rerank depth
  std::size_t n_gallery = 0;
};

// Relevance is identity equality. k is clamped to the gallery size.
Evaluation evaluate(const std::vector<std::vector<text::TokenId>>& queries,
                    const std::vector<std::uint64_t>& query_identities, const std::vector<Tensor>& gallery_images,
                    const std::vector<std::uint64_t>& gallery_identities, std::size_t k_rerank,
                    const model::Params& params, const model::ModelConfig& config);

// {r1, r5, r10, map, k, n_queries, n_gallery, seed}
void write_report_json(const std::filesystem::path& path, const Evaluation& eval, std::uint64_t seed);
// query,first_relevant_rank,average_precision
void write_per_query_csv(const std::filesystem::path& path, const Evaluation& eval);

// Tokens of the caption phrase naming the record's top garment, or empty.
std::vector<text::TokenId> top_garment_phrase(const data::PersonRecord& record, const text::Lexicon& lexicon,
                                              const text::Vocabulary& vocab);

struct LocalizationHit {
  std::uint64_t record = 0;
  std::size_t argmax = 0;  // raster patch index of the largest bidirectional weight ([CLS] excluded)
  bool inside = false;
};

struct Localization {
  std::vector<LocalizationHit> hits;
  double rate() const;
};

// For each listed record, masks the last word of its top-garment phrase and
// checks whether argmax w falls inside the top-garment region.
Localization top_garment_localization(const data::Dataset& dataset, const std::vector<std::uint64_t>& records,
                                      const text::Lexicon& lexicon, const text::Vocabulary& vocab,
                                      const model::Params& params, const model::ModelConfig& config,
                                      const bidiratt::BidirAttOptions& options = {}, std::size_t layer = 0);

}  // namespace laip::retrieval
