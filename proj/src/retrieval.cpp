#include "laip/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "laip/errors.hpp"

namespace laip::retrieval {

using model::Mode;

namespace {

// Runs body(i) for i in [0, n) in parallel and rethrows the first exception.
template <typename F>
void parallel_for(std::size_t n, F&& body) {
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
#pragma omp critical(laip_retrieval_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

void normalize_row(std::span<double> row) {
  double n = 0.0;
  for (double v : row) n += v * v;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& v : row) v /= n;
}

}  // namespace

Gallery embed_gallery(const std::vector<Tensor>& images, const model::Params& params,
                      const model::ModelConfig& config) {
  Gallery g;
  g.outputs.resize(images.size());
  g.embeddings = Tensor({images.size(), config.proj_dim});
  parallel_for(images.size(), [&](std::size_t i) {
    g.outputs[i] = model::encode_image(images[i], params, config, Mode::Inference);
    Tensor e = model::project_global(g.outputs[i], params.proj_image, Mode::Inference).value();
    auto row = g.embeddings.row(i);
    std::copy(e.data().begin(), e.data().end(), row.begin());
    normalize_row(row);
  });
  return g;
}

std::vector<double> coarse_rank(const std::vector<text::TokenId>& query, const Gallery& gallery,
                                const model::Params& params, const model::ModelConfig& config) {
  if (gallery.size() == 0) throw ContractError("coarse_rank: empty gallery");
  auto out = model::encode_text(query, params, config, Mode::Inference);
  Tensor q = model::project_global(out, params.proj_text, Mode::Inference).value();
  normalize_row(q.row(0));
  std::vector<double> scores(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    double s = 0.0;
    auto row = gallery.embeddings.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * q[c];
    scores[i] = std::clamp(s, -1.0, 1.0);
  }
  return scores;
}

std::vector<double> fine_scores(const std::vector<text::TokenId>& query, const Gallery& gallery,
                                const std::vector<std::size_t>& items, const model::Params& params,
                                const model::ModelConfig& config) {
  auto text_out = model::encode_text(query, params, config, Mode::Inference);
  std::vector<double> out(items.size());
  parallel_for(items.size(), [&](std::size_t j) {
    auto f = model::cross_encode(text_out, gallery.outputs.at(items[j]), params, config, Mode::Inference);
    out[j] = model::fine_similarity(f, params, Mode::Inference).value().item();
  });
  return out;
}

std::vector<std::size_t> coarse_order(const std::vector<double>& coarse) {
  std::vector<std::size_t> order(coarse.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return coarse[a] > coarse[b]; });
  return order;
}

namespace {

bool fine_before(double fa, double fb, double ca, double cb, std::size_t a, std::size_t b) {
  if (fa != fb) return fa > fb;
  if (ca != cb) return ca > cb;
  return a < b;
}

}  // namespace

std::vector<std::size_t> two_stage_order(const std::vector<double>& coarse,
                                         const std::vector<std::optional<double>>& fine, std::size_t k) {
  auto order = coarse_order(coarse);
  k = std::min(k, order.size());
  for (std::size_t i = 0; i < k; ++i)
    if (!fine.at(order[i])) throw ContractError("two_stage_order: missing fine score for a top-k item");
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), [&](std::size_t a, std::size_t b) {
    return fine_before(*fine[a], *fine[b], coarse[a], coarse[b], a, b);
  });
  return order;
}

std::vector<std::size_t> exhaustive_fine_order(const std::vector<double>& coarse, const std::vector<double>& fine) {
  std::vector<std::size_t> order(coarse.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return fine_before(fine[a], fine[b], coarse[a], coarse[b], a, b);
  });
  return order;
}

RetrievalResult rerank_topk(std::size_t query_index, const std::vector<text::TokenId>& query, const Gallery& gallery,
                            const std::vector<double>& coarse, std::size_t k, const model::Params& params,
                            const model::ModelConfig& config) {
  if (k < 1 || k > gallery.size())
    throw ConfigError("rerank_topk: k = " + std::to_string(k) + " outside [1, " + std::to_string(gallery.size()) +
                      "]");
  if (coarse.size() != gallery.size()) throw DimensionError("rerank_topk: coarse scores do not match the gallery");
  RetrievalResult r;
  r.query = query_index;
  r.coarse = coarse;
  r.fine.assign(gallery.size(), std::nullopt);
  auto order = coarse_order(coarse);
  std::vector<std::size_t> top(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  auto f = fine_scores(query, gallery, top, params, config);
  for (std::size_t j = 0; j < k; ++j) r.fine[top[j]] = f[j];
  r.ranking = two_stage_order(coarse, r.fine, k);
  return r;
}

Metrics metrics_from_rankings(const std::vector<std::vector<std::size_t>>& rankings,
                              const std::vector<std::vector<bool>>& relevant) {
  if (rankings.size() != relevant.size()) throw DimensionError("metrics: rankings and relevance differ in length");
  Metrics m;
  const std::size_t ks[] = {1, 5, 10};
  std::map<std::size_t, std::size_t> hits;
  double ap_sum = 0.0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& rank = rankings[q];
    const auto& rel = relevant[q];
    const auto n_rel = static_cast<std::size_t>(std::count(rel.begin(), rel.end(), true));
    if (n_rel == 0) {
      log_warning("query " + std::to_string(q) + " has no relevant gallery item; excluded");
      continue;
    }
    QueryStats st;
    st.query = q;
    std::size_t found = 0;
    double precision_sum = 0.0;
    for (std::size_t pos = 0; pos < rank.size(); ++pos) {
      if (!rel.at(rank[pos])) continue;
      ++found;
      if (found == 1) st.first_relevant_rank = pos + 1;
      precision_sum += static_cast<double>(found) / static_cast<double>(pos + 1);
    }
    st.average_precision = precision_sum / static_cast<double>(n_rel);
    for (std::size_t k : ks)
      if (st.first_relevant_rank <= k) ++hits[k];
    ap_sum += st.average_precision;
    m.per_query.push_back(st);
  }
  m.n_queries = m.per_query.size();
  const double n = static_cast<double>(m.n_queries);
  for (std::size_t k : ks) m.r_at[k] = m.n_queries ? static_cast<double>(hits[k]) / n : 0.0;
  m.map_score = m.n_queries ? ap_sum / n : 0.0;
  return m;
}

Metrics metrics_from_scores(const Tensor& scores, const std::vector<std::vector<bool>>& relevant) {
  std::vector<std::vector<std::size_t>> rankings;
  for (std::size_t q = 0; q < scores.rows(); ++q) {
    auto row = scores.row(q);
    rankings.push_back(coarse_order(std::vector<double>(row.begin(), row.end())));
  }
  return metrics_from_rankings(rankings, relevant);
}

Evaluation evaluate(const std::vector<std::vector<text::TokenId>>& queries,
                    const std::vector<std::uint64_t>& query_identities, const std::vector<Tensor>& gallery_images,
                    const std::vector<std::uint64_t>& gallery_identities, std::size_t k_rerank,
                    const model::Params& params, const model::ModelConfig& config) {
  if (queries.size() != query_identities.size() || gallery_images.size() != gallery_identities.size())
    throw DimensionError("evaluate: identity lists do not match the inputs");
  if (gallery_images.empty()) throw ContractError("evaluate: empty gallery");
  Evaluation ev;
  ev.n_gallery = gallery_images.size();
  ev.k = std::clamp<std::size_t>(k_rerank, 1, ev.n_gallery);
  auto gallery = embed_gallery(gallery_images, params, config);
  std::vector<std::vector<std::size_t>> rankings;
  std::vector<std::vector<bool>> relevant;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    auto coarse = coarse_rank(queries[q], gallery, params, config);
    ev.results.push_back(rerank_topk(q, queries[q], gallery, coarse, ev.k, params, config));
    rankings.push_back(ev.results.back().ranking);
    std::vector<bool> rel(ev.n_gallery);
    for (std::size_t g = 0; g < ev.n_gallery; ++g) rel[g] = gallery_identities[g] == query_identities[q];
    relevant.push_back(std::move(rel));
  }
  ev.metrics = metrics_from_rankings(rankings, relevant);
  return ev;
}

void write_report_json(const std::filesystem::path& path, const Evaluation& ev, std::uint64_t seed) {
  nlohmann::ordered_json j;
  j["r1"] = ev.metrics.r1();
  j["r5"] = ev.metrics.r5();
  j["r10"] = ev.metrics.r10();
  j["map"] = ev.metrics.map_score;
  j["k"] = ev.k;
  j["n_queries"] = ev.metrics.n_queries;
  j["n_gallery"] = ev.n_gallery;
  j["seed"] = seed;
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_per_query_csv(const std::filesystem::path& path, const Evaluation& ev) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  out << "query,first_relevant_rank,average_precision\n";
  for (const auto& q : ev.metrics.per_query)
    out << q.query << ',' << q.first_relevant_rank << ',' << q.average_precision << '\n';
}

std::vector<text::TokenId> top_garment_phrase(const data::PersonRecord& record, const text::Lexicon& lexicon,
                                              const text::Vocabulary& vocab) {
  const auto garment = record.attribute(data::kTopType);
  for (const auto& p : text::extract_phrases(record.caption, lexicon, vocab))
    if (std::find(p.words.begin(), p.words.end(), garment) != p.words.end()) return p.tokens;
  return {};
}

double Localization::rate() const {
  if (hits.empty()) return 0.0;
  const auto n = std::count_if(hits.begin(), hits.end(), [](const LocalizationHit& h) { return h.inside; });
  return static_cast<double>(n) / static_cast<double>(hits.size());
}

Localization top_garment_localization(const data::Dataset& dataset, const std::vector<std::uint64_t>& records,
                                      const text::Lexicon& lexicon, const text::Vocabulary& vocab,
                                      const model::Params& params, const model::ModelConfig& config,
                                      const bidiratt::BidirAttOptions& options, std::size_t layer) {
  const auto region = data::slot_region(data::kTopType);
  Localization out;
  out.hits.resize(records.size());
  parallel_for(records.size(), [&](std::size_t i) {
    const auto& rec = dataset.records.at(records[i]);
    const auto tokens = top_garment_phrase(rec, lexicon, vocab);
    if (tokens.empty()) throw FormatError("record " + std::to_string(records[i]) + " has no top-garment phrase");
    const auto w = bidiratt::phrase_weights(rec.patches(), tokens, tokens.size() - 1, params, config, options, layer);
    // Entry 0 is the image [CLS] token; the argmax is taken over patches.
    const auto v = w.w.data().subspan(1);
    const auto best = static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    out.hits[i] = {records[i], best, region.contains(best / config.grid_cols, best % config.grid_cols)};
  });
  return out;
}

}  // namespace laip::retrieval
