#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "laip/errors.hpp"
#include "laip/retrieval.hpp"

using namespace laip;
using namespace laip::retrieval;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.n_cross_layers = 2;
  c.bidiratt_layer = 1;
  c.grid_rows = 3;
  c.grid_cols = 3;
  c.patch_pixels = 6;
  c.max_text_len = 10;
  c.vocab_size = 30;
  return c;
}

std::vector<Tensor> random_images(Rng& rng, const model::ModelConfig& c, std::size_t n) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor t({c.num_patches(), c.patch_pixels});
    for (auto& v : t.data()) v = rng.uniform();
    out.push_back(std::move(t));
  }
  return out;
}

// Brute-force oracle: position of an item is 1 + the number of items scored
// strictly higher, or equal with a smaller index.
std::size_t position(std::span<const double> s, std::size_t g) {
  std::size_t p = 1;
  for (std::size_t j = 0; j < s.size(); ++j) p += s[j] > s[g] || (s[j] == s[g] && j < g);
  return p;
}

}  // namespace

TEST_CASE("metric examples") {
  std::vector<std::vector<bool>> rel{{true, false, false}, {false, true, false}};
  auto perfect = metrics_from_rankings({{0, 1, 2}, {1, 0, 2}}, rel);
  CHECK(perfect.r1() == 1.0);
  CHECK(perfect.map_score == 1.0);

  std::vector<std::vector<bool>> rel6(2, std::vector<bool>(6, false));
  rel6[0][3] = rel6[1][4] = true;
  auto second = metrics_from_rankings({{0, 3, 1, 2, 4, 5}, {5, 4, 0, 1, 2, 3}}, rel6);
  CHECK(second.r1() == 0.0);
  CHECK(second.r5() == 1.0);
  CHECK(second.map_score == doctest::Approx(0.5));
  CHECK(second.per_query[0].first_relevant_rank == 2);

  // Two relevant items at ranks 1 and 3: AP = (1 + 2/3) / 2.
  auto two = metrics_from_rankings({{0, 1, 2}}, {{true, false, true}});
  CHECK(two.map_score == doctest::Approx(5.0 / 6.0));

  auto skipped = metrics_from_rankings({{0, 1}, {1, 0}}, {{false, false}, {true, false}});
  CHECK(skipped.n_queries == 1);
  CHECK(skipped.r1() == 0.0);
  CHECK_THROWS_AS(metrics_from_rankings({{0}}, {}), DimensionError);
}

TEST_CASE("metrics match a brute-force oracle on random score matrices") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nq = 1 + rng.below(6), ng = 2 + rng.below(14);
    Tensor scores({nq, ng});
    for (auto& v : scores.data()) v = std::round(rng.uniform() * 8.0) / 8.0;  // force ties
    std::vector<std::vector<bool>> rel(nq, std::vector<bool>(ng));
    for (std::size_t q = 0; q < nq; ++q) {
      rel[q][rng.below(ng)] = true;
      for (std::size_t g = 0; g < ng; ++g)
        if (rng.uniform() < 0.2) rel[q][g] = true;
    }
    const auto m = metrics_from_scores(scores, rel);
    std::map<std::size_t, double> r_at{{1, 0.0}, {5, 0.0}, {10, 0.0}};
    double map = 0.0;
    for (std::size_t q = 0; q < nq; ++q) {
      const auto s = scores.row(q);
      std::size_t best = ng + 1, n_rel = 0;
      double ap = 0.0;
      for (std::size_t g = 0; g < ng; ++g) {
        if (!rel[q][g]) continue;
        ++n_rel;
        const auto p = position(s, g);
        best = std::min(best, p);
        std::size_t above = 0;
        for (std::size_t h = 0; h < ng; ++h) above += rel[q][h] && position(s, h) <= p;
        ap += static_cast<double>(above) / static_cast<double>(p);
      }
      for (auto& [k, v] : r_at) v += best <= k;
      map += ap / static_cast<double>(n_rel);
    }
    for (auto& [k, v] : r_at) CHECK(m.r_at.at(k) == doctest::Approx(v / static_cast<double>(nq)));
    CHECK(m.map_score == doctest::Approx(map / static_cast<double>(nq)));
    CHECK(m.r1() <= m.r5());
    CHECK(m.r5() <= m.r10());
    CHECK(m.map_score <= 1.0);
  }
}

TEST_CASE("ordering helpers and tie-breaks") {
  CHECK(coarse_order({0.1, 0.5, 0.5, 0.2}) == std::vector<std::size_t>{1, 2, 3, 0});
  const std::vector<double> coarse{0.9, 0.8, 0.7, 0.6};
  std::vector<std::optional<double>> fine{0.1, 0.3, 0.3, std::nullopt};
  // Equal fine scores fall back to the coarse score.
  CHECK(two_stage_order(coarse, fine, 3) == std::vector<std::size_t>{1, 2, 0, 3});
  CHECK(two_stage_order(coarse, {0.1, std::nullopt, std::nullopt, std::nullopt}, 1) ==
        std::vector<std::size_t>{0, 1, 2, 3});
  CHECK(exhaustive_fine_order({0.5, 0.5, 0.1}, {1.0, 1.0, 2.0}) == std::vector<std::size_t>{2, 0, 1});
  CHECK_THROWS((void)two_stage_order(coarse, {0.1, std::nullopt, 0.2, 0.3}, 2));
}

TEST_CASE("two-stage ranking with k = gallery size equals exhaustive fine ranking") {
  const auto c = small_config();
  Rng rng(11);
  auto p = model::init_params(c, rng);
  const auto images = random_images(rng, c, 7);
  const auto gallery = embed_gallery(images, p, c);
  CHECK(gallery.embeddings.shape() == Shape{7, c.proj_dim});
  for (std::size_t g = 0; g < gallery.size(); ++g) {
    double n = 0.0;
    for (double v : gallery.embeddings.row(g)) n += v * v;
    CHECK(std::abs(n - 1.0) < 1e-12);
  }

  std::vector<std::size_t> all(gallery.size());
  std::iota(all.begin(), all.end(), 0);
  for (const std::vector<text::TokenId>& q : {std::vector<text::TokenId>{5, 6, 7}, {8, 9}, {10, 11, 12, 13}}) {
    const auto coarse = coarse_rank(q, gallery, p, c);
    const auto full = rerank_topk(0, q, gallery, coarse, gallery.size(), p, c);
    const auto fine = fine_scores(q, gallery, all, p, c);
    CHECK(full.ranking == exhaustive_fine_order(coarse, fine));
    for (std::size_t g = 0; g < gallery.size(); ++g) CHECK(full.fine[g].value() == fine[g]);

    const auto one = rerank_topk(0, q, gallery, coarse, 1, p, c);
    CHECK(one.ranking == coarse_order(coarse));
    CHECK(std::count_if(one.fine.begin(), one.fine.end(), [](auto& f) { return f.has_value(); }) == 1);

    const auto three = rerank_topk(0, q, gallery, coarse, 3, p, c);
    auto sorted = three.ranking;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == all);
    const auto co = coarse_order(coarse);
    CHECK(std::vector<std::size_t>(three.ranking.begin() + 3, three.ranking.end()) ==
          std::vector<std::size_t>(co.begin() + 3, co.end()));

    CHECK_THROWS_AS(rerank_topk(0, q, gallery, coarse, 0, p, c), ConfigError);
    CHECK_THROWS_AS(rerank_topk(0, q, gallery, coarse, 8, p, c), ConfigError);
  }
}

TEST_CASE("evaluate clamps k and allocates no gradients") {
  const auto c = small_config();
  Rng rng(12);
  auto p = model::init_params(c, rng);
  const auto images = random_images(rng, c, 5);
  const std::vector<std::vector<text::TokenId>> queries{{5, 6}, {7, 8, 9}};
  const auto before = ad::grad_allocations();
  const auto ev = evaluate(queries, {0, 3}, images, {0, 1, 2, 3, 4}, 32, p, c);
  CHECK(ad::grad_allocations() == before);
  CHECK(ev.k == 5);
  CHECK(ev.n_gallery == 5);
  CHECK(ev.metrics.n_queries == 2);
  REQUIRE(ev.results.size() == 2);
  for (const auto& r : ev.results)
    CHECK(r.ranking == exhaustive_fine_order(r.coarse, [&] {
            std::vector<double> f;
            for (const auto& x : r.fine) f.push_back(x.value());
            return f;
          }()));
  CHECK_THROWS_AS(evaluate(queries, {0}, images, {0, 1, 2, 3, 4}, 32, p, c), DimensionError);
}
