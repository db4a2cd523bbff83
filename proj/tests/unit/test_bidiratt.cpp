#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "laip/bidiratt.hpp"
#include "laip/errors.hpp"
#include "laip/gradcheck.hpp"

using namespace laip;
using namespace laip::bidiratt;
using model::AttentionHeadTrace;
using model::AttentionTrace;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t({r, c});
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

AttentionTrace random_trace(Rng& rng, std::size_t heads, std::size_t text_rows, std::size_t img_rows,
                            std::size_t head_dim) {
  AttentionTrace t;
  t.layer = 1;
  for (std::size_t h = 0; h < heads; ++h) {
    AttentionHeadTrace head;
    head.attention = row_softmax(random_matrix(rng, text_rows, img_rows, 2.0));
    head.values = random_matrix(rng, img_rows, head_dim);
    t.heads.push_back(head);
  }
  return t;
}

AttentionTrace single_head(Tensor attention, Tensor values) {
  AttentionTrace t;
  t.layer = 1;
  AttentionHeadTrace h;
  h.attention = std::move(attention);
  h.values = std::move(values);
  t.heads.push_back(h);
  return t;
}

double sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s;
}

model::ModelConfig toy_config() {
  model::ModelConfig c;
  c.d = 16;
  c.heads = 4;
  c.ffn_dim = 24;
  c.n_cross_layers = 3;
  c.bidiratt_layer = 2;
  c.proj_dim = 4;
  c.grid_rows = 2;
  c.grid_cols = 2;
  c.patch_pixels = 6;
  c.max_text_len = 10;
  c.vocab_size = 12;
  return c;
}

}  // namespace

TEST_CASE("forward_attention examples") {
  Rng rng(1);
  auto t = random_trace(rng, 4, 3, 6, 2);
  for (const auto& v : forward_attention(t, 0)) CHECK(std::abs(sum(v) - 1.0) < 1e-12);
  auto uniform = single_head(row_softmax(Tensor({2, 4})), Tensor({4, 2}));
  const auto fa = forward_attention(uniform, 0);
  for (double v : fa[0].data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  auto hand = single_head(Tensor::matrix({{0.7, 0.2, 0.1}, {0.1, 0.1, 0.8}}), Tensor({3, 2}));
  CHECK(forward_attention(hand, 0)[0] == Tensor::vector({0.7, 0.2, 0.1}));
  CHECK_THROWS_AS((void)forward_attention(AttentionTrace{}, 0), ContractError);
}

TEST_CASE("score examples") {
  const auto V = Tensor::matrix({{1, 2}, {3, 4}});
  const auto ws = Tensor::matrix({{1}, {1}});
  const double a_hat[] = {1.0, 0.0};
  // The worked example's numbers: the masked row selects patch 0, whose value row sums to 3.
  CHECK(score(a_hat, V, ws) == 3.0);
  CHECK(score(a_hat, V, Tensor({2, 1})) == 0.0);
  Rng rng(2);
  auto t = random_trace(rng, 4, 3, 5, 4);
  auto w = random_matrix(rng, 4, 1);
  auto s1 = score(t, 2, w);
  auto s2 = score(t, 2, 2.0 * w);
  for (std::size_t h = 0; h < s1.size(); ++h) CHECK(s2[h] == doctest::Approx(2.0 * s1[h]).epsilon(1e-14));
  CHECK_THROWS_AS((void)score(t, 3, w), std::out_of_range);
}

TEST_CASE("backward_attention examples") {
  CHECK(backward_attention(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{1}, {1}})) == Tensor::vector({3, 7}));
  CHECK(backward_attention(Tensor({3, 2}), Tensor::matrix({{1}, {-2}})) == Tensor::vector({0, 0, 0}));
}

TEST_CASE("closed-form backward attention equals the autodiff gradient") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto t = random_trace(rng, 4, 3, 9, 4);
    auto w = random_matrix(rng, 4, 1);
    const std::size_t mask_row = rng.below(3);
    const auto closed = backward_attention(t, w);
    for (std::size_t h = 0; h < t.heads.size(); ++h) {
      auto a_hat = ad::Var::leaf(t.heads[h].attention.row_copy(mask_row));
      auto s = ad::matmul(ad::matmul(a_hat, ad::Var::constant(t.heads[h].values)), ad::Var::constant(w));
      ad::backward(s);
      for (std::size_t j = 0; j < closed[h].size(); ++j) {
        const double g = a_hat.grad()[j];
        CHECK(std::abs(closed[h][j] - g) <= 1e-10 * std::max(std::abs(g), 1e-300) + 1e-300);
      }
    }
  }
}

TEST_CASE("bidirectional_weights examples") {
  const std::vector<Tensor> fa{Tensor::vector({0.5, 0.5})};
  CHECK(bidirectional_weights(fa, std::vector<Tensor>{Tensor::vector({1, 3})}) == Tensor::vector({0.25, 0.75}));

  const std::vector<Tensor> fa3{Tensor::vector({0.2, 0.3, 0.5}), Tensor::vector({0.4, 0.4, 0.2})};
  const std::vector<Tensor> ones{Tensor::vector({1, 1, 1}), Tensor::vector({1, 1, 1})};
  auto w = bidirectional_weights(fa3, ones);
  const auto mean_fa = Tensor::vector({0.3, 0.35, 0.35});
  CHECK(max_abs_diff(w, mean_fa) < 1e-15);

  const std::vector<Tensor> negative{Tensor::vector({-1, -2, -3}), Tensor::vector({-0.5, -1, -4})};
  CHECK(max_abs_diff(bidirectional_weights(fa3, negative), mean_fa) < 1e-15);
}

TEST_CASE("bidirectional weights are probability vectors, invariant to value scale") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    auto t = random_trace(rng, 4, 4, 1 + rng.below(20), 4);
    auto ws = random_matrix(rng, 4, 1);
    const std::size_t mask_row = rng.below(4);
    auto w = compute_weights(t, mask_row, ws).w;
    CHECK(std::abs(sum(w) - 1.0) < 1e-9);
    for (double v : w.data()) CHECK(v >= 0.0);

    const double c = 0.1 + 10.0 * rng.uniform();
    auto scaled = t;
    for (auto& h : scaled.heads) h.values *= c;
    auto ws2 = compute_weights(scaled, mask_row, ws);
    CHECK(max_abs_diff(ws2.w, w) < 1e-9);
    const auto base_ba = backward_attention(t, ws);
    const auto scaled_ba = backward_attention(scaled, ws);
    for (std::size_t h = 0; h < base_ba.size(); ++h) CHECK(max_abs_diff(scaled_ba[h], c * base_ba[h]) < 1e-9);
  }
}

TEST_CASE("compute_weights uses the selected attention row") {
  Rng rng(5);
  auto t = random_trace(rng, 2, 4, 6, 3);
  auto ws = random_matrix(rng, 3, 1);
  auto mask = compute_weights(t, 2, ws, AttentionRow::Mask);
  auto cls = compute_weights(t, 2, ws, AttentionRow::Cls);
  const auto fa_mask = forward_attention(t, 2), fa_cls = forward_attention(t, 0);
  CHECK(max_abs_diff(mask.w_fa, 0.5 * (fa_mask[0] + fa_mask[1])) < 1e-15);
  CHECK(max_abs_diff(cls.w_fa, 0.5 * (fa_cls[0] + fa_cls[1])) < 1e-15);
  // The score always comes from the masked row.
  CHECK(mask.s_per_head == cls.s_per_head);
  CHECK_THROWS_AS((void)compute_weights(t, 2, std::vector<Tensor>{ws}, AttentionRow::Mask), DimensionError);
}

TEST_CASE("weighted_pool examples") {
  Rng rng(6);
  model::EncoderOutput img{ad::Var::constant(random_matrix(rng, 6, 4))};
  Tensor onehot({6});
  onehot[3] = 1.0;
  CHECK(weighted_pool(onehot, img).value() == img.reps.value().row_copy(3));

  Tensor uniform({6}, 0.2);
  uniform[0] = 0.0;
  auto pooled = weighted_pool(uniform, img).value();
  for (std::size_t k = 0; k < 4; ++k) {
    double mean = 0.0;
    for (std::size_t j = 1; j < 6; ++j) mean += img.reps.value().at(j, k) / 5.0;
    CHECK(pooled[k] == doctest::Approx(mean).epsilon(1e-14));
  }

  Tensor same({6, 4});
  for (std::size_t j = 0; j < 6; ++j)
    for (std::size_t k = 0; k < 4; ++k) same.at(j, k) = 1.0 + k;
  model::EncoderOutput flat{ad::Var::constant(same)};
  Tensor w({6});
  for (auto& v : w.data()) v = rng.uniform();
  w *= 1.0 / sum(w);
  CHECK(max_abs_diff(weighted_pool(w, flat).value(), same.row_copy(1)) < 1e-14);
  CHECK_THROWS_AS((void)weighted_pool(Tensor({5}), img), DimensionError);
}

TEST_CASE("weighted_pool stays in the convex hull of the patch rows") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    model::EncoderOutput img{ad::Var::constant(random_matrix(rng, 8, 3))};
    Tensor w({8});
    for (auto& v : w.data()) v = rng.uniform();
    w *= 1.0 / sum(w);
    auto p = weighted_pool(w, img).value();
    for (std::size_t k = 0; k < 3; ++k) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t j = 1; j < 8; ++j) {
        lo = std::min(lo, img.reps.value().at(j, k));
        hi = std::max(hi, img.reps.value().at(j, k));
      }
      CHECK(p[k] >= lo - 1e-12);
      CHECK(p[k] <= hi + 1e-12);
    }
  }
}

TEST_CASE("coarse_similarity examples") {
  const auto I = ad::Var::constant(Tensor::identity(3));
  const auto a = ad::Var::constant(Tensor::matrix({{1, 2, 3}}));
  CHECK(coarse_similarity(a, a, I, I).value().item() == doctest::Approx(1.0).epsilon(1e-15));
  const auto b = ad::Var::constant(Tensor::matrix({{3, 0, -1}}));
  CHECK(std::abs(coarse_similarity(a, b, I, I).value().item()) < 1e-15);
  Rng rng(8);
  const auto P = ad::Var::constant(random_matrix(rng, 3, 2));
  const auto Q = ad::Var::constant(random_matrix(rng, 3, 2));
  const double base = coarse_similarity(a, b, P, Q).value().item();
  CHECK(coarse_similarity(ad::scale(a, 4.5), b, P, Q).value().item() == doctest::Approx(base).epsilon(1e-14));
  CHECK(coarse_similarity(a, ad::scale(b, 0.01), P, Q).value().item() == doctest::Approx(base).epsilon(1e-14));
  const auto zero = ad::Var::constant(Tensor({1, 3}));
  CHECK(coarse_similarity(zero, b, I, I).value().item() == 0.0);
}

TEST_CASE("biatt_loss range and gradient") {
  const auto c = toy_config();
  Rng rng(9);
  auto p = model::init_params(c, rng);
  for (int trial = 0; trial < 10; ++trial) {
    auto img = model::encode_image(random_matrix(rng, 4, 6), p, c, model::Mode::Train);
    auto ph = model::encode_text({5, text::Vocabulary::kMask, 7}, p, c, model::Mode::Train);
    auto f = model::cross_encode(ph, img, p, c, model::Mode::Train, {.layer = 2});
    const double loss = biatt_loss(img, ph, f, 2, 6, p, model::Mode::Train).loss.value().item();
    CHECK(loss >= 0.0);
    CHECK(loss <= 2.0);
  }

  // Aligned and anti-aligned projections.
  model::EncoderOutput img{ad::Var::constant(Tensor::matrix({{0, 0}, {1, 2}, {1, 2}}))};
  model::EncoderOutput same{ad::Var::constant(Tensor::matrix({{2, 4}}))};
  model::EncoderOutput opposite{ad::Var::constant(Tensor::matrix({{-1, -2}}))};
  auto q = p;
  q.proj_image = ad::Var::constant(Tensor::identity(2));
  q.proj_phrase = ad::Var::constant(Tensor::identity(2));
  model::FusionOutput fusion;
  fusion.trace = single_head(Tensor::matrix({{0.2, 0.4, 0.4}}), Tensor({3, c.head_dim()}, 1.0));
  fusion.trace->heads.resize(4, fusion.trace->heads[0]);
  fusion.trace->layer = 2;
  q.score_head = ad::Var::constant(Tensor({c.head_dim(), 1}, 1.0));
  CHECK(std::abs(biatt_loss(img, same, fusion, 0, 5, q, model::Mode::Inference).loss.value().item()) < 1e-15);
  CHECK(biatt_loss(img, opposite, fusion, 0, 5, q, model::Mode::Inference).loss.value().item() ==
        doctest::Approx(2.0).epsilon(1e-15));
  model::FusionOutput untraced;
  CHECK_THROWS_AS((void)biatt_loss(img, same, untraced, 0, 5, q, model::Mode::Inference), ContractError);

  // Gradient with respect to the phrase projection.
  auto img2 = model::encode_image(random_matrix(rng, 4, 6), p, c, model::Mode::Inference);
  auto ph2 = model::encode_text({5, text::Vocabulary::kMask, 7}, p, c, model::Mode::Inference);
  auto f2 = model::cross_encode(ph2, img2, p, c, model::Mode::Inference, {.layer = 2});
  const ScalarFn fn = [&](const ad::Var& proj) {
    auto r = p;
    r.proj_phrase = proj;
    return biatt_loss(img2, ph2, f2, 2, 6, r, model::Mode::Train).loss;
  };
  CHECK(finite_diff_check(fn, p.proj_phrase.value(), 1e-4) < 1e-6);
}

TEST_CASE("score heads") {
  const auto c = toy_config();
  Rng rng(10);
  auto p = model::init_params(c, rng);
  auto dedicated = score_heads(p, 2, 7, ScoreHead::Dedicated);
  REQUIRE(dedicated.size() == c.heads);
  for (const auto& w : dedicated) CHECK(w == p.score_head.value());

  auto tied = score_heads(p, 2, 7, ScoreHead::Tied);
  REQUIRE(tied.size() == c.heads);
  for (std::size_t h = 0; h < c.heads; ++h) {
    const auto& wo = p.cross[1].cross_attn.wo[h].value();
    REQUIRE(tied[h].shape() == Shape{c.head_dim(), 1});
    for (std::size_t i = 0; i < c.head_dim(); ++i) {
      double expect = 0.0;
      for (std::size_t k = 0; k < c.d; ++k) expect += wo.at(i, k) * p.mpm_w2.value().at(k, 7);
      CHECK(tied[h][i] == doctest::Approx(expect).epsilon(1e-14));
    }
  }
  CHECK_THROWS_AS((void)score_heads(p, 4, 7, ScoreHead::Tied), ConfigError);
  CHECK_THROWS_AS((void)score_heads(p, 2, 12, ScoreHead::Tied), std::out_of_range);
}

TEST_CASE("phrase_weights and heatmap export") {
  const auto c = toy_config();
  Rng rng(11);
  auto p = model::init_params(c, rng);
  auto patches = random_matrix(rng, 4, 6);
  auto w = phrase_weights(patches, {5, 6, 7}, 2, p, c);
  CHECK(w.w.size() == 5);
  CHECK(std::abs(sum(w.w) - 1.0) < 1e-9);
  CHECK(w.s_per_head.size() == c.heads);
  CHECK_THROWS_AS((void)phrase_weights(patches, {5, 6, 7}, 3, p, c), std::out_of_range);

  const auto dir = std::filesystem::temp_directory_path() / "laip_test_heatmap";
  std::filesystem::create_directories(dir);
  write_heatmap_csv(dir / "h.csv", w, 2, 2);
  std::ifstream csv(dir / "h.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "row,col,w,w_fa,w_ba");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 4);

  const auto px = heatmap_pixels(Tensor::vector({0.5, 0.1, 0.3, 0.2, 0.4}), 2, 2);
  CHECK(px == std::vector<unsigned char>{0, 170, 85, 255});
  CHECK(heatmap_pixels(Tensor::vector({0.2, 0.2, 0.2, 0.2, 0.2}), 2, 2) == std::vector<unsigned char>(4, 0));
  write_pgm(dir / "h.pgm", px, 2, 2);
  std::ifstream pgm(dir / "h.pgm", std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(pgm)), std::istreambuf_iterator<char>());
  CHECK(bytes == std::string("P5\n2 2\n255\n") + std::string("\x00\xaa\x55\xff", 4));
  std::filesystem::remove_all(dir);
}
