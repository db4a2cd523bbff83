#include "laip/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "laip/bidiratt.hpp"
#include "laip/gradcheck.hpp"
#include "laip/losses.hpp"
#include "laip/trainer.hpp"

namespace laip::gradcheck {

using ad::Var;
using model::Mode;

model::ModelConfig toy_config() {
  model::ModelConfig c;
  c.d = 16;
  c.heads = 4;
  c.ffn_dim = 24;
  c.n_self_layers = 1;
  c.n_cross_layers = 3;
  c.bidiratt_layer = 2;
  c.proj_dim = 4;
  c.grid_rows = 2;
  c.grid_cols = 2;
  c.patch_pixels = 6;
  c.max_text_len = 10;
  c.vocab_size = 10;
  return c;
}

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double sigma = 1.0) {
  Tensor t({r, c});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = sigma * rng.normal();
  return t;
}

std::vector<text::TokenId> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<text::TokenId> ids(n);
  for (auto& id : ids) id = text::Vocabulary::kReserved + rng.below(vocab - text::Vocabulary::kReserved);
  return ids;
}

// Every parameter untracked, so only the probed tensor records a graph.
model::Params detached(const model::Params& p) {
  model::Params d = p;
  const bool shared = p.proj_phrase.node() == p.proj_text.node();
  model::visit_params(d, [](const std::string&, Var& v) { v = v.detached(); });
  if (shared) d.proj_phrase = d.proj_text;
  return d;
}

model::FusionOutput fused_row(const Var& f, std::size_t i) {
  model::FusionOutput out;
  out.reps = ad::row(f, i);
  return out;
}

using Setter = std::function<void(model::Params&, const Var&)>;

struct Target {
  const char* name;
  std::function<Tensor(const model::Params&)> get;
  Setter set;
};

std::vector<Target> head_targets() {
  return {
      {"proj_text", [](const model::Params& p) { return p.proj_text.value(); },
       [](model::Params& p, const Var& x) { p.proj_text = x; p.proj_phrase = x; }},
      {"proj_image", [](const model::Params& p) { return p.proj_image.value(); },
       [](model::Params& p, const Var& x) { p.proj_image = x; }},
      {"itm_head", [](const model::Params& p) { return p.itm_head.value(); },
       [](model::Params& p, const Var& x) { p.itm_head = x; }},
      {"mpm.b1", [](const model::Params& p) { return p.mpm_b1.value(); },
       [](model::Params& p, const Var& x) { p.mpm_b1 = x; }},
      {"mpm.w2", [](const model::Params& p) { return p.mpm_w2.value(); },
       [](model::Params& p, const Var& x) { p.mpm_w2 = x; }},
      {"log_tau", [](const model::Params& p) { return p.log_tau.value(); },
       [](model::Params& p, const Var& x) { p.log_tau = x; }},
  };
}

model::Params toy_params(const model::ModelConfig& c, Rng& rng) {
  auto p = model::init_params(c, rng);
  // Larger head weights than the 0.02 init keep gradients well above the
  // finite-difference noise floor.
  p.itm_head.mutable_value() = random_tensor(rng, c.d, 1, 0.5);
  p.proj_image.mutable_value() = random_tensor(rng, c.d, c.proj_dim, 0.5);
  p.proj_text.mutable_value() = random_tensor(rng, c.d, c.proj_dim, 0.5);
  p.mpm_w1.mutable_value() = random_tensor(rng, c.d, c.d, 0.3);
  p.mpm_w2.mutable_value() = random_tensor(rng, c.d, c.vocab_size, 0.2);
  p.score_head.mutable_value() = random_tensor(rng, c.head_dim(), 1, 1.0);
  return p;
}

text::Phrase toy_phrase(Rng& rng, std::size_t len, std::size_t vocab) {
  text::Phrase ph;
  ph.tokens = random_tokens(rng, len, vocab);
  ph.words.assign(len, "w");
  ph.end = len;
  return ph;
}

void check_itc(std::uint64_t seed, double eps, std::vector<Entry>& out) {
  Rng rng(seed, 0x17c);
  const std::size_t B = 4, P = 6;
  Tensor img = random_tensor(rng, B, P), txt = random_tensor(rng, B, P);
  Tensor m_img = random_tensor(rng, B, P), m_txt = random_tensor(rng, B, P);
  losses::QueueState queue(16, P);
  queue.enqueue(random_tensor(rng, 5, P), random_tensor(rng, 5, P));
  Tensor log_tau = Tensor::scalar(std::log(0.2 + 0.5 * rng.uniform()));
  auto run = [&](const Var& i, const Var& t, const Var& lt) {
    losses::QueueState q = queue;
    return losses::itc_loss(i, t, m_img, m_txt, q, lt).loss;
  };
  out.push_back({"itc", "image_emb", seed, finite_diff_check(
      [&](const Var& x) { return run(x, Var::constant(txt), Var::constant(log_tau)); }, img, eps)});
  out.push_back({"itc", "text_emb", seed, finite_diff_check(
      [&](const Var& x) { return run(Var::constant(img), x, Var::constant(log_tau)); }, txt, eps)});
  out.push_back({"itc", "log_tau", seed, finite_diff_check(
      [&](const Var& x) { return run(Var::constant(img), Var::constant(txt), x); }, log_tau, eps)});
}

void check_itm(std::uint64_t seed, double eps, const model::ModelConfig& c, std::vector<Entry>& out) {
  Rng rng(seed, 0x17e);
  auto base = detached(toy_params(c, rng));
  const std::size_t n = 6;
  Tensor fused = random_tensor(rng, n, c.d);
  std::vector<double> labels{1, 1, 0, 0, 0, 1};
  auto run = [&](const Var& f, const model::Params& p) {
    std::vector<Var> logits;
    for (std::size_t i = 0; i < n; ++i) logits.push_back(model::fine_similarity(fused_row(f, i), p, Mode::Train));
    return losses::itm_loss(ad::concat_rows(logits), labels);
  };
  out.push_back({"itm", "fused_cls", seed, finite_diff_check([&](const Var& x) { return run(x, base); }, fused, eps)});
  out.push_back({"itm", "itm_head", seed, finite_diff_check(
      [&](const Var& x) {
        auto p = base;
        p.itm_head = x;
        return run(Var::constant(fused), p);
      },
      base.itm_head.value(), eps)});
}

void check_triplet(std::uint64_t seed, double eps, const model::ModelConfig& c, std::vector<Entry>& out) {
  Rng rng(seed, 0x791);
  const double delta = 0.6;
  // Scores (pos, neg_img, neg_txt) kept clear of the hinge kinks.
  for (auto dir : {losses::TripletDirection::Standard, losses::TripletDirection::Printed}) {
    const double sign = dir == losses::TripletDirection::Standard ? 1.0 : -1.0;
    Tensor x0({3, 1});
    x0[0] = 0.3 * rng.uniform();
    x0[1] = x0[0] + sign * (0.1 + 0.8 * rng.uniform() - delta);
    x0[2] = x0[0] + sign * (0.1 + 0.8 * rng.uniform() - delta);
    out.push_back({"triplet", sign > 0 ? "scores" : "scores_printed", seed,
                   finite_diff_check(
                       [&](const Var& x) {
                         return losses::fusion_triplet_loss(ad::row(x, 0), ad::row(x, 1), ad::row(x, 2), delta, dir);
                       },
                       x0, eps)});
  }
  // Through the ITM head: three fused [CLS] rows score the pairs.
  auto base = detached(toy_params(c, rng));
  Tensor fused = random_tensor(rng, 3, c.d);
  auto scores = [&](const model::Params& p, const Var& f) {
    std::vector<Var> v;
    for (std::size_t i = 0; i < 3; ++i) v.push_back(model::fine_similarity(fused_row(f, i), p, Mode::Train));
    return v;
  };
  out.push_back({"triplet", "itm_head", seed, finite_diff_check(
      [&](const Var& x) {
        auto p = base;
        p.itm_head = x;
        auto v = scores(p, Var::constant(fused));
        // A wide margin keeps both hinges active.
        return losses::fusion_triplet_loss(v[0], v[1], v[2], 100.0);
      },
      base.itm_head.value(), eps)});
}

struct ToyScene {
  model::ModelConfig config;
  model::Params params;
  model::EncoderOutput image, phrase;
  model::FusionOutput fusion;
  text::MaskedPhrase masked;
};

ToyScene toy_scene(std::uint64_t seed, std::uint64_t stream) {
  Rng rng(seed, stream);
  ToyScene s;
  s.config = toy_config();
  s.params = detached(toy_params(s.config, rng));
  Tensor patches = random_tensor(rng, s.config.num_patches(), s.config.patch_pixels);
  auto ph = toy_phrase(rng, 3, s.config.vocab_size);
  s.masked = text::mask_phrase_at(ph, rng.below(3));
  s.image = model::encode_image(patches, s.params, s.config, Mode::Inference);
  s.phrase = model::encode_text(s.masked.tokens, s.params, s.config, Mode::Inference);
  s.fusion = model::cross_encode(s.phrase, s.image, s.params, s.config, Mode::Inference,
                                 model::TraceRequest{s.config.bidiratt_layer, false});
  return s;
}

void check_biatt(std::uint64_t seed, double eps, std::vector<Entry>& out) {
  auto s = toy_scene(seed, 0xb1a);
  const std::size_t mask_row = s.masked.mask_index + 1;
  auto run = [&](const model::EncoderOutput& img, const model::EncoderOutput& ph, const model::Params& p) {
    return bidiratt::biatt_loss(img, ph, s.fusion, mask_row, s.masked.target_id, p, Mode::Train).loss;
  };
  out.push_back({"biatt", "image_reps", seed, finite_diff_check(
      [&](const Var& x) { return run({x}, s.phrase, s.params); }, s.image.reps.value(), eps)});
  out.push_back({"biatt", "phrase_reps", seed, finite_diff_check(
      [&](const Var& x) { return run(s.image, {x}, s.params); }, s.phrase.reps.value(), eps)});
  out.push_back({"biatt", "proj_image", seed, finite_diff_check(
      [&](const Var& x) {
        auto p = s.params;
        p.proj_image = x;
        return run(s.image, s.phrase, p);
      },
      s.params.proj_image.value(), eps)});
  out.push_back({"biatt", "proj_phrase", seed, finite_diff_check(
      [&](const Var& x) {
        auto p = s.params;
        p.proj_phrase = x;
        return run(s.image, s.phrase, p);
      },
      s.params.proj_phrase.value(), eps)});
}

void check_mpm(std::uint64_t seed, double eps, std::vector<Entry>& out) {
  auto s = toy_scene(seed, 0x3b3);
  for (auto pos : {losses::MpmPositions::Masked, losses::MpmPositions::All}) {
    const std::string suffix = pos == losses::MpmPositions::Masked ? "" : "_all";
    out.push_back({"mpm", "fused" + suffix, seed, finite_diff_check(
        [&](const Var& x) {
          model::FusionOutput f;
          f.reps = x;
          return losses::mpm_loss(f, s.masked, s.params, Mode::Train, pos);
        },
        s.fusion.reps.value(), eps)});
    out.push_back({"mpm", "mpm.w1" + suffix, seed, finite_diff_check(
        [&](const Var& x) {
          auto p = s.params;
          p.mpm_w1 = x;
          return losses::mpm_loss(s.fusion, s.masked, p, Mode::Train, pos);
        },
        s.params.mpm_w1.value(), eps)});
    out.push_back({"mpm", "mpm.w2" + suffix, seed, finite_diff_check(
        [&](const Var& x) {
          auto p = s.params;
          p.mpm_w2 = x;
          return losses::mpm_loss(s.fusion, s.masked, p, Mode::Train, pos);
        },
        s.params.mpm_w2.value(), eps)});
  }
}

void check_total(std::uint64_t seed, double eps, std::vector<Entry>& out) {
  Rng rng(seed, 0x707);
  const auto c = toy_config();
  auto params = toy_params(c, rng);
  train::TrainConfig tc;
  tc.neg_sampling = losses::NegativeSampling::Uniform;
  tc.queue_size = 8;
  tc.seed = seed;
  train::Trainer trainer(c, tc, detached(params));
  const model::Params base = trainer.params();

  data::Batch batch;
  const std::size_t B = 3;
  for (std::size_t i = 0; i < B; ++i) {
    batch.images.push_back(random_tensor(rng, c.num_patches(), c.patch_pixels));
    batch.texts.push_back(random_tokens(rng, 6, c.vocab_size));
    batch.identities.push_back(i);
    batch.records.push_back(i);
    std::vector<text::Phrase> phrases;
    std::vector<text::MaskedPhrase> masks;
    for (std::size_t k = 0; k < 2; ++k) {
      phrases.push_back(toy_phrase(rng, 2 + k, c.vocab_size));
      masks.push_back(text::mask_phrase_at(phrases.back(), rng.below(2 + k)));
    }
    batch.phrases.push_back(std::move(phrases));
    batch.masks.push_back(std::move(masks));
  }
  losses::QueueState queue = trainer.queues();
  queue.enqueue(random_tensor(rng, 4, c.proj_dim), random_tensor(rng, 4, c.proj_dim));
  const Rng neg_rng(seed, 0x9e9);

  for (const auto& t : head_targets()) {
    const double err = finite_diff_check(
        [&](const Var& x) {
          trainer.params() = base;
          t.set(trainer.params(), x);
          Rng r = neg_rng;
          losses::QueueState q = queue;
          return trainer.forward(batch, losses::Stage::Two, r, q).total;
        },
        t.get(base), eps);
    out.push_back({"total", t.name, seed, err});
  }
  trainer.params() = base;
}

}  // namespace

std::vector<Entry> run_suite(const SuiteOptions& o) {
  std::vector<Entry> out;
  const auto c = toy_config();
  for (std::size_t i = 0; i < o.seeds; ++i) {
    const std::uint64_t seed = o.base_seed + i;
    check_itc(seed, o.eps, out);
    check_itm(seed, o.eps, c, out);
    check_triplet(seed, o.eps, c, out);
    check_biatt(seed, o.eps, out);
    check_mpm(seed, o.eps, out);
    check_total(seed, o.eps, out);
  }
  return out;
}

std::vector<std::pair<std::string, double>> max_by_loss(const std::vector<Entry>& entries) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& e : entries) {
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& p) { return p.first == e.loss; });
    if (it == out.end())
      out.emplace_back(e.loss, e.max_rel_error);
    else
      it->second = std::max(it->second, e.max_rel_error);
  }
  return out;
}

}  // namespace laip::gradcheck
