#include "laip/trainer.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "laip/checkpoint.hpp"
#include "laip/errors.hpp"

namespace laip::train {

using ad::Var;
using model::Mode;

void TrainConfig::validate() const {
  if (stage1_epochs == 0 && stage2_epochs == 0) throw ConfigError("at least one training epoch is required");
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (!(warmup_lr > 0.0)) throw ConfigError("warmup_lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(delta >= 0.0)) throw ConfigError("delta must be nonnegative");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0, 1)");
  if (queue_size == 0) throw ConfigError("queue_size must be positive");
  if (k_rerank == 0) throw ConfigError("k_rerank must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("max_grad_norm must be nonnegative");
}

TrainConfig TrainConfig::paper_scale() {
  TrainConfig c;
  c.stage1_epochs = 30;
  c.stage2_epochs = 15;
  c.base_lr = 1e-5;
  c.warmup_lr = 1e-6;
  c.batch_size = 20;
  c.queue_size = 65536;
  c.k_rerank = 128;
  c.weight_decay = 0.02;
  return c;
}

void adamw_update(Tensor& param, const Tensor& grad, Moments& mo, std::size_t step, double lr, double weight_decay,
                  const AdamWHyper& h) {
  if (grad.shape() != param.shape()) throw DimensionError("adamw_update: gradient shape does not match parameter");
  if (mo.m.shape() != param.shape()) {
    mo.m = Tensor::zeros_like(param);
    mo.v = Tensor::zeros_like(param);
  }
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    param[i] -= lr * weight_decay * param[i];
    mo.m[i] = h.beta1 * mo.m[i] + (1.0 - h.beta1) * grad[i];
    mo.v[i] = h.beta2 * mo.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
    const double mhat = mo.m[i] / bc1;
    const double vhat = mo.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + h.eps);
  }
}

bool decays(const std::string& name) {
  if (name == "log_tau") return false;
  const auto dot = name.rfind('.');
  const std::string last = dot == std::string::npos ? name : name.substr(dot + 1);
  return !(last == "gain" || last == "bias" || last == "b1" || last == "b2" || last == "bo" || last == "patch_b");
}

void adamw_step(model::Params& params, OptimState& state, double lr, double weight_decay) {
  std::vector<std::pair<std::string, Var*>> all;
  model::visit_params(params, [&](const std::string& name, Var& v) { all.emplace_back(name, &v); });
  for (const auto& [name, v] : all)
    if (!v->grad().all_finite()) throw NumericalError("non-finite gradient in parameter '" + name + "'");
  if (state.moments.empty()) state.moments.resize(all.size());
  if (state.moments.size() != all.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
  ++state.step;
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto& [name, v] = all[i];
    adamw_update(v->mutable_value(), v->grad(), state.moments[i], state.step, lr, decays(name) ? weight_decay : 0.0,
                 state.hyper);
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, std::size_t warmup_steps,
                 double warmup_lr) {
  if (step < warmup_steps)
    return warmup_lr + (base_lr - warmup_lr) * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (step >= total_steps) return 0.0;
  const double span = static_cast<double>(total_steps - warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) / span;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  out << "step,lr,itc,itm,tri,biatt,mpm,total\n";
  for (const auto& r : rows)
    out << r.step << ',' << r.lr << ',' << r.losses.itc << ',' << r.losses.itm << ',' << r.losses.tri << ','
        << r.losses.biatt_sum << ',' << r.losses.mpm_sum << ',' << r.losses.total << '\n';
}

Trainer::Trainer(model::ModelConfig model_config, TrainConfig config, model::Params params)
    : model_config_(std::move(model_config)),
      config_(config),
      params_(std::move(params)),
      queues_(config.queue_size, model_config_.proj_dim),
      rng_(config.seed, 0x5a17ULL) {
  model_config_.validate();
  config_.validate();
  momentum_ = model::init_momentum(params_, config_.alpha);
}

namespace {

void report_traces(const model::FusionOutput& f, const TrainHooks& hooks) {
  if (!hooks.on_cross_attention) return;
  if (!f.all_layers.empty()) {
    for (const auto& t : f.all_layers) hooks.on_cross_attention(t);
  } else if (f.trace) {
    hooks.on_cross_attention(*f.trace);
  }
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  Tensor out({rows.size(), rows.front().size()});
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < rows[i].size(); ++c) out.at(i, c) = rows[i][c];
  return out;
}

Tensor normalized(const Tensor& x) {
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double n = 0.0;
    for (double v : row) n += v * v;
    n = std::sqrt(n);
    if (n > 0.0)
      for (double& v : row) v /= n;
  }
  return out;
}

std::string describe(const losses::LossBreakdown& b) {
  std::ostringstream s;
  s << "itc=" << b.itc << " itm=" << b.itm << " tri=" << b.tri << " biatt=" << b.biatt_sum << " mpm=" << b.mpm_sum;
  return s.str();
}

}  // namespace

StepGraph Trainer::forward(const data::Batch& batch, losses::Stage stage, Rng& rng, losses::QueueState& queues,
                           const TrainHooks& hooks) const {
  const std::size_t B = batch.images.size();
  if (B == 0 || batch.texts.size() != B) throw ContractError("trainer: malformed batch");
  const auto& mc = model_config_;
  const auto& p = params_;
  const bool full = stage == losses::Stage::Two;
  model::TraceRequest trace_req{mc.bidiratt_layer, hooks.trace_all_layers};
  model::TraceRequest global_req{};
  if (hooks.on_cross_attention) global_req = trace_req;

  std::vector<model::EncoderOutput> img(B), txt(B);
  std::vector<Var> img_g(B), txt_g(B);
  std::vector<Tensor> m_img(B), m_txt(B);
  for (std::size_t i = 0; i < B; ++i) {
    img[i] = model::encode_image(batch.images[i], p, mc, Mode::Train);
    txt[i] = model::encode_text(batch.texts[i], p, mc, Mode::Train);
    img_g[i] = model::project_global(img[i], p.proj_image, Mode::Train);
    txt_g[i] = model::project_global(txt[i], p.proj_text, Mode::Train);
    auto mi = model::encode_image(batch.images[i], momentum_.image, mc, Mode::Inference);
    auto mt = model::encode_text(batch.texts[i], momentum_.text, mc, Mode::Inference);
    m_img[i] = model::project_global(mi, momentum_.proj_image, Mode::Inference).value();
    m_txt[i] = model::project_global(mt, momentum_.proj_text, Mode::Inference).value();
  }
  Var img_emb = ad::concat_rows(img_g);
  Var txt_emb = ad::concat_rows(txt_g);

  StepGraph g;
  losses::GlobalTerms global;
  auto itc = losses::itc_loss(img_emb, txt_emb, stack_rows(m_img), stack_rows(m_txt), queues, p.log_tau);
  global.itc = itc.loss.value().item();
  g.breakdown.p_i2t = itc.p_i2t;
  g.breakdown.p_t2i = itc.p_t2i;
  Var total = itc.loss;

  // Positive pairs and, when the batch allows, one hard negative per image and per text.
  std::vector<Var> pos(B), neg_txt, neg_img;
  for (std::size_t i = 0; i < B; ++i) {
    auto f = model::cross_encode(txt[i], img[i], p, mc, Mode::Train, global_req);
    report_traces(f, hooks);
    pos[i] = model::fine_similarity(f, p, Mode::Train);
  }
  std::vector<Var> logits = pos;
  std::vector<double> labels(B, 1.0);
  if (B >= 2) {
    Tensor sim = matmul_nt(normalized(img_emb.value()), normalized(txt_emb.value()));
    sim *= 1.0 / p.tau();
    auto negs = losses::sample_negatives(sim, rng, config_.neg_sampling);
    neg_txt.resize(B);
    neg_img.resize(B);
    for (std::size_t i = 0; i < B; ++i) {
      auto ft = model::cross_encode(txt[negs.text_for_image[i]], img[i], p, mc, Mode::Train, global_req);
      report_traces(ft, hooks);
      neg_txt[i] = model::fine_similarity(ft, p, Mode::Train);
      auto fi = model::cross_encode(txt[i], img[negs.image_for_text[i]], p, mc, Mode::Train, global_req);
      report_traces(fi, hooks);
      neg_img[i] = model::fine_similarity(fi, p, Mode::Train);
    }
    logits.insert(logits.end(), neg_txt.begin(), neg_txt.end());
    logits.insert(logits.end(), neg_img.begin(), neg_img.end());
    labels.resize(3 * B, 0.0);
  }
  Var itm = losses::itm_loss(ad::concat_rows(logits), labels);
  global.itm = itm.value().item();
  total = ad::add(total, itm);

  std::vector<std::pair<double, double>> per_phrase;
  if (full) {
    const double inv_b = 1.0 / static_cast<double>(B);
    if (config_.use_triplet && B >= 2) {
      std::vector<Var> tri(B);
      for (std::size_t i = 0; i < B; ++i)
        tri[i] = losses::fusion_triplet_loss(pos[i], neg_img[i], neg_txt[i], config_.delta, config_.triplet_direction);
      Var t = ad::mean(ad::concat_rows(tri));
      global.tri = t.value().item();
      total = ad::add(total, t);
    }
    if (config_.use_biatt || config_.use_mpm) {
      const bidiratt::BidirAttOptions opts{config_.biatt_row, config_.biatt_phrase, config_.score_head};
      for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t k = 0; k < batch.masks[i].size(); ++k) {
          const auto& masked = batch.masks[i][k];
          auto ph = model::encode_text(masked.tokens, p, mc, Mode::Train);
          auto f = model::cross_encode(ph, img[i], p, mc, Mode::Train, trace_req);
          report_traces(f, hooks);
          double b_val = 0.0, m_val = 0.0;
          if (config_.use_biatt) {
            model::EncoderOutput src = ph;
            if (config_.biatt_phrase == bidiratt::PhraseSource::Clean)
              src = model::encode_text(batch.phrases[i][k].tokens, p, mc, Mode::Train);
            auto r = bidiratt::biatt_loss(img[i], src, f, masked.mask_index + 1, masked.target_id, p, Mode::Train, opts);
            if (hooks.on_weights) hooks.on_weights(r.weights);
            Var l = ad::scale(r.loss, inv_b);
            b_val = l.value().item();
            total = ad::add(total, l);
          }
          if (config_.use_mpm) {
            Var l = ad::scale(losses::mpm_loss(f, masked, p, Mode::Train, config_.mpm_positions), inv_b);
            m_val = l.value().item();
            total = ad::add(total, l);
          }
          per_phrase.emplace_back(b_val, m_val);
        }
      }
    }
  }
  auto b = losses::total_loss(global, per_phrase, stage);
  b.p_i2t = std::move(g.breakdown.p_i2t);
  b.p_t2i = std::move(g.breakdown.p_t2i);
  g.breakdown = std::move(b);
  g.total = total;
  return g;
}

void Trainer::zero_grad() {
  model::visit_params(params_, [](const std::string&, Var& v) { v.zero_grad(); });
}

LogRow Trainer::step(const data::Batch& batch, losses::Stage stage, double lr, const TrainHooks& hooks) {
  ++global_step_;
  zero_grad();
  StepGraph g;
  try {
    g = forward(batch, stage, rng_, queues_, hooks);
  } catch (const NumericalError& e) {
    throw NumericalError("step " + std::to_string(global_step_) + ": " + e.what());
  }
  if (!std::isfinite(g.breakdown.total))
    throw NumericalError("step " + std::to_string(global_step_) + ": non-finite loss (" + describe(g.breakdown) + ")");
  ad::backward(g.total);
  if (config_.max_grad_norm > 0.0) {
    double sq = 0.0;
    model::visit_params(params_, [&](const std::string&, Var& v) {
      for (std::size_t i = 0; i < v.grad().size(); ++i) sq += v.grad()[i] * v.grad()[i];
    });
    const double norm = std::sqrt(sq);
    if (norm > config_.max_grad_norm) {
      const double s = config_.max_grad_norm / norm;
      model::visit_params(params_, [&](const std::string&, Var& v) { v.node()->grad *= s; });
    }
  }
  try {
    adamw_step(params_, optim_, lr, config_.weight_decay);
  } catch (const NumericalError& e) {
    throw NumericalError("step " + std::to_string(global_step_) + ": " + e.what() + " (" + describe(g.breakdown) + ")");
  }
  model::momentum_update(params_, momentum_);
  LogRow row;
  row.step = global_step_;
  row.stage = stage == losses::Stage::One ? 1 : 2;
  row.lr = lr;
  row.losses = std::move(g.breakdown);
  row.losses.p_i2t = Tensor();
  row.losses.p_t2i = Tensor();
  return row;
}

model::ModelConfig desk_model_config(const text::Vocabulary& vocab) {
  model::ModelConfig c;
  c.grid_rows = data::kGridRows;
  c.grid_cols = data::kGridCols;
  c.patch_pixels = data::kPatchPixels;
  c.vocab_size = vocab.size();
  return c;
}

TrainResult train(const model::ModelConfig& model_config, const TrainConfig& config, const data::Dataset& dataset,
                  const text::Lexicon& lexicon, const text::Vocabulary& vocab, const TrainHooks& hooks,
                  const std::optional<std::filesystem::path>& out_dir) {
  config.validate();
  model_config.validate();
  Rng init_rng(config.seed, 0x1417ULL);
  Rng batch_rng(config.seed, 0xba7cULL);
  Trainer trainer(model_config, config, model::init_params(model_config, init_rng));
  TrainResult result;
  if (out_dir) std::filesystem::create_directories(*out_dir);

  const losses::Stage stages[] = {losses::Stage::One, losses::Stage::Two};
  const std::size_t epochs[] = {config.stage1_epochs, config.stage2_epochs};
  const char* names[] = {"stage1", "final"};
  for (int s = 0; s < 2; ++s) {
    if (epochs[s] == 0) continue;
    std::vector<std::vector<data::Batch>> plan;
    std::size_t total_steps = 0;
    for (std::size_t e = 0; e < epochs[s]; ++e) {
      plan.push_back(data::make_batches(dataset, dataset.train, config.batch_size, batch_rng, lexicon, vocab));
      total_steps += plan.back().size();
    }
    const auto warmup = static_cast<std::size_t>(std::floor(config.warmup_fraction * static_cast<double>(total_steps)));
    std::size_t k = 0;
    for (const auto& epoch : plan)
      for (const auto& batch : epoch) {
        const double lr = cosine_lr(k++, total_steps, config.base_lr, warmup, config.warmup_lr);
        LogRow row = trainer.step(batch, stages[s], lr, hooks);
        if (hooks.on_step) hooks.on_step(row);
        result.log.push_back(std::move(row));
      }
    if (out_dir) {
      model::save_checkpoint(*out_dir / names[s], model_config, trainer.params(), trainer.momentum());
      write_log_csv(*out_dir / "train_log.csv", result.log);
    }
  }
  result.params = trainer.params();
  result.momentum = trainer.momentum();
  return result;
}

}  // namespace laip::train
