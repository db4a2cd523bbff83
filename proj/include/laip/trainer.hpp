#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "laip/bidiratt.hpp"
#include "laip/data.hpp"
#include "laip/losses.hpp"
#include "laip/model.hpp"

namespace laip::train {

struct TrainConfig {
  std::size_t stage1_epochs = 30;
  std::size_t stage2_epochs = 15;
  double base_lr = 1e-3;
  double warmup_lr = 1e-6;
  double warmup_fraction = 0.1;
  std::size_t batch_size = 4;
  double delta = 0.6;
  double alpha = 0.995;
  std::size_t queue_size = 256;
  std::size_t k_rerank = 32;
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  // 0 disables clipping.
  double max_grad_norm = 0.0;

  bidiratt::AttentionRow biatt_row = bidiratt::AttentionRow::Mask;
  bidiratt::PhraseSource biatt_phrase = bidiratt::PhraseSource::Masked;
  bidiratt::ScoreHead score_head = bidiratt::ScoreHead::Dedicated;
  losses::MpmPositions mpm_positions = losses::MpmPositions::Masked;
  losses::TripletDirection triplet_direction = losses::TripletDirection::Standard;
  losses::NegativeSampling neg_sampling = losses::NegativeSampling::Hard;

  // Stage-two ablation switches.
  bool use_triplet = true;
  bool use_biatt = true;
  bool use_mpm = true;

  void validate() const;
  // The published full-scale schedule (learning rates for a pretrained start).
  static TrainConfig paper_scale();
};

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct Moments {
  Tensor m, v;
};

struct OptimState {
  std::vector<Moments> moments;  // parallel to visit_params order
  std::size_t step = 0;
  AdamWHyper hyper;
};

// One decoupled-weight-decay Adam update of a single tensor; `step` is the
// 1-based step index used for bias correction.
void adamw_update(Tensor& param, const Tensor& grad, Moments& moments, std::size_t step, double lr,
                  double weight_decay, const AdamWHyper& hyper = {});

// Updates every live parameter from its gradient slot. Throws NumericalError
// naming the parameter when a gradient is not finite.
void adamw_step(model::Params& params, OptimState& state, double lr, double weight_decay);

// Whether weight decay applies to the named parameter (not to biases, layer
// norm gains or the temperature).
bool decays(const std::string& name);

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr, std::size_t warmup_steps,
                 double warmup_lr);

struct LogRow {
  std::size_t step = 0;
  int stage = 1;
  double lr = 0.0;
  losses::LossBreakdown losses;
};

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows);

struct TrainHooks {
  // Every cross-attention trace produced during training (all layers when
  // trace_all_layers is set, otherwise the bidirectional-attention layer).
  std::function<void(const model::AttentionTrace&)> on_cross_attention;
  std::function<void(const bidiratt::BidirAttWeights&)> on_weights;
  std::function<void(const LogRow&)> on_step;
  bool trace_all_layers = false;
};

struct StepGraph {
  ad::Var total;
  losses::LossBreakdown breakdown;
};

class Trainer {
 public:
  Trainer(model::ModelConfig model_config, TrainConfig config, model::Params params);

  // Builds the loss graph for one batch. Negative sampling draws from `rng`
  // and the momentum embeddings are pushed into `queues`.
  StepGraph forward(const data::Batch& batch, losses::Stage stage, Rng& rng, losses::QueueState& queues,
                    const TrainHooks& hooks = {}) const;

  // forward + backward + AdamW + momentum update.
  LogRow step(const data::Batch& batch, losses::Stage stage, double lr, const TrainHooks& hooks = {});

  void zero_grad();

  const model::ModelConfig& model_config() const { return model_config_; }
  const TrainConfig& config() const { return config_; }
  model::Params& params() { return params_; }
  model::MomentumState& momentum() { return momentum_; }
  losses::QueueState& queues() { return queues_; }
  OptimState& optim() { return optim_; }
  Rng& rng() { return rng_; }

 private:
  model::ModelConfig model_config_;
  TrainConfig config_;
  model::Params params_;
  model::MomentumState momentum_;
  losses::QueueState queues_;
  OptimState optim_;
  Rng rng_;
  std::size_t global_step_ = 0;
};

struct TrainResult {
  model::Params params;
  model::MomentumState momentum;
  std::vector<LogRow> log;
};

// Two-stage schedule: stage one optimizes ITC + ITM, stage two the full
// objective. With an output directory, writes stage1/ and final/ checkpoints
// and train_log.csv.
TrainResult train(const model::ModelConfig& model_config, const TrainConfig& config, const data::Dataset& dataset,
                  const text::Lexicon& lexicon, const text::Vocabulary& vocab, const TrainHooks& hooks = {},
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Model config for the synthetic corpus with the given vocabulary.
model::ModelConfig desk_model_config(const text::Vocabulary& vocab);

}  // namespace laip::train
