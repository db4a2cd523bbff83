#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "laip/autodiff.hpp"
#include "laip/rng.hpp"
#include "laip/textproc.hpp"

namespace laip::model {

using ad::Var;

struct ModelConfig {
  std::size_t d = 32;
  std::size_t heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t n_self_layers = 1;
  std::size_t n_cross_layers = 6;
  // 1-based index of the cross layer whose attention feeds the bidirectional weights.
  std::size_t bidiratt_layer = 3;
  std::size_t proj_dim = 16;
  std::size_t grid_rows = 8;
  std::size_t grid_cols = 8;
  std::size_t patch_pixels = 48;
  std::size_t max_text_len = text::kMaxTextTokens;
  std::size_t vocab_size = 0;
  // Phrases use their own coarse projection instead of sharing the text one.
  bool separate_phrase_projection = false;

  std::size_t head_dim() const { return d / heads; }
  std::size_t num_patches() const { return grid_rows * grid_cols; }
  void validate() const;
};

enum class Mode { Train, Inference };

struct LayerNormWeights {
  Var gain, bias;
};

// Per-head projections; wo[h] maps head h back to width d and the head
// outputs are summed.
struct AttentionWeights {
  std::vector<Var> wq, wk, wv, wo;
  Var bo;
};

struct FeedForward {
  Var w1, b1, w2, b2;
};

struct SelfLayer {
  LayerNormWeights ln_attn;
  AttentionWeights attn;
  LayerNormWeights ln_ffn;
  FeedForward ffn;
};

struct CrossLayer {
  LayerNormWeights ln_self;
  AttentionWeights self_attn;
  LayerNormWeights ln_cross;
  AttentionWeights cross_attn;
  LayerNormWeights ln_ffn;
  FeedForward ffn;
};

struct ImageEncoder {
  Var patch_w, patch_b, cls, pos;
  std::vector<SelfLayer> layers;
  LayerNormWeights ln_out;
};

struct TextEncoder {
  Var tok_embed, pos;
  std::vector<SelfLayer> layers;
  LayerNormWeights ln_out;
};

struct Params {
  ImageEncoder image;
  TextEncoder text;
  std::vector<CrossLayer> cross;
  LayerNormWeights cross_ln_out;
  Var proj_image;   // d x proj_dim
  Var proj_text;    // d x proj_dim
  Var proj_phrase;  // same node as proj_text unless configured separately
  Var score_head;   // head_dim x 1
  Var itm_head;     // d x 1
  Var mpm_w1, mpm_b1, mpm_w2, mpm_b2;
  Var log_tau;

  double tau() const;
};

using ParamVisitor = std::function<void(const std::string& name, Var& param)>;

// Every distinct parameter tensor, in a fixed order.
void visit_params(Params& params, const ParamVisitor& visit);
// The unimodal encoders plus the image/text coarse projections: the part
// mirrored by the momentum model.
void visit_unimodal(Params& params, const ParamVisitor& visit);

Params init_params(const ModelConfig& config, Rng& rng);
// Deep copy with fresh leaves.
Params clone_params(const Params& params);
std::size_t parameter_count(const Params& params);

struct MomentumState {
  ImageEncoder image;
  TextEncoder text;
  Var proj_image;
  Var proj_text;
  double alpha = 0.995;
};

MomentumState init_momentum(const Params& live, double alpha);
void visit_momentum(MomentumState& state, const ParamVisitor& visit);
// shadow <- alpha * shadow + (1 - alpha) * live, elementwise.
void momentum_update(Params& live, MomentumState& state);

struct EncoderOutput {
  // Row 0 is the global ([CLS]) representation.
  Var reps;
  std::size_t length() const { return reps.value().rows(); }
};

struct AttentionHeadTrace {
  Tensor attention;  // (L_text+1) x (L_img+1), row-stochastic
  Tensor values;     // (L_img+1) x head_dim
  Tensor queries;    // (L_text+1) x head_dim
  Var attention_var;
  Var values_var;
};

struct AttentionTrace {
  std::size_t layer = 0;  // 1-based
  std::vector<AttentionHeadTrace> heads;
};

struct FusionOutput {
  Var reps;
  std::optional<AttentionTrace> trace;
  // Filled only when every layer was requested.
  std::vector<AttentionTrace> all_layers;
};

struct TraceRequest {
  std::optional<std::size_t> layer;
  bool all_layers = false;
};

// patches: L_I x patch_pixels, raster order over the patch grid.
EncoderOutput encode_image(const Tensor& patches, const Params& params, const ModelConfig& config, Mode mode);
EncoderOutput encode_image(const Tensor& patches, const ImageEncoder& enc, const ModelConfig& config, Mode mode);
EncoderOutput encode_text(const std::vector<text::TokenId>& ids, const Params& params, const ModelConfig& config,
                          Mode mode);
EncoderOutput encode_text(const std::vector<text::TokenId>& ids, const TextEncoder& enc, const ModelConfig& config,
                          Mode mode);
FusionOutput cross_encode(const EncoderOutput& text_out, const EncoderOutput& img_out, const Params& params,
                          const ModelConfig& config, Mode mode, TraceRequest trace = {});

// f^O W^O on the fused [CLS] row.
Var fine_similarity(const FusionOutput& fusion, const Params& params, Mode mode);
// Unnormalized coarse embedding G(row 0).
Var project_global(const EncoderOutput& out, const Var& projection, Mode mode);
// MLP over one fused row -> vocabulary logits (1 x |V|).
Var mpm_logits(const Var& fused_row, const Params& params, Mode mode);

inline Var use(const Var& param, Mode mode) { return mode == Mode::Train ? param : param.detached(); }

}  // namespace laip::model
