#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "laip/model.hpp"

// Bidirectional attention-weighted local alignment.
//
// For one cross-attention layer and head h, with attention A_h over image
// rows and projected values V_h:
//   forward attention   w^Fa_h = a row of A_h
//   prediction score    s_h    = (Â_h V_h) W^s, Â_h the masked token's row
//   backward attention  w^Ba_h = ds_h / dÂ_h = V_h W^s   (closed form)
// The head-averaged forward attention times the head-averaged rectified
// backward attention, normalized to sum to one, weights the image patches.
namespace laip::bidiratt {

using ad::Var;

// Row of A used as the forward attention.
enum class AttentionRow { Cls, Mask };
// Which phrase encoding supplies the phrase-side embedding.
enum class PhraseSource { Masked, Clean };

// Dedicated: the learned W^s. Tied: per head h, W^s_h = W^o_h w2[:, target],
// the output projection of the traced head times the MPM classifier's
// output column for the masked token.
enum class ScoreHead { Dedicated, Tied };

struct BidirAttOptions {
  AttentionRow row = AttentionRow::Mask;
  PhraseSource phrase = PhraseSource::Masked;
  ScoreHead score_head = ScoreHead::Dedicated;
};

struct BidirAttWeights {
  Tensor w_fa;  // head mean of forward attention, L_I+1
  Tensor w_ba;  // head mean of rectified backward attention, L_I+1
  Tensor w;     // normalized bidirectional weights, L_I+1
  std::vector<double> s_per_head;
};

std::vector<Tensor> forward_attention(const model::AttentionTrace& trace, std::size_t row);

double score(std::span<const double> attention_row, const Tensor& values, const Tensor& score_head);
std::vector<double> score(const model::AttentionTrace& trace, std::size_t mask_row, const Tensor& score_head);

// sum_k V[j][k] * W^s[k] for every image row j.
Tensor backward_attention(const Tensor& values, const Tensor& score_head);
std::vector<Tensor> backward_attention(const model::AttentionTrace& trace, const Tensor& score_head);

Tensor bidirectional_weights(std::span<const Tensor> fa, std::span<const Tensor> ba);

BidirAttWeights compute_weights(const model::AttentionTrace& trace, std::size_t mask_row, const Tensor& score_head,
                                AttentionRow row = AttentionRow::Mask);
// One score head per attention head.
BidirAttWeights compute_weights(const model::AttentionTrace& trace, std::size_t mask_row,
                                const std::vector<Tensor>& score_heads, AttentionRow row = AttentionRow::Mask);

// The W^s used for each head of the traced layer (1-based).
std::vector<Tensor> score_heads(const model::Params& params, std::size_t layer, text::TokenId target_id,
                                ScoreHead mode);

// sum_{j>=1} w_j f^I_j with w renormalized over the patch rows; w is a constant.
Var weighted_pool(const Tensor& w, const model::EncoderOutput& image);

// cos(a G_a, b G_b)
Var coarse_similarity(const Var& a, const Var& b, const Var& proj_a, const Var& proj_b);

struct BiattResult {
  Var loss;
  BidirAttWeights weights;
};

// 1 - cos(G_I(pooled image), G_P(f^P)). fusion must carry the traced layer;
// mask_row is the masked token's row in the fused sequence and target_id the
// token it hides.
BiattResult biatt_loss(const model::EncoderOutput& image, const model::EncoderOutput& phrase,
                       const model::FusionOutput& fusion, std::size_t mask_row, text::TokenId target_id,
                       const model::Params& params, model::Mode mode, const BidirAttOptions& options = {});

// Weights for one (image, phrase) pair at inference: the token at mask_index
// is replaced by [MASK] and the attention of `layer` (default: the configured
// bidirectional-attention layer) is traced.
BidirAttWeights phrase_weights(const Tensor& patches, const std::vector<text::TokenId>& phrase_tokens,
                               std::size_t mask_index, const model::Params& params, const model::ModelConfig& config,
                               const BidirAttOptions& options = {}, std::size_t layer = 0);

// Heatmap export: CSV rows "row,col,w,w_fa,w_ba" for every patch, and an
// 8-bit binary PGM (P5) of w over the patch grid, min-max scaled to 0..255.
void write_heatmap_csv(const std::filesystem::path& path, const BidirAttWeights& weights, std::size_t grid_rows,
                       std::size_t grid_cols);
std::vector<unsigned char> heatmap_pixels(const Tensor& w, std::size_t grid_rows, std::size_t grid_cols);
void write_pgm(const std::filesystem::path& path, std::span<const unsigned char> pixels, std::size_t width,
               std::size_t height);

}  // namespace laip::bidiratt
