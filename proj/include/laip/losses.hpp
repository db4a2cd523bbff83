#pragma once

#include <span>
#include <utility>
#include <vector>

#include "laip/model.hpp"
#include "laip/rng.hpp"
#include "laip/textproc.hpp"

namespace laip::losses {

using ad::Var;

// Two ring buffers of momentum embeddings sharing one write cursor.
class QueueState {
 public:
  QueueState(std::size_t capacity, std::size_t dim);

  // Rows are L2-normalized before they are stored; oldest entries are overwritten.
  void enqueue(const Tensor& images, const Tensor& texts);

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t filled() const { return filled_; }
  std::size_t cursor() const { return cursor_; }
  // The filled slots, in slot order (filled x dim); empty tensor when nothing is queued.
  Tensor images() const;
  Tensor texts() const;
  std::span<const double> image_slot(std::size_t slot) const { return q_img_.row(slot); }
  std::span<const double> text_slot(std::size_t slot) const { return q_txt_.row(slot); }

 private:
  std::size_t capacity_, dim_;
  Tensor q_img_, q_txt_;
  std::size_t cursor_ = 0;
  std::size_t filled_ = 0;
};

struct ItcResult {
  Var loss;
  Tensor p_i2t;  // B x (B + filled)
  Tensor p_t2i;
};

// Image-text contrastive loss. Live embeddings (B x proj_dim) are compared
// against the batch momentum embeddings followed by the queued ones; the
// positive for row i is candidate i. Embeddings are normalized here. The
// momentum embeddings are enqueued afterwards.
ItcResult itc_loss(const Var& image_emb, const Var& text_emb, const Tensor& momentum_image,
                   const Tensor& momentum_text, QueueState& queues, const Var& log_tau);
ItcResult itc_loss(const Var& image_emb, const Var& text_emb, const Tensor& momentum_image,
                   const Tensor& momentum_text, QueueState& queues, double tau);

// Binary cross-entropy of sigmoid(sim_fine) against the pair labels, averaged.
Var itm_loss(const Var& logits, std::span<const double> labels);

enum class NegativeSampling { Hard, Uniform };

struct Negatives {
  std::vector<std::size_t> text_for_image;  // negative text index for each image
  std::vector<std::size_t> image_for_text;  // negative image index for each text
};

// similarity(i, j) scores image i against text j. In hard mode a negative is
// drawn with probability softmax over the non-matching entries of the row
// (texts for an image) or column (images for a text); -inf entries are never drawn.
Negatives sample_negatives(const Tensor& similarity, Rng& rng, NegativeSampling mode = NegativeSampling::Hard);

enum class TripletDirection { Standard, Printed };

// Standard: [neg_img - pos + delta]_+^2 + [neg_txt - pos + delta]_+^2.
// Printed:  [pos - neg_img + delta]_+^2 + [pos - neg_txt + delta]_+^2.
Var fusion_triplet_loss(const Var& pos, const Var& neg_img, const Var& neg_txt, double delta,
                        TripletDirection direction = TripletDirection::Standard);

enum class MpmPositions { Masked, All };

// Cross-entropy of the MPM classifier over the fused phrase rows against the
// original tokens. Masked: the masked position only. All: summed over every
// phrase position.
Var mpm_loss(const model::FusionOutput& fusion, const text::MaskedPhrase& masked, const model::Params& params,
             model::Mode mode, MpmPositions positions = MpmPositions::Masked);

enum class Stage { One, Two };

struct GlobalTerms {
  double itc = 0.0, itm = 0.0, tri = 0.0;
};

struct LossBreakdown {
  double itc = 0.0, itm = 0.0, tri = 0.0, biatt_sum = 0.0, mpm_sum = 0.0, total = 0.0;
  Tensor p_i2t, p_t2i;
};

// total = itc + itm + tri + sum over phrases of (biatt + mpm); stage one keeps
// only itc and itm.
LossBreakdown total_loss(const GlobalTerms& global, std::span<const std::pair<double, double>> per_phrase,
                         Stage stage = Stage::Two);

}  // namespace laip::losses
