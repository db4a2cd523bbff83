#include "laip/losses.hpp"

#include <cmath>
#include <limits>

#include "laip/errors.hpp"

namespace laip::losses {

QueueState::QueueState(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), q_img_({capacity, dim}), q_txt_({capacity, dim}) {}

void QueueState::enqueue(const Tensor& images, const Tensor& texts) {
  if (images.rows() != texts.rows() || images.cols() != dim_ || texts.cols() != dim_)
    throw DimensionError("enqueue: expected matching n x " + std::to_string(dim_) + " blocks, got " +
                         shape_str(images.shape()) + " and " + shape_str(texts.shape()));
  for (std::size_t r = 0; r < images.rows(); ++r) {
    const double ni = l2_norm(images.row(r));
    const double nt = l2_norm(texts.row(r));
    for (std::size_t c = 0; c < dim_; ++c) {
      q_img_.at(cursor_, c) = ni > 0.0 ? images.at(r, c) / ni : 0.0;
      q_txt_.at(cursor_, c) = nt > 0.0 ? texts.at(r, c) / nt : 0.0;
    }
    cursor_ = (cursor_ + 1) % capacity_;
    filled_ = std::min(filled_ + 1, capacity_);
  }
}

Tensor QueueState::images() const {
  if (filled_ == 0) return {};
  return Tensor({filled_, dim_}, std::vector<double>(q_img_.data().begin(),
                                                      q_img_.data().begin() + static_cast<std::ptrdiff_t>(filled_ * dim_)));
}

Tensor QueueState::texts() const {
  if (filled_ == 0) return {};
  return Tensor({filled_, dim_}, std::vector<double>(q_txt_.data().begin(),
                                                      q_txt_.data().begin() + static_cast<std::ptrdiff_t>(filled_ * dim_)));
}

namespace {

Tensor normalized_rows(const Tensor& t) {
  Tensor out = t;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const double n = l2_norm(out.row(r));
    if (n > 0.0)
      for (auto& v : out.row(r)) v /= n;
  }
  return out;
}

Tensor stack(const Tensor& batch, const Tensor& queued) {
  if (queued.empty()) return batch;
  std::vector<double> data(batch.data().begin(), batch.data().end());
  data.insert(data.end(), queued.data().begin(), queued.data().end());
  return Tensor({batch.rows() + queued.rows(), batch.cols()}, std::move(data));
}

ItcResult itc_impl(const Var& image_emb, const Var& text_emb, const Tensor& momentum_image,
                   const Tensor& momentum_text, QueueState& queues, const Var& inv_tau) {
  const std::size_t b = image_emb.value().rows();
  if (text_emb.value().rows() != b || momentum_image.rows() != b || momentum_text.rows() != b)
    throw DimensionError("itc_loss: batch sizes differ");
  const Tensor mi = normalized_rows(momentum_image.reshaped({b, momentum_image.cols()}));
  const Tensor mt = normalized_rows(momentum_text.reshaped({b, momentum_text.cols()}));
  Var text_candidates = Var::constant(stack(mt, queues.texts()));
  Var image_candidates = Var::constant(stack(mi, queues.images()));

  Var li2t = ad::scale_by(ad::matmul_nt(ad::normalize_rows(image_emb), text_candidates), inv_tau);
  Var lt2i = ad::scale_by(ad::matmul_nt(ad::normalize_rows(text_emb), image_candidates), inv_tau);
  std::vector<std::size_t> targets(b);
  for (std::size_t i = 0; i < b; ++i) targets[i] = i;

  ItcResult r;
  r.loss = ad::scale(ad::add(ad::softmax_cross_entropy(li2t, targets), ad::softmax_cross_entropy(lt2i, targets)), 0.5);
  r.p_i2t = row_softmax(li2t.value());
  r.p_t2i = row_softmax(lt2i.value());
  queues.enqueue(mi, mt);
  return r;
}

}  // namespace

ItcResult itc_loss(const Var& image_emb, const Var& text_emb, const Tensor& momentum_image,
                   const Tensor& momentum_text, QueueState& queues, const Var& log_tau) {
  return itc_impl(image_emb, text_emb, momentum_image, momentum_text, queues, ad::exp(ad::scale(log_tau, -1.0)));
}

ItcResult itc_loss(const Var& image_emb, const Var& text_emb, const Tensor& momentum_image,
                   const Tensor& momentum_text, QueueState& queues, double tau) {
  if (!(tau > 0.0)) throw ContractError("itc_loss: temperature must be positive");
  return itc_impl(image_emb, text_emb, momentum_image, momentum_text, queues, Var::constant(Tensor::scalar(1.0 / tau)));
}

Var itm_loss(const Var& logits, std::span<const double> labels) { return ad::bce_with_logits(logits, labels); }

namespace {

std::size_t draw(std::vector<double> scores, std::size_t self, Rng& rng, NegativeSampling mode) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  scores[self] = kNegInf;
  std::vector<double> weights(scores.size(), 0.0);
  double mx = kNegInf;
  for (double s : scores) mx = std::max(mx, s);
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] == kNegInf) continue;
    weights[j] = mode == NegativeSampling::Uniform ? 1.0 : std::exp(scores[j] - mx);
  }
  return rng.categorical(weights);
}

}  // namespace

Negatives sample_negatives(const Tensor& similarity, Rng& rng, NegativeSampling mode) {
  const std::size_t b = similarity.rows();
  if (similarity.rank() != 2 || similarity.cols() != b)
    throw DimensionError("sample_negatives: similarity must be square, got " + shape_str(similarity.shape()));
  Negatives neg;
  if (b < 2) {
    log_warning("batch of one has no in-batch negatives; matching uses the positive pair only");
    return neg;
  }
  for (std::size_t i = 0; i < b; ++i) {
    auto row = similarity.row(i);
    neg.text_for_image.push_back(draw({row.begin(), row.end()}, i, rng, mode));
  }
  for (std::size_t j = 0; j < b; ++j) {
    std::vector<double> col(b);
    for (std::size_t i = 0; i < b; ++i) col[i] = similarity.at(i, j);
    neg.image_for_text.push_back(draw(std::move(col), j, rng, mode));
  }
  return neg;
}

Var fusion_triplet_loss(const Var& pos, const Var& neg_img, const Var& neg_txt, double delta,
                        TripletDirection direction) {
  if (delta < 0.0) throw ContractError("fusion_triplet_loss: margin must be non-negative");
  auto hinge = [&](const Var& neg) {
    Var diff = direction == TripletDirection::Standard ? ad::sub(neg, pos) : ad::sub(pos, neg);
    return ad::sum(ad::square(ad::relu(ad::add_scalar(diff, delta))));
  };
  return ad::add(hinge(neg_img), hinge(neg_txt));
}

Var mpm_loss(const model::FusionOutput& fusion, const text::MaskedPhrase& masked, const model::Params& params,
             model::Mode mode, MpmPositions positions) {
  const std::size_t len = masked.tokens.size();
  if (masked.mask_index >= len || fusion.reps.value().rows() != len + 1)
    throw std::out_of_range("mpm_loss: mask index " + std::to_string(masked.mask_index) +
                            " outside the fused phrase of " + std::to_string(fusion.reps.value().rows()) + " rows");
  if (positions == MpmPositions::Masked) {
    Var logits = model::mpm_logits(ad::row(fusion.reps, masked.mask_index + 1), params, mode);
    return ad::cross_entropy_logits(logits, masked.target_id);
  }
  std::vector<std::size_t> targets = masked.tokens;
  targets[masked.mask_index] = masked.target_id;
  Var logits = model::mpm_logits(ad::rows(fusion.reps, 1, len + 1), params, mode);
  // softmax_cross_entropy averages over rows; the loss sums over positions.
  return ad::scale(ad::softmax_cross_entropy(logits, targets), static_cast<double>(len));
}

LossBreakdown total_loss(const GlobalTerms& global, std::span<const std::pair<double, double>> per_phrase,
                         Stage stage) {
  LossBreakdown b;
  b.itc = global.itc;
  b.itm = global.itm;
  if (stage == Stage::Two) {
    b.tri = global.tri;
    for (const auto& [biatt, mpm] : per_phrase) {
      b.biatt_sum += biatt;
      b.mpm_sum += mpm;
    }
  }
  b.total = b.itc + b.itm + b.tri + b.biatt_sum + b.mpm_sum;
  return b;
}

}  // namespace laip::losses
