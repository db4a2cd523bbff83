#include "laip/bidiratt.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "laip/errors.hpp"

namespace laip::bidiratt {

namespace {

void require_trace(const model::AttentionTrace& trace) {
  if (trace.heads.empty()) throw ContractError("bidirectional attention needs a captured attention trace");
}

}  // namespace

std::vector<Tensor> forward_attention(const model::AttentionTrace& trace, std::size_t row) {
  require_trace(trace);
  std::vector<Tensor> out;
  for (const auto& h : trace.heads) {
    if (row >= h.attention.rows())
      throw std::out_of_range("forward_attention: row " + std::to_string(row) + " outside attention matrix");
    auto r = h.attention.row(row);
    out.push_back(Tensor::vector({r.begin(), r.end()}));
  }
  return out;
}

double score(std::span<const double> attention_row, const Tensor& values, const Tensor& score_head) {
  if (attention_row.size() != values.rows() || values.cols() != score_head.size())
    throw DimensionError("score: attention row of " + std::to_string(attention_row.size()) + " against values " +
                         shape_str(values.shape()) + " and score head " + shape_str(score_head.shape()));
  double s = 0.0;
  for (std::size_t k = 0; k < values.cols(); ++k) {
    double pooled = 0.0;
    for (std::size_t j = 0; j < values.rows(); ++j) pooled += attention_row[j] * values.at(j, k);
    s += pooled * score_head[k];
  }
  return s;
}

std::vector<double> score(const model::AttentionTrace& trace, std::size_t mask_row, const Tensor& score_head) {
  require_trace(trace);
  std::vector<double> out;
  for (const auto& h : trace.heads) {
    if (mask_row >= h.attention.rows())
      throw std::out_of_range("score: mask row " + std::to_string(mask_row) + " outside attention matrix");
    out.push_back(score(h.attention.row(mask_row), h.values, score_head));
  }
  return out;
}

Tensor backward_attention(const Tensor& values, const Tensor& score_head) {
  if (values.cols() != score_head.size())
    throw DimensionError("backward_attention: values " + shape_str(values.shape()) + " vs score head " +
                         shape_str(score_head.shape()));
  Tensor out({values.rows()});
  for (std::size_t j = 0; j < values.rows(); ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < values.cols(); ++k) acc += values.at(j, k) * score_head[k];
    out[j] = acc;
  }
  return out;
}

std::vector<Tensor> backward_attention(const model::AttentionTrace& trace, const Tensor& score_head) {
  require_trace(trace);
  std::vector<Tensor> out;
  for (const auto& h : trace.heads) out.push_back(backward_attention(h.values, score_head));
  return out;
}

Tensor bidirectional_weights(std::span<const Tensor> fa, std::span<const Tensor> ba) {
  if (fa.empty() || fa.size() != ba.size()) throw DimensionError("bidirectional_weights: head counts differ");
  const std::size_t n = fa.front().size();
  Tensor mean_fa({n}), mean_ba({n});
  for (std::size_t h = 0; h < fa.size(); ++h) {
    if (fa[h].size() != n || ba[h].size() != n) throw DimensionError("bidirectional_weights: length mismatch");
    for (std::size_t j = 0; j < n; ++j) {
      mean_fa[j] += fa[h][j];
      mean_ba[j] += std::max(ba[h][j], 0.0);
    }
  }
  const double inv_h = 1.0 / static_cast<double>(fa.size());
  mean_fa *= inv_h;
  mean_ba *= inv_h;
  Tensor w({n});
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    w[j] = mean_fa[j] * mean_ba[j];
    total += w[j];
  }
  if (total < 1e-12) return mean_fa;
  w *= 1.0 / total;
  return w;
}

BidirAttWeights compute_weights(const model::AttentionTrace& trace, std::size_t mask_row,
                                const std::vector<Tensor>& score_heads, AttentionRow row) {
  require_trace(trace);
  if (score_heads.size() != trace.heads.size())
    throw DimensionError("compute_weights: " + std::to_string(score_heads.size()) + " score heads for " +
                         std::to_string(trace.heads.size()) + " attention heads");
  auto fa = forward_attention(trace, row == AttentionRow::Mask ? mask_row : 0);
  std::vector<Tensor> ba;
  BidirAttWeights out;
  for (std::size_t h = 0; h < trace.heads.size(); ++h) {
    const auto& head = trace.heads[h];
    if (mask_row >= head.attention.rows())
      throw std::out_of_range("score: mask row " + std::to_string(mask_row) + " outside attention matrix");
    ba.push_back(backward_attention(head.values, score_heads[h]));
    out.s_per_head.push_back(score(head.attention.row(mask_row), head.values, score_heads[h]));
  }
  const std::size_t n = fa.front().size();
  out.w_fa = Tensor({n});
  out.w_ba = Tensor({n});
  for (std::size_t h = 0; h < fa.size(); ++h)
    for (std::size_t j = 0; j < n; ++j) {
      out.w_fa[j] += fa[h][j] / static_cast<double>(fa.size());
      out.w_ba[j] += std::max(ba[h][j], 0.0) / static_cast<double>(fa.size());
    }
  out.w = bidirectional_weights(fa, ba);
  return out;
}

BidirAttWeights compute_weights(const model::AttentionTrace& trace, std::size_t mask_row, const Tensor& score_head,
                                AttentionRow row) {
  require_trace(trace);
  return compute_weights(trace, mask_row, std::vector<Tensor>(trace.heads.size(), score_head), row);
}

std::vector<Tensor> score_heads(const model::Params& params, std::size_t layer, text::TokenId target_id,
                                ScoreHead mode) {
  if (layer < 1 || layer > params.cross.size())
    throw ConfigError("score_heads: layer " + std::to_string(layer) + " outside 1.." +
                      std::to_string(params.cross.size()));
  const auto& wo = params.cross[layer - 1].cross_attn.wo;
  if (mode == ScoreHead::Dedicated) return std::vector<Tensor>(wo.size(), params.score_head.value());
  const Tensor& w2 = params.mpm_w2.value();
  if (target_id >= w2.cols())
    throw std::out_of_range("score_heads: target id " + std::to_string(target_id) + " outside the vocabulary");
  Tensor column({w2.rows(), 1});
  for (std::size_t r = 0; r < w2.rows(); ++r) column[r] = w2.at(r, target_id);
  std::vector<Tensor> out;
  for (const auto& w : wo) out.push_back(matmul(w.value(), column));
  return out;
}

Var weighted_pool(const Tensor& w, const model::EncoderOutput& image) {
  const std::size_t n = image.length();
  if (w.size() != n)
    throw DimensionError("weighted_pool: " + std::to_string(w.size()) + " weights for " + std::to_string(n) +
                         " image rows");
  if (n < 2) throw DimensionError("weighted_pool: image has no patch rows");
  double patch_mass = 0.0;
  for (std::size_t j = 1; j < n; ++j) patch_mass += w[j];
  Tensor pw({1, n - 1});
  for (std::size_t j = 1; j < n; ++j)
    pw[j - 1] = patch_mass > 1e-12 ? w[j] / patch_mass : 1.0 / static_cast<double>(n - 1);
  return ad::matmul(Var::constant(std::move(pw)), ad::rows(image.reps, 1, n));
}

Var coarse_similarity(const Var& a, const Var& b, const Var& proj_a, const Var& proj_b) {
  return ad::cosine(ad::matmul(a, proj_a), ad::matmul(b, proj_b));
}

BiattResult biatt_loss(const model::EncoderOutput& image, const model::EncoderOutput& phrase,
                       const model::FusionOutput& fusion, std::size_t mask_row, text::TokenId target_id,
                       const model::Params& params, model::Mode mode, const BidirAttOptions& options) {
  if (!fusion.trace) throw ContractError("biatt_loss: fusion output carries no attention trace");
  BiattResult r;
  r.weights = compute_weights(*fusion.trace, mask_row,
                              score_heads(params, fusion.trace->layer, target_id, options.score_head), options.row);
  Var pooled = weighted_pool(r.weights.w, image);
  Var sim = coarse_similarity(pooled, ad::row(phrase.reps, 0), model::use(params.proj_image, mode),
                              model::use(params.proj_phrase, mode));
  r.loss = ad::add_scalar(ad::scale(sim, -1.0), 1.0);
  return r;
}

BidirAttWeights phrase_weights(const Tensor& patches, const std::vector<text::TokenId>& phrase_tokens,
                               std::size_t mask_index, const model::Params& params, const model::ModelConfig& config,
                               const BidirAttOptions& options, std::size_t layer) {
  if (mask_index >= phrase_tokens.size())
    throw std::out_of_range("phrase_weights: mask index " + std::to_string(mask_index) + " outside a phrase of " +
                            std::to_string(phrase_tokens.size()) + " tokens");
  auto tokens = phrase_tokens;
  tokens[mask_index] = text::Vocabulary::kMask;
  auto image = model::encode_image(patches, params, config, model::Mode::Inference);
  auto phrase = model::encode_text(tokens, params, config, model::Mode::Inference);
  auto fusion = model::cross_encode(phrase, image, params, config, model::Mode::Inference,
                                    model::TraceRequest{layer == 0 ? config.bidiratt_layer : layer, false});
  return compute_weights(*fusion.trace, mask_index + 1,
                         score_heads(params, fusion.trace->layer, phrase_tokens[mask_index], options.score_head),
                         options.row);
}

void write_heatmap_csv(const std::filesystem::path& path, const BidirAttWeights& weights, std::size_t grid_rows,
                       std::size_t grid_cols) {
  if (weights.w.size() != grid_rows * grid_cols + 1)
    throw DimensionError("heatmap: weights do not match a " + std::to_string(grid_rows) + "x" +
                         std::to_string(grid_cols) + " grid");
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  out.precision(17);
  out << "row,col,w,w_fa,w_ba\n";
  for (std::size_t r = 0; r < grid_rows; ++r)
    for (std::size_t c = 0; c < grid_cols; ++c) {
      const std::size_t j = 1 + r * grid_cols + c;
      out << r << ',' << c << ',' << weights.w[j] << ',' << weights.w_fa[j] << ',' << weights.w_ba[j] << '\n';
    }
}

std::vector<unsigned char> heatmap_pixels(const Tensor& w, std::size_t grid_rows, std::size_t grid_cols) {
  const std::size_t n = grid_rows * grid_cols;
  if (w.size() != n + 1) throw DimensionError("heatmap: weights do not match the patch grid");
  double lo = w[1], hi = w[1];
  for (std::size_t j = 1; j <= n; ++j) {
    lo = std::min(lo, w[j]);
    hi = std::max(hi, w[j]);
  }
  std::vector<unsigned char> px(n, 0);
  if (hi > lo)
    for (std::size_t j = 1; j <= n; ++j)
      px[j - 1] = static_cast<unsigned char>(std::lround(255.0 * (w[j] - lo) / (hi - lo)));
  return px;
}

void write_pgm(const std::filesystem::path& path, std::span<const unsigned char> pixels, std::size_t width,
               std::size_t height) {
  if (pixels.size() != width * height) throw DimensionError("write_pgm: pixel count does not match size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

}  // namespace laip::bidiratt
