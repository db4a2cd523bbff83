#include "laip/model.hpp"

#include <cmath>

#include "laip/errors.hpp"

namespace laip::model {

void ModelConfig::validate() const {
  if (d == 0 || heads == 0 || d % heads != 0)
    throw ConfigError("model width d=" + std::to_string(d) + " must be a positive multiple of heads=" +
                      std::to_string(heads));
  if (n_cross_layers == 0) throw ConfigError("n_cross_layers must be positive");
  if (bidiratt_layer < 1 || bidiratt_layer > n_cross_layers)
    throw ConfigError("bidiratt_layer " + std::to_string(bidiratt_layer) + " outside 1.." +
                      std::to_string(n_cross_layers));
  if (proj_dim == 0 || ffn_dim == 0 || grid_rows == 0 || grid_cols == 0 || patch_pixels == 0 || max_text_len == 0)
    throw ConfigError("model dimensions must be positive");
  if (vocab_size <= text::Vocabulary::kReserved) throw ConfigError("vocabulary is too small");
}

double Params::tau() const { return std::exp(log_tau.value().item()); }

namespace {

Var weight(Rng& rng, std::size_t r, std::size_t c, double sigma = 0.02) {
  Tensor t({r, c});
  for (auto& v : t.data()) v = rng.truncated_normal(sigma);
  return Var::leaf(std::move(t));
}

Var zeros(std::size_t r, std::size_t c) { return Var::leaf(Tensor({r, c})); }

LayerNormWeights init_ln(std::size_t d) { return {Var::leaf(Tensor({1, d}, 1.0)), zeros(1, d)}; }

AttentionWeights init_attn(const ModelConfig& c, Rng& rng) {
  AttentionWeights w;
  for (std::size_t h = 0; h < c.heads; ++h) {
    w.wq.push_back(weight(rng, c.d, c.head_dim()));
    w.wk.push_back(weight(rng, c.d, c.head_dim()));
    w.wv.push_back(weight(rng, c.d, c.head_dim()));
    w.wo.push_back(weight(rng, c.head_dim(), c.d));
  }
  w.bo = zeros(1, c.d);
  return w;
}

FeedForward init_ffn(const ModelConfig& c, Rng& rng) {
  return {weight(rng, c.d, c.ffn_dim), zeros(1, c.ffn_dim), weight(rng, c.ffn_dim, c.d), zeros(1, c.d)};
}

SelfLayer init_self(const ModelConfig& c, Rng& rng) {
  SelfLayer l;
  l.ln_attn = init_ln(c.d);
  l.attn = init_attn(c, rng);
  l.ln_ffn = init_ln(c.d);
  l.ffn = init_ffn(c, rng);
  return l;
}

CrossLayer init_cross(const ModelConfig& c, Rng& rng) {
  CrossLayer l;
  l.ln_self = init_ln(c.d);
  l.self_attn = init_attn(c, rng);
  l.ln_cross = init_ln(c.d);
  l.cross_attn = init_attn(c, rng);
  l.ln_ffn = init_ln(c.d);
  l.ffn = init_ffn(c, rng);
  return l;
}

// Visitors over the sub-structures. Names are stable and used as checkpoint keys.
void visit_ln(LayerNormWeights& ln, const std::string& p, const ParamVisitor& v) {
  v(p + ".gain", ln.gain);
  v(p + ".bias", ln.bias);
}

void visit_attn(AttentionWeights& a, const std::string& p, const ParamVisitor& v) {
  for (std::size_t h = 0; h < a.wq.size(); ++h) {
    const auto hp = p + ".head" + std::to_string(h);
    v(hp + ".wq", a.wq[h]);
    v(hp + ".wk", a.wk[h]);
    v(hp + ".wv", a.wv[h]);
    v(hp + ".wo", a.wo[h]);
  }
  v(p + ".bo", a.bo);
}

void visit_ffn(FeedForward& f, const std::string& p, const ParamVisitor& v) {
  v(p + ".w1", f.w1);
  v(p + ".b1", f.b1);
  v(p + ".w2", f.w2);
  v(p + ".b2", f.b2);
}

void visit_self(SelfLayer& l, const std::string& p, const ParamVisitor& v) {
  visit_ln(l.ln_attn, p + ".ln_attn", v);
  visit_attn(l.attn, p + ".attn", v);
  visit_ln(l.ln_ffn, p + ".ln_ffn", v);
  visit_ffn(l.ffn, p + ".ffn", v);
}

void visit_image(ImageEncoder& e, const std::string& p, const ParamVisitor& v) {
  v(p + ".patch_w", e.patch_w);
  v(p + ".patch_b", e.patch_b);
  v(p + ".cls", e.cls);
  v(p + ".pos", e.pos);
  for (std::size_t i = 0; i < e.layers.size(); ++i) visit_self(e.layers[i], p + ".layer" + std::to_string(i), v);
  visit_ln(e.ln_out, p + ".ln_out", v);
}

void visit_text(TextEncoder& e, const std::string& p, const ParamVisitor& v) {
  v(p + ".tok_embed", e.tok_embed);
  v(p + ".pos", e.pos);
  for (std::size_t i = 0; i < e.layers.size(); ++i) visit_self(e.layers[i], p + ".layer" + std::to_string(i), v);
  visit_ln(e.ln_out, p + ".ln_out", v);
}

Var multi_head_attention(const Var& q_in, const Var& kv_in, const AttentionWeights& w, Mode mode,
                         AttentionTrace* trace) {
  const std::size_t heads = w.wq.size();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(w.wq.front().value().cols()));
  Var out;
  for (std::size_t h = 0; h < heads; ++h) {
    Var q = ad::matmul(q_in, use(w.wq[h], mode));
    Var k = ad::matmul(kv_in, use(w.wk[h], mode));
    Var v = ad::matmul(kv_in, use(w.wv[h], mode));
    Var a = ad::row_softmax(ad::scale(ad::matmul_nt(q, k), inv_sqrt));
    Var head_out = ad::matmul(ad::matmul(a, v), use(w.wo[h], mode));
    out = h == 0 ? head_out : ad::add(out, head_out);
    if (trace) trace->heads.push_back({a.value(), v.value(), q.value(), a, v});
  }
  return ad::add_row(out, use(w.bo, mode));
}

Var layer_norm(const Var& x, const LayerNormWeights& ln, Mode mode) {
  return ad::layer_norm(x, use(ln.gain, mode), use(ln.bias, mode));
}

Var feed_forward(const Var& x, const FeedForward& f, Mode mode) {
  Var h = ad::gelu(ad::add_row(ad::matmul(x, use(f.w1, mode)), use(f.b1, mode)));
  return ad::add_row(ad::matmul(h, use(f.w2, mode)), use(f.b2, mode));
}

Var self_layer(const Var& x, const SelfLayer& l, Mode mode) {
  Var n = layer_norm(x, l.ln_attn, mode);
  Var h = ad::add(x, multi_head_attention(n, n, l.attn, mode, nullptr));
  return ad::add(h, feed_forward(layer_norm(h, l.ln_ffn, mode), l.ffn, mode));
}

}  // namespace

void visit_params(Params& p, const ParamVisitor& v) {
  visit_image(p.image, "image", v);
  visit_text(p.text, "text", v);
  for (std::size_t i = 0; i < p.cross.size(); ++i) {
    auto& l = p.cross[i];
    const auto lp = "cross.layer" + std::to_string(i);
    visit_ln(l.ln_self, lp + ".ln_self", v);
    visit_attn(l.self_attn, lp + ".self_attn", v);
    visit_ln(l.ln_cross, lp + ".ln_cross", v);
    visit_attn(l.cross_attn, lp + ".cross_attn", v);
    visit_ln(l.ln_ffn, lp + ".ln_ffn", v);
    visit_ffn(l.ffn, lp + ".ffn", v);
  }
  visit_ln(p.cross_ln_out, "cross.ln_out", v);
  v("proj_image", p.proj_image);
  v("proj_text", p.proj_text);
  if (p.proj_phrase.node() != p.proj_text.node()) v("proj_phrase", p.proj_phrase);
  v("score_head", p.score_head);
  v("itm_head", p.itm_head);
  v("mpm.w1", p.mpm_w1);
  v("mpm.b1", p.mpm_b1);
  v("mpm.w2", p.mpm_w2);
  v("mpm.b2", p.mpm_b2);
  v("log_tau", p.log_tau);
}

void visit_unimodal(Params& p, const ParamVisitor& v) {
  visit_image(p.image, "image", v);
  visit_text(p.text, "text", v);
  v("proj_image", p.proj_image);
  v("proj_text", p.proj_text);
}

void visit_momentum(MomentumState& s, const ParamVisitor& v) {
  visit_image(s.image, "image", v);
  visit_text(s.text, "text", v);
  v("proj_image", s.proj_image);
  v("proj_text", s.proj_text);
}

Params init_params(const ModelConfig& c, Rng& rng) {
  c.validate();
  Params p;
  p.image.patch_w = weight(rng, c.patch_pixels, c.d);
  p.image.patch_b = zeros(1, c.d);
  p.image.cls = weight(rng, 1, c.d);
  p.image.pos = weight(rng, c.num_patches() + 1, c.d);
  for (std::size_t i = 0; i < c.n_self_layers; ++i) p.image.layers.push_back(init_self(c, rng));
  p.image.ln_out = init_ln(c.d);

  p.text.tok_embed = weight(rng, c.vocab_size, c.d);
  p.text.pos = weight(rng, c.max_text_len + 1, c.d);
  for (std::size_t i = 0; i < c.n_self_layers; ++i) p.text.layers.push_back(init_self(c, rng));
  p.text.ln_out = init_ln(c.d);

  for (std::size_t i = 0; i < c.n_cross_layers; ++i) p.cross.push_back(init_cross(c, rng));
  p.cross_ln_out = init_ln(c.d);

  p.proj_image = weight(rng, c.d, c.proj_dim);
  p.proj_text = weight(rng, c.d, c.proj_dim);
  p.proj_phrase = c.separate_phrase_projection ? weight(rng, c.d, c.proj_dim) : p.proj_text;
  p.score_head = weight(rng, c.head_dim(), 1);
  p.itm_head = weight(rng, c.d, 1);
  p.mpm_w1 = weight(rng, c.d, c.d);
  p.mpm_b1 = zeros(1, c.d);
  p.mpm_w2 = weight(rng, c.d, c.vocab_size);
  p.mpm_b2 = zeros(1, c.vocab_size);
  p.log_tau = Var::leaf(Tensor::scalar(std::log(0.07)));
  return p;
}

Params clone_params(const Params& params) {
  Params copy = params;
  const bool shared_phrase = params.proj_phrase.node() == params.proj_text.node();
  visit_params(copy, [](const std::string& name, Var& v) { v = Var::leaf(v.value(), name); });
  if (shared_phrase) copy.proj_phrase = copy.proj_text;
  return copy;
}

std::size_t parameter_count(const Params& params) {
  std::size_t n = 0;
  visit_params(const_cast<Params&>(params), [&](const std::string&, Var& v) { n += v.value().size(); });
  return n;
}

MomentumState init_momentum(const Params& live, double alpha) {
  if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("momentum alpha must lie in [0, 1)");
  MomentumState s{live.image, live.text, live.proj_image, live.proj_text, alpha};
  visit_momentum(s, [](const std::string& name, Var& v) { v = Var::leaf(v.value(), "momentum." + name); });
  return s;
}

void momentum_update(Params& live, MomentumState& state) {
  std::vector<Var*> shadows;
  visit_momentum(state, [&](const std::string&, Var& v) { shadows.push_back(&v); });
  std::size_t i = 0;
  const double a = state.alpha;
  visit_unimodal(live, [&](const std::string& name, Var& v) {
    if (i >= shadows.size() || shadows[i]->value().shape() != v.value().shape())
      throw ContractError("momentum_update: shadow of '" + name + "' does not mirror the live parameter");
    auto& shadow = shadows[i]->mutable_value();
    const auto& cur = v.value();
    for (std::size_t k = 0; k < shadow.size(); ++k) shadow[k] = a * shadow[k] + (1.0 - a) * cur[k];
    ++i;
  });
  if (i != shadows.size()) throw ContractError("momentum_update: parameter count drifted");
}

EncoderOutput encode_image(const Tensor& patches, const ImageEncoder& enc, const ModelConfig& c, Mode mode) {
  if (patches.rank() != 2 || patches.rows() != c.num_patches() || patches.cols() != c.patch_pixels)
    throw DimensionError("encode_image: expected " + std::to_string(c.num_patches()) + "x" +
                         std::to_string(c.patch_pixels) + " patches, got " + shape_str(patches.shape()));
  Var x = ad::add_row(ad::matmul(Var::constant(patches), use(enc.patch_w, mode)), use(enc.patch_b, mode));
  x = ad::add(ad::concat_rows({use(enc.cls, mode), x}), use(enc.pos, mode));
  for (const auto& l : enc.layers) x = self_layer(x, l, mode);
  return {layer_norm(x, enc.ln_out, mode)};
}

EncoderOutput encode_image(const Tensor& patches, const Params& params, const ModelConfig& c, Mode mode) {
  return encode_image(patches, params.image, c, mode);
}

EncoderOutput encode_text(const std::vector<text::TokenId>& ids, const TextEncoder& enc, const ModelConfig& c,
                          Mode mode) {
  if (ids.size() > c.max_text_len)
    throw DimensionError("encode_text: " + std::to_string(ids.size()) + " tokens exceed max_text_len " +
                         std::to_string(c.max_text_len));
  std::vector<std::size_t> rows;
  rows.reserve(ids.size() + 1);
  rows.push_back(text::Vocabulary::kCls);
  for (auto id : ids) rows.push_back(id < c.vocab_size ? id : text::Vocabulary::kUnk);
  Var x = ad::gather_rows(use(enc.tok_embed, mode), rows);
  x = ad::add(x, ad::rows(use(enc.pos, mode), 0, rows.size()));
  for (const auto& l : enc.layers) x = self_layer(x, l, mode);
  return {layer_norm(x, enc.ln_out, mode)};
}

EncoderOutput encode_text(const std::vector<text::TokenId>& ids, const Params& params, const ModelConfig& c,
                          Mode mode) {
  return encode_text(ids, params.text, c, mode);
}

FusionOutput cross_encode(const EncoderOutput& text_out, const EncoderOutput& img_out, const Params& params,
                          const ModelConfig& c, Mode mode, TraceRequest trace) {
  if (text_out.reps.value().cols() != c.d || img_out.reps.value().cols() != c.d)
    throw DimensionError("cross_encode: representation widths must equal d=" + std::to_string(c.d));
  if (trace.layer && (*trace.layer < 1 || *trace.layer > params.cross.size()))
    throw ConfigError("cross_encode: trace layer " + std::to_string(*trace.layer) + " outside 1.." +
                      std::to_string(params.cross.size()));
  FusionOutput out;
  Var x = text_out.reps;
  for (std::size_t i = 0; i < params.cross.size(); ++i) {
    const auto& l = params.cross[i];
    const std::size_t layer = i + 1;
    Var n = layer_norm(x, l.ln_self, mode);
    x = ad::add(x, multi_head_attention(n, n, l.self_attn, mode, nullptr));
    AttentionTrace t;
    t.layer = layer;
    const bool want = trace.all_layers || (trace.layer && *trace.layer == layer);
    x = ad::add(x, multi_head_attention(layer_norm(x, l.ln_cross, mode), img_out.reps, l.cross_attn, mode,
                                        want ? &t : nullptr));
    x = ad::add(x, feed_forward(layer_norm(x, l.ln_ffn, mode), l.ffn, mode));
    if (trace.layer && *trace.layer == layer) out.trace = t;
    if (trace.all_layers) out.all_layers.push_back(std::move(t));
  }
  out.reps = layer_norm(x, params.cross_ln_out, mode);
  return out;
}

Var fine_similarity(const FusionOutput& fusion, const Params& params, Mode mode) {
  return ad::matmul(ad::row(fusion.reps, 0), use(params.itm_head, mode));
}

Var project_global(const EncoderOutput& out, const Var& projection, Mode mode) {
  return ad::matmul(ad::row(out.reps, 0), use(projection, mode));
}

Var mpm_logits(const Var& fused_row, const Params& params, Mode mode) {
  Var h = ad::gelu(ad::add_row(ad::matmul(fused_row, use(params.mpm_w1, mode)), use(params.mpm_b1, mode)));
  return ad::add_row(ad::matmul(h, use(params.mpm_w2, mode)), use(params.mpm_b2, mode));
}

}  // namespace laip::model
