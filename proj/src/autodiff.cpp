#include "laip/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

#include "laip/errors.hpp"
#include "laip/kernels.hpp"

namespace laip::ad {

namespace {

std::atomic<std::uint64_t> g_seq{0};
std::atomic<std::uint64_t> g_grad_allocs{0};

std::shared_ptr<Node> new_node(Tensor value, bool requires_grad, const char* op) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  n->requires_grad = requires_grad;
  if (requires_grad) {
    n->grad = Tensor::zeros_like(n->value);
    g_grad_allocs.fetch_add(1, std::memory_order_relaxed);
  }
  return n;
}

void check_finite(const Tensor& v, const char* op) {
  if (!v.all_finite()) throw NumericalError(std::string("non-finite value produced by ") + op);
}

void same_size(const Var& a, const Var& b, const char* op) {
  if (a.value().size() != b.value().size() || a.value().cols() != b.value().cols())
    throw DimensionError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Shape mat_shape(std::size_t r, std::size_t c) { return {r, c}; }

}  // namespace

Var Var::leaf(Tensor value, std::string name) {
  check_finite(value, "leaf");
  auto n = new_node(std::move(value), true, "leaf");
  n->name = std::move(name);
  return Var(std::move(n), true);
}

Var Var::constant(Tensor value) { return Var(new_node(std::move(value), false, "const"), false); }

Var Var::detached() const { return Var(node_, false); }

void Var::zero_grad() {
  if (node_->requires_grad) node_->grad.fill(0.0);
  node_->grad_consumed = false;
}

void Var::accumulate_grad(const Tensor& g) const {
  if (tracked_) node_->grad += g;
}

std::uint64_t grad_allocations() { return g_grad_allocs.load(); }

Var record(Tensor value, const char* op, std::initializer_list<const Var*> inputs,
           std::function<void(Node&)> backward_fn) {
  check_finite(value, op);
  bool any = false;
  for (const Var* v : inputs) any = any || v->tracked();
  if (!any) return Var(new_node(std::move(value), false, op), false);
  auto n = new_node(std::move(value), true, op);
  for (const Var* v : inputs)
    if (v->tracked()) n->parents.push_back(v->node_);
  n->backward_fn = std::move(backward_fn);
  return Var(std::move(n), true);
}

Var record_many(Tensor value, const char* op, const std::vector<Var>& inputs,
                std::function<void(Node&)> backward_fn) {
  check_finite(value, op);
  bool any = false;
  for (const Var& v : inputs) any = any || v.tracked();
  if (!any) return Var(new_node(std::move(value), false, op), false);
  auto n = new_node(std::move(value), true, op);
  for (const Var& v : inputs)
    if (v.tracked()) n->parents.push_back(v.node_);
  n->backward_fn = std::move(backward_fn);
  return Var(std::move(n), true);
}

namespace {

std::vector<Node*> reachable(const Var& root) {
  std::vector<Node*> out;
  std::unordered_set<const Node*> seen;
  std::vector<Node*> stack{const_cast<Node*>(root.node())};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    out.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  // Children always have a larger sequence number than their parents.
  std::sort(out.begin(), out.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
  return out;
}

}  // namespace

void backward(const Var& root) {
  if (!root.valid() || !root.tracked()) throw ContractError("backward: root is not a recorded node");
  if (!root.value().is_scalar())
    throw ContractError("backward: root must be a scalar, got " + shape_str(root.shape()));
  auto order = reachable(root);
  for (Node* n : order) {
    if (n->grad_consumed)
      throw ContractError("backward: stale gradient in node '" + (n->name.empty() ? std::string(n->op) : n->name) +
                          "'; call zero_grad before reusing it");
  }
  order.front()->grad[0] += 1.0;
  for (Node* n : order)
    if (n->backward_fn) n->backward_fn(*n);
  for (Node* n : order) n->grad_consumed = true;
}

void zero_grad_graph(const Var& root) {
  if (!root.valid()) return;
  for (Node* n : reachable(root)) {
    if (n->requires_grad) n->grad.fill(0.0);
    n->grad_consumed = false;
  }
}

Var matmul(const Var& a, const Var& b) {
  Tensor out = laip::matmul(a.value(), b.value());
  return record(std::move(out), "matmul", {&a, &b}, [a, b](Node& n) {
    const auto& A = a.value();
    const auto& B = b.value();
    if (a.tracked())
      kernels::omp::gemm_nt(n.grad.data(), B.data(), const_cast<Node*>(a.node())->grad.data(),
                            {A.rows(), B.cols(), A.cols()}, true);
    if (b.tracked())
      kernels::omp::gemm_tn(A.data(), n.grad.data(), const_cast<Node*>(b.node())->grad.data(),
                            {B.rows(), A.rows(), B.cols()}, true);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tensor out = laip::matmul_nt(a.value(), b.value());
  return record(std::move(out), "matmul_nt", {&a, &b}, [a, b](Node& n) {
    const auto& A = a.value();
    const auto& B = b.value();
    // out = A B^T: dA = G B, dB = G^T A
    if (a.tracked())
      kernels::omp::gemm_nn(n.grad.data(), B.data(), const_cast<Node*>(a.node())->grad.data(),
                            {A.rows(), B.rows(), A.cols()}, true);
    if (b.tracked())
      kernels::omp::gemm_tn(n.grad.data(), A.data(), const_cast<Node*>(b.node())->grad.data(),
                            {B.rows(), A.rows(), B.cols()}, true);
  });
}

Var add(const Var& a, const Var& b) {
  same_size(a, b, "add");
  return record(a.value() + b.value(), "add", {&a, &b}, [a, b](Node& n) {
    a.accumulate_grad(n.grad);
    b.accumulate_grad(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  same_size(a, b, "sub");
  return record(a.value() - b.value(), "sub", {&a, &b}, [a, b](Node& n) {
    a.accumulate_grad(n.grad);
    b.accumulate_grad(-1.0 * n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  same_size(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return record(std::move(out), "mul", {&a, &b}, [a, b](Node& n) {
    if (a.tracked()) {
      auto& g = const_cast<Node*>(a.node())->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * b.value()[i];
    }
    if (b.tracked()) {
      auto& g = const_cast<Node*>(b.node())->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * a.value()[i];
    }
  });
}

Var add_row(const Var& x, const Var& row) {
  const auto& X = x.value();
  if (row.value().size() != X.cols())
    throw DimensionError("add_row: " + shape_str(x.shape()) + " + " + shape_str(row.shape()));
  Tensor out = X;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += row.value()[c];
  return record(std::move(out), "add_row", {&x, &row}, [x, row](Node& n) {
    x.accumulate_grad(n.grad);
    if (row.tracked()) {
      auto& g = const_cast<Node*>(row.node())->grad;
      for (std::size_t r = 0; r < n.grad.rows(); ++r)
        for (std::size_t c = 0; c < n.grad.cols(); ++c) g[c] += n.grad.at(r, c);
    }
  });
}

Var scale(const Var& x, double s) {
  return record(s * x.value(), "scale", {&x}, [x, s](Node& n) { x.accumulate_grad(s * n.grad); });
}

Var scale_by(const Var& x, const Var& s) {
  if (!s.value().is_scalar()) throw DimensionError("scale_by: factor must be scalar");
  const double sv = s.value()[0];
  return record(sv * x.value(), "scale_by", {&x, &s}, [x, s, sv](Node& n) {
    x.accumulate_grad(sv * n.grad);
    if (s.tracked()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * x.value()[i];
      const_cast<Node*>(s.node())->grad[0] += acc;
    }
  });
}

Var add_scalar(const Var& x, double c) {
  Tensor out = x.value();
  for (auto& v : out.data()) v += c;
  return record(std::move(out), "add_scalar", {&x}, [x](Node& n) { x.accumulate_grad(n.grad); });
}

Var row_softmax(const Var& x) {
  Tensor y = laip::row_softmax(x.value());
  return record(y, "row_softmax", {&x}, [x, y](Node& n) {
    if (!x.tracked()) return;
    auto& g = const_cast<Node*>(x.node())->grad;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dotp = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dotp += n.grad.at(r, c) * y.at(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) g.at(r, c) += y.at(r, c) * (n.grad.at(r, c) - dotp);
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const auto& X = x.value();
  const std::size_t m = X.rows(), d = X.cols();
  if (gain.value().size() != d || bias.value().size() != d)
    throw DimensionError("layer_norm: affine parameters must have " + std::to_string(d) + " entries");
  Tensor xhat(mat_shape(m, d));
  std::vector<double> inv_std(m);
  Tensor out(mat_shape(m, d));
  for (std::size_t r = 0; r < m; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += X.at(r, c);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (X.at(r, c) - mu) * (X.at(r, c) - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat.at(r, c) = (X.at(r, c) - mu) * inv_std[r];
      out.at(r, c) = xhat.at(r, c) * gain.value()[c] + bias.value()[c];
    }
  }
  return record(std::move(out), "layer_norm", {&x, &gain, &bias},
                [x, gain, bias, xhat, inv_std, m, d](Node& n) {
                  const auto& G = n.grad;
                  if (gain.tracked() || bias.tracked()) {
                    for (std::size_t r = 0; r < m; ++r)
                      for (std::size_t c = 0; c < d; ++c) {
                        if (gain.tracked()) const_cast<Node*>(gain.node())->grad[c] += G.at(r, c) * xhat.at(r, c);
                        if (bias.tracked()) const_cast<Node*>(bias.node())->grad[c] += G.at(r, c);
                      }
                  }
                  if (!x.tracked()) return;
                  auto& gx = const_cast<Node*>(x.node())->grad;
                  const double inv_d = 1.0 / static_cast<double>(d);
                  for (std::size_t r = 0; r < m; ++r) {
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (std::size_t c = 0; c < d; ++c) {
                      const double gh = G.at(r, c) * gain.value()[c];
                      mean_g += gh;
                      mean_gx += gh * xhat.at(r, c);
                    }
                    mean_g *= inv_d;
                    mean_gx *= inv_d;
                    for (std::size_t c = 0; c < d; ++c) {
                      const double gh = G.at(r, c) * gain.value()[c];
                      gx.at(r, c) += inv_std[r] * (gh - mean_g - xhat.at(r, c) * mean_gx);
                    }
                  }
                });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) {
    const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
    v = 0.5 * v * (1.0 + t);
  }
  return record(std::move(out), "gelu", {&x}, [x](Node& n) {
    if (!x.tracked()) return;
    auto& g = const_cast<Node*>(x.node())->grad;
    const auto& X = x.value();
    for (std::size_t i = 0; i < X.size(); ++i) {
      const double v = X[i];
      const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      g[i] += n.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return record(std::move(out), "relu", {&x}, [x](Node& n) {
    if (!x.tracked()) return;
    auto& g = const_cast<Node*>(x.node())->grad;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x.value()[i] > 0.0) g[i] += n.grad[i];
  });
}

Var exp(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::exp(v);
  return record(out, "exp", {&x}, [x, out](Node& n) {
    if (!x.tracked()) return;
    auto& g = const_cast<Node*>(x.node())->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * out[i];
  });
}

Var square(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= v;
  return record(std::move(out), "square", {&x}, [x](Node& n) {
    if (!x.tracked()) return;
    auto& g = const_cast<Node*>(x.node())->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * x.value()[i] * n.grad[i];
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return record(Tensor::scalar(s), "sum", {&x}, [x](Node& n) {
    if (!x.tracked()) return;
    auto& g = const_cast<Node*>(x.node())->grad;
    for (auto& v : g.data()) v += n.grad[0];
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var rows(const Var& x, std::size_t begin, std::size_t end) {
  const auto& X = x.value();
  if (begin >= end || end > X.rows())
    throw DimensionError("rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
  const std::size_t c = X.cols();
  std::vector<double> data(X.data().begin() + static_cast<std::ptrdiff_t>(begin * c),
                           X.data().begin() + static_cast<std::ptrdiff_t>(end * c));
  return record(Tensor(mat_shape(end - begin, c), std::move(data)), "rows", {&x}, [x, begin, c](Node& n) {
    if (!x.tracked()) return;
    auto& g = const_cast<Node*>(x.node())->grad;
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[begin * c + i] += n.grad[i];
  });
}

Var row(const Var& x, std::size_t r) { return rows(x, r, r + 1); }

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != c)
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    total += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(total * c);
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return record_many(Tensor(mat_shape(total, c), std::move(data)), "concat_rows", parts, [parts](Node& n) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t len = p.value().size();
      if (p.tracked()) {
        auto& g = const_cast<Node*>(p.node())->grad;
        for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[off + i];
      }
      off += len;
    }
  });
}

Var gather_rows(const Var& table, std::span<const std::size_t> ids) {
  const auto& T = table.value();
  const std::size_t c = T.cols();
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  Tensor out(mat_shape(ids.size(), c));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= T.rows())
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside " + shape_str(T.shape()));
    std::copy(T.row(ids[i]).begin(), T.row(ids[i]).end(), out.row(i).begin());
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return record(std::move(out), "gather_rows", {&table}, [table, idv, c](Node& n) {
    if (!table.tracked()) return;
    auto& g = const_cast<Node*>(table.node())->grad;
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g.at(idv[i], j) += n.grad.at(i, j);
  });
}

Var normalize_rows(const Var& x) {
  const auto& X = x.value();
  Tensor y(mat_shape(X.rows(), X.cols()));
  std::vector<double> norms(X.rows());
  for (std::size_t r = 0; r < X.rows(); ++r) {
    norms[r] = l2_norm(X.row(r));
    if (norms[r] > 0.0)
      for (std::size_t c = 0; c < X.cols(); ++c) y.at(r, c) = X.at(r, c) / norms[r];
  }
  return record(y, "normalize_rows", {&x}, [x, y, norms](Node& n) {
    if (!x.tracked()) return;
    auto& g = const_cast<Node*>(x.node())->grad;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      if (norms[r] == 0.0) continue;
      double dotp = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dotp += y.at(r, c) * n.grad.at(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c)
        g.at(r, c) += (n.grad.at(r, c) - y.at(r, c) * dotp) / norms[r];
    }
  });
}

Var cosine(const Var& a, const Var& b) {
  if (a.value().size() != b.value().size())
    throw DimensionError("cosine: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape s{1, a.value().size()};
  Var ar = a.shape() == s ? a : record(a.value().reshaped(s), "reshape", {&a}, [a](Node& n) {
    a.accumulate_grad(n.grad.reshaped(a.shape()));
  });
  Var br = b.shape() == s ? b : record(b.value().reshaped(s), "reshape", {&b}, [b](Node& n) {
    b.accumulate_grad(n.grad.reshaped(b.shape()));
  });
  if (l2_norm(a.value().data()) == 0.0 || l2_norm(b.value().data()) == 0.0)
    log_warning("cosine similarity of a zero vector; returning 0");
  return sum(mul(normalize_rows(ar), normalize_rows(br)));
}

Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
  const auto& L = logits.value();
  const std::size_t m = L.rows(), n = L.cols();
  if (targets.size() != m)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(m) + " rows");
  for (auto t : targets)
    if (t >= n)
      throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) + " outside " +
                              std::to_string(n) + " classes");
  Tensor probs = laip::row_softmax(L.reshaped(mat_shape(m, n)));
  double loss = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    const auto row = L.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    loss += std::log(s) + mx - row[targets[r]];
  }
  loss /= static_cast<double>(m);
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  return record(Tensor::scalar(loss), "softmax_cross_entropy", {&logits}, [logits, probs, tv, m](Node& nd) {
    if (!logits.tracked()) return;
    auto& g = const_cast<Node*>(logits.node())->grad;
    const double scale = nd.grad[0] / static_cast<double>(m);
    const std::size_t n = probs.cols();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c)
        g[r * n + c] += scale * (probs.at(r, c) - (c == tv[r] ? 1.0 : 0.0));
  });
}

Var cross_entropy_logits(const Var& logits, std::size_t target) {
  const std::size_t t[1] = {target};
  if (logits.value().rows() != 1) throw DimensionError("cross_entropy_logits: expected a vector");
  return softmax_cross_entropy(logits, t);
}

Var bce_with_logits(const Var& logits, std::span<const double> labels) {
  const auto& X = logits.value();
  if (X.size() != labels.size())
    throw DimensionError("bce_with_logits: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(X.size()) + " logits");
  double loss = 0.0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    const double x = X[i];
    loss += std::max(x, 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const double m = static_cast<double>(X.size());
  std::vector<double> lv(labels.begin(), labels.end());
  return record(Tensor::scalar(loss / m), "bce_with_logits", {&logits}, [logits, lv, m](Node& n) {
    if (!logits.tracked()) return;
    auto& g = const_cast<Node*>(logits.node())->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = logits.value()[i];
      const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      g[i] += n.grad[0] * (sig - lv[i]) / m;
    }
  });
}

}  // namespace laip::ad
