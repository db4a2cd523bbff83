#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "laip/tensor.hpp"

// Minimal reverse-mode differentiation over dense tensors.
//
// A Var is either tracked (its node participates in a recorded graph and owns
// a gradient slot) or untracked (a plain value). An operation records a node
// only when at least one input is tracked, so running a model on detached
// parameters performs no gradient allocation at all.
namespace laip::ad {

struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";
  std::string name;
  std::uint64_t seq = 0;
  bool requires_grad = false;
  // Set by backward(); cleared only by zero_grad().
  bool grad_consumed = false;
};

class Var {
 public:
  Var() = default;

  static Var leaf(Tensor value, std::string name = {});
  static Var constant(Tensor value);

  // Same storage, never recorded.
  Var detached() const;

  bool valid() const { return node_ != nullptr; }
  bool tracked() const { return tracked_; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  const char* op() const { return node_->op; }
  const std::string& name() const { return node_->name; }
  const Node* node() const { return node_.get(); }
  Node* node() { return node_.get(); }
  std::shared_ptr<Node> shared_node() const { return node_; }

  void zero_grad();
  void accumulate_grad(const Tensor& g) const;

 private:
  Var(std::shared_ptr<Node> node, bool tracked) : node_(std::move(node)), tracked_(tracked) {}
  friend Var record(Tensor value, const char* op, std::initializer_list<const Var*> inputs,
                    std::function<void(Node&)> backward_fn);
  friend Var record_many(Tensor value, const char* op, const std::vector<Var>& inputs,
                         std::function<void(Node&)> backward_fn);

  std::shared_ptr<Node> node_;
  bool tracked_ = false;
};

// Creates an output node; tracked iff any input is tracked. Throws
// NumericalError if the value contains NaN/Inf.
Var record(Tensor value, const char* op, std::initializer_list<const Var*> inputs,
           std::function<void(Node&)> backward_fn);
Var record_many(Tensor value, const char* op, const std::vector<Var>& inputs,
                std::function<void(Node&)> backward_fn);

// Process-wide count of gradient slots ever allocated.
std::uint64_t grad_allocations();

// Accumulates d root / d node into every reachable tracked node. The root must
// be a recorded scalar. Any reachable gradient that was already consumed by a
// previous backward() and not reset is a ContractError.
void backward(const Var& root);
// Zeroes every gradient reachable from root and clears the consumed flags.
void zero_grad_graph(const Var& root);

Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
// x[m x n] + row[1 x n] broadcast over rows
Var add_row(const Var& x, const Var& row);
Var scale(const Var& x, double s);
// x * s where s is a scalar Var
Var scale_by(const Var& x, const Var& s);
Var add_scalar(const Var& x, double c);
Var row_softmax(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var gelu(const Var& x);
Var relu(const Var& x);
Var exp(const Var& x);
Var square(const Var& x);
Var sum(const Var& x);
Var mean(const Var& x);
Var rows(const Var& x, std::size_t begin, std::size_t end);
Var row(const Var& x, std::size_t r);
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(const Var& table, std::span<const std::size_t> ids);
// Each row scaled to unit L2 norm; an all-zero row stays zero.
Var normalize_rows(const Var& x);
// Cosine of two vectors; 0 (with a warning) if either has zero norm.
Var cosine(const Var& a, const Var& b);
// Mean over rows of -log softmax(logits[i])[targets[i]].
Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> targets);
Var cross_entropy_logits(const Var& logits, std::size_t target);
// Mean binary cross-entropy of sigmoid(logits) against labels in {0,1}.
Var bce_with_logits(const Var& logits, std::span<const double> labels);

}  // namespace laip::ad
