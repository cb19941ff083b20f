#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "temdn/rng.hpp"

namespace temdn {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<double>> value;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  const std::vector<double>& val() const { return *value; }
  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value->size(), 0.0);
    return grad;
  }
};

// Value-semantics handle to a node in the differentiation graph. Node values
// are immutable once built; only leaf parameters are mutated (between steps)
// through mutable_data(). Grad buffers accumulate with += until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return static_cast<int64_t>(node_->value->size()); }
  const std::vector<double>& data() const { return *node_->value; }
  std::vector<double>& mutable_data() { return *node_->value; }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;

  // Gradient w.r.t. this tensor; zeros if backward never reached it.
  std::vector<double> grad() const;
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }
  void accumulate_grad(const std::vector<double>& g);

  // Fresh leaf sharing this tensor's value buffer (used to rebind parameters
  // into per-sample graphs so grad buffers stay graph-local).
  Tensor alias() const;
  // Constant leaf sharing the value buffer; gradients stop here.
  Tensor detach() const;

  std::shared_ptr<TensorNode> node() const { return node_; }
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

// ---- differentiable operations ----

Tensor matmul(const Tensor& a, const Tensor& b);
// add/mul broadcast the second argument when it is a scalar or its shape is a
// trailing suffix of the first argument's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor vexp(const Tensor& a);
Tensor vlog(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor concat_lastdim(const Tensor& a, const Tensor& b);
Tensor slice_lastdim(const Tensor& a, int64_t start, int64_t len);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor variance(const Tensor& a);  // population variance over all elements
Tensor broadcast_to(const Tensor& a, const Shape& shape);

// Convenience compositions (no new node kinds).
Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor sub(const Tensor& a, const Tensor& b);

// Structural utilities.
Tensor reshape(const Tensor& a, Shape shape);
// Rows shifted one step later in time; row 0 becomes zero.
Tensor time_shift(const Tensor& x);
// Per-row (channel-axis) normalization with learned scale/offset.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ---- generic dispatcher over the core op set ----

enum class OpKind {
  kMatmul,
  kAdd,
  kMul,
  kExp,
  kLog,
  kSigmoid,
  kRelu,
  kSquare,
  kConcatLastdim,
  kSliceLastdim,
  kSum,
  kMean,
  kVariance,
  kBroadcast,
};

struct OpAttrs {
  int64_t start = 0;
  int64_t len = 0;
  Shape shape;
};

Tensor apply(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

// ---- reverse-mode driver ----

void backward(const Tensor& loss);
// Generalized entry: seeds upstream gradients on several tensors at once.
void backward_seeded(const std::vector<std::pair<Tensor, std::vector<double>>>& seeds);

// Max relative error between analytic gradients of f and central finite
// differences, taken over every element of every parameter. f must be a
// deterministic map from the current parameter values to a scalar tensor.
double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double h = 1e-5);

}  // namespace temdn
