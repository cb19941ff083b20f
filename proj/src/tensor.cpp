#include "temdn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace temdn {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
    }
  }
}

void check_shape(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": " + detail);
}

std::shared_ptr<TensorNode> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::make_shared<std::vector<double>>(std::move(data));
  n->requires_grad = requires_grad;
  return n;
}

// Builds an op node; parents and the backward closure are dropped when no
// input requires gradients, so inference graphs stay flat.
Tensor make_op(const char* op, Shape shape, std::vector<double> out,
               std::vector<Tensor> inputs, std::function<void(TensorNode&)> bw) {
  check_shape(shape_numel(shape) == static_cast<int64_t>(out.size()), op, "internal size mismatch");
  check_finite(out, op);
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value = std::make_shared<std::vector<double>>(std::move(out));
  bool rg = false;
  for (const auto& t : inputs) rg = rg || t.requires_grad();
  n->requires_grad = rg;
  if (rg) {
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(bw);
  }
  return Tensor(n);
}

// Broadcast classification for add/mul: returns the element index stride
// mapping from output index to b's index. b must be same-shape, scalar, or a
// trailing suffix of a's shape.
int64_t broadcast_period(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return 0;  // 0 marks "same shape"
  int64_t bn = shape_numel(b);
  if (bn == 1) return 1;
  check_shape(b.size() <= a.size(), op, "second operand rank exceeds first");
  size_t off = a.size() - b.size();
  for (size_t i = 0; i < b.size(); ++i) {
    check_shape(a[off + i] == b[i], op,
                "shape " + shape_str(b) + " is not a trailing suffix of " + shape_str(a));
  }
  return bn;
}

}  // namespace

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape_numel(shape) == static_cast<int64_t>(data.size()), "from_data",
              "shape " + shape_str(shape) + " does not match data length");
  check_finite(data, "from_data");
  return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), 0.0);
  return Tensor(make_leaf(std::move(shape), std::move(d), requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)), v);
  return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : d) x = rng.normal() * stddev;
  return from_data(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi, bool requires_grad) {
  std::vector<double> d(static_cast<size_t>(shape_numel(shape)));
  for (auto& x : d) x = rng.uniform(lo, hi);
  return from_data(std::move(shape), std::move(d), requires_grad);
}

double Tensor::item() const {
  check_shape(numel() == 1, "item", "tensor is not scalar");
  return (*node_->value)[0];
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value->size(), 0.0);
  return node_->grad;
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
  check_shape(g.size() == node_->value->size(), "accumulate_grad", "gradient size mismatch");
  auto& dst = node_->ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Tensor Tensor::alias() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->value = node_->value;
  n->requires_grad = node_->requires_grad;
  return Tensor(n);
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = node_->shape;
  n->value = node_->value;
  n->requires_grad = false;
  return Tensor(n);
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_shape(a.shape().size() == 2 && b.shape().size() == 2, "matmul", "operands must be 2-D");
  int64_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  check_shape(k == k2, "matmul",
              "inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = av.data() + i * k;
    double* orow = out.data() + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double aik = arow[p];
      const double* brow = bv.data() + p * n;
      for (int64_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  TensorNode* an = a.node().get();
  TensorNode* bn = b.node().get();
  auto aval = a.node()->value;
  auto bval = b.node()->value;
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [=](TensorNode& self) {
    const auto& g = self.grad;
    if (an->requires_grad) {
      auto& da = an->ensure_grad();
      // dA += g . B^T
      for (int64_t i = 0; i < m; ++i) {
        const double* grow = g.data() + i * n;
        double* darow = da.data() + i * k;
        for (int64_t p = 0; p < k; ++p) {
          const double* brow = bval->data() + p * n;
          double acc = 0.0;
          for (int64_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          darow[p] += acc;
        }
      }
    }
    if (bn->requires_grad) {
      auto& db = bn->ensure_grad();
      // dB += A^T . g
      for (int64_t p = 0; p < k; ++p) {
        double* dbrow = db.data() + p * n;
        for (int64_t i = 0; i < m; ++i) {
          double aip = (*aval)[i * k + p];
          const double* grow = g.data() + i * n;
          for (int64_t j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
        }
      }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  int64_t period = broadcast_period(a.shape(), b.shape(), "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  if (period == 0) {
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  } else {
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % period];
  }
  TensorNode* an = a.node().get();
  TensorNode* bn = b.node().get();
  return make_op("add", a.shape(), std::move(out), {a, b}, [=](TensorNode& self) {
    const auto& g = self.grad;
    if (an->requires_grad) {
      auto& da = an->ensure_grad();
      for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    }
    if (bn->requires_grad) {
      auto& db = bn->ensure_grad();
      if (period == 0) {
        for (size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      } else {
        for (size_t i = 0; i < g.size(); ++i) db[i % period] += g[i];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  int64_t period = broadcast_period(a.shape(), b.shape(), "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(av.size());
  if (period == 0) {
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  } else {
    for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % period];
  }
  TensorNode* an = a.node().get();
  TensorNode* bn = b.node().get();
  auto aval = a.node()->value;
  auto bval = b.node()->value;
  return make_op("mul", a.shape(), std::move(out), {a, b}, [=](TensorNode& self) {
    const auto& g = self.grad;
    if (an->requires_grad) {
      auto& da = an->ensure_grad();
      if (period == 0) {
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (*bval)[i];
      } else {
        for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (*bval)[i % period];
      }
    }
    if (bn->requires_grad) {
      auto& db = bn->ensure_grad();
      if (period == 0) {
        for (size_t i = 0; i < g.size(); ++i) db[i] += g[i] * (*aval)[i];
      } else {
        for (size_t i = 0; i < g.size(); ++i) db[i % period] += g[i] * (*aval)[i];
      }
    }
  });
}

namespace {

Tensor elementwise(const char* op, const Tensor& a, double (*fwd)(double),
                   double (*dfdx_from)(double x, double y)) {
  const auto& av = a.data();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  TensorNode* an = a.node().get();
  auto aval = a.node()->value;
  auto yval = std::make_shared<std::vector<double>>(out);
  return make_op(op, a.shape(), std::move(out), {a}, [=](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& da = an->ensure_grad();
    const auto& g = self.grad;
    for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * dfdx_from((*aval)[i], (*yval)[i]);
  });
}

}  // namespace

Tensor vexp(const Tensor& a) {
  return elementwise(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor vlog(const Tensor& a) {
  return elementwise(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return elementwise(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return elementwise(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return elementwise(
      "square", a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  check_shape(!sa.empty() && sa.size() == sb.size(), "concat-lastdim", "rank mismatch");
  for (size_t i = 0; i + 1 < sa.size(); ++i)
    check_shape(sa[i] == sb[i], "concat-lastdim", "leading dims differ");
  int64_t da = sa.back(), db = sb.back();
  int64_t rows = shape_numel(sa) / da;
  Shape out_shape = sa;
  out_shape.back() = da + db;
  std::vector<double> out(static_cast<size_t>(rows * (da + db)));
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int64_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * (da + db), av.data() + r * da, sizeof(double) * da);
    std::memcpy(out.data() + r * (da + db) + da, bv.data() + r * db, sizeof(double) * db);
  }
  TensorNode* an = a.node().get();
  TensorNode* bn = b.node().get();
  return make_op("concat-lastdim", std::move(out_shape), std::move(out), {a, b},
                 [=](TensorNode& self) {
                   const auto& g = self.grad;
                   if (an->requires_grad) {
                     auto& ga = an->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t j = 0; j < da; ++j) ga[r * da + j] += g[r * (da + db) + j];
                   }
                   if (bn->requires_grad) {
                     auto& gb = bn->ensure_grad();
                     for (int64_t r = 0; r < rows; ++r)
                       for (int64_t j = 0; j < db; ++j) gb[r * db + j] += g[r * (da + db) + da + j];
                   }
                 });
}

Tensor slice_lastdim(const Tensor& a, int64_t start, int64_t len) {
  const Shape& sa = a.shape();
  check_shape(!sa.empty(), "slice-lastdim", "rank 0 input");
  int64_t d = sa.back();
  check_shape(start >= 0 && len >= 1 && start + len <= d, "slice-lastdim", "range out of bounds");
  int64_t rows = shape_numel(sa) / d;
  Shape out_shape = sa;
  out_shape.back() = len;
  std::vector<double> out(static_cast<size_t>(rows * len));
  const auto& av = a.data();
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * len, av.data() + r * d + start, sizeof(double) * len);
  TensorNode* an = a.node().get();
  return make_op("slice-lastdim", std::move(out_shape), std::move(out), {a},
                 [=](TensorNode& self) {
                   if (!an->requires_grad) return;
                   auto& ga = an->ensure_grad();
                   const auto& g = self.grad;
                   for (int64_t r = 0; r < rows; ++r)
                     for (int64_t j = 0; j < len; ++j) ga[r * d + start + j] += g[r * len + j];
                 });
}

Tensor sum(const Tensor& a) {
  const auto& av = a.data();
  double s = 0.0;
  for (double x : av) s += x;  // fixed left-to-right order
  TensorNode* an = a.node().get();
  return make_op("sum", {1}, {s}, {a}, [=](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& ga = an->ensure_grad();
    double g = self.grad[0];
    for (auto& x : ga) x += g;
  });
}

Tensor mean(const Tensor& a) {
  const auto& av = a.data();
  double s = 0.0;
  for (double x : av) s += x;
  double n = static_cast<double>(av.size());
  TensorNode* an = a.node().get();
  return make_op("mean", {1}, {s / n}, {a}, [=](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& ga = an->ensure_grad();
    double g = self.grad[0] / n;
    for (auto& x : ga) x += g;
  });
}

Tensor variance(const Tensor& a) {
  const auto& av = a.data();
  double n = static_cast<double>(av.size());
  double mu = 0.0;
  for (double x : av) mu += x;
  mu /= n;
  double v = 0.0;
  for (double x : av) v += (x - mu) * (x - mu);
  v /= n;
  TensorNode* an = a.node().get();
  auto aval = a.node()->value;
  return make_op("variance", {1}, {v}, {a}, [=](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& ga = an->ensure_grad();
    double g = self.grad[0];
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += g * 2.0 * ((*aval)[i] - mu) / n;
  });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  int64_t period = broadcast_period(shape, a.shape(), "broadcast");
  int64_t n = shape_numel(shape);
  const auto& av = a.data();
  std::vector<double> out(static_cast<size_t>(n));
  if (period == 0) {
    out = av;
  } else {
    for (int64_t i = 0; i < n; ++i) out[i] = av[i % period];
  }
  TensorNode* an = a.node().get();
  return make_op("broadcast", shape, std::move(out), {a}, [=](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& ga = an->ensure_grad();
    const auto& g = self.grad;
    if (period == 0) {
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    } else {
      for (size_t i = 0; i < g.size(); ++i) ga[i % period] += g[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }

Tensor add_const(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape(shape_numel(shape) == a.numel(), "reshape", "element count mismatch");
  std::vector<double> out = a.data();
  TensorNode* an = a.node().get();
  return make_op("reshape", std::move(shape), std::move(out), {a}, [=](TensorNode& self) {
    if (!an->requires_grad) return;
    auto& ga = an->ensure_grad();
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor time_shift(const Tensor& x) {
  check_shape(x.shape().size() == 2, "time_shift", "input must be T x C");
  int64_t t = x.shape()[0], c = x.shape()[1];
  const auto& xv = x.data();
  std::vector<double> out(xv.size(), 0.0);
  for (int64_t r = 1; r < t; ++r)
    std::memcpy(out.data() + r * c, xv.data() + (r - 1) * c, sizeof(double) * c);
  TensorNode* xn = x.node().get();
  return make_op("time_shift", x.shape(), std::move(out), {x}, [=](TensorNode& self) {
    if (!xn->requires_grad) return;
    auto& gx = xn->ensure_grad();
    const auto& g = self.grad;
    for (int64_t r = 0; r < t - 1; ++r)
      for (int64_t j = 0; j < c; ++j) gx[r * c + j] += g[(r + 1) * c + j];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_shape(x.shape().size() == 2, "layer_norm", "input must be T x C");
  int64_t t = x.shape()[0], c = x.shape()[1];
  check_shape(gamma.shape() == Shape{c} && beta.shape() == Shape{c}, "layer_norm",
              "scale/offset must be length C");
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  std::vector<double> out(xv.size());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(t));
  for (int64_t r = 0; r < t; ++r) {
    const double* row = xv.data() + r * c;
    double mu = 0.0;
    for (int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int64_t j = 0; j < c; ++j) {
      double xh = (row[j] - mu) * rs;
      (*xhat)[r * c + j] = xh;
      out[r * c + j] = xh * gv[j] + bv[j];
    }
  }
  TensorNode* xn = x.node().get();
  TensorNode* gn = gamma.node().get();
  TensorNode* bn = beta.node().get();
  auto gval = gamma.node()->value;
  return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                 [=](TensorNode& self) {
                   const auto& g = self.grad;
                   if (gn->requires_grad) {
                     auto& dg = gn->ensure_grad();
                     for (int64_t r = 0; r < t; ++r)
                       for (int64_t j = 0; j < c; ++j) dg[j] += g[r * c + j] * (*xhat)[r * c + j];
                   }
                   if (bn->requires_grad) {
                     auto& db = bn->ensure_grad();
                     for (int64_t r = 0; r < t; ++r)
                       for (int64_t j = 0; j < c; ++j) db[j] += g[r * c + j];
                   }
                   if (xn->requires_grad) {
                     auto& dx = xn->ensure_grad();
                     for (int64_t r = 0; r < t; ++r) {
                       double mean_dy = 0.0, mean_dyxh = 0.0;
                       for (int64_t j = 0; j < c; ++j) {
                         double dy = g[r * c + j] * (*gval)[j];
                         mean_dy += dy;
                         mean_dyxh += dy * (*xhat)[r * c + j];
                       }
                       mean_dy /= static_cast<double>(c);
                       mean_dyxh /= static_cast<double>(c);
                       for (int64_t j = 0; j < c; ++j) {
                         double dy = g[r * c + j] * (*gval)[j];
                         dx[r * c + j] +=
                             (*rstd)[r] * (dy - mean_dy - (*xhat)[r * c + j] * mean_dyxh);
                       }
                     }
                   }
                 });
}

Tensor apply(OpKind kind, const std::vector<Tensor>& in, const OpAttrs& attrs) {
  auto want = [&](size_t n, const char* op) {
    check_shape(in.size() == n, op, "wrong input count");
  };
  switch (kind) {
    case OpKind::kMatmul: want(2, "matmul"); return matmul(in[0], in[1]);
    case OpKind::kAdd: want(2, "add"); return add(in[0], in[1]);
    case OpKind::kMul: want(2, "mul"); return mul(in[0], in[1]);
    case OpKind::kExp: want(1, "exp"); return vexp(in[0]);
    case OpKind::kLog: want(1, "log"); return vlog(in[0]);
    case OpKind::kSigmoid: want(1, "sigmoid"); return sigmoid(in[0]);
    case OpKind::kRelu: want(1, "relu"); return relu(in[0]);
    case OpKind::kSquare: want(1, "square"); return square(in[0]);
    case OpKind::kConcatLastdim: want(2, "concat-lastdim"); return concat_lastdim(in[0], in[1]);
    case OpKind::kSliceLastdim:
      want(1, "slice-lastdim");
      return slice_lastdim(in[0], attrs.start, attrs.len);
    case OpKind::kSum: want(1, "sum"); return sum(in[0]);
    case OpKind::kMean: want(1, "mean"); return mean(in[0]);
    case OpKind::kVariance: want(1, "variance"); return variance(in[0]);
    case OpKind::kBroadcast: want(1, "broadcast"); return broadcast_to(in[0], attrs.shape);
  }
  throw std::invalid_argument("apply: unknown op kind");
}

// ---- backward ----

namespace {

// Iterative DFS post-order over the requires_grad subgraph; reversal gives a
// valid execution order for the backward closures.
std::vector<TensorNode*> topo_order(const std::vector<TensorNode*>& roots) {
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  for (TensorNode* root : roots) {
    if (!root->requires_grad || visited.count(root)) continue;
    visited.insert(root);
    stack.push_back({root, 0});
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        TensorNode* p = f.node->parents[f.next_parent++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
  }
  return order;
}

}  // namespace

void backward_seeded(const std::vector<std::pair<Tensor, std::vector<double>>>& seeds) {
  std::vector<TensorNode*> roots;
  for (const auto& [t, g] : seeds) {
    if (!t.requires_grad()) continue;
    if (g.size() != t.data().size())
      throw std::invalid_argument("backward: seed gradient size mismatch");
    auto& dst = t.node()->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    roots.push_back(t.node().get());
  }
  auto order = topo_order(roots);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  backward_seeded({{loss, {1.0}}});
}

double finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                         double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
  Tensor l0 = f();
  Tensor l1 = f();
  if (l0.item() != l1.item())
    throw std::runtime_error("finite_diff_check: f is not deterministic");
  // Fresh analytic gradients.
  for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
  Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  double max_err = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = const_cast<Tensor&>(params[pi]).mutable_data();
    for (size_t i = 0; i < data.size(); ++i) {
      double orig = data[i];
      data[i] = orig + h;
      double fp = f().item();
      data[i] = orig - h;
      double fm = f().item();
      data[i] = orig;
      double central = (fp - fm) / (2.0 * h);
      double a = analytic[pi][i];
      double err = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace temdn
