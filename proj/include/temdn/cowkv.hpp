#pragma once

#include <cstdint>
#include <vector>

#include "temdn/tensor.hpp"

namespace temdn {

// Per-channel parameters of the contextual weighted-key-value kernel:
// w is the positional decay weight, u the current-token bonus. Both are
// unconstrained reals and enter the kernel exactly as
//   weight(t, i) = exp(-(|t-i|-1) * w + k_i)   for i != t
//   weight(t, t) = exp(u + k_t)
// with the output being the weight-normalized sum of values.
struct CoWkvParams {
  std::vector<double> w;
  std::vector<double> u;
};

struct CoWkvGrads {
  std::vector<double> k;
  std::vector<double> v;
  std::vector<double> w;
  std::vector<double> u;
};

// Direct double-loop evaluation, O(T^2 C). Subtracts the per-(t,c) max
// exponent before exponentiating. This is the oracle the scan is checked
// against.
std::vector<double> cowkv_naive(const std::vector<double>& k, const std::vector<double>& v,
                                int64_t t_len, int64_t c_len, const CoWkvParams& p);

// Two-pass linear scan, O(T C), identical value to cowkv_naive within
// 1e-10 relative error. Accumulators carry a running max exponent
// (streaming log-sum-exp) so unbounded keys cannot overflow. When
// log_denom is non-null it receives log of the per-(t,c) weight sum,
// which the backward pass needs.
std::vector<double> cowkv_scan(const std::vector<double>& k, const std::vector<double>& v,
                               int64_t t_len, int64_t c_len, const CoWkvParams& p,
                               std::vector<double>* log_denom = nullptr);

// Analytic gradients of the kernel output, O(T C) via adjoint scans.
CoWkvGrads cowkv_grad(const std::vector<double>& k, const std::vector<double>& v,
                      int64_t t_len, int64_t c_len, const CoWkvParams& p,
                      const std::vector<double>& upstream);

// Tape op over T x C tensors with per-channel parameter vectors w, u.
Tensor cowkv(const Tensor& k, const Tensor& v, const Tensor& w, const Tensor& u);

}  // namespace temdn
