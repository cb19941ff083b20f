#include "temdn/cowkv.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace temdn {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void validate(const std::vector<double>& k, const std::vector<double>& v, int64_t t_len,
              int64_t c_len, const CoWkvParams& p) {
  if (t_len < 1) throw std::invalid_argument("cowkv: T must be >= 1");
  if (c_len < 1) throw std::invalid_argument("cowkv: C must be >= 1");
  size_t n = static_cast<size_t>(t_len * c_len);
  if (k.size() != n || v.size() != n)
    throw std::invalid_argument("cowkv: K and V must both be T x C");
  if (p.w.size() != static_cast<size_t>(c_len) || p.u.size() != static_cast<size_t>(c_len))
    throw std::invalid_argument("cowkv: w and u must have length C");
  for (double x : k)
    if (!std::isfinite(x)) throw std::invalid_argument("cowkv: non-finite K");
  for (double x : v)
    if (!std::isfinite(x)) throw std::invalid_argument("cowkv: non-finite V");
  for (int64_t c = 0; c < c_len; ++c)
    if (!std::isfinite(p.w[c]) || !std::isfinite(p.u[c]))
      throw std::invalid_argument("cowkv: non-finite params");
}

// One direction of the kernel sum in scaled form: value pair
// (sum_weights*V, sum_weights) = (a, b) * exp(m). Stepping in time decays by
// exp(-w), which is exact in this representation (m -= w).
struct ScanState {
  double m = kNegInf;
  double a = 0.0;
  double b = 0.0;

  void decay(double w) {
    if (m != kNegInf) m -= w;
  }
  void add(double key, double val) {
    if (m == kNegInf) {
      m = key;
      a = val;
      b = 1.0;
    } else if (key <= m) {
      double e = std::exp(key - m);
      a += val * e;
      b += e;
    } else {
      double r = std::exp(m - key);
      a = a * r + val;
      b = b * r + 1.0;
      m = key;
    }
  }
};

// Scan state extended with the position-weighted sums
//   q  = sum (dist-1) * exp(-(dist-1) w + k_i) * v_i
//   qb = same with v = 1
// needed for the w gradient. Recurrence: Q' = exp(-w) (Q + L).
struct ScanStateW {
  double m = kNegInf;
  double a = 0.0;
  double b = 0.0;
  double qa = 0.0;
  double qb = 0.0;

  void step(double w, double key, double val) {
    if (m != kNegInf) {
      qa += a;
      qb += b;
      m -= w;
    }
    if (m == kNegInf) {
      m = key;
      a = val;
      b = 1.0;
      qa = 0.0;
      qb = 0.0;
    } else if (key <= m) {
      double e = std::exp(key - m);
      a += val * e;
      b += e;
    } else {
      double r = std::exp(m - key);
      a = a * r + val;
      b = b * r + 1.0;
      qa *= r;
      qb *= r;
      m = key;
    }
  }
};

// Signed-mantissa accumulator used by the adjoint scans; two mantissas share
// one exponent because both sequences are injected at the same scale.
struct AdjState {
  double m = kNegInf;
  double h = 0.0;
  double q = 0.0;

  void decay(double w) {
    if (m != kNegInf) m -= w;
  }
  void add(double expo, double hv, double qv) {
    if (m == kNegInf) {
      m = expo;
      h = hv;
      q = qv;
    } else if (expo <= m) {
      double e = std::exp(expo - m);
      h += hv * e;
      q += qv * e;
    } else {
      double r = std::exp(m - expo);
      h = h * r + hv;
      q = q * r + qv;
      m = expo;
    }
  }
};

inline double exp_or_zero(double x) { return x == kNegInf ? 0.0 : std::exp(x); }

}  // namespace

std::vector<double> cowkv_naive(const std::vector<double>& k, const std::vector<double>& v,
                                int64_t t_len, int64_t c_len, const CoWkvParams& p) {
  validate(k, v, t_len, c_len, p);
  std::vector<double> out(static_cast<size_t>(t_len * c_len));
  for (int64_t t = 0; t < t_len; ++t) {
    for (int64_t c = 0; c < c_len; ++c) {
      double w = p.w[c];
      double maxe = p.u[c] + k[t * c_len + c];
      for (int64_t i = 0; i < t_len; ++i) {
        if (i == t) continue;
        double dist = static_cast<double>(i > t ? i - t : t - i);
        double e = -(dist - 1.0) * w + k[i * c_len + c];
        if (e > maxe) maxe = e;
      }
      double num = 0.0, den = 0.0;
      for (int64_t i = 0; i < t_len; ++i) {
        if (i == t) continue;
        double dist = static_cast<double>(i > t ? i - t : t - i);
        double e = std::exp(-(dist - 1.0) * w + k[i * c_len + c] - maxe);
        num += e * v[i * c_len + c];
        den += e;
      }
      double e = std::exp(p.u[c] + k[t * c_len + c] - maxe);
      num += e * v[t * c_len + c];
      den += e;
      out[t * c_len + c] = num / den;
    }
  }
  return out;
}

std::vector<double> cowkv_scan(const std::vector<double>& k, const std::vector<double>& v,
                               int64_t t_len, int64_t c_len, const CoWkvParams& p,
                               std::vector<double>* log_denom) {
  validate(k, v, t_len, c_len, p);
  size_t n = static_cast<size_t>(t_len * c_len);
  std::vector<double> out(n);
  if (log_denom) log_denom->assign(n, 0.0);

  // Backward pass: right[t] holds the i > t sums before token t is absorbed.
  std::vector<ScanState> right(n);
  std::vector<ScanState> col(static_cast<size_t>(c_len));
  for (int64_t t = t_len - 1; t >= 0; --t) {
    for (int64_t c = 0; c < c_len; ++c) {
      right[t * c_len + c] = col[c];
      col[c].decay(p.w[c]);
      col[c].add(k[t * c_len + c], v[t * c_len + c]);
    }
  }
  // Forward pass: left state plus center term combine into the output.
  std::vector<ScanState> left(static_cast<size_t>(c_len));
  for (int64_t t = 0; t < t_len; ++t) {
    for (int64_t c = 0; c < c_len; ++c) {
      ScanState& sl = left[c];
      const ScanState& sr = right[t * c_len + c];
      double cen = p.u[c] + k[t * c_len + c];
      double m = std::max(std::max(sl.m, sr.m), cen);
      double el = sl.m == kNegInf ? 0.0 : std::exp(sl.m - m);
      double er = sr.m == kNegInf ? 0.0 : std::exp(sr.m - m);
      double ec = std::exp(cen - m);
      double num = sl.a * el + sr.a * er + v[t * c_len + c] * ec;
      double den = sl.b * el + sr.b * er + ec;
      out[t * c_len + c] = num / den;
      if (log_denom) (*log_denom)[t * c_len + c] = m + std::log(den);
      sl.decay(p.w[c]);
      sl.add(k[t * c_len + c], v[t * c_len + c]);
    }
  }
  return out;
}

CoWkvGrads cowkv_grad(const std::vector<double>& k, const std::vector<double>& v, int64_t t_len,
                      int64_t c_len, const CoWkvParams& p, const std::vector<double>& upstream) {
  validate(k, v, t_len, c_len, p);
  size_t n = static_cast<size_t>(t_len * c_len);
  if (upstream.size() != n) throw std::invalid_argument("cowkv_grad: upstream size mismatch");
  for (double x : upstream)
    if (!std::isfinite(x)) throw std::invalid_argument("cowkv_grad: non-finite upstream");

  std::vector<double> log_denom;
  std::vector<double> wkv = cowkv_scan(k, v, t_len, c_len, p, &log_denom);

  CoWkvGrads g;
  g.k.assign(n, 0.0);
  g.v.assign(n, 0.0);
  g.w.assign(static_cast<size_t>(c_len), 0.0);
  g.u.assign(static_cast<size_t>(c_len), 0.0);

  // Let h_t = g_t / D_t and q_t = g_t wkv_t / D_t. Then with
  // S_z(i) = sum_t beta(t,i) z_t (the adjoint kernel application):
  //   dV_i = S_h(i)
  //   dK_i = V_i S_h(i) - S_q(i)
  //   du   = sum_t g_t e^{u+K_t-logD_t} (V_t - wkv_t)
  //   dw   = -sum_t h_t (G_t - wkv_t G'_t)
  // where G, G' are the (dist-1)-weighted kernel sums. Everything is carried
  // in scaled form; the forward-side sums use ScanStateW, the h/q sums use
  // signed-mantissa AdjState accumulators.
  std::vector<ScanStateW> fwd_right(n);
  std::vector<AdjState> adj_right(n);
  {
    std::vector<ScanStateW> fcol(static_cast<size_t>(c_len));
    std::vector<AdjState> acol(static_cast<size_t>(c_len));
    for (int64_t t = t_len - 1; t >= 0; --t) {
      for (int64_t c = 0; c < c_len; ++c) {
        size_t idx = static_cast<size_t>(t * c_len + c);
        fwd_right[idx] = fcol[c];
        adj_right[idx] = acol[c];
        fcol[c].step(p.w[c], k[idx], v[idx]);
        acol[c].decay(p.w[c]);
        acol[c].add(-log_denom[idx], upstream[idx], upstream[idx] * wkv[idx]);
      }
    }
  }
  std::vector<ScanStateW> fwd_left(static_cast<size_t>(c_len));
  std::vector<AdjState> adj_left(static_cast<size_t>(c_len));
  for (int64_t t = 0; t < t_len; ++t) {
    for (int64_t c = 0; c < c_len; ++c) {
      size_t idx = static_cast<size_t>(t * c_len + c);
      const ScanStateW& fl = fwd_left[c];
      const ScanStateW& fr = fwd_right[idx];
      const AdjState& al = adj_left[c];
      const AdjState& ar = adj_right[idx];
      double key = k[idx];
      double gug = upstream[idx];
      double cen = p.u[c] + key - log_denom[idx];  // <= 0 by construction

      double el = exp_or_zero(al.m == kNegInf ? kNegInf : al.m + key);
      double er = exp_or_zero(ar.m == kNegInf ? kNegInf : ar.m + key);
      double ecen = std::exp(cen);
      double s_h = al.h * el + ar.h * er + gug * ecen;
      double s_q = al.q * el + ar.q * er + gug * wkv[idx] * ecen;
      g.v[idx] = s_h;
      g.k[idx] = v[idx] * s_h - s_q;
      g.u[c] += gug * ecen * (v[idx] - wkv[idx]);

      double fel = exp_or_zero(fl.m == kNegInf ? kNegInf : fl.m - log_denom[idx]);
      double fer = exp_or_zero(fr.m == kNegInf ? kNegInf : fr.m - log_denom[idx]);
      double gsum = fl.qa * fel + fr.qa * fer;
      double gsum_den = fl.qb * fel + fr.qb * fer;
      g.w[c] -= gug * (gsum - wkv[idx] * gsum_den);

      fwd_left[c].step(p.w[c], key, v[idx]);
      adj_left[c].decay(p.w[c]);
      adj_left[c].add(-log_denom[idx], gug, gug * wkv[idx]);
    }
  }
  return g;
}

Tensor cowkv(const Tensor& k, const Tensor& v, const Tensor& w, const Tensor& u) {
  if (k.shape().size() != 2) throw std::invalid_argument("cowkv: K must be T x C");
  int64_t t_len = k.shape()[0], c_len = k.shape()[1];
  CoWkvParams p{w.data(), u.data()};
  std::vector<double> out = cowkv_scan(k.data(), v.data(), t_len, c_len, p);

  auto node = std::make_shared<TensorNode>();
  node->shape = k.shape();
  node->value = std::make_shared<std::vector<double>>(std::move(out));
  bool rg = k.requires_grad() || v.requires_grad() || w.requires_grad() || u.requires_grad();
  node->requires_grad = rg;
  if (rg) {
    node->parents = {k.node(), v.node(), w.node(), u.node()};
    auto kval = k.node()->value;
    auto vval = v.node()->value;
    auto wval = w.node()->value;
    auto uval = u.node()->value;
    TensorNode* kn = k.node().get();
    TensorNode* vn = v.node().get();
    TensorNode* wn = w.node().get();
    TensorNode* un = u.node().get();
    node->backward_fn = [=](TensorNode& self) {
      CoWkvParams params{*wval, *uval};
      CoWkvGrads gr = cowkv_grad(*kval, *vval, t_len, c_len, params, self.grad);
      if (kn->requires_grad) {
        auto& d = kn->ensure_grad();
        for (size_t i = 0; i < d.size(); ++i) d[i] += gr.k[i];
      }
      if (vn->requires_grad) {
        auto& d = vn->ensure_grad();
        for (size_t i = 0; i < d.size(); ++i) d[i] += gr.v[i];
      }
      if (wn->requires_grad) {
        auto& d = wn->ensure_grad();
        for (size_t i = 0; i < d.size(); ++i) d[i] += gr.w[i];
      }
      if (un->requires_grad) {
        auto& d = un->ensure_grad();
        for (size_t i = 0; i < d.size(); ++i) d[i] += gr.u[i];
      }
    };
  }
  return Tensor(node);
}

}  // namespace temdn
