#pragma once

// Test-only reference implementations, kept independent of the library's
// compute paths. Everything here is deliberately naive.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

// Plain triple-loop matmul, ijk order.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int l = 0; l < k; ++l)
        s += a[static_cast<std::size_t>(i) * k + l] * b[static_cast<std::size_t>(l) * n + j];
      c[static_cast<std::size_t>(i) * n + j] = s;
    }
  return c;
}

// Direct exp/sum softmax of one row (no max subtraction, fine for small values).
inline std::vector<double> softmax_row(const std::vector<double>& z) {
  double denom = 0;
  for (double v : z) denom += std::exp(v);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = std::exp(z[i]) / denom;
  return out;
}

// Bilinear form R[i][j] = sum_{u,v} C[i][u] * W[u][v] * T[j][v] + b.
inline std::vector<double> bilinear(const std::vector<double>& cond, const std::vector<double>& text,
                                    const std::vector<double>& w, double b, int nc, int np, int d) {
  std::vector<double> r(static_cast<std::size_t>(nc) * np, 0.0);
  for (int i = 0; i < nc; ++i)
    for (int j = 0; j < np; ++j) {
      double s = b;
      for (int u = 0; u < d; ++u)
        for (int v = 0; v < d; ++v)
          s += cond[static_cast<std::size_t>(i) * d + u] * w[static_cast<std::size_t>(u) * d + v] *
               text[static_cast<std::size_t>(j) * d + v];
      r[static_cast<std::size_t>(i) * np + j] = s;
    }
  return r;
}

// Single-head masked attention: out = softmax(Q K^T / sqrt(d) + mask) V,
// with mask entries 0 or -inf. Fully masked rows fall back to no mask.
inline std::vector<double> masked_attention(const std::vector<double>& q,
                                            const std::vector<double>& k,
                                            const std::vector<double>& v,
                                            const std::vector<double>& mask, int nq, int nk, int d,
                                            int dv) {
  std::vector<double> out(static_cast<std::size_t>(nq) * dv, 0.0);
  for (int i = 0; i < nq; ++i) {
    std::vector<double> logits(static_cast<std::size_t>(nk));
    bool any_open = false;
    for (int j = 0; j < nk; ++j) {
      double s = 0;
      for (int l = 0; l < d; ++l)
        s += q[static_cast<std::size_t>(i) * d + l] * k[static_cast<std::size_t>(j) * d + l];
      logits[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(d));
      if (mask.empty() || mask[static_cast<std::size_t>(i) * nk + j] == 0.0) any_open = true;
    }
    std::vector<double> weights(static_cast<std::size_t>(nk), 0.0);
    double denom = 0;
    for (int j = 0; j < nk; ++j) {
      const bool open = mask.empty() || any_open == false ||
                        mask[static_cast<std::size_t>(i) * nk + j] == 0.0;
      if (open) {
        weights[static_cast<std::size_t>(j)] = std::exp(logits[static_cast<std::size_t>(j)]);
        denom += weights[static_cast<std::size_t>(j)];
      }
    }
    for (int j = 0; j < nk; ++j) weights[static_cast<std::size_t>(j)] /= denom;
    for (int j = 0; j < nk; ++j)
      for (int l = 0; l < dv; ++l)
        out[static_cast<std::size_t>(i) * dv + l] +=
            weights[static_cast<std::size_t>(j)] * v[static_cast<std::size_t>(j) * dv + l];
  }
  return out;
}

// Pearson product-moment correlation, two-pass closed form.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// KL divergence between two 2-point distributions, 0*log0 = 0.
inline double kl2(double p1, double p2, double q1, double q2) {
  double s = 0;
  if (p1 > 0) s += p1 * std::log(p1 / q1);
  if (p2 > 0) s += p2 * std::log(p2 / q2);
  return s;
}

}  // namespace oracle
