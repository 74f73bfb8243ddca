#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mps/tensor.hpp"

namespace mps::ops {

namespace detail {

/// C[m x n] += A[m x k] * B[k x n], row-major. The ikj order keeps the inner
/// loop over contiguous C and B rows so it vectorizes without reassociation.
template <typename Real>
void mm_accum(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const Real* arow = a + static_cast<std::size_t>(i) * k;
    Real* crow = c + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const Real av = arow[l];
      const Real* brow = b + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C[m x n] += A[m x k] * B[n x k]^T. Dot products over contiguous rows,
/// four partial sums to keep a fixed deterministic reduction order.
template <typename Real>
void mm_nt_accum(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const Real* arow = a + static_cast<std::size_t>(i) * k;
    Real* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const Real* brow = b + static_cast<std::size_t>(j) * k;
      Real s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      int l = 0;
      for (; l + 4 <= k; l += 4) {
        s0 += arow[l] * brow[l];
        s1 += arow[l + 1] * brow[l + 1];
        s2 += arow[l + 2] * brow[l + 2];
        s3 += arow[l + 3] * brow[l + 3];
      }
      for (; l < k; ++l) s0 += arow[l] * brow[l];
      crow[j] += ((s0 + s1) + (s2 + s3));
    }
  }
}

/// C[k x n] += A[m x k]^T * B[m x n].
template <typename Real>
void mm_tn_accum(const Real* a, const Real* b, Real* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const Real* arow = a + static_cast<std::size_t>(i) * k;
    const Real* brow = b + static_cast<std::size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const Real av = arow[l];
      Real* crow = c + static_cast<std::size_t>(l) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Real>
bool any_requires_grad(const Tensor<Real>& a) {
  return a.requires_grad();
}

template <typename Real, typename... Rest>
bool any_requires_grad(const Tensor<Real>& a, const Rest&... rest) {
  return a.requires_grad() || any_requires_grad(rest...);
}

inline void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

}  // namespace detail

template <typename Real>
constexpr Real neg_inf() {
  return -std::numeric_limits<Real>::infinity();
}

// ---------------------------------------------------------------------------
// matmul family
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> matmul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.cols() != b.rows())
    detail::shape_error("matmul", "inner dimensions disagree (" + std::to_string(a.cols()) +
                                      " vs " + std::to_string(b.rows()) + ")");
  auto out = Tensor<Real>::zeros(a.rows(), b.cols());
  detail::mm_accum(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  if (tape.recording() && detail::any_requires_grad(a, b)) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([a, b, out]() mutable {
      const Real* g = out.grad();
      if (a.requires_grad())  // dA = dC * B^T
        detail::mm_nt_accum(g, b.data(), a.grad(), out.rows(), out.cols(), a.cols());
      if (b.requires_grad())  // dB = A^T * dC
        detail::mm_tn_accum(a.data(), g, b.grad(), a.rows(), a.cols(), out.cols());
    });
  }
  return out;
}

/// A[m x k] * B[n x k]^T -> [m x n].
template <typename Real>
Tensor<Real> matmul_nt(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.cols() != b.cols())
    detail::shape_error("matmul_nt", "inner dimensions disagree");
  auto out = Tensor<Real>::zeros(a.rows(), b.rows());
  detail::mm_nt_accum(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.rows());
  if (tape.recording() && detail::any_requires_grad(a, b)) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([a, b, out]() mutable {
      const Real* g = out.grad();
      if (a.requires_grad())  // dA = dC * B
        detail::mm_accum(g, b.data(), a.grad(), out.rows(), out.cols(), b.cols());
      if (b.requires_grad())  // dB = dC^T * A
        detail::mm_tn_accum(g, a.data(), b.grad(), out.rows(), out.cols(), a.cols());
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// elementwise / broadcast
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> add(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) detail::shape_error("add", "shape mismatch");
  auto out = Tensor<Real>::zeros(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (tape.recording() && detail::any_requires_grad(a, b)) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([a, b, out]() mutable {
      const Real* g = out.grad();
      if (a.requires_grad()) {
        Real* ga = a.grad();
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        Real* gb = b.grad();
        for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

/// X[r x c] + row[1 x c], broadcast over rows.
template <typename Real>
Tensor<Real> add_rowvec(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) detail::shape_error("add_rowvec", "row must be 1 x cols(x)");
  auto out = Tensor<Real>::zeros(x.rows(), x.cols());
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < x.cols(); ++j) out.at(i, j) = x.at(i, j) + row.at(0, j);
  if (tape.recording() && detail::any_requires_grad(x, row)) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([x, row, out]() mutable {
      const Real* g = out.grad();
      if (x.requires_grad()) {
        Real* gx = x.grad();
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i];
      }
      if (row.requires_grad()) {
        Real* gr = row.grad();
        for (int i = 0; i < out.rows(); ++i)
          for (int j = 0; j < out.cols(); ++j) gr[j] += g[static_cast<std::size_t>(i) * out.cols() + j];
      }
    });
  }
  return out;
}

/// X + s, scalar (1x1 tensor) broadcast to every entry.
template <typename Real>
Tensor<Real> add_scalar(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& s) {
  if (s.size() != 1) detail::shape_error("add_scalar", "s must be 1x1");
  auto out = Tensor<Real>::zeros(x.rows(), x.cols());
  const Real sv = s.item();
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] + sv;
  if (tape.recording() && detail::any_requires_grad(x, s)) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([x, s, out]() mutable {
      const Real* g = out.grad();
      if (x.requires_grad()) {
        Real* gx = x.grad();
        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i];
      }
      if (s.requires_grad()) {
        Real acc = 0;
        for (std::size_t i = 0; i < out.size(); ++i) acc += g[i];
        s.grad()[0] += acc;
      }
    });
  }
  return out;
}

/// Hadamard product (same shape; 1x1 * 1x1 covers learned-scalar scaling).
template <typename Real>
Tensor<Real> mul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) detail::shape_error("mul", "shape mismatch");
  auto out = Tensor<Real>::zeros(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (tape.recording() && detail::any_requires_grad(a, b)) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([a, b, out]() mutable {
      const Real* g = out.grad();
      if (a.requires_grad()) {
        Real* ga = a.grad();
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        Real* gb = b.grad();
        for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[i] * a.data()[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> scale_const(Tape<Real>& tape, const Tensor<Real>& x, Real k) {
  auto out = Tensor<Real>::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * k;
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([x, out, k]() mutable {
      const Real* g = out.grad();
      Real* gx = x.grad();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * k;
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> gelu(Tape<Real>& tape, const Tensor<Real>& x) {
  auto out = Tensor<Real>::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = static_cast<double>(x.data()[i]);
    out.data()[i] = static_cast<Real>(v * 0.5 * (1.0 + std::erf(v * std::numbers::inv_sqrt2)));
  }
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([x, out]() mutable {
      const Real* g = out.grad();
      Real* gx = x.grad();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = static_cast<double>(x.data()[i]);
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::inv_sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        gx[i] += g[i] * static_cast<Real>(cdf + v * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <typename Real>
Tensor<Real> gather_rows(Tape<Real>& tape, const Tensor<Real>& table, const std::vector<int>& ids) {
  if (ids.empty()) detail::shape_error("gather_rows", "empty index list");
  for (int id : ids)
    if (id < 0 || id >= table.rows()) detail::shape_error("gather_rows", "row index out of range");
  auto out = Tensor<Real>::zeros(static_cast<int>(ids.size()), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(table.data() + static_cast<std::size_t>(ids[r]) * table.cols(), table.cols(),
                out.data() + r * table.cols());
  if (tape.recording() && table.requires_grad()) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([table, out, ids]() mutable {
      const Real* g = out.grad();
      Real* gt = table.grad();
      const int c = table.cols();
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (int j = 0; j < c; ++j) gt[static_cast<std::size_t>(ids[r]) * c + j] += g[r * c + j];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> concat_rows(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.cols() != b.cols()) detail::shape_error("concat_rows", "column counts differ");
  auto out = Tensor<Real>::zeros(a.rows() + b.rows(), a.cols());
  std::copy_n(a.data(), a.size(), out.data());
  std::copy_n(b.data(), b.size(), out.data() + a.size());
  if (tape.recording() && detail::any_requires_grad(a, b)) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([a, b, out]() mutable {
      const Real* g = out.grad();
      if (a.requires_grad()) {
        Real* ga = a.grad();
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        Real* gb = b.grad();
        for (std::size_t i = 0; i < b.size(); ++i) gb[i] += g[a.size() + i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> slice_cols(Tape<Real>& tape, const Tensor<Real>& x, int c0, int c1) {
  if (c0 < 0 || c1 > x.cols() || c0 >= c1) detail::shape_error("slice_cols", "bad column range");
  const int w = c1 - c0;
  auto out = Tensor<Real>::zeros(x.rows(), w);
  for (int i = 0; i < x.rows(); ++i)
    std::copy_n(x.data() + static_cast<std::size_t>(i) * x.cols() + c0, w,
                out.data() + static_cast<std::size_t>(i) * w);
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([x, out, c0, w]() mutable {
      const Real* g = out.grad();
      Real* gx = x.grad();
      for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < w; ++j)
          gx[static_cast<std::size_t>(i) * x.cols() + c0 + j] += g[static_cast<std::size_t>(i) * w + j];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> concat_cols(Tape<Real>& tape, const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) detail::shape_error("concat_cols", "no parts");
  int total = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) detail::shape_error("concat_cols", "row counts differ");
    total += p.cols();
  }
  auto out = Tensor<Real>::zeros(parts.front().rows(), total);
  int off = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    for (int i = 0; i < p.rows(); ++i)
      std::copy_n(p.data() + static_cast<std::size_t>(i) * p.cols(), p.cols(),
                  out.data() + static_cast<std::size_t>(i) * total + off);
    off += p.cols();
    needs_grad = needs_grad || p.requires_grad();
  }
  if (tape.recording() && needs_grad) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([parts, out, total]() mutable {
      const Real* g = out.grad();
      int off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          Real* gp = p.grad();
          for (int i = 0; i < p.rows(); ++i)
            for (int j = 0; j < p.cols(); ++j)
              gp[static_cast<std::size_t>(i) * p.cols() + j] +=
                  g[static_cast<std::size_t>(i) * total + off + j];
        }
        off += p.cols();
      }
    });
  }
  return out;
}

/// Column-wise mean over rows: [r x c] -> [1 x c].
template <typename Real>
Tensor<Real> mean_rows(Tape<Real>& tape, const Tensor<Real>& x) {
  auto out = Tensor<Real>::zeros(1, x.cols());
  const Real inv = Real(1) / static_cast<Real>(x.rows());
  for (int j = 0; j < x.cols(); ++j) {
    Real acc = 0;
    for (int i = 0; i < x.rows(); ++i) acc += x.at(i, j);
    out.at(0, j) = acc * inv;
  }
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([x, out, inv]() mutable {
      const Real* g = out.grad();
      Real* gx = x.grad();
      for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) gx[static_cast<std::size_t>(i) * x.cols() + j] += g[j] * inv;
    });
  }
  return out;
}

/// Replicate a 1 x c row n times.
template <typename Real>
Tensor<Real> repeat_row(Tape<Real>& tape, const Tensor<Real>& row, int n) {
  if (row.rows() != 1) detail::shape_error("repeat_row", "input must have one row");
  if (n < 1) detail::shape_error("repeat_row", "replication count must be >= 1");
  auto out = Tensor<Real>::zeros(n, row.cols());
  for (int i = 0; i < n; ++i)
    std::copy_n(row.data(), row.cols(), out.data() + static_cast<std::size_t>(i) * row.cols());
  if (tape.recording() && row.requires_grad()) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([row, out, n]() mutable {
      const Real* g = out.grad();
      Real* gr = row.grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < row.cols(); ++j) gr[j] += g[static_cast<std::size_t>(i) * row.cols() + j];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sum_all(Tape<Real>& tape, const Tensor<Real>& x) {
  double acc = 0;  // accumulate reductions in double regardless of Real
  for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x.data()[i]);
  auto out = Tensor<Real>::scalar(static_cast<Real>(acc));
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([x, out]() mutable {
      const Real g = out.grad()[0];
      Real* gx = x.grad();
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// softmax / normalization
// ---------------------------------------------------------------------------

namespace detail {

/// Shared masked-softmax forward. mask == nullptr means no masking. Mask
/// entries must be exactly 0 or -inf; -inf is skipped before exponentiation
/// so it can never produce a NaN. Rows with every entry masked come out as
/// all zeros and are reported through fully_masked.
template <typename Real>
void masked_softmax_forward(const Real* z, const Real* mask, Real* out, int rows, int cols,
                            std::vector<int>* fully_masked) {
  const Real ninf = -std::numeric_limits<Real>::infinity();
  for (int i = 0; i < rows; ++i) {
    const Real* zr = z + static_cast<std::size_t>(i) * cols;
    const Real* mr = mask ? mask + static_cast<std::size_t>(i) * cols : nullptr;
    Real* orow = out + static_cast<std::size_t>(i) * cols;
    Real mx = ninf;
    for (int j = 0; j < cols; ++j) {
      if (mr && mr[j] != Real(0)) continue;
      mx = std::max(mx, zr[j]);
    }
    if (mx == ninf) {  // every entry masked
      std::fill_n(orow, cols, Real(0));
      if (fully_masked) fully_masked->push_back(i);
      continue;
    }
    double denom = 0;
    for (int j = 0; j < cols; ++j) {
      if (mr && mr[j] != Real(0)) {
        orow[j] = Real(0);
      } else {
        const double e = std::exp(static_cast<double>(zr[j] - mx));
        orow[j] = static_cast<Real>(e);
        denom += e;
      }
    }
    const Real inv = static_cast<Real>(1.0 / denom);
    for (int j = 0; j < cols; ++j) orow[j] *= inv;
  }
}

template <typename Real>
void validate_mask(const Tensor<Real>& mask) {
  const Real ninf = -std::numeric_limits<Real>::infinity();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const Real v = mask.data()[i];
    if (v != Real(0) && v != ninf)
      throw std::invalid_argument("masked_softmax_rows: mask entries must be 0 or -inf");
  }
}

}  // namespace detail

/// Row softmax with an additive {0, -inf} mask. Masked positions get exactly
/// zero weight; rows that are fully masked come out all-zero and their
/// indices are appended to fully_masked (callers decide how to recover).
/// When the mask participates in the graph (straight-through training) it
/// receives the same gradient as the logits at unmasked positions.
template <typename Real>
Tensor<Real> masked_softmax_rows(Tape<Real>& tape, const Tensor<Real>& logits,
                                 const Tensor<Real>& mask,
                                 std::vector<int>* fully_masked = nullptr) {
  if (mask.defined()) {
    if (mask.rows() != logits.rows() || mask.cols() != logits.cols())
      detail::shape_error("masked_softmax_rows", "mask shape mismatch");
    detail::validate_mask(mask);
  }
  auto out = Tensor<Real>::zeros(logits.rows(), logits.cols());
  detail::masked_softmax_forward(logits.data(), mask.defined() ? mask.data() : nullptr, out.data(),
                                 logits.rows(), logits.cols(), fully_masked);
  const bool mask_grad = mask.defined() && mask.requires_grad();
  if (tape.recording() && (logits.requires_grad() || mask_grad)) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([logits, mask, out, mask_grad]() mutable {
      const int rows = out.rows(), cols = out.cols();
      const Real* o = out.data();
      const Real* g = out.grad();
      Real* gz = logits.requires_grad() ? logits.grad() : nullptr;
      Real* gm = mask_grad ? mask.grad() : nullptr;
      for (int i = 0; i < rows; ++i) {
        const Real* orow = o + static_cast<std::size_t>(i) * cols;
        const Real* grow = g + static_cast<std::size_t>(i) * cols;
        double dot = 0;
        for (int j = 0; j < cols; ++j) dot += static_cast<double>(grow[j]) * orow[j];
        for (int j = 0; j < cols; ++j) {
          const Real d = orow[j] * static_cast<Real>(grow[j] - static_cast<Real>(dot));
          const std::size_t idx = static_cast<std::size_t>(i) * cols + j;
          if (gz) gz[idx] += d;
          if (gm) gm[idx] += d;  // additive mask: same local derivative as the logit
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> softmax_rows(Tape<Real>& tape, const Tensor<Real>& x) {
  return masked_softmax_rows(tape, x, Tensor<Real>{}, nullptr);
}

/// Row-wise layer normalization with learned gain/bias (both 1 x c).
template <typename Real>
Tensor<Real> layer_norm_rows(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gain,
                             const Tensor<Real>& bias, Real eps = Real(1e-5)) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols())
    detail::shape_error("layer_norm_rows", "gain/bias must be 1 x cols(x)");
  const int rows = x.rows(), cols = x.cols();
  auto out = Tensor<Real>::zeros(rows, cols);
  auto xhat = Tensor<Real>::zeros(rows, cols);   // kept for backward
  std::vector<Real> inv_std(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) {
    const Real* xr = x.data() + static_cast<std::size_t>(i) * cols;
    double mean = 0;
    for (int j = 0; j < cols; ++j) mean += xr[j];
    mean /= cols;
    double var = 0;
    for (int j = 0; j < cols; ++j) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    var /= cols;
    const Real is = static_cast<Real>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < cols; ++j) {
      const Real h = (xr[j] - static_cast<Real>(mean)) * is;
      xhat.at(i, j) = h;
      out.at(i, j) = gain.at(0, j) * h + bias.at(0, j);
    }
  }
  if (tape.recording() && detail::any_requires_grad(x, gain, bias)) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([x, gain, bias, out, xhat, inv_std]() mutable {
      const int rows = x.rows(), cols = x.cols();
      const Real* g = out.grad();
      for (int i = 0; i < rows; ++i) {
        const Real* grow = g + static_cast<std::size_t>(i) * cols;
        const Real* hrow = xhat.data() + static_cast<std::size_t>(i) * cols;
        if (gain.requires_grad() || bias.requires_grad()) {
          Real* gg = gain.requires_grad() ? gain.grad() : nullptr;
          Real* gb = bias.requires_grad() ? bias.grad() : nullptr;
          for (int j = 0; j < cols; ++j) {
            if (gg) gg[j] += grow[j] * hrow[j];
            if (gb) gb[j] += grow[j];
          }
        }
        if (x.requires_grad()) {
          // dx = inv_std * (u - mean(u) - xhat * mean(u .* xhat)), u = g .* gain
          double mu = 0, mh = 0;
          for (int j = 0; j < cols; ++j) {
            const double u = static_cast<double>(grow[j]) * gain.at(0, j);
            mu += u;
            mh += u * hrow[j];
          }
          mu /= cols;
          mh /= cols;
          Real* gx = x.grad();
          const Real is = inv_std[static_cast<std::size_t>(i)];
          for (int j = 0; j < cols; ++j) {
            const double u = static_cast<double>(grow[j]) * gain.at(0, j);
            gx[static_cast<std::size_t>(i) * cols + j] +=
                is * static_cast<Real>(u - mu - static_cast<double>(hrow[j]) * mh);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// condition mask
// ---------------------------------------------------------------------------

/// Threshold a relevance mask into the {0, -inf} attention sentinel form.
/// Entries below the threshold become -inf, the rest 0. With
/// straight_through the backward pass treats the op as identity so the
/// relevance parameters keep receiving gradient; otherwise the mask path
/// carries none.
template <typename Real>
Tensor<Real> binarize_mask(Tape<Real>& tape, const Tensor<Real>& mask_values, Real threshold,
                           bool straight_through) {
  if (!std::isfinite(static_cast<double>(threshold)) && threshold != neg_inf<Real>() &&
      threshold != std::numeric_limits<Real>::infinity())
    detail::shape_error("binarize_mask", "threshold must not be NaN");
  auto out = Tensor<Real>::zeros(mask_values.rows(), mask_values.cols());
  for (std::size_t i = 0; i < mask_values.size(); ++i)
    out.data()[i] = mask_values.data()[i] < threshold ? neg_inf<Real>() : Real(0);
  if (tape.recording() && straight_through && mask_values.requires_grad()) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([mask_values, out]() mutable {
      const Real* g = out.grad();
      Real* gm = mask_values.grad();
      for (std::size_t i = 0; i < mask_values.size(); ++i) gm[i] += g[i];
    });
  }
  return out;
}

/// Copy of a {0, -inf} mask with the listed rows forced to all-zero
/// (unmasked). Grad passes through unchanged, matching the straight-through
/// treatment of the whole mask path.
template <typename Real>
Tensor<Real> unmask_rows(Tape<Real>& tape, const Tensor<Real>& mask, const std::vector<int>& rows) {
  auto out = Tensor<Real>::zeros(mask.rows(), mask.cols());
  std::copy_n(mask.data(), mask.size(), out.data());
  for (int r : rows) {
    if (r < 0 || r >= mask.rows()) detail::shape_error("unmask_rows", "row index out of range");
    std::fill_n(out.data() + static_cast<std::size_t>(r) * mask.cols(), mask.cols(), Real(0));
  }
  if (tape.recording() && mask.requires_grad()) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([mask, out]() mutable {
      const Real* g = out.grad();
      Real* gm = mask.grad();
      for (std::size_t i = 0; i < mask.size(); ++i) gm[i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pairwise preference loss
// ---------------------------------------------------------------------------

/// KL(p || softmax(s1, s2)) for one preference pair. log-probabilities come
/// from the log-sum-exp directly, so the graph value stays finite and the
/// analytic gradient (phat - p) is exact even deep in saturation.
template <typename Real>
Tensor<Real> pair_kl_loss(Tape<Real>& tape, const Tensor<Real>& s1, const Tensor<Real>& s2,
                          double p1, double p2) {
  if (s1.size() != 1 || s2.size() != 1) detail::shape_error("pair_kl_loss", "scores must be scalar");
  const double a = static_cast<double>(s1.item());
  const double b = static_cast<double>(s2.item());
  const double m = std::max(a, b);
  const double z = std::exp(a - m) + std::exp(b - m);
  const double log_z = std::log(z);
  const double logp1 = (a - m) - log_z;
  const double logp2 = (b - m) - log_z;
  const double phat1 = std::exp(logp1);
  const double phat2 = std::exp(logp2);
  double loss = 0;
  if (p1 > 0) loss += p1 * (std::log(p1) - logp1);
  if (p2 > 0) loss += p2 * (std::log(p2) - logp2);
  auto out = Tensor<Real>::scalar(static_cast<Real>(loss));
  if (tape.recording() && detail::any_requires_grad(s1, s2)) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape.record([s1, s2, out, phat1, phat2, p1, p2]() mutable {
      const Real g = out.grad()[0];
      if (s1.requires_grad()) s1.grad()[0] += g * static_cast<Real>(phat1 - p1);
      if (s2.requires_grad()) s2.grad()[0] += g * static_cast<Real>(phat2 - p2);
    });
  }
  return out;
}

}  // namespace mps::ops
