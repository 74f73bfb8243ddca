#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mps/rng.hpp"
#include "mps/tensor.hpp"

namespace mps {

/// Compares analytic gradients against central finite differences on
/// randomly probed parameter coordinates.
///
/// loss_forward   pure, deterministic evaluation of the objective
/// loss_backward  runs one forward+backward and leaves gradients on params
///                (grads are zeroed here first)
///
/// Returns the worst relative error max(|a-n|) / max(|a|, |n|, 1) over the
/// probes; the unit floor keeps near-zero gradients from blowing up the
/// ratio.
template <typename Real>
double grad_check(const std::function<double()>& loss_forward,
                  const std::function<void()>& loss_backward,
                  std::vector<std::pair<std::string, Tensor<Real>>>& params, int probes, double eps,
                  Rng& rng) {
  if (eps < 1e-6 || eps > 1e-3)
    throw std::invalid_argument("grad_check: eps must lie in [1e-6, 1e-3]");
  if (probes < 1) throw std::invalid_argument("grad_check: probe count must be positive");
  if (params.empty()) throw std::invalid_argument("grad_check: no parameters");

  const double f0 = loss_forward();
  if (loss_forward() != f0)
    throw std::runtime_error("grad_check: forward closure is not deterministic");

  for (auto& [name, t] : params) t.zero_grad();
  loss_backward();

  std::size_t total = 0;
  for (const auto& [name, t] : params) total += t.size();

  double worst = 0;
  for (int p = 0; p < probes; ++p) {
    std::size_t flat = static_cast<std::size_t>(rng.uniform_int(total));
    std::size_t which = 0;
    while (flat >= params[which].second.size()) {
      flat -= params[which].second.size();
      ++which;
    }
    Tensor<Real>& t = params[which].second;
    const Real saved = t.data()[flat];
    t.data()[flat] = static_cast<Real>(static_cast<double>(saved) + eps);
    const double f_plus = loss_forward();
    t.data()[flat] = static_cast<Real>(static_cast<double>(saved) - eps);
    const double f_minus = loss_forward();
    t.data()[flat] = saved;

    const double numeric = (f_plus - f_minus) / (2.0 * eps);
    const double analytic = t.has_grad() ? static_cast<double>(t.grad_values()[flat]) : 0.0;
    const double rel =
        std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1.0});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace mps
