#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mps/tensor.hpp"

namespace mps {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled-weight-decay Adam. Moment buffers are keyed by registration
/// order, so the same parameter list must be passed to every step() call.
template <typename Real>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  long step_count() const { return step_; }

  void step(std::vector<std::pair<std::string, Tensor<Real>>>& params, double lr) {
    if (lr < 0) throw std::invalid_argument("AdamW::step: negative learning rate");
    if (moments_.empty()) {
      moments_.resize(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        moments_[p].m.assign(params[p].second.size(), 0.0);
        moments_[p].v.assign(params[p].second.size(), 0.0);
      }
    }
    if (moments_.size() != params.size())
      throw std::invalid_argument("AdamW::step: parameter list changed size");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t p = 0; p < params.size(); ++p) {
      Tensor<Real>& t = params[p].second;
      if (t.size() != moments_[p].m.size())
        throw std::invalid_argument("AdamW::step: parameter shape changed: " + params[p].first);
      t.ensure_grad();
      const Real* g = t.grad();
      Real* w = t.data();
      auto& m = moments_[p].m;
      auto& v = moments_[p].v;
      for (std::size_t i = 0; i < t.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        if (!std::isfinite(gi))
          throw std::runtime_error("AdamW::step: non-finite gradient in " + params[p].first);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        const double update = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i];
        w[i] = static_cast<Real>(w[i] - lr * update);
      }
    }
  }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamWConfig cfg_;
  std::vector<Moments> moments_;
  long step_ = 0;
};

/// Linear warmup 0 -> peak over [0, warmup], constant peak afterwards.
inline double lr_schedule(long step, long warmup, double peak) {
  if (warmup < 1) throw std::invalid_argument("lr_schedule: warmup must be >= 1");
  if (step < 0) throw std::invalid_argument("lr_schedule: step must be non-negative");
  if (step >= warmup) return peak;
  return peak * static_cast<double>(step) / static_cast<double>(warmup);
}

}  // namespace mps
