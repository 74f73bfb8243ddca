#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mps {

/// Dense row-major matrix with an optional gradient buffer. Scalars are 1x1.
/// Copies are shallow (shared payload): ops hand tensors around by value and
/// backward closures accumulate into the same grad buffer the caller sees.
template <typename Real>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(int rows, int cols, bool requires_grad = false) {
    return Tensor(rows, cols, std::vector<Real>(check_dims(rows, cols)), requires_grad);
  }

  static Tensor from(int rows, int cols, std::vector<Real> data, bool requires_grad = false) {
    if (data.size() != check_dims(rows, cols))
      throw std::invalid_argument("Tensor::from: data length does not match shape");
    return Tensor(rows, cols, std::move(data), requires_grad);
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return Tensor(1, 1, std::vector<Real>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(p_); }
  int rows() const { return p_->rows; }
  int cols() const { return p_->cols; }
  std::size_t size() const { return p_->value.size(); }

  Real* data() { return p_->value.data(); }
  const Real* data() const { return p_->value.data(); }
  std::vector<Real>& values() { return p_->value; }
  const std::vector<Real>& values() const { return p_->value; }

  Real& at(int r, int c) { return p_->value[static_cast<std::size_t>(r) * p_->cols + c]; }
  Real at(int r, int c) const { return p_->value[static_cast<std::size_t>(r) * p_->cols + c]; }

  /// Value of a 1x1 tensor.
  Real item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
    return p_->value[0];
  }

  bool requires_grad() const { return p_ && p_->requires_grad; }
  void set_requires_grad(bool b) { p_->requires_grad = b; }

  bool has_grad() const { return p_ && !p_->grad.empty(); }

  /// Gradient buffer, allocated zero-filled on first use (same shape as data).
  Real* grad() {
    ensure_grad();
    return p_->grad.data();
  }
  const std::vector<Real>& grad_values() const { return p_->grad; }

  void ensure_grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->value.size(), Real(0));
  }

  void zero_grad() {
    if (!p_->grad.empty()) p_->grad.assign(p_->value.size(), Real(0));
  }

  bool all_finite() const {
    for (const Real v : p_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool same_payload(const Tensor& other) const { return p_ == other.p_; }
  const void* payload_id() const { return p_.get(); }

 private:
  struct Payload {
    int rows = 0;
    int cols = 0;
    std::vector<Real> value;
    std::vector<Real> grad;
    bool requires_grad = false;
  };

  Tensor(int rows, int cols, std::vector<Real> data, bool requires_grad)
      : p_(std::make_shared<Payload>(Payload{rows, cols, std::move(data), {}, requires_grad})) {}

  static std::size_t check_dims(int rows, int cols) {
    if (rows <= 0 || cols <= 0) throw std::invalid_argument("Tensor: dimensions must be positive");
    return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }

  std::shared_ptr<Payload> p_;
};

/// Ordered record of executed differentiable ops. Ops append their backward
/// closure during the forward pass; backward() replays them in reverse, which
/// visits each op exactly once (the record is already topologically ordered
/// by execution). A tape is single-use.
template <typename Real>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  void record(std::function<void()> backward_fn) {
    if (recording_) ops_.push_back(std::move(backward_fn));
  }

  std::size_t op_count() const { return ops_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and runs all recorded ops in reverse.
  void backward(Tensor<Real> loss) {
    if (!recording_) throw std::logic_error("Tape::backward: tape is in inference mode");
    if (consumed_) throw std::logic_error("Tape::backward: tape already consumed");
    if (loss.size() != 1) throw std::invalid_argument("Tape::backward: loss must be scalar");
    consumed_ = true;
    loss.grad()[0] += Real(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
  }

 private:
  std::vector<std::function<void()>> ops_;
  bool recording_;
  bool consumed_ = false;
};

}  // namespace mps
