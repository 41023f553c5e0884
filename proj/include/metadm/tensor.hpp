#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace metadm::nn {

class Tensor;

namespace detail {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty until the first accumulation
  // Reverse-mode graph. backward_fn reads this node's grad and accumulates
  // into the parents' grads. Cleared once backward() has consumed the graph.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;
  bool consumed = false;
};

}  // namespace detail

// Dense row-major f32 tensor with reverse-mode autodiff. Value-type handle
// over shared storage. Data is treated as immutable once an op has consumed
// the tensor; grad accumulation is the only sanctioned mutation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                          bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
  int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }

  std::vector<float>& data() { return impl_->data; }
  const std::vector<float>& data() const { return impl_->data; }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<float>& grad();
  const std::vector<float>& grad() const;
  void zero_grad();
  void accumulate_grad(const float* g, std::int64_t n);

  // Runs reverse-mode accumulation from this scalar. Throws ShapeError if the
  // tensor is not scalar and NumericError if the graph was already consumed.
  // The graph is freed afterwards; re-run the forward pass to differentiate
  // again.
  void backward();

  Tensor clone() const;   // copies data and requires_grad, drops the graph
  Tensor detach() const;  // copies data, drops graph and requires_grad

  detail::TensorImpl& impl() { return *impl_; }
  const detail::TensorImpl& impl() const { return *impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor from_op(std::vector<int>, std::vector<float>, std::vector<Tensor>,
                        std::function<void(const std::vector<float>&, std::vector<Tensor>&)>);
};

// Scoped guard disabling graph recording (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Building block for ops: wraps data as a graph node whose backward closure
// receives the output gradient and the parent tensors. Recording is skipped
// when grad is disabled or no parent requires it.
Tensor from_op(std::vector<int> shape, std::vector<float> data, std::vector<Tensor> parents,
               std::function<void(const std::vector<float>& out_grad, std::vector<Tensor>& parents)>
                   backward);

// ---- elementwise and reductions ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor relu(const Tensor& a);

// ---- shape ----
Tensor flatten(const Tensor& x);       // [B, ...] -> [B, D]
Tensor reshape(const Tensor& x, std::vector<int> shape);

// ---- NN layers ----
// x [B,C,H,W], w [O,C,k,k], b [O] (may be undefined for no bias).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding);
// x [B,I], w [O,I], b [O].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor maxpool2x2(const Tensor& x);
Tensor mean_spatial(const Tensor& x);  // [B,C,H,W] -> [B,C]
// x [B,C,H,W] + v [B,C] broadcast over spatial dims.
Tensor add_channel_vec(const Tensor& x, const Tensor& v);

// Batch norm over [B,C,H,W]. In training mode uses batch statistics and
// updates running stats in place (a side effect outside the graph); in eval
// mode normalizes with the running stats.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<float>& running_mean, std::vector<float>& running_var,
                   float momentum, float eps, bool training);

// ---- episodic heads ----
// Per-group mean of rows: emb [S,D], group_of[s] in [0,K) -> [K,D].
Tensor class_means(const Tensor& emb, const std::vector<int>& group_of, int n_groups);
// logits[q][k] = -||q_row - c_row||^2; inputs [Q,D], [K,D].
Tensor neg_sqdist(const Tensor& queries, const Tensor& centers);
// -(1/Q) * sum_i mask[i] * log softmax(logits[i])[label[i]].
Tensor masked_nll(const Tensor& logits, const std::vector<int>& labels,
                  const std::vector<float>& mask);
// lambda * sum over tensors of sum of squares.
Tensor l2_penalty(const std::vector<Tensor>& params, float lambda);

}  // namespace metadm::nn
