#include "metadm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <unordered_set>
#include <utility>

#include "metadm/errors.hpp"
#include "metadm/kernels.hpp"

namespace metadm::nn {

namespace {

thread_local bool g_grad_enabled = true;

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::int64_t checked_numel(const std::vector<int>& shape) {
  if (shape.empty()) throw ShapeError("tensor shape needs at least one dimension");
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 1) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

void require_defined(const Tensor& t, const char* what) {
  if (!t.defined()) throw ShapeError(std::string(what) + " is undefined");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void add_grad(Tensor& p, const std::vector<float>& g) {
  p.accumulate_grad(g.data(), static_cast<std::int64_t>(g.size()));
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const auto n = checked_numel(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<std::size_t>(n), 0.0f);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  const auto n = checked_numel(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<std::size_t>(n), value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
  const auto n = checked_numel(shape);
  if (static_cast<std::size_t>(n) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

float Tensor::item() const {
  if (!impl_ || impl_->data.size() != 1) {
    throw ShapeError("item() needs a single-element tensor" +
                     (impl_ ? ", got shape " + shape_str(impl_->shape) : std::string()));
  }
  return impl_->data[0];
}

std::vector<float>& Tensor::grad() {
  if (impl_->grad.empty()) throw NumericError("gradient read before any backward accumulation");
  return impl_->grad;
}

const std::vector<float>& Tensor::grad() const {
  if (impl_->grad.empty()) throw NumericError("gradient read before any backward accumulation");
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::accumulate_grad(const float* g, std::int64_t n) {
  if (n != numel()) {
    throw ShapeError("gradient length " + std::to_string(n) + " does not match tensor shape " +
                     shape_str(impl_->shape));
  }
  auto& gr = impl_->grad;
  if (gr.empty()) gr.assign(impl_->data.size(), 0.0f);
  for (std::int64_t i = 0; i < n; ++i) gr[static_cast<std::size_t>(i)] += g[i];
}

void Tensor::backward() {
  if (!impl_) throw ShapeError("backward() on an undefined tensor");
  if (impl_->data.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(impl_->shape));
  }
  // Post-order DFS; shared_ptr copies keep nodes alive while edges are freed.
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<const detail::TensorImpl*> seen;
  std::vector<std::pair<std::shared_ptr<detail::TensorImpl>, std::size_t>> stack;
  seen.insert(impl_.get());
  stack.emplace_back(impl_, 0);
  while (!stack.empty()) {
    auto& top = stack.back();
    // consumed is only ever set on op outputs, so leaves stay reusable.
    if (top.second == 0 && top.first->consumed) {
      throw NumericError("backward() over an already consumed graph; re-run the forward pass");
    }
    if (top.second < top.first->parents.size()) {
      auto child = top.first->parents[top.second++];
      if (seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }
  const float one = 1.0f;
  accumulate_grad(&one, 1);
  // Reverse post-order is topological: every consumer runs before its producers.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl& node = **it;
    if (!node.backward_fn) continue;
    node.consumed = true;
    if (!node.grad.empty()) node.backward_fn(node);
    node.backward_fn = nullptr;
    node.parents.clear();
  }
}

Tensor Tensor::clone() const {
  require_defined(*this, "clone() source");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  require_defined(*this, "detach() source");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

Tensor from_op(std::vector<int> shape, std::vector<float> data, std::vector<Tensor> parents,
               std::function<void(const std::vector<float>& out_grad, std::vector<Tensor>& parents)>
                   backward) {
  const auto n = checked_numel(shape);
  if (static_cast<std::size_t>(n) != data.size()) {
    throw ShapeError("op output length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool record = grad_enabled();
  if (record) {
    record = false;
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) {
        record = true;
        break;
      }
    }
  }
  if (record) {
    impl->requires_grad = true;
    // Only differentiable parents become graph edges; the closure still sees
    // every parent for data access.
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) impl->parents.push_back(p.impl_ptr());
    }
    impl->backward_fn = [ps = std::move(parents),
                         fn = std::move(backward)](detail::TensorImpl& self) mutable {
      fn(self.grad, ps);
    };
  }
  return Tensor(std::move(impl));
}

// ---- elementwise and reductions ----

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined(a, "add lhs");
  require_defined(b, "add rhs");
  require_same_shape(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return from_op(a.shape(), std::move(out), {a, b},
                 [](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (ps[0].requires_grad()) add_grad(ps[0], g);
                   if (ps[1].requires_grad()) add_grad(ps[1], g);
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined(a, "sub lhs");
  require_defined(b, "sub rhs");
  require_same_shape(a, b, "sub");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return from_op(a.shape(), std::move(out), {a, b},
                 [](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (ps[0].requires_grad()) add_grad(ps[0], g);
                   if (ps[1].requires_grad()) {
                     std::vector<float> ng(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
                     add_grad(ps[1], ng);
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined(a, "mul lhs");
  require_defined(b, "mul rhs");
  require_same_shape(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return from_op(a.shape(), std::move(out), {a, b},
                 [](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (ps[0].requires_grad()) {
                     const auto& bv2 = ps[1].data();
                     std::vector<float> d(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * bv2[i];
                     add_grad(ps[0], d);
                   }
                   if (ps[1].requires_grad()) {
                     const auto& av2 = ps[0].data();
                     std::vector<float> d(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * av2[i];
                     add_grad(ps[1], d);
                   }
                 });
}

Tensor scale(const Tensor& a, float s) {
  require_defined(a, "scale input");
  const auto& av = a.data();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return from_op(a.shape(), std::move(out), {a},
                 [s](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (!ps[0].requires_grad()) return;
                   std::vector<float> d(g.size());
                   for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * s;
                   add_grad(ps[0], d);
                 });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum input");
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return from_op({1}, {static_cast<float>(acc)}, {a},
                 [](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (!ps[0].requires_grad()) return;
                   std::vector<float> d(ps[0].data().size(), g[0]);
                   add_grad(ps[0], d);
                 });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean input");
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  const double n = static_cast<double>(a.data().size());
  return from_op({1}, {static_cast<float>(acc / n)}, {a},
                 [n](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (!ps[0].requires_grad()) return;
                   const float gi = static_cast<float>(g[0] / n);
                   std::vector<float> d(ps[0].data().size(), gi);
                   add_grad(ps[0], d);
                 });
}

Tensor relu(const Tensor& a) {
  require_defined(a, "relu input");
  const auto& av = a.data();
  std::vector<float> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0f ? av[i] : 0.0f;
  return from_op(a.shape(), std::move(out), {a},
                 [](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (!ps[0].requires_grad()) return;
                   const auto& xv = ps[0].data();
                   std::vector<float> d(g.size());
                   for (std::size_t i = 0; i < g.size(); ++i) d[i] = xv[i] > 0.0f ? g[i] : 0.0f;
                   add_grad(ps[0], d);
                 });
}

// ---- shape ----

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  require_defined(x, "reshape input");
  const auto n = checked_numel(shape);
  if (n != x.numel()) {
    throw ShapeError("reshape from " + shape_str(x.shape()) + " to " + shape_str(shape) +
                     " changes the element count");
  }
  std::vector<float> out = x.data();
  return from_op(std::move(shape), std::move(out), {x},
                 [](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (ps[0].requires_grad()) add_grad(ps[0], g);
                 });
}

Tensor flatten(const Tensor& x) {
  require_defined(x, "flatten input");
  const int b = x.dim(0);
  return reshape(x, {b, static_cast<int>(x.numel() / b)});
}

// ---- NN layers ----

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
  require_defined(x, "conv2d input");
  require_defined(w, "conv2d weight");
  if (x.ndim() != 4) {
    throw ShapeError("conv2d input must be [batch, channel, height, width], got " +
                     shape_str(x.shape()));
  }
  if (w.ndim() != 4 || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d weight must be [out-channel, channel, k, k], got " +
                     shape_str(w.shape()));
  }
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(w.shape()));
  }
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != w.dim(0))) {
    throw ShapeError("conv2d bias must be [out-channel " + std::to_string(w.dim(0)) + "], got " +
                     shape_str(b.shape()));
  }
  const auto d = kernels::make_conv2d_dims(x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0),
                                           w.dim(2), stride, padding);
  std::vector<float> y(static_cast<std::size_t>(d.batch) * static_cast<std::size_t>(d.out_ch) *
                       static_cast<std::size_t>(d.out_h) * static_cast<std::size_t>(d.out_w));
  kernels::conv2d_forward(x.data().data(), w.data().data(),
                          b.defined() ? b.data().data() : nullptr, y.data(), d);
  return from_op({d.batch, d.out_ch, d.out_h, d.out_w}, std::move(y), {x, w, b},
                 [d](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (ps[0].requires_grad()) {
                     std::vector<float> dx(ps[0].data().size());
                     kernels::conv2d_backward_input(g.data(), ps[1].data().data(), dx.data(), d);
                     add_grad(ps[0], dx);
                   }
                   if (ps[1].requires_grad()) {
                     std::vector<float> dw(ps[1].data().size());
                     kernels::conv2d_backward_weight(g.data(), ps[0].data().data(), dw.data(), d);
                     add_grad(ps[1], dw);
                   }
                   if (ps[2].defined() && ps[2].requires_grad()) {
                     std::vector<float> db(ps[2].data().size());
                     kernels::conv2d_backward_bias(g.data(), db.data(), d);
                     add_grad(ps[2], db);
                   }
                 });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined(x, "linear input");
  require_defined(w, "linear weight");
  if (x.ndim() != 2) {
    throw ShapeError("linear input must be [batch, feature], got " + shape_str(x.shape()));
  }
  if (w.ndim() != 2 || w.dim(1) != x.dim(1)) {
    throw ShapeError("linear weight must be [out, " + std::to_string(x.dim(1)) + "], got " +
                     shape_str(w.shape()));
  }
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != w.dim(0))) {
    throw ShapeError("linear bias must be [out " + std::to_string(w.dim(0)) + "], got " +
                     shape_str(b.shape()));
  }
  const int batch = x.dim(0), in_dim = x.dim(1), out_dim = w.dim(0);
  std::vector<float> y(static_cast<std::size_t>(batch) * static_cast<std::size_t>(out_dim));
  kernels::linear_forward(x.data().data(), w.data().data(),
                          b.defined() ? b.data().data() : nullptr, y.data(), batch, in_dim,
                          out_dim);
  return from_op({batch, out_dim}, std::move(y), {x, w, b},
                 [batch, in_dim, out_dim](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (ps[0].requires_grad()) {
                     std::vector<float> dx(ps[0].data().size());
                     kernels::linear_backward_input(g.data(), ps[1].data().data(), dx.data(),
                                                    batch, in_dim, out_dim);
                     add_grad(ps[0], dx);
                   }
                   if (ps[1].requires_grad()) {
                     std::vector<float> dw(ps[1].data().size());
                     kernels::linear_backward_weight(g.data(), ps[0].data().data(), dw.data(),
                                                     batch, in_dim, out_dim);
                     add_grad(ps[1], dw);
                   }
                   if (ps[2].defined() && ps[2].requires_grad()) {
                     std::vector<float> db(ps[2].data().size());
                     kernels::linear_backward_bias(g.data(), db.data(), batch, out_dim);
                     add_grad(ps[2], db);
                   }
                 });
}

Tensor maxpool2x2(const Tensor& x) {
  require_defined(x, "maxpool2x2 input");
  if (x.ndim() != 4) {
    throw ShapeError("maxpool2x2 input must be [batch, channel, height, width], got " +
                     shape_str(x.shape()));
  }
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2x2 needs even height and width, got " + shape_str(x.shape()));
  }
  const std::size_t out_n = static_cast<std::size_t>(b) * static_cast<std::size_t>(c) *
                            static_cast<std::size_t>(h / 2) * static_cast<std::size_t>(w / 2);
  std::vector<float> y(out_n);
  std::vector<int> argmax(out_n);
  kernels::maxpool2x2_forward(x.data().data(), y.data(), argmax.data(), b, c, h, w);
  return from_op({b, c, h / 2, w / 2}, std::move(y), {x},
                 [argmax = std::move(argmax), b, c, h, w](const std::vector<float>& g,
                                                          std::vector<Tensor>& ps) {
                   if (!ps[0].requires_grad()) return;
                   std::vector<float> dx(ps[0].data().size(), 0.0f);
                   kernels::maxpool2x2_backward(g.data(), argmax.data(), dx.data(), b, c, h, w);
                   add_grad(ps[0], dx);
                 });
}

Tensor mean_spatial(const Tensor& x) {
  require_defined(x, "mean_spatial input");
  if (x.ndim() != 4) {
    throw ShapeError("mean_spatial input must be [batch, channel, height, width], got " +
                     shape_str(x.shape()));
  }
  const int b = x.dim(0), c = x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  const auto& xv = x.data();
  std::vector<float> out(static_cast<std::size_t>(b) * static_cast<std::size_t>(c));
  for (int i = 0; i < b * c; ++i) {
    double acc = 0.0;
    const float* row = xv.data() + static_cast<std::size_t>(i) * hw;
    for (int j = 0; j < hw; ++j) acc += row[j];
    out[static_cast<std::size_t>(i)] = static_cast<float>(acc / hw);
  }
  return from_op({b, c}, std::move(out), {x},
                 [b, c, hw](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (!ps[0].requires_grad()) return;
                   std::vector<float> dx(ps[0].data().size());
                   for (int i = 0; i < b * c; ++i) {
                     const float gi = static_cast<float>(static_cast<double>(g[i]) / hw);
                     float* row = dx.data() + static_cast<std::size_t>(i) * hw;
                     for (int j = 0; j < hw; ++j) row[j] = gi;
                   }
                   add_grad(ps[0], dx);
                 });
}

Tensor add_channel_vec(const Tensor& x, const Tensor& v) {
  require_defined(x, "add_channel_vec input");
  require_defined(v, "add_channel_vec vector");
  if (x.ndim() != 4) {
    throw ShapeError("add_channel_vec input must be [batch, channel, height, width], got " +
                     shape_str(x.shape()));
  }
  if (v.ndim() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1)) {
    throw ShapeError("add_channel_vec vector must be [" + std::to_string(x.dim(0)) + "," +
                     std::to_string(x.dim(1)) + "], got " + shape_str(v.shape()));
  }
  const int bc = x.dim(0) * x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  const auto& xv = x.data();
  const auto& vv = v.data();
  std::vector<float> out(xv.size());
  for (int i = 0; i < bc; ++i) {
    const float add_v = vv[static_cast<std::size_t>(i)];
    const float* src = xv.data() + static_cast<std::size_t>(i) * hw;
    float* dst = out.data() + static_cast<std::size_t>(i) * hw;
    for (int j = 0; j < hw; ++j) dst[j] = src[j] + add_v;
  }
  return from_op(x.shape(), std::move(out), {x, v},
                 [bc, hw](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   if (ps[0].requires_grad()) add_grad(ps[0], g);
                   if (ps[1].requires_grad()) {
                     std::vector<float> dv(static_cast<std::size_t>(bc));
                     for (int i = 0; i < bc; ++i) {
                       double acc = 0.0;
                       const float* row = g.data() + static_cast<std::size_t>(i) * hw;
                       for (int j = 0; j < hw; ++j) acc += row[j];
                       dv[static_cast<std::size_t>(i)] = static_cast<float>(acc);
                     }
                     add_grad(ps[1], dv);
                   }
                 });
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   std::vector<float>& running_mean, std::vector<float>& running_var,
                   float momentum, float eps, bool training) {
  require_defined(x, "batchnorm2d input");
  require_defined(gamma, "batchnorm2d gamma");
  require_defined(beta, "batchnorm2d beta");
  if (x.ndim() != 4) {
    throw ShapeError("batchnorm2d input must be [batch, channel, height, width], got " +
                     shape_str(x.shape()));
  }
  const int b = x.dim(0), c = x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 || beta.dim(0) != c) {
    throw ShapeError("batchnorm2d gamma/beta must be [channel " + std::to_string(c) + "], got " +
                     shape_str(gamma.shape()) + " / " + shape_str(beta.shape()));
  }
  if (static_cast<int>(running_mean.size()) != c || static_cast<int>(running_var.size()) != c) {
    throw ShapeError("batchnorm2d running stats must have " + std::to_string(c) + " channels");
  }
  std::vector<float> bn_mean(static_cast<std::size_t>(c));
  std::vector<float> bn_var(static_cast<std::size_t>(c));
  if (training) {
    kernels::bn2d_stats(x.data().data(), bn_mean.data(), bn_var.data(), b, c, hw);
    for (int i = 0; i < c; ++i) {
      const auto idx = static_cast<std::size_t>(i);
      running_mean[idx] = (1.0f - momentum) * running_mean[idx] + momentum * bn_mean[idx];
      running_var[idx] = (1.0f - momentum) * running_var[idx] + momentum * bn_var[idx];
    }
  } else {
    bn_mean = running_mean;
    bn_var = running_var;
  }
  std::vector<float> y(x.data().size());
  kernels::bn2d_forward(x.data().data(), bn_mean.data(), bn_var.data(), gamma.data().data(),
                        beta.data().data(), eps, y.data(), b, c, hw);
  return from_op(
      x.shape(), std::move(y), {x, gamma, beta},
      [bn_mean = std::move(bn_mean), bn_var = std::move(bn_var), eps, b, c, hw, training](
          const std::vector<float>& g, std::vector<Tensor>& ps) {
        if (!ps[0].requires_grad() && !ps[1].requires_grad() && !ps[2].requires_grad()) return;
        // The kernel produces all three gradients in one pass; unused ones are dropped.
        std::vector<float> dx(ps[0].data().size());
        std::vector<float> dgamma(static_cast<std::size_t>(c));
        std::vector<float> dbeta(static_cast<std::size_t>(c));
        if (training) {
          kernels::bn2d_backward_train(g.data(), ps[0].data().data(), bn_mean.data(),
                                       bn_var.data(), ps[1].data().data(), eps, dx.data(),
                                       dgamma.data(), dbeta.data(), b, c, hw);
        } else {
          kernels::bn2d_backward_eval(g.data(), ps[0].data().data(), bn_mean.data(), bn_var.data(),
                                      ps[1].data().data(), eps, dx.data(), dgamma.data(),
                                      dbeta.data(), b, c, hw);
        }
        if (ps[0].requires_grad()) add_grad(ps[0], dx);
        if (ps[1].requires_grad()) add_grad(ps[1], dgamma);
        if (ps[2].requires_grad()) add_grad(ps[2], dbeta);
      });
}

// ---- episodic heads ----

Tensor class_means(const Tensor& emb, const std::vector<int>& group_of, int n_groups) {
  require_defined(emb, "class_means input");
  if (emb.ndim() != 2) {
    throw ShapeError("class_means input must be [sample, feature], got " + shape_str(emb.shape()));
  }
  if (n_groups < 1) throw ShapeError("class_means needs at least one group");
  const int s_count = emb.dim(0), d_dim = emb.dim(1);
  if (static_cast<int>(group_of.size()) != s_count) {
    throw ShapeError("class_means group list has " + std::to_string(group_of.size()) +
                     " entries for " + std::to_string(s_count) + " rows");
  }
  std::vector<int> counts(static_cast<std::size_t>(n_groups), 0);
  for (int g : group_of) {
    if (g < 0 || g >= n_groups) {
      throw ShapeError("class_means group index " + std::to_string(g) + " outside [0," +
                       std::to_string(n_groups) + ")");
    }
    ++counts[static_cast<std::size_t>(g)];
  }
  for (int k = 0; k < n_groups; ++k) {
    if (counts[static_cast<std::size_t>(k)] == 0) {
      throw ShapeError("class_means group " + std::to_string(k) + " has no members");
    }
  }
  const auto& ev = emb.data();
  std::vector<double> acc(static_cast<std::size_t>(n_groups) * static_cast<std::size_t>(d_dim),
                          0.0);
  for (int s = 0; s < s_count; ++s) {
    double* dst = acc.data() + static_cast<std::size_t>(group_of[static_cast<std::size_t>(s)]) *
                                   static_cast<std::size_t>(d_dim);
    const float* src = ev.data() + static_cast<std::size_t>(s) * static_cast<std::size_t>(d_dim);
    for (int d = 0; d < d_dim; ++d) dst[d] += src[d];
  }
  std::vector<float> out(acc.size());
  for (int k = 0; k < n_groups; ++k) {
    const double inv = 1.0 / counts[static_cast<std::size_t>(k)];
    for (int d = 0; d < d_dim; ++d) {
      const auto i = static_cast<std::size_t>(k) * static_cast<std::size_t>(d_dim) +
                     static_cast<std::size_t>(d);
      out[i] = static_cast<float>(acc[i] * inv);
    }
  }
  return from_op({n_groups, d_dim}, std::move(out), {emb},
                 [group_of, counts, s_count, d_dim](const std::vector<float>& g,
                                                    std::vector<Tensor>& ps) {
                   if (!ps[0].requires_grad()) return;
                   std::vector<float> de(ps[0].data().size());
                   for (int s = 0; s < s_count; ++s) {
                     const int k = group_of[static_cast<std::size_t>(s)];
                     const float inv = 1.0f / counts[static_cast<std::size_t>(k)];
                     const float* src =
                         g.data() + static_cast<std::size_t>(k) * static_cast<std::size_t>(d_dim);
                     float* dst =
                         de.data() + static_cast<std::size_t>(s) * static_cast<std::size_t>(d_dim);
                     for (int d = 0; d < d_dim; ++d) dst[d] = src[d] * inv;
                   }
                   add_grad(ps[0], de);
                 });
}

Tensor neg_sqdist(const Tensor& queries, const Tensor& centers) {
  require_defined(queries, "neg_sqdist queries");
  require_defined(centers, "neg_sqdist centers");
  if (queries.ndim() != 2 || centers.ndim() != 2 || queries.dim(1) != centers.dim(1)) {
    throw ShapeError("neg_sqdist needs [Q,D] and [K,D] with matching D, got " +
                     shape_str(queries.shape()) + " and " + shape_str(centers.shape()));
  }
  const int q_count = queries.dim(0), k_count = centers.dim(0), d_dim = queries.dim(1);
  const auto& qv = queries.data();
  const auto& cv = centers.data();
  std::vector<float> out(static_cast<std::size_t>(q_count) * static_cast<std::size_t>(k_count));
  for (int q = 0; q < q_count; ++q) {
    const float* qrow = qv.data() + static_cast<std::size_t>(q) * static_cast<std::size_t>(d_dim);
    for (int k = 0; k < k_count; ++k) {
      const float* crow =
          cv.data() + static_cast<std::size_t>(k) * static_cast<std::size_t>(d_dim);
      double acc = 0.0;
      for (int d = 0; d < d_dim; ++d) {
        const double diff = static_cast<double>(qrow[d]) - static_cast<double>(crow[d]);
        acc += diff * diff;
      }
      out[static_cast<std::size_t>(q) * static_cast<std::size_t>(k_count) +
          static_cast<std::size_t>(k)] = static_cast<float>(-acc);
    }
  }
  return from_op(
      {q_count, k_count}, std::move(out), {queries, centers},
      [q_count, k_count, d_dim](const std::vector<float>& g, std::vector<Tensor>& ps) {
        const bool need_q = ps[0].requires_grad();
        const bool need_c = ps[1].requires_grad();
        if (!need_q && !need_c) return;
        const auto& qv2 = ps[0].data();
        const auto& cv2 = ps[1].data();
        std::vector<float> dq(need_q ? qv2.size() : 0, 0.0f);
        std::vector<float> dc(need_c ? cv2.size() : 0, 0.0f);
        for (int q = 0; q < q_count; ++q) {
          const float* qrow =
              qv2.data() + static_cast<std::size_t>(q) * static_cast<std::size_t>(d_dim);
          for (int k = 0; k < k_count; ++k) {
            const float gqk = g[static_cast<std::size_t>(q) * static_cast<std::size_t>(k_count) +
                                static_cast<std::size_t>(k)];
            const float* crow =
                cv2.data() + static_cast<std::size_t>(k) * static_cast<std::size_t>(d_dim);
            for (int d = 0; d < d_dim; ++d) {
              const float t = -2.0f * gqk * (qrow[d] - crow[d]);
              if (need_q) {
                dq[static_cast<std::size_t>(q) * static_cast<std::size_t>(d_dim) +
                   static_cast<std::size_t>(d)] += t;
              }
              if (need_c) {
                dc[static_cast<std::size_t>(k) * static_cast<std::size_t>(d_dim) +
                   static_cast<std::size_t>(d)] -= t;
              }
            }
          }
        }
        if (need_q) add_grad(ps[0], dq);
        if (need_c) add_grad(ps[1], dc);
      });
}

Tensor masked_nll(const Tensor& logits, const std::vector<int>& labels,
                  const std::vector<float>& mask) {
  require_defined(logits, "masked_nll logits");
  if (logits.ndim() != 2) {
    throw ShapeError("masked_nll logits must be [query, class], got " + shape_str(logits.shape()));
  }
  const int q_count = logits.dim(0), k_count = logits.dim(1);
  if (static_cast<int>(labels.size()) != q_count || static_cast<int>(mask.size()) != q_count) {
    throw ShapeError("masked_nll needs one label and one mask entry per query row, got " +
                     std::to_string(labels.size()) + " labels / " + std::to_string(mask.size()) +
                     " mask entries for " + std::to_string(q_count) + " rows");
  }
  for (int label : labels) {
    if (label < 0 || label >= k_count) {
      throw ShapeError("masked_nll label " + std::to_string(label) + " outside [0," +
                       std::to_string(k_count) + ")");
    }
  }
  const auto& lv = logits.data();
  double loss = 0.0;
  for (int q = 0; q < q_count; ++q) {
    const float* row = lv.data() + static_cast<std::size_t>(q) * static_cast<std::size_t>(k_count);
    double mx = row[0];
    for (int k = 1; k < k_count; ++k) mx = std::max(mx, static_cast<double>(row[k]));
    double se = 0.0;
    for (int k = 0; k < k_count; ++k) se += std::exp(static_cast<double>(row[k]) - mx);
    const double lse = mx + std::log(se);
    const double logp = static_cast<double>(row[labels[static_cast<std::size_t>(q)]]) - lse;
    loss += static_cast<double>(mask[static_cast<std::size_t>(q)]) * logp;
  }
  const float value = static_cast<float>(-loss / q_count);
  return from_op(
      {1}, {value}, {logits},
      [labels, mask, q_count, k_count](const std::vector<float>& g, std::vector<Tensor>& ps) {
        if (!ps[0].requires_grad()) return;
        const auto& lv2 = ps[0].data();
        std::vector<float> dl(lv2.size());
        const double gout = static_cast<double>(g[0]);
        for (int q = 0; q < q_count; ++q) {
          const float* row =
              lv2.data() + static_cast<std::size_t>(q) * static_cast<std::size_t>(k_count);
          float* drow = dl.data() + static_cast<std::size_t>(q) * static_cast<std::size_t>(k_count);
          double mx = row[0];
          for (int k = 1; k < k_count; ++k) mx = std::max(mx, static_cast<double>(row[k]));
          double se = 0.0;
          for (int k = 0; k < k_count; ++k) se += std::exp(static_cast<double>(row[k]) - mx);
          const double coef = gout * static_cast<double>(mask[static_cast<std::size_t>(q)]) /
                              static_cast<double>(q_count);
          const int label = labels[static_cast<std::size_t>(q)];
          for (int k = 0; k < k_count; ++k) {
            const double p = std::exp(static_cast<double>(row[k]) - mx) / se;
            drow[k] = static_cast<float>(coef * (p - (k == label ? 1.0 : 0.0)));
          }
        }
        add_grad(ps[0], dl);
      });
}

Tensor l2_penalty(const std::vector<Tensor>& params, float lambda) {
  double acc = 0.0;
  for (const auto& p : params) {
    require_defined(p, "l2_penalty parameter");
    double t = 0.0;
    for (float v : p.data()) t += static_cast<double>(v) * static_cast<double>(v);
    acc += t;
  }
  return from_op({1}, {static_cast<float>(static_cast<double>(lambda) * acc)}, params,
                 [lambda](const std::vector<float>& g, std::vector<Tensor>& ps) {
                   const float coef = 2.0f * lambda * g[0];
                   for (auto& p : ps) {
                     if (!p.requires_grad()) continue;
                     const auto& pv = p.data();
                     std::vector<float> d(pv.size());
                     for (std::size_t i = 0; i < pv.size(); ++i) d[i] = coef * pv[i];
                     add_grad(p, d);
                   }
                 });
}

}  // namespace metadm::nn
