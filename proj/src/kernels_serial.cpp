#include <omp.h>

#include <atomic>
#include <string>

#include "kernels_inner.hpp"
#include "metadm/errors.hpp"
#include "metadm/kernels.hpp"

namespace metadm::nn::kernels {

namespace {
std::atomic<bool> g_parallel{true};
}

void set_parallel(bool enabled) { g_parallel.store(enabled); }
bool parallel_enabled() { return g_parallel.load(); }
void set_num_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}
int max_threads() { return omp_get_max_threads(); }

Conv2dDims make_conv2d_dims(int batch, int in_ch, int in_h, int in_w, int out_ch, int ksize,
                            int stride, int pad) {
  if (batch < 1) throw ShapeError("conv2d: batch axis must be >= 1, got " + std::to_string(batch));
  if (in_ch < 1) throw ShapeError("conv2d: channel axis must be >= 1, got " + std::to_string(in_ch));
  if (out_ch < 1) {
    throw ShapeError("conv2d: output channel axis must be >= 1, got " + std::to_string(out_ch));
  }
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (pad < 0) throw ShapeError("conv2d: padding must be >= 0, got " + std::to_string(pad));
  if (ksize < 1) throw ShapeError("conv2d: kernel must be >= 1, got " + std::to_string(ksize));
  if (ksize > in_h + 2 * pad) {
    throw ShapeError("conv2d: kernel " + std::to_string(ksize) + " exceeds padded height axis " +
                     std::to_string(in_h + 2 * pad));
  }
  if (ksize > in_w + 2 * pad) {
    throw ShapeError("conv2d: kernel " + std::to_string(ksize) + " exceeds padded width axis " +
                     std::to_string(in_w + 2 * pad));
  }
  Conv2dDims d;
  d.batch = batch;
  d.in_ch = in_ch;
  d.in_h = in_h;
  d.in_w = in_w;
  d.out_ch = out_ch;
  d.ksize = ksize;
  d.stride = stride;
  d.pad = pad;
  d.out_h = (in_h + 2 * pad - ksize) / stride + 1;
  d.out_w = (in_w + 2 * pad - ksize) / stride + 1;
  return d;
}

namespace serial {

void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const Conv2dDims& d) {
  const long in_sz = static_cast<long>(d.in_ch) * d.in_h * d.in_w;
  const long out_sz = static_cast<long>(d.out_ch) * d.out_h * d.out_w;
  const long w_sz = static_cast<long>(d.in_ch) * d.ksize * d.ksize;
  for (int b = 0; b < d.batch; ++b) {
    for (int o = 0; o < d.out_ch; ++o) {
      inner::conv2d_forward_slice(x + b * in_sz, w + o * w_sz, bias ? bias[o] : 0.0f,
                                  y + b * out_sz + static_cast<long>(o) * d.out_h * d.out_w, d);
    }
  }
}

void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dDims& d) {
  const long in_sz = static_cast<long>(d.in_ch) * d.in_h * d.in_w;
  const long out_sz = static_cast<long>(d.out_ch) * d.out_h * d.out_w;
  for (int b = 0; b < d.batch; ++b) {
    for (int c = 0; c < d.in_ch; ++c) {
      inner::conv2d_backward_input_slice(dy + b * out_sz, w,
                                         dx + b * in_sz + static_cast<long>(c) * d.in_h * d.in_w, c,
                                         d);
    }
  }
}

void conv2d_backward_weight(const float* dy, const float* x, float* dw, const Conv2dDims& d) {
  const int kk = d.ksize * d.ksize;
  for (int o = 0; o < d.out_ch; ++o) {
    for (int c = 0; c < d.in_ch; ++c) {
      inner::conv2d_backward_weight_block(dy, x, dw + (static_cast<long>(o) * d.in_ch + c) * kk, o,
                                          c, d);
    }
  }
}

void conv2d_backward_bias(const float* dy, float* db, const Conv2dDims& d) {
  for (int o = 0; o < d.out_ch; ++o) db[o] = inner::conv2d_backward_bias_slot(dy, o, d);
}

void linear_forward(const float* x, const float* w, const float* b, float* y, int batch,
                    int in_dim, int out_dim) {
  for (int i = 0; i < batch; ++i) {
    inner::linear_forward_row(x + static_cast<long>(i) * in_dim, w, b,
                              y + static_cast<long>(i) * out_dim, in_dim, out_dim);
  }
}

void linear_backward_input(const float* dy, const float* w, float* dx, int batch, int in_dim,
                           int out_dim) {
  for (int i = 0; i < batch; ++i) {
    inner::linear_backward_input_row(dy + static_cast<long>(i) * out_dim, w,
                                     dx + static_cast<long>(i) * in_dim, in_dim, out_dim);
  }
}

void linear_backward_weight(const float* dy, const float* x, float* dw, int batch, int in_dim,
                            int out_dim) {
  for (int o = 0; o < out_dim; ++o) {
    inner::linear_backward_weight_row(dy, x, dw + static_cast<long>(o) * in_dim, o, batch, in_dim,
                                      out_dim);
  }
}

void linear_backward_bias(const float* dy, float* db, int batch, int out_dim) {
  for (int o = 0; o < out_dim; ++o) db[o] = inner::linear_backward_bias_slot(dy, o, batch, out_dim);
}

void bn2d_stats(const float* x, float* mean, float* var, int batch, int ch, int hw) {
  for (int c = 0; c < ch; ++c) inner::bn2d_stats_channel(x, c, batch, ch, hw, mean + c, var + c);
}

void bn2d_forward(const float* x, const float* mean, const float* var, const float* gamma,
                  const float* beta, float eps, float* y, int batch, int ch, int hw) {
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < ch; ++c) {
      const long off = (static_cast<long>(b) * ch + c) * hw;
      inner::bn2d_forward_slice(x + off, mean[c], var[c], gamma[c], beta[c], eps, y + off, hw);
    }
  }
}

void bn2d_backward_train(const float* dy, const float* x, const float* mean, const float* var,
                         const float* gamma, float eps, float* dx, float* dgamma, float* dbeta,
                         int batch, int ch, int hw) {
  const double n = static_cast<double>(batch) * hw;
  for (int c = 0; c < ch; ++c) {
    float sum_dy = 0.0f, sum_dy_x = 0.0f;
    inner::bn2d_backward_reduce_channel(dy, x, c, batch, ch, hw, &sum_dy, &sum_dy_x);
    const float sum_dy_xm = sum_dy_x - mean[c] * sum_dy;
    const float inv = 1.0f / std::sqrt(var[c] + eps);
    dgamma[c] = sum_dy_xm * inv;
    dbeta[c] = sum_dy;
    const float k1 = gamma[c] * inv;
    const float k2 = static_cast<float>(sum_dy / n);
    const float k3 = static_cast<float>(sum_dy_xm / n) * inv * inv;
    for (int b = 0; b < batch; ++b) {
      const long off = (static_cast<long>(b) * ch + c) * hw;
      inner::bn2d_backward_train_apply_slice(dy + off, x + off, mean[c], k1, k2, k3, dx + off, hw);
    }
  }
}

void bn2d_backward_eval(const float* dy, const float* x, const float* mean, const float* var,
                        const float* gamma, float eps, float* dx, float* dgamma, float* dbeta,
                        int batch, int ch, int hw) {
  for (int c = 0; c < ch; ++c) {
    float sum_dy = 0.0f, sum_dy_x = 0.0f;
    inner::bn2d_backward_reduce_channel(dy, x, c, batch, ch, hw, &sum_dy, &sum_dy_x);
    const float inv = 1.0f / std::sqrt(var[c] + eps);
    dgamma[c] = (sum_dy_x - mean[c] * sum_dy) * inv;
    dbeta[c] = sum_dy;
    const float k1 = gamma[c] * inv;
    for (int b = 0; b < batch; ++b) {
      const long off = (static_cast<long>(b) * ch + c) * hw;
      const float* dyc = dy + off;
      float* dxc = dx + off;
      for (int i = 0; i < hw; ++i) dxc[i] = k1 * dyc[i];
    }
  }
}

void maxpool2x2_forward(const float* x, float* y, int* argmax, int batch, int ch, int h, int w) {
  const int oh2 = h / 2, ow2 = w / 2;
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < ch; ++c) {
      const long in_off = (static_cast<long>(b) * ch + c) * h * w;
      const long out_off = (static_cast<long>(b) * ch + c) * oh2 * ow2;
      inner::maxpool2x2_slice(x + in_off, y + out_off, argmax + out_off, h, w);
    }
  }
}

void maxpool2x2_backward(const float* dy, const int* argmax, float* dx, int batch, int ch, int h,
                         int w) {
  const int oh2 = h / 2, ow2 = w / 2;
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < ch; ++c) {
      const long in_off = (static_cast<long>(b) * ch + c) * h * w;
      const long out_off = (static_cast<long>(b) * ch + c) * oh2 * ow2;
      inner::maxpool2x2_backward_slice(dy + out_off, argmax + out_off, dx + in_off, h, w);
    }
  }
}

}  // namespace serial

// ---- dispatch ----

#define METADM_DISPATCH(fn, ...) \
  do {                           \
    if (parallel_enabled())      \
      par::fn(__VA_ARGS__);      \
    else                         \
      serial::fn(__VA_ARGS__);   \
  } while (0)

void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const Conv2dDims& d) {
  METADM_DISPATCH(conv2d_forward, x, w, bias, y, d);
}
void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dDims& d) {
  METADM_DISPATCH(conv2d_backward_input, dy, w, dx, d);
}
void conv2d_backward_weight(const float* dy, const float* x, float* dw, const Conv2dDims& d) {
  METADM_DISPATCH(conv2d_backward_weight, dy, x, dw, d);
}
void conv2d_backward_bias(const float* dy, float* db, const Conv2dDims& d) {
  METADM_DISPATCH(conv2d_backward_bias, dy, db, d);
}
void linear_forward(const float* x, const float* w, const float* b, float* y, int batch, int in_dim,
                    int out_dim) {
  METADM_DISPATCH(linear_forward, x, w, b, y, batch, in_dim, out_dim);
}
void linear_backward_input(const float* dy, const float* w, float* dx, int batch, int in_dim,
                           int out_dim) {
  METADM_DISPATCH(linear_backward_input, dy, w, dx, batch, in_dim, out_dim);
}
void linear_backward_weight(const float* dy, const float* x, float* dw, int batch, int in_dim,
                            int out_dim) {
  METADM_DISPATCH(linear_backward_weight, dy, x, dw, batch, in_dim, out_dim);
}
void linear_backward_bias(const float* dy, float* db, int batch, int out_dim) {
  METADM_DISPATCH(linear_backward_bias, dy, db, batch, out_dim);
}
void bn2d_stats(const float* x, float* mean, float* var, int batch, int ch, int hw) {
  METADM_DISPATCH(bn2d_stats, x, mean, var, batch, ch, hw);
}
void bn2d_forward(const float* x, const float* mean, const float* var, const float* gamma,
                  const float* beta, float eps, float* y, int batch, int ch, int hw) {
  METADM_DISPATCH(bn2d_forward, x, mean, var, gamma, beta, eps, y, batch, ch, hw);
}
void bn2d_backward_train(const float* dy, const float* x, const float* mean, const float* var,
                         const float* gamma, float eps, float* dx, float* dgamma, float* dbeta,
                         int batch, int ch, int hw) {
  METADM_DISPATCH(bn2d_backward_train, dy, x, mean, var, gamma, eps, dx, dgamma, dbeta, batch, ch,
                  hw);
}
void bn2d_backward_eval(const float* dy, const float* x, const float* mean, const float* var,
                        const float* gamma, float eps, float* dx, float* dgamma, float* dbeta,
                        int batch, int ch, int hw) {
  METADM_DISPATCH(bn2d_backward_eval, dy, x, mean, var, gamma, eps, dx, dgamma, dbeta, batch, ch,
                  hw);
}
void maxpool2x2_forward(const float* x, float* y, int* argmax, int batch, int ch, int h, int w) {
  METADM_DISPATCH(maxpool2x2_forward, x, y, argmax, batch, ch, h, w);
}
void maxpool2x2_backward(const float* dy, const int* argmax, float* dx, int batch, int ch, int h,
                         int w) {
  METADM_DISPATCH(maxpool2x2_backward, dy, argmax, dx, batch, ch, h, w);
}

#undef METADM_DISPATCH

}  // namespace metadm::nn::kernels
