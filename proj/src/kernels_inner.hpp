#pragma once

// Per-slot inner routines shared by the serial and OpenMP kernel flavors.
// Everything here fixes the floating-point accumulation order, so any outer
// parallelization over disjoint slots reproduces the serial bits exactly.
// The slice bodies live in kernels_slices.cpp; both flavors call the same
// compiled copy, which keeps their codegen trivially identical.

#include <algorithm>
#include <cmath>

#include "metadm/kernels.hpp"

namespace metadm::nn::kernels::inner {

// Eight-lane blocked dot product with a fixed reduction tree. Vectorizes
// without changing the result across call sites or flags.
inline float dot_blocked8(const float* a, const float* b, int n) {
  float s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  const int n8 = n & ~7;
  for (int i = 0; i < n8; i += 8) {
    for (int l = 0; l < 8; ++l) s[l] += a[i + l] * b[i + l];
  }
  for (int i = n8; i < n; ++i) s[i & 7] += a[i] * b[i];
  return ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
}

// Blocked sum and sum-of-squares over n elements, same fixed tree.
inline void sum_sumsq_blocked8(const float* a, int n, float* out_sum, float* out_sumsq) {
  float s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  float q[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  const int n8 = n & ~7;
  for (int i = 0; i < n8; i += 8) {
    for (int l = 0; l < 8; ++l) {
      s[l] += a[i + l];
      q[l] += a[i + l] * a[i + l];
    }
  }
  for (int i = n8; i < n; ++i) {
    s[i & 7] += a[i];
    q[i & 7] += a[i] * a[i];
  }
  *out_sum = ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
  *out_sumsq = ((q[0] + q[1]) + (q[2] + q[3])) + ((q[4] + q[5]) + (q[6] + q[7]));
}

inline void dot2_blocked8(const float* a, const float* b, const float* c, int n, float* out_ab,
                          float* out_ac) {
  float s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  float t[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  const int n8 = n & ~7;
  for (int i = 0; i < n8; i += 8) {
    for (int l = 0; l < 8; ++l) {
      s[l] += a[i + l] * b[i + l];
      t[l] += a[i + l] * c[i + l];
    }
  }
  for (int i = n8; i < n; ++i) {
    s[i & 7] += a[i] * b[i];
    t[i & 7] += a[i] * c[i];
  }
  *out_ab = ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
  *out_ac = ((t[0] + t[1]) + (t[2] + t[3])) + ((t[4] + t[5]) + (t[6] + t[7]));
}

// One (batch, out_ch) slice of the convolution output. Accumulation order per
// output slot is (in_ch, kh, kw).
void conv2d_forward_slice(const float* x_b, const float* w_o, float bias_o, float* y_bo,
                          const Conv2dDims& d);

// One (batch, in_ch) slice of the input gradient. Accumulation order per
// input slot is (out_ch, kh, kw).
void conv2d_backward_input_slice(const float* dy_b, const float* w, float* dx_bc, int c,
                                 const Conv2dDims& d);

// One (out_ch, in_ch) block of the weight gradient: ksize*ksize slots, each
// an 8-lane blocked sum over (batch, oh, ow) with one final fixed tree.
void conv2d_backward_weight_block(const float* dy, const float* x, float* dw_oc, int o, int c,
                                  const Conv2dDims& d);

float conv2d_backward_bias_slot(const float* dy, int o, const Conv2dDims& d);

void maxpool2x2_slice(const float* x_bc, float* y_bc, int* am_bc, int h, int w);
void maxpool2x2_backward_slice(const float* dy_bc, const int* am_bc, float* dx_bc, int h, int w);

// One row of a linear layer: y_i = b + W x_i, rows of W contiguous.
void linear_forward_row(const float* xi, const float* w, const float* b, float* yi, int in_dim,
                        int out_dim);

// One row of the linear input gradient: dx_i = W^T dy_i, saxpy over o ascending.
void linear_backward_input_row(const float* dyi, const float* w, float* dxi, int in_dim,
                               int out_dim);

// One row o of the linear weight gradient: dW_o = sum_i dy[i,o] * x_i, i ascending.
void linear_backward_weight_row(const float* dy, const float* x, float* dwo, int o, int batch,
                                int in_dim, int out_dim);

float linear_backward_bias_slot(const float* dy, int o, int batch, int out_dim);

// Biased per-channel batch statistics over (batch, hw), b ascending.
void bn2d_stats_channel(const float* x, int c, int batch, int ch, int hw, float* out_mean,
                        float* out_var);

// Per-channel reductions for batchnorm backward: sum(dy) and sum(dy * x).
void bn2d_backward_reduce_channel(const float* dy, const float* x, int c, int batch, int ch,
                                  int hw, float* out_sum_dy, float* out_sum_dy_x);

void bn2d_forward_slice(const float* x_bc, float mean, float var, float gamma, float beta,
                        float eps, float* y_bc, int hw);

// Elementwise part of the training-mode batchnorm input gradient, with the
// per-channel reductions already folded into k1..k3.
void bn2d_backward_train_apply_slice(const float* dy_bc, const float* x_bc, float mean, float k1,
                                     float k2, float k3, float* dx_bc, int hw);

}  // namespace metadm::nn::kernels::inner
