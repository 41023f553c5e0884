#include "kernels_inner.hpp"

// Slot bodies for the convolution, linear, batchnorm and pooling kernels.
// Compiled once; the serial and OpenMP flavors both call into this TU, so the
// instruction stream per slot is the same no matter which flavor ran.
//
// The 3x3 stride-1 pad-1 case carries nearly all of the compute, so it gets
// width-specialized templates whose row loops have compile-time trip counts.
// Dispatch depends only on the dims, which keeps it deterministic.

namespace metadm::nn::kernels::inner {

namespace {

// ---- 3x3, stride 1, pad 1, out_w == in_w == W, h divisible by 4 ----
//
// Out-of-range taps read zero-padded rows and add an exact 0.0f, which leaves
// the slot value unchanged, so padding does not alter the accumulation order.
// Four rows run at once to keep four independent FMA chains in flight.

template <int W>
void fwd_slice_3x3(const float* x_b, const float* w_o, float bias_o, float* y_bo, int in_ch,
                   int h) {
  for (int oh = 0; oh + 4 <= h; oh += 4) {
    float a0[W], a1[W], a2[W], a3[W];
    for (int i = 0; i < W; ++i) a0[i] = bias_o;
    for (int i = 0; i < W; ++i) a1[i] = bias_o;
    for (int i = 0; i < W; ++i) a2[i] = bias_o;
    for (int i = 0; i < W; ++i) a3[i] = bias_o;
    const float* x_c = x_b;
    const float* w_c = w_o;
    for (int c = 0; c < in_ch; ++c, x_c += h * W, w_c += 9) {
      // rows ih = oh-1 .. oh+4, zero padded on both borders
      float xp[6][W + 2];
      for (int r = 0; r < 6; ++r) {
        const int ih = oh + r - 1;
        xp[r][0] = 0.f;
        xp[r][W + 1] = 0.f;
        if (ih >= 0 && ih < h) {
          const float* xr = x_c + ih * W;
          for (int i = 0; i < W; ++i) xp[r][i + 1] = xr[i];
        } else {
          for (int i = 0; i < W; ++i) xp[r][i + 1] = 0.f;
        }
      }
      for (int kh = 0; kh < 3; ++kh) {
        const float w0 = w_c[kh * 3], w1 = w_c[kh * 3 + 1], w2 = w_c[kh * 3 + 2];
        const float* p0 = xp[kh];
        const float* p1 = xp[kh + 1];
        const float* p2 = xp[kh + 2];
        const float* p3 = xp[kh + 3];
#pragma GCC unroll 1
        for (int ow = 0; ow < W; ++ow)
          a0[ow] = ((a0[ow] + w0 * p0[ow]) + w1 * p0[ow + 1]) + w2 * p0[ow + 2];
#pragma GCC unroll 1
        for (int ow = 0; ow < W; ++ow)
          a1[ow] = ((a1[ow] + w0 * p1[ow]) + w1 * p1[ow + 1]) + w2 * p1[ow + 2];
#pragma GCC unroll 1
        for (int ow = 0; ow < W; ++ow)
          a2[ow] = ((a2[ow] + w0 * p2[ow]) + w1 * p2[ow + 1]) + w2 * p2[ow + 2];
#pragma GCC unroll 1
        for (int ow = 0; ow < W; ++ow)
          a3[ow] = ((a3[ow] + w0 * p3[ow]) + w1 * p3[ow + 1]) + w2 * p3[ow + 2];
      }
    }
    std::copy(a0, a0 + W, y_bo + oh * W);
    std::copy(a1, a1 + W, y_bo + (oh + 1) * W);
    std::copy(a2, a2 + W, y_bo + (oh + 2) * W);
    std::copy(a3, a3 + W, y_bo + (oh + 3) * W);
  }
}

template <int W>
void bwd_in_slice_3x3(const float* dy_b, const float* w, float* dx_bc, int c, int in_ch,
                      int out_ch, int h) {
  for (int ihb = 0; ihb + 4 <= h; ihb += 4) {
    float a0[W], a1[W], a2[W], a3[W];
    for (int i = 0; i < W; ++i) a0[i] = 0.f;
    for (int i = 0; i < W; ++i) a1[i] = 0.f;
    for (int i = 0; i < W; ++i) a2[i] = 0.f;
    for (int i = 0; i < W; ++i) a3[i] = 0.f;
    for (int o = 0; o < out_ch; ++o) {
      const float* dy_bo = dy_b + static_cast<long>(o) * h * W;
      const float* w_oc = w + (static_cast<long>(o) * in_ch + c) * 9;
      // row ih pulls from oh = ih - kh + 1, i.e. rows ihb-1 .. ihb+4
      float dp[6][W + 2];
      for (int r = 0; r < 6; ++r) {
        const int oh = ihb + r - 1;
        dp[r][0] = 0.f;
        dp[r][W + 1] = 0.f;
        if (oh >= 0 && oh < h) {
          const float* dr = dy_bo + oh * W;
          for (int i = 0; i < W; ++i) dp[r][i + 1] = dr[i];
        } else {
          for (int i = 0; i < W; ++i) dp[r][i + 1] = 0.f;
        }
      }
      for (int kh = 0; kh < 3; ++kh) {
        const float w0 = w_oc[kh * 3], w1 = w_oc[kh * 3 + 1], w2 = w_oc[kh * 3 + 2];
        // block row j reads dp[j - kh + 2]; iw pulls dy col iw - kw + 1
        const float* p0 = dp[2 - kh];
        const float* p1 = dp[3 - kh];
        const float* p2 = dp[4 - kh];
        const float* p3 = dp[5 - kh];
#pragma GCC unroll 1
        for (int iw = 0; iw < W; ++iw)
          a0[iw] = ((a0[iw] + w0 * p0[iw + 2]) + w1 * p0[iw + 1]) + w2 * p0[iw];
#pragma GCC unroll 1
        for (int iw = 0; iw < W; ++iw)
          a1[iw] = ((a1[iw] + w0 * p1[iw + 2]) + w1 * p1[iw + 1]) + w2 * p1[iw];
#pragma GCC unroll 1
        for (int iw = 0; iw < W; ++iw)
          a2[iw] = ((a2[iw] + w0 * p2[iw + 2]) + w1 * p2[iw + 1]) + w2 * p2[iw];
#pragma GCC unroll 1
        for (int iw = 0; iw < W; ++iw)
          a3[iw] = ((a3[iw] + w0 * p3[iw + 2]) + w1 * p3[iw + 1]) + w2 * p3[iw];
      }
    }
    std::copy(a0, a0 + W, dx_bc + ihb * W);
    std::copy(a1, a1 + W, dx_bc + (ihb + 1) * W);
    std::copy(a2, a2 + W, dx_bc + (ihb + 2) * W);
    std::copy(a3, a3 + W, dx_bc + (ihb + 3) * W);
  }
}

// W-lane accumulators per weight slot over the (b, oh, ow) sweep, folded by a
// fixed halving tree at the end.
template <int W>
void bwd_w_block_3x3(const float* dy, const float* x, float* dw_oc, int o, int c,
                     const Conv2dDims& d) {
  const int h = d.in_h;
  float acc[9][W];
  for (int s = 0; s < 9; ++s)
    for (int i = 0; i < W; ++i) acc[s][i] = 0.f;
  for (int b = 0; b < d.batch; ++b) {
    const float* dy_bo = dy + (static_cast<long>(b) * d.out_ch + o) * h * W;
    const float* x_bc = x + (static_cast<long>(b) * d.in_ch + c) * h * W;
    float xp[3][W + 2];  // rolling padded rows ih = oh-1, oh, oh+1
    for (int r = 0; r < 3; ++r) {
      xp[r][0] = 0.f;
      xp[r][W + 1] = 0.f;
    }
    for (int i = 0; i < W; ++i) xp[0][i + 1] = 0.f;
    for (int i = 0; i < W; ++i) xp[1][i + 1] = x_bc[i];
    for (int oh = 0; oh < h; ++oh) {
      float* nxt = xp[(oh + 2) % 3];
      if (oh + 1 < h) {
        const float* xr = x_bc + (oh + 1) * W;
        for (int i = 0; i < W; ++i) nxt[i + 1] = xr[i];
      } else {
        for (int i = 0; i < W; ++i) nxt[i + 1] = 0.f;
      }
      const float* dr = dy_bo + oh * W;
      for (int kh = 0; kh < 3; ++kh) {
        const float* xr = xp[(oh + kh) % 3];  // padded row ih = oh + kh - 1
        float* s0 = acc[kh * 3];
        float* s1 = acc[kh * 3 + 1];
        float* s2 = acc[kh * 3 + 2];
#pragma GCC unroll 1
        for (int ow = 0; ow < W; ++ow) s0[ow] += dr[ow] * xr[ow];
#pragma GCC unroll 1
        for (int ow = 0; ow < W; ++ow) s1[ow] += dr[ow] * xr[ow + 1];
#pragma GCC unroll 1
        for (int ow = 0; ow < W; ++ow) s2[ow] += dr[ow] * xr[ow + 2];
      }
    }
  }
  for (int s = 0; s < 9; ++s) {
    float* a = acc[s];
    for (int len = W / 2; len >= 1; len /= 2)
      for (int i = 0; i < len; ++i) a[i] += a[i + len];
    dw_oc[s] = a[0];
  }
}

bool is_3x3_same(const Conv2dDims& d) {
  return d.ksize == 3 && d.stride == 1 && d.pad == 1 && d.in_w == d.out_w && d.in_h == d.out_h &&
         d.in_h % 4 == 0;
}

// ---- generic fallbacks, any geometry ----

void fwd_slice_generic(const float* x_b, const float* w_o, float bias_o, float* y_bo,
                       const Conv2dDims& d) {
  const int out_hw = d.out_h * d.out_w;
  for (int i = 0; i < out_hw; ++i) y_bo[i] = bias_o;
  for (int c = 0; c < d.in_ch; ++c) {
    const float* x_bc = x_b + static_cast<long>(c) * d.in_h * d.in_w;
    const float* w_oc = w_o + static_cast<long>(c) * d.ksize * d.ksize;
    for (int kh = 0; kh < d.ksize; ++kh) {
      for (int kw = 0; kw < d.ksize; ++kw) {
        const float wv = w_oc[kh * d.ksize + kw];
        for (int oh = 0; oh < d.out_h; ++oh) {
          const int ih = oh * d.stride + kh - d.pad;
          if (ih < 0 || ih >= d.in_h) continue;
          const float* x_row = x_bc + ih * d.in_w;
          float* y_row = y_bo + oh * d.out_w;
          for (int ow = 0; ow < d.out_w; ++ow) {
            const int iw = ow * d.stride + kw - d.pad;
            if (iw < 0 || iw >= d.in_w) continue;
            y_row[ow] += wv * x_row[iw];
          }
        }
      }
    }
  }
}

void bwd_in_slice_generic(const float* dy_b, const float* w, float* dx_bc, int c,
                          const Conv2dDims& d) {
  const int in_hw = d.in_h * d.in_w;
  for (int i = 0; i < in_hw; ++i) dx_bc[i] = 0.0f;
  for (int o = 0; o < d.out_ch; ++o) {
    const float* dy_bo = dy_b + static_cast<long>(o) * d.out_h * d.out_w;
    const float* w_oc = w + (static_cast<long>(o) * d.in_ch + c) * d.ksize * d.ksize;
    for (int kh = 0; kh < d.ksize; ++kh) {
      for (int kw = 0; kw < d.ksize; ++kw) {
        const float wv = w_oc[kh * d.ksize + kw];
        for (int oh = 0; oh < d.out_h; ++oh) {
          const int ih = oh * d.stride + kh - d.pad;
          if (ih < 0 || ih >= d.in_h) continue;
          for (int ow = 0; ow < d.out_w; ++ow) {
            const int iw = ow * d.stride + kw - d.pad;
            if (iw < 0 || iw >= d.in_w) continue;
            dx_bc[ih * d.in_w + iw] += wv * dy_bo[oh * d.out_w + ow];
          }
        }
      }
    }
  }
}

void bwd_w_block_generic(const float* dy, const float* x, float* dw_oc, int o, int c,
                         const Conv2dDims& d) {
  for (int kh = 0; kh < d.ksize; ++kh) {
    for (int kw = 0; kw < d.ksize; ++kw) {
      float lanes[8] = {};
      for (int b = 0; b < d.batch; ++b) {
        const float* dy_bo = dy + (static_cast<long>(b) * d.out_ch + o) * d.out_h * d.out_w;
        const float* x_bc = x + (static_cast<long>(b) * d.in_ch + c) * d.in_h * d.in_w;
        for (int oh = 0; oh < d.out_h; ++oh) {
          const int ih = oh * d.stride + kh - d.pad;
          if (ih < 0 || ih >= d.in_h) continue;
          for (int ow = 0; ow < d.out_w; ++ow) {
            const int iw = ow * d.stride + kw - d.pad;
            if (iw < 0 || iw >= d.in_w) continue;
            lanes[ow & 7] += dy_bo[oh * d.out_w + ow] * x_bc[ih * d.in_w + iw];
          }
        }
      }
      dw_oc[kh * d.ksize + kw] =
          ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
          ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    }
  }
}

}  // namespace

void conv2d_forward_slice(const float* x_b, const float* w_o, float bias_o, float* y_bo,
                          const Conv2dDims& d) {
  if (is_3x3_same(d)) {
    switch (d.in_w) {
      case 4: fwd_slice_3x3<4>(x_b, w_o, bias_o, y_bo, d.in_ch, d.in_h); return;
      case 8: fwd_slice_3x3<8>(x_b, w_o, bias_o, y_bo, d.in_ch, d.in_h); return;
      case 16: fwd_slice_3x3<16>(x_b, w_o, bias_o, y_bo, d.in_ch, d.in_h); return;
      case 32: fwd_slice_3x3<32>(x_b, w_o, bias_o, y_bo, d.in_ch, d.in_h); return;
      case 64: fwd_slice_3x3<64>(x_b, w_o, bias_o, y_bo, d.in_ch, d.in_h); return;
      default: break;
    }
  }
  fwd_slice_generic(x_b, w_o, bias_o, y_bo, d);
}

void conv2d_backward_input_slice(const float* dy_b, const float* w, float* dx_bc, int c,
                                 const Conv2dDims& d) {
  if (is_3x3_same(d)) {
    switch (d.in_w) {
      case 4: bwd_in_slice_3x3<4>(dy_b, w, dx_bc, c, d.in_ch, d.out_ch, d.in_h); return;
      case 8: bwd_in_slice_3x3<8>(dy_b, w, dx_bc, c, d.in_ch, d.out_ch, d.in_h); return;
      case 16: bwd_in_slice_3x3<16>(dy_b, w, dx_bc, c, d.in_ch, d.out_ch, d.in_h); return;
      case 32: bwd_in_slice_3x3<32>(dy_b, w, dx_bc, c, d.in_ch, d.out_ch, d.in_h); return;
      case 64: bwd_in_slice_3x3<64>(dy_b, w, dx_bc, c, d.in_ch, d.out_ch, d.in_h); return;
      default: break;
    }
  }
  bwd_in_slice_generic(dy_b, w, dx_bc, c, d);
}

void conv2d_backward_weight_block(const float* dy, const float* x, float* dw_oc, int o, int c,
                                  const Conv2dDims& d) {
  if (is_3x3_same(d)) {
    switch (d.in_w) {
      case 4: bwd_w_block_3x3<4>(dy, x, dw_oc, o, c, d); return;
      case 8: bwd_w_block_3x3<8>(dy, x, dw_oc, o, c, d); return;
      case 16: bwd_w_block_3x3<16>(dy, x, dw_oc, o, c, d); return;
      case 32: bwd_w_block_3x3<32>(dy, x, dw_oc, o, c, d); return;
      case 64: bwd_w_block_3x3<64>(dy, x, dw_oc, o, c, d); return;
      default: break;
    }
  }
  bwd_w_block_generic(dy, x, dw_oc, o, c, d);
}

float conv2d_backward_bias_slot(const float* dy, int o, const Conv2dDims& d) {
  const int out_hw = d.out_h * d.out_w;
  float s = 0.0f;
  for (int b = 0; b < d.batch; ++b) {
    float a = 0.0f, q = 0.0f;
    sum_sumsq_blocked8(dy + (static_cast<long>(b) * d.out_ch + o) * out_hw, out_hw, &a, &q);
    s += a;
  }
  return s;
}

void maxpool2x2_slice(const float* x_bc, float* y_bc, int* am_bc, int h, int w) {
  const int oh2 = h / 2, ow2 = w / 2;
  for (int oh = 0; oh < oh2; ++oh) {
    for (int ow = 0; ow < ow2; ++ow) {
      const int base = 2 * oh * w + 2 * ow;
      int best = base;
      float bv = x_bc[base];
      const int cand[3] = {base + 1, base + w, base + w + 1};
      for (int i = 0; i < 3; ++i) {
        if (x_bc[cand[i]] > bv) {  // strict: first max wins on ties
          bv = x_bc[cand[i]];
          best = cand[i];
        }
      }
      y_bc[oh * ow2 + ow] = bv;
      am_bc[oh * ow2 + ow] = best;
    }
  }
}

void maxpool2x2_backward_slice(const float* dy_bc, const int* am_bc, float* dx_bc, int h, int w) {
  for (int i = 0; i < h * w; ++i) dx_bc[i] = 0.0f;
  const int n = (h / 2) * (w / 2);
  for (int i = 0; i < n; ++i) dx_bc[am_bc[i]] += dy_bc[i];
}

void linear_forward_row(const float* xi, const float* w, const float* b, float* yi, int in_dim,
                        int out_dim) {
  for (int o = 0; o < out_dim; ++o) {
    yi[o] = (b ? b[o] : 0.0f) + dot_blocked8(xi, w + static_cast<long>(o) * in_dim, in_dim);
  }
}

void linear_backward_input_row(const float* dyi, const float* w, float* dxi, int in_dim,
                               int out_dim) {
  for (int k = 0; k < in_dim; ++k) dxi[k] = 0.0f;
  for (int o = 0; o < out_dim; ++o) {
    const float g = dyi[o];
    const float* wo = w + static_cast<long>(o) * in_dim;
    for (int k = 0; k < in_dim; ++k) dxi[k] += g * wo[k];
  }
}

void linear_backward_weight_row(const float* dy, const float* x, float* dwo, int o, int batch,
                                int in_dim, int out_dim) {
  for (int k = 0; k < in_dim; ++k) dwo[k] = 0.0f;
  for (int i = 0; i < batch; ++i) {
    const float g = dy[static_cast<long>(i) * out_dim + o];
    const float* xi = x + static_cast<long>(i) * in_dim;
    for (int k = 0; k < in_dim; ++k) dwo[k] += g * xi[k];
  }
}

float linear_backward_bias_slot(const float* dy, int o, int batch, int out_dim) {
  float s = 0.0f;
  for (int i = 0; i < batch; ++i) s += dy[static_cast<long>(i) * out_dim + o];
  return s;
}

void bn2d_stats_channel(const float* x, int c, int batch, int ch, int hw, float* out_mean,
                        float* out_var) {
  const double n = static_cast<double>(batch) * hw;
  float sum = 0.0f, sumsq = 0.0f;
  for (int b = 0; b < batch; ++b) {
    float s = 0.0f, q = 0.0f;
    sum_sumsq_blocked8(x + (static_cast<long>(b) * ch + c) * hw, hw, &s, &q);
    sum += s;
    sumsq += q;
  }
  const float m = static_cast<float>(sum / n);
  float v = static_cast<float>(sumsq / n) - m * m;
  if (v < 0.0f) v = 0.0f;  // cancellation guard
  *out_mean = m;
  *out_var = v;
}

void bn2d_backward_reduce_channel(const float* dy, const float* x, int c, int batch, int ch,
                                  int hw, float* out_sum_dy, float* out_sum_dy_x) {
  float sum_dy = 0.0f, sum_dy_x = 0.0f;
  for (int b = 0; b < batch; ++b) {
    const long off = (static_cast<long>(b) * ch + c) * hw;
    float a = 0.0f, q = 0.0f;
    sum_sumsq_blocked8(dy + off, hw, &a, &q);
    sum_dy += a;
    float ab = 0.0f, ac = 0.0f;
    dot2_blocked8(dy + off, x + off, x + off, hw, &ab, &ac);
    sum_dy_x += ab;
  }
  *out_sum_dy = sum_dy;
  *out_sum_dy_x = sum_dy_x;
}

void bn2d_forward_slice(const float* x_bc, float mean, float var, float gamma, float beta,
                        float eps, float* y_bc, int hw) {
  const float inv = 1.0f / std::sqrt(var + eps);
  const float g = gamma * inv;
  const float off = beta - mean * g;
  for (int i = 0; i < hw; ++i) y_bc[i] = g * x_bc[i] + off;
}

void bn2d_backward_train_apply_slice(const float* dy_bc, const float* x_bc, float mean, float k1,
                                     float k2, float k3, float* dx_bc, int hw) {
  for (int i = 0; i < hw; ++i) {
    dx_bc[i] = k1 * (dy_bc[i] - k2 - (x_bc[i] - mean) * k3);
  }
}

}  // namespace metadm::nn::kernels::inner
