#pragma once

// Naive double-precision reference implementations used as independent
// oracles. Plain nested loops, no blocking, no shared code with the library
// kernels. Shapes are passed explicitly; tensors are flat row-major vectors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace refops {

inline std::vector<double> to_f64(const std::vector<float>& v) {
  return std::vector<double>(v.begin(), v.end());
}

inline std::vector<double> conv2d(const std::vector<double>& x, int batch, int in_ch, int in_h,
                                  int in_w, const std::vector<double>& w, int out_ch, int k,
                                  int stride, int pad, const std::vector<double>* bias) {
  const int out_h = (in_h + 2 * pad - k) / stride + 1;
  const int out_w = (in_w + 2 * pad - k) / stride + 1;
  std::vector<double> y(static_cast<std::size_t>(batch) * out_ch * out_h * out_w, 0.0);
  for (int b = 0; b < batch; ++b)
    for (int o = 0; o < out_ch; ++o)
      for (int oh = 0; oh < out_h; ++oh)
        for (int ow = 0; ow < out_w; ++ow) {
          double acc = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
          for (int c = 0; c < in_ch; ++c)
            for (int kh = 0; kh < k; ++kh)
              for (int kw = 0; kw < k; ++kw) {
                const int ih = oh * stride + kh - pad;
                const int iw = ow * stride + kw - pad;
                if (ih < 0 || ih >= in_h || iw < 0 || iw >= in_w) continue;
                acc += x[((static_cast<std::size_t>(b) * in_ch + c) * in_h + ih) * in_w + iw] *
                       w[((static_cast<std::size_t>(o) * in_ch + c) * k + kh) * k + kw];
              }
          y[((static_cast<std::size_t>(b) * out_ch + o) * out_h + oh) * out_w + ow] = acc;
        }
  return y;
}

inline std::vector<double> linear(const std::vector<double>& x, int batch, int in_dim,
                                  const std::vector<double>& w, int out_dim,
                                  const std::vector<double>* bias) {
  std::vector<double> y(static_cast<std::size_t>(batch) * out_dim);
  for (int b = 0; b < batch; ++b)
    for (int o = 0; o < out_dim; ++o) {
      double acc = bias ? (*bias)[static_cast<std::size_t>(o)] : 0.0;
      for (int i = 0; i < in_dim; ++i)
        acc += x[static_cast<std::size_t>(b) * in_dim + i] *
               w[static_cast<std::size_t>(o) * in_dim + i];
      y[static_cast<std::size_t>(b) * out_dim + o] = acc;
    }
  return y;
}

// Training-mode batch norm with biased batch variance.
inline std::vector<double> bn_train(const std::vector<double>& x, int batch, int ch, int hw,
                                    const std::vector<double>& gamma,
                                    const std::vector<double>& beta, double eps) {
  std::vector<double> y(x.size());
  const double n = static_cast<double>(batch) * hw;
  for (int c = 0; c < ch; ++c) {
    double sum = 0.0, sumsq = 0.0;
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < hw; ++i) {
        const double v = x[(static_cast<std::size_t>(b) * ch + c) * hw + i];
        sum += v;
        sumsq += v * v;
      }
    const double m = sum / n;
    const double var = std::max(0.0, sumsq / n - m * m);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < hw; ++i) {
        const auto idx = (static_cast<std::size_t>(b) * ch + c) * hw + i;
        y[idx] = gamma[static_cast<std::size_t>(c)] * (x[idx] - m) * inv +
                 beta[static_cast<std::size_t>(c)];
      }
  }
  return y;
}

inline std::vector<double> bn_eval(const std::vector<double>& x, int batch, int ch, int hw,
                                   const std::vector<double>& gamma,
                                   const std::vector<double>& beta,
                                   const std::vector<double>& mean,
                                   const std::vector<double>& var, double eps) {
  std::vector<double> y(x.size());
  for (int c = 0; c < ch; ++c) {
    const double inv = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);
    for (int b = 0; b < batch; ++b)
      for (int i = 0; i < hw; ++i) {
        const auto idx = (static_cast<std::size_t>(b) * ch + c) * hw + i;
        y[idx] = gamma[static_cast<std::size_t>(c)] *
                     (x[idx] - mean[static_cast<std::size_t>(c)]) * inv +
                 beta[static_cast<std::size_t>(c)];
      }
  }
  return y;
}

inline std::vector<double> relu(std::vector<double> x) {
  for (auto& v : x) v = std::max(0.0, v);
  return x;
}

inline std::vector<double> maxpool2x2(const std::vector<double>& x, int batch, int ch, int h,
                                      int w) {
  const int oh = h / 2, ow = w / 2;
  std::vector<double> y(static_cast<std::size_t>(batch) * ch * oh * ow);
  for (int bc = 0; bc < batch * ch; ++bc)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const double* p = x.data() + (static_cast<std::size_t>(bc) * h + 2 * i) * w + 2 * j;
        y[(static_cast<std::size_t>(bc) * oh + i) * ow + j] =
            std::max(std::max(p[0], p[1]), std::max(p[w], p[w + 1]));
      }
  return y;
}

inline std::vector<double> mean_spatial(const std::vector<double>& x, int batch, int ch, int hw) {
  std::vector<double> y(static_cast<std::size_t>(batch) * ch);
  for (int bc = 0; bc < batch * ch; ++bc) {
    double acc = 0.0;
    for (int i = 0; i < hw; ++i) acc += x[static_cast<std::size_t>(bc) * hw + i];
    y[static_cast<std::size_t>(bc)] = acc / hw;
  }
  return y;
}

inline std::vector<double> class_means(const std::vector<double>& emb, int s_count, int d_dim,
                                       const std::vector<int>& group_of, int n_groups) {
  std::vector<double> out(static_cast<std::size_t>(n_groups) * d_dim, 0.0);
  std::vector<int> counts(static_cast<std::size_t>(n_groups), 0);
  for (int s = 0; s < s_count; ++s) {
    const int k = group_of[static_cast<std::size_t>(s)];
    ++counts[static_cast<std::size_t>(k)];
    for (int d = 0; d < d_dim; ++d)
      out[static_cast<std::size_t>(k) * d_dim + d] += emb[static_cast<std::size_t>(s) * d_dim + d];
  }
  for (int k = 0; k < n_groups; ++k)
    for (int d = 0; d < d_dim; ++d)
      out[static_cast<std::size_t>(k) * d_dim + d] /= counts[static_cast<std::size_t>(k)];
  return out;
}

inline std::vector<double> neg_sqdist(const std::vector<double>& q, int q_count,
                                      const std::vector<double>& c, int k_count, int d_dim) {
  std::vector<double> out(static_cast<std::size_t>(q_count) * k_count);
  for (int i = 0; i < q_count; ++i)
    for (int k = 0; k < k_count; ++k) {
      double acc = 0.0;
      for (int d = 0; d < d_dim; ++d) {
        const double diff = q[static_cast<std::size_t>(i) * d_dim + d] -
                            c[static_cast<std::size_t>(k) * d_dim + d];
        acc += diff * diff;
      }
      out[static_cast<std::size_t>(i) * k_count + k] = -acc;
    }
  return out;
}

inline double masked_nll(const std::vector<double>& logits, int q_count, int k_count,
                         const std::vector<int>& labels, const std::vector<float>& mask) {
  double loss = 0.0;
  for (int q = 0; q < q_count; ++q) {
    const double* row = logits.data() + static_cast<std::size_t>(q) * k_count;
    double mx = row[0];
    for (int k = 1; k < k_count; ++k) mx = std::max(mx, row[k]);
    double se = 0.0;
    for (int k = 0; k < k_count; ++k) se += std::exp(row[k] - mx);
    loss += mask[static_cast<std::size_t>(q)] *
            (row[labels[static_cast<std::size_t>(q)]] - mx - std::log(se));
  }
  return -loss / q_count;
}

inline double sum(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc;
}

inline double mean(const std::vector<double>& v) { return sum(v) / static_cast<double>(v.size()); }

inline double sum_squares(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return acc;
}

}  // namespace refops
