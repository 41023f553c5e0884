#pragma once

// Dense NN kernels in two flavors: a serial reference (canonical accumulation
// order, plain loops) and an OpenMP version parallelized over independent
// output slots. Per-slot accumulation order is identical in both, so they
// produce bit-identical results at any thread count; the top-level functions
// dispatch on the process-wide parallel switch.

namespace metadm::nn::kernels {

struct Conv2dDims {
  int batch, in_ch, in_h, in_w;
  int out_ch, ksize, stride, pad;
  int out_h, out_w;
};

// Validates and fills out_h/out_w. Throws ShapeError naming the bad axis.
Conv2dDims make_conv2d_dims(int batch, int in_ch, int in_h, int in_w, int out_ch, int ksize,
                            int stride, int pad);

void set_parallel(bool enabled);
bool parallel_enabled();
void set_num_threads(int n);
int max_threads();

namespace serial {
void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const Conv2dDims& d);
void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dDims& d);
void conv2d_backward_weight(const float* dy, const float* x, float* dw, const Conv2dDims& d);
void conv2d_backward_bias(const float* dy, float* db, const Conv2dDims& d);

void linear_forward(const float* x, const float* w, const float* b, float* y, int batch, int in_dim,
                    int out_dim);
void linear_backward_input(const float* dy, const float* w, float* dx, int batch, int in_dim,
                           int out_dim);
void linear_backward_weight(const float* dy, const float* x, float* dw, int batch, int in_dim,
                            int out_dim);
void linear_backward_bias(const float* dy, float* db, int batch, int out_dim);

// Per-channel biased mean/var over batch and spatial dims.
void bn2d_stats(const float* x, float* mean, float* var, int batch, int ch, int hw);
void bn2d_forward(const float* x, const float* mean, const float* var, const float* gamma,
                  const float* beta, float eps, float* y, int batch, int ch, int hw);
// Training-mode backward (batch statistics participate in the gradient).
void bn2d_backward_train(const float* dy, const float* x, const float* mean, const float* var,
                         const float* gamma, float eps, float* dx, float* dgamma, float* dbeta,
                         int batch, int ch, int hw);
// Eval-mode backward (stats are constants).
void bn2d_backward_eval(const float* dy, const float* x, const float* mean, const float* var,
                        const float* gamma, float eps, float* dx, float* dgamma, float* dbeta,
                        int batch, int ch, int hw);

void maxpool2x2_forward(const float* x, float* y, int* argmax, int batch, int ch, int h, int w);
void maxpool2x2_backward(const float* dy, const int* argmax, float* dx, int batch, int ch, int h,
                         int w);
}  // namespace serial

namespace par {
void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const Conv2dDims& d);
void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dDims& d);
void conv2d_backward_weight(const float* dy, const float* x, float* dw, const Conv2dDims& d);
void conv2d_backward_bias(const float* dy, float* db, const Conv2dDims& d);

void linear_forward(const float* x, const float* w, const float* b, float* y, int batch, int in_dim,
                    int out_dim);
void linear_backward_input(const float* dy, const float* w, float* dx, int batch, int in_dim,
                           int out_dim);
void linear_backward_weight(const float* dy, const float* x, float* dw, int batch, int in_dim,
                            int out_dim);
void linear_backward_bias(const float* dy, float* db, int batch, int out_dim);

void bn2d_stats(const float* x, float* mean, float* var, int batch, int ch, int hw);
void bn2d_forward(const float* x, const float* mean, const float* var, const float* gamma,
                  const float* beta, float eps, float* y, int batch, int ch, int hw);
void bn2d_backward_train(const float* dy, const float* x, const float* mean, const float* var,
                         const float* gamma, float eps, float* dx, float* dgamma, float* dbeta,
                         int batch, int ch, int hw);
void bn2d_backward_eval(const float* dy, const float* x, const float* mean, const float* var,
                        const float* gamma, float eps, float* dx, float* dgamma, float* dbeta,
                        int batch, int ch, int hw);

void maxpool2x2_forward(const float* x, float* y, int* argmax, int batch, int ch, int h, int w);
void maxpool2x2_backward(const float* dy, const int* argmax, float* dx, int batch, int ch, int h,
                         int w);
}  // namespace par

// Dispatching entry points used by the autograd ops.
void conv2d_forward(const float* x, const float* w, const float* bias, float* y,
                    const Conv2dDims& d);
void conv2d_backward_input(const float* dy, const float* w, float* dx, const Conv2dDims& d);
void conv2d_backward_weight(const float* dy, const float* x, float* dw, const Conv2dDims& d);
void conv2d_backward_bias(const float* dy, float* db, const Conv2dDims& d);
void linear_forward(const float* x, const float* w, const float* b, float* y, int batch, int in_dim,
                    int out_dim);
void linear_backward_input(const float* dy, const float* w, float* dx, int batch, int in_dim,
                           int out_dim);
void linear_backward_weight(const float* dy, const float* x, float* dw, int batch, int in_dim,
                            int out_dim);
void linear_backward_bias(const float* dy, float* db, int batch, int out_dim);
void bn2d_stats(const float* x, float* mean, float* var, int batch, int ch, int hw);
void bn2d_forward(const float* x, const float* mean, const float* var, const float* gamma,
                  const float* beta, float eps, float* y, int batch, int ch, int hw);
void bn2d_backward_train(const float* dy, const float* x, const float* mean, const float* var,
                         const float* gamma, float eps, float* dx, float* dgamma, float* dbeta,
                         int batch, int ch, int hw);
void bn2d_backward_eval(const float* dy, const float* x, const float* mean, const float* var,
                        const float* gamma, float eps, float* dx, float* dgamma, float* dbeta,
                        int batch, int ch, int hw);
void maxpool2x2_forward(const float* x, float* y, int* argmax, int batch, int ch, int h, int w);
void maxpool2x2_backward(const float* dy, const int* argmax, float* dx, int batch, int ch, int h,
                         int w);

}  // namespace metadm::nn::kernels
