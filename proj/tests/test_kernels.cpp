#include <cstring>
#include <vector>

#include "doctest.h"
#include "metadm/errors.hpp"
#include "metadm/kernels.hpp"
#include "metadm/rng.hpp"
#include "ref_ops.hpp"

using namespace metadm;
using namespace metadm::nn::kernels;

namespace {

std::vector<float> random_vec(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  rng.fill_normal(v);
  return v;
}

double max_abs_diff(const std::vector<float>& got, const std::vector<double>& want) {
  REQUIRE(got.size() == want.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(got[i]) - want[i]));
  }
  return worst;
}

struct ParallelOff {
  ParallelOff() { set_parallel(false); }
  ~ParallelOff() { set_parallel(true); }
};

}  // namespace

TEST_CASE("conv2d dims validation names the offending axis") {
  CHECK_NOTHROW(make_conv2d_dims(1, 1, 3, 3, 1, 3, 1, 0));
  CHECK_THROWS_WITH_AS(make_conv2d_dims(0, 1, 3, 3, 1, 3, 1, 0),
                       doctest::Contains("batch"), ShapeError);
  CHECK_THROWS_AS(make_conv2d_dims(1, 0, 3, 3, 1, 3, 1, 0), ShapeError);
  CHECK_THROWS_AS(make_conv2d_dims(1, 1, 3, 3, 0, 3, 1, 0), ShapeError);
  CHECK_THROWS_AS(make_conv2d_dims(1, 1, 3, 3, 1, 3, 0, 0), ShapeError);
  CHECK_THROWS_AS(make_conv2d_dims(1, 1, 3, 3, 1, 3, 1, -1), ShapeError);
  // kernel larger than the padded input
  CHECK_THROWS_AS(make_conv2d_dims(1, 1, 2, 2, 1, 3, 1, 0), ShapeError);
  auto d = make_conv2d_dims(2, 3, 8, 8, 4, 3, 2, 1);
  CHECK(d.out_h == 4);
  CHECK(d.out_w == 4);
}

TEST_CASE("conv2d forward equals the naive oracle on all small shapes") {
  Rng rng(101);
  ParallelOff off;
  for (int b : {1, 2})
    for (int c : {1, 3})
      for (int o : {1, 2})
        for (int k : {1, 2, 3})
          for (int stride : {1, 2})
            for (int pad : {0, 1})
              for (int h = 1; h <= 8; h += 3)
                for (int w = 1; w <= 8; w += 3) {
                  if (h + 2 * pad < k || w + 2 * pad < k) continue;
                  auto d = make_conv2d_dims(b, c, h, w, o, k, stride, pad);
                  auto x = random_vec(static_cast<std::size_t>(b) * c * h * w, rng);
                  auto wt = random_vec(static_cast<std::size_t>(o) * c * k * k, rng);
                  auto bias = random_vec(static_cast<std::size_t>(o), rng);
                  std::vector<float> y(static_cast<std::size_t>(b) * o * d.out_h * d.out_w);
                  conv2d_forward(x.data(), wt.data(), bias.data(), y.data(), d);
                  auto want = refops::conv2d(refops::to_f64(x), b, c, h, w, refops::to_f64(wt), o,
                                             k, stride, pad, nullptr);
                  for (int bo = 0; bo < b * o; ++bo)
                    for (int i = 0; i < d.out_h * d.out_w; ++i)
                      want[static_cast<std::size_t>(bo) * d.out_h * d.out_w + i] +=
                          bias[static_cast<std::size_t>(bo % o)];
                  CHECK(max_abs_diff(y, want) < 1e-5);
                }
}

TEST_CASE("conv2d backward kernels match naive oracles") {
  Rng rng(102);
  ParallelOff off;
  // Covers the width-specialized 3x3 path (8x8) and the generic path (6x6
  // same-size, strided 5x5, 1x1 kernel).
  struct Case {
    int b, c, h, w, o, k, stride, pad;
  };
  for (const Case& cs : {Case{2, 3, 8, 8, 4, 3, 1, 1}, Case{2, 3, 6, 6, 4, 3, 1, 1},
                         Case{1, 2, 5, 5, 3, 3, 2, 1}, Case{2, 4, 4, 4, 2, 1, 1, 0}}) {
    auto d = make_conv2d_dims(cs.b, cs.c, cs.h, cs.w, cs.o, cs.k, cs.stride, cs.pad);
    const auto xe = static_cast<std::size_t>(cs.b) * cs.c * cs.h * cs.w;
    const auto we = static_cast<std::size_t>(cs.o) * cs.c * cs.k * cs.k;
    const auto ye = static_cast<std::size_t>(cs.b) * cs.o * d.out_h * d.out_w;
    auto x = random_vec(xe, rng);
    auto wt = random_vec(we, rng);
    auto dy = random_vec(ye, rng);

    std::vector<float> dx(xe), dw(we), db(static_cast<std::size_t>(cs.o));
    conv2d_backward_input(dy.data(), wt.data(), dx.data(), d);
    conv2d_backward_weight(dy.data(), x.data(), dw.data(), d);
    conv2d_backward_bias(dy.data(), db.data(), d);

    const auto dy64 = refops::to_f64(dy);
    const auto x64 = refops::to_f64(x);
    const auto w64 = refops::to_f64(wt);
    std::vector<double> dx_want(xe, 0.0), dw_want(we, 0.0), db_want(cs.o, 0.0);
    for (int b = 0; b < cs.b; ++b)
      for (int o = 0; o < cs.o; ++o)
        for (int oh = 0; oh < d.out_h; ++oh)
          for (int ow = 0; ow < d.out_w; ++ow) {
            const double g =
                dy64[((static_cast<std::size_t>(b) * cs.o + o) * d.out_h + oh) * d.out_w + ow];
            db_want[static_cast<std::size_t>(o)] += g;
            for (int c = 0; c < cs.c; ++c)
              for (int kh = 0; kh < cs.k; ++kh)
                for (int kw = 0; kw < cs.k; ++kw) {
                  const int ih = oh * cs.stride + kh - cs.pad;
                  const int iw = ow * cs.stride + kw - cs.pad;
                  if (ih < 0 || ih >= cs.h || iw < 0 || iw >= cs.w) continue;
                  const auto xi =
                      ((static_cast<std::size_t>(b) * cs.c + c) * cs.h + ih) * cs.w + iw;
                  const auto wi =
                      ((static_cast<std::size_t>(o) * cs.c + c) * cs.k + kh) * cs.k + kw;
                  dx_want[xi] += g * w64[wi];
                  dw_want[wi] += g * x64[xi];
                }
          }
    CHECK(max_abs_diff(dx, dx_want) < 1e-4);
    CHECK(max_abs_diff(dw, dw_want) < 1e-4);
    CHECK(max_abs_diff(db, db_want) < 1e-4);
  }
}

TEST_CASE("linear kernels match naive oracles") {
  Rng rng(103);
  ParallelOff off;
  const int B = 5, I = 9, O = 7;
  auto x = random_vec(B * I, rng);
  auto w = random_vec(O * I, rng);
  auto b = random_vec(O, rng);
  auto dy = random_vec(B * O, rng);

  std::vector<float> y(B * O), dx(B * I), dw(O * I), db(O);
  linear_forward(x.data(), w.data(), b.data(), y.data(), B, I, O);
  linear_backward_input(dy.data(), w.data(), dx.data(), B, I, O);
  linear_backward_weight(dy.data(), x.data(), dw.data(), B, I, O);
  linear_backward_bias(dy.data(), db.data(), B, O);

  const auto b64 = refops::to_f64(b);
  auto y_want = refops::linear(refops::to_f64(x), B, I, refops::to_f64(w), O, &b64);
  CHECK(max_abs_diff(y, y_want) < 1e-5);

  std::vector<double> dx_want(B * I, 0.0), dw_want(O * I, 0.0), db_want(O, 0.0);
  for (int bi = 0; bi < B; ++bi)
    for (int o = 0; o < O; ++o) {
      const double g = dy[static_cast<std::size_t>(bi) * O + o];
      db_want[static_cast<std::size_t>(o)] += g;
      for (int i = 0; i < I; ++i) {
        dx_want[static_cast<std::size_t>(bi) * I + i] += g * w[static_cast<std::size_t>(o) * I + i];
        dw_want[static_cast<std::size_t>(o) * I + i] += g * x[static_cast<std::size_t>(bi) * I + i];
      }
    }
  CHECK(max_abs_diff(dx, dx_want) < 1e-5);
  CHECK(max_abs_diff(dw, dw_want) < 1e-5);
  CHECK(max_abs_diff(db, db_want) < 1e-5);
}

TEST_CASE("batch-norm kernels match naive oracles") {
  Rng rng(104);
  ParallelOff off;
  const int B = 3, C = 5, HW = 8;
  auto x = random_vec(B * C * HW, rng);
  auto gamma = random_vec(C, rng);
  auto beta = random_vec(C, rng);
  auto dy = random_vec(B * C * HW, rng);
  const float eps = 1e-5f;

  std::vector<float> m(C), v(C), y(B * C * HW);
  bn2d_stats(x.data(), m.data(), v.data(), B, C, HW);
  bn2d_forward(x.data(), m.data(), v.data(), gamma.data(), beta.data(), eps, y.data(), B, C, HW);
  auto y_want = refops::bn_train(refops::to_f64(x), B, C, HW, refops::to_f64(gamma),
                                 refops::to_f64(beta), eps);
  CHECK(max_abs_diff(y, y_want) < 1e-4);

  // dx formula: (gamma/sigma) * (dy - mean(dy) - xhat * mean(dy * xhat))
  std::vector<float> dx(B * C * HW), dg(C), db(C);
  bn2d_backward_train(dy.data(), x.data(), m.data(), v.data(), gamma.data(), eps, dx.data(),
                      dg.data(), db.data(), B, C, HW);
  const double n = static_cast<double>(B) * HW;
  std::vector<double> dx_want(B * C * HW), dg_want(C), db_want(C);
  for (int c = 0; c < C; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(v[c]) + eps);
    double sdy = 0.0, sdyxh = 0.0;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < HW; ++i) {
        const auto idx = (static_cast<std::size_t>(b) * C + c) * HW + i;
        sdy += dy[idx];
        sdyxh += static_cast<double>(dy[idx]) * (x[idx] - m[c]) * inv;
      }
    dg_want[static_cast<std::size_t>(c)] = sdyxh;
    db_want[static_cast<std::size_t>(c)] = sdy;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < HW; ++i) {
        const auto idx = (static_cast<std::size_t>(b) * C + c) * HW + i;
        const double xhat = (x[idx] - m[c]) * inv;
        dx_want[idx] = gamma[c] * inv * (dy[idx] - sdy / n - xhat * sdyxh / n);
      }
  }
  CHECK(max_abs_diff(dx, dx_want) < 1e-4);
  CHECK(max_abs_diff(dg, dg_want) < 1e-4);
  CHECK(max_abs_diff(db, db_want) < 1e-4);

  // eval mode treats the statistics as constants
  bn2d_backward_eval(dy.data(), x.data(), m.data(), v.data(), gamma.data(), eps, dx.data(),
                     dg.data(), db.data(), B, C, HW);
  for (int c = 0; c < C; ++c) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(v[c]) + eps);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < HW; ++i) {
        const auto idx = (static_cast<std::size_t>(b) * C + c) * HW + i;
        dx_want[idx] = gamma[c] * inv * dy[idx];
      }
  }
  CHECK(max_abs_diff(dx, dx_want) < 1e-4);
}

TEST_CASE("max-pool forward/backward match the oracle and first max wins ties") {
  ParallelOff off;
  Rng rng(105);
  const int B = 2, C = 3, H = 6, W = 4;
  auto x = random_vec(B * C * H * W, rng);
  std::vector<float> y(B * C * (H / 2) * (W / 2));
  std::vector<int> argmax(y.size());
  maxpool2x2_forward(x.data(), y.data(), argmax.data(), B, C, H, W);
  auto want = refops::maxpool2x2(refops::to_f64(x), B, C, H, W);
  CHECK(max_abs_diff(y, want) == 0.0);

  std::vector<float> dy(y.size());
  rng.fill_normal(dy);
  std::vector<float> dx(x.size(), 0.0f);
  maxpool2x2_backward(dy.data(), argmax.data(), dx.data(), B, C, H, W);
  // argmax holds offsets within each (batch, channel) plane
  const std::size_t out_hw = (H / 2) * (W / 2);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const std::size_t global = (i / out_hw) * (H * W) + static_cast<std::size_t>(argmax[i]);
    CHECK(x[global] == y[i]);
    CHECK(dx[global] == dy[i]);  // windows are disjoint, so no accumulation
  }

  // all-equal window: the first (top-left) element takes the gradient
  std::vector<float> flat(1 * 1 * 2 * 2, 7.0f);
  std::vector<float> fy(1);
  std::vector<int> fa(1);
  maxpool2x2_forward(flat.data(), fy.data(), fa.data(), 1, 1, 2, 2);
  CHECK(fa[0] == 0);
}

TEST_CASE("serial and parallel kernel flavors are bit-identical") {
  Rng rng(106);
  struct Case {
    int b, c, h, w, o, k, stride, pad;
  };
  for (const Case& cs :
       {Case{2, 3, 32, 32, 8, 3, 1, 1}, Case{3, 8, 16, 16, 8, 3, 1, 1},
        Case{2, 8, 8, 8, 8, 3, 1, 1}, Case{2, 8, 4, 4, 8, 3, 1, 1}, Case{1, 3, 11, 7, 5, 3, 2, 1},
        Case{2, 2, 9, 9, 3, 5, 2, 2}}) {
    auto d = make_conv2d_dims(cs.b, cs.c, cs.h, cs.w, cs.o, cs.k, cs.stride, cs.pad);
    const auto xe = static_cast<std::size_t>(cs.b) * cs.c * cs.h * cs.w;
    const auto we = static_cast<std::size_t>(cs.o) * cs.c * cs.k * cs.k;
    const auto ye = static_cast<std::size_t>(cs.b) * cs.o * d.out_h * d.out_w;
    auto x = random_vec(xe, rng);
    auto wt = random_vec(we, rng);
    auto bias = random_vec(static_cast<std::size_t>(cs.o), rng);
    auto dy = random_vec(ye, rng);

    std::vector<float> a(ye), b2(ye);
    serial::conv2d_forward(x.data(), wt.data(), bias.data(), a.data(), d);
    par::conv2d_forward(x.data(), wt.data(), bias.data(), b2.data(), d);
    CHECK(std::memcmp(a.data(), b2.data(), ye * sizeof(float)) == 0);

    std::vector<float> dxs(xe), dxp(xe);
    serial::conv2d_backward_input(dy.data(), wt.data(), dxs.data(), d);
    par::conv2d_backward_input(dy.data(), wt.data(), dxp.data(), d);
    CHECK(std::memcmp(dxs.data(), dxp.data(), xe * sizeof(float)) == 0);

    std::vector<float> dws(we), dwp(we);
    serial::conv2d_backward_weight(dy.data(), x.data(), dws.data(), d);
    par::conv2d_backward_weight(dy.data(), x.data(), dwp.data(), d);
    CHECK(std::memcmp(dws.data(), dwp.data(), we * sizeof(float)) == 0);
  }

  const int B = 4, C = 6, HW = 25, I = 31, O = 17;
  auto x = random_vec(static_cast<std::size_t>(B) * C * HW, rng);
  auto gamma = random_vec(C, rng);
  auto beta = random_vec(C, rng);
  auto dy = random_vec(static_cast<std::size_t>(B) * C * HW, rng);
  std::vector<float> ms(C), vs(C), mp(C), vp(C);
  serial::bn2d_stats(x.data(), ms.data(), vs.data(), B, C, HW);
  par::bn2d_stats(x.data(), mp.data(), vp.data(), B, C, HW);
  CHECK(std::memcmp(ms.data(), mp.data(), C * sizeof(float)) == 0);
  CHECK(std::memcmp(vs.data(), vp.data(), C * sizeof(float)) == 0);
  std::vector<float> dxs(x.size()), dxp(x.size()), dgs(C), dgp(C), dbs(C), dbp(C);
  serial::bn2d_backward_train(dy.data(), x.data(), ms.data(), vs.data(), gamma.data(), 1e-5f,
                              dxs.data(), dgs.data(), dbs.data(), B, C, HW);
  par::bn2d_backward_train(dy.data(), x.data(), ms.data(), vs.data(), gamma.data(), 1e-5f,
                           dxp.data(), dgp.data(), dbp.data(), B, C, HW);
  CHECK(std::memcmp(dxs.data(), dxp.data(), x.size() * sizeof(float)) == 0);
  CHECK(std::memcmp(dgs.data(), dgp.data(), C * sizeof(float)) == 0);

  auto lx = random_vec(static_cast<std::size_t>(B) * I, rng);
  auto lw = random_vec(static_cast<std::size_t>(O) * I, rng);
  auto ldy = random_vec(static_cast<std::size_t>(B) * O, rng);
  std::vector<float> lys(static_cast<std::size_t>(B) * O), lyp(lys.size());
  serial::linear_forward(lx.data(), lw.data(), nullptr, lys.data(), B, I, O);
  par::linear_forward(lx.data(), lw.data(), nullptr, lyp.data(), B, I, O);
  CHECK(std::memcmp(lys.data(), lyp.data(), lys.size() * sizeof(float)) == 0);
  std::vector<float> lws(lw.size()), lwp(lw.size());
  serial::linear_backward_weight(ldy.data(), lx.data(), lws.data(), B, I, O);
  par::linear_backward_weight(ldy.data(), lx.data(), lwp.data(), B, I, O);
  CHECK(std::memcmp(lws.data(), lwp.data(), lw.size() * sizeof(float)) == 0);
}

TEST_CASE("parallel dispatch honors the process-wide switch") {
  CHECK(parallel_enabled());
  set_parallel(false);
  CHECK(!parallel_enabled());
  set_parallel(true);
  CHECK(parallel_enabled());
  CHECK(max_threads() >= 1);
}
