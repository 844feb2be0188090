#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "beamcast/kernels.hpp"
#include "reference_model.hpp"

using namespace beamcast;

namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0, 1);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// central difference of f along every coordinate of x
std::vector<double> numeric_grad(std::vector<double>& x, const std::function<double()>& f,
                                 double eps = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = x[i];
    x[i] = s + eps;
    const double a = f();
    x[i] = s - eps;
    const double b = f();
    x[i] = s;
    g[i] = (a - b) / (2 * eps);
  }
  return g;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST_CASE("conv2d forward matches nested loops") {
  for (auto cs : {ConvShape{2, 3, 1, 5, 0, 2, 6, 7}, ConvShape{3, 2, 5, 1, 2, 0, 5, 4},
                  ConvShape{2, 4, 3, 3, 1, 1, 4, 4}, ConvShape{1, 1, 3, 3, 0, 0, 5, 5}}) {
    const int frames = 2;
    const auto in = randn(static_cast<std::size_t>(frames) * cs.cin * cs.h * cs.w, 1);
    const auto w = randn(static_cast<std::size_t>(cs.cout) * cs.patch(), 2);
    const auto b = randn(cs.cout, 3);
    const std::size_t per_out = static_cast<std::size_t>(cs.cout) * cs.out_h() * cs.out_w();
    std::vector<double> out(frames * per_out);
    conv2d_forward(cs, frames, in.data(), w.data(), b.data(), out.data());
    for (int f = 0; f < frames; ++f) {
      const std::size_t per_in = static_cast<std::size_t>(cs.cin) * cs.h * cs.w;
      ref::Fmap x{cs.cin, cs.h, cs.w, std::vector<double>(in.begin() + f * per_in, in.begin() + (f + 1) * per_in)};
      const auto want = ref::conv(x, w, b, cs.cout, cs.kh, cs.kw, cs.ph, cs.pw);
      for (std::size_t i = 0; i < per_out; ++i) CHECK(out[f * per_out + i] == doctest::Approx(want.v[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv2d backward matches finite differences") {
  const ConvShape cs{2, 3, 3, 3, 1, 1, 4, 5};
  const int frames = 2;
  auto in = randn(static_cast<std::size_t>(frames) * cs.cin * cs.h * cs.w, 4);
  auto w = randn(static_cast<std::size_t>(cs.cout) * cs.patch(), 5);
  auto b = randn(cs.cout, 6);
  const std::size_t n_out = static_cast<std::size_t>(frames) * cs.cout * cs.out_h() * cs.out_w();
  const auto probe = randn(n_out, 7);
  auto loss = [&]() {
    std::vector<double> out(n_out);
    conv2d_forward(cs, frames, in.data(), w.data(), b.data(), out.data());
    return dot(out, probe);
  };
  std::vector<double> dw(w.size(), 0.0), db(b.size(), 0.0), din(in.size(), 0.0);
  conv2d_backward(cs, frames, in.data(), w.data(), probe.data(), dw.data(), db.data(), din.data());
  CHECK(max_abs_diff(dw, numeric_grad(w, loss)) < 1e-7);
  CHECK(max_abs_diff(db, numeric_grad(b, loss)) < 1e-7);
  CHECK(max_abs_diff(din, numeric_grad(in, loss)) < 1e-7);

  // backward accumulates
  conv2d_backward(cs, frames, in.data(), w.data(), probe.data(), dw.data(), db.data(), static_cast<double*>(nullptr));
  const auto once = numeric_grad(b, loss);
  for (std::size_t i = 0; i < b.size(); ++i) CHECK(db[i] == doctest::Approx(2 * once[i]).epsilon(1e-6));
}

TEST_CASE("relu and its backward") {
  std::vector<double> x{-1.0, 0.0, 2.0};
  relu_inplace(x.data(), x.size());
  CHECK(x == std::vector<double>{0.0, 0.0, 2.0});
  std::vector<double> d{5.0, 5.0, 5.0};
  relu_backward_inplace(x.data(), d.data(), d.size());
  CHECK(d == std::vector<double>{0.0, 0.0, 5.0});
}

TEST_CASE("squeeze-excitation backward matches finite differences") {
  const int frames = 2, c = 4, hw = 6, hidden = 2;
  auto fmap = randn(static_cast<std::size_t>(frames) * c * hw, 1);
  auto w1 = randn(hidden * c, 2);
  auto w2 = randn(c * hidden, 3);
  const auto probe = randn(fmap.size(), 4);
  SeCache<double> cache;
  auto loss = [&]() {
    std::vector<double> out(fmap.size());
    SeCache<double> cc;
    se_forward(frames, c, hw, fmap.data(), w1.data(), w2.data(), hidden, out.data(), cc);
    return dot(out, probe);
  };
  std::vector<double> out(fmap.size());
  se_forward(frames, c, hw, fmap.data(), w1.data(), w2.data(), hidden, out.data(), cache);
  std::vector<double> dw1(w1.size(), 0.0), dw2(w2.size(), 0.0), df(fmap.size(), 0.0);
  se_backward(frames, c, hw, fmap.data(), w1.data(), w2.data(), hidden, cache, probe.data(), dw1.data(),
              dw2.data(), df.data());
  CHECK(max_abs_diff(dw1, numeric_grad(w1, loss)) < 1e-7);
  CHECK(max_abs_diff(dw2, numeric_grad(w2, loss)) < 1e-7);
  CHECK(max_abs_diff(df, numeric_grad(fmap, loss)) < 1e-7);
}

TEST_CASE("maxpool: floor sizing, first-max routing of gradient") {
  // 1 x 3 x 5 map -> 1 x 1 x 2, last row/column dropped
  std::vector<double> in{1, 9, 2, 3, 100,
                         4, 5, 7, 7, 100,
                         100, 100, 100, 100, 100};
  std::vector<double> out(2);
  std::vector<int> am;
  maxpool2_forward(1, 1, 3, 5, in.data(), out.data(), am);
  CHECK(out == std::vector<double>{9, 7});
  std::vector<double> din(in.size(), 0.0);
  const std::vector<double> dout{1.0, 2.0};
  maxpool2_backward(in.size(), am, dout.data(), din.data());
  CHECK(din[1] == 1.0);
  CHECK(din[7] + din[8] == 2.0);
  double s = 0;
  for (double v : din) s += v;
  CHECK(s == 3.0);
}

TEST_CASE("layernorm forward and backward") {
  const auto xv = randn(3 * 5, 1);
  Mat<double> x = Eigen::Map<const Mat<double>>(xv.data(), 3, 5);
  auto gamma = randn(5, 2), beta = randn(5, 3);
  Mat<double> y;
  LayerNormCache<double> cache;
  layernorm_forward(x, gamma.data(), beta.data(), 1e-5, y, cache);
  for (int r = 0; r < 3; ++r) {
    std::vector<double> row(x.row(r).data(), x.row(r).data() + 5);
    const auto want = ref::layernorm(row, gamma, beta, 1e-5);
    for (int i = 0; i < 5; ++i) CHECK(y(r, i) == doctest::Approx(want[i]).epsilon(1e-12));
  }

  const auto pv = randn(15, 4);
  Mat<double> probe = Eigen::Map<const Mat<double>>(pv.data(), 3, 5);
  std::vector<double> xs(xv);
  auto loss = [&]() {
    Mat<double> xx = Eigen::Map<const Mat<double>>(xs.data(), 3, 5), yy;
    LayerNormCache<double> cc;
    layernorm_forward(xx, gamma.data(), beta.data(), 1e-5, yy, cc);
    return (yy.array() * probe.array()).sum();
  };
  std::vector<double> dg(5, 0.0), db(5, 0.0);
  const Mat<double> dx = layernorm_backward(x, gamma.data(), cache, probe, dg.data(), db.data());
  const auto nx = numeric_grad(xs, loss);
  for (int i = 0; i < 15; ++i) CHECK(std::abs(dx.data()[i] - nx[i]) < 1e-7);
  CHECK(max_abs_diff(dg, numeric_grad(gamma, loss)) < 1e-7);
  CHECK(max_abs_diff(db, numeric_grad(beta, loss)) < 1e-7);
}

TEST_CASE("exact GELU and its derivative") {
  CHECK(gelu(0.0) == 0.0);
  CHECK(gelu(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(gelu(-1.0) == doctest::Approx(-0.15865525393145707).epsilon(1e-14));
  for (double x : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
    const double num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
    CHECK(gelu_grad(x) == doctest::Approx(num).epsilon(1e-8));
  }
  CHECK(gelu(1.0f) == doctest::Approx(0.8413447f).epsilon(1e-6));
}

TEST_CASE("softmax and argmax") {
  std::vector<double> z{1000.0, 1000.0, 999.0};
  softmax_inplace(z.data(), 3);
  const double e = std::exp(-1.0);
  CHECK(z[0] == doctest::Approx(1 / (2 + e)).epsilon(1e-14));
  CHECK(z[2] == doctest::Approx(e / (2 + e)).epsilon(1e-14));
  const std::vector<double> t{0.1, 0.4, 0.4, 0.1};
  CHECK(argmax_first(t.data(), 4) == 1);
  const std::vector<float> u{-1.f};
  CHECK(argmax_first(u.data(), 1) == 0);
}

TEST_CASE("dropout masks") {
  const auto a = dropout_mask<double>(42, 20000, 0.25);
  CHECK(a == dropout_mask<double>(42, 20000, 0.25));
  CHECK(a != dropout_mask<double>(43, 20000, 0.25));
  std::size_t zeros = 0;
  for (double v : a) {
    CHECK((v == 0.0 || v == doctest::Approx(1 / 0.75)));
    zeros += v == 0.0;
  }
  // binomial(20000, 0.25): sd ~ 61
  CHECK(std::abs(static_cast<double>(zeros) - 5000.0) < 300.0);
  for (double v : dropout_mask<double>(1, 100, 0.0)) CHECK(v == 1.0);
  // a prefix of a longer stream is the shorter stream
  const auto p = dropout_mask<double>(42, 100, 0.25);
  for (int i = 0; i < 100; ++i) CHECK(p[i] == a[i]);
}
