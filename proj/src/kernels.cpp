#include "beamcast/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "beamcast/common.hpp"

namespace beamcast {

namespace {

template <typename S>
void im2col(const ConvShape& cs, const S* in, Mat<S>& cols) {
  const int oh = cs.out_h(), ow = cs.out_w();
  cols.resize(cs.patch(), oh * ow);
  for (int ci = 0; ci < cs.cin; ++ci)
    for (int i = 0; i < cs.kh; ++i)
      for (int j = 0; j < cs.kw; ++j) {
        S* row = cols.data() + static_cast<std::size_t>((ci * cs.kh + i) * cs.kw + j) * oh * ow;
        const S* plane = in + static_cast<std::size_t>(ci) * cs.h * cs.w;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy + i - cs.ph;
          S* dst = row + static_cast<std::size_t>(oy) * ow;
          if (y < 0 || y >= cs.h) {
            std::fill(dst, dst + ow, S(0));
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            const int x = ox + j - cs.pw;
            dst[ox] = (x < 0 || x >= cs.w) ? S(0) : plane[y * cs.w + x];
          }
        }
      }
}

template <typename S>
void col2im_add(const ConvShape& cs, const Mat<S>& cols, S* din) {
  const int oh = cs.out_h(), ow = cs.out_w();
  for (int ci = 0; ci < cs.cin; ++ci)
    for (int i = 0; i < cs.kh; ++i)
      for (int j = 0; j < cs.kw; ++j) {
        const S* row =
            cols.data() + static_cast<std::size_t>((ci * cs.kh + i) * cs.kw + j) * oh * ow;
        S* plane = din + static_cast<std::size_t>(ci) * cs.h * cs.w;
        for (int oy = 0; oy < oh; ++oy) {
          const int y = oy + i - cs.ph;
          if (y < 0 || y >= cs.h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int x = ox + j - cs.pw;
            if (x >= 0 && x < cs.w) plane[y * cs.w + x] += row[oy * ow + ox];
          }
        }
      }
}

}  // namespace

template <typename S>
void conv2d_forward(const ConvShape& cs, int frames, const S* in, const S* weight, const S* bias,
                    S* out) {
  const int ohw = cs.out_h() * cs.out_w();
  CMatMap<S> W(weight, cs.cout, cs.patch());
  Mat<S> cols;
  for (int f = 0; f < frames; ++f) {
    im2col(cs, in + static_cast<std::size_t>(f) * cs.cin * cs.h * cs.w, cols);
    MatMap<S> Y(out + static_cast<std::size_t>(f) * cs.cout * ohw, cs.cout, ohw);
    Y.noalias() = W * cols;
    for (int co = 0; co < cs.cout; ++co) Y.row(co).array() += bias[co];
  }
}

template <typename S>
void conv2d_backward(const ConvShape& cs, int frames, const S* in, const S* weight, const S* dout,
                     S* dweight, S* dbias, S* din) {
  const int ohw = cs.out_h() * cs.out_w();
  const std::size_t in_frame = static_cast<std::size_t>(cs.cin) * cs.h * cs.w;
  CMatMap<S> W(weight, cs.cout, cs.patch());
  MatMap<S> dW(dweight, cs.cout, cs.patch());
  Mat<S> cols, dcols;
  for (int f = 0; f < frames; ++f) {
    CMatMap<S> dY(dout + static_cast<std::size_t>(f) * cs.cout * ohw, cs.cout, ohw);
    im2col(cs, in + f * in_frame, cols);
    dW.noalias() += dY * cols.transpose();
    // Plain loop: Eigen's vectorized sum over an unaligned map peels by the
    // runtime address, which makes the rounding depend on the allocation.
    for (int co = 0; co < cs.cout; ++co) {
      const S* row = dout + (static_cast<std::size_t>(f) * cs.cout + co) * ohw;
      S acc = 0;
      for (int i = 0; i < ohw; ++i) acc += row[i];
      dbias[co] += acc;
    }
    if (din) {
      dcols.noalias() = W.transpose() * dY;
      col2im_add(cs, dcols, din + f * in_frame);
    }
  }
}

template <typename S>
void relu_inplace(S* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = x[i] > S(0) ? x[i] : S(0);
}

template <typename S>
void relu_backward_inplace(const S* y, S* d, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (!(y[i] > S(0))) d[i] = S(0);
}

template <typename S>
void se_forward(int frames, int c, int hw, const S* fmap, const S* w1, const S* w2, int hidden,
                S* out, SeCache<S>& cache) {
  CMatMap<S> W1(w1, hidden, c);
  CMatMap<S> W2(w2, c, hidden);
  cache.squeeze.resize(frames, c);
  for (int f = 0; f < frames; ++f)
    for (int ch = 0; ch < c; ++ch) {
      const S* p = fmap + (static_cast<std::size_t>(f) * c + ch) * hw;
      S acc = 0;
      for (int i = 0; i < hw; ++i) acc += p[i];
      cache.squeeze(f, ch) = acc / S(hw);
    }
  cache.hidden.noalias() = cache.squeeze * W1.transpose();
  Mat<S> r = cache.hidden.cwiseMax(S(0));
  cache.scale.noalias() = r * W2.transpose();
  cache.scale = cache.scale.unaryExpr([](S a) { return S(1) / (S(1) + std::exp(-a)); });
  for (int f = 0; f < frames; ++f)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(f) * c + ch) * hw;
      const S g = cache.scale(f, ch);
      for (int i = 0; i < hw; ++i) out[off + i] = fmap[off + i] * g;
    }
}

template <typename S>
void se_backward(int frames, int c, int hw, const S* fmap, const S* w1, const S* w2, int hidden,
                 const SeCache<S>& cache, const S* dout, S* dw1, S* dw2, S* dfmap) {
  CMatMap<S> W1(w1, hidden, c);
  CMatMap<S> W2(w2, c, hidden);
  MatMap<S> dW1(dw1, hidden, c);
  MatMap<S> dW2(dw2, c, hidden);
  Mat<S> dscale(frames, c);
  for (int f = 0; f < frames; ++f)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(f) * c + ch) * hw;
      S acc = 0;
      for (int i = 0; i < hw; ++i) acc += dout[off + i] * fmap[off + i];
      dscale(f, ch) = acc;
    }
  Mat<S> dpre = dscale.cwiseProduct(
      cache.scale.unaryExpr([](S g) { return g * (S(1) - g); }));
  Mat<S> r = cache.hidden.cwiseMax(S(0));
  dW2.noalias() += dpre.transpose() * r;
  Mat<S> dr = dpre * W2;
  for (Eigen::Index i = 0; i < dr.size(); ++i)
    if (!(cache.hidden.data()[i] > S(0))) dr.data()[i] = S(0);
  dW1.noalias() += dr.transpose() * cache.squeeze;
  Mat<S> dsq = dr * W1;  // frames x c
  for (int f = 0; f < frames; ++f)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(f) * c + ch) * hw;
      const S g = cache.scale(f, ch);
      const S ds = dsq(f, ch) / S(hw);
      for (int i = 0; i < hw; ++i) dfmap[off + i] += dout[off + i] * g + ds;
    }
}

template <typename S>
void maxpool2_forward(int frames, int c, int h, int w, const S* in, S* out,
                      std::vector<int>& argmax) {
  const int oh = h / 2, ow = w / 2;
  argmax.resize(static_cast<std::size_t>(frames) * c * oh * ow);
  std::size_t o = 0;
  for (int fc = 0; fc < frames * c; ++fc) {
    const int base = fc * h * w;
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x, ++o) {
        int best = base + (2 * y) * w + 2 * x;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = base + (2 * y + dy) * w + 2 * x + dx;
            if (in[idx] > in[best]) best = idx;
          }
        argmax[o] = best;
        out[o] = in[best];
      }
  }
}

template <typename S>
void maxpool2_backward(std::size_t in_size, const std::vector<int>& argmax, const S* dout,
                       S* din) {
  std::fill(din, din + in_size, S(0));
  for (std::size_t o = 0; o < argmax.size(); ++o) din[argmax[o]] += dout[o];
}

template <typename S>
void layernorm_forward(const Mat<S>& x, const S* gamma, const S* beta, double eps, Mat<S>& y,
                       LayerNormCache<S>& cache) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  y.resize(rows, d);
  cache.mean.resize(rows);
  cache.rstd.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    const S rs = S(1) / std::sqrt(var + S(eps));
    cache.mean[r] = mu;
    cache.rstd[r] = rs;
    for (Eigen::Index j = 0; j < d; ++j) y(r, j) = (x(r, j) - mu) * rs * gamma[j] + beta[j];
  }
}

template <typename S>
Mat<S> layernorm_backward(const Mat<S>& x, const S* gamma, const LayerNormCache<S>& cache,
                          const Mat<S>& dy, S* dgamma, S* dbeta) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  Mat<S> dx(rows, d);
  std::vector<S> xhat(d), dxhat(d);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const S mu = cache.mean[r], rs = cache.rstd[r];
    S sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      xhat[j] = (x(r, j) - mu) * rs;
      dgamma[j] += dy(r, j) * xhat[j];
      dbeta[j] += dy(r, j);
      dxhat[j] = dy(r, j) * gamma[j];
      sum_dxhat += dxhat[j];
      sum_dxhat_xhat += dxhat[j] * xhat[j];
    }
    const S inv_d = S(1) / S(d);
    for (Eigen::Index j = 0; j < d; ++j)
      dx(r, j) = rs * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
  }
  return dx;
}

template <typename S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x / std::sqrt(S(2))));
}

template <typename S>
S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x / std::sqrt(S(2))));
  const S pdf = std::exp(S(-0.5) * x * x) / std::sqrt(S(2) * S(kPi));
  return cdf + x * pdf;
}

template <typename S>
std::vector<S> dropout_mask(std::uint64_t seed, std::size_t n, double p) {
  std::vector<S> mask(n, S(1));
  if (p <= 0.0) return mask;
  const S keep = S(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(splitmix64(seed + 0x9e3779b97f4a7c15ULL * (i + 1)) >> 11) *
                     0x1.0p-53;
    mask[i] = u < p ? S(0) : keep;
  }
  return mask;
}

template <typename S>
void softmax_inplace(S* v, int n) {
  S mx = -std::numeric_limits<S>::infinity();
  for (int i = 0; i < n; ++i) mx = std::max(mx, v[i]);
  S sum = 0;
  for (int i = 0; i < n; ++i) {
    v[i] = std::exp(v[i] - mx);
    sum += v[i];
  }
  for (int i = 0; i < n; ++i) v[i] /= sum;
}

template <typename S>
int argmax_first(const S* v, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

#define BEAMCAST_INSTANTIATE(S)                                                                   \
  template void conv2d_forward<S>(const ConvShape&, int, const S*, const S*, const S*, S*);       \
  template void conv2d_backward<S>(const ConvShape&, int, const S*, const S*, const S*, S*, S*,   \
                                   S*);                                                           \
  template void relu_inplace<S>(S*, std::size_t);                                                 \
  template void relu_backward_inplace<S>(const S*, S*, std::size_t);                              \
  template void se_forward<S>(int, int, int, const S*, const S*, const S*, int, S*,               \
                              SeCache<S>&);                                                       \
  template void se_backward<S>(int, int, int, const S*, const S*, const S*, int,                  \
                               const SeCache<S>&, const S*, S*, S*, S*);                          \
  template void maxpool2_forward<S>(int, int, int, int, const S*, S*, std::vector<int>&);         \
  template void maxpool2_backward<S>(std::size_t, const std::vector<int>&, const S*, S*);         \
  template void layernorm_forward<S>(const Mat<S>&, const S*, const S*, double, Mat<S>&,          \
                                     LayerNormCache<S>&);                                         \
  template Mat<S> layernorm_backward<S>(const Mat<S>&, const S*, const LayerNormCache<S>&,        \
                                        const Mat<S>&, S*, S*);                                   \
  template S gelu<S>(S);                                                                          \
  template S gelu_grad<S>(S);                                                                     \
  template std::vector<S> dropout_mask<S>(std::uint64_t, std::size_t, double);                    \
  template void softmax_inplace<S>(S*, int);                                                      \
  template int argmax_first<S>(const S*, int);

BEAMCAST_INSTANTIATE(float)
BEAMCAST_INSTANTIATE(double)

#undef BEAMCAST_INSTANTIATE

}  // namespace beamcast
