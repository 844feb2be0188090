#pragma once

// Dense building blocks with explicit forward/backward passes. Activations
// are stored row-major; weights follow the [out, in] convention so that a
// linear layer is y = x * W^T.

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace beamcast {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<Mat<S>>;
template <typename S>
using CMatMap = Eigen::Map<const Mat<S>>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

/// Geometry of a stride-1 2-D convolution with symmetric zero padding.
/// Output spatial size equals input size when kh = 2*ph+1 and kw = 2*pw+1.
struct ConvShape {
  int cin = 1, cout = 1;
  int kh = 1, kw = 1;
  int ph = 0, pw = 0;
  int h = 1, w = 1;

  int out_h() const { return h + 2 * ph - kh + 1; }
  int out_w() const { return w + 2 * pw - kw + 1; }
  int patch() const { return cin * kh * kw; }
};

// in: frames x cin x h x w, out: frames x cout x oh x ow.
template <typename S>
void conv2d_forward(const ConvShape& cs, int frames, const S* in, const S* weight, const S* bias,
                    S* out);

// Accumulates into dweight/dbias; writes din when non-null.
template <typename S>
void conv2d_backward(const ConvShape& cs, int frames, const S* in, const S* weight, const S* dout,
                     S* dweight, S* dbias, S* din);

template <typename S>
void relu_inplace(S* x, std::size_t n);

// d *= (y > 0)
template <typename S>
void relu_backward_inplace(const S* y, S* d, std::size_t n);

template <typename S>
struct SeCache {
  Mat<S> squeeze;  // frames x c
  Mat<S> hidden;   // frames x c/r, pre-activation
  Mat<S> scale;    // frames x c, sigmoid gates
};

// fmap: frames x c x hw.
template <typename S>
void se_forward(int frames, int c, int hw, const S* fmap, const S* w1, const S* w2, int hidden,
                S* out, SeCache<S>& cache);

template <typename S>
void se_backward(int frames, int c, int hw, const S* fmap, const S* w1, const S* w2, int hidden,
                 const SeCache<S>& cache, const S* dout, S* dw1, S* dw2, S* dfmap);

// 2x2 / stride 2, floor. argmax holds the flat input index per output cell.
template <typename S>
void maxpool2_forward(int frames, int c, int h, int w, const S* in, S* out,
                      std::vector<int>& argmax);

template <typename S>
void maxpool2_backward(std::size_t in_size, const std::vector<int>& argmax, const S* dout, S* din);

template <typename S>
struct LayerNormCache {
  std::vector<S> mean;
  std::vector<S> rstd;
};

template <typename S>
void layernorm_forward(const Mat<S>& x, const S* gamma, const S* beta, double eps, Mat<S>& y,
                       LayerNormCache<S>& cache);

// Accumulates dgamma/dbeta and returns dx.
template <typename S>
Mat<S> layernorm_backward(const Mat<S>& x, const S* gamma, const LayerNormCache<S>& cache,
                          const Mat<S>& dy, S* dgamma, S* dbeta);

/// Exact GELU: x * Phi(x).
template <typename S>
S gelu(S x);

template <typename S>
S gelu_grad(S x);

/// Inverted-dropout multipliers (0 or 1/(1-p)) from a counter-based stream.
template <typename S>
std::vector<S> dropout_mask(std::uint64_t seed, std::size_t n, double p);

/// Row-wise softmax of a single row in place.
template <typename S>
void softmax_inplace(S* v, int n);

/// Index of the largest entry; ties go to the smallest index.
template <typename S>
int argmax_first(const S* v, int n);

}  // namespace beamcast
