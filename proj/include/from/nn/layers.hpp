#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "from/nn/tensor.hpp"
#include "from/rng.hpp"

namespace from::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// ---------------------------------------------------------------------------
// Conv2d, 3x3 or 1x1, via im2col + GEMM
// ---------------------------------------------------------------------------

template <class T>
struct Conv2d {
  int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1;
  Tensor<T> weight, bias, gweight, gbias;
  Tensor<T> cached_in;

  Conv2d() = default;
  Conv2d(int in, int out, int kernel, int stride_, int pad_)
      : in_ch(in), out_ch(out), k(kernel), stride(stride_), pad(pad_) {
    weight = Tensor<T>({out_ch, in_ch * k * k});
    bias = Tensor<T>({out_ch});
    gweight = Tensor<T>(weight.shape);
    gbias = Tensor<T>(bias.shape);
  }

  void init(Rng& rng) {
    double std = std::sqrt(2.0 / (in_ch * k * k));
    for (auto& v : weight.data) v = static_cast<T>(rng.normal(0.0, std));
    bias.zero();
  }

  int out_dim(int in) const { return (in + 2 * pad - k) / stride + 1; }

  void im2col(const Tensor<T>& x, int n, Tensor<T>& cols) const {
    int H = x.dim(2), W = x.dim(3);
    int OH = out_dim(H), OW = out_dim(W);
    T* dst = cols.data.data();
    for (int c = 0; c < in_ch; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx)
          for (int oh = 0; oh < OH; ++oh) {
            int ih = oh * stride - pad + ky;
            for (int ow = 0; ow < OW; ++ow) {
              int iw = ow * stride - pad + kx;
              *dst++ = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                           ? x.at4(n, c, ih, iw)
                           : T(0);
            }
          }
  }

  Tensor<T> forward(const Tensor<T>& x, bool /*train*/ = true) {
    cached_in = x;
    int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    int OH = out_dim(H), OW = out_dim(W);
    Tensor<T> y({N, out_ch, OH, OW});
    Tensor<T> cols({in_ch * k * k, OH * OW});
    CMapMat<T> Wm(weight.data.data(), out_ch, in_ch * k * k);
    for (int n = 0; n < N; ++n) {
      im2col(x, n, cols);
      CMapMat<T> C(cols.data.data(), in_ch * k * k, OH * OW);
      MapMat<T> Y(&y.at4(n, 0, 0, 0), out_ch, OH * OW);
      Y.noalias() = Wm * C;
      for (int c = 0; c < out_ch; ++c) Y.row(c).array() += bias[c];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const Tensor<T>& x = cached_in;
    int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    int OH = out_dim(H), OW = out_dim(W);
    Tensor<T> gx(x.shape);
    Tensor<T> cols({in_ch * k * k, OH * OW});
    Tensor<T> gcols({in_ch * k * k, OH * OW});
    CMapMat<T> Wm(weight.data.data(), out_ch, in_ch * k * k);
    MapMat<T> gW(gweight.data.data(), out_ch, in_ch * k * k);
    for (int n = 0; n < N; ++n) {
      im2col(x, n, cols);
      CMapMat<T> C(cols.data.data(), in_ch * k * k, OH * OW);
      CMapMat<T> gY(&gy.at4(n, 0, 0, 0), out_ch, OH * OW);
      gW.noalias() += gY * C.transpose();
      for (int c = 0; c < out_ch; ++c) gbias[c] += gY.row(c).sum();
      MapMat<T> gC(gcols.data.data(), in_ch * k * k, OH * OW);
      gC.noalias() = Wm.transpose() * gY;
      // col2im
      const T* src = gcols.data.data();
      for (int c = 0; c < in_ch; ++c)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            for (int oh = 0; oh < OH; ++oh) {
              int ih = oh * stride - pad + ky;
              for (int ow = 0; ow < OW; ++ow, ++src) {
                int iw = ow * stride - pad + kx;
                if (ih >= 0 && ih < H && iw >= 0 && iw < W)
                  gx.at4(n, c, ih, iw) += *src;
              }
            }
    }
    return gx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &weight, &gweight, true});
    out.push_back({prefix + ".bias", &bias, &gbias, true});
  }
};

// ---------------------------------------------------------------------------
// BatchNorm over channel dim; accepts [N,C,H,W] or [N,C]
// ---------------------------------------------------------------------------

template <class T>
struct BatchNorm {
  int channels = 0;
  T momentum = T(0.1), eps = T(1e-5);
  Tensor<T> gamma, beta, ggamma, gbeta;
  Tensor<T> running_mean, running_var;
  Tensor<T> cached_xhat, cached_invstd;
  bool cached_train = true;
  std::vector<int> cached_shape;

  BatchNorm() = default;
  explicit BatchNorm(int c) : channels(c) {
    gamma = Tensor<T>({c});
    gamma.fill(T(1));
    beta = Tensor<T>({c});
    ggamma = Tensor<T>({c});
    gbeta = Tensor<T>({c});
    running_mean = Tensor<T>({c});
    running_var = Tensor<T>({c});
    running_var.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    cached_train = train;
    cached_shape = x.shape;
    int N = x.dim(0);
    std::size_t S = x.size() / (static_cast<std::size_t>(N) * channels);
    std::size_t M = static_cast<std::size_t>(N) * S;
    Tensor<T> y(x.shape);
    cached_xhat = Tensor<T>(x.shape);
    cached_invstd = Tensor<T>({channels});
    for (int c = 0; c < channels; ++c) {
      double mean, var;
      if (train) {
        double sum = 0, sq = 0;
        for (int n = 0; n < N; ++n) {
          const T* p = &x.data[(static_cast<std::size_t>(n) * channels + c) * S];
          for (std::size_t i = 0; i < S; ++i) {
            sum += p[i];
            sq += double(p[i]) * p[i];
          }
        }
        mean = sum / M;
        var = sq / M - mean * mean;
        if (var < 0) var = 0;
        double unbiased = M > 1 ? var * M / double(M - 1) : var;
        running_mean[c] = static_cast<T>((1 - momentum) * running_mean[c] +
                                         momentum * mean);
        running_var[c] = static_cast<T>((1 - momentum) * running_var[c] +
                                        momentum * unbiased);
      } else {
        mean = running_mean[c];
        var = running_var[c];
      }
      T invstd = static_cast<T>(1.0 / std::sqrt(var + double(eps)));
      cached_invstd[c] = invstd;
      for (int n = 0; n < N; ++n) {
        std::size_t base = (static_cast<std::size_t>(n) * channels + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          T xhat = (x.data[base + i] - static_cast<T>(mean)) * invstd;
          cached_xhat.data[base + i] = xhat;
          y.data[base + i] = gamma[c] * xhat + beta[c];
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    int N = cached_shape[0];
    std::size_t S = gy.size() / (static_cast<std::size_t>(N) * channels);
    std::size_t M = static_cast<std::size_t>(N) * S;
    Tensor<T> gx(gy.shape);
    for (int c = 0; c < channels; ++c) {
      double sum_gy = 0, sum_gy_xhat = 0;
      for (int n = 0; n < N; ++n) {
        std::size_t base = (static_cast<std::size_t>(n) * channels + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          sum_gy += gy.data[base + i];
          sum_gy_xhat += double(gy.data[base + i]) * cached_xhat.data[base + i];
        }
      }
      ggamma[c] += static_cast<T>(sum_gy_xhat);
      gbeta[c] += static_cast<T>(sum_gy);
      T g = gamma[c], invstd = cached_invstd[c];
      if (cached_train) {
        for (int n = 0; n < N; ++n) {
          std::size_t base = (static_cast<std::size_t>(n) * channels + c) * S;
          for (std::size_t i = 0; i < S; ++i) {
            double t = double(M) * gy.data[base + i] - sum_gy -
                       double(cached_xhat.data[base + i]) * sum_gy_xhat;
            gx.data[base + i] = static_cast<T>(double(g) * invstd / M * t);
          }
        }
      } else {
        for (int n = 0; n < N; ++n) {
          std::size_t base = (static_cast<std::size_t>(n) * channels + c) * S;
          for (std::size_t i = 0; i < S; ++i)
            gx.data[base + i] = gy.data[base + i] * g * invstd;
        }
      }
    }
    return gx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".gamma", &gamma, &ggamma, true});
    out.push_back({prefix + ".beta", &beta, &gbeta, true});
    out.push_back({prefix + ".running_mean", &running_mean, nullptr, false});
    out.push_back({prefix + ".running_var", &running_var, nullptr, false});
  }
};

// ---------------------------------------------------------------------------
// PReLU with one slope per channel
// ---------------------------------------------------------------------------

template <class T>
struct PReLU {
  int channels = 0;
  Tensor<T> alpha, galpha;
  Tensor<T> cached_in;

  PReLU() = default;
  explicit PReLU(int c) : channels(c) {
    alpha = Tensor<T>({c});
    alpha.fill(T(0.25));
    galpha = Tensor<T>({c});
  }

  Tensor<T> forward(const Tensor<T>& x, bool /*train*/ = true) {
    cached_in = x;
    int N = x.dim(0);
    std::size_t S = x.size() / (static_cast<std::size_t>(N) * channels);
    Tensor<T> y(x.shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < channels; ++c) {
        std::size_t base = (static_cast<std::size_t>(n) * channels + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          T v = x.data[base + i];
          y.data[base + i] = v > 0 ? v : alpha[c] * v;
        }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const Tensor<T>& x = cached_in;
    int N = x.dim(0);
    std::size_t S = x.size() / (static_cast<std::size_t>(N) * channels);
    Tensor<T> gx(x.shape);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < channels; ++c) {
        std::size_t base = (static_cast<std::size_t>(n) * channels + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          T v = x.data[base + i];
          if (v > 0) {
            gx.data[base + i] = gy.data[base + i];
          } else {
            gx.data[base + i] = gy.data[base + i] * alpha[c];
            galpha[c] += gy.data[base + i] * v;
          }
        }
      }
    return gx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".alpha", &alpha, &galpha, true});
  }
};

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

template <class T>
struct Linear {
  int in_dim = 0, out_dim = 0;
  Tensor<T> weight, bias, gweight, gbias;
  Tensor<T> cached_in;

  Linear() = default;
  Linear(int in, int out) : in_dim(in), out_dim(out) {
    weight = Tensor<T>({out, in});
    bias = Tensor<T>({out});
    gweight = Tensor<T>(weight.shape);
    gbias = Tensor<T>(bias.shape);
  }

  void init(Rng& rng) {
    double std = std::sqrt(2.0 / in_dim);
    for (auto& v : weight.data) v = static_cast<T>(rng.normal(0.0, std));
    bias.zero();
  }

  Tensor<T> forward(const Tensor<T>& x, bool /*train*/ = true) {
    cached_in = x;
    int N = x.dim(0);
    Tensor<T> y({N, out_dim});
    CMapMat<T> X(x.data.data(), N, in_dim);
    CMapMat<T> W(weight.data.data(), out_dim, in_dim);
    MapMat<T> Y(y.data.data(), N, out_dim);
    Y.noalias() = X * W.transpose();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < out_dim; ++c) y.at2(n, c) += bias[c];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    const Tensor<T>& x = cached_in;
    int N = x.dim(0);
    Tensor<T> gx(x.shape);
    CMapMat<T> X(x.data.data(), N, in_dim);
    CMapMat<T> W(weight.data.data(), out_dim, in_dim);
    CMapMat<T> gY(gy.data.data(), N, out_dim);
    MapMat<T> gW(gweight.data.data(), out_dim, in_dim);
    MapMat<T> gX(gx.data.data(), N, in_dim);
    gW.noalias() += gY.transpose() * X;
    gX.noalias() = gY * W;
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < out_dim; ++c) gbias[c] += gy.at2(n, c);
    return gx;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &weight, &gweight, true});
    out.push_back({prefix + ".bias", &bias, &gbias, true});
  }
};

// ---------------------------------------------------------------------------
// Dropout (inverted scaling)
// ---------------------------------------------------------------------------

template <class T>
struct Dropout {
  double p = 0.0;
  Tensor<T> cached_mask;
  bool active = false;

  Dropout() = default;
  explicit Dropout(double prob) : p(prob) {}

  Tensor<T> forward(const Tensor<T>& x, bool train, Rng* rng) {
    active = train && p > 0.0;
    if (!active) return x;
    cached_mask = Tensor<T>(x.shape);
    T scale = static_cast<T>(1.0 / (1.0 - p));
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
      T m = rng->uniform() < p ? T(0) : scale;
      cached_mask[i] = m;
      y[i] = x[i] * m;
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    if (!active) return gy;
    Tensor<T> gx(gy.shape);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = gy[i] * cached_mask[i];
    return gx;
  }
};

// ---------------------------------------------------------------------------
// Sigmoid clamped away from {0,1} so masks stay strictly inside the open
// interval in every float width
// ---------------------------------------------------------------------------

template <class T>
struct Sigmoid {
  Tensor<T> cached_out;
  static constexpr double kEps = 1e-6;

  Tensor<T> forward(const Tensor<T>& x, bool /*train*/ = true) {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
      double v = 1.0 / (1.0 + std::exp(-double(x[i])));
      if (v < kEps) v = kEps;
      if (v > 1.0 - kEps) v = 1.0 - kEps;
      y[i] = static_cast<T>(v);
    }
    cached_out = y;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx(gy.shape);
    for (std::size_t i = 0; i < gy.size(); ++i) {
      T s = cached_out[i];
      gx[i] = gy[i] * s * (T(1) - s);
    }
    return gx;
  }
};

// ---------------------------------------------------------------------------
// Nearest-neighbour x2 upsample, cropped to an exact target size (handles
// image dims that are not divisible by 16)
// ---------------------------------------------------------------------------

template <class T>
struct UpsampleNearest2x {
  std::vector<int> cached_in_shape;

  Tensor<T> forward(const Tensor<T>& x, int target_h, int target_w) {
    cached_in_shape = x.shape;
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (target_h > 2 * H || target_w > 2 * W)
      throw std::invalid_argument("upsample target exceeds 2x input");
    Tensor<T> y({N, C, target_h, target_w});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < target_h; ++h)
          for (int w = 0; w < target_w; ++w)
            y.at4(n, c, h, w) = x.at4(n, c, h / 2, w / 2);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx(cached_in_shape);
    int N = gy.dim(0), C = gy.dim(1), H = gy.dim(2), W = gy.dim(3);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
          for (int w = 0; w < W; ++w)
            gx.at4(n, c, h / 2, w / 2) += gy.at4(n, c, h, w);
    return gx;
  }
};

// ---------------------------------------------------------------------------
// Global average pool [N,C,H,W] -> [N,C]
// ---------------------------------------------------------------------------

template <class T>
struct GlobalAvgPool {
  std::vector<int> cached_in_shape;

  Tensor<T> forward(const Tensor<T>& x) {
    cached_in_shape = x.shape;
    int N = x.dim(0), C = x.dim(1);
    std::size_t S = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor<T> y({N, C});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        double sum = 0;
        const T* p = &x.at4(n, c, 0, 0);
        for (std::size_t i = 0; i < S; ++i) sum += p[i];
        y.at2(n, c) = static_cast<T>(sum / S);
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& gy) {
    Tensor<T> gx(cached_in_shape);
    int N = gx.dim(0), C = gx.dim(1);
    std::size_t S = static_cast<std::size_t>(gx.dim(2)) * gx.dim(3);
    T inv = static_cast<T>(1.0 / double(S));
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        T g = gy.at2(n, c) * inv;
        T* p = &gx.at4(n, c, 0, 0);
        for (std::size_t i = 0; i < S; ++i) p[i] = g;
      }
    return gx;
  }
};

}  // namespace from::nn
