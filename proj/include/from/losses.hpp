#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "from/nn/layers.hpp"
#include "from/nn/tensor.hpp"

namespace from {

// Margin triplet (m1, m2, m3) plus logit scale s. m1 = 0 means the
// multiplicative margin is disabled (same as m1 = 1).
struct MarginSpec {
  double m1 = 0.0;
  double m2 = 0.0;
  double m3 = 0.0;
  double s = 30.0;

  static MarginSpec sphereface(double m1, double s = 30.0) {
    return {m1, 0.0, 0.0, s};
  }
  static MarginSpec arcface(double m2 = 0.5, double s = 30.0) {
    return {0.0, m2, 0.0, s};
  }
  static MarginSpec cosface(double m3 = 0.35, double s = 30.0) {
    return {0.0, 0.0, m3, s};
  }
  static MarginSpec preset(const std::string& name, double s) {
    if (name == "sphereface") return sphereface(4.0, s);
    if (name == "arcface") return arcface(0.5, s);
    if (name == "cosface") return cosface(0.35, s);
    throw std::invalid_argument("unknown loss preset '" + name + "'");
  }

  void validate() const {
    if (s <= 0) throw std::invalid_argument("margin scale s must be > 0");
    if (m1 != 0.0 && m1 < 1.0)
      throw std::invalid_argument("m1 must be 0 or >= 1");
  }
};

namespace detail {

// Stable softmax CE on one row of logits. Returns the loss; fills grad with
// softmax(z) - onehot(y) if grad != null. Uses log1p when the true class is
// the max so tiny losses keep full relative precision.
template <class T>
double softmax_ce_row(const T* z, int n, int y, T* grad) {
  double m = z[0];
  for (int j = 1; j < n; ++j) m = std::max(m, double(z[j]));
  double sum_others = 0.0;  // sum of exp(z_j - m) excluding y
  double sum_all = 0.0;
  for (int j = 0; j < n; ++j) {
    double e = std::exp(double(z[j]) - m);
    sum_all += e;
    if (j != y) sum_others += e;
  }
  double loss;
  if (double(z[y]) == m) {
    loss = std::log1p(sum_others);
  } else {
    loss = m + std::log(sum_all) - double(z[y]);
  }
  if (grad) {
    for (int j = 0; j < n; ++j) {
      double p = std::exp(double(z[j]) - m) / sum_all;
      grad[j] = static_cast<T>(j == y ? p - 1.0 : p);
    }
  }
  return loss;
}

}  // namespace detail

// Unified margin softmax over cosine logits (N x n). Optionally fills the
// gradient with respect to the cosine matrix.
template <class T>
double margin_loss(const nn::Tensor<T>& cos, const std::vector<int>& labels,
                   const MarginSpec& spec, nn::Tensor<T>* dcos = nullptr) {
  spec.validate();
  int N = cos.dim(0);
  int n = cos.dim(1);
  if (N == 0) throw std::invalid_argument("margin_loss: empty batch");
  if (static_cast<int>(labels.size()) != N)
    throw std::invalid_argument("margin_loss: labels/batch size mismatch");
  for (int y : labels)
    if (y < 0 || y >= n)
      throw std::invalid_argument("margin_loss: label out of range");

  double a = spec.m1 == 0.0 ? 1.0 : spec.m1;
  bool plain_target = (a == 1.0 && spec.m2 == 0.0);

  if (dcos) *dcos = nn::Tensor<T>(cos.shape);
  std::vector<T> z(n);
  std::vector<T> gz(n);
  double total = 0.0;
  for (int i = 0; i < N; ++i) {
    int y = labels[i];
    double cosy = cos.at2(i, y);
    double delta, ddelta_dcosy;
    if (plain_target) {
      delta = cosy - spec.m3;
      ddelta_dcosy = 1.0;
    } else {
      // clamp before acos; the derivative is singular at |cos| = 1
      double c = std::clamp(cosy, -1.0 + 1e-7, 1.0 - 1e-7);
      double theta = std::acos(c);
      delta = std::cos(a * theta + spec.m2) - spec.m3;
      ddelta_dcosy = a * std::sin(a * theta + spec.m2) / std::sqrt(1.0 - c * c);
    }
    for (int j = 0; j < n; ++j)
      z[j] = static_cast<T>(spec.s * double(cos.at2(i, j)));
    z[y] = static_cast<T>(spec.s * delta);
    total += detail::softmax_ce_row(z.data(), n, y, dcos ? gz.data() : nullptr);
    if (dcos) {
      for (int j = 0; j < n; ++j)
        dcos->at2(i, j) =
            static_cast<T>(double(gz[j]) * spec.s / N *
                           (j == y ? ddelta_dcosy : 1.0));
    }
  }
  return total / N;
}

// Mean softmax cross-entropy on pattern logits (N x P).
template <class T>
double pattern_ce_loss(const nn::Tensor<T>& logits,
                       const std::vector<int>& labels,
                       nn::Tensor<T>* dlogits = nullptr) {
  int N = logits.dim(0);
  int P = logits.dim(1);
  if (N == 0) throw std::invalid_argument("pattern_ce_loss: empty batch");
  if (static_cast<int>(labels.size()) != N)
    throw std::invalid_argument("pattern_ce_loss: labels/batch size mismatch");
  for (int y : labels)
    if (y < 0 || y >= P)
      throw std::invalid_argument("pattern_ce_loss: label out of range");
  if (dlogits) *dlogits = nn::Tensor<T>(logits.shape);
  double total = 0.0;
  for (int i = 0; i < N; ++i) {
    total += detail::softmax_ce_row(&logits.data[std::size_t(i) * P], P,
                                    labels[i],
                                    dlogits ? &dlogits->data[std::size_t(i) * P]
                                            : nullptr);
  }
  if (dlogits)
    for (auto& g : dlogits->data) g = static_cast<T>(double(g) / N);
  return total / N;
}

// Mean Euclidean distance between predicted and target box corners
// (normalized to [0,1] by the image dims).
template <class T>
double pattern_reg_loss(const nn::Tensor<T>& pred, const nn::Tensor<T>& target,
                        nn::Tensor<T>* dpred = nullptr) {
  if (pred.shape != target.shape || pred.dim(1) != 4)
    throw std::invalid_argument("pattern_reg_loss: shape mismatch");
  int N = pred.dim(0);
  if (N == 0) throw std::invalid_argument("pattern_reg_loss: empty batch");
  if (dpred) *dpred = nn::Tensor<T>(pred.shape);
  double total = 0.0;
  for (int i = 0; i < N; ++i) {
    double sq = 0.0;
    for (int j = 0; j < 4; ++j) {
      double d = double(pred.at2(i, j)) - double(target.at2(i, j));
      sq += d * d;
    }
    double norm = std::sqrt(sq);
    total += norm;
    if (dpred && norm > 0.0)
      for (int j = 0; j < 4; ++j)
        dpred->at2(i, j) = static_cast<T>(
            (double(pred.at2(i, j)) - double(target.at2(i, j))) / (norm * N));
  }
  return total / N;
}

inline double total_loss(double l_margin, double l_pred, double lambda) {
  if (lambda < 0) throw std::invalid_argument("lambda must be >= 0");
  return l_margin + lambda * l_pred;
}

// ---------------------------------------------------------------------------
// Cosine head: length-normalized embeddings against length-normalized class
// weights; cos(theta) matrix feeding margin_loss.
// ---------------------------------------------------------------------------

template <class T>
struct CosineHead {
  int dim = 0, classes = 0;
  nn::Tensor<T> weight, gweight;
  nn::Tensor<T> cached_emb, cached_ehat, cached_what;
  std::vector<double> cached_enorm, cached_wnorm;

  CosineHead() = default;
  CosineHead(int d, int n) : dim(d), classes(n) {
    weight = nn::Tensor<T>({n, d});
    gweight = nn::Tensor<T>({n, d});
  }

  void init(Rng& rng) {
    for (auto& v : weight.data)
      v = static_cast<T>(rng.normal(0.0, 0.01));
  }

  static double row_norm(const T* p, int d) {
    double s = 0;
    for (int i = 0; i < d; ++i) s += double(p[i]) * p[i];
    return std::sqrt(std::max(s, 1e-24));
  }

  nn::Tensor<T> forward(const nn::Tensor<T>& emb) {
    int N = emb.dim(0);
    cached_emb = emb;
    cached_ehat = nn::Tensor<T>({N, dim});
    cached_what = nn::Tensor<T>({classes, dim});
    cached_enorm.assign(N, 0);
    cached_wnorm.assign(classes, 0);
    for (int i = 0; i < N; ++i) {
      double r = row_norm(&emb.data[std::size_t(i) * dim], dim);
      cached_enorm[i] = r;
      for (int j = 0; j < dim; ++j)
        cached_ehat.at2(i, j) = static_cast<T>(double(emb.at2(i, j)) / r);
    }
    for (int c = 0; c < classes; ++c) {
      double r = row_norm(&weight.data[std::size_t(c) * dim], dim);
      cached_wnorm[c] = r;
      for (int j = 0; j < dim; ++j)
        cached_what.at2(c, j) = static_cast<T>(double(weight.at2(c, j)) / r);
    }
    nn::Tensor<T> cos({N, classes});
    nn::CMapMat<T> E(cached_ehat.data.data(), N, dim);
    nn::CMapMat<T> W(cached_what.data.data(), classes, dim);
    nn::MapMat<T> C(cos.data.data(), N, classes);
    C.noalias() = E * W.transpose();
    return cos;
  }

  // returns grad wrt raw embeddings; accumulates gweight
  nn::Tensor<T> backward(const nn::Tensor<T>& dcos) {
    int N = dcos.dim(0);
    nn::Tensor<T> dehat({N, dim}), dwhat({classes, dim});
    nn::CMapMat<T> dC(dcos.data.data(), N, classes);
    nn::CMapMat<T> E(cached_ehat.data.data(), N, dim);
    nn::CMapMat<T> W(cached_what.data.data(), classes, dim);
    nn::MapMat<T> dE(dehat.data.data(), N, dim);
    nn::MapMat<T> dW(dwhat.data.data(), classes, dim);
    dE.noalias() = dC * W;
    dW.noalias() = dC.transpose() * E;

    nn::Tensor<T> demb({N, dim});
    for (int i = 0; i < N; ++i) {
      double dot = 0;
      for (int j = 0; j < dim; ++j)
        dot += double(cached_ehat.at2(i, j)) * double(dehat.at2(i, j));
      for (int j = 0; j < dim; ++j)
        demb.at2(i, j) = static_cast<T>(
            (double(dehat.at2(i, j)) - double(cached_ehat.at2(i, j)) * dot) /
            cached_enorm[i]);
    }
    for (int c = 0; c < classes; ++c) {
      double dot = 0;
      for (int j = 0; j < dim; ++j)
        dot += double(cached_what.at2(c, j)) * double(dwhat.at2(c, j));
      for (int j = 0; j < dim; ++j)
        gweight.at2(c, j) += static_cast<T>(
            (double(dwhat.at2(c, j)) - double(cached_what.at2(c, j)) * dot) /
            cached_wnorm[c]);
    }
    return demb;
  }

  void collect(const std::string& prefix, std::vector<nn::ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &weight, &gweight, true});
  }
};

}  // namespace from
