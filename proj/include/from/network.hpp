#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "from/nn/layers.hpp"
#include "from/nn/tensor.hpp"
#include "from/patterns.hpp"
#include "from/rng.hpp"

namespace from {

enum class MaskMode { conv3d, conv2d, fc };
enum class PatternHead { classify, regress };

inline std::string to_string(MaskMode m) {
  switch (m) {
    case MaskMode::conv3d: return "conv3d";
    case MaskMode::conv2d: return "conv2d";
    case MaskMode::fc: return "fc";
  }
  return "";
}
inline MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "conv3d") return MaskMode::conv3d;
  if (s == "conv2d") return MaskMode::conv2d;
  if (s == "fc") return MaskMode::fc;
  throw std::invalid_argument("unknown mask mode '" + s + "'");
}
inline std::string to_string(PatternHead h) {
  return h == PatternHead::classify ? "classify" : "regress";
}
inline PatternHead pattern_head_from_string(const std::string& s) {
  if (s == "classify") return PatternHead::classify;
  if (s == "regress") return PatternHead::regress;
  throw std::invalid_argument("unknown pattern head '" + s + "'");
}

struct NetworkConfig {
  int image_h = 112;
  int image_w = 96;
  int stem_ch = 16;
  int c3_ch = 32;   // stride 4 tap
  int c2_ch = 64;   // stride 8 tap
  int x1_ch = 128;  // stride 16 tap, the feature that gets cleaned
  int pyramid_ch = 64;
  int embed_dim = 128;
  MaskMode mask_mode = MaskMode::conv3d;
  PatternHead pattern_head = PatternHead::classify;
  double dropout = 0.4;
  int k = 5;

  int pattern_classes() const {
    int t = k * (k + 1) / 2;
    return t * t + 1;
  }
  int pattern_out_dim() const {
    return pattern_head == PatternHead::classify ? pattern_classes() : 4;
  }
};

namespace nn_detail {

inline int half(int n) { return (n + 1) / 2; }  // conv k3 s2 p1 output size

template <class T>
nn::Tensor<T> add(const nn::Tensor<T>& a, const nn::Tensor<T>& b) {
  nn::Tensor<T> out = a;
  out += b;
  return out;
}

}  // namespace nn_detail

// conv(k3,s2) + BN + PReLU downsampling block
template <class T>
struct DownBlock {
  nn::Conv2d<T> conv;
  nn::BatchNorm<T> bn;
  nn::PReLU<T> act;

  DownBlock() = default;
  DownBlock(int in, int out)
      : conv(in, out, 3, 2, 1), bn(out), act(out) {}

  void init(Rng& rng) { conv.init(rng); }

  nn::Tensor<T> forward(const nn::Tensor<T>& x, bool train) {
    return act.forward(bn.forward(conv.forward(x, train), train), train);
  }
  nn::Tensor<T> backward(const nn::Tensor<T>& gy) {
    return conv.backward(bn.backward(act.backward(gy)));
  }
  void collect(const std::string& p, std::vector<nn::ParamRef<T>>& out) {
    conv.collect(p + ".conv", out);
    bn.collect(p + ".bn", out);
    act.collect(p + ".act", out);
  }
};

// pre-activation-free basic residual unit
template <class T>
struct ResUnit {
  nn::Conv2d<T> conv1, conv2;
  nn::BatchNorm<T> bn1, bn2;
  nn::PReLU<T> act1, act_out;
  nn::Tensor<T> cached_in;

  ResUnit() = default;
  explicit ResUnit(int ch)
      : conv1(ch, ch, 3, 1, 1),
        conv2(ch, ch, 3, 1, 1),
        bn1(ch),
        bn2(ch),
        act1(ch),
        act_out(ch) {}

  void init(Rng& rng) {
    conv1.init(rng);
    conv2.init(rng);
  }

  nn::Tensor<T> forward(const nn::Tensor<T>& x, bool train) {
    cached_in = x;
    auto y = act1.forward(bn1.forward(conv1.forward(x, train), train), train);
    y = bn2.forward(conv2.forward(y, train), train);
    y += x;
    return act_out.forward(y, train);
  }
  nn::Tensor<T> backward(const nn::Tensor<T>& gy) {
    auto g = act_out.backward(gy);
    auto gmain = conv1.backward(
        bn1.backward(act1.backward(conv2.backward(bn2.backward(g)))));
    gmain += g;  // skip path
    return gmain;
  }
  void collect(const std::string& p, std::vector<nn::ParamRef<T>>& out) {
    conv1.collect(p + ".conv1", out);
    bn1.collect(p + ".bn1", out);
    act1.collect(p + ".act1", out);
    conv2.collect(p + ".conv2", out);
    bn2.collect(p + ".bn2", out);
    act_out.collect(p + ".act_out", out);
  }
};

// Three stride-2 stages over a stride-2 stem: taps at stride 4 (C3),
// 8 (C2) and 16 (X1).
template <class T>
struct Backbone {
  NetworkConfig cfg;
  DownBlock<T> stem, down1, down2, down3;
  ResUnit<T> res1, res2, res3;

  Backbone() = default;
  explicit Backbone(const NetworkConfig& c)
      : cfg(c),
        stem(1, c.stem_ch),
        down1(c.stem_ch, c.c3_ch),
        down2(c.c3_ch, c.c2_ch),
        down3(c.c2_ch, c.x1_ch),
        res1(c.c3_ch),
        res2(c.c2_ch),
        res3(c.x1_ch) {}

  void init(Rng& rng) {
    stem.init(rng);
    down1.init(rng);
    down2.init(rng);
    down3.init(rng);
    res1.init(rng);
    res2.init(rng);
    res3.init(rng);
  }

  struct Taps {
    nn::Tensor<T> x1, c2, c3;
  };

  Taps forward(const nn::Tensor<T>& images, bool train) {
    if (images.shape.size() != 4 || images.dim(1) != 1 ||
        images.dim(2) != cfg.image_h || images.dim(3) != cfg.image_w)
      throw std::invalid_argument("backbone: wrong input shape");
    Taps t;
    auto s = stem.forward(images, train);
    t.c3 = res1.forward(down1.forward(s, train), train);
    t.c2 = res2.forward(down2.forward(t.c3, train), train);
    t.x1 = res3.forward(down3.forward(t.c2, train), train);
    return t;
  }

  // gradients arrive at all three taps
  void backward(const nn::Tensor<T>& gx1, const nn::Tensor<T>& gc2,
                const nn::Tensor<T>& gc3) {
    auto g2 = down3.backward(res3.backward(gx1));
    g2 += gc2;
    auto g3 = down2.backward(res2.backward(g2));
    g3 += gc3;
    stem.backward(down1.backward(res1.backward(g3)));
  }

  void collect(std::vector<nn::ParamRef<T>>& out) {
    stem.collect("backbone.stem", out);
    down1.collect("backbone.down1", out);
    res1.collect("backbone.res1", out);
    down2.collect("backbone.down2", out);
    res2.collect("backbone.res2", out);
    down3.collect("backbone.down3", out);
    res3.collect("backbone.res3", out);
  }
};

// Top-down fusion: X2 = conv(up(conv(X1)) + conv(C2)),
//                  X3 = conv(up(conv(X2)) + conv(C3)).
template <class T>
struct PyramidFuse {
  nn::Conv2d<T> lat_x1, lat_c2, lat_x2, lat_c3, fuse2, fuse3;
  nn::UpsampleNearest2x<T> up1, up2;

  PyramidFuse() = default;
  explicit PyramidFuse(const NetworkConfig& c)
      : lat_x1(c.x1_ch, c.pyramid_ch, 1, 1, 0),
        lat_c2(c.c2_ch, c.pyramid_ch, 1, 1, 0),
        lat_x2(c.pyramid_ch, c.pyramid_ch, 1, 1, 0),
        lat_c3(c.c3_ch, c.pyramid_ch, 1, 1, 0),
        fuse2(c.pyramid_ch, c.pyramid_ch, 3, 1, 1),
        fuse3(c.pyramid_ch, c.pyramid_ch, 3, 1, 1) {}

  void init(Rng& rng) {
    lat_x1.init(rng);
    lat_c2.init(rng);
    lat_x2.init(rng);
    lat_c3.init(rng);
    fuse2.init(rng);
    fuse3.init(rng);
  }

  struct Out {
    nn::Tensor<T> x2, x3;
  };

  Out forward(const nn::Tensor<T>& x1, const nn::Tensor<T>& c2,
              const nn::Tensor<T>& c3, bool train) {
    Out o;
    auto t = up1.forward(lat_x1.forward(x1, train), c2.dim(2), c2.dim(3));
    t += lat_c2.forward(c2, train);
    o.x2 = fuse2.forward(t, train);
    auto t2 = up2.forward(lat_x2.forward(o.x2, train), c3.dim(2), c3.dim(3));
    t2 += lat_c3.forward(c3, train);
    o.x3 = fuse3.forward(t2, train);
    return o;
  }

  struct Grads {
    nn::Tensor<T> gx1, gc2, gc3;
  };

  Grads backward(const nn::Tensor<T>& gx3) {
    Grads g;
    auto gt2 = fuse3.backward(gx3);
    g.gc3 = lat_c3.backward(gt2);
    auto gx2 = lat_x2.backward(up2.backward(gt2));
    auto gt = fuse2.backward(gx2);
    g.gc2 = lat_c2.backward(gt);
    g.gx1 = lat_x1.backward(up1.backward(gt));
    return g;
  }

  void collect(std::vector<nn::ParamRef<T>>& out) {
    lat_x1.collect("fpn.lat_x1", out);
    lat_c2.collect("fpn.lat_c2", out);
    lat_x2.collect("fpn.lat_x2", out);
    lat_c3.collect("fpn.lat_c3", out);
    fuse2.collect("fpn.fuse2", out);
    fuse3.collect("fpn.fuse3", out);
  }
};

// Conv-PReLU-BN-Conv-Sigmoid, both convs stride 2, landing on X1's shape.
// In fc mode the tail is global-pool + FC + sigmoid and the mask is a
// d-vector for the embedding.
template <class T>
struct MaskDecoder {
  NetworkConfig cfg;
  nn::Conv2d<T> conv1, conv2;
  nn::PReLU<T> act;
  nn::BatchNorm<T> bn;
  nn::GlobalAvgPool<T> pool;
  nn::Linear<T> fc;
  nn::Sigmoid<T> sigmoid;

  MaskDecoder() = default;
  explicit MaskDecoder(const NetworkConfig& c) : cfg(c) {
    conv1 = nn::Conv2d<T>(c.pyramid_ch, c.pyramid_ch, 3, 2, 1);
    act = nn::PReLU<T>(c.pyramid_ch);
    bn = nn::BatchNorm<T>(c.pyramid_ch);
    if (c.mask_mode == MaskMode::fc) {
      fc = nn::Linear<T>(c.pyramid_ch, c.embed_dim);
    } else {
      int out_ch = c.mask_mode == MaskMode::conv3d ? c.x1_ch : 1;
      conv2 = nn::Conv2d<T>(c.pyramid_ch, out_ch, 3, 2, 1);
    }
  }

  void init(Rng& rng) {
    conv1.init(rng);
    if (cfg.mask_mode == MaskMode::fc)
      fc.init(rng);
    else
      conv2.init(rng);
  }

  nn::Tensor<T> forward(const nn::Tensor<T>& x3, bool train) {
    auto h = bn.forward(act.forward(conv1.forward(x3, train), train), train);
    if (cfg.mask_mode == MaskMode::fc)
      return sigmoid.forward(fc.forward(pool.forward(h), train), train);
    return sigmoid.forward(conv2.forward(h, train), train);
  }

  nn::Tensor<T> backward(const nn::Tensor<T>& gmask) {
    auto g = sigmoid.backward(gmask);
    if (cfg.mask_mode == MaskMode::fc)
      g = pool.backward(fc.backward(g));
    else
      g = conv2.backward(g);
    return conv1.backward(act.backward(bn.backward(g)));
  }

  void collect(std::vector<nn::ParamRef<T>>& out) {
    conv1.collect("decoder.conv1", out);
    act.collect("decoder.act", out);
    bn.collect("decoder.bn", out);
    if (cfg.mask_mode == MaskMode::fc)
      fc.collect("decoder.fc", out);
    else
      conv2.collect("decoder.conv2", out);
  }
};

// flatten -> BN -> Dropout -> FC -> BN
template <class T>
struct FcHead {
  int in_dim = 0, out_dim = 0;
  double dropout_p = 0.0;
  nn::BatchNorm<T> bn_in, bn_out;
  nn::Dropout<T> drop;
  nn::Linear<T> fc;

  FcHead() = default;
  FcHead(int in, int out, double p)
      : in_dim(in), out_dim(out), dropout_p(p), bn_in(in), bn_out(out),
        drop(p), fc(in, out) {}

  void init(Rng& rng) { fc.init(rng); }

  nn::Tensor<T> forward(const nn::Tensor<T>& flat, bool train, Rng* rng) {
    auto h = bn_in.forward(flat, train);
    h = drop.forward(h, train, rng);
    h = fc.forward(h, train);
    return bn_out.forward(h, train);
  }
  nn::Tensor<T> backward(const nn::Tensor<T>& gy) {
    return bn_in.backward(drop.backward(fc.backward(bn_out.backward(gy))));
  }
  void collect(const std::string& p, std::vector<nn::ParamRef<T>>& out) {
    bn_in.collect(p + ".bn_in", out);
    fc.collect(p + ".fc", out);
    bn_out.collect(p + ".bn_out", out);
  }
};

template <class T>
struct ForwardOutput {
  nn::Tensor<T> embedding;  // [N, d]
  nn::Tensor<T> pattern;    // [N, P] logits or [N, 4] box
  nn::Tensor<T> mask;       // decoder output
};

// Inference-time mask binarization (ablation path only).
template <class T>
nn::Tensor<T> binarize_mask(const nn::Tensor<T>& mask, double t) {
  if (t <= 0.0 || t >= 1.0)
    throw std::invalid_argument("binarize threshold must be in (0,1)");
  nn::Tensor<T> out(mask.shape);
  for (std::size_t i = 0; i < mask.size(); ++i)
    out[i] = double(mask[i]) >= t ? T(1) : T(0);
  return out;
}

template <class T>
class FromNet {
 public:
  NetworkConfig cfg;
  Backbone<T> backbone;
  PyramidFuse<T> fpn;
  MaskDecoder<T> decoder;
  FcHead<T> embed_head;
  FcHead<T> opp_head;
  bool has_decoder = true;  // Baseline-Aug trains the graph without MD/OPP

  FromNet() = default;
  explicit FromNet(const NetworkConfig& c, bool with_decoder = true)
      : cfg(c), backbone(c), fpn(c), decoder(c), has_decoder(with_decoder) {
    auto [h1, w1] = x1_spatial();
    x1_flat_ = c.x1_ch * h1 * w1;
    embed_head = FcHead<T>(x1_flat_, c.embed_dim, c.dropout);
    int mask_flat = mask_flat_dim();
    opp_head = FcHead<T>(mask_flat, c.pattern_out_dim(), c.dropout);
  }

  std::pair<int, int> x1_spatial() const {
    using nn_detail::half;
    return {half(half(half(half(cfg.image_h)))),
            half(half(half(half(cfg.image_w))))};
  }
  std::pair<int, int> x2_spatial() const {
    using nn_detail::half;
    return {half(half(half(cfg.image_h))), half(half(half(cfg.image_w)))};
  }
  std::pair<int, int> x3_spatial() const {
    using nn_detail::half;
    return {half(half(cfg.image_h)), half(half(cfg.image_w))};
  }

  int mask_flat_dim() const {
    if (cfg.mask_mode == MaskMode::fc) return cfg.embed_dim;
    auto [h1, w1] = x1_spatial();
    int ch = cfg.mask_mode == MaskMode::conv3d ? cfg.x1_ch : 1;
    return ch * h1 * w1;
  }

  void init(Rng& rng) {
    backbone.init(rng);
    if (has_decoder) {
      fpn.init(rng);
      decoder.init(rng);
      opp_head.init(rng);
    }
    embed_head.init(rng);
  }

  // Single pass: embedding, pattern output and mask together.
  // mask_override forces the mask (identity-mask probes, binarization);
  // it must match the decoder's output shape.
  ForwardOutput<T> forward(const nn::Tensor<T>& images, bool train,
                           Rng* rng = nullptr,
                           const nn::Tensor<T>* mask_override = nullptr) {
    if ((train && cfg.dropout > 0) && rng == nullptr)
      throw std::invalid_argument("training forward needs an RNG for dropout");
    ForwardOutput<T> out;
    auto taps = backbone.forward(images, train);
    x1_ = taps.x1;
    int N = images.dim(0);

    if (has_decoder) {
      auto pyr = fpn.forward(taps.x1, taps.c2, taps.c3, train);
      out.mask = decoder.forward(pyr.x3, train);
      if (mask_override) {
        if (mask_override->shape != out.mask.shape)
          throw std::invalid_argument("mask override shape mismatch");
        out.mask = *mask_override;
      }
    }
    mask_ = out.mask;

    if (cfg.mask_mode == MaskMode::fc || !has_decoder) {
      auto flat = x1_.reshaped({N, x1_flat_});
      raw_emb_ = embed_head.forward(flat, train, rng);
      if (has_decoder && cfg.mask_mode == MaskMode::fc) {
        out.embedding = nn::Tensor<T>({N, cfg.embed_dim});
        for (int n = 0; n < N; ++n)
          for (int j = 0; j < cfg.embed_dim; ++j)
            out.embedding.at2(n, j) = raw_emb_.at2(n, j) * mask_.at2(n, j);
      } else {
        out.embedding = raw_emb_;
      }
    } else {
      masked_ = apply_mask(x1_, out.mask, cfg.mask_mode);
      auto flat = masked_.reshaped({N, x1_flat_});
      out.embedding = embed_head.forward(flat, train, rng);
    }

    if (has_decoder) {
      auto mflat = out.mask.reshaped({N, mask_flat_dim()});
      out.pattern = opp_head.forward(mflat, train, rng);
    }
    return out;
  }

  static nn::Tensor<T> apply_mask(const nn::Tensor<T>& x1,
                                  const nn::Tensor<T>& mask, MaskMode mode) {
    if (mode == MaskMode::conv3d) {
      if (mask.shape != x1.shape)
        throw std::invalid_argument("apply_mask: 3d mask shape mismatch");
      nn::Tensor<T> out(x1.shape);
      for (std::size_t i = 0; i < x1.size(); ++i) out[i] = x1[i] * mask[i];
      return out;
    }
    if (mode == MaskMode::conv2d) {
      if (mask.dim(1) != 1 || mask.dim(2) != x1.dim(2) ||
          mask.dim(3) != x1.dim(3))
        throw std::invalid_argument("apply_mask: 2d mask shape mismatch");
      nn::Tensor<T> out(x1.shape);
      int N = x1.dim(0), C = x1.dim(1), H = x1.dim(2), W = x1.dim(3);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
          for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
              out.at4(n, c, h, w) = x1.at4(n, c, h, w) * mask.at4(n, 0, h, w);
      return out;
    }
    throw std::invalid_argument("apply_mask: fc masks apply to embeddings");
  }

  // demb: grad at the output embedding; dpattern: grad at the pattern output
  // (empty when the pattern branch is unsupervised or absent).
  void backward(const nn::Tensor<T>& demb, const nn::Tensor<T>& dpattern) {
    int N = demb.dim(0);
    nn::Tensor<T> dmask;
    if (has_decoder) {
      dmask = nn::Tensor<T>(mask_.shape);
      if (!dpattern.empty()) {
        auto g = opp_head.backward(dpattern);
        dmask += g.reshaped(mask_.shape);
      }
    }

    nn::Tensor<T> dx1_direct;
    if (cfg.mask_mode == MaskMode::fc || !has_decoder) {
      nn::Tensor<T> draw({N, cfg.embed_dim});
      if (has_decoder && cfg.mask_mode == MaskMode::fc) {
        for (int n = 0; n < N; ++n)
          for (int j = 0; j < cfg.embed_dim; ++j) {
            draw.at2(n, j) = demb.at2(n, j) * mask_.at2(n, j);
            dmask.at2(n, j) += demb.at2(n, j) * raw_emb_.at2(n, j);
          }
      } else {
        draw = demb;
      }
      dx1_direct = embed_head.backward(draw).reshaped(x1_.shape);
    } else {
      auto dmasked = embed_head.backward(demb).reshaped(x1_.shape);
      dx1_direct = nn::Tensor<T>(x1_.shape);
      if (cfg.mask_mode == MaskMode::conv3d) {
        for (std::size_t i = 0; i < x1_.size(); ++i) {
          dx1_direct[i] = dmasked[i] * mask_[i];
          dmask[i] += dmasked[i] * x1_[i];
        }
      } else {
        int C = x1_.dim(1), H = x1_.dim(2), W = x1_.dim(3);
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
              for (int w = 0; w < W; ++w) {
                dx1_direct.at4(n, c, h, w) =
                    dmasked.at4(n, c, h, w) * mask_.at4(n, 0, h, w);
                dmask.at4(n, 0, h, w) +=
                    dmasked.at4(n, c, h, w) * x1_.at4(n, c, h, w);
              }
      }
    }

    if (has_decoder) {
      auto dx3 = decoder.backward(dmask);
      auto g = fpn.backward(dx3);
      g.gx1 += dx1_direct;
      backbone.backward(g.gx1, g.gc2, g.gc3);
    } else {
      nn::Tensor<T> zc2({N, cfg.c2_ch, x2_spatial().first, x2_spatial().second});
      nn::Tensor<T> zc3({N, cfg.c3_ch, x3_spatial().first, x3_spatial().second});
      backbone.backward(dx1_direct, zc2, zc3);
    }
  }

  std::vector<nn::ParamRef<T>> params() {
    std::vector<nn::ParamRef<T>> out;
    backbone.collect(out);
    if (has_decoder) {
      fpn.collect(out);
      decoder.collect(out);
      opp_head.collect("opp", out);
    }
    embed_head.collect("embed", out);
    return out;
  }

  void zero_grad() {
    for (auto& p : params())
      if (p.grad) p.grad->zero();
  }

 private:
  int x1_flat_ = 0;
  nn::Tensor<T> x1_, masked_, mask_, raw_emb_;
};

}  // namespace from
