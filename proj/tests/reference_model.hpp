#pragma once

// Straight-line scalar re-implementation of the network, used as an oracle.
// Deliberately shares no code with the library beyond the parameter lookup.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "beamcast/model_config.hpp"
#include "beamcast/params.hpp"
#include "beamcast/quadrant.hpp"

namespace ref {

using Vec = std::vector<double>;
using Grid = std::vector<Vec>;  // [row][col]

struct Fmap {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(int ci, int y, int x) { return v[(static_cast<std::size_t>(ci) * h + y) * w + x]; }
  double at(int ci, int y, int x) const { return v[(static_cast<std::size_t>(ci) * h + y) * w + x]; }
};

inline Fmap conv(const Fmap& in, const std::vector<double>& wt, const std::vector<double>& b,
                 int cout, int kh, int kw, int ph, int pw) {
  Fmap out{cout, in.h + 2 * ph - kh + 1, in.w + 2 * pw - kw + 1, {}};
  out.v.assign(static_cast<std::size_t>(out.c) * out.h * out.w, 0.0);
  for (int o = 0; o < cout; ++o)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x) {
        double acc = b.empty() ? 0.0 : b[o];
        for (int i = 0; i < in.c; ++i)
          for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
              const int yy = y + dy - ph, xx = x + dx - pw;
              if (yy < 0 || yy >= in.h || xx < 0 || xx >= in.w) continue;
              acc += wt[((static_cast<std::size_t>(o) * in.c + i) * kh + dy) * kw + dx] *
                     in.at(i, yy, xx);
            }
        out.at(o, y, x) = acc;
      }
  return out;
}

inline void relu(std::vector<double>& v) {
  for (auto& x : v) x = std::max(0.0, x);
}

inline Vec matvec(const std::vector<double>& W, int rows, int cols, const Vec& x,
                  const std::vector<double>* bias = nullptr) {
  Vec y(static_cast<std::size_t>(rows), 0.0);
  for (int r = 0; r < rows; ++r) {
    double acc = bias ? (*bias)[r] : 0.0;
    for (int c = 0; c < cols; ++c) acc += W[static_cast<std::size_t>(r) * cols + c] * x[c];
    y[r] = acc;
  }
  return y;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline Fmap se(const Fmap& f, const std::vector<double>& w1, const std::vector<double>& w2,
               int hidden) {
  Vec z(static_cast<std::size_t>(f.c), 0.0);
  for (int c = 0; c < f.c; ++c) {
    for (int y = 0; y < f.h; ++y)
      for (int x = 0; x < f.w; ++x) z[c] += f.at(c, y, x);
    z[c] /= f.h * f.w;
  }
  Vec s = matvec(w1, hidden, f.c, z);
  relu(s);
  Vec g = matvec(w2, f.c, hidden, s);
  Fmap out = f;
  for (int c = 0; c < f.c; ++c)
    for (int y = 0; y < f.h; ++y)
      for (int x = 0; x < f.w; ++x) out.at(c, y, x) = f.at(c, y, x) * sigmoid(g[c]);
  return out;
}

inline Fmap maxpool(const Fmap& f) {
  Fmap out{f.c, f.h / 2, f.w / 2, {}};
  out.v.assign(static_cast<std::size_t>(out.c) * out.h * out.w, 0.0);
  for (int c = 0; c < f.c; ++c)
    for (int y = 0; y < out.h; ++y)
      for (int x = 0; x < out.w; ++x)
        out.at(c, y, x) = std::max({f.at(c, 2 * y, 2 * x), f.at(c, 2 * y, 2 * x + 1),
                                    f.at(c, 2 * y + 1, 2 * x), f.at(c, 2 * y + 1, 2 * x + 1)});
  return out;
}

template <typename P>
const std::vector<double>& T(const P& params, const std::string& name) {
  return params.get(name).data;
}

/// CNN feature of one 2 x K x S_w frame.
template <typename P>
Vec cnn(const beamcast::ModelConfig& c, const P& params, const double* frame) {
  Fmap f{2, c.subcarriers, c.codewords, std::vector<double>(frame, frame + 2 * c.subcarriers * c.codewords)};
  const auto& ch = c.cnn_channels;
  f = conv(f, T(params, "cnn.conv1.weight"), T(params, "cnn.conv1.bias"), ch[0], 1, 5, 0, 2);
  relu(f.v);
  f = conv(f, T(params, "cnn.conv2.weight"), T(params, "cnn.conv2.bias"), ch[1], 5, 1, 2, 0);
  relu(f.v);
  f = conv(f, T(params, "cnn.conv3.weight"), T(params, "cnn.conv3.bias"), ch[2], 3, 3, 1, 1);
  relu(f.v);
  if (c.use_se) f = se(f, T(params, "cnn.se.w1"), T(params, "cnn.se.w2"), c.se_hidden());
  f = maxpool(f);
  Vec gap(static_cast<std::size_t>(f.c), 0.0);
  for (int ci = 0; ci < f.c; ++ci) {
    for (int y = 0; y < f.h; ++y)
      for (int x = 0; x < f.w; ++x) gap[ci] += f.at(ci, y, x);
    gap[ci] /= f.h * f.w;
  }
  return matvec(T(params, "cnn.fc.weight"), c.cnn_feat_dim, ch[2], gap);
}

inline Vec softmax(Vec z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (auto& v : z) s += (v = std::exp(v - m));
  for (auto& v : z) v /= s;
  return z;
}

inline Vec layernorm(const Vec& x, const Vec& g, const Vec& b, double eps) {
  double mu = 0, var = 0;
  for (double v : x) mu += v;
  mu /= x.size();
  for (double v : x) var += (v - mu) * (v - mu);
  var /= x.size();
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mu) / std::sqrt(var + eps) * g[i] + b[i];
  return y;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

template <typename P>
Vec gate(const beamcast::ModelConfig& c, const P& params, int scene, double v) {
  if (!c.has_gate()) return Vec(static_cast<std::size_t>(c.n_experts), 1.0 / c.n_experts);
  const Vec sv{static_cast<double>(scene), v};
  const std::vector<double>* b1 = c.gate_bias ? &T(params, "gate.b1") : nullptr;
  Vec hdn = matvec(T(params, "gate.w1"), c.gate_hidden, 2, sv, b1);
  relu(hdn);
  return softmax(matvec(T(params, "gate.w2"), c.n_experts, c.gate_hidden, hdn));
}

struct Routing {
  beamcast::RoutingMode mode = beamcast::RoutingMode::Top1;
  std::optional<Vec> weights;  // replaces the gate when set
  std::optional<int> mask;     // HardMask expert; default hard_assignment
};

struct Output {
  Vec logits;
  Grid hidden;  // final block output per position
};

/// Full forward of one sample; x is T x 2 x K x S_w.
template <typename P>
Output forward(const beamcast::ModelConfig& c, const P& params, const double* x, int scene,
               double speed, const Routing& route) {
  const int Tn = c.slots, d = c.d_model;
  const std::size_t frame = 2ull * c.subcarriers * c.codewords;
  Grid feats;
  for (int t = 0; t < Tn; ++t) feats.push_back(cnn(c, params, x + t * frame));

  Output out;
  if (c.arch == beamcast::Architecture::FrameCnn) {
    out.logits = matvec(T(params, "cls.weight"), c.num_classes, c.cnn_feat_dim, feats.back());
    return out;
  }

  Vec ctx;
  if (c.use_context) ctx = matvec(T(params, "ctx.weight"), c.ctx_dim, 2, Vec{double(scene), speed});
  Grid h;
  for (int t = 0; t < Tn; ++t) {
    Vec in = feats[t];
    in.insert(in.end(), ctx.begin(), ctx.end());
    Vec e = matvec(T(params, "proj.weight"), d, c.proj_in_dim(), in);
    for (int i = 0; i < d; ++i) e[i] += T(params, "pos.weight")[static_cast<std::size_t>(t) * d + i];
    h.push_back(e);
  }

  const Vec w = route.weights ? *route.weights : gate(c, params, scene, speed);
  int chosen = 0;
  if (route.mode == beamcast::RoutingMode::HardMask)
    chosen = route.mask ? *route.mask : beamcast::hard_assignment(scene, speed);
  else
    for (int e = 1; e < static_cast<int>(w.size()); ++e)
      if (w[e] > w[chosen]) chosen = e;

  const int H = c.n_heads, dh = d / H, f = c.ffn_dim();
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Grid x1, q, k, v;
    for (int t = 0; t < Tn; ++t) {
      x1.push_back(layernorm(h[t], T(params, p + "ln1.gamma"), T(params, p + "ln1.beta"), c.ln_eps));
      q.push_back(matvec(T(params, p + "attn.wq"), d, d, x1[t], &T(params, p + "attn.bq")));
      k.push_back(matvec(T(params, p + "attn.wk"), d, d, x1[t], &T(params, p + "attn.bk")));
      v.push_back(matvec(T(params, p + "attn.wv"), d, d, x1[t], &T(params, p + "attn.bv")));
    }
    Grid mid;
    for (int t = 0; t < Tn; ++t) {
      Vec att(static_cast<std::size_t>(d), 0.0);
      for (int hh = 0; hh < H; ++hh) {
        Vec s;
        for (int j = 0; j <= t; ++j) {
          double dot = 0;
          for (int i = 0; i < dh; ++i) dot += q[t][hh * dh + i] * k[j][hh * dh + i];
          s.push_back(dot / std::sqrt(double(dh)));
        }
        s = softmax(s);
        for (int j = 0; j <= t; ++j)
          for (int i = 0; i < dh; ++i) att[hh * dh + i] += s[j] * v[j][hh * dh + i];
      }
      Vec o = matvec(T(params, p + "attn.wo"), d, d, att, &T(params, p + "attn.bo"));
      for (int i = 0; i < d; ++i) o[i] += h[t][i];
      mid.push_back(o);
    }
    auto expert = [&](const std::string& q2, const Vec& xin) {
      Vec a = matvec(T(params, q2 + "w1"), f, d, xin, &T(params, q2 + "b1"));
      for (auto& z : a) z = gelu(z);
      return matvec(T(params, q2 + "w2"), d, f, a, &T(params, q2 + "b2"));
    };
    for (int t = 0; t < Tn; ++t) {
      const Vec x2 = layernorm(mid[t], T(params, p + "ln2.gamma"), T(params, p + "ln2.beta"), c.ln_eps);
      Vec y(static_cast<std::size_t>(d), 0.0);
      if (!c.is_moe_layer(l)) {
        y = expert(p + "ffn.", x2);
      } else if (route.mode == beamcast::RoutingMode::SoftDense) {
        for (int e = 0; e < c.n_experts; ++e) {
          const Vec ye = expert(p + "expert." + std::to_string(e) + ".", x2);
          for (int i = 0; i < d; ++i) y[i] += w[e] * ye[i];
        }
      } else {
        y = expert(p + "expert." + std::to_string(chosen) + ".", x2);
      }
      for (int i = 0; i < d; ++i) h[t][i] = mid[t][i] + y[i];
    }
  }
  out.hidden = h;
  out.logits = matvec(T(params, "cls.weight"), c.num_classes, d, h.back());
  return out;
}

}  // namespace ref
