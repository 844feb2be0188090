#include "beamcast/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "beamcast/common.hpp"
#include "beamcast/quadrant.hpp"

namespace beamcast {

namespace {

constexpr std::uint64_t kHeadSite = 0x68656164;
constexpr std::uint64_t kExpertSite = 0x65787000;

template <typename S>
Mat<S> linear(const Mat<S>& x, const S* w, int out, const S* bias = nullptr) {
  CMatMap<S> W(w, out, x.cols());
  Mat<S> y = x * W.transpose();
  if (bias) y.rowwise() += Eigen::Map<const RowVec<S>>(bias, out);
  return y;
}

// dW += dy^T x ; db += colsum(dy)
template <typename S>
void accumulate_linear(const Mat<S>& x, const Mat<S>& dy, S* dw, S* db) {
  MatMap<S> dW(dw, dy.cols(), x.cols());
  dW.noalias() += dy.transpose() * x;
  if (!db) return;
  // Fixed-order column sums; a vectorized reduction into `db` would peel by
  // its runtime alignment and break run-to-run reproducibility.
  RowVec<S> col = RowVec<S>::Zero(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) col += dy.row(r);
  for (Eigen::Index c = 0; c < dy.cols(); ++c) db[c] += col[c];
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

SampleInput sample_input(const DatasetRecord& record, std::uint64_t seed) {
  SampleInput in;
  in.x = record.x.x.data();
  in.scene = record.scene;
  in.speed_norm = record.speed_norm;
  in.seed = seed;
  return in;
}

BackwardScope full_scope() { return {}; }

BackwardScope scope_for(const ModelConfig& config, const std::vector<TensorSpec>& layout,
                        const std::vector<bool>& trainable) {
  BackwardScope scope;
  scope.cnn = false;
  scope.embedding = false;
  scope.lowest_layer = config.n_layers;
  bool gate = false;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (!trainable[i]) continue;
    const std::string& n = layout[i].name;
    if (starts_with(n, "cnn.")) {
      scope.cnn = true;
      // Under the frame baseline the classifier sits directly on cnn.fc, so
      // only tensors before fc require the CNN backward.
      if (config.arch == Architecture::FrameCnn && starts_with(n, "cnn.fc.")) scope.cnn = false;
      scope.embedding = true;
    } else if (starts_with(n, "ctx.") || starts_with(n, "proj.") || starts_with(n, "pos.")) {
      scope.embedding = true;
    } else if (starts_with(n, "gate.")) {
      gate = true;
    } else if (starts_with(n, "blocks.")) {
      const int l = std::stoi(n.substr(7, n.find('.', 7) - 7));
      scope.lowest_layer = std::min(scope.lowest_layer, l);
    }
  }
  if (config.arch == Architecture::FrameCnn) {
    for (std::size_t i = 0; i < layout.size(); ++i)
      if (trainable[i] && starts_with(layout[i].name, "cnn.") &&
          !starts_with(layout[i].name, "cnn.fc."))
        scope.cnn = true;
    scope.lowest_layer = 0;
    return scope;
  }
  if (gate)
    for (int l : config.moe_layers) scope.lowest_layer = std::min(scope.lowest_layer, l);
  if (scope.embedding) scope.lowest_layer = 0;
  return scope;
}

template <typename S>
Model<S>::Model(const ModelConfig& config, const ParamSet<S>& params)
    : config_(config), params_(&params) {
  config_.validate();
  const auto layout = parameter_layout(config_);
  if (layout.size() != params.size())
    throw ConfigError("parameter set does not match the model configuration");
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout[i].name != params[i].name || layout[i].shape != params[i].shape)
      throw ConfigError("parameter tensor '" + params[i].name + "' (" +
                        tensor_role(layout[i].name) + ") does not match the configuration");

  c1_ = config_.cnn_channels[0];
  c2_ = config_.cnn_channels[1];
  c3_ = config_.cnn_channels[2];
  se_hidden_ = config_.use_se ? config_.se_hidden() : 0;
  const int K = config_.subcarriers, W = config_.codewords;
  conv1_ = {2, c1_, 1, 5, 0, 2, K, W};
  conv2_ = {c1_, c2_, 5, 1, 2, 0, K, W};
  conv3_ = {c2_, c3_, 3, 3, 1, 1, K, W};

  auto idx = [&](const std::string& n) { return params.index(n); };
  auto opt = [&](const std::string& n) { return params.find(n); };
  conv1w_ = idx("cnn.conv1.weight");
  conv1b_ = idx("cnn.conv1.bias");
  conv2w_ = idx("cnn.conv2.weight");
  conv2b_ = idx("cnn.conv2.bias");
  conv3w_ = idx("cnn.conv3.weight");
  conv3b_ = idx("cnn.conv3.bias");
  sew1_ = opt("cnn.se.w1");
  sew2_ = opt("cnn.se.w2");
  fc_ = idx("cnn.fc.weight");
  cls_ = idx("cls.weight");
  if (config_.arch == Architecture::FrameCnn) return;
  ctx_ = opt("ctx.weight");
  proj_ = opt("proj.weight");
  pos_ = opt("pos.weight");
  gw1_ = opt("gate.w1");
  gb1_ = opt("gate.b1");
  gw2_ = opt("gate.w2");
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "blocks." + std::to_string(l) + ".";
    LayerIdx li;
    li.ln1g = idx(pre + "ln1.gamma");
    li.ln1b = idx(pre + "ln1.beta");
    li.wq = idx(pre + "attn.wq");
    li.bq = idx(pre + "attn.bq");
    li.wk = idx(pre + "attn.wk");
    li.bk = idx(pre + "attn.bk");
    li.wv = idx(pre + "attn.wv");
    li.bv = idx(pre + "attn.bv");
    li.wo = idx(pre + "attn.wo");
    li.bo = idx(pre + "attn.bo");
    li.ln2g = idx(pre + "ln2.gamma");
    li.ln2b = idx(pre + "ln2.beta");
    li.moe = config_.is_moe_layer(l);
    auto ffn = [&](const std::string& q) {
      return std::array<std::size_t, 4>{idx(q + "w1"), idx(q + "b1"), idx(q + "w2"),
                                        idx(q + "b2")};
    };
    if (li.moe) {
      for (int e = 0; e < config_.n_experts; ++e)
        li.ffn.push_back(ffn(pre + "expert." + std::to_string(e) + "."));
    } else {
      li.ffn.push_back(ffn(pre + "ffn."));
    }
    layers_.push_back(std::move(li));
  }
}

// ---------------------------------------------------------------- CNN

template <typename S>
void Model<S>::cnn_forward(int frames, CnnCache<S>& c) const {
  const int K = config_.subcarriers, W = config_.codewords, hw = K * W;
  c.frames = frames;
  c.a1.resize(static_cast<std::size_t>(frames) * c1_ * hw);
  c.a2.resize(static_cast<std::size_t>(frames) * c2_ * hw);
  c.a3.resize(static_cast<std::size_t>(frames) * c3_ * hw);
  conv2d_forward(conv1_, frames, c.input.data(), p(conv1w_), p(conv1b_), c.a1.data());
  relu_inplace(c.a1.data(), c.a1.size());
  conv2d_forward(conv2_, frames, c.a1.data(), p(conv2w_), p(conv2b_), c.a2.data());
  relu_inplace(c.a2.data(), c.a2.size());
  conv2d_forward(conv3_, frames, c.a2.data(), p(conv3w_), p(conv3b_), c.a3.data());
  relu_inplace(c.a3.data(), c.a3.size());
  if (config_.use_se) {
    c.se_out.resize(c.a3.size());
    se_forward(frames, c3_, hw, c.a3.data(), p(*sew1_), p(*sew2_), se_hidden_, c.se_out.data(),
               c.se);
  } else {
    c.se_out = c.a3;
  }
  const int ph = K / 2, pw = W / 2;
  c.pooled.resize(static_cast<std::size_t>(frames) * c3_ * ph * pw);
  maxpool2_forward(frames, c3_, K, W, c.se_out.data(), c.pooled.data(), c.pool_argmax);
  c.gap.resize(frames, c3_);
  const int phw = ph * pw;
  for (int f = 0; f < frames; ++f)
    for (int ch = 0; ch < c3_; ++ch) {
      const S* q = c.pooled.data() + (static_cast<std::size_t>(f) * c3_ + ch) * phw;
      S acc = 0;
      for (int i = 0; i < phw; ++i) acc += q[i];
      c.gap(f, ch) = acc / S(phw);
    }
}

template <typename S>
void Model<S>::cnn_backward(const CnnCache<S>& c, const Mat<S>& dgap, ParamSet<S>& g) const {
  const int K = config_.subcarriers, W = config_.codewords, hw = K * W;
  const int phw = (K / 2) * (W / 2);
  const int frames = c.frames;
  std::vector<S> dpooled(c.pooled.size());
  for (int f = 0; f < frames; ++f)
    for (int ch = 0; ch < c3_; ++ch) {
      const S v = dgap(f, ch) / S(phw);
      std::fill_n(dpooled.begin() + (static_cast<std::size_t>(f) * c3_ + ch) * phw, phw, v);
    }
  std::vector<S> dse(c.se_out.size());
  maxpool2_backward(dse.size(), c.pool_argmax, dpooled.data(), dse.data());
  std::vector<S> da3;
  if (config_.use_se) {
    da3.assign(c.a3.size(), S(0));
    se_backward(frames, c3_, hw, c.a3.data(), p(*sew1_), p(*sew2_), se_hidden_, c.se, dse.data(),
                g[*sew1_].data.data(), g[*sew2_].data.data(), da3.data());
    g.mark_touched(*sew1_);
    g.mark_touched(*sew2_);
  } else {
    da3 = std::move(dse);
  }
  relu_backward_inplace(c.a3.data(), da3.data(), da3.size());
  std::vector<S> da2(c.a2.size(), S(0));
  conv2d_backward(conv3_, frames, c.a2.data(), p(conv3w_), da3.data(), g[conv3w_].data.data(),
                  g[conv3b_].data.data(), da2.data());
  relu_backward_inplace(c.a2.data(), da2.data(), da2.size());
  std::vector<S> da1(c.a1.size(), S(0));
  conv2d_backward(conv2_, frames, c.a1.data(), p(conv2w_), da2.data(), g[conv2w_].data.data(),
                  g[conv2b_].data.data(), da1.data());
  relu_backward_inplace(c.a1.data(), da1.data(), da1.size());
  conv2d_backward<S>(conv1_, frames, c.input.data(), p(conv1w_), da1.data(),
                     g[conv1w_].data.data(), g[conv1b_].data.data(), nullptr);
  for (auto i : {conv1w_, conv1b_, conv2w_, conv2b_, conv3w_, conv3b_}) g.mark_touched(i);
}

// ---------------------------------------------------------------- blocks

template <typename S>
void Model<S>::expert_apply(const std::array<std::size_t, 4>& idx, ExpertCache<S>& ec) const {
  const int f = config_.ffn_dim(), d = config_.d_model;
  ec.a = linear<S>(ec.x, p(idx[0]), f, p(idx[1]));
  Mat<S> gl = ec.a.unaryExpr([](S v) { return gelu(v); });
  ec.y = linear<S>(gl, p(idx[2]), d, p(idx[3]));
}

template <typename S>
Mat<S> Model<S>::expert_backprop(const std::array<std::size_t, 4>& idx, const ExpertCache<S>& ec,
                                 const Mat<S>& dy, ParamSet<S>& g) const {
  const int f = config_.ffn_dim(), d = config_.d_model;
  Mat<S> gl = ec.a.unaryExpr([](S v) { return gelu(v); });
  accumulate_linear<S>(gl, dy, g[idx[2]].data.data(), g[idx[3]].data.data());
  Mat<S> dg = dy * CMatMap<S>(p(idx[2]), d, f);
  dg.array() *= ec.a.unaryExpr([](S v) { return gelu_grad(v); }).array();
  accumulate_linear<S>(ec.x, dg, g[idx[0]].data.data(), g[idx[1]].data.data());
  for (auto i : idx) g.mark_touched(i);
  return dg * CMatMap<S>(p(idx[0]), f, d);
}

template <typename S>
void Model<S>::block_forward(int layer, int B, int T, const Mat<S>& h_in,
                             const ForwardCache<S>& fc, LayerCache<S>& lc) const {
  const LayerIdx& li = layers_[layer];
  const int d = config_.d_model, H = config_.n_heads, dh = d / H;
  const S scale = S(1) / std::sqrt(S(dh));
  lc.h_in = h_in;
  layernorm_forward(h_in, p(li.ln1g), p(li.ln1b), config_.ln_eps, lc.x1, lc.ln1);
  lc.q = linear<S>(lc.x1, p(li.wq), d, p(li.bq));
  lc.k = linear<S>(lc.x1, p(li.wk), d, p(li.bk));
  lc.v = linear<S>(lc.x1, p(li.wv), d, p(li.bv));
  lc.attn.resize(static_cast<Eigen::Index>(B) * T, d);
  lc.probs.resize(static_cast<std::size_t>(B) * H);
  for (int b = 0; b < B; ++b)
    for (int hh = 0; hh < H; ++hh) {
      auto Q = lc.q.block(b * T, hh * dh, T, dh);
      auto Kb = lc.k.block(b * T, hh * dh, T, dh);
      auto V = lc.v.block(b * T, hh * dh, T, dh);
      Mat<S> P = (Q * Kb.transpose()) * scale;
      for (int i = 0; i < T; ++i) {
        for (int j = i + 1; j < T; ++j) P(i, j) = -std::numeric_limits<S>::infinity();
        softmax_inplace(P.row(i).data(), T);
      }
      lc.attn.block(b * T, hh * dh, T, dh).noalias() = P * V;
      lc.probs[static_cast<std::size_t>(b) * H + hh] = std::move(P);
    }
  lc.h_mid = h_in + linear<S>(lc.attn, p(li.wo), d, p(li.bo));
  layernorm_forward(lc.h_mid, p(li.ln2g), p(li.ln2b), config_.ln_eps, lc.x2, lc.ln2);

  lc.experts.clear();
  const bool drop = fc.training && config_.dropout_expert > 0.0;
  auto apply_dropout = [&](ExpertCache<S>& ec) {
    if (!drop) return;
    ec.mask.clear();
    ec.mask.reserve(static_cast<std::size_t>(ec.y.size()));
    for (int b : ec.samples) {
      const auto m = dropout_mask<S>(
          derive_seed(fc.inputs[b].seed, kExpertSite + static_cast<std::uint64_t>(layer),
                      static_cast<std::uint64_t>(ec.expert)),
          static_cast<std::size_t>(T) * d, config_.dropout_expert);
      ec.mask.insert(ec.mask.end(), m.begin(), m.end());
    }
    ec.y.array() *= Eigen::Map<const Mat<S>>(ec.mask.data(), ec.y.rows(), d).array();
  };

  if (!li.moe) {
    ExpertCache<S> ec;
    ec.x = lc.x2;
    expert_apply(li.ffn[0], ec);
    lc.ffn_out = ec.y;
    lc.experts.push_back(std::move(ec));
  } else if (fc.mode == RoutingMode::SoftDense) {
    lc.ffn_out = Mat<S>::Zero(lc.x2.rows(), d);
    for (int e = 0; e < config_.n_experts; ++e) {
      ExpertCache<S> ec;
      ec.expert = e;
      for (int b = 0; b < B; ++b) ec.samples.push_back(b);
      ec.x = lc.x2;
      expert_apply(li.ffn[e], ec);
      apply_dropout(ec);
      for (int b = 0; b < B; ++b)
        lc.ffn_out.middleRows(b * T, T) += fc.route_weights(b, e) * ec.y.middleRows(b * T, T);
      lc.experts.push_back(std::move(ec));
    }
  } else {
    lc.ffn_out.resize(lc.x2.rows(), d);
    for (int e = 0; e < config_.n_experts; ++e) {
      ExpertCache<S> ec;
      ec.expert = e;
      for (int b = 0; b < B; ++b)
        if (fc.selected[b] == e) ec.samples.push_back(b);
      if (ec.samples.empty()) continue;
      ec.x.resize(static_cast<Eigen::Index>(ec.samples.size()) * T, d);
      for (std::size_t s = 0; s < ec.samples.size(); ++s)
        ec.x.middleRows(static_cast<Eigen::Index>(s) * T, T) =
            lc.x2.middleRows(ec.samples[s] * T, T);
      expert_apply(li.ffn[e], ec);
      apply_dropout(ec);
      for (std::size_t s = 0; s < ec.samples.size(); ++s)
        lc.ffn_out.middleRows(ec.samples[s] * T, T) =
            ec.y.middleRows(static_cast<Eigen::Index>(s) * T, T);
      lc.experts.push_back(std::move(ec));
    }
  }
  lc.h_out = lc.h_mid + lc.ffn_out;
}

template <typename S>
Mat<S> Model<S>::block_backward(int layer, int B, int T, const ForwardCache<S>& fc,
                                const LayerCache<S>& lc, const Mat<S>& dh_out, ParamSet<S>& g,
                                Mat<S>* droute) const {
  const LayerIdx& li = layers_[layer];
  const int d = config_.d_model, H = config_.n_heads, dh = d / H;
  const S scale = S(1) / std::sqrt(S(dh));

  Mat<S> dx2 = Mat<S>::Zero(lc.x2.rows(), d);
  if (!li.moe) {
    dx2 = expert_backprop(li.ffn[0], lc.experts[0], dh_out, g);
  } else if (fc.mode == RoutingMode::SoftDense) {
    for (const auto& ec : lc.experts) {
      Mat<S> dy(dh_out.rows(), d);
      for (int b = 0; b < B; ++b) {
        dy.middleRows(b * T, T) = fc.route_weights(b, ec.expert) * dh_out.middleRows(b * T, T);
        if (droute)
          (*droute)(b, ec.expert) +=
              (dh_out.middleRows(b * T, T).array() * ec.y.middleRows(b * T, T).array()).sum();
      }
      if (!ec.mask.empty())
        dy.array() *= Eigen::Map<const Mat<S>>(ec.mask.data(), dy.rows(), d).array();
      dx2 += expert_backprop(li.ffn[ec.expert], ec, dy, g);
    }
  } else {
    for (const auto& ec : lc.experts) {
      Mat<S> dy(ec.y.rows(), d);
      for (std::size_t s = 0; s < ec.samples.size(); ++s)
        dy.middleRows(static_cast<Eigen::Index>(s) * T, T) =
            dh_out.middleRows(ec.samples[s] * T, T);
      if (!ec.mask.empty())
        dy.array() *= Eigen::Map<const Mat<S>>(ec.mask.data(), dy.rows(), d).array();
      Mat<S> dx = expert_backprop(li.ffn[ec.expert], ec, dy, g);
      for (std::size_t s = 0; s < ec.samples.size(); ++s)
        dx2.middleRows(ec.samples[s] * T, T) += dx.middleRows(static_cast<Eigen::Index>(s) * T, T);
    }
  }
  Mat<S> dh_mid = dh_out + layernorm_backward(lc.h_mid, p(li.ln2g), lc.ln2, dx2,
                                              g[li.ln2g].data.data(), g[li.ln2b].data.data());

  accumulate_linear<S>(lc.attn, dh_mid, g[li.wo].data.data(), g[li.bo].data.data());
  Mat<S> dattn = dh_mid * CMatMap<S>(p(li.wo), d, d);
  Mat<S> dq(lc.q.rows(), d), dk(lc.k.rows(), d), dv(lc.v.rows(), d);
  for (int b = 0; b < B; ++b)
    for (int hh = 0; hh < H; ++hh) {
      const Mat<S>& P = lc.probs[static_cast<std::size_t>(b) * H + hh];
      auto Q = lc.q.block(b * T, hh * dh, T, dh);
      auto Kb = lc.k.block(b * T, hh * dh, T, dh);
      auto V = lc.v.block(b * T, hh * dh, T, dh);
      auto dC = dattn.block(b * T, hh * dh, T, dh);
      Mat<S> dP = dC * V.transpose();
      dv.block(b * T, hh * dh, T, dh).noalias() = P.transpose() * dC;
      Mat<S> dS = P.cwiseProduct(dP);
      for (int i = 0; i < T; ++i) {
        const S row = dS.row(i).sum();
        for (int j = 0; j < T; ++j) dS(i, j) = P(i, j) * (dP(i, j) - row);
      }
      dS *= scale;
      dq.block(b * T, hh * dh, T, dh).noalias() = dS * Kb;
      dk.block(b * T, hh * dh, T, dh).noalias() = dS.transpose() * Q;
    }
  accumulate_linear<S>(lc.x1, dq, g[li.wq].data.data(), g[li.bq].data.data());
  accumulate_linear<S>(lc.x1, dk, g[li.wk].data.data(), g[li.bk].data.data());
  accumulate_linear<S>(lc.x1, dv, g[li.wv].data.data(), g[li.bv].data.data());
  Mat<S> dx1 = dq * CMatMap<S>(p(li.wq), d, d) + dk * CMatMap<S>(p(li.wk), d, d) +
               dv * CMatMap<S>(p(li.wv), d, d);
  Mat<S> dh_in = dh_mid + layernorm_backward(lc.h_in, p(li.ln1g), lc.ln1, dx1,
                                             g[li.ln1g].data.data(), g[li.ln1b].data.data());
  for (auto i : {li.ln1g, li.ln1b, li.wq, li.bq, li.wk, li.bk, li.wv, li.bv, li.wo, li.bo,
                 li.ln2g, li.ln2b})
    g.mark_touched(i);
  return dh_in;
}

// ---------------------------------------------------------------- forward

template <typename S>
ForwardCache<S> Model<S>::forward(std::span<const SampleInput> inputs,
                                  const ForwardOptions<S>& opt) const {
  const int B = static_cast<int>(inputs.size());
  const int T = config_.slots;
  const int K = config_.subcarriers, W = config_.codewords;
  const std::size_t frame_size = static_cast<std::size_t>(2) * K * W;
  if (B == 0) throw ConfigError("forward called with an empty batch");

  ForwardCache<S> fc;
  fc.batch = B;
  fc.slots = T;
  fc.mode = opt.mode;
  fc.training = opt.training;
  fc.start_layer = opt.start_layer;
  fc.inputs.assign(inputs.begin(), inputs.end());
  fc.sv.resize(B, 2);
  for (int b = 0; b < B; ++b) {
    fc.sv(b, 0) = S(inputs[b].scene);
    fc.sv(b, 1) = S(inputs[b].speed_norm);
  }

  const bool frame_cnn = config_.arch == Architecture::FrameCnn;
  const int E = (!frame_cnn && !config_.moe_layers.empty()) ? config_.n_experts : 0;

  // Routing: one decision per sample, shared by all layers and time steps.
  if (E > 0) {
    if (config_.has_gate()) {
      fc.gate_pre = fc.sv * CMatMap<S>(p(*gw1_), config_.gate_hidden, 2).transpose();
      if (gb1_) fc.gate_pre.rowwise() += Eigen::Map<const RowVec<S>>(p(*gb1_), config_.gate_hidden);
      fc.gate_hidden = fc.gate_pre.cwiseMax(S(0));
      fc.gate_weights = fc.gate_hidden * CMatMap<S>(p(*gw2_), E, config_.gate_hidden).transpose();
      for (int b = 0; b < B; ++b) softmax_inplace(fc.gate_weights.row(b).data(), E);
    } else {
      fc.gate_weights = Mat<S>::Constant(B, E, S(1) / S(E));
    }
    if (!opt.weights.empty()) {
      if (static_cast<int>(opt.weights.size()) != B)
        throw ConfigError("routing weight override must provide one vector per sample");
      fc.route_weights.resize(B, E);
      for (int b = 0; b < B; ++b) {
        RoutingDirective dir{RoutingMode::SoftDense, std::nullopt, opt.weights[b]};
        dir.validate(E);
        for (int e = 0; e < E; ++e) fc.route_weights(b, e) = S(opt.weights[b][e]);
      }
    } else {
      fc.route_weights = fc.gate_weights;
      fc.gate_live = config_.has_gate() && opt.mode == RoutingMode::SoftDense;
    }
    fc.selected.assign(B, -1);
    for (int b = 0; b < B; ++b) {
      if (opt.mode == RoutingMode::HardMask) {
        const int m = opt.hard_masks.empty()
                          ? hard_assignment(inputs[b].scene, inputs[b].speed_norm)
                          : opt.hard_masks.at(b);
        if (m < 0 || m >= E)
          throw ConfigError("hard mask expert index " + std::to_string(m) + " out of range");
        fc.selected[b] = m;
      } else if (opt.mode == RoutingMode::Top1) {
        fc.selected[b] = argmax_first(fc.route_weights.row(b).data(), E);
      }
    }
    fc.experts_evaluated.assign(
        B, std::vector<int>(config_.moe_layers.size(),
                            opt.mode == RoutingMode::SoftDense ? E : 1));
  } else {
    fc.selected.assign(B, -1);
    fc.experts_evaluated.assign(B, {});
  }

  if (frame_cnn) {
    fc.cnn.input.resize(B * frame_size);
    for (int b = 0; b < B; ++b)
      std::copy_n(inputs[b].x + (T - 1) * frame_size, frame_size,
                  fc.cnn.input.begin() + b * frame_size);
    cnn_forward(B, fc.cnn);
    fc.cnn_feat = linear<S>(fc.cnn.gap, p(fc_), config_.cnn_feat_dim);
    fc.head_in = fc.cnn_feat;
  } else {
    const int d = config_.d_model;
    Mat<S> h;
    if (opt.start_layer > 0) {
      if (!opt.start_states || opt.start_states->rows() != B * T || opt.start_states->cols() != d)
        throw ConfigError("start states do not match the batch");
      h = *opt.start_states;
    } else {
      fc.cnn.input.resize(static_cast<std::size_t>(B) * T * frame_size);
      for (int b = 0; b < B; ++b)
        std::copy_n(inputs[b].x, T * frame_size,
                    fc.cnn.input.begin() + static_cast<std::size_t>(b) * T * frame_size);
      cnn_forward(B * T, fc.cnn);
      fc.cnn_feat = linear<S>(fc.cnn.gap, p(fc_), config_.cnn_feat_dim);
      const int feat = config_.cnn_feat_dim, pin = config_.proj_in_dim();
      fc.proj_in.resize(static_cast<Eigen::Index>(B) * T, pin);
      fc.proj_in.leftCols(feat) = fc.cnn_feat;
      if (config_.use_context) {
        fc.ctx = linear<S>(fc.sv, p(*ctx_), config_.ctx_dim);
        for (int b = 0; b < B; ++b)
          fc.proj_in.block(b * T, feat, T, config_.ctx_dim).rowwise() = fc.ctx.row(b);
      }
      fc.h0 = linear<S>(fc.proj_in, p(*proj_), d);
      CMatMap<S> pos(p(*pos_), config_.max_positions, d);
      for (int b = 0; b < B; ++b) fc.h0.middleRows(b * T, T) += pos.topRows(T);
      h = fc.h0;
    }
    fc.layers.resize(config_.n_layers);
    for (int l = opt.start_layer; l < config_.n_layers; ++l) {
      block_forward(l, B, T, h, fc, fc.layers[l]);
      h = fc.layers[l].h_out;
    }
    fc.head_in.resize(B, d);
    for (int b = 0; b < B; ++b) fc.head_in.row(b) = h.row(b * T + T - 1);
  }

  const int hd = static_cast<int>(fc.head_in.cols());
  Mat<S> head = fc.head_in;
  if (opt.training && config_.dropout_head > 0.0) {
    fc.head_mask.resize(static_cast<std::size_t>(B) * hd);
    for (int b = 0; b < B; ++b) {
      const auto m = dropout_mask<S>(derive_seed(inputs[b].seed, kHeadSite), hd,
                                     config_.dropout_head);
      std::copy(m.begin(), m.end(), fc.head_mask.begin() + static_cast<std::size_t>(b) * hd);
    }
    head.array() *= Eigen::Map<const Mat<S>>(fc.head_mask.data(), B, hd).array();
  }
  fc.logits = linear<S>(head, p(cls_), config_.num_classes);
  return fc;
}

// ---------------------------------------------------------------- backward

template <typename S>
void Model<S>::backward(const ForwardCache<S>& fc, const Mat<S>& dlogits, ParamSet<S>& g,
                        const BackwardScope& scope) const {
  const int B = fc.batch, T = fc.slots;
  const int hd = static_cast<int>(fc.head_in.cols());
  Mat<S> head = fc.head_in;
  Mat<S> mask;
  if (!fc.head_mask.empty()) {
    mask = Eigen::Map<const Mat<S>>(fc.head_mask.data(), B, hd);
    head.array() *= mask.array();
  }
  accumulate_linear<S>(head, dlogits, g[cls_].data.data(), nullptr);
  g.mark_touched(cls_);
  Mat<S> dhead = dlogits * CMatMap<S>(p(cls_), config_.num_classes, hd);
  if (mask.size()) dhead.array() *= mask.array();

  if (config_.arch == Architecture::FrameCnn) {
    accumulate_linear<S>(fc.cnn.gap, dhead, g[fc_].data.data(), nullptr);
    g.mark_touched(fc_);
    if (scope.cnn) cnn_backward(fc.cnn, dhead * CMatMap<S>(p(fc_), config_.cnn_feat_dim, c3_), g);
    return;
  }

  const int d = config_.d_model;
  Mat<S> dh = Mat<S>::Zero(static_cast<Eigen::Index>(B) * T, d);
  for (int b = 0; b < B; ++b) dh.row(b * T + T - 1) = dhead.row(b);
  const int stop = std::max(fc.start_layer, std::min(scope.lowest_layer, config_.n_layers));
  Mat<S> droute;
  if (fc.gate_live) droute = Mat<S>::Zero(B, config_.n_experts);
  for (int l = config_.n_layers - 1; l >= stop; --l)
    dh = block_backward(l, B, T, fc, fc.layers[l], dh, g, fc.gate_live ? &droute : nullptr);

  if (fc.gate_live) {
    const int E = config_.n_experts, gh = config_.gate_hidden;
    Mat<S> dz(B, E);
    for (int b = 0; b < B; ++b) {
      const S dot = droute.row(b).dot(fc.route_weights.row(b));
      for (int e = 0; e < E; ++e) dz(b, e) = fc.route_weights(b, e) * (droute(b, e) - dot);
    }
    accumulate_linear<S>(fc.gate_hidden, dz, g[*gw2_].data.data(), nullptr);
    Mat<S> dhid = dz * CMatMap<S>(p(*gw2_), E, gh);
    for (Eigen::Index i = 0; i < dhid.size(); ++i)
      if (!(fc.gate_pre.data()[i] > S(0))) dhid.data()[i] = S(0);
    accumulate_linear<S>(fc.sv, dhid, g[*gw1_].data.data(),
                         gb1_ ? g[*gb1_].data.data() : nullptr);
    g.mark_touched(*gw1_);
    g.mark_touched(*gw2_);
    if (gb1_) g.mark_touched(*gb1_);
  }

  if (fc.start_layer > 0 || stop > 0 || !scope.embedding) return;

  // Embedding: h0 = W_p [z_cnn | z_ctx] + W_pe[t].
  {
    MatMap<S> dpos(g[*pos_].data.data(), config_.max_positions, d);
    for (int b = 0; b < B; ++b) dpos.topRows(T) += dh.middleRows(b * T, T);
    g.mark_touched(*pos_);
  }
  accumulate_linear<S>(fc.proj_in, dh, g[*proj_].data.data(), nullptr);
  g.mark_touched(*proj_);
  Mat<S> dproj = dh * CMatMap<S>(p(*proj_), d, config_.proj_in_dim());
  const int feat = config_.cnn_feat_dim;
  if (config_.use_context) {
    Mat<S> dctx = Mat<S>::Zero(B, config_.ctx_dim);
    for (int b = 0; b < B; ++b)
      dctx.row(b) = dproj.block(b * T, feat, T, config_.ctx_dim).colwise().sum();
    accumulate_linear<S>(fc.sv, dctx, g[*ctx_].data.data(), nullptr);
    g.mark_touched(*ctx_);
  }
  Mat<S> dfeat = dproj.leftCols(feat);
  accumulate_linear<S>(fc.cnn.gap, dfeat, g[fc_].data.data(), nullptr);
  g.mark_touched(fc_);
  if (scope.cnn) cnn_backward(fc.cnn, dfeat * CMatMap<S>(p(fc_), feat, c3_), g);
}

// ---------------------------------------------------------------- components

template <typename S>
std::vector<S> Model<S>::cnn_encode(const S* frame) const {
  CnnCache<S> c;
  c.input.assign(frame, frame + 2 * config_.subcarriers * config_.codewords);
  cnn_forward(1, c);
  Mat<S> z = linear<S>(c.gap, p(fc_), config_.cnn_feat_dim);
  return std::vector<S>(z.data(), z.data() + z.size());
}

template <typename S>
void Model<S>::se_recalibrate(const S* fmap, S* out) const {
  const int hw = config_.subcarriers * config_.codewords;
  if (!config_.use_se) {
    std::copy_n(fmap, static_cast<std::size_t>(c3_) * hw, out);
    return;
  }
  SeCache<S> cache;
  se_forward(1, c3_, hw, fmap, p(*sew1_), p(*sew2_), se_hidden_, out, cache);
}

template <typename S>
std::vector<S> Model<S>::context_encode(int scene, double speed_norm) const {
  if (!ctx_) return {};
  std::vector<S> out(config_.ctx_dim);
  CMatMap<S> Wc(p(*ctx_), config_.ctx_dim, 2);
  for (int i = 0; i < config_.ctx_dim; ++i) out[i] = Wc(i, 0) * S(scene) + Wc(i, 1) * S(speed_norm);
  return out;
}

template <typename S>
std::vector<S> Model<S>::gate_forward(int scene, double speed_norm) const {
  const int E = config_.n_experts, gh = config_.gate_hidden;
  if (!config_.has_gate()) return std::vector<S>(E, S(1) / S(E));
  CMatMap<S> W1(p(*gw1_), gh, 2);
  CMatMap<S> W2(p(*gw2_), E, gh);
  std::vector<S> hid(gh);
  for (int i = 0; i < gh; ++i) {
    S a = W1(i, 0) * S(scene) + W1(i, 1) * S(speed_norm) + (gb1_ ? p(*gb1_)[i] : S(0));
    hid[i] = a > S(0) ? a : S(0);
  }
  std::vector<S> w(E, S(0));
  for (int e = 0; e < E; ++e)
    for (int i = 0; i < gh; ++i) w[e] += W2(e, i) * hid[i];
  softmax_inplace(w.data(), E);
  return w;
}

template <typename S>
Mat<S> Model<S>::embed_sequence(const Mat<S>& cnn_feats, const std::vector<S>& ctx) const {
  const int T = static_cast<int>(cnn_feats.rows());
  if (T > config_.max_positions)
    throw ConfigError("sequence length " + std::to_string(T) + " exceeds positional table");
  const int feat = config_.cnn_feat_dim;
  Mat<S> in(T, config_.proj_in_dim());
  in.leftCols(feat) = cnn_feats;
  if (config_.use_context)
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < config_.ctx_dim; ++i) in(t, feat + i) = ctx[i];
  Mat<S> h = linear<S>(in, p(*proj_), config_.d_model);
  h += CMatMap<S>(p(*pos_), config_.max_positions, config_.d_model).topRows(T);
  return h;
}

template <typename S>
Mat<S> Model<S>::expert_forward(const Mat<S>& h, int layer, int expert) const {
  const auto& li = layers_.at(layer);
  if (expert < 0 || expert >= static_cast<int>(li.ffn.size()))
    throw ConfigError("expert index " + std::to_string(expert) + " out of range");
  ExpertCache<S> ec;
  ec.x = h;
  expert_apply(li.ffn[expert], ec);
  return ec.y;
}

template <typename S>
Mat<S> Model<S>::moe_ffn(const Mat<S>& h_seq, int layer, const RoutingDirective& dir) const {
  const auto& li = layers_.at(layer);
  if (!li.moe) return expert_forward(h_seq, layer, 0);
  dir.validate(config_.n_experts);
  if (dir.mode != RoutingMode::SoftDense) return expert_forward(h_seq, layer, dir.selected_expert());
  Mat<S> out = Mat<S>::Zero(h_seq.rows(), config_.d_model);
  for (int e = 0; e < config_.n_experts; ++e)
    out += S((*dir.soft_weights)[e]) * expert_forward(h_seq, layer, e);
  return out;
}

template <typename S>
Mat<S> Model<S>::transformer_forward(const Mat<S>& h0, const RoutingDirective& dir) const {
  const int T = static_cast<int>(h0.rows());
  ForwardCache<S> fc;
  fc.batch = 1;
  fc.slots = T;
  fc.mode = dir.mode;
  fc.inputs.resize(1);
  const int E = config_.n_experts;
  fc.route_weights = Mat<S>::Zero(1, E);
  fc.selected.assign(1, -1);
  if (!config_.moe_layers.empty()) {
    dir.validate(E);
    if (dir.soft_weights)
      for (int e = 0; e < E; ++e) fc.route_weights(0, e) = S((*dir.soft_weights)[e]);
    if (dir.mode != RoutingMode::SoftDense) fc.selected[0] = dir.selected_expert();
  }
  Mat<S> h = h0;
  LayerCache<S> lc;
  for (int l = 0; l < config_.n_layers; ++l) {
    block_forward(l, 1, T, h, fc, lc);
    h = lc.h_out;
  }
  return h;
}

template <typename S>
std::vector<S> Model<S>::classify(const Mat<S>& h_seq) const {
  Mat<S> last = h_seq.bottomRows(1);
  Mat<S> z = linear<S>(last, p(cls_), config_.num_classes);
  return std::vector<S>(z.data(), z.data() + z.size());
}

// ---------------------------------------------------------------- helpers

template <typename S>
ForwardTrace make_trace(const ForwardCache<S>& fc) {
  ForwardTrace tr;
  const int B = fc.batch;
  for (int b = 0; b < B; ++b) {
    std::vector<double> z(fc.logits.cols());
    for (Eigen::Index c = 0; c < fc.logits.cols(); ++c) z[c] = double(fc.logits(b, c));
    tr.predictions.push_back(argmax_first(z.data(), static_cast<int>(z.size())));
    tr.logits.push_back(std::move(z));
    std::vector<double> w;
    if (fc.gate_weights.size())
      for (Eigen::Index e = 0; e < fc.gate_weights.cols(); ++e) w.push_back(double(fc.gate_weights(b, e)));
    tr.gate_weights.push_back(std::move(w));
  }
  tr.selected_expert = fc.selected;
  tr.experts_evaluated = fc.experts_evaluated;
  return tr;
}

template <typename S>
double cross_entropy(const Mat<S>& logits, std::span<const int> targets, Mat<S>* dlogits) {
  const Eigen::Index B = logits.rows(), C = logits.cols();
  if (dlogits) dlogits->resize(B, C);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const int t = targets[b];
    if (t < 0 || t >= C) throw ConfigError("target class out of range");
    const S mx = logits.row(b).maxCoeff();
    S sum = 0;
    for (Eigen::Index c = 0; c < C; ++c) sum += std::exp(logits(b, c) - mx);
    const S lse = mx + std::log(sum);
    loss += double(lse - logits(b, t));
    if (dlogits) {
      for (Eigen::Index c = 0; c < C; ++c)
        (*dlogits)(b, c) = std::exp(logits(b, c) - lse) / S(B);
      (*dlogits)(b, t) -= S(1) / S(B);
    }
  }
  return loss / double(B);
}

template class Model<float>;
template class Model<double>;
template ForwardTrace make_trace<float>(const ForwardCache<float>&);
template ForwardTrace make_trace<double>(const ForwardCache<double>&);
template double cross_entropy<float>(const Mat<float>&, std::span<const int>, Mat<float>*);
template double cross_entropy<double>(const Mat<double>&, std::span<const int>, Mat<double>*);

}  // namespace beamcast
