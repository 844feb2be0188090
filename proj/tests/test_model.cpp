#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "beamcast/model.hpp"
#include "beamcast/params.hpp"
#include "reference_model.hpp"
#include "test_helpers.hpp"

using namespace beamcast;
using namespace testutil;

namespace {

std::vector<double> widen(const float* x, std::size_t n) { return std::vector<double>(x, x + n); }

double max_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0, s = 1e-12;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
    s = std::max(s, std::abs(b[i]));
  }
  return m / s;
}

void check_against_reference(const ModelConfig& c, std::uint64_t seed) {
  const auto P = random_params<double>(c, seed, 0.2);
  const int B = 3;
  const auto x = random_frames(c, B, seed + 1);
  const auto in = make_inputs(c, x, B, seed + 2);
  const std::size_t per = static_cast<std::size_t>(c.slots) * 2 * c.subcarriers * c.codewords;
  Model<double> m(c, P);
  for (auto mode : {RoutingMode::SoftDense, RoutingMode::Top1, RoutingMode::HardMask}) {
    ForwardOptions<double> opt;
    opt.mode = mode;
    const auto fc = m.forward(in, opt);
    for (int b = 0; b < B; ++b) {
      const auto xd = widen(in[b].x, per);
      ref::Routing r;
      r.mode = mode;
      const auto out = ref::forward(c, P, xd.data(), in[b].scene, in[b].speed_norm, r);
      std::vector<double> got(fc.logits.row(b).data(), fc.logits.row(b).data() + c.num_classes);
      CHECK(max_rel(got, out.logits) < 1e-10);
    }
  }
}

}  // namespace

TEST_CASE("forward pass equals the scalar reference") {
  const auto c = tiny_config();
  for (std::uint64_t s = 1; s <= 3; ++s) check_against_reference(c, s);
}

TEST_CASE("variants equal the scalar reference") {
  auto c = tiny_config();
  SUBCASE("no SE") { c.use_se = false; }
  SUBCASE("no context") { c.use_context = false; }
  SUBCASE("dense only") { c.moe_layers.clear(); }
  SUBCASE("all MoE, no gate bias") {
    c.moe_layers = {0, 1};
    c.gate_bias = false;
  }
  SUBCASE("frame cnn") {
    c.arch = Architecture::FrameCnn;
    c.moe_layers.clear();
  }
  SUBCASE("odd frame") {
    c.subcarriers = 7;
    c.codewords = 5;
  }
  c.validate();
  check_against_reference(c, 11);
}

TEST_CASE("float and double forwards agree") {
  const auto c = tiny_config();
  const auto Pd = random_params<double>(c, 5, 0.2);
  const auto Pf = Pd.cast<float>();
  const auto x = random_frames(c, 4, 6);
  const auto in = make_inputs(c, x, 4, 7);
  ForwardOptions<double> od;
  ForwardOptions<float> of;
  const auto a = Model<double>(c, Pd).forward(in, od);
  const auto b = Model<float>(c, Pf).forward(in, of);
  for (int i = 0; i < a.logits.size(); ++i)
    CHECK(std::abs(a.logits(i) - b.logits(i)) < 1e-4 * (1 + std::abs(a.logits(i))));
}

TEST_CASE("cnn_encode: zero frame gives zero output; output length is feat dim") {
  auto c = tiny_config();
  auto P = random_params<double>(c, 2);
  for (auto n : {"cnn.conv1.bias", "cnn.conv2.bias", "cnn.conv3.bias"})
    for (auto& v : P.get(n).data) v = 0;
  Model<double> m(c, P);
  std::vector<double> zero(2 * c.subcarriers * c.codewords, 0.0);
  for (double v : m.cnn_encode(zero.data())) CHECK(v == 0.0);

  for (auto [K, S] : std::vector<std::pair<int, int>>{{2, 2}, {9, 3}, {16, 32}}) {
    auto c2 = c;
    c2.subcarriers = K;
    c2.codewords = S;
    const auto P2 = random_params<double>(c2, 3);
    std::vector<double> f(2 * K * S, 0.5);
    CHECK(Model<double>(c2, P2).cnn_encode(f.data()).size() == static_cast<std::size_t>(c.cnn_feat_dim));
  }
}

TEST_CASE("cnn_encode matches nested-loop convolution reference") {
  auto c = tiny_config();
  c.subcarriers = 8;
  c.codewords = 6;
  const auto P = random_params<double>(c, 9, 0.3);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd(0, 1);
  std::vector<double> f(2 * 8 * 6);
  for (auto& v : f) v = nd(rng);
  const auto got = Model<double>(c, P).cnn_encode(f.data());
  const auto want = ref::cnn(c, P, f.data());
  CHECK(max_rel(got, want) < 1e-5);
}

TEST_CASE("SE recalibration") {
  auto c = tiny_config();
  auto P = random_params<double>(c, 1);
  const int n = c.cnn_channels[2] * c.subcarriers * c.codewords;
  std::vector<double> fmap(n), out(n);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0, 1);
  for (auto& v : fmap) v = nd(rng);

  SUBCASE("zero weights halve the map") {
    for (auto nm : {"cnn.se.w1", "cnn.se.w2"})
      for (auto& v : P.get(nm).data) v = 0;
    Model<double>(c, P).se_recalibrate(fmap.data(), out.data());
    for (int i = 0; i < n; ++i) CHECK(out[i] == doctest::Approx(fmap[i] / 2).epsilon(1e-15));
  }
  SUBCASE("zero map stays zero") {
    std::vector<double> z(n, 0.0);
    Model<double>(c, P).se_recalibrate(z.data(), out.data());
    for (double v : out) CHECK(v == 0.0);
  }
  SUBCASE("random case matches the direct formula") {
    Model<double>(c, P).se_recalibrate(fmap.data(), out.data());
    ref::Fmap f{c.cnn_channels[2], c.subcarriers, c.codewords, fmap};
    const auto want = ref::se(f, P.get("cnn.se.w1").data, P.get("cnn.se.w2").data, c.se_hidden());
    for (int i = 0; i < n; ++i) CHECK(std::abs(out[i] - want.v[i]) < 1e-6);
  }
}

TEST_CASE("context encoder is linear without bias") {
  const auto c = tiny_config();
  const auto P = random_params<double>(c, 3);
  Model<double> m(c, P);
  const auto& W = P.get("ctx.weight").data;
  for (double v : m.context_encode(0, 0.0)) CHECK(v == 0.0);
  const auto e1 = m.context_encode(1, 0.0);
  const auto mix = m.context_encode(1, 0.5);
  for (int i = 0; i < c.ctx_dim; ++i) {
    CHECK(e1[i] == W[i * 2]);
    CHECK(mix[i] == doctest::Approx(W[i * 2] + 0.5 * W[i * 2 + 1]).epsilon(1e-15));
  }
}

TEST_CASE("gate: zero weights are uniform, large logits saturate") {
  const auto c = tiny_config();
  auto P = random_params<double>(c, 3);
  for (auto nm : {"gate.w1", "gate.b1", "gate.w2"})
    for (auto& v : P.get(nm).data) v = 0;
  for (double w : Model<double>(c, P).gate_forward(1, 0.3)) CHECK(w == doctest::Approx(0.25));

  // hidden unit 0 = 1 via the bias, w2 maps it to logit 20 on expert 0
  P.get("gate.b1").data[0] = 1.0;
  P.get("gate.w2").data[0] = 20.0;
  const auto w = Model<double>(c, P).gate_forward(0, 0.0);
  CHECK(w[0] > 0.9999);
  double s = 0;
  for (double v : w) s += v;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("parameter census matches the layout") {
  auto c = tiny_config();
  auto check = [](const ModelConfig& cfg) {
    const ParamSet<float> p(parameter_layout(cfg));
    CHECK(parameter_count(cfg) == p.total_numel());
  };
  check(c);
  auto big = ModelConfig::full_scale();
  big.num_classes = 32;
  check(big);
  ModelConfig desk;
  desk.subcarriers = 16;
  desk.num_classes = 30;
  check(desk);

  auto no_se = c;
  no_se.use_se = false;
  check(no_se);
  const int c3 = c.cnn_channels[2];
  CHECK(parameter_count(c) - parameter_count(no_se) ==
        static_cast<std::size_t>(2 * c3 * (c3 / c.se_reduction)));

  auto no_ctx = c;
  no_ctx.use_context = false;
  check(no_ctx);
  CHECK(no_ctx.proj_in_dim() == c.cnn_feat_dim);
  const ParamSet<float> p(parameter_layout(no_ctx));
  CHECK(p.get("proj.weight").shape == std::vector<int>{c.d_model, c.cnn_feat_dim});
  CHECK_FALSE(p.find("gate.w1").has_value());

  auto frame = c;
  frame.arch = Architecture::FrameCnn;
  check(frame);
}

TEST_CASE("config validation") {
  auto c = tiny_config();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.moe_layers = {2};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.cnn_channels = {2, 3, 1};
  c.se_reduction = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.subcarriers = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.slots = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("routing directive validation") {
  RoutingDirective d;
  d.mode = RoutingMode::HardMask;
  CHECK_THROWS_AS(d.validate(4), ConfigError);
  d.hard_mask = 4;
  CHECK_THROWS_AS(d.validate(4), ConfigError);
  d.hard_mask = 2;
  CHECK_NOTHROW(d.validate(4));
  RoutingDirective s;
  s.mode = RoutingMode::SoftDense;
  CHECK_THROWS_AS(s.validate(4), ConfigError);
  s.soft_weights = std::vector<double>{0.5, 0.5, 0.1, 0.0};
  CHECK_THROWS_AS(s.validate(4), ConfigError);
  s.soft_weights = std::vector<double>{0.5, 0.5, 0.0, 0.0};
  CHECK_NOTHROW(s.validate(4));
  RoutingDirective t;
  t.mode = RoutingMode::Top1;
  t.soft_weights = std::vector<double>{0.3, 0.3, 0.2, 0.2};
  CHECK(t.selected_expert() == 0);
}

TEST_CASE("Top1 equals SoftDense with one-hot weights") {
  const auto c = tiny_config();
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto P = random_params<float>(c, s);
    const auto x = random_frames(c, 2, s + 100);
    const auto in = make_inputs(c, x, 2, s + 200);
    Model<float> m(c, P);
    ForwardOptions<float> top;
    top.mode = RoutingMode::Top1;
    const auto a = m.forward(in, top);
    ForwardOptions<float> soft;
    soft.mode = RoutingMode::SoftDense;
    for (int b = 0; b < 2; ++b) {
      std::vector<double> oh(4, 0.0);
      oh[a.selected[b]] = 1.0;
      soft.weights.push_back(oh);
    }
    const auto d = m.forward(in, soft);
    CHECK((a.logits - d.logits).cwiseAbs().maxCoeff() <= 1e-6f);
  }
}

TEST_CASE("expert evaluation counters") {
  auto c = tiny_config();
  c.moe_layers = {0, 1};
  const auto P = random_params<float>(c, 4);
  const auto x = random_frames(c, 5, 1);
  const auto in = make_inputs(c, x, 5, 2);
  Model<float> m(c, P);
  for (auto [mode, n] : std::vector<std::pair<RoutingMode, int>>{
           {RoutingMode::Top1, 1}, {RoutingMode::HardMask, 1}, {RoutingMode::SoftDense, 4}}) {
    ForwardOptions<float> o;
    o.mode = mode;
    const auto tr = make_trace(m.forward(in, o));
    REQUIRE(tr.experts_evaluated.size() == 5);
    for (const auto& per : tr.experts_evaluated) {
      REQUIRE(per.size() == 2);
      for (int v : per) CHECK(v == n);
    }
  }
}

TEST_CASE("hard mask follows the quadrant or an explicit mask") {
  const auto c = tiny_config();
  const auto P = random_params<float>(c, 4);
  const auto x = random_frames(c, 4, 1);
  auto in = make_inputs(c, x, 4, 2);
  in[0].scene = 0; in[0].speed_norm = 0.1;
  in[1].scene = 0; in[1].speed_norm = 0.9;
  in[2].scene = 1; in[2].speed_norm = 0.2;
  in[3].scene = 1; in[3].speed_norm = 0.5;
  Model<float> m(c, P);
  ForwardOptions<float> o;
  o.mode = RoutingMode::HardMask;
  CHECK(m.forward(in, o).selected == std::vector<int>{0, 1, 2, 3});
  o.hard_masks = {3, 3, 0, 1};
  CHECK(m.forward(in, o).selected == std::vector<int>{3, 3, 0, 1});
}

TEST_CASE("causal: future frames do not affect earlier positions") {
  const auto c = tiny_config();
  const auto P = random_params<double>(c, 8);
  auto x = random_frames(c, 1, 3);
  const auto in = make_inputs(c, x, 1, 4);
  Model<double> m(c, P);
  ForwardOptions<double> o;
  o.mode = RoutingMode::SoftDense;
  const auto base = m.forward(in, o).layers.back().h_out;
  const std::size_t frame = 2ull * c.subcarriers * c.codewords;
  for (std::size_t i = 2 * frame; i < 3 * frame; ++i) x[i] += 3.0f;
  const auto pert = m.forward(in, o).layers.back().h_out;
  CHECK((base.topRows(2) - pert.topRows(2)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((base.row(2) - pert.row(2)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("unselected experts receive no gradient") {
  const auto c = tiny_config();
  const auto P = random_params<double>(c, 6);
  const auto x = random_frames(c, 2, 5);
  auto in = make_inputs(c, x, 2, 6);
  in[0].scene = 0; in[0].speed_norm = 0.1;
  in[1].scene = 1; in[1].speed_norm = 0.9;
  Model<double> m(c, P);
  ForwardOptions<double> o;
  o.mode = RoutingMode::HardMask;
  o.training = true;
  const auto fc = m.forward(in, o);
  Mat<double> dl;
  std::vector<int> t{1, 2};
  cross_entropy(fc.logits, t, &dl);
  ParamSet<double> g(parameter_layout(c));
  m.backward(fc, dl, g);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& name = g[i].name;
    if (name.find(".expert.") == std::string::npos) continue;
    const bool used = name.find(".expert.0.") != std::string::npos ||
                      name.find(".expert.3.") != std::string::npos;
    CHECK(g.touched(i) == used);
    if (!used)
      for (double v : g[i].data) CHECK(v == 0.0);
  }
  // the gate is not live under HardMask
  CHECK_FALSE(g.touched(g.index("gate.w1")));
}

TEST_CASE("finite differences agree with the backward pass") {
  const auto c = tiny_config();
  // at a tiny step the piecewise-linear kinks (ReLU, max-pool) are not crossed;
  // the floor keeps cancellation noise on near-zero gradients from dominating
  for (std::uint64_t s : {1u, 2u, 3u}) {
    auto P = random_params<double>(c, s, 0.1);
    const auto x = random_frames(c, 2, s + 50);
    const auto in = make_inputs(c, x, 2, s + 60);
    for (auto mode : {RoutingMode::SoftDense, RoutingMode::Top1, RoutingMode::HardMask})
      CHECK(finite_difference_error(c, P, in, {1, 3}, mode, 1e-6, true, 1e-3) < 1e-5);
  }
}

TEST_CASE("dropout is deterministic per sample and off at evaluation") {
  auto c = tiny_config();
  c.dropout_expert = 0.3;
  c.dropout_head = 0.3;
  const auto P = random_params<float>(c, 2);
  const auto x = random_frames(c, 3, 1);
  const auto in = make_inputs(c, x, 3, 9);
  Model<float> m(c, P);
  ForwardOptions<float> tr;
  tr.mode = RoutingMode::SoftDense;
  tr.training = true;
  const auto a = m.forward(in, tr).logits;
  const auto b = m.forward(in, tr).logits;
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0f);
  // the same sample alone sees the same masks
  const std::vector<SampleInput> solo{in[1]};
  const auto s = m.forward(solo, tr).logits;
  CHECK((a.row(1) - s.row(0)).cwiseAbs().maxCoeff() < 1e-6f);
  ForwardOptions<float> ev;
  ev.mode = RoutingMode::SoftDense;
  const auto e = m.forward(in, ev).logits;
  CHECK((a - e).cwiseAbs().maxCoeff() > 1e-6f);
  // a different dropout seed gives different masks
  auto in2 = in;
  in2[0].seed += 1;
  CHECK((m.forward(in2, tr).logits.row(0) - a.row(0)).cwiseAbs().maxCoeff() > 1e-6f);
}

TEST_CASE("cross entropy matches the scalar formula") {
  Mat<double> z(2, 3);
  z << 1.0, 2.0, 0.5, -1.0, 0.0, 3.0;
  std::vector<int> t{1, 0};
  Mat<double> d;
  const double l = cross_entropy(z, t, &d);
  auto lse = [](double a, double b, double c) { return std::log(std::exp(a) + std::exp(b) + std::exp(c)); };
  const double want = 0.5 * ((lse(1, 2, 0.5) - 2.0) + (lse(-1, 0, 3) + 1.0));
  CHECK(l == doctest::Approx(want).epsilon(1e-14));
  const double p01 = std::exp(2.0 - lse(1, 2, 0.5));
  CHECK(d(0, 1) == doctest::Approx((p01 - 1) / 2).epsilon(1e-14));
}

TEST_CASE("weight file round trip, trailer and mismatch errors") {
  const auto c = tiny_config();
  const auto P = random_params<float>(c, 12);
  const auto dir = std::filesystem::temp_directory_path() / "beamcast_model_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "w.bin";
  save_params(P, c, path);
  auto back = load_params(path, c);
  for (std::size_t i = 0; i < P.size(); ++i) CHECK(bitwise_equal(P[i], back[i]));
  const auto wf = read_weight_file(path);
  CHECK(wf.fingerprint == c.fingerprint());
  CHECK_FALSE(wf.stage.has_value());

  save_params(P, c, path, StageMetadata{2, 7, 0.625});
  std::optional<StageMetadata> st;
  back = load_params(path, c, &st);
  REQUIRE(st.has_value());
  CHECK(st->stage_id == 2);
  CHECK(st->epoch == 7);
  CHECK(st->val_metric == 0.625);

  auto other = c;
  other.cnn_feat_dim = 6;
  try {
    load_params(path, other);
    FAIL("expected a shape mismatch");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("cnn.fc.weight") != std::string::npos);
    CHECK(msg.find("cnn projection") != std::string::npos);
  }
  auto more = c;
  more.moe_layers = {0, 1};
  CHECK_THROWS_AS(load_params(path, more), ConfigError);
  CHECK_THROWS_AS(load_params(dir / "missing.bin", c), MissingArtifactError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("initialization is deterministic") {
  const auto c = tiny_config();
  const auto a = init_params<float>(c, 3);
  const auto b = init_params<float>(c, 3);
  const auto d = init_params<float>(c, 4);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(bitwise_equal(a[i], b[i]));
    differs = differs || !bitwise_equal(a[i], d[i]);
  }
  CHECK(differs);
  for (double v : a.get("blocks.0.ln1.gamma").data) CHECK(v == 1.0);
  for (double v : a.get("cnn.conv1.bias").data) CHECK(v == 0.0);
}
