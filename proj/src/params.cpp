#include "beamcast/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "beamcast/common.hpp"

namespace beamcast {

std::size_t TensorSpec::numel() const {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::vector<TensorSpec> parameter_layout(const ModelConfig& c) {
  std::vector<TensorSpec> out;
  auto add = [&](std::string name, std::vector<int> shape) {
    out.push_back({std::move(name), std::move(shape)});
  };
  const int c1 = c.cnn_channels[0], c2 = c.cnn_channels[1], c3 = c.cnn_channels[2];
  add("cnn.conv1.weight", {c1, 2, 1, 5});
  add("cnn.conv1.bias", {c1});
  add("cnn.conv2.weight", {c2, c1, 5, 1});
  add("cnn.conv2.bias", {c2});
  add("cnn.conv3.weight", {c3, c2, 3, 3});
  add("cnn.conv3.bias", {c3});
  if (c.use_se) {
    add("cnn.se.w1", {c.se_hidden(), c3});
    add("cnn.se.w2", {c3, c.se_hidden()});
  }
  add("cnn.fc.weight", {c.cnn_feat_dim, c3});
  if (c.arch == Architecture::FrameCnn) {
    add("cls.weight", {c.num_classes, c.cnn_feat_dim});
    return out;
  }

  const int d = c.d_model, f = c.ffn_dim();
  if (c.use_context) add("ctx.weight", {c.ctx_dim, 2});
  add("proj.weight", {d, c.proj_in_dim()});
  add("pos.weight", {c.max_positions, d});
  if (c.has_gate()) {
    add("gate.w1", {c.gate_hidden, 2});
    if (c.gate_bias) add("gate.b1", {c.gate_hidden});
    add("gate.w2", {c.n_experts, c.gate_hidden});
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    add(p + "ln1.gamma", {d});
    add(p + "ln1.beta", {d});
    for (const char* w : {"q", "k", "v", "o"}) {
      add(p + "attn.w" + w, {d, d});
      add(p + "attn.b" + w, {d});
    }
    add(p + "ln2.gamma", {d});
    add(p + "ln2.beta", {d});
    auto ffn = [&](const std::string& q) {
      add(q + "w1", {f, d});
      add(q + "b1", {f});
      add(q + "w2", {d, f});
      add(q + "b2", {d});
    };
    if (c.is_moe_layer(l)) {
      for (int e = 0; e < c.n_experts; ++e) ffn(p + "expert." + std::to_string(e) + ".");
    } else {
      ffn(p + "ffn.");
    }
  }
  add("cls.weight", {c.num_classes, d});
  return out;
}

std::string tensor_role(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (starts("cnn.se.")) return "squeeze-excitation";
  if (starts("cnn.fc.")) return "cnn projection";
  if (starts("cnn.")) return "convolution";
  if (starts("ctx.")) return "context encoder";
  if (starts("proj.")) return "feature projection";
  if (starts("pos.")) return "positional embedding";
  if (starts("gate.")) return "gating network";
  if (starts("cls.")) return "classifier";
  if (name.find(".attn.") != std::string::npos) return "attention";
  if (name.find(".ln") != std::string::npos) return "layer norm";
  if (name.find(".expert.") != std::string::npos) return "expert";
  if (name.find(".ffn.") != std::string::npos) return "feed-forward";
  return "tensor";
}

template <typename S>
ParamSet<S>::ParamSet(const std::vector<TensorSpec>& layout) {
  tensors_.reserve(layout.size());
  for (const auto& spec : layout) {
    index_[spec.name] = tensors_.size();
    tensors_.push_back({spec.name, spec.shape, std::vector<S>(spec.numel(), S(0))});
  }
  touched_.assign(tensors_.size(), false);
}

template <typename S>
std::optional<std::size_t> ParamSet<S>::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

template <typename S>
std::size_t ParamSet<S>::index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("no parameter tensor named '" + name + "'");
  return it->second;
}

template <typename S>
std::size_t ParamSet<S>::total_numel() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

template <typename S>
void ParamSet<S>::set_zero() {
  for (auto& t : tensors_) std::fill(t.data.begin(), t.data.end(), S(0));
  clear_touched();
}

template <typename S>
bool ParamSet<S>::all_finite() const {
  for (const auto& t : tensors_)
    for (S v : t.data)
      if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <typename S>
void ParamSet<S>::clear_touched() {
  std::fill(touched_.begin(), touched_.end(), false);
}

template <typename S>
template <typename T>
ParamSet<T> ParamSet<S>::cast() const {
  ParamSet<T> out;
  out.tensors_.reserve(tensors_.size());
  for (const auto& t : tensors_)
    out.tensors_.push_back({t.name, t.shape, std::vector<T>(t.data.begin(), t.data.end())});
  out.touched_ = touched_;
  out.index_ = index_;
  return out;
}

template class ParamSet<float>;
template class ParamSet<double>;
template ParamSet<double> ParamSet<float>::cast<double>() const;
template ParamSet<float> ParamSet<double>::cast<float>() const;
template ParamSet<float> ParamSet<float>::cast<float>() const;
template ParamSet<double> ParamSet<double>::cast<double>() const;

namespace {

double init_std(const TensorSpec& spec) {
  const std::string& n = spec.name;
  auto fan_in = [&] {
    std::size_t f = 1;
    for (std::size_t i = 1; i < spec.shape.size(); ++i) f *= static_cast<std::size_t>(spec.shape[i]);
    return static_cast<double>(f);
  };
  if (n.rfind("cnn.conv", 0) == 0) return std::sqrt(2.0 / fan_in());
  if (n.rfind("cnn.", 0) == 0 || n.rfind("ctx.", 0) == 0 || n.rfind("proj.", 0) == 0)
    return 1.0 / std::sqrt(fan_in());
  return 0.02;
}

bool is_bias(const std::string& n) {
  const auto dot = n.rfind('.');
  const std::string leaf = n.substr(dot + 1);
  return leaf == "bias" || leaf == "beta" || (leaf.size() == 2 && leaf[0] == 'b');
}

}  // namespace

template <typename S>
ParamSet<S> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const auto layout = parameter_layout(config);
  ParamSet<S> params(layout);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& spec = layout[i];
    auto& t = params[i];
    const std::string leaf = spec.name.substr(spec.name.rfind('.') + 1);
    if (leaf == "gamma") {
      std::fill(t.data.begin(), t.data.end(), S(1));
      continue;
    }
    if (is_bias(spec.name)) continue;
    Rng rng(derive_seed(seed, i));
    std::normal_distribution<double> normal(0.0, init_std(spec));
    // Draw in float so float and double models initialize identically.
    for (auto& v : t.data) v = static_cast<S>(static_cast<float>(normal(rng)));
  }
  return params;
}

template ParamSet<float> init_params<float>(const ModelConfig&, std::uint64_t);
template ParamSet<double> init_params<double>(const ModelConfig&, std::uint64_t);

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("weight file truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw FormatError("weight file truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

}  // namespace

void save_params(const ParamSet<float>& params, const ModelConfig& config,
                 const std::filesystem::path& path, const std::optional<StageMetadata>& stage) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw MissingArtifactError("cannot open weight file for writing: " + path.string());
  os.write(kWeightsMagic, 8);
  put_u32(os, kWeightsVersion);
  put_u64(os, config.fingerprint());
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& t : params) {
    put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (float v : t.data) put_u32(os, std::bit_cast<std::uint32_t>(v));
  }
  if (stage) {
    os.write(kStageMagic, 8);
    put_u32(os, stage->stage_id);
    put_u32(os, stage->epoch);
    put_u64(os, std::bit_cast<std::uint64_t>(stage->val_metric));
  }
  if (!os) throw MissingArtifactError("failed writing weight file: " + path.string());
}

WeightFile read_weight_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("checkpoint not found: " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kWeightsMagic, 8) != 0)
    throw FormatError("bad weight-file magic in " + path.string());
  const auto version = get_u32(is);
  if (version != kWeightsVersion)
    throw FormatError("unsupported weight-file version " + std::to_string(version));
  WeightFile wf;
  wf.fingerprint = get_u64(is);
  const auto count = get_u32(is);
  std::vector<TensorSpec> layout;
  std::vector<std::vector<float>> data;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorSpec spec;
    spec.name.resize(get_u32(is));
    if (!is.read(spec.name.data(), static_cast<std::streamsize>(spec.name.size())))
      throw FormatError("weight file truncated in tensor name");
    const auto rank = get_u32(is);
    if (rank > 8) throw FormatError("implausible tensor rank in weight file");
    for (std::uint32_t r = 0; r < rank; ++r) spec.shape.push_back(static_cast<int>(get_u32(is)));
    std::vector<float> values(spec.numel());
    for (auto& v : values) v = std::bit_cast<float>(get_u32(is));
    layout.push_back(std::move(spec));
    data.push_back(std::move(values));
  }
  wf.params = ParamSet<float>(layout);
  for (std::size_t i = 0; i < layout.size(); ++i) wf.params[i].data = std::move(data[i]);

  char trailer[8];
  if (is.read(trailer, 8)) {
    if (std::memcmp(trailer, kStageMagic, 8) != 0) throw FormatError("unknown weight-file trailer");
    StageMetadata meta;
    meta.stage_id = get_u32(is);
    meta.epoch = get_u32(is);
    meta.val_metric = std::bit_cast<double>(get_u64(is));
    wf.stage = meta;
  }
  return wf;
}

ParamSet<float> load_params(const std::filesystem::path& path, const ModelConfig& config,
                            std::optional<StageMetadata>* stage) {
  WeightFile wf = read_weight_file(path);
  const auto layout = parameter_layout(config);
  for (const auto& spec : layout) {
    const auto idx = wf.params.find(spec.name);
    if (!idx)
      throw ConfigError("weight file " + path.string() + " lacks tensor '" + spec.name + "' (" +
                        tensor_role(spec.name) + ")");
    const auto& t = wf.params[*idx];
    if (t.shape != spec.shape)
      throw ConfigError(tensor_role(spec.name) + " shape mismatch for tensor '" + spec.name +
                        "': file " + shape_str(t.shape) + " vs config " + shape_str(spec.shape));
  }
  if (wf.params.size() != layout.size())
    throw ConfigError("weight file has " + std::to_string(wf.params.size()) +
                      " tensors, configuration expects " + std::to_string(layout.size()));
  ParamSet<float> out(layout);
  for (std::size_t i = 0; i < layout.size(); ++i) out[i].data = wf.params.get(layout[i].name).data;
  if (stage) *stage = wf.stage;
  return out;
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape == b.shape && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace beamcast
