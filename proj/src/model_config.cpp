#include "beamcast/model_config.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "beamcast/common.hpp"

namespace beamcast {

std::string to_string(RoutingMode mode) {
  switch (mode) {
    case RoutingMode::HardMask: return "hard_mask";
    case RoutingMode::SoftDense: return "soft_dense";
    case RoutingMode::Top1: return "top1";
  }
  return "unknown";
}

RoutingMode parse_routing_mode(const std::string& text) {
  if (text == "hard_mask" || text == "HardMask") return RoutingMode::HardMask;
  if (text == "soft_dense" || text == "SoftDense") return RoutingMode::SoftDense;
  if (text == "top1" || text == "Top1") return RoutingMode::Top1;
  throw ConfigError("unknown routing mode '" + text + "' (expected hard_mask|soft_dense|top1)");
}

std::string to_string(Architecture arch) {
  return arch == Architecture::MoEformer ? "moeformer" : "frame_cnn";
}

Architecture parse_architecture(const std::string& text) {
  if (text == "moeformer") return Architecture::MoEformer;
  if (text == "frame_cnn") return Architecture::FrameCnn;
  throw ConfigError("unknown architecture '" + text + "' (expected moeformer|frame_cnn)");
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("model: " + msg);
  };
  need(slots >= 1, "slots must be >= 1");
  need(subcarriers >= 2 && codewords >= 2, "frame must be at least 2x2 for 2x2 max pooling");
  for (int c : cnn_channels) need(c >= 1, "cnn channel counts must be >= 1");
  need(cnn_feat_dim >= 1, "cnn_feat_dim must be >= 1");
  need(num_classes >= 1, "num_classes must be >= 1");
  need(dropout_expert >= 0.0 && dropout_expert < 1.0, "dropout_expert must lie in [0, 1)");
  need(dropout_head >= 0.0 && dropout_head < 1.0, "dropout_head must lie in [0, 1)");
  if (use_se) {
    need(se_reduction >= 1, "se_reduction must be >= 1");
    need(se_hidden() >= 1, "SE bottleneck cnn_channels[2]/se_reduction must be >= 1");
  }
  if (arch == Architecture::FrameCnn) return;
  need(!use_context || ctx_dim >= 1, "ctx_dim must be >= 1");
  need(d_model >= 1 && n_heads >= 1 && d_model % n_heads == 0,
       "d_model must be divisible by n_heads");
  need(n_layers >= 1, "n_layers must be >= 1");
  need(slots <= max_positions, "slots (" + std::to_string(slots) +
                                   ") exceed max_positions (" + std::to_string(max_positions) + ")");
  need(ffn_expansion >= 1, "ffn_expansion must be >= 1");
  std::set<int> seen;
  for (int l : moe_layers) {
    need(l >= 0 && l < n_layers, "moe layer index " + std::to_string(l) + " out of range");
    need(seen.insert(l).second, "duplicate moe layer index");
  }
  if (!moe_layers.empty()) need(n_experts >= 1, "n_experts must be >= 1");
  need(gate_hidden >= 1, "gate_hidden must be >= 1");
}

bool ModelConfig::is_moe_layer(int layer) const {
  return std::find(moe_layers.begin(), moe_layers.end(), layer) != moe_layers.end();
}

bool ModelConfig::has_gate() const {
  return arch == Architecture::MoEformer && use_context && !moe_layers.empty();
}

std::string ModelConfig::canonical() const {
  std::vector<int> moe = moe_layers;
  std::sort(moe.begin(), moe.end());
  std::ostringstream os;
  os << "arch=" << to_string(arch) << ";T=" << slots << ";K=" << subcarriers
     << ";S=" << codewords << ";cnn=" << cnn_channels[0] << "," << cnn_channels[1] << ","
     << cnn_channels[2] << ";feat=" << cnn_feat_dim << ";se=" << (use_se ? se_reduction : 0)
     << ";C=" << num_classes;
  if (arch == Architecture::MoEformer) {
    os << ";ctx=" << (use_context ? ctx_dim : 0) << ";d=" << d_model << ";L=" << n_layers
       << ";H=" << n_heads << ";E=" << n_experts << ";moe=";
    for (int l : moe) os << l << ",";
    os << ";ffn=" << ffn_expansion << ";gate=" << gate_hidden << (gate_bias ? "b" : "")
       << ";pos=" << max_positions;
  }
  return os.str();
}

std::uint64_t ModelConfig::fingerprint() const { return fnv1a64(canonical()); }

ModelConfig ModelConfig::full_scale() {
  ModelConfig c;
  c.cnn_feat_dim = 256;
  c.ctx_dim = 32;
  c.d_model = 768;
  c.n_heads = 12;
  return c;
}

std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t c1 = c.cnn_channels[0], c2 = c.cnn_channels[1], c3 = c.cnn_channels[2];
  std::size_t n = c1 * 2 * 5 + c1 + c2 * c1 * 5 + c2 + c3 * c2 * 9 + c3;
  if (c.use_se) n += 2 * c3 * static_cast<std::size_t>(c.se_hidden());
  n += static_cast<std::size_t>(c.cnn_feat_dim) * c3;
  if (c.arch == Architecture::FrameCnn) return n + static_cast<std::size_t>(c.num_classes) * c.cnn_feat_dim;

  const std::size_t d = c.d_model, f = c.ffn_dim(), E = c.n_experts, gh = c.gate_hidden;
  if (c.use_context) n += static_cast<std::size_t>(c.ctx_dim) * 2;
  n += d * c.proj_in_dim();
  n += static_cast<std::size_t>(c.max_positions) * d;
  if (c.has_gate()) n += gh * 2 + (c.gate_bias ? gh : 0) + E * gh;
  const std::size_t ffn = 2 * d * f + f + d;
  for (int l = 0; l < c.n_layers; ++l) {
    n += 4 * d + 4 * d * d + 4 * d;
    n += c.is_moe_layer(l) ? E * ffn : ffn;
  }
  n += static_cast<std::size_t>(c.num_classes) * d;
  return n;
}

void RoutingDirective::validate(int n_experts) const {
  if (mode == RoutingMode::HardMask) {
    if (!hard_mask) throw ConfigError("HardMask routing requires a mask");
    if (*hard_mask < 0 || *hard_mask >= n_experts)
      throw ConfigError("hard mask expert index " + std::to_string(*hard_mask) + " out of range");
    return;
  }
  if (!soft_weights) throw ConfigError(to_string(mode) + " routing requires gate weights");
  if (static_cast<int>(soft_weights->size()) != n_experts)
    throw ConfigError("gate weight vector has wrong length");
  double sum = 0.0;
  for (double w : *soft_weights) {
    if (!(w >= 0.0)) throw ConfigError("gate weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("gate weights must sum to 1");
}

int RoutingDirective::selected_expert() const {
  if (mode == RoutingMode::HardMask) return *hard_mask;
  const auto& w = *soft_weights;
  int best = 0;
  for (int i = 1; i < static_cast<int>(w.size()); ++i)
    if (w[i] > w[best]) best = i;
  return best;
}

}  // namespace beamcast
