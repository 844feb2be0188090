#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace beamcast {

enum class RoutingMode { HardMask, SoftDense, Top1 };

std::string to_string(RoutingMode mode);
RoutingMode parse_routing_mode(const std::string& text);

enum class Architecture {
  MoEformer,  // CNN + context + causal transformer (+ MoE FFNs)
  FrameCnn,   // CNN on the last observed frame only
};

std::string to_string(Architecture arch);
Architecture parse_architecture(const std::string& text);

struct ModelConfig {
  Architecture arch = Architecture::MoEformer;
  int slots = 10;  // T
  int subcarriers = 60;
  int codewords = 32;
  std::array<int, 3> cnn_channels{32, 64, 128};
  int cnn_feat_dim = 64;
  int ctx_dim = 8;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int n_experts = 4;
  std::vector<int> moe_layers{1, 2, 3};
  int ffn_expansion = 4;
  double dropout_expert = 0.1;
  double dropout_head = 0.2;
  int se_reduction = 16;
  int num_classes = 32;
  int gate_hidden = 32;
  bool gate_bias = true;
  bool use_se = true;
  bool use_context = true;
  int max_positions = 16;
  double ln_eps = 1e-5;

  void validate() const;

  bool is_moe_layer(int layer) const;
  bool has_gate() const;
  int se_hidden() const { return cnn_channels[2] / se_reduction; }
  int proj_in_dim() const { return cnn_feat_dim + (use_context ? ctx_dim : 0); }
  int ffn_dim() const { return ffn_expansion * d_model; }

  /// Canonical text of every shape-relevant field; hashed for checkpoints.
  std::string canonical() const;
  std::uint64_t fingerprint() const;

  /// Full-scale widths (d=768, feat=256, ctx=32, 12 heads).
  static ModelConfig full_scale();
};

/// Closed-form learnable-parameter count for a configuration.
std::size_t parameter_count(const ModelConfig& config);

/// Routing decision for one sample.
struct RoutingDirective {
  RoutingMode mode = RoutingMode::Top1;
  std::optional<int> hard_mask;
  std::optional<std::vector<double>> soft_weights;

  void validate(int n_experts) const;
  /// Expert applied under HardMask/Top1 (ties to the smallest index).
  int selected_expert() const;
};

}  // namespace beamcast
