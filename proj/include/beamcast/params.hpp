#pragma once

// Named parameter tensors, initialization and the weight-file format.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "beamcast/model_config.hpp"

namespace beamcast {

inline constexpr char kWeightsMagic[8] = {'B', 'C', 'A', 'S', 'T', 'W', 'T', '1'};
inline constexpr char kStageMagic[8] = {'B', 'C', 'S', 'T', 'A', 'G', 'E', '1'};
inline constexpr std::uint32_t kWeightsVersion = 1;

struct TensorSpec {
  std::string name;
  std::vector<int> shape;

  std::size_t numel() const;
};

/// Ordered tensor layout for a configuration. The order is the file order.
std::vector<TensorSpec> parameter_layout(const ModelConfig& config);

/// Human-readable role of a tensor ("feature projection", "expert", ...).
std::string tensor_role(const std::string& name);

template <typename S>
struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<S> data;

  std::size_t numel() const { return data.size(); }
};

template <typename S>
class ParamSet {
 public:
  ParamSet() = default;
  explicit ParamSet(const std::vector<TensorSpec>& layout);

  std::size_t size() const { return tensors_.size(); }
  Tensor<S>& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor<S>& operator[](std::size_t i) const { return tensors_[i]; }
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t index(const std::string& name) const;
  Tensor<S>& get(const std::string& name) { return tensors_[index(name)]; }
  const Tensor<S>& get(const std::string& name) const { return tensors_[index(name)]; }

  std::size_t total_numel() const;
  void set_zero();
  bool all_finite() const;

  // Gradient bookkeeping: a tensor is "touched" once any contribution was
  // accumulated into it since the last clear.
  bool touched(std::size_t i) const { return touched_[i]; }
  void mark_touched(std::size_t i) { touched_[i] = true; }
  void clear_touched();

  template <typename T>
  ParamSet<T> cast() const;

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

 private:
  std::vector<Tensor<S>> tensors_;
  std::vector<bool> touched_;
  std::unordered_map<std::string, std::size_t> index_;

  template <typename>
  friend class ParamSet;
};

/// Deterministic initialization: N(0, 0.02) for transformer, gate and
/// classifier tensors, He-normal for convolutions, 1/sqrt(fan_in) for the
/// remaining projections, zero biases, unit layer-norm scales.
template <typename S>
ParamSet<S> init_params(const ModelConfig& config, std::uint64_t seed);

struct StageMetadata {
  std::uint32_t stage_id = 0;
  std::uint32_t epoch = 0;
  double val_metric = 0.0;
};

struct WeightFile {
  std::uint64_t fingerprint = 0;
  ParamSet<float> params;
  std::optional<StageMetadata> stage;
};

void save_params(const ParamSet<float>& params, const ModelConfig& config,
                 const std::filesystem::path& path,
                 const std::optional<StageMetadata>& stage = std::nullopt);

/// Reads a weight file without checking it against a configuration.
WeightFile read_weight_file(const std::filesystem::path& path);

/// Loads and checks every tensor name/shape against `config`.
ParamSet<float> load_params(const std::filesystem::path& path, const ModelConfig& config,
                            std::optional<StageMetadata>* stage = nullptr);

/// Byte-level equality of two float tensors (NaN-safe).
bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b);

}  // namespace beamcast
