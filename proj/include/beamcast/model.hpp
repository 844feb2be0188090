#pragma once

// CNN frame encoder + context encoder + scene gate + causal Pre-LN transformer
// with MoE feed-forward layers, and a manual backward pass.
//
// Activations of a batch of B samples are stacked as B*T rows (row b*T + t).
// Routing is decided once per sample and shared by every time step and
// every MoE layer.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "beamcast/dataset.hpp"
#include "beamcast/kernels.hpp"
#include "beamcast/model_config.hpp"
#include "beamcast/params.hpp"

namespace beamcast {

struct SampleInput {
  const float* x = nullptr;  // T x 2 x K x S_w
  int scene = 0;
  double speed_norm = 0.0;
  std::uint64_t seed = 0;  // dropout stream
};

SampleInput sample_input(const DatasetRecord& record, std::uint64_t seed = 0);

template <typename S>
struct ForwardOptions {
  RoutingMode mode = RoutingMode::Top1;
  bool training = false;
  // HardMask: explicit per-sample expert; empty means hard_assignment(s, v̄).
  std::vector<int> hard_masks;
  // When non-empty, replaces the gate output (treated as constants).
  std::vector<std::vector<double>> weights;
  // Start at transformer block `start_layer` from precomputed block inputs
  // (B*T x d). The CNN/embedding stages are skipped.
  int start_layer = 0;
  const Mat<S>* start_states = nullptr;
};

template <typename S>
struct CnnCache {
  int frames = 0;
  std::vector<S> input, a1, a2, a3, se_out, pooled;
  std::vector<int> pool_argmax;
  SeCache<S> se;
  Mat<S> gap;  // frames x c3
};

template <typename S>
struct ExpertCache {
  int expert = 0;
  std::vector<int> samples;  // samples routed through this expert
  Mat<S> x, a, y;            // gathered input, pre-GELU, output after dropout
  std::vector<S> mask;       // empty when dropout inactive
};

template <typename S>
struct LayerCache {
  Mat<S> h_in;
  Mat<S> x1;
  LayerNormCache<S> ln1;
  Mat<S> q, k, v, attn;       // attn: concatenated head outputs
  std::vector<Mat<S>> probs;  // per (sample, head), T x T
  Mat<S> h_mid, x2;
  LayerNormCache<S> ln2;
  std::vector<ExpertCache<S>> experts;  // one entry for a dense FFN
  Mat<S> ffn_out;
  Mat<S> h_out;
};

template <typename S>
struct ForwardCache {
  int batch = 0;
  int slots = 0;
  RoutingMode mode = RoutingMode::Top1;
  bool training = false;
  bool gate_live = false;  // gate output actually used for routing weights
  int start_layer = 0;
  std::vector<SampleInput> inputs;

  CnnCache<S> cnn;
  Mat<S> cnn_feat;  // frames x feat
  Mat<S> sv;        // B x 2 (scene, speed)
  Mat<S> ctx;       // B x ctx
  Mat<S> proj_in;   // B*T x (feat + ctx)
  Mat<S> h0;

  Mat<S> gate_pre, gate_hidden, gate_weights;  // B x gh, B x gh, B x E
  Mat<S> route_weights;                         // B x E weights applied
  std::vector<int> selected;                    // -1 under SoftDense
  std::vector<std::vector<int>> experts_evaluated;  // [sample][moe layer]

  std::vector<LayerCache<S>> layers;
  Mat<S> head_in;  // B x d (or B x feat)
  std::vector<S> head_mask;
  Mat<S> logits;   // B x C
};

struct ForwardTrace {
  std::vector<std::vector<double>> logits;
  std::vector<std::vector<double>> gate_weights;
  std::vector<int> selected_expert;
  std::vector<std::vector<int>> experts_evaluated;
  std::vector<int> predictions;
};

template <typename S>
ForwardTrace make_trace(const ForwardCache<S>& cache);

/// Which part of the network the backward pass must reach.
struct BackwardScope {
  bool cnn = true;
  bool embedding = true;
  int lowest_layer = 0;
};

BackwardScope full_scope();
/// Narrowest scope that still produces gradients for every trainable tensor.
BackwardScope scope_for(const ModelConfig& config, const std::vector<TensorSpec>& layout,
                        const std::vector<bool>& trainable);

template <typename S>
class Model {
 public:
  Model(const ModelConfig& config, const ParamSet<S>& params);

  const ModelConfig& config() const { return config_; }
  const ParamSet<S>& params() const { return *params_; }

  ForwardCache<S> forward(std::span<const SampleInput> inputs,
                          const ForwardOptions<S>& options) const;

  /// Accumulates gradients of the loss with respect to every tensor reached
  /// by `scope` into `grads` (same layout as the parameters).
  void backward(const ForwardCache<S>& cache, const Mat<S>& dlogits, ParamSet<S>& grads,
                const BackwardScope& scope = full_scope()) const;

  // Component operations (single forward pieces, no caching).
  std::vector<S> cnn_encode(const S* frame) const;
  void se_recalibrate(const S* fmap, S* out) const;
  std::vector<S> context_encode(int scene, double speed_norm) const;
  std::vector<S> gate_forward(int scene, double speed_norm) const;
  Mat<S> embed_sequence(const Mat<S>& cnn_feats, const std::vector<S>& ctx) const;
  Mat<S> expert_forward(const Mat<S>& h, int layer, int expert) const;
  Mat<S> moe_ffn(const Mat<S>& h_seq, int layer, const RoutingDirective& directive) const;
  Mat<S> transformer_forward(const Mat<S>& h0, const RoutingDirective& directive) const;
  std::vector<S> classify(const Mat<S>& h_seq) const;

 private:
  struct LayerIdx {
    std::size_t ln1g, ln1b, wq, bq, wk, bk, wv, bv, wo, bo, ln2g, ln2b;
    std::vector<std::array<std::size_t, 4>> ffn;  // per expert (or one dense): w1 b1 w2 b2
    bool moe = false;
  };

  const S* p(std::size_t idx) const { return (*params_)[idx].data.data(); }

  void cnn_forward(int frames, CnnCache<S>& cache) const;
  void cnn_backward(const CnnCache<S>& cache, const Mat<S>& dgap, ParamSet<S>& grads) const;
  void block_forward(int layer, int B, int T, const Mat<S>& h_in, const ForwardCache<S>& fc,
                     LayerCache<S>& lc) const;
  Mat<S> block_backward(int layer, int B, int T, const ForwardCache<S>& fc,
                        const LayerCache<S>& lc, const Mat<S>& dh_out, ParamSet<S>& grads,
                        Mat<S>* droute) const;
  void expert_apply(const std::array<std::size_t, 4>& idx, ExpertCache<S>& ec) const;
  Mat<S> expert_backprop(const std::array<std::size_t, 4>& idx, const ExpertCache<S>& ec,
                         const Mat<S>& dy, ParamSet<S>& grads) const;

  ModelConfig config_;
  const ParamSet<S>* params_;
  int c1_, c2_, c3_, se_hidden_;
  ConvShape conv1_, conv2_, conv3_;
  std::size_t conv1w_, conv1b_, conv2w_, conv2b_, conv3w_, conv3b_, fc_, cls_;
  std::optional<std::size_t> sew1_, sew2_, ctx_, proj_, pos_, gw1_, gb1_, gw2_;
  std::vector<LayerIdx> layers_;
};

/// Mean softmax cross-entropy; fills dlogits (already divided by B) if given.
template <typename S>
double cross_entropy(const Mat<S>& logits, std::span<const int> targets, Mat<S>* dlogits);

}  // namespace beamcast
