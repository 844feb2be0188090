#pragma once

// Stage plans, AdamW, the cosine warm-restart schedule, and the staged
// training driver (hard routing -> gate alignment -> top-1 fine-tuning).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "beamcast/dataset.hpp"
#include "beamcast/model.hpp"
#include "beamcast/model_config.hpp"
#include "beamcast/params.hpp"

namespace beamcast {

enum class StageId : std::uint32_t { Stage1 = 1, Stage2 = 2, Stage3 = 3, EndToEnd = 4 };

std::string to_string(StageId stage);
StageId parse_stage_id(const std::string& text);

/// '*' matches any (possibly empty) run of characters.
bool glob_match(std::string_view pattern, std::string_view name);

struct LrGroup {
  std::string name;
  std::vector<std::string> patterns;
  double lr = 1e-4;
};

/// SGDR: period T_0 (epochs), period multiplier, floor = min_lr_ratio * base.
struct SchedulerConfig {
  int period_epochs = 10;
  int period_mult = 1;
  double min_lr_ratio = 0.0;
};

double scheduled_lr(double base_lr, int epoch, const SchedulerConfig& sched);

struct StagePlan {
  StageId stage = StageId::Stage1;
  RoutingMode mode = RoutingMode::HardMask;
  std::vector<std::string> trainable;  // glob patterns over tensor names; '!' excludes
  std::vector<LrGroup> lr_groups;      // first matching group wins
  double weight_decay = 1e-4;
  int max_epochs = 200;
  int patience = 10;
  SchedulerConfig scheduler;
  int batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;

  static StagePlan stage1();
  static StagePlan stage2();
  static StagePlan stage3();
  static StagePlan end_to_end();
};

struct ResolvedPlan {
  std::vector<bool> trainable;
  std::vector<int> group;  // lr group per tensor, -1 when frozen
};

/// Errors when no tensor is trainable or a trainable tensor has no lr group.
ResolvedPlan resolve_plan(const StagePlan& plan, const std::vector<TensorSpec>& layout);

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  std::vector<bool> trainable;
  std::vector<std::vector<double>> m, v;  // empty for frozen tensors
  std::vector<std::int64_t> steps;
};

OptimizerState make_optimizer(const std::vector<TensorSpec>& layout,
                              const std::vector<bool>& trainable, double weight_decay);

/// Decoupled AdamW on trainable tensors whose gradient was touched:
/// theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + lambda * theta).
template <typename S>
void adamw_step(ParamSet<S>& params, const ParamSet<S>& grads, OptimizerState& state,
                const std::vector<double>& lr_per_tensor);

struct EpochRecord {
  int epoch = 0;
  std::vector<double> group_lrs;
  double train_loss = 0.0;
  double val_top1 = 0.0;
  std::optional<double> val_transition;
  double seconds = 0.0;
};

struct TrainReport {
  StageId stage = StageId::Stage1;
  RoutingMode mode = RoutingMode::HardMask;
  std::vector<std::string> group_names;
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_top1 = 0.0;
  std::string stop_reason;
  double wall_seconds = 0.0;
  std::string checkpoint;
};

std::string format_train_report(const TrainReport& report, const std::string& prefix = "");

struct TrainOptions {
  int threads = 1;
  int micro_batch = 32;  // samples per forward/backward chunk
  bool cache_frozen_states = true;
  std::filesystem::path checkpoint;  // best checkpoint; empty = keep in memory only
  std::filesystem::path log;         // append-only epoch log; empty = none
  std::ostream* progress = nullptr;
};

/// Train `params` in place under `plan`; on return `params` holds the best
/// (validation Top-1) epoch.
TrainReport run_stage(const StagePlan& plan, const ModelConfig& config, ParamSet<float>& params,
                      const DatasetContainer& train, const DatasetContainer& val,
                      const TrainOptions& options);

struct CurriculumPlans {
  StagePlan stage1 = StagePlan::stage1();
  StagePlan stage2 = StagePlan::stage2();
  StagePlan stage3 = StagePlan::stage3();
};

struct CurriculumOptions {
  std::filesystem::path checkpoint_dir;  // required
  int first_stage = 1;                   // >1 resumes from the previous checkpoint
  int last_stage = 3;
  TrainOptions train;
};

struct CurriculumResult {
  ParamSet<float> params;
  std::vector<TrainReport> reports;
};

std::filesystem::path stage_checkpoint(const std::filesystem::path& dir, StageId stage);

CurriculumResult run_curriculum(const ModelConfig& config, ParamSet<float> init,
                                const DatasetContainer& train, const DatasetContainer& val,
                                const CurriculumPlans& plans, const CurriculumOptions& options);

CurriculumResult run_end_to_end(const ModelConfig& config, ParamSet<float> init,
                                const DatasetContainer& train, const DatasetContainer& val,
                                const StagePlan& plan, const TrainOptions& options);

/// Logits for every record of `ds` under `mode` (eval mode, no dropout).
std::vector<std::vector<double>> predict_logits(const Model<float>& model,
                                                const DatasetContainer& ds, RoutingMode mode,
                                                int batch_size = 64);

}  // namespace beamcast
