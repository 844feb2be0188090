#include "beamcast/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

#include "beamcast/common.hpp"
#include "beamcast/metrics.hpp"

namespace beamcast {

std::string to_string(StageId stage) {
  switch (stage) {
    case StageId::Stage1: return "stage1";
    case StageId::Stage2: return "stage2";
    case StageId::Stage3: return "stage3";
    case StageId::EndToEnd: return "end_to_end";
  }
  return "unknown";
}

StageId parse_stage_id(const std::string& text) {
  if (text == "1" || text == "stage1") return StageId::Stage1;
  if (text == "2" || text == "stage2") return StageId::Stage2;
  if (text == "3" || text == "stage3") return StageId::Stage3;
  if (text == "end_to_end" || text == "e2e") return StageId::EndToEnd;
  throw ConfigError("unknown stage '" + text + "'");
}

bool glob_match(std::string_view pattern, std::string_view name) {
  // Iterative wildcard match with single-star backtracking.
  std::size_t p = 0, n = 0, star = std::string_view::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && pattern[p] != '*' && pattern[p] == name[n]) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

double scheduled_lr(double base, int epoch, const SchedulerConfig& s) {
  int period = s.period_epochs;
  int t = epoch;
  while (t >= period) {
    t -= period;
    period *= s.period_mult;
  }
  const double floor = s.min_lr_ratio * base;
  return floor + (base - floor) * 0.5 * (1.0 + std::cos(kPi * t / period));
}

void StagePlan::validate() const {
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(to_string(stage) + ": " + msg);
  };
  need(!trainable.empty(), "trainable set is empty");
  need(!lr_groups.empty(), "no learning-rate groups");
  for (const auto& g : lr_groups) need(g.lr >= 0.0, "learning rates must be >= 0");
  need(weight_decay >= 0.0, "weight_decay must be >= 0");
  need(max_epochs >= 1, "max_epochs must be >= 1");
  need(patience >= 1, "patience must be >= 1");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(scheduler.period_epochs >= 1 && scheduler.period_mult >= 1,
       "scheduler period and multiplier must be >= 1");
  need(scheduler.min_lr_ratio >= 0.0 && scheduler.min_lr_ratio <= 1.0,
       "scheduler min_lr_ratio must lie in [0, 1]");
}

StagePlan StagePlan::stage1() {
  StagePlan p;
  p.stage = StageId::Stage1;
  p.mode = RoutingMode::HardMask;
  p.trainable = {"*"};
  p.lr_groups = {{"all", {"*"}, 1e-4}};
  return p;
}

StagePlan StagePlan::stage2() {
  StagePlan p;
  p.stage = StageId::Stage2;
  p.mode = RoutingMode::SoftDense;
  p.trainable = {"gate.*"};
  p.lr_groups = {{"gate", {"gate.*"}, 1e-3}};
  return p;
}

StagePlan StagePlan::stage3() {
  StagePlan p;
  p.stage = StageId::Stage3;
  p.mode = RoutingMode::Top1;
  p.trainable = {"blocks.*.expert.*.w2", "blocks.*.expert.*.b2", "gate.*", "cls.*"};
  p.lr_groups = {{"head", {"cls.*", "gate.*"}, 2e-4},
                 {"expert_out", {"blocks.*.expert.*.w2", "blocks.*.expert.*.b2"}, 5e-5}};
  return p;
}

StagePlan StagePlan::end_to_end() {
  StagePlan p;
  p.stage = StageId::EndToEnd;
  p.mode = RoutingMode::SoftDense;
  p.trainable = {"*"};
  p.lr_groups = {{"all", {"*"}, 1e-4}};
  return p;
}

ResolvedPlan resolve_plan(const StagePlan& plan, const std::vector<TensorSpec>& layout) {
  plan.validate();
  ResolvedPlan r;
  r.trainable.assign(layout.size(), false);
  r.group.assign(layout.size(), -1);
  bool any = false;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& name = layout[i].name;
    bool include = false, exclude = false;
    for (const auto& pat : plan.trainable) {
      if (!pat.empty() && pat[0] == '!')
        exclude = exclude || glob_match(std::string_view(pat).substr(1), name);
      else
        include = include || glob_match(pat, name);
    }
    r.trainable[i] = include && !exclude;
    if (!r.trainable[i]) continue;
    any = true;
    for (std::size_t g = 0; g < plan.lr_groups.size() && r.group[i] < 0; ++g)
      for (const auto& pat : plan.lr_groups[g].patterns)
        if (glob_match(pat, name)) {
          r.group[i] = static_cast<int>(g);
          break;
        }
    if (r.group[i] < 0)
      throw ConfigError(to_string(plan.stage) + ": trainable tensor '" + name +
                        "' matches no learning-rate group");
  }
  if (!any)
    throw ConfigError(to_string(plan.stage) + ": trainable set matches no tensor of this model");
  return r;
}

OptimizerState make_optimizer(const std::vector<TensorSpec>& layout,
                              const std::vector<bool>& trainable, double weight_decay) {
  OptimizerState st;
  st.weight_decay = weight_decay;
  st.trainable = trainable;
  st.m.resize(layout.size());
  st.v.resize(layout.size());
  st.steps.assign(layout.size(), 0);
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (trainable[i]) {
      st.m[i].assign(layout[i].numel(), 0.0);
      st.v[i].assign(layout[i].numel(), 0.0);
    }
  return st;
}

template <typename S>
void adamw_step(ParamSet<S>& params, const ParamSet<S>& grads, OptimizerState& st,
                const std::vector<double>& lr) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    // Tensors that received no gradient contribution (e.g. an expert with no
    // routed samples in this batch) keep their values and moments.
    if (!st.trainable[i] || !grads.touched(i)) continue;
    const std::int64_t t = ++st.steps[i];
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(t));
    auto& theta = params[i].data;
    const auto& g = grads[i].data;
    auto& m = st.m[i];
    auto& v = st.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * gj;
      v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * gj * gj;
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      const double th = static_cast<double>(theta[j]);
      theta[j] = static_cast<S>(th - lr[i] * (mhat / (std::sqrt(vhat) + st.eps) +
                                              st.weight_decay * th));
    }
  }
}

template void adamw_step<float>(ParamSet<float>&, const ParamSet<float>&, OptimizerState&,
                                const std::vector<double>&);
template void adamw_step<double>(ParamSet<double>&, const ParamSet<double>&, OptimizerState&,
                                 const std::vector<double>&);

std::string format_train_report(const TrainReport& r, const std::string& prefix) {
  std::ostringstream os;
  os << prefix << "stage=" << to_string(r.stage) << "\n";
  os << prefix << "routing=" << to_string(r.mode) << "\n";
  os << prefix << "epochs=" << r.epochs.size() << "\n";
  os << prefix << "best_epoch=" << r.best_epoch << "\n";
  os << prefix << "best_val_top1=" << format_number(r.best_val_top1) << "\n";
  os << prefix << "stop_reason=" << r.stop_reason << "\n";
  os << prefix << "wall_seconds=" << format_number(r.wall_seconds) << "\n";
  os << prefix << "checkpoint=" << r.checkpoint << "\n";
  for (const auto& e : r.epochs)
    os << prefix << "epoch." << e.epoch << "=loss:" << format_number(e.train_loss)
       << ";val_top1:" << format_number(e.val_top1) << "\n";
  return os.str();
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Block inputs at `layer` for every record (eval mode), T x d each.
std::vector<Mat<float>> block_states(const Model<float>& model, const DatasetContainer& ds,
                                     int layer, int chunk) {
  std::vector<Mat<float>> out(ds.size());
  const int T = model.config().slots;
  ForwardOptions<float> opt;
  opt.mode = RoutingMode::SoftDense;  // routing is irrelevant below `layer`
  for (std::size_t s = 0; s < ds.size(); s += chunk) {
    const std::size_t e = std::min(ds.size(), s + chunk);
    std::vector<SampleInput> in;
    for (std::size_t i = s; i < e; ++i) in.push_back(sample_input(ds.records[i]));
    const auto fc = model.forward(in, opt);
    const Mat<float>& h = layer < model.config().n_layers ? fc.layers[layer].h_in
                                                          : fc.layers.back().h_out;
    for (std::size_t i = s; i < e; ++i)
      out[i] = h.middleRows(static_cast<Eigen::Index>(i - s) * T, T);
  }
  return out;
}

Mat<float> stack_states(const std::vector<Mat<float>>& states, std::span<const std::size_t> idx,
                        int T, int d) {
  Mat<float> m(static_cast<Eigen::Index>(idx.size()) * T, d);
  for (std::size_t j = 0; j < idx.size(); ++j)
    m.middleRows(static_cast<Eigen::Index>(j) * T, T) = states[idx[j]];
  return m;
}

struct Evaluation {
  double top1 = 0.0;
  std::optional<double> transition;
};

Evaluation evaluate(const Model<float>& model, const DatasetContainer& ds, RoutingMode mode,
                    const std::vector<Mat<float>>* states, int start_layer, int chunk) {
  std::vector<std::vector<double>> logits;
  logits.reserve(ds.size());
  const int T = model.config().slots, d = model.config().d_model;
  for (std::size_t s = 0; s < ds.size(); s += chunk) {
    const std::size_t e = std::min(ds.size(), s + chunk);
    std::vector<SampleInput> in;
    std::vector<std::size_t> idx;
    for (std::size_t i = s; i < e; ++i) {
      in.push_back(sample_input(ds.records[i]));
      idx.push_back(i);
    }
    ForwardOptions<float> opt;
    opt.mode = mode;
    Mat<float> st;
    if (states) {
      st = stack_states(*states, idx, T, d);
      opt.start_layer = start_layer;
      opt.start_states = &st;
    }
    const auto tr = make_trace(model.forward(in, opt));
    for (auto& z : tr.logits) logits.push_back(z);
  }
  const auto targets = eval_targets(ds);
  const auto m = compute_metrics(logits, targets);
  return {m.top1, m.transition.value};
}

}  // namespace

std::vector<std::vector<double>> predict_logits(const Model<float>& model,
                                                const DatasetContainer& ds, RoutingMode mode,
                                                int batch_size) {
  std::vector<std::vector<double>> logits;
  logits.reserve(ds.size());
  ForwardOptions<float> opt;
  opt.mode = mode;
  for (std::size_t s = 0; s < ds.size(); s += batch_size) {
    const std::size_t e = std::min(ds.size(), s + static_cast<std::size_t>(batch_size));
    std::vector<SampleInput> in;
    for (std::size_t i = s; i < e; ++i) in.push_back(sample_input(ds.records[i]));
    auto tr = make_trace(model.forward(in, opt));
    for (auto& z : tr.logits) logits.push_back(std::move(z));
  }
  return logits;
}

TrainReport run_stage(const StagePlan& plan, const ModelConfig& config, ParamSet<float>& params,
                      const DatasetContainer& train, const DatasetContainer& val,
                      const TrainOptions& options) {
  const auto t_start = Clock::now();
  if (train.size() == 0) throw EmptyDatasetError("training split is empty");
  if (val.size() == 0) throw EmptyDatasetError("validation split is empty");
  if (train.num_classes != config.num_classes || val.num_classes != config.num_classes)
    throw ConfigError("dataset has " + std::to_string(train.num_classes) +
                      " classes but the model expects " + std::to_string(config.num_classes));
  const auto layout = parameter_layout(config);
  const ResolvedPlan rp = resolve_plan(plan, layout);
  const BackwardScope scope = scope_for(config, layout, rp.trainable);
  OptimizerState opt_state = make_optimizer(layout, rp.trainable, plan.weight_decay);
  Model<float> model(config, params);

  const int T = config.slots, d = config.d_model;
  const int chunk = std::max(1, options.micro_batch);

  // Frozen lower blocks (and the CNN) are deterministic in training mode as
  // long as they contain no expert dropout, so their outputs are cached.
  int cache_layer = 0;
  if (options.cache_frozen_states && config.arch == Architecture::MoEformer && !scope.embedding &&
      scope.lowest_layer > 0) {
    cache_layer = scope.lowest_layer;
    if (config.dropout_expert > 0.0)
      for (int l : config.moe_layers) cache_layer = std::min(cache_layer, l);
  }
  std::vector<Mat<float>> train_states, val_states;
  if (cache_layer > 0) {
    train_states = block_states(model, train, cache_layer, chunk);
    val_states = block_states(model, val, cache_layer, chunk);
  }

  TrainReport report;
  report.stage = plan.stage;
  report.mode = plan.mode;
  for (const auto& g : plan.lr_groups) report.group_names.push_back(g.name);
  report.checkpoint = options.checkpoint.string();

  std::ofstream log;
  if (!options.log.empty()) {
    log.open(options.log, std::ios::app);
    if (!log) throw MissingArtifactError("cannot open training log " + options.log.string());
  }

  ParamSet<float> best = params;
  int since_best = 0;
  const int threads = std::max(1, options.threads);
  std::vector<ParamSet<float>> grads(threads, ParamSet<float>(layout));
  std::vector<std::size_t> order(train.size());

  for (int epoch = 0; epoch < plan.max_epochs; ++epoch) {
    const auto t_epoch = Clock::now();
    std::vector<double> group_lr(plan.lr_groups.size());
    for (std::size_t g = 0; g < group_lr.size(); ++g)
      group_lr[g] = scheduled_lr(plan.lr_groups[g].lr, epoch, plan.scheduler);
    std::vector<double> lr(layout.size(), 0.0);
    for (std::size_t i = 0; i < layout.size(); ++i)
      if (rp.group[i] >= 0) lr[i] = group_lr[rp.group[i]];

    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(plan.seed, 0x53485546, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t bs = 0; bs < order.size(); bs += plan.batch_size, ++batch_index) {
      const std::size_t be = std::min(order.size(), bs + static_cast<std::size_t>(plan.batch_size));
      const std::size_t B = be - bs;
      std::vector<double> part_loss(threads, 0.0);
      auto work = [&](int tid, std::size_t lo, std::size_t hi) {
        ParamSet<float>& g = grads[tid];
        g.set_zero();
        for (std::size_t s = lo; s < hi; s += chunk) {
          const std::size_t e = std::min(hi, s + chunk);
          std::vector<SampleInput> in;
          std::vector<int> targets;
          std::span<const std::size_t> idx(order.data() + s, e - s);
          for (std::size_t i : idx) {
            in.push_back(sample_input(train.records[i],
                                      derive_seed(plan.seed, static_cast<std::uint64_t>(epoch), i)));
            targets.push_back(train.records[i].class_id);
          }
          ForwardOptions<float> fo;
          fo.mode = plan.mode;
          fo.training = true;
          Mat<float> st;
          if (cache_layer > 0) {
            st = stack_states(train_states, idx, T, d);
            fo.start_layer = cache_layer;
            fo.start_states = &st;
          }
          const auto fc = model.forward(in, fo);
          Mat<float> dlogits;
          const double l = cross_entropy(fc.logits, targets, &dlogits);
          const float w = static_cast<float>(e - s) / static_cast<float>(B);
          dlogits *= w;
          part_loss[tid] += l * static_cast<double>(e - s);
          model.backward(fc, dlogits, g, scope);
        }
      };
      if (threads == 1) {
        work(0, bs, be);
      } else {
        std::vector<std::thread> pool;
        const std::size_t per = (B + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
          const std::size_t lo = std::min(be, bs + t * per), hi = std::min(be, lo + per);
          pool.emplace_back(work, t, lo, hi);
        }
        for (auto& th : pool) th.join();
        // Fixed-order reduction keeps results independent of scheduling.
        for (int t = 1; t < threads; ++t)
          for (std::size_t i = 0; i < layout.size(); ++i) {
            if (!grads[t].touched(i)) continue;
            auto& dst = grads[0][i].data;
            const auto& src = grads[t][i].data;
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            grads[0].mark_touched(i);
          }
      }
      double batch_loss = 0.0;
      for (double l : part_loss) batch_loss += l;
      if (!std::isfinite(batch_loss)) {
        std::ostringstream msg;
        msg << to_string(plan.stage) << ": non-finite loss at epoch " << epoch << ", batch "
            << batch_index << " (lr";
        for (double x : group_lr) msg << " " << x;
        msg << ")";
        throw NumericalError(msg.str());
      }
      loss_sum += batch_loss;
      adamw_step(params, grads[0], opt_state, lr);
      if (!params.all_finite())
        throw NumericalError(to_string(plan.stage) + ": non-finite parameters after epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batch_index));
    }

    const auto ev = evaluate(model, val, plan.mode, cache_layer > 0 ? &val_states : nullptr,
                             cache_layer, 64);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.group_lrs = group_lr;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    rec.val_top1 = ev.top1;
    rec.val_transition = ev.transition;
    rec.seconds = seconds_since(t_epoch);
    report.epochs.push_back(rec);

    std::ostringstream line;
    line << "stage=" << to_string(plan.stage) << " epoch=" << epoch;
    for (std::size_t g = 0; g < group_lr.size(); ++g)
      line << " lr." << plan.lr_groups[g].name << "=" << group_lr[g];
    line << " train_loss=" << rec.train_loss << " val_top1=" << rec.val_top1
         << " val_transition="
         << (rec.val_transition ? std::to_string(*rec.val_transition) : std::string("undefined"));
    if (log) log << line.str() << "\n" << std::flush;
    if (options.progress) *options.progress << line.str() << " (" << rec.seconds << " s)\n"
                                            << std::flush;

    if (report.best_epoch < 0 || rec.val_top1 > report.best_val_top1) {
      report.best_epoch = epoch;
      report.best_val_top1 = rec.val_top1;
      best = params;
      since_best = 0;
      if (!options.checkpoint.empty())
        save_params(params, config, options.checkpoint,
                    StageMetadata{static_cast<std::uint32_t>(plan.stage),
                                  static_cast<std::uint32_t>(epoch), rec.val_top1});
    } else if (++since_best >= plan.patience) {
      report.stop_reason = "patience";
      break;
    }
  }
  if (report.stop_reason.empty()) report.stop_reason = "max_epochs";
  params = best;
  report.wall_seconds = seconds_since(t_start);
  return report;
}

std::filesystem::path stage_checkpoint(const std::filesystem::path& dir, StageId stage) {
  return dir / (to_string(stage) + ".bin");
}

CurriculumResult run_curriculum(const ModelConfig& config, ParamSet<float> init,
                                const DatasetContainer& train, const DatasetContainer& val,
                                const CurriculumPlans& plans, const CurriculumOptions& options) {
  if (options.first_stage < 1 || options.last_stage > 3 || options.first_stage > options.last_stage)
    throw ConfigError("curriculum stage range must satisfy 1 <= first <= last <= 3");
  if (config.moe_layers.empty() || !config.has_gate())
    throw ConfigError("the three-stage curriculum requires MoE layers and a gate");
  if (options.checkpoint_dir.empty()) throw ConfigError("curriculum needs a checkpoint directory");
  std::filesystem::create_directories(options.checkpoint_dir);

  const StagePlan* stage_plans[3] = {&plans.stage1, &plans.stage2, &plans.stage3};
  const StageId ids[3] = {StageId::Stage1, StageId::Stage2, StageId::Stage3};
  CurriculumResult result;
  result.params = std::move(init);
  for (int s = options.first_stage; s <= options.last_stage; ++s) {
    if (s > 1) {
      // Each stage starts from the previous stage's best checkpoint on disk.
      const auto prev = stage_checkpoint(options.checkpoint_dir, ids[s - 2]);
      if (!std::filesystem::exists(prev))
        throw MissingArtifactError("stage " + std::to_string(s) + " needs the " +
                                   to_string(ids[s - 2]) + " checkpoint " + prev.string() +
                                   ", which does not exist");
      result.params = load_params(prev, config);
    }
    TrainOptions to = options.train;
    to.checkpoint = stage_checkpoint(options.checkpoint_dir, ids[s - 1]);
    StagePlan plan = *stage_plans[s - 1];
    plan.stage = ids[s - 1];
    result.reports.push_back(run_stage(plan, config, result.params, train, val, to));
  }
  return result;
}

CurriculumResult run_end_to_end(const ModelConfig& config, ParamSet<float> init,
                                const DatasetContainer& train, const DatasetContainer& val,
                                const StagePlan& plan, const TrainOptions& options) {
  CurriculumResult result;
  result.params = std::move(init);
  result.reports.push_back(run_stage(plan, config, result.params, train, val, options));
  return result;
}

}  // namespace beamcast
