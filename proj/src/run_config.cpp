#include "beamcast/run_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "beamcast/common.hpp"

namespace beamcast {

using nlohmann::json;

namespace {

json plan_to_json(const StagePlan& p) {
  json groups = json::array();
  for (const auto& g : p.lr_groups)
    groups.push_back({{"name", g.name}, {"patterns", g.patterns}, {"lr", g.lr}});
  return {{"mode", to_string(p.mode)},
          {"trainable", p.trainable},
          {"lr_groups", groups},
          {"weight_decay", p.weight_decay},
          {"max_epochs", p.max_epochs},
          {"patience", p.patience},
          {"batch_size", p.batch_size},
          {"scheduler",
           {{"period_epochs", p.scheduler.period_epochs},
            {"period_mult", p.scheduler.period_mult},
            {"min_lr_ratio", p.scheduler.min_lr_ratio}}}};
}

void plan_from_json(const json& j, StagePlan& p) {
  p.mode = parse_routing_mode(j.at("mode").get<std::string>());
  p.trainable = j.at("trainable").get<std::vector<std::string>>();
  p.lr_groups.clear();
  for (const auto& g : j.at("lr_groups")) {
    for (const auto& [k, v] : g.items())
      if (k != "name" && k != "patterns" && k != "lr")
        throw ConfigError("unknown key '" + k + "' in lr group");
    p.lr_groups.push_back({g.at("name").get<std::string>(),
                           g.at("patterns").get<std::vector<std::string>>(),
                           g.at("lr").get<double>()});
  }
  p.weight_decay = j.at("weight_decay").get<double>();
  p.max_epochs = j.at("max_epochs").get<int>();
  p.patience = j.at("patience").get<int>();
  p.batch_size = j.at("batch_size").get<int>();
  const auto& s = j.at("scheduler");
  p.scheduler.period_epochs = s.at("period_epochs").get<int>();
  p.scheduler.period_mult = s.at("period_mult").get<int>();
  p.scheduler.min_lr_ratio = s.at("min_lr_ratio").get<double>();
}

json to_json(const RunConfig& c) {
  const auto& s = c.sim;
  const auto& m = c.model;
  json j;
  j["seed"] = c.seed;
  j["num_sequences"] = c.num_sequences;
  j["data_dir"] = c.data_dir.string();
  j["output_dir"] = c.output_dir.string();
  j["threads"] = c.threads;
  j["micro_batch"] = c.micro_batch;
  j["sim"] = {{"carrier_freq_hz", s.carrier_freq_hz},
              {"subcarrier_spacing_hz", s.subcarrier_spacing_hz},
              {"num_subcarriers", s.num_subcarriers},
              {"num_antennas", s.num_antennas},
              {"element_spacing", s.element_spacing},
              {"slot_interval_s", s.slot_interval_s},
              {"seq_len", s.seq_len},
              {"distance_min_m", s.distance_min_m},
              {"distance_max_m", s.distance_max_m},
              {"azimuth_min_deg", s.azimuth_min_deg},
              {"azimuth_max_deg", s.azimuth_max_deg},
              {"speed_max_kmh", s.speed_max_kmh},
              {"los_fraction", s.los_fraction},
              {"paths_los", s.paths_los},
              {"paths_nlos", s.paths_nlos},
              {"rician_k_db", s.rician_k_db},
              {"los_weak_spread_deg", s.los_weak_spread_deg},
              {"nlos_spread_deg", s.nlos_spread_deg},
              {"los_delay_spread_s", s.los_delay_spread_s},
              {"nlos_delay_spread_s", s.nlos_delay_spread_s},
              {"pathloss_exp_los", s.pathloss_exp_los},
              {"pathloss_exp_nlos", s.pathloss_exp_nlos},
              {"min_distance_m", s.min_distance_m}};
  j["sounding"] = {{"n_rf_chains", c.sounding.n_rf_chains},
                   {"tx_power_mw", c.sounding.tx_power_mw},
                   {"noise_power_dbm", c.sounding.noise_power_dbm},
                   {"zc_roots", c.sounding.zc_roots},
                   {"noise_enabled", c.sounding.noise_enabled}};
  j["dataset"] = {{"min_class_fraction", c.dataset.min_class_fraction},
                  {"min_class_count", c.dataset.min_class_count
                                          ? json(*c.dataset.min_class_count)
                                          : json(nullptr)},
                  {"speed_norm_kmh", c.dataset.speed_norm_kmh},
                  {"group_size", c.dataset.group_size}};
  j["model"] = {{"cnn_channels", m.cnn_channels},
                {"cnn_feat_dim", m.cnn_feat_dim},
                {"ctx_dim", m.ctx_dim},
                {"d_model", m.d_model},
                {"n_layers", m.n_layers},
                {"n_heads", m.n_heads},
                {"n_experts", m.n_experts},
                {"moe_layers", m.moe_layers},
                {"ffn_expansion", m.ffn_expansion},
                {"dropout_expert", m.dropout_expert},
                {"dropout_head", m.dropout_head},
                {"se_reduction", m.se_reduction},
                {"gate_hidden", m.gate_hidden},
                {"gate_bias", m.gate_bias},
                {"max_positions", m.max_positions},
                {"ln_eps", m.ln_eps}};
  j["plans"] = {{"stage1", plan_to_json(c.plans.stage1)},
                {"stage2", plan_to_json(c.plans.stage2)},
                {"stage3", plan_to_json(c.plans.stage3)},
                {"end_to_end", plan_to_json(c.end_to_end)},
                {"baseline", plan_to_json(c.baseline)}};
  return j;
}

template <typename T>
void get(const json& j, const char* key, T& out) {
  out = j.at(key).get<T>();
}

RunConfig from_json(const json& j) {
  RunConfig c;
  get(j, "seed", c.seed);
  get(j, "num_sequences", c.num_sequences);
  c.data_dir = j.at("data_dir").get<std::string>();
  c.output_dir = j.at("output_dir").get<std::string>();
  get(j, "threads", c.threads);
  get(j, "micro_batch", c.micro_batch);

  const auto& s = j.at("sim");
  auto& sim = c.sim;
  get(s, "carrier_freq_hz", sim.carrier_freq_hz);
  get(s, "subcarrier_spacing_hz", sim.subcarrier_spacing_hz);
  get(s, "num_subcarriers", sim.num_subcarriers);
  get(s, "num_antennas", sim.num_antennas);
  get(s, "element_spacing", sim.element_spacing);
  get(s, "slot_interval_s", sim.slot_interval_s);
  get(s, "seq_len", sim.seq_len);
  get(s, "distance_min_m", sim.distance_min_m);
  get(s, "distance_max_m", sim.distance_max_m);
  get(s, "azimuth_min_deg", sim.azimuth_min_deg);
  get(s, "azimuth_max_deg", sim.azimuth_max_deg);
  get(s, "speed_max_kmh", sim.speed_max_kmh);
  get(s, "los_fraction", sim.los_fraction);
  get(s, "paths_los", sim.paths_los);
  get(s, "paths_nlos", sim.paths_nlos);
  get(s, "rician_k_db", sim.rician_k_db);
  get(s, "los_weak_spread_deg", sim.los_weak_spread_deg);
  get(s, "nlos_spread_deg", sim.nlos_spread_deg);
  get(s, "los_delay_spread_s", sim.los_delay_spread_s);
  get(s, "nlos_delay_spread_s", sim.nlos_delay_spread_s);
  get(s, "pathloss_exp_los", sim.pathloss_exp_los);
  get(s, "pathloss_exp_nlos", sim.pathloss_exp_nlos);
  get(s, "min_distance_m", sim.min_distance_m);

  const auto& so = j.at("sounding");
  get(so, "n_rf_chains", c.sounding.n_rf_chains);
  get(so, "tx_power_mw", c.sounding.tx_power_mw);
  get(so, "noise_power_dbm", c.sounding.noise_power_dbm);
  get(so, "zc_roots", c.sounding.zc_roots);
  get(so, "noise_enabled", c.sounding.noise_enabled);

  const auto& d = j.at("dataset");
  get(d, "min_class_fraction", c.dataset.min_class_fraction);
  if (d.at("min_class_count").is_null())
    c.dataset.min_class_count.reset();
  else
    c.dataset.min_class_count = d.at("min_class_count").get<std::size_t>();
  get(d, "speed_norm_kmh", c.dataset.speed_norm_kmh);
  get(d, "group_size", c.dataset.group_size);

  const auto& m = j.at("model");
  auto& mc = c.model;
  get(m, "cnn_channels", mc.cnn_channels);
  get(m, "cnn_feat_dim", mc.cnn_feat_dim);
  get(m, "ctx_dim", mc.ctx_dim);
  get(m, "d_model", mc.d_model);
  get(m, "n_layers", mc.n_layers);
  get(m, "n_heads", mc.n_heads);
  get(m, "n_experts", mc.n_experts);
  get(m, "moe_layers", mc.moe_layers);
  get(m, "ffn_expansion", mc.ffn_expansion);
  get(m, "dropout_expert", mc.dropout_expert);
  get(m, "dropout_head", mc.dropout_head);
  get(m, "se_reduction", mc.se_reduction);
  get(m, "gate_hidden", mc.gate_hidden);
  get(m, "gate_bias", mc.gate_bias);
  get(m, "max_positions", mc.max_positions);
  get(m, "ln_eps", mc.ln_eps);

  const auto& p = j.at("plans");
  plan_from_json(p.at("stage1"), c.plans.stage1);
  plan_from_json(p.at("stage2"), c.plans.stage2);
  plan_from_json(p.at("stage3"), c.plans.stage3);
  plan_from_json(p.at("end_to_end"), c.end_to_end);
  plan_from_json(p.at("baseline"), c.baseline);
  return c;
}

// Overlay `patch` onto `base`; objects merge key by key, anything else is
// replaced. Keys absent from the defaults are errors.
void merge(json& base, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config section '" + path + "' must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + where + "'");
    auto& slot = base[key];
    if (slot.is_object())
      merge(slot, value, where);
    else
      slot = value;
  }
}

RunConfig materialize(const json& merged) {
  RunConfig c;
  try {
    c = from_json(merged);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

void RunConfig::validate() const {
  if (num_sequences < 1) throw ConfigError("num_sequences must be >= 1");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (micro_batch < 1) throw ConfigError("micro_batch must be >= 1");
  if (output_dir.empty() || data_dir.empty()) throw ConfigError("data_dir/output_dir must be set");
  sim.validate();
  if (sim.seq_len < 2) throw ConfigError("sim.seq_len must be >= 2 (T observed + 1 target)");
  if (dataset.group_size < 1 || sim.num_antennas % dataset.group_size != 0)
    throw ConfigError("dataset.group_size must divide sim.num_antennas");
  sounding.validate(sim.num_antennas / dataset.group_size, sim.num_subcarriers);
  for (const StagePlan* p : {&plans.stage1, &plans.stage2, &plans.stage3, &end_to_end, &baseline})
    p->validate();
  // shape checks with stand-in data dimensions
  ModelConfig m = model;
  m.slots = sim.seq_len - 1;
  m.subcarriers = sim.num_subcarriers;
  m.codewords = sim.num_antennas / dataset.group_size;
  m.num_classes = std::max(1, m.codewords);
  m.validate();
}

ModelConfig RunConfig::model_for(const DatasetContainer& ds) const {
  ModelConfig m = model;
  m.slots = ds.slots;
  m.subcarriers = ds.subcarriers;
  m.codewords = ds.codewords;
  m.num_classes = ds.num_classes;
  m.validate();
  return m;
}

std::uint64_t RunConfig::sim_seed() const { return derive_seed(seed, 1); }
std::uint64_t RunConfig::split_seed() const { return derive_seed(seed, 2); }
std::uint64_t RunConfig::init_seed() const { return derive_seed(seed, 3); }

ExperimentConfig RunConfig::experiment(const DatasetContainer& ds) const {
  ExperimentConfig e;
  e.model = model_for(ds);
  e.plans = plans;
  e.end_to_end = end_to_end;
  e.baseline = baseline;
  for (StagePlan* p : {&e.plans.stage1, &e.plans.stage2, &e.plans.stage3, &e.end_to_end, &e.baseline})
    p->seed = derive_seed(seed, 4);
  e.plans.stage1.stage = StageId::Stage1;
  e.plans.stage2.stage = StageId::Stage2;
  e.plans.stage3.stage = StageId::Stage3;
  e.end_to_end.stage = e.baseline.stage = StageId::EndToEnd;
  e.seed = init_seed();
  e.train.threads = threads;
  e.train.micro_batch = micro_batch;
  e.work_dir = output_dir;
  return e;
}

std::string dump_run_config(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

RunConfig parse_run_config(const std::string& text) {
  json patch;
  try {
    patch = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  json merged = to_json(RunConfig{});
  merge(merged, patch, "");
  return materialize(merged);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides) {
  if (overrides.empty()) return;
  json merged = to_json(config);
  for (const auto& ov : overrides) {
    const auto eq = ov.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("override '" + ov + "' is not path=value");
    const std::string path = ov.substr(0, eq);
    const std::string text = ov.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    json* node = &merged;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot - start);
      if (node->is_array()) {
        // numeric segments index into lists, e.g. plans.stage3.lr_groups.0.lr
        std::size_t idx = 0;
        auto [ptr, ec] = std::from_chars(key.data(), key.data() + key.size(), idx);
        if (ec != std::errc() || ptr != key.data() + key.size() || idx >= node->size())
          throw ConfigError("unknown config key '" + path + "'");
        node = &(*node)[idx];
      } else {
        if (!node->is_object() || !node->contains(key))
          throw ConfigError("unknown config key '" + path + "'");
        node = &(*node)[key];
      }
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    if (node->is_object()) {
      merge(*node, value, path);
    } else {
      *node = value;
    }
  }
  config = materialize(merged);
}

}  // namespace beamcast
