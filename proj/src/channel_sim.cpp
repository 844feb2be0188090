#include "beamcast/channel_sim.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace beamcast {

void SimConfig::validate() const {
  if (!(carrier_freq_hz > 0.0)) throw ConfigError("sim.carrier_freq_hz must be positive");
  if (!(subcarrier_spacing_hz > 0.0))
    throw ConfigError("sim.subcarrier_spacing_hz must be positive");
  if (num_subcarriers < 1) throw ConfigError("sim.num_subcarriers must be >= 1");
  if (num_antennas < 1) throw ConfigError("sim.num_antennas must be >= 1");
  if (!(element_spacing > 0.0)) throw ConfigError("sim.element_spacing must be positive");
  if (!(slot_interval_s > 0.0)) throw ConfigError("sim.slot_interval_s must be positive");
  if (seq_len < 2) throw ConfigError("sim.seq_len must be >= 2");
  if (!(distance_min_m > 0.0) || !(distance_min_m < distance_max_m))
    throw ConfigError("sim distance range must satisfy 0 < min < max");
  if (!(azimuth_min_deg < azimuth_max_deg))
    throw ConfigError("sim azimuth range must satisfy min < max");
  if (!(speed_max_kmh > 0.0)) throw ConfigError("sim.speed_max_kmh must be positive");
  if (los_fraction < 0.0 || los_fraction > 1.0)
    throw ConfigError("sim.los_fraction must lie in [0, 1]");
  if (paths_los < 1 || paths_nlos < 1) throw ConfigError("sim path counts must be >= 1");
  if (!(min_distance_m > 0.0)) throw ConfigError("sim.min_distance_m must be positive");
}

double PathSet::dominant_power() const {
  double p = 0.0;
  for (const auto& path : paths)
    if (path.dominant) p += std::norm(path.gain);
  return p;
}

double PathSet::scattered_power() const {
  double p = 0.0;
  for (const auto& path : paths)
    if (!path.dominant) p += std::norm(path.gain);
  return p;
}

std::span<const cplx> ChannelSequence::slot(int t) const {
  const std::size_t stride = static_cast<std::size_t>(subcarriers) * antennas;
  return {h.data() + t * stride, stride};
}

std::span<const cplx> ChannelSequence::at(int t, int k) const {
  const std::size_t off = (static_cast<std::size_t>(t) * subcarriers + k) * antennas;
  return {h.data() + off, static_cast<std::size_t>(antennas)};
}

std::span<cplx> ChannelSequence::at(int t, int k) {
  const std::size_t off = (static_cast<std::size_t>(t) * subcarriers + k) * antennas;
  return {h.data() + off, static_cast<std::size_t>(antennas)};
}

std::vector<cplx> steering_vector(double angle_rad, int n_antennas, double spacing) {
  std::vector<cplx> a(static_cast<std::size_t>(n_antennas));
  const double phase_step = 2.0 * kPi * spacing * std::sin(angle_rad);
  for (int n = 0; n < n_antennas; ++n) a[n] = std::polar(1.0, phase_step * n);
  return a;
}

UeState draw_ue(const SimConfig& config, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  UeState ue;
  ue.distance_m = config.distance_min_m + (config.distance_max_m - config.distance_min_m) * unit(rng);
  const double az_deg =
      config.azimuth_min_deg + (config.azimuth_max_deg - config.azimuth_min_deg) * unit(rng);
  ue.azimuth_rad = az_deg * kPi / 180.0;
  ue.speed_mps = config.speed_max_mps() * unit(rng);
  ue.heading_rad = 2.0 * kPi * unit(rng);
  if (ue.heading_rad >= 2.0 * kPi) ue.heading_rad = 0.0;
  ue.scene = unit(rng) < config.los_fraction ? 0 : 1;
  return ue;
}

PathSet draw_paths(const UeState& ue, const SimConfig& config, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double fd_max = ue.speed_mps / config.wavelength();
  const bool los = ue.scene == 0;
  const int n_paths = los ? config.paths_los : config.paths_nlos;
  const double spread_rad =
      (los ? config.los_weak_spread_deg : config.nlos_spread_deg) * kPi / 180.0;
  const double delay_spread = los ? config.los_delay_spread_s : config.nlos_delay_spread_s;

  PathSet set;
  set.paths.reserve(static_cast<std::size_t>(n_paths));
  for (int p = 0; p < n_paths; ++p) {
    Path path;
    path.dominant = los && p == 0;
    if (path.dominant) {
      path.gain = cplx(1.0, 0.0);
      path.aoa_offset_rad = 0.0;
      path.delay_s = 0.0;
      // Arrival at the UE from the BS direction.
      path.doppler_hz = fd_max * std::cos(ue.heading_rad - (ue.azimuth_rad + kPi));
    } else {
      path.gain = cplx(normal(rng), normal(rng)) * std::sqrt(0.5);
      path.aoa_offset_rad = spread_rad * normal(rng);
      path.delay_s = -delay_spread * std::log(1.0 - unit(rng));
      path.doppler_hz = fd_max * std::cos(2.0 * kPi * unit(rng));
    }
    set.paths.push_back(path);
  }

  // Scattered paths share the non-dominant power; LOS splits K/(K+1) : 1/(K+1).
  const double scattered = set.scattered_power();
  double scattered_target = 1.0;
  if (los) {
    const double k_lin = db_to_linear(config.rician_k_db);
    set.paths[0].gain = cplx(std::sqrt(k_lin / (k_lin + 1.0)), 0.0);
    scattered_target = 1.0 / (k_lin + 1.0);
    if (n_paths == 1) set.paths[0].gain = cplx(1.0, 0.0);
  }
  if (scattered > 0.0) {
    const double scale = std::sqrt(scattered_target / scattered);
    for (auto& path : set.paths)
      if (!path.dominant) path.gain *= scale;
  }
  return set;
}

ChannelSequence synthesize_from_paths(const UeState& ue, const PathSet& paths,
                                      const SimConfig& config) {
  const int slots = config.seq_len;
  const int K = config.num_subcarriers;
  const int Nr = config.num_antennas;

  ChannelSequence seq;
  seq.slots = slots;
  seq.subcarriers = K;
  seq.antennas = Nr;
  seq.ue = ue;
  seq.path_set = paths;
  seq.h.assign(static_cast<std::size_t>(slots) * K * Nr, cplx(0.0, 0.0));
  seq.azimuth_track.resize(static_cast<std::size_t>(slots));
  seq.distance_track.resize(static_cast<std::size_t>(slots));

  double az = ue.azimuth_rad;
  double dist = ue.distance_m;
  double heading = ue.heading_rad;
  const double dt = config.slot_interval_s;
  for (int t = 0; t < slots; ++t) {
    seq.azimuth_track[t] = az;
    seq.distance_track[t] = dist;
    // First-order kinematics: transverse velocity rotates the azimuth,
    // radial velocity changes the range.
    double rel = heading - az;
    double next_dist = dist + ue.speed_mps * std::cos(rel) * dt;
    if (next_dist < config.min_distance_m) {
      heading = kPi + 2.0 * az - heading;
      rel = heading - az;
      next_dist = dist + ue.speed_mps * std::cos(rel) * dt;
    }
    const double next_az = az + ue.speed_mps * std::sin(rel) / dist * dt;
    az = next_az;
    dist = next_dist;
  }

  const double fspl_db = 20.0 * std::log10(4.0 * kPi / config.wavelength());
  const double exponent = ue.scene == 0 ? config.pathloss_exp_los : config.pathloss_exp_nlos;
  for (int t = 0; t < slots; ++t) {
    const double pl_db = fspl_db + 10.0 * exponent * std::log10(seq.distance_track[t]);
    const double amp = std::sqrt(db_to_linear(-pl_db));
    for (const auto& path : paths.paths) {
      const auto a = steering_vector(seq.azimuth_track[t] + path.aoa_offset_rad, Nr,
                                     config.element_spacing);
      const double time_phase = 2.0 * kPi * path.doppler_hz * t * dt;
      for (int k = 0; k < K; ++k) {
        const double phase =
            time_phase - 2.0 * kPi * k * config.subcarrier_spacing_hz * path.delay_s;
        const cplx coef = amp * path.gain * std::polar(1.0, phase);
        auto hk = seq.at(t, k);
        for (int n = 0; n < Nr; ++n) hk[n] += coef * a[n];
      }
    }
  }
  return seq;
}

ChannelSequence synthesize_sequence(const UeState& ue, const SimConfig& config, Rng& rng) {
  const PathSet paths = draw_paths(ue, config, rng);
  return synthesize_from_paths(ue, paths, config);
}

ChannelSequence generate_ue_sequence(const SimConfig& config, std::uint64_t index) {
  Rng rng(derive_seed(config.rng_seed, index));
  const UeState ue = draw_ue(config, rng);
  return synthesize_sequence(ue, config, rng);
}

std::vector<ChannelSequence> generate_sequences(const SimConfig& config, std::size_t count,
                                                int threads) {
  config.validate();
  std::vector<ChannelSequence> out(count);
  const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(count)));
  if (n_threads == 1) {
    for (std::size_t i = 0; i < count; ++i) out[i] = generate_ue_sequence(config, i);
    return out;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < n_threads; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < count; i += n_threads) out[i] = generate_ue_sequence(config, i);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

}  // namespace beamcast
