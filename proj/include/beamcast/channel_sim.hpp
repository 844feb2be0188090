#pragma once

// Clustered geometric multipath channel for a BS-side uniform linear array.
//
// Each UE contributes a small set of plane waves (one dominant + weak paths
// under LOS, only scattered paths under NLOS). Path angles follow the UE
// azimuth as it moves, giving slot-to-slot angular drift; per-path Doppler
// and excess delay produce time and frequency selectivity.

#include <cstdint>
#include <span>
#include <vector>

#include "beamcast/common.hpp"

namespace beamcast {

struct SimConfig {
  double carrier_freq_hz = 28e9;
  double subcarrier_spacing_hz = 120e3;
  int num_subcarriers = 60;
  int num_antennas = 64;
  double element_spacing = 0.5;  // in wavelengths
  double slot_interval_s = 0.01;
  int seq_len = 11;  // T + 1
  double distance_min_m = 30.0;
  double distance_max_m = 100.0;
  double azimuth_min_deg = -60.0;
  double azimuth_max_deg = 60.0;
  double speed_max_kmh = 120.0;
  double los_fraction = 0.5;
  int paths_los = 4;  // dominant + weak
  int paths_nlos = 6;
  double rician_k_db = 10.0;
  double los_weak_spread_deg = 8.0;
  double nlos_spread_deg = 20.0;
  double los_delay_spread_s = 60e-9;
  double nlos_delay_spread_s = 150e-9;
  double pathloss_exp_los = 2.0;
  double pathloss_exp_nlos = 3.0;
  double min_distance_m = 1.0;  // reflect radial motion below this
  std::uint64_t rng_seed = 1;

  void validate() const;
  double wavelength() const { return kSpeedOfLight / carrier_freq_hz; }
  double speed_max_mps() const { return speed_max_kmh / 3.6; }
};

struct UeState {
  double distance_m = 0.0;
  double azimuth_rad = 0.0;
  double speed_mps = 0.0;
  double heading_rad = 0.0;
  int scene = 0;  // 0 = LOS, 1 = NLOS
};

struct Path {
  cplx gain;
  double aoa_offset_rad = 0.0;  // relative to the UE azimuth
  double delay_s = 0.0;
  double doppler_hz = 0.0;
  bool dominant = false;
};

struct PathSet {
  std::vector<Path> paths;

  double dominant_power() const;
  double scattered_power() const;
};

/// h(t, k, n) stored row-major over (slot, subcarrier, antenna).
struct ChannelSequence {
  int slots = 0;
  int subcarriers = 0;
  int antennas = 0;
  std::vector<cplx> h;
  UeState ue;  // state at the first slot
  PathSet path_set;
  std::vector<double> azimuth_track;   // per slot
  std::vector<double> distance_track;  // per slot

  std::span<const cplx> slot(int t) const;
  std::span<const cplx> at(int t, int k) const;
  std::span<cplx> at(int t, int k);
};

/// a(theta)[n] = exp(j 2 pi n spacing sin(theta)); unnormalized.
std::vector<cplx> steering_vector(double angle_rad, int n_antennas, double spacing);

UeState draw_ue(const SimConfig& config, Rng& rng);

PathSet draw_paths(const UeState& ue, const SimConfig& config, Rng& rng);

/// Deterministic channel synthesis from a fixed UE and path set.
ChannelSequence synthesize_from_paths(const UeState& ue, const PathSet& paths,
                                      const SimConfig& config);

ChannelSequence synthesize_sequence(const UeState& ue, const SimConfig& config, Rng& rng);

/// UE + channel for sequence `index` under the configured master seed.
ChannelSequence generate_ue_sequence(const SimConfig& config, std::uint64_t index);

std::vector<ChannelSequence> generate_sequences(const SimConfig& config, std::size_t count,
                                                int threads = 1);

}  // namespace beamcast
