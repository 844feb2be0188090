#pragma once

// Codebooks, pilots and the compressed hybrid-combining uplink sounding.

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "beamcast/channel_sim.hpp"
#include "beamcast/common.hpp"

namespace beamcast {

using CMatrix = Eigen::MatrixXcd;

/// Column i is (1/sqrt(N)) exp(j 2 pi n i / N), n = 0..N-1.
CMatrix build_dft_codebook(int n_antennas);

struct WideBeamCodebook {
  CMatrix f_rf;      // N_r x S_w, unit-norm columns
  CMatrix dft_base;  // N_r x N_r
  int group_size = 1;

  int num_antennas() const { return static_cast<int>(f_rf.rows()); }
  int size() const { return static_cast<int>(f_rf.cols()); }
};

/// Codeword g is the normalized sum of DFT columns g*m .. g*m + m - 1.
WideBeamCodebook build_wide_codebook(const CMatrix& dft, int group_size);

/// Zadoff-Chu root sequence of odd length N: exp(-j pi u n (n+1) / N).
std::vector<cplx> zc_sequence(int root, int length);

struct SoundingConfig {
  int n_rf_chains = 8;
  double tx_power_mw = 200.0;
  double noise_power_dbm = -123.0;
  std::vector<int> zc_roots;  // empty: first coprime roots are chosen
  // Test hooks.
  bool noise_enabled = true;
  bool identity_digital_precoder = false;

  int n_ofdm_symbols(int codebook_size) const { return codebook_size / n_rf_chains; }
  void validate(int codebook_size, int num_subcarriers) const;
};

/// Pilots per OFDM symbol, each of length K. For even K the ZC sequence is
/// generated at length K-1 and the last element repeated.
struct PilotSet {
  int zc_length = 0;
  std::vector<int> roots;
  std::vector<std::vector<cplx>> symbols;  // [l][k]

  cplx at(int k, int l) const { return symbols[l][k]; }
};

int zc_length_for(int num_subcarriers);
std::vector<int> default_zc_roots(int zc_length, int count);
PilotSet build_pilots(int num_subcarriers, const SoundingConfig& config, int codebook_size);

/// N_rf-point DFT with columns cyclically rotated by (k mod N_rf).
CMatrix build_digital_precoder(int subcarrier, int n_rf_chains);

/// Everything needed to sound one slot, built once per dataset.
struct SoundingFrontend {
  WideBeamCodebook codebook;
  std::vector<CMatrix> precoders;  // per subcarrier
  PilotSet pilots;
  SoundingConfig config;
  int num_subcarriers = 0;

  static SoundingFrontend build(const SimConfig& sim, const SoundingConfig& sounding,
                                int group_size);
};

/// Observation P_t (K x S_w) for one slot of channel h (K x N_r, row-major).
CMatrix sound_slot(std::span<const cplx> h_slot, const SoundingFrontend& frontend, Rng& rng);

/// argmax_g (1/K) sum_k |f_g^H h_k|^2, ties to the smallest index.
int compute_beam_label(std::span<const cplx> h_slot, int num_subcarriers,
                       const WideBeamCodebook& codebook);

/// Average received power per codeword, in codeword order.
std::vector<double> codeword_powers(std::span<const cplx> h_slot, int num_subcarriers,
                                    const WideBeamCodebook& codebook);

/// Real tensor of shape T x 2 x K x S_w.
struct ObservationTensor {
  int slots = 0;
  int subcarriers = 0;
  int codewords = 0;
  std::vector<float> x;

  std::size_t frame_size() const {
    return 2 * static_cast<std::size_t>(subcarriers) * codewords;
  }
};

/// Zero-mean unit-variance over all elements (population variance).
/// Throws DegenerateSampleError when the variance is zero.
template <typename T>
void normalize_in_place(std::span<T> values);

/// Stack real/imag parts on the channel axis and normalize per sample.
ObservationTensor split_normalize(std::span<const CMatrix> p_seq);

}  // namespace beamcast
