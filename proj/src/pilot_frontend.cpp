#include "beamcast/pilot_frontend.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace beamcast {

CMatrix build_dft_codebook(int n_antennas) {
  if (n_antennas < 1) throw ConfigError("DFT codebook needs at least one antenna");
  const double norm = 1.0 / std::sqrt(static_cast<double>(n_antennas));
  CMatrix f(n_antennas, n_antennas);
  for (int i = 0; i < n_antennas; ++i) {
    for (int n = 0; n < n_antennas; ++n) {
      // Reduce n*i first so the phase stays exact for large arrays.
      const long long ni = (static_cast<long long>(n) * i) % n_antennas;
      f(n, i) = norm * std::polar(1.0, 2.0 * kPi * static_cast<double>(ni) / n_antennas);
    }
  }
  return f;
}

WideBeamCodebook build_wide_codebook(const CMatrix& dft, int group_size) {
  const int n = static_cast<int>(dft.cols());
  if (group_size < 1 || n % group_size != 0)
    throw ConfigError("wide-beam group size " + std::to_string(group_size) +
                      " does not divide the array size " + std::to_string(n));
  WideBeamCodebook cb;
  cb.dft_base = dft;
  cb.group_size = group_size;
  const int s_w = n / group_size;
  cb.f_rf.resize(dft.rows(), s_w);
  for (int g = 0; g < s_w; ++g) {
    Eigen::VectorXcd col = dft.middleCols(g * group_size, group_size).rowwise().sum();
    cb.f_rf.col(g) = col / col.norm();
  }
  return cb;
}

std::vector<cplx> zc_sequence(int root, int length) {
  if (length < 1 || length % 2 == 0)
    throw ConfigError("Zadoff-Chu length must be odd, got " + std::to_string(length));
  if (root <= 0 || root >= length || std::gcd(root, length) != 1)
    throw ConfigError("Zadoff-Chu root " + std::to_string(root) + " is not coprime to length " +
                      std::to_string(length));
  std::vector<cplx> x(static_cast<std::size_t>(length));
  for (int n = 0; n < length; ++n) {
    // u n (n+1) is even, so the phase can be reduced mod 2N exactly.
    const long long num = (static_cast<long long>(root) * n * (n + 1)) % (2LL * length);
    x[n] = std::polar(1.0, -kPi * static_cast<double>(num) / length);
  }
  return x;
}

void SoundingConfig::validate(int codebook_size, int num_subcarriers) const {
  if (n_rf_chains < 1) throw ConfigError("sounding.n_rf_chains must be >= 1");
  if (codebook_size % n_rf_chains != 0)
    throw ConfigError("codebook size " + std::to_string(codebook_size) +
                      " is not a multiple of n_rf_chains " + std::to_string(n_rf_chains));
  if (!(tx_power_mw > 0.0)) throw ConfigError("sounding.tx_power_mw must be positive");
  if (num_subcarriers < 3) throw ConfigError("sounding needs at least 3 subcarriers for ZC pilots");
  const int n_sym = n_ofdm_symbols(codebook_size);
  if (!zc_roots.empty()) {
    if (static_cast<int>(zc_roots.size()) != n_sym)
      throw ConfigError("sounding.zc_roots must list one root per OFDM symbol (" +
                        std::to_string(n_sym) + ")");
    const int len = zc_length_for(num_subcarriers);
    for (std::size_t i = 0; i < zc_roots.size(); ++i) {
      const int u = zc_roots[i];
      if (u <= 0 || u >= len || std::gcd(u, len) != 1)
        throw ConfigError("sounding.zc_roots entry " + std::to_string(u) +
                          " is not coprime to ZC length " + std::to_string(len));
      for (std::size_t j = 0; j < i; ++j)
        if (zc_roots[j] == u) throw ConfigError("sounding.zc_roots must be pairwise distinct");
    }
  }
}

int zc_length_for(int num_subcarriers) {
  return num_subcarriers % 2 == 1 ? num_subcarriers : num_subcarriers - 1;
}

std::vector<int> default_zc_roots(int zc_length, int count) {
  std::vector<int> roots;
  for (int u = 1; u < zc_length && static_cast<int>(roots.size()) < count; ++u)
    if (std::gcd(u, zc_length) == 1) roots.push_back(u);
  if (static_cast<int>(roots.size()) < count)
    throw ConfigError("not enough Zadoff-Chu roots coprime to length " +
                      std::to_string(zc_length));
  return roots;
}

PilotSet build_pilots(int num_subcarriers, const SoundingConfig& config, int codebook_size) {
  config.validate(codebook_size, num_subcarriers);
  PilotSet set;
  set.zc_length = zc_length_for(num_subcarriers);
  const int n_sym = config.n_ofdm_symbols(codebook_size);
  set.roots = config.zc_roots.empty() ? default_zc_roots(set.zc_length, n_sym) : config.zc_roots;
  for (int root : set.roots) {
    auto seq = zc_sequence(root, set.zc_length);
    while (static_cast<int>(seq.size()) < num_subcarriers) seq.push_back(seq.back());
    set.symbols.push_back(std::move(seq));
  }
  return set;
}

CMatrix build_digital_precoder(int subcarrier, int n_rf_chains) {
  const CMatrix dft = build_dft_codebook(n_rf_chains);
  const int shift = ((subcarrier % n_rf_chains) + n_rf_chains) % n_rf_chains;
  CMatrix out(n_rf_chains, n_rf_chains);
  for (int j = 0; j < n_rf_chains; ++j) out.col(j) = dft.col((j + shift) % n_rf_chains);
  return out;
}

SoundingFrontend SoundingFrontend::build(const SimConfig& sim, const SoundingConfig& sounding,
                                         int group_size) {
  SoundingFrontend fe;
  fe.codebook = build_wide_codebook(build_dft_codebook(sim.num_antennas), group_size);
  fe.config = sounding;
  fe.num_subcarriers = sim.num_subcarriers;
  fe.pilots = build_pilots(sim.num_subcarriers, sounding, fe.codebook.size());
  fe.precoders.reserve(static_cast<std::size_t>(sim.num_subcarriers));
  for (int k = 0; k < sim.num_subcarriers; ++k) {
    fe.precoders.push_back(sounding.identity_digital_precoder
                               ? CMatrix::Identity(sounding.n_rf_chains, sounding.n_rf_chains)
                               : build_digital_precoder(k, sounding.n_rf_chains));
  }
  return fe;
}

CMatrix sound_slot(std::span<const cplx> h_slot, const SoundingFrontend& fe, Rng& rng) {
  const int K = fe.num_subcarriers;
  const int Nr = fe.codebook.num_antennas();
  const int S_w = fe.codebook.size();
  const int n_rf = fe.config.n_rf_chains;
  const int n_sym = fe.config.n_ofdm_symbols(S_w);
  if (h_slot.size() != static_cast<std::size_t>(K) * Nr)
    throw ConfigError("sound_slot: channel slot has " + std::to_string(h_slot.size()) +
                      " entries, expected K*N_r = " + std::to_string(K * Nr));

  const double amp = std::sqrt(fe.config.tx_power_mw / K);
  const double noise_std = std::sqrt(dbm_to_mw(fe.config.noise_power_dbm) / 2.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  CMatrix p(K, S_w);
  Eigen::VectorXcd rx(Nr);
  for (int k = 0; k < K; ++k) {
    const Eigen::Map<const Eigen::VectorXcd> h(h_slot.data() + static_cast<std::size_t>(k) * Nr,
                                               Nr);
    for (int l = 0; l < n_sym; ++l) {
      rx = amp * fe.pilots.at(k, l) * h;
      if (fe.config.noise_enabled) {
        for (int n = 0; n < Nr; ++n) rx(n) += cplx(noise_std * normal(rng), noise_std * normal(rng));
      }
      const auto f_rf_l = fe.codebook.f_rf.middleCols(l * n_rf, n_rf);
      p.row(k).segment(l * n_rf, n_rf) =
          (fe.precoders[k].adjoint() * (f_rf_l.adjoint() * rx)).transpose();
    }
  }
  return p;
}

std::vector<double> codeword_powers(std::span<const cplx> h_slot, int num_subcarriers,
                                    const WideBeamCodebook& codebook) {
  const int Nr = codebook.num_antennas();
  const int S_w = codebook.size();
  std::vector<double> power(static_cast<std::size_t>(S_w), 0.0);
  for (int k = 0; k < num_subcarriers; ++k) {
    const Eigen::Map<const Eigen::VectorXcd> h(h_slot.data() + static_cast<std::size_t>(k) * Nr,
                                               Nr);
    const Eigen::VectorXcd proj = codebook.f_rf.adjoint() * h;
    for (int g = 0; g < S_w; ++g) power[g] += std::norm(proj(g));
  }
  for (auto& p : power) p /= num_subcarriers;
  return power;
}

int compute_beam_label(std::span<const cplx> h_slot, int num_subcarriers,
                       const WideBeamCodebook& codebook) {
  const auto power = codeword_powers(h_slot, num_subcarriers, codebook);
  int best = 0;
  for (int g = 1; g < static_cast<int>(power.size()); ++g)
    if (power[g] > power[best]) best = g;
  return best;
}

template <typename T>
void normalize_in_place(std::span<T> values) {
  if (values.empty()) throw DegenerateSampleError("cannot normalize an empty tensor");
  double mean = 0.0;
  for (T v : values) mean += static_cast<double>(v);
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (T v : values) {
    const double d = static_cast<double>(v) - mean;
    var += d * d;
  }
  var /= static_cast<double>(values.size());
  if (!std::isfinite(mean) || !std::isfinite(var))
    throw DegenerateSampleError("non-finite values in observation tensor");
  if (!(var > 0.0)) throw DegenerateSampleError("observation tensor has zero variance");
  const double inv_std = 1.0 / std::sqrt(var);
  for (T& v : values) v = static_cast<T>((static_cast<double>(v) - mean) * inv_std);
}

template void normalize_in_place<float>(std::span<float>);
template void normalize_in_place<double>(std::span<double>);

ObservationTensor split_normalize(std::span<const CMatrix> p_seq) {
  if (p_seq.empty()) throw DegenerateSampleError("empty observation sequence");
  ObservationTensor obs;
  obs.slots = static_cast<int>(p_seq.size());
  obs.subcarriers = static_cast<int>(p_seq[0].rows());
  obs.codewords = static_cast<int>(p_seq[0].cols());
  const std::size_t plane = static_cast<std::size_t>(obs.subcarriers) * obs.codewords;

  std::vector<double> work(obs.slots * obs.frame_size());
  for (int t = 0; t < obs.slots; ++t) {
    const CMatrix& p = p_seq[t];
    if (p.rows() != obs.subcarriers || p.cols() != obs.codewords)
      throw ConfigError("split_normalize: inconsistent slot shapes");
    double* re = work.data() + t * obs.frame_size();
    double* im = re + plane;
    for (int k = 0; k < obs.subcarriers; ++k) {
      for (int g = 0; g < obs.codewords; ++g) {
        const cplx v = p(k, g);
        if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
          throw DegenerateSampleError("non-finite observation entry");
        re[k * obs.codewords + g] = v.real();
        im[k * obs.codewords + g] = v.imag();
      }
    }
  }
  normalize_in_place<double>(work);
  obs.x.assign(work.begin(), work.end());
  return obs;
}

}  // namespace beamcast
