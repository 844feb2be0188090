#pragma once

// Model-ready records and the on-disk dataset container (see docs/formats.md).

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "beamcast/channel_sim.hpp"
#include "beamcast/pilot_frontend.hpp"

namespace beamcast {

inline constexpr char kDatasetMagic[8] = {'B', 'C', 'A', 'S', 'T', 'D', 'S', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct UeSummary {
  float distance_m = 0.0f;
  float azimuth_rad = 0.0f;
  float speed_mps = 0.0f;
  float heading_rad = 0.0f;
};

struct DatasetRecord {
  ObservationTensor x;
  int scene = 0;
  float speed_norm = 0.0f;
  std::vector<std::int32_t> beam_labels;  // T+1 raw codeword indices
  std::int32_t class_id = 0;
  UeSummary ue_meta;

  int target_raw() const { return beam_labels.back(); }
  int last_observed_raw() const { return beam_labels[beam_labels.size() - 2]; }

  bool operator==(const DatasetRecord& other) const;
};

struct DatasetContainer {
  std::uint32_t version = kDatasetVersion;
  int slots = 0;  // T
  int subcarriers = 0;
  int codewords = 0;
  int num_classes = 0;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> remap;  // (raw, class), raw ascending
  std::vector<DatasetRecord> records;

  std::size_t size() const { return records.size(); }
  bool operator==(const DatasetContainer& other) const;
};

struct DatasetOptions {
  // Records whose target label occurs fewer times than the threshold are
  // dropped. An explicit count wins over the fractional threshold.
  double min_class_fraction = 0.011;
  std::optional<std::size_t> min_class_count;
  double speed_norm_kmh = 120.0;
  int group_size = 2;
  int threads = 1;
};

float normalized_speed(double speed_mps, double speed_norm_kmh = 120.0);

/// Sound and label one channel sequence. `beam_labels` covers all slots,
/// the observation only the first T.
DatasetRecord make_record(const ChannelSequence& seq, const SoundingFrontend& frontend,
                          std::uint64_t sounding_seed, double speed_norm_kmh);

/// Filter rare target classes and remap survivors onto [0, C).
DatasetContainer finalize_records(std::vector<DatasetRecord> records, int slots,
                                  const DatasetOptions& options);

DatasetContainer assemble_dataset(std::span<const ChannelSequence> sequences,
                                  const SimConfig& sim, const SoundingConfig& sounding,
                                  const DatasetOptions& options);

std::vector<bool> transition_flags(std::span<const DatasetRecord> records);

struct DatasetSplit {
  DatasetContainer train;
  DatasetContainer val;
  DatasetContainer test;
};

/// Record-level shuffle followed by a ratio split (default 70/15/15).
DatasetSplit split_dataset(const DatasetContainer& all, std::uint64_t seed,
                           std::array<double, 3> ratios = {0.70, 0.15, 0.15});

void write_dataset(const DatasetContainer& ds, const std::filesystem::path& path);
DatasetContainer read_dataset(const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_dataset(const DatasetContainer& ds);
DatasetContainer deserialize_dataset(std::span<const std::uint8_t> bytes);

struct DatasetStats {
  std::size_t records = 0;
  int num_classes = 0;
  std::map<int, std::size_t> class_histogram;
  std::size_t transitions = 0;
  std::array<std::size_t, 4> quadrant_counts{};

  double transition_fraction() const {
    return records ? static_cast<double>(transitions) / static_cast<double>(records) : 0.0;
  }
};

DatasetStats compute_stats(const DatasetContainer& ds);
std::string format_stats(const DatasetStats& stats);

}  // namespace beamcast
