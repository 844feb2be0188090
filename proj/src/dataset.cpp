#include "beamcast/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "beamcast/quadrant.hpp"

namespace beamcast {

namespace {

// Little-endian byte writer/reader.
class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const char* data, std::size_t n) { bytes_.insert(bytes_.end(), data, data + n); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  void raw(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("dataset container truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

bool DatasetRecord::operator==(const DatasetRecord& o) const {
  return x.slots == o.x.slots && x.subcarriers == o.x.subcarriers &&
         x.codewords == o.x.codewords && x.x.size() == o.x.x.size() &&
         std::memcmp(x.x.data(), o.x.x.data(), x.x.size() * sizeof(float)) == 0 &&
         scene == o.scene &&
         std::bit_cast<std::uint32_t>(speed_norm) == std::bit_cast<std::uint32_t>(o.speed_norm) &&
         beam_labels == o.beam_labels && class_id == o.class_id &&
         std::memcmp(&ue_meta, &o.ue_meta, sizeof(UeSummary)) == 0;
}

bool DatasetContainer::operator==(const DatasetContainer& o) const {
  return version == o.version && slots == o.slots && subcarriers == o.subcarriers &&
         codewords == o.codewords && num_classes == o.num_classes && remap == o.remap &&
         records == o.records;
}

float normalized_speed(double speed_mps, double speed_norm_kmh) {
  const double v = 3.6 * speed_mps / speed_norm_kmh;
  return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

DatasetRecord make_record(const ChannelSequence& seq, const SoundingFrontend& frontend,
                          std::uint64_t sounding_seed, double speed_norm_kmh) {
  const int T = seq.slots - 1;
  DatasetRecord rec;
  rec.beam_labels.resize(static_cast<std::size_t>(seq.slots));
  for (int t = 0; t < seq.slots; ++t)
    rec.beam_labels[t] = compute_beam_label(seq.slot(t), seq.subcarriers, frontend.codebook);

  Rng rng(sounding_seed);
  std::vector<CMatrix> p_seq;
  p_seq.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) p_seq.push_back(sound_slot(seq.slot(t), frontend, rng));
  rec.x = split_normalize(p_seq);

  rec.scene = seq.ue.scene;
  rec.speed_norm = normalized_speed(seq.ue.speed_mps, speed_norm_kmh);
  rec.ue_meta = {static_cast<float>(seq.ue.distance_m), static_cast<float>(seq.ue.azimuth_rad),
                 static_cast<float>(seq.ue.speed_mps), static_cast<float>(seq.ue.heading_rad)};
  rec.class_id = -1;
  return rec;
}

DatasetContainer finalize_records(std::vector<DatasetRecord> records, int slots,
                                  const DatasetOptions& options) {
  if (records.empty()) throw EmptyDatasetError("no records to assemble");
  std::map<int, std::size_t> counts;
  for (const auto& r : records) ++counts[r.target_raw()];

  const double n = static_cast<double>(records.size());
  auto keep = [&](std::size_t c) {
    if (options.min_class_count) return c >= *options.min_class_count;
    return static_cast<double>(c) >= options.min_class_fraction * n;
  };

  DatasetContainer ds;
  ds.slots = slots;
  ds.subcarriers = records.front().x.subcarriers;
  ds.codewords = records.front().x.codewords;
  std::map<int, int> raw_to_class;
  for (const auto& [raw, c] : counts) {
    if (keep(c)) {
      const int cls = static_cast<int>(raw_to_class.size());
      raw_to_class[raw] = cls;
      ds.remap.emplace_back(static_cast<std::uint32_t>(raw), static_cast<std::uint32_t>(cls));
    }
  }
  if (raw_to_class.empty())
    throw EmptyDatasetError("every beam class fell below the rare-class threshold");
  ds.num_classes = static_cast<int>(raw_to_class.size());

  ds.records.reserve(records.size());
  for (auto& r : records) {
    auto it = raw_to_class.find(r.target_raw());
    if (it == raw_to_class.end()) continue;
    r.class_id = it->second;
    ds.records.push_back(std::move(r));
  }
  return ds;
}

DatasetContainer assemble_dataset(std::span<const ChannelSequence> sequences,
                                  const SimConfig& sim, const SoundingConfig& sounding,
                                  const DatasetOptions& options) {
  if (sequences.empty()) throw EmptyDatasetError("assemble_dataset needs at least one sequence");
  const auto frontend = SoundingFrontend::build(sim, sounding, options.group_size);
  const std::uint64_t sounding_master = derive_seed(sim.rng_seed, 0x50494c4fULL);

  std::vector<DatasetRecord> records(sequences.size());
  auto work = [&](std::size_t i) {
    records[i] = make_record(sequences[i], frontend, derive_seed(sounding_master, i),
                             options.speed_norm_kmh);
  };
  const int n_threads =
      std::max(1, std::min<int>(options.threads, static_cast<int>(sequences.size())));
  if (n_threads == 1) {
    for (std::size_t i = 0; i < sequences.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < n_threads; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < sequences.size(); i += n_threads) work(i);
      });
    for (auto& th : pool) th.join();
  }
  return finalize_records(std::move(records), sequences.front().slots - 1, options);
}

std::vector<bool> transition_flags(std::span<const DatasetRecord> records) {
  std::vector<bool> flags;
  flags.reserve(records.size());
  for (const auto& r : records) {
    if (r.beam_labels.size() < 2) throw ConfigError("transition flag needs at least two labels");
    flags.push_back(r.last_observed_raw() != r.target_raw());
  }
  return flags;
}

DatasetSplit split_dataset(const DatasetContainer& all, std::uint64_t seed,
                           std::array<double, 3> ratios) {
  std::vector<std::size_t> order(all.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0x53504c4954ULL));
  std::shuffle(order.begin(), order.end(), rng);

  const double total = ratios[0] + ratios[1] + ratios[2];
  const auto n = static_cast<double>(all.size());
  const auto n_train = static_cast<std::size_t>(std::llround(n * ratios[0] / total));
  const auto n_val =
      std::min(all.size() - n_train, static_cast<std::size_t>(std::llround(n * ratios[1] / total)));

  DatasetSplit split;
  for (DatasetContainer* part : {&split.train, &split.val, &split.test}) {
    part->version = all.version;
    part->slots = all.slots;
    part->subcarriers = all.subcarriers;
    part->codewords = all.codewords;
    part->num_classes = all.num_classes;
    part->remap = all.remap;
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    DatasetContainer& dst = i < n_train ? split.train : (i < n_train + n_val ? split.val : split.test);
    dst.records.push_back(all.records[order[i]]);
  }
  return split;
}

std::vector<std::uint8_t> serialize_dataset(const DatasetContainer& ds) {
  ByteWriter w;
  w.raw(kDatasetMagic, 8);
  w.u32(ds.version);
  w.u32(static_cast<std::uint32_t>(ds.slots));
  w.u32(static_cast<std::uint32_t>(ds.subcarriers));
  w.u32(static_cast<std::uint32_t>(ds.codewords));
  w.u32(static_cast<std::uint32_t>(ds.num_classes));
  w.u64(ds.records.size());
  for (const auto& [raw, cls] : ds.remap) {
    w.u32(raw);
    w.u32(cls);
  }
  const std::size_t x_len = static_cast<std::size_t>(ds.slots) * 2 * ds.subcarriers * ds.codewords;
  for (const auto& r : ds.records) {
    if (r.x.x.size() != x_len || r.beam_labels.size() != static_cast<std::size_t>(ds.slots + 1))
      throw FormatError("record shape does not match container header");
    for (float v : r.x.x) w.f32(v);
    w.i32(r.scene);
    w.f32(r.speed_norm);
    for (auto b : r.beam_labels) w.i32(b);
    w.i32(r.class_id);
    w.f32(r.ue_meta.distance_m);
    w.f32(r.ue_meta.azimuth_rad);
    w.f32(r.ue_meta.speed_mps);
    w.f32(r.ue_meta.heading_rad);
  }
  return std::move(w.bytes());
}

DatasetContainer deserialize_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader rd(bytes);
  char magic[8];
  rd.raw(magic, 8);
  if (std::memcmp(magic, kDatasetMagic, 8) != 0) throw FormatError("bad dataset magic");
  DatasetContainer ds;
  ds.version = rd.u32();
  if (ds.version != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(ds.version));
  ds.slots = static_cast<int>(rd.u32());
  ds.subcarriers = static_cast<int>(rd.u32());
  ds.codewords = static_cast<int>(rd.u32());
  ds.num_classes = static_cast<int>(rd.u32());
  const std::uint64_t count = rd.u64();
  for (int c = 0; c < ds.num_classes; ++c) {
    const auto raw = rd.u32();
    const auto cls = rd.u32();
    ds.remap.emplace_back(raw, cls);
  }
  const std::size_t x_len = static_cast<std::size_t>(ds.slots) * 2 * ds.subcarriers * ds.codewords;
  ds.records.resize(count);
  for (auto& r : ds.records) {
    r.x.slots = ds.slots;
    r.x.subcarriers = ds.subcarriers;
    r.x.codewords = ds.codewords;
    r.x.x.resize(x_len);
    for (auto& v : r.x.x) v = rd.f32();
    r.scene = rd.i32();
    r.speed_norm = rd.f32();
    r.beam_labels.resize(static_cast<std::size_t>(ds.slots + 1));
    for (auto& b : r.beam_labels) b = rd.i32();
    r.class_id = rd.i32();
    r.ue_meta.distance_m = rd.f32();
    r.ue_meta.azimuth_rad = rd.f32();
    r.ue_meta.speed_mps = rd.f32();
    r.ue_meta.heading_rad = rd.f32();
    if (r.class_id < 0 || r.class_id >= ds.num_classes)
      throw FormatError("record class id out of range");
  }
  if (!rd.done()) throw FormatError("trailing bytes after dataset records");
  return ds;
}

void write_dataset(const DatasetContainer& ds, const std::filesystem::path& path) {
  const auto bytes = serialize_dataset(ds);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw MissingArtifactError("cannot open dataset for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw MissingArtifactError("failed writing dataset: " + path.string());
}

DatasetContainer read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("dataset file not found: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize_dataset(bytes);
}

DatasetStats compute_stats(const DatasetContainer& ds) {
  DatasetStats s;
  s.records = ds.size();
  s.num_classes = ds.num_classes;
  const auto flags = transition_flags(ds.records);
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    ++s.class_histogram[r.class_id];
    if (flags[i]) ++s.transitions;
    ++s.quadrant_counts[hard_assignment(r.scene, r.speed_norm)];
  }
  return s;
}

std::string format_stats(const DatasetStats& stats) {
  std::ostringstream os;
  os << "records=" << stats.records << "\n";
  os << "classes=" << stats.num_classes << "\n";
  os << "transition_count=" << stats.transitions << "\n";
  os << "transition_fraction=" << stats.transition_fraction() << "\n";
  for (int q = 0; q < 4; ++q) os << "quadrant." << kQuadrantNames[q] << "=" << stats.quadrant_counts[q] << "\n";
  for (const auto& [cls, n] : stats.class_histogram) os << "class." << cls << "=" << n << "\n";
  return os.str();
}

}  // namespace beamcast
