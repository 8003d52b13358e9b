#include "vap/vap_codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace vap {

BinConfig BinConfig::from_seconds(std::array<double, kNumBins> boundaries_sec, const FrameGrid& grid) {
  BinConfig cfg;
  for (int b = 0; b < kNumBins; ++b) {
    cfg.boundaries_frames[b] = static_cast<int>(std::lround(boundaries_sec[b] * grid.frame_rate_hz));
  }
  cfg.validate();
  return cfg;
}

void BinConfig::validate() const {
  int prev = 0;
  for (int b : boundaries_frames) {
    if (b <= prev) throw ConfigError("bin boundaries must be strictly increasing and positive");
    prev = b;
  }
}

VapState::VapState(int index) {
  if (index < 0 || index >= kNumStates) throw DomainError("state index out of range: " + std::to_string(index));
  index_ = static_cast<std::uint8_t>(index);
}

int encode_state(const StateBits& bits) {
  int index = 0;
  for (int s = 0; s < kNumSpeakers; ++s) {
    for (int b = 0; b < kNumBins; ++b) {
      if (bits[s][b]) index |= 1 << (kNumBins * s + b);
    }
  }
  return index;
}

StateBits decode_state(int index) {
  const VapState state(index);
  StateBits bits{};
  for (int s = 0; s < kNumSpeakers; ++s) {
    for (int b = 0; b < kNumBins; ++b) bits[s][b] = state.bit(s, b);
  }
  return bits;
}

VapDistribution VapDistribution::uniform() {
  VapDistribution d;
  d.probs.fill(1.0 / kNumStates);
  return d;
}

VapDistribution VapDistribution::one_hot(int index) {
  VapDistribution d;
  d.probs[VapState(index).index()] = 1.0;
  return d;
}

namespace {
template <class T>
VapDistribution softmax_distribution(std::span<const T> logits) {
  if (logits.size() != kNumStates) throw DimensionError("expected 256 logits");
  const double m = *std::max_element(logits.begin(), logits.end());
  VapDistribution d;
  double z = 0.0;
  for (int i = 0; i < kNumStates; ++i) {
    d.probs[i] = std::exp(static_cast<double>(logits[i]) - m);
    z += d.probs[i];
  }
  for (auto& p : d.probs) p /= z;
  return d;
}
}  // namespace

VapDistribution VapDistribution::from_logits(std::span<const float> logits) { return softmax_distribution(logits); }
VapDistribution VapDistribution::from_logits(std::span<const double> logits) { return softmax_distribution(logits); }

void VapDistribution::validate() const {
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0)) throw ValidationError("distribution has a negative or NaN entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ValidationError("distribution does not sum to 1");
}

VapState discretize_window(std::span<const std::uint8_t> speaker0, std::span<const std::uint8_t> speaker1,
                           const BinConfig& cfg) {
  const auto n = static_cast<std::size_t>(cfg.window_frames());
  if (speaker0.size() != n || speaker1.size() != n) {
    throw DimensionError("discretize_window: expected " + std::to_string(n) + " frames per speaker");
  }
  StateBits bits{};
  const std::span<const std::uint8_t> tracks[kNumSpeakers] = {speaker0, speaker1};
  for (int s = 0; s < kNumSpeakers; ++s) {
    for (int b = 0; b < kNumBins; ++b) {
      const auto first = tracks[s].begin() + cfg.bin_begin(b);
      const int voiced = static_cast<int>(std::count_if(first, first + cfg.bin_width(b), [](auto v) { return v != 0; }));
      bits[s][b] = 2 * voiced > cfg.bin_width(b);
    }
  }
  return VapState(encode_state(bits));
}

BinMarginals bin_marginals(const VapDistribution& d) {
  BinMarginals m{};
  for (int y = 0; y < kNumStates; ++y) {
    const VapState state(y);
    for (int s = 0; s < kNumSpeakers; ++s) {
      for (int b = 0; b < kNumBins; ++b) {
        if (state.bit(s, b)) m[s][b] += d.probs[y];
      }
    }
  }
  for (auto& row : m) {
    for (auto& v : row) v = std::clamp(v, 0.0, 1.0);
  }
  return m;
}

namespace {
std::array<double, kNumSpeakers> softmax2(double a, double b) {
  const double m = std::max(a, b);
  const double ea = std::exp(a - m), eb = std::exp(b - m);
  return {ea / (ea + eb), eb / (ea + eb)};
}
}  // namespace

ProjectionSummary project_now_future(const VapDistribution& d, const BinConfig& cfg) {
  const auto m = bin_marginals(d);
  auto weight = [&](int b) {
    return cfg.width_weighted ? static_cast<double>(cfg.bin_width(b)) / cfg.window_frames() : 1.0;
  };
  std::array<double, kNumSpeakers> now{}, future{};
  for (int s = 0; s < kNumSpeakers; ++s) {
    now[s] = weight(0) * m[s][0] + weight(1) * m[s][1];
    future[s] = weight(2) * m[s][2] + weight(3) * m[s][3];
  }
  return {softmax2(now[0], now[1]), softmax2(future[0], future[1])};
}

std::vector<VapState> label_stream(const VadStream& vad, const BinConfig& cfg, Diagnostics* diag) {
  const std::size_t window = static_cast<std::size_t>(cfg.window_frames());
  const std::size_t n = vad.n_frames();
  if (n < window + 1) {
    warn(diag, "label_stream", "stream of " + std::to_string(n) + " frames is too short to label");
    return {};
  }
  // prefix[s][i] = voiced frames of speaker s in [0, i)
  std::array<std::vector<int>, kNumSpeakers> prefix;
  for (int s = 0; s < kNumSpeakers; ++s) {
    prefix[s].assign(n + 1, 0);
    const auto t = vad.track(s);
    for (std::size_t i = 0; i < n; ++i) prefix[s][i + 1] = prefix[s][i] + (t[i] ? 1 : 0);
  }
  std::vector<VapState> labels;
  labels.reserve(n - window);
  for (std::size_t t = 0; t + window < n; ++t) {
    int index = 0;
    for (int s = 0; s < kNumSpeakers; ++s) {
      for (int b = 0; b < kNumBins; ++b) {
        const std::size_t lo = t + 1 + cfg.bin_begin(b);
        const std::size_t hi = t + 1 + cfg.boundaries_frames[b];
        const int voiced = prefix[s][hi] - prefix[s][lo];
        if (2 * voiced > cfg.bin_width(b)) index |= 1 << (kNumBins * s + b);
      }
    }
    labels.emplace_back(index);
  }
  return labels;
}

void write_label_dump(const std::filesystem::path& path, std::span<const VapState> labels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::uint32_t version = kLabelDumpVersion;
  const std::uint64_t count = labels.size();
  out.write("VAPL", 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&count), 8);
  for (const auto& s : labels) out.put(static_cast<char>(s.index()));
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<VapState> read_label_dump(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t count = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&count), 8);
  if (!in || std::memcmp(magic, "VAPL", 4) != 0) throw FormatError(path.string() + ": not a label dump");
  if (version != kLabelDumpVersion) throw FormatError(path.string() + ": unsupported label dump version");
  std::vector<VapState> labels;
  labels.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const int c = in.get();
    if (c == EOF) throw FormatError(path.string() + ": truncated label dump");
    labels.emplace_back(c);
  }
  return labels;
}

}  // namespace vap
