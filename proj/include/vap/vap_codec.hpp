#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "vap/frame_core.hpp"

namespace vap {

inline constexpr int kNumBins = 4;
inline constexpr int kNumStates = 256;

/// Bin layout of the projection window. Boundaries are cumulative frame
/// offsets into the future window; the default is 0.2/0.6/1.2/2.0 s at 50 Hz.
struct BinConfig {
  std::array<int, kNumBins> boundaries_frames{10, 30, 60, 100};
  /// Weight each bin by its width when forming the now/future sums.
  bool width_weighted = false;

  static BinConfig from_seconds(std::array<double, kNumBins> boundaries_sec, const FrameGrid& grid = {});
  int window_frames() const { return boundaries_frames.back(); }
  int bin_begin(int b) const { return b == 0 ? 0 : boundaries_frames[b - 1]; }
  int bin_width(int b) const { return boundaries_frames[b] - bin_begin(b); }
  void validate() const;
};

/// bits[speaker][bin].
using StateBits = std::array<std::array<bool, kNumBins>, kNumSpeakers>;

/// One of the 256 joint activity patterns. Speaker 0 occupies the low nibble;
/// bin 0 is the least significant bit of each nibble.
class VapState {
 public:
  constexpr VapState() = default;
  explicit VapState(int index);

  constexpr int index() const { return index_; }
  constexpr bool bit(int speaker, int bin) const { return (index_ >> (kNumBins * speaker + bin)) & 1; }
  /// The same pattern with the speakers exchanged.
  constexpr VapState swapped() const {
    VapState s;
    s.index_ = static_cast<std::uint8_t>(((index_ & 0x0F) << 4) | (index_ >> 4));
    return s;
  }

  bool operator==(const VapState&) const = default;

 private:
  std::uint8_t index_ = 0;
};

int encode_state(const StateBits& bits);
StateBits decode_state(int index);

/// A probability vector over the 256 states.
struct VapDistribution {
  std::array<double, kNumStates> probs{};

  static VapDistribution uniform();
  static VapDistribution one_hot(int index);
  /// Softmax of raw logits.
  static VapDistribution from_logits(std::span<const float> logits);
  static VapDistribution from_logits(std::span<const double> logits);
  /// Throws ValidationError on negative entries or a sum off 1 by more than 1e-6.
  void validate() const;
};

/// Discretizes a future window (`window_frames` frames per speaker, already
/// cut out of the stream). A bin is voiced iff its voiced frames strictly
/// outnumber its unvoiced frames.
VapState discretize_window(std::span<const std::uint8_t> speaker0, std::span<const std::uint8_t> speaker1,
                           const BinConfig& cfg = {});

/// marginal[s][b]: total probability of states with bit (s, b) set.
using BinMarginals = std::array<std::array<double, kNumBins>, kNumSpeakers>;
BinMarginals bin_marginals(const VapDistribution& d);

struct ProjectionSummary {
  std::array<double, kNumSpeakers> p_now{};
  std::array<double, kNumSpeakers> p_future{};
};

/// p_now: softmax over speakers of bins 0+1 marginal sums; p_future: bins 2+3.
ProjectionSummary project_now_future(const VapDistribution& d, const BinConfig& cfg = {});

/// Label for frame t is the state of frames t+1 .. t+window. Streams too short
/// to label anything yield an empty vector and a warning.
std::vector<VapState> label_stream(const VadStream& vad, const BinConfig& cfg = {}, Diagnostics* diag = nullptr);

/// Binary label dump: 16-byte header ("VAPL", u32 version, u64 frame count)
/// followed by one state byte per frame.
inline constexpr std::uint32_t kLabelDumpVersion = 1;
void write_label_dump(const std::filesystem::path& path, std::span<const VapState> labels);
std::vector<VapState> read_label_dump(const std::filesystem::path& path);

}  // namespace vap
