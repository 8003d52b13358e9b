#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>

#include "vap/frame_core.hpp"
#include "vap/tensor.hpp"

namespace vap {

/// What every frozen audio encoder promises: 256-dim output at 50 Hz, where
/// output frame t depends only on samples [0, (t + 1) * 320).
struct EncoderContract {
  int output_dim = 256;
  int output_rate_hz = 50;
  bool causal = true;
  bool trainable = false;
};

/// Encoder output for one channel: n_frames x dim.
struct FeatureStream {
  MatrixF frames;

  std::size_t n_frames() const { return static_cast<std::size_t>(frames.rows()); }
  int dim() const { return static_cast<int>(frames.cols()); }
  bool all_finite() const { return frames.allFinite(); }
};

class AudioEncoder {
 public:
  virtual ~AudioEncoder() = default;
  virtual EncoderContract contract() const = 0;
  /// Features for one channel of a dialogue. `dialogue_id` and `channel`
  /// identify precomputed feature files; computing encoders ignore them.
  virtual FeatureStream encode(std::span<const float> waveform, const std::string& dialogue_id, int channel) const = 0;
  virtual std::string describe() const = 0;
};

/// Deterministic stand-in for a pretrained encoder: a causal filterbank with
/// leaky integrators in place of a learned context network, weights drawn
/// from `seed`.
///
///   1. 64 windowed cosine/sine filter pairs (640 taps, stride 160) at
///      pseudo-random log-spaced frequencies in 60-4000 Hz, taken as magnitude;
///   2. stride-2 averaging (total stride 320 = one 50 Hz frame) and log
///      compression;
///   3. the compressed bands plus three leaky averages of them (time constants
///      0.1, 0.3 and 1 s), 256 values per frame;
///   4. a pseudo-random 1x1 mixing layer with bias.
class BaselineEncoder final : public AudioEncoder {
 public:
  static constexpr int kDim = 256;
  static constexpr int kBands = 64;
  static constexpr int kKernel = 640;
  static constexpr int kHop = 160;

  explicit BaselineEncoder(std::uint64_t seed, const FrameGrid& grid = {});

  EncoderContract contract() const override { return {}; }
  FeatureStream encode(std::span<const float> waveform, const std::string& dialogue_id = {},
                       int channel = 0) const override;
  std::string describe() const override;

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  FrameGrid grid_;
  MatrixF filters_;  // kKernel x 2*kBands
  MatrixF mix_;      // kDim x kDim
  RowVector<float> bias_;
};

/// Reads precomputed features from files named by a template in which
/// `{id}` and `{ch}` expand to the dialogue id and channel index.
class FileFeatureEncoder final : public AudioEncoder {
 public:
  explicit FileFeatureEncoder(std::string path_template, const FrameGrid& grid = {});

  EncoderContract contract() const override { return {}; }
  FeatureStream encode(std::span<const float> waveform, const std::string& dialogue_id,
                       int channel) const override;
  std::string describe() const override { return "file:" + template_; }

  std::filesystem::path path_for(const std::string& dialogue_id, int channel) const;

 private:
  std::string template_;
  FrameGrid grid_;
};

/// `baseline` (optionally `baseline:<seed>`) or `file:<path-template>`.
std::unique_ptr<AudioEncoder> make_encoder(const std::string& selector, std::uint64_t default_seed = 0);

/// Feature file: 24-byte header ("VAPF", u32 version, u32 dim, u32 rate,
/// u64 frame count) then row-major little-endian float32.
inline constexpr std::uint32_t kFeatureFileVersion = 1;
void write_features(const std::filesystem::path& path, const FeatureStream& features, int rate_hz = 50);

/// Loads a feature file, requiring dim 256 and rate 50, and pads (repeating
/// the last frame) or truncates to `expected_frames`. Frame counts more than
/// 2 away from the expectation are rejected.
FeatureStream load_features(const std::filesystem::path& path, std::size_t expected_frames);

}  // namespace vap
