#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vap/errors.hpp"

namespace vap {

inline constexpr int kNumSpeakers = 2;

/// The 50 Hz analysis grid over 16 kHz audio.
struct FrameGrid {
  int frame_rate_hz = 50;
  int sample_rate_hz = 16000;

  int samples_per_frame() const { return sample_rate_hz / frame_rate_hz; }
  double frame_period_sec() const { return 1.0 / frame_rate_hz; }

  /// Throws ConfigError unless both rates are positive and the sample rate is
  /// an exact multiple of the frame rate.
  void validate() const;
};

/// floor(t * frame_rate): the index of the frame whose interval contains t.
std::int64_t seconds_to_frame(double t, const FrameGrid& grid = {});

/// Per-speaker boolean voice activity, one entry per frame.
/// Frame i covers [i / rate, (i + 1) / rate) seconds.
class VadStream {
 public:
  VadStream() = default;
  VadStream(std::vector<std::uint8_t> speaker0, std::vector<std::uint8_t> speaker1);
  /// All-unvoiced stream of the given length.
  explicit VadStream(std::size_t n_frames);

  std::size_t n_frames() const { return tracks_[0].size(); }
  bool voiced(int speaker, std::size_t frame) const { return tracks_[speaker][frame] != 0; }
  std::span<const std::uint8_t> track(int speaker) const { return tracks_[speaker]; }

  /// Frames [begin, end) as a new stream.
  VadStream slice(std::size_t begin, std::size_t end) const;

  bool operator==(const VadStream&) const = default;

 private:
  std::array<std::vector<std::uint8_t>, kNumSpeakers> tracks_;
};

struct Interval {
  double onset_sec = 0.0;
  double offset_sec = 0.0;
  double duration() const { return offset_sec - onset_sec; }
  bool operator==(const Interval&) const = default;
};

/// Voiced intervals per speaker, sorted and non-overlapping.
struct VadSegments {
  std::array<std::vector<Interval>, kNumSpeakers> speakers;

  /// Throws ValidationError on negative onsets, empty intervals, or
  /// unsorted/overlapping intervals.
  void validate() const;
  double max_offset() const;
  bool operator==(const VadSegments&) const = default;
};

/// A frame is voiced for a speaker iff strictly more than half of its span is
/// covered by that speaker's intervals.
VadStream segments_to_stream(const VadSegments& segs, std::size_t n_frames,
                             const FrameGrid& grid = {});

/// Runs of voiced frames as frame-aligned intervals.
VadSegments stream_to_segments(const VadStream& vad, const FrameGrid& grid = {});

/// Drops everything past `duration_sec`, shortening intervals that straddle it.
VadSegments clip_segments(const VadSegments& segs, double duration_sec);

// ---------------------------------------------------------------------------
// Annotation and manifest files

/// Contents of a VAD annotation file: the corpus language enumeration and the
/// per-speaker segments.
struct VadAnnotation {
  std::vector<std::string> languages;
  VadSegments segments;
};

VadAnnotation parse_vad_annotation(const std::string& text, const std::string& origin = "<memory>");
std::string format_vad_annotation(const VadAnnotation& annotation);
VadAnnotation read_vad_file(const std::filesystem::path& path);
void write_vad_file(const std::filesystem::path& path, const VadAnnotation& annotation);

struct DialogueManifest {
  std::string dialogue_id;
  std::string audio_path;
  std::string vad_path;
  int language_tag = 0;
  /// Filled in when the dialogue is loaded; 0 until then.
  double duration_sec = 0.0;
};

/// Reads `dialogue_id<TAB>audio_path<TAB>vad_path<TAB>language_tag` rows.
/// Relative paths are resolved against the manifest's directory.
std::vector<DialogueManifest> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<DialogueManifest>& rows);

// ---------------------------------------------------------------------------
// Audio

/// Two-channel waveform; channel c carries speaker c.
struct Waveform {
  int sample_rate_hz = 16000;
  std::array<std::vector<float>, kNumSpeakers> channels;

  std::size_t n_samples() const { return channels[0].size(); }
  std::span<const float> channel(int c) const { return channels[c]; }
};

enum class SampleFormat { pcm16, float32 };

/// Loads a 2-channel 16 kHz WAV file (16-bit PCM or 32-bit float) and truncates
/// it to a whole number of frames.
Waveform load_stereo_audio(const std::filesystem::path& path, const FrameGrid& grid = {});
Waveform decode_wav(std::span<const std::uint8_t> bytes, const FrameGrid& grid = {},
                    const std::string& origin = "<memory>");
std::vector<std::uint8_t> encode_wav(const Waveform& wave, SampleFormat format);
void write_wav(const std::filesystem::path& path, const Waveform& wave,
               SampleFormat format = SampleFormat::pcm16);

// ---------------------------------------------------------------------------
// Dialogues

/// A dialogue with audio and voice activity aligned to the same frame count.
struct Dialogue {
  DialogueManifest manifest;
  std::vector<std::string> languages;
  VadStream vad;
  Waveform audio;
};

/// Loads audio and annotation for one manifest row and aligns them. Audio past
/// the last annotated offset is trailing silence; annotation past the end of
/// the audio is truncated with a warning.
Dialogue load_dialogue(const DialogueManifest& row, Diagnostics* diag = nullptr,
                       const FrameGrid& grid = {});

/// VAD-only variant for analyses that never touch audio. The stream spans the
/// last annotated offset, rounded up to a whole frame.
VadStream load_vad_stream(const std::filesystem::path& vad_path, std::vector<std::string>* languages = nullptr,
                          const FrameGrid& grid = {});

}  // namespace vap
