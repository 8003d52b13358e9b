#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vap/frame_core.hpp"
#include "vap/kv.hpp"

namespace vap {

enum class FinalCue { none, pitch_fall, amplitude_ramp };

const char* to_string(FinalCue c);
FinalCue final_cue_from_string(const std::string& s);

/// A synthetic dialogue regime. Voiced stretches are harmonic tones over a
/// language-specific noise band; turn-taking follows a memoryless hold
/// probability, so only the turn-final cue (if any) tells a shift from a hold.
struct PseudoLanguageSpec {
  std::string name = "lang";
  double f0_low_hz = 100.0;
  double f0_high_hz = 160.0;
  double noise_low_hz = 300.0;
  double noise_high_hz = 800.0;
  double noise_level = 0.3;  // relative to the harmonic amplitude
  double gap_mean_sec = 0.45;
  double gap_sd_sec = 0.12;
  double pause_mean_sec = 0.5;
  double pause_sd_sec = 0.12;
  double utterance_min_sec = 1.2;
  double utterance_max_sec = 3.0;
  /// Probability that an utterance is followed by a pause of the same
  /// speaker rather than a gap and a speaker change.
  double hold_prob = 0.5;
  FinalCue final_cue = FinalCue::none;
  /// Relative F0 fall (pitch_fall) or amplitude reduction (amplitude_ramp)
  /// reached at the end of a turn-final utterance.
  double cue_strength = 0.3;
  double cue_duration_sec = 0.3;
  /// Relative F0 decline over every utterance, cue or not.
  double declination = 0.05;
  double syllable_rate_hz = 4.0;
  double backchannel_rate_per_min = 0.0;
  double backchannel_sec = 0.3;

  /// Throws ConfigError on non-positive durations or spreads, an empty F0 or
  /// noise band, or probabilities outside [0, 1].
  void validate() const;

  KeyValues to_map() const;
  static PseudoLanguageSpec from_map(const KeyValues& kv);
  bool operator==(const PseudoLanguageSpec&) const = default;
};

PseudoLanguageSpec read_spec_file(const std::filesystem::path& path);
void write_spec_file(const std::filesystem::path& path, const PseudoLanguageSpec& spec);

/// Three regimes with disjoint F0 ranges and noise bands: a pitch-fall cue,
/// an amplitude-ramp cue and a no-cue control, with different hold rates.
std::vector<PseudoLanguageSpec> default_specs();

struct SyntheticDialogue {
  Waveform audio;
  VadSegments segments;
  int language_tag = 0;
  std::uint64_t seed = 0;
};

struct SynthOptions {
  /// Generate with a constant F0 per utterance (no declination, no pitch
  /// cue). Every random draw is the same as without flattening, so the two
  /// renderings differ only in pitch.
  bool flatten_pitch = false;
};

/// Generates one dialogue of `duration_sec` (at least 30 s). Deterministic in
/// (spec, duration, seed, options).
SyntheticDialogue generate_dialogue(const PseudoLanguageSpec& spec, double duration_sec, std::uint64_t seed,
                                    int language_tag = 0, const SynthOptions& opts = {});

struct CorpusSplit {
  std::vector<DialogueManifest> train, val, test;
  std::size_t total() const { return train.size() + val.size() + test.size(); }
};

struct CorpusOptions {
  std::size_t dialogues_per_language = 30;
  double duration_sec = 120.0;
  std::uint64_t seed = 0;
  /// Also render pitch-flattened audio for the test split into audio_flat/.
  bool flattened_test_audio = true;
  int jobs = 1;
};

/// Per-language split: floor(n/10) validation, floor(n/10) test, the rest
/// training (8:1:1 when n is a multiple of 10).
std::array<std::size_t, 3> split_counts(std::size_t n);

/// Writes audio/<id>.wav, vad/<id>.vad, specs/<name>.spec and the train.tsv,
/// val.tsv and test.tsv manifests under `out_dir`.
CorpusSplit generate_corpus(const std::vector<PseudoLanguageSpec>& specs, const CorpusOptions& opts,
                            const std::filesystem::path& out_dir, Diagnostics* diag = nullptr);

}  // namespace vap
