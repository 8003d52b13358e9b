#include "vap/synthgen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numbers>
#include <thread>

#include "vap/rng.hpp"

namespace vap {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kFloorNoise = 1e-3;
constexpr double kVoiceLevel = 0.1;
constexpr double kEdgeSec = 0.01;
constexpr double kBackchannelMarginSec = 1.05;
constexpr double kMinSilenceSec = 0.05;

double round_ms(double t) { return std::round(t * 1000.0) / 1000.0; }

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double truncated_normal(Rng& rng, double mean, double sd, double min) {
  for (;;) {
    const double x = rng.normal(mean, sd);
    if (x >= min) return x;
  }
}

struct Utterance {
  int speaker = 0;
  double onset = 0.0;
  double offset = 0.0;
  bool turn_final = false;
  bool backchannel = false;
  double f0 = 0.0;
  double syllable_phase = 0.0;
  std::uint64_t noise_seed = 0;
};

// Second-order band-pass (constant 0 dB peak gain).
class BandPass {
 public:
  BandPass(double low_hz, double high_hz, double fs) {
    const double center = std::sqrt(low_hz * high_hz);
    const double q = center / (high_hz - low_hz);
    const double w0 = kTwoPi * center / fs;
    const double alpha = std::sin(w0) / (2.0 * q);
    const double a0 = 1.0 + alpha;
    b0_ = alpha / a0;
    b2_ = -alpha / a0;
    a1_ = -2.0 * std::cos(w0) / a0;
    a2_ = (1.0 - alpha) / a0;
  }
  double operator()(double x) {
    const double y = b0_ * x + b2_ * x2_ - a1_ * y1_ - a2_ * y2_;
    x2_ = x1_;
    x1_ = x;
    y2_ = y1_;
    y1_ = y;
    return y;
  }

 private:
  double b0_, b2_, a1_, a2_;
  double x1_ = 0, x2_ = 0, y1_ = 0, y2_ = 0;
};

void render(const PseudoLanguageSpec& spec, const Utterance& u, bool flatten, std::vector<float>& out, double fs) {
  const auto begin = static_cast<std::size_t>(std::llround(u.onset * fs));
  const auto end = std::min(out.size(), static_cast<std::size_t>(std::llround(u.offset * fs)));
  if (end <= begin) return;
  const double dur = u.offset - u.onset;
  const int harmonics = std::max(1, std::min(8, static_cast<int>(3800.0 / u.f0)));
  double norm = 0.0;
  for (int k = 1; k <= harmonics; ++k) norm += 1.0 / k;
  const bool pitch_cue = u.turn_final && spec.final_cue == FinalCue::pitch_fall && !flatten;
  const bool amp_cue = u.turn_final && spec.final_cue == FinalCue::amplitude_ramp;
  Rng noise_rng(u.noise_seed);
  BandPass band(spec.noise_low_hz, spec.noise_high_hz, fs);
  // Band-passed white noise loses most of its power; scale back to unit RMS.
  const double band_gain = std::sqrt(fs / (2.0 * (spec.noise_high_hz - spec.noise_low_hz)));
  double phase = 0.0;
  for (std::size_t i = begin; i < end; ++i) {
    const double tau = static_cast<double>(i - begin) / fs;
    const double cue = std::clamp((tau - (dur - spec.cue_duration_sec)) / spec.cue_duration_sec, 0.0, 1.0);
    double f = u.f0;
    if (!flatten) f *= 1.0 - spec.declination * tau / dur;
    if (pitch_cue) f *= 1.0 - spec.cue_strength * cue;
    phase += kTwoPi * f / fs;
    if (phase > kTwoPi) phase -= kTwoPi;

    const double s1 = std::sin(phase), c1 = std::cos(phase);
    double harm = s1, prev = 0.0, cur = s1;
    for (int k = 2; k <= harmonics; ++k) {
      const double next = 2.0 * c1 * cur - prev;
      prev = cur;
      cur = next;
      harm += cur / k;
    }
    harm /= norm;

    double env = 0.55 + 0.45 * (0.5 - 0.5 * std::cos(kTwoPi * spec.syllable_rate_hz * tau + u.syllable_phase));
    env *= std::min({1.0, tau / kEdgeSec, (dur - tau) / kEdgeSec});
    if (amp_cue) env *= 1.0 - spec.cue_strength * cue;
    const double noise = band(noise_rng.normal()) * band_gain;
    out[i] += static_cast<float>(kVoiceLevel * env * (harm + spec.noise_level * noise));
  }
}

}  // namespace

const char* to_string(FinalCue c) {
  switch (c) {
    case FinalCue::pitch_fall: return "pitch-fall";
    case FinalCue::amplitude_ramp: return "amplitude-ramp";
    case FinalCue::none: break;
  }
  return "none";
}

FinalCue final_cue_from_string(const std::string& s) {
  if (s == "none") return FinalCue::none;
  if (s == "pitch-fall") return FinalCue::pitch_fall;
  if (s == "amplitude-ramp") return FinalCue::amplitude_ramp;
  throw ConfigError("unknown final_cue '" + s + "' (expected none, pitch-fall or amplitude-ramp)");
}

void PseudoLanguageSpec::validate() const {
  auto positive = [](double v, const char* what) {
    if (!(v > 0.0)) throw ConfigError(std::string(what) + " must be positive");
  };
  if (name.empty() || name.find_first_of(",\t\n ") != std::string::npos) {
    throw ConfigError("language name must be non-empty without commas or whitespace");
  }
  positive(f0_low_hz, "f0_low_hz");
  if (!(f0_high_hz > f0_low_hz)) throw ConfigError("f0_high_hz must exceed f0_low_hz");
  positive(noise_low_hz, "noise_low_hz");
  if (!(noise_high_hz > noise_low_hz) || noise_high_hz >= 8000.0) {
    throw ConfigError("noise band must satisfy 0 < low < high < 8000 Hz");
  }
  if (noise_level < 0.0) throw ConfigError("noise_level must be nonnegative");
  positive(gap_mean_sec, "gap_mean_sec");
  positive(gap_sd_sec, "gap_sd_sec");
  positive(pause_mean_sec, "pause_mean_sec");
  positive(pause_sd_sec, "pause_sd_sec");
  positive(utterance_min_sec, "utterance_min_sec");
  if (!(utterance_max_sec >= utterance_min_sec)) throw ConfigError("utterance_max_sec must be >= utterance_min_sec");
  if (!(hold_prob >= 0.0 && hold_prob <= 1.0)) throw ConfigError("hold_prob must be in [0, 1]");
  if (!(cue_strength >= 0.0 && cue_strength < 1.0)) throw ConfigError("cue_strength must be in [0, 1)");
  positive(cue_duration_sec, "cue_duration_sec");
  if (!(declination >= 0.0 && declination < 1.0)) throw ConfigError("declination must be in [0, 1)");
  positive(syllable_rate_hz, "syllable_rate_hz");
  if (backchannel_rate_per_min < 0.0) throw ConfigError("backchannel_rate_per_min must be nonnegative");
  positive(backchannel_sec, "backchannel_sec");
}

KeyValues PseudoLanguageSpec::to_map() const {
  return {
      {"name", name},
      {"f0_low_hz", format_exact(f0_low_hz)},
      {"f0_high_hz", format_exact(f0_high_hz)},
      {"noise_low_hz", format_exact(noise_low_hz)},
      {"noise_high_hz", format_exact(noise_high_hz)},
      {"noise_level", format_exact(noise_level)},
      {"gap_mean_sec", format_exact(gap_mean_sec)},
      {"gap_sd_sec", format_exact(gap_sd_sec)},
      {"pause_mean_sec", format_exact(pause_mean_sec)},
      {"pause_sd_sec", format_exact(pause_sd_sec)},
      {"utterance_min_sec", format_exact(utterance_min_sec)},
      {"utterance_max_sec", format_exact(utterance_max_sec)},
      {"hold_prob", format_exact(hold_prob)},
      {"final_cue", to_string(final_cue)},
      {"cue_strength", format_exact(cue_strength)},
      {"cue_duration_sec", format_exact(cue_duration_sec)},
      {"declination", format_exact(declination)},
      {"syllable_rate_hz", format_exact(syllable_rate_hz)},
      {"backchannel_rate_per_min", format_exact(backchannel_rate_per_min)},
      {"backchannel_sec", format_exact(backchannel_sec)},
  };
}

PseudoLanguageSpec PseudoLanguageSpec::from_map(const KeyValues& kv) {
  PseudoLanguageSpec s;
  for (const auto& [k, v] : kv) {
    if (!s.to_map().count(k)) throw ConfigError("unknown spec key '" + k + "'");
  }
  s.name = kv_string(kv, "name", s.name);
  s.f0_low_hz = kv_double(kv, "f0_low_hz", s.f0_low_hz);
  s.f0_high_hz = kv_double(kv, "f0_high_hz", s.f0_high_hz);
  s.noise_low_hz = kv_double(kv, "noise_low_hz", s.noise_low_hz);
  s.noise_high_hz = kv_double(kv, "noise_high_hz", s.noise_high_hz);
  s.noise_level = kv_double(kv, "noise_level", s.noise_level);
  s.gap_mean_sec = kv_double(kv, "gap_mean_sec", s.gap_mean_sec);
  s.gap_sd_sec = kv_double(kv, "gap_sd_sec", s.gap_sd_sec);
  s.pause_mean_sec = kv_double(kv, "pause_mean_sec", s.pause_mean_sec);
  s.pause_sd_sec = kv_double(kv, "pause_sd_sec", s.pause_sd_sec);
  s.utterance_min_sec = kv_double(kv, "utterance_min_sec", s.utterance_min_sec);
  s.utterance_max_sec = kv_double(kv, "utterance_max_sec", s.utterance_max_sec);
  s.hold_prob = kv_double(kv, "hold_prob", s.hold_prob);
  s.final_cue = final_cue_from_string(kv_string(kv, "final_cue", to_string(s.final_cue)));
  s.cue_strength = kv_double(kv, "cue_strength", s.cue_strength);
  s.cue_duration_sec = kv_double(kv, "cue_duration_sec", s.cue_duration_sec);
  s.declination = kv_double(kv, "declination", s.declination);
  s.syllable_rate_hz = kv_double(kv, "syllable_rate_hz", s.syllable_rate_hz);
  s.backchannel_rate_per_min = kv_double(kv, "backchannel_rate_per_min", s.backchannel_rate_per_min);
  s.backchannel_sec = kv_double(kv, "backchannel_sec", s.backchannel_sec);
  s.validate();
  return s;
}

PseudoLanguageSpec read_spec_file(const std::filesystem::path& path) {
  return PseudoLanguageSpec::from_map(read_key_values(path));
}

void write_spec_file(const std::filesystem::path& path, const PseudoLanguageSpec& spec) {
  write_key_values(path, spec.to_map());
}

std::vector<PseudoLanguageSpec> default_specs() {
  PseudoLanguageSpec a;
  a.name = "pfall";
  a.f0_low_hz = 90.0;
  a.f0_high_hz = 140.0;
  a.noise_low_hz = 300.0;
  a.noise_high_hz = 700.0;
  a.gap_mean_sec = 0.33;
  a.gap_sd_sec = 0.04;
  a.pause_mean_sec = 0.33;
  a.pause_sd_sec = 0.04;
  a.hold_prob = 0.6;
  a.final_cue = FinalCue::pitch_fall;
  a.cue_strength = 0.55;
  a.cue_duration_sec = 0.8;
  a.utterance_min_sec = 1.0;
  a.utterance_max_sec = 2.2;
  a.syllable_rate_hz = 4.0;

  PseudoLanguageSpec b;
  b.name = "aramp";
  b.f0_low_hz = 160.0;
  b.f0_high_hz = 230.0;
  b.noise_low_hz = 1200.0;
  b.noise_high_hz = 2000.0;
  b.gap_mean_sec = 0.33;
  b.gap_sd_sec = 0.04;
  b.pause_mean_sec = 0.33;
  b.pause_sd_sec = 0.04;
  b.hold_prob = 0.45;
  b.final_cue = FinalCue::amplitude_ramp;
  b.cue_strength = 0.9;
  b.cue_duration_sec = 0.8;
  b.utterance_min_sec = 1.0;
  b.utterance_max_sec = 2.2;
  b.syllable_rate_hz = 5.0;
  b.backchannel_rate_per_min = 2.0;

  PseudoLanguageSpec c;
  c.name = "nocue";
  c.f0_low_hz = 250.0;
  c.f0_high_hz = 340.0;
  c.noise_low_hz = 2600.0;
  c.noise_high_hz = 3600.0;
  c.gap_mean_sec = 0.33;
  c.gap_sd_sec = 0.04;
  c.pause_mean_sec = 0.33;
  c.pause_sd_sec = 0.04;
  c.hold_prob = 0.5;
  c.final_cue = FinalCue::none;
  c.utterance_min_sec = 1.0;
  c.utterance_max_sec = 2.2;
  c.syllable_rate_hz = 3.0;
  return {a, b, c};
}

SyntheticDialogue generate_dialogue(const PseudoLanguageSpec& spec, double duration_sec, std::uint64_t seed,
                                    int language_tag, const SynthOptions& opts) {
  spec.validate();
  if (!(duration_sec >= 30.0)) throw ConfigError("synthetic dialogues must be at least 30 s long");
  const FrameGrid grid;
  const double fs = grid.sample_rate_hz;
  const auto n_frames = static_cast<std::size_t>(seconds_to_frame(duration_sec, grid));
  const std::size_t n_samples = n_frames * static_cast<std::size_t>(grid.samples_per_frame());
  const double end_sec = static_cast<double>(n_frames) / grid.frame_rate_hz;

  Rng rng(seed);
  std::vector<Utterance> utts;
  auto new_utterance = [&](int speaker, double onset, double offset) {
    Utterance u;
    u.speaker = speaker;
    u.onset = onset;
    u.offset = offset;
    u.f0 = rng.uniform(spec.f0_low_hz, spec.f0_high_hz);
    u.syllable_phase = rng.uniform(0.0, kTwoPi);
    u.noise_seed = rng.next_u64();
    return u;
  };

  double t = round_ms(rng.uniform(0.3, 0.7));
  int speaker = static_cast<int>(rng.below(2));
  for (;;) {
    const double offset = round_ms(t + rng.uniform(spec.utterance_min_sec, spec.utterance_max_sec));
    if (offset > end_sec - 0.5) break;
    const bool hold = rng.bernoulli(spec.hold_prob);
    const double silence = hold ? truncated_normal(rng, spec.pause_mean_sec, spec.pause_sd_sec, kMinSilenceSec)
                                : truncated_normal(rng, spec.gap_mean_sec, spec.gap_sd_sec, kMinSilenceSec);
    Utterance u = new_utterance(speaker, t, offset);
    u.turn_final = !hold;
    utts.push_back(u);

    // A listener backchannel well inside the utterance, away from both ends.
    const double room = (offset - t) - 2.0 * kBackchannelMarginSec - spec.backchannel_sec;
    const double p_bc = std::min(1.0, spec.backchannel_rate_per_min / 60.0 * (offset - t));
    const double where = rng.uniform();
    if (room > 0.0 && rng.bernoulli(p_bc)) {
      const double on = round_ms(t + kBackchannelMarginSec + where * room);
      Utterance bc = new_utterance(1 - speaker, on, round_ms(on + spec.backchannel_sec));
      bc.backchannel = true;
      utts.push_back(bc);
    }

    if (!hold) speaker = 1 - speaker;
    t = round_ms(offset + std::max(silence, kMinSilenceSec));
  }

  SyntheticDialogue d;
  d.seed = seed;
  d.language_tag = language_tag;
  d.audio.sample_rate_hz = grid.sample_rate_hz;
  for (int c = 0; c < kNumSpeakers; ++c) {
    auto& ch = d.audio.channels[c];
    ch.resize(n_samples);
    Rng floor_rng(splitmix64(seed ^ (0xF100ULL + static_cast<std::uint64_t>(c))));
    for (auto& x : ch) x = static_cast<float>(kFloorNoise * floor_rng.normal());
  }
  for (const auto& u : utts) {
    render(spec, u, opts.flatten_pitch, d.audio.channels[u.speaker], fs);
    d.segments.speakers[u.speaker].push_back({u.onset, u.offset});
  }
  for (auto& segs : d.segments.speakers) {
    std::sort(segs.begin(), segs.end(), [](const Interval& a, const Interval& b) { return a.onset_sec < b.onset_sec; });
  }
  for (auto& ch : d.audio.channels) {
    for (auto& x : ch) x = std::clamp(x, -1.0f, 1.0f);
  }
  d.segments.validate();
  return d;
}

std::array<std::size_t, 3> split_counts(std::size_t n) {
  const std::size_t held = n / 10;
  return {n - 2 * held, held, held};
}

CorpusSplit generate_corpus(const std::vector<PseudoLanguageSpec>& specs, const CorpusOptions& opts,
                            const std::filesystem::path& out_dir, Diagnostics* diag) {
  if (specs.empty()) throw ConfigError("no pseudo-language specs given");
  if (opts.dialogues_per_language == 0) throw ConfigError("dialogues_per_language must be positive");
  std::vector<std::string> languages;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    specs[i].validate();
    for (std::size_t j = 0; j < i; ++j) {
      if (specs[i].name == specs[j].name) throw ConfigError("duplicate pseudo-language name '" + specs[i].name + "'");
      auto a = specs[i].to_map(), b = specs[j].to_map();
      a.erase("name");
      b.erase("name");
      if (a == b) throw ConfigError("pseudo-languages '" + specs[i].name + "' and '" + specs[j].name + "' are identical");
    }
    languages.push_back(specs[i].name);
  }

  namespace fs = std::filesystem;
  try {
    fs::create_directories(out_dir / "audio");
    fs::create_directories(out_dir / "vad");
    fs::create_directories(out_dir / "specs");
    if (opts.flattened_test_audio) fs::create_directories(out_dir / "audio_flat");
  } catch (const fs::filesystem_error& e) {
    throw IoError(std::string("cannot create corpus directories: ") + e.what());
  }
  for (const auto& s : specs) write_spec_file(out_dir / "specs" / (s.name + ".spec"), s);

  const auto counts = split_counts(opts.dialogues_per_language);
  if (counts[1] == 0 || counts[2] == 0) {
    warn(diag, "synth",
         std::to_string(opts.dialogues_per_language) +
             " dialogues per language leaves the validation and test splits empty (need at least 10)");
  }

  struct Job {
    int lang;
    std::size_t index;
    int split;  // 0 train, 1 val, 2 test
    DialogueManifest row;
  };
  std::vector<Job> jobs;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    for (std::size_t i = 0; i < opts.dialogues_per_language; ++i) {
      Job j;
      j.lang = static_cast<int>(l);
      j.index = i;
      j.split = i < counts[0] ? 0 : (i < counts[0] + counts[1] ? 1 : 2);
      char id[64];
      std::snprintf(id, sizeof id, "%s_%03zu", specs[l].name.c_str(), i);
      j.row.dialogue_id = id;
      j.row.audio_path = (out_dir / "audio" / (j.row.dialogue_id + ".wav")).string();
      j.row.vad_path = (out_dir / "vad" / (j.row.dialogue_id + ".vad")).string();
      j.row.language_tag = j.lang;
      j.row.duration_sec = opts.duration_sec;
      jobs.push_back(j);
    }
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs.size());
  auto worker = [&] {
    for (std::size_t k = next++; k < jobs.size(); k = next++) {
      try {
        const Job& j = jobs[k];
        const std::uint64_t seed = splitmix64(opts.seed ^ (static_cast<std::uint64_t>(j.lang) << 32) ^ j.index);
        const auto d = generate_dialogue(specs[j.lang], opts.duration_sec, seed, j.lang);
        write_wav(j.row.audio_path, d.audio);
        write_vad_file(j.row.vad_path, {languages, d.segments});
        if (opts.flattened_test_audio && j.split == 2) {
          SynthOptions flat;
          flat.flatten_pitch = true;
          const auto f = generate_dialogue(specs[j.lang], opts.duration_sec, seed, j.lang, flat);
          write_wav(out_dir / "audio_flat" / (j.row.dialogue_id + ".wav"), f.audio);
        }
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(opts.jobs, static_cast<int>(jobs.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  CorpusSplit split;
  for (const auto& j : jobs) {
    (j.split == 0 ? split.train : j.split == 1 ? split.val : split.test).push_back(j.row);
  }
  write_manifest(out_dir / "train.tsv", split.train);
  write_manifest(out_dir / "val.tsv", split.val);
  write_manifest(out_dir / "test.tsv", split.test);
  return split;
}

}  // namespace vap
