#include "vap/selftest.hpp"

#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>

#include "vap/encoder.hpp"
#include "vap/net.hpp"
#include "vap/rng.hpp"
#include "vap/synthgen.hpp"
#include "vap/turn_events.hpp"
#include "vap/vap_codec.hpp"

namespace vap {
namespace {

std::string fmt(const char* f, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bool codec_round_trip(std::string& detail) {
  for (int i = 0; i < kNumStates; ++i) {
    if (encode_state(decode_state(i)) != i) {
      detail = "state " + std::to_string(i);
      return false;
    }
  }
  return true;
}

bool projection_anchor(std::string& detail) {
  const auto u = project_now_future(VapDistribution::uniform());
  double worst = 0.0;
  for (int s = 0; s < kNumSpeakers; ++s) {
    worst = std::max({worst, std::abs(u.p_now[s] - 0.5), std::abs(u.p_future[s] - 0.5)});
  }
  const auto h = project_now_future(VapDistribution::one_hot(3));
  const double expected = 1.0 / (1.0 + std::exp(-2.0));
  const double err = std::abs(h.p_now[0] - expected);
  detail = fmt("uniform err %.3g", worst) + fmt(", one-hot err %.3g", err);
  return worst <= 1e-9 && err <= 1e-6;
}

bool loss_anchor(std::string& detail) {
  const std::size_t n = 120;
  NetworkOutput<double> out;
  out.vap_logits = MatrixD::Zero(static_cast<Eigen::Index>(n), kNumStates);
  out.vad_logits = MatrixD::Zero(static_cast<Eigen::Index>(n), 2);
  out.vad_probs = MatrixD::Constant(static_cast<Eigen::Index>(n), 2, 0.5);
  Rng rng(7);
  std::vector<VapState> labels;
  for (std::size_t i = 0; i + 100 < n; ++i) labels.emplace_back(static_cast<int>(rng.below(kNumStates)));
  const auto l = compute_losses(out, labels, VadStream(n));
  const double e1 = std::abs(l.l_vap - std::log(256.0));
  const double e2 = std::abs(l.l_vad - 2.0 * std::log(2.0));
  detail = fmt("l_vap err %.3g", e1) + fmt(", l_vad err %.3g", e2);
  return e1 <= 1e-6 && e2 <= 1e-6;
}

bool causality(std::string& detail) {
  ModelConfig cfg = ModelConfig::toy(16, 2, 8, 32);
  cfg.lid_classes = 3;
  const VapNetwork<double> net(cfg);
  Rng rng(11);
  const int n = 32;
  MatrixD a(n, 8), b(n, 8);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 8; ++j) {
      a(i, j) = rng.normal();
      b(i, j) = rng.normal();
    }
  }
  const auto ref = net.forward(a, b, Mode::eval);
  for (int cut = 1; cut < n; cut += 5) {
    MatrixD a2 = a, b2 = b;
    for (int i = cut; i < n; ++i) {
      for (int j = 0; j < 8; ++j) {
        a2(i, j) += rng.normal();
        b2(i, j) -= rng.normal();
      }
    }
    const auto out = net.forward(a2, b2, Mode::eval);
    if (out.vap_logits.topRows(cut) != ref.vap_logits.topRows(cut) ||
        out.vad_logits.topRows(cut) != ref.vad_logits.topRows(cut) ||
        out.lid_logits.topRows(cut) != ref.lid_logits.topRows(cut)) {
      detail = "prefix changed after perturbing from frame " + std::to_string(cut);
      return false;
    }
  }
  return true;
}

bool gradients(std::string& detail) {
  ModelConfig cfg = ModelConfig::toy();
  cfg.lid_classes = 3;
  const auto r = gradient_check(cfg, 8, 5);
  detail = fmt("max relative error %.3g", r.max_relative_error);
  return r.all_finite && r.max_relative_error <= 1e-4;
}

bool event_extraction(std::string& detail) {
  // A speaks 0-2 s, pauses 0.4 s, speaks to 4 s; B answers after 0.5 s.
  VadSegments segs;
  segs.speakers[0] = {{0.0, 2.0}, {2.4, 4.0}};
  segs.speakers[1] = {{4.5, 6.0}};
  const auto samples = extract_shift_hold(segments_to_stream(segs, 350));
  if (samples.size() != 2 || samples[0].label != TurnLabel::hold || samples[1].label != TurnLabel::shift ||
      samples[0].decision_frame != 102 || samples[1].decision_frame != 202) {
    detail = std::to_string(samples.size()) + " samples";
    return false;
  }
  return true;
}

bool encoder_prefix(std::string& detail) {
  const BaselineEncoder enc(3);
  Rng rng(2);
  std::vector<float> wave(16000);
  for (auto& x : wave) x = static_cast<float>(0.1 * rng.normal());
  const auto full = enc.encode(wave);
  const auto head = enc.encode(std::span<const float>(wave).first(6400));
  if (full.n_frames() != 50 || head.n_frames() != 20 || head.frames != full.frames.topRows(20)) {
    detail = "prefix features differ";
    return false;
  }
  return true;
}

bool generator_determinism(std::string& detail) {
  const auto spec = default_specs().front();
  const auto a = generate_dialogue(spec, 30.0, 99);
  const auto b = generate_dialogue(spec, 30.0, 99);
  SynthOptions flat;
  flat.flatten_pitch = true;
  const auto f = generate_dialogue(spec, 30.0, 99, 0, flat);
  if (a.audio.channels != b.audio.channels || !(a.segments == b.segments)) {
    detail = "same seed produced different dialogues";
    return false;
  }
  if (!(f.segments == a.segments) || f.audio.channels == a.audio.channels) {
    detail = "flattening changed the timing or left the audio unchanged";
    return false;
  }
  return true;
}

}  // namespace

std::vector<SelftestCheck> run_selftest() {
  const std::vector<std::pair<const char*, std::function<bool(std::string&)>>> checks{
      {"codec round trip", codec_round_trip},
      {"projection anchors", projection_anchor},
      {"loss anchors", loss_anchor},
      {"causality", causality},
      {"gradient check", gradients},
      {"event extraction", event_extraction},
      {"encoder prefix", encoder_prefix},
      {"generator determinism", generator_determinism},
  };
  std::vector<SelftestCheck> results;
  for (const auto& [name, fn] : checks) {
    SelftestCheck c;
    c.name = name;
    try {
      c.passed = fn(c.detail);
    } catch (const std::exception& e) {
      c.passed = false;
      c.detail = e.what();
    }
    results.push_back(c);
  }
  return results;
}

}  // namespace vap
