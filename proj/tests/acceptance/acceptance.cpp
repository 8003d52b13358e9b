// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. The synthetic multilingual run trains a model on a
// freshly generated corpus and takes about half an hour on one core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "oracles.hpp"
#include "vap/eval.hpp"
#include "vap/synthgen.hpp"
#include "vap/train.hpp"
#include "vap/turn_events.hpp"
#include "vap/vap_codec.hpp"

using namespace vap;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int worker_count() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

fs::path work_dir(const std::string& name) {
  const fs::path dir = fs::current_path() / "acceptance_work" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  if (std::FILE* f = std::fopen(path.c_str(), "wb")) {
    std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
  }
}

std::vector<PreparedDialogue> prepare(const std::vector<DialogueManifest>& rows, const AudioEncoder& enc) {
  return prepare_corpus(rows, enc, nullptr, worker_count());
}

Outcome codec_exhaustiveness() {
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < kNumStates; ++i) {
    if (encode_state(decode_state(i)) != i) return {false, fmt("round trip broke at state %d", i)};
  }
  std::mt19937_64 g(2024);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const double density = std::uniform_real_distribution<double>(0.0, 1.0)(g);
    oracle::Track a(100), b(100);
    for (int f = 0; f < 100; ++f) {
      a[f] = std::bernoulli_distribution(density)(g);
      b[f] = std::bernoulli_distribution(std::uniform_real_distribution<double>(0.0, 1.0)(g))(g);
    }
    if (discretize_window(a, b).index() != oracle::recount_state(a, b)) ++mismatches;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 5.0,
          fmt("256/256 round trips, %zu/10000 window mismatches, %.2f s", mismatches, secs)};
}

Outcome projection_math() {
  const auto u = project_now_future(VapDistribution::uniform());
  double uniform_err = 0.0;
  for (int s = 0; s < 2; ++s) {
    uniform_err = std::max({uniform_err, std::abs(u.p_now[s] - 0.5), std::abs(u.p_future[s] - 0.5)});
  }
  const double e2 = std::exp(2.0);
  const auto h3 = project_now_future(VapDistribution::one_hot(3));
  const auto h48 = project_now_future(VapDistribution::one_hot(48));
  const double hot_err = std::max({std::abs(h3.p_now[0] - e2 / (e2 + 1.0)), std::abs(h3.p_now[1] - 1.0 / (e2 + 1.0)),
                                   std::abs(h3.p_future[0] - 0.5), std::abs(h48.p_now[1] - e2 / (e2 + 1.0))});
  std::mt19937_64 g(7);
  double marginal_err = 0.0, projection_err = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    VapDistribution d;
    std::array<double, 256> p{};
    double sum = 0.0;
    for (int s = 0; s < 256; ++s) sum += p[s] = std::exponential_distribution<double>(1.0)(g);
    for (int s = 0; s < 256; ++s) d.probs[s] = p[s] /= sum;
    const auto want = oracle::state_marginals(p);
    const auto got = bin_marginals(d);
    for (int s = 0; s < 2; ++s) {
      for (int b = 0; b < 4; ++b) marginal_err = std::max(marginal_err, std::abs(got[s][b] - want[s][b]));
    }
    const auto pr = project_now_future(d);
    const auto now = oracle::projected(p, 0, 2), fut = oracle::projected(p, 2, 4);
    for (int s = 0; s < 2; ++s) {
      projection_err = std::max({projection_err, std::abs(pr.p_now[s] - now[s]), std::abs(pr.p_future[s] - fut[s])});
    }
  }
  return {uniform_err <= 1e-9 && hot_err <= 1e-6 && marginal_err <= 1e-9 && projection_err <= 1e-9,
          fmt("uniform err %.2g, one-hot err %.2g, marginal err %.2g, projection err %.2g", uniform_err, hot_err,
              marginal_err, projection_err)};
}

Outcome loss_anchors() {
  const std::size_t n = 400;
  NetworkOutput<double> out;
  out.vap_logits = MatrixD::Zero(n, kNumStates);
  out.vad_logits = MatrixD::Zero(n, 2);
  out.vad_probs = MatrixD::Constant(n, 2, 0.5);
  std::mt19937_64 g(5);
  std::vector<VapState> labels;
  std::vector<std::uint8_t> v0(n), v1(n);
  for (std::size_t i = 0; i + 100 < n; ++i) labels.emplace_back(static_cast<int>(g() % 256));
  for (std::size_t i = 0; i < n; ++i) {
    v0[i] = g() & 1;
    v1[i] = g() & 1;
  }
  const auto l = compute_losses(out, labels, VadStream(v0, v1));
  const double e_vap = std::abs(l.l_vap - std::log(256.0)), e_vad = std::abs(l.l_vad - 2.0 * std::log(2.0));
  return {e_vap <= 1e-6 && e_vad <= 1e-6, fmt("l_vap err %.2g, l_vad err %.2g", e_vap, e_vad)};
}

Outcome causality() {
  std::mt19937_64 g(99);
  std::normal_distribution<double> normal;
  std::size_t violations = 0;
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig cfg = ModelConfig::toy(16, 2, 8, 64);
    cfg.lid_classes = 3;
    cfg.init_seed = static_cast<std::uint64_t>(trial);
    cfg.tied_channels = trial % 2 == 1;
    cfg.positional = trial % 3 == 2 ? PositionalEncoding::alibi : PositionalEncoding::learned;
    const VapNetwork<double> net(cfg);
    const int n = 16 + static_cast<int>(g() % 49);
    MatrixD a(n, 8), b(n, 8);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      a.data()[i] = normal(g);
      b.data()[i] = normal(g);
    }
    const auto ref = net.forward(a, b, Mode::eval);
    for (int cut = 1; cut < n; ++cut) {
      MatrixD a2 = a, b2 = b;
      for (int i = cut; i < n; ++i) {
        for (int j = 0; j < 8; ++j) {
          a2(i, j) = 3.0 * normal(g);
          b2(i, j) = -b2(i, j);
        }
      }
      const auto out = net.forward(a2, b2, Mode::eval);
      if (out.vap_logits.topRows(cut) != ref.vap_logits.topRows(cut) ||
          out.vad_logits.topRows(cut) != ref.vad_logits.topRows(cut) ||
          out.lid_logits.topRows(cut) != ref.lid_logits.topRows(cut)) {
        ++violations;
      }
    }
  }

  // Truncation audit on synthetic dialogues with an untrained float model.
  const fs::path dir = work_dir("causality");
  CorpusOptions opts;
  opts.dialogues_per_language = 2;
  opts.duration_sec = 120.0;
  opts.seed = 17;
  opts.flattened_test_audio = false;
  opts.jobs = worker_count();
  const auto split = generate_corpus(default_specs(), opts, dir);
  const auto dialogues = prepare(split.train, BaselineEncoder(0));
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.lid_classes = 3;
  const VapNetwork<float> net(cfg);
  ShiftHoldOptions sh;
  sh.audit_samples = 100;
  const auto r = eval_shift_hold(net, dialogues, 3, sh);
  return {violations == 0 && r.audit.checked == 100 && r.audit.passed(),
          fmt("10 inputs, %zu prefix violations; audit %zu samples, %zu prediction mismatches, max p_now diff %.2g",
              violations, r.audit.checked, r.audit.prediction_mismatches, r.audit.max_p_now_diff)};
}

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg = ModelConfig::toy();
  cfg.lid_classes = 3;
  const auto r = gradient_check(cfg, 8, 1);
  const double secs = seconds_since(t0);
  return {r.all_finite && r.max_relative_error <= 1e-4 && secs < 60.0,
          fmt("%zu entries, max relative error %.2g (%s), %.1f s", r.checked, r.max_relative_error,
              r.worst_parameter.c_str(), secs)};
}

Outcome event_extraction() {
  std::size_t mismatched = 0, samples = 0;
  for (std::uint64_t seed = 1000; seed < 1100; ++seed) {
    oracle::Track a, b;
    oracle::random_trace(seed, 4000, a, b);
    const auto want = oracle::shift_hold(a, b);
    std::vector<oracle::TurnSample> got;
    for (const auto& s : extract_shift_hold(VadStream(a, b))) {
      got.push_back({s.decision_frame, s.label == TurnLabel::shift, s.silence.prev_speaker, s.silence.next_speaker});
    }
    if (got != want) ++mismatched;
    samples += want.size();
  }
  // Hand count of the fixture: 2+1+2 shifts, 1+1+1 holds.
  std::vector<ShiftHoldSample> all;
  for (const char* id : {"dlg_a", "dlg_b", "dlg_c"}) {
    const auto s = extract_shift_hold(load_vad_stream(std::string(VAP_TEST_DATA) + "/fixture/vad/" + id + ".vad"));
    all.insert(all.end(), s.begin(), s.end());
  }
  const std::string table = format_shift_hold_table({count_shift_hold("fixture", all)});
  const bool fixture_ok = table == "Dataset\t#Shift\t#Hold\t%Shift\nfixture\t5\t3\t62.5\n";
  return {mismatched == 0 && fixture_ok,
          fmt("%zu/100 traces differ (%zu samples); fixture table %s", mismatched, samples,
              fixture_ok ? "matches" : "differs")};
}

Outcome synthetic_multilingual_run() {
  const auto t_all = std::chrono::steady_clock::now();
  const fs::path dir = work_dir("multilingual");
  const auto specs = default_specs();
  std::vector<std::string> languages;
  for (const auto& s : specs) languages.push_back(s.name);
  CorpusOptions opts;
  opts.dialogues_per_language = 30;
  opts.duration_sec = 120.0;
  opts.seed = 1;
  opts.jobs = worker_count();
  const auto split = generate_corpus(specs, opts, dir / "corpus");
  const BaselineEncoder enc(0);
  const auto train = prepare(split.train, enc), val = prepare(split.val, enc), test = prepare(split.test, enc);

  ModelConfig mc;
  mc.d_model = 64;
  mc.lid_classes = 3;
  TrainConfig tc;
  tc.window_hop_sec = 20.0;
  const auto t_train = std::chrono::steady_clock::now();
  const auto result = run_training(train, val, mc, tc, enc.describe(), languages, [](const EpochLoss& e) {
    std::fprintf(stderr, "  epoch %d %s l_vap %.4f\n", e.epoch, e.split.c_str(), e.loss.l_vap);
  });
  const double train_secs = seconds_since(t_train);
  save_checkpoint(dir / "model.ckpt", result.best);
  write_text(dir / "loss_curves.tsv", format_loss_curves(result.curves));

  const double val0 = result.curves.front().loss.l_vap, best = result.best.val_loss;
  const double drop = 1.0 - best / val0;
  const bool a_ok = drop >= 0.20;

  const auto net = result.best.to_network();
  ShiftHoldOptions sh;
  const auto shr = eval_shift_hold(net, test, 3, sh);
  const double ba_pitch = shr.per_language[0].balanced_accuracy(), ba_amp = shr.per_language[1].balanced_accuracy(),
               ba_none = shr.per_language[2].balanced_accuracy();
  const bool b_ok = ba_pitch >= 0.85 && ba_amp >= 0.85 && ba_none <= 0.60;

  const auto lid = eval_lid(net, test, languages);
  const bool c_ok = lid.weighted_f1 >= 0.95;

  const auto pert = eval_with_perturbation(net, test, dir / "corpus" / "audio_flat", enc, languages, sh);
  double d_pitch = 0.0, d_amp = 0.0;
  for (const auto& row : pert.rows) {
    if (row.corpus == languages[0]) d_pitch = row.delta();
    if (row.corpus == languages[1]) d_amp = row.delta();
  }
  const bool d_ok = d_pitch <= -0.05 && std::abs(d_amp) <= 0.02;

  std::vector<TableRow> acc{{"multi", {}}};
  for (const auto& r : shr.per_language) acc[0].values.push_back(100.0 * r.balanced_accuracy());
  write_text(dir / "shift_hold_accuracy.tsv", format_accuracy_table(languages, acc));
  write_text(dir / "lid.tsv", format_lid_table(lid));

  const bool time_ok = train_secs <= 1800.0;
  return {a_ok && b_ok && c_ok && d_ok && time_ok,
          fmt("(a) val l_vap %.3f -> %.3f, drop %.1f%% %s; (b) BA pitch-cue %.3f, amplitude-cue %.3f, no-cue %.3f %s; "
              "(c) LID weighted F1 %.4f %s; (d) flattening delta pitch-cue %+.3f, amplitude-cue %+.3f %s; "
              "training %.0f s %s; total %.0f s",
              val0, best, 100.0 * drop, a_ok ? "ok" : "FAIL", ba_pitch, ba_amp, ba_none, b_ok ? "ok" : "FAIL",
              lid.weighted_f1, c_ok ? "ok" : "FAIL", d_pitch, d_amp, d_ok ? "ok" : "FAIL", train_secs,
              time_ok ? "ok" : "FAIL", seconds_since(t_all))};
}

Outcome determinism_and_persistence() {
  const fs::path dir = work_dir("determinism");
  auto specs = default_specs();
  specs.resize(2);
  CorpusOptions opts;
  opts.dialogues_per_language = 10;
  opts.duration_sec = 30.0;
  opts.seed = 3;
  opts.flattened_test_audio = false;
  opts.jobs = worker_count();
  const auto split = generate_corpus(specs, opts, dir);
  const BaselineEncoder enc(0);
  const auto train = prepare(split.train, enc), val = prepare(split.val, enc);
  const auto train_serial = prepare_corpus(split.train, enc, nullptr, 1);
  bool features_same = true;
  for (std::size_t i = 0; i < train.size(); ++i) {
    for (int c = 0; c < 2; ++c) features_same = features_same && train[i].features[c] == train_serial[i].features[c];
  }

  ModelConfig mc;
  mc.d_model = 32;
  mc.max_frames = 500;
  mc.lid_classes = 2;
  TrainConfig tc;
  tc.epochs = 2;
  tc.window_sec = 10.0;
  tc.window_hop_sec = 5.0;
  tc.seed = 11;
  const auto r1 = run_training(train, val, mc, tc, enc.describe(), {"a", "b"});
  const auto r2 = run_training(train, val, mc, tc, enc.describe(), {"a", "b"});
  double curve_diff = r1.curves.size() == r2.curves.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(r1.curves.size(), r2.curves.size()); ++i) {
    const auto &x = r1.curves[i].loss, &y = r2.curves[i].loss;
    curve_diff = std::max({curve_diff, std::abs(x.l_vap - y.l_vap), std::abs(x.l_vad - y.l_vad),
                           std::abs(x.l_lid - y.l_lid)});
  }

  save_checkpoint(dir / "model.ckpt", r1.best);
  const auto loaded = load_checkpoint(dir / "model.ckpt");
  const auto a = r1.best.to_network(), b = loaded.to_network();
  const auto& probe = val.front();
  const MatrixF f0 = probe.features[0].topRows(400), f1 = probe.features[1].topRows(400);
  const auto oa = a.forward(f0, f1, Mode::eval), ob = b.forward(f0, f1, Mode::eval);
  const bool exact = oa.vap_logits == ob.vap_logits && oa.vad_logits == ob.vad_logits &&
                     oa.lid_logits == ob.lid_logits && loaded.tensors == r1.best.tensors;
  return {curve_diff <= 1e-6 && exact && features_same,
          fmt("loss curve max diff %.2g over %zu entries; probe outputs %s after reload; parallel features %s",
              curve_diff, r1.curves.size(), exact ? "bit-exact" : "differ", features_same ? "identical" : "differ")};
}

Outcome reference_table_formats() {
  const std::string loss = format_loss_table(reference::kLanguages, reference::kTestLoss);
  const std::string acc = format_accuracy_table(reference::kLanguages, reference::kShiftHoldAccuracy);
  const std::string delta =
      format_delta_table(reference::kPitchColumns, reference::kPitchRows, reference::kPitchFlattening);
  const std::string counts = format_shift_hold_table(reference::kShiftHoldCounts);
  const bool ok =
      loss.find("Training data\tENG\tMAN\tJPN\n") == 0 &&
      loss.find("\nMulti (proposed)\t2.396\t2.832\t2.265\n") != std::string::npos &&
      acc.find("\nMulti (proposed)\t77.16\t84.60\t76.54\n") != std::string::npos &&
      delta == "Test data\tMono\tMulti\nEnglish\t79.68 (+0.09)\t76.28 (+0.12)\nMandarin\t82.47 (-2.02)\t82.30 "
               "(-2.30)\nJapanese\t72.83 (-1.37)\t74.73 (-1.81)\n" &&
      counts.find("\nEnglish\t1253\t11432\t9.9\n") != std::string::npos;
  return {ok, ok ? "loss, accuracy, delta and count tables render as expected" : "a table layout differs"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> checks{
      {"codec exhaustiveness", codec_exhaustiveness},
      {"projection math", projection_math},
      {"loss anchors", loss_anchors},
      {"causality", causality},
      {"gradient fidelity", gradient_fidelity},
      {"event extraction", event_extraction},
      {"synthetic multilingual run", synthetic_multilingual_run},
      {"determinism and persistence", determinism_and_persistence},
      {"reference table formats", reference_table_formats},
  };
  const std::string only = argc > 1 ? argv[1] : "";
  int failed = 0;
  for (const auto& [name, fn] : checks) {
    if (!only.empty() && name.find(only) == std::string::npos) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const auto line = fmt("%s  %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    const auto results = fs::current_path() / "acceptance_work" / "results";
    fs::create_directories(results);
    write_text(results / (name + ".txt"), line);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
