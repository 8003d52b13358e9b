#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "vap/eval.hpp"
#include "vap/rng.hpp"
#include "vap/synthgen.hpp"

using namespace vap;
namespace fs = std::filesystem;

namespace {

// Speaker 0 holds across a 0.4 s pause, then speaker 1 takes over: decision
// frames 102 (hold) and 202 (shift).
PreparedDialogue scripted(int language, std::uint64_t seed, int dim = 8) {
  VadSegments segs;
  segs.speakers[0] = {{0.0, 2.0}, {2.4, 4.0}};
  segs.speakers[1] = {{4.5, 6.0}};
  PreparedDialogue d;
  d.manifest.dialogue_id = "s" + std::to_string(seed);
  d.manifest.language_tag = language;
  d.vad = segments_to_stream(segs, 350);
  d.labels = label_stream(d.vad);
  Rng rng(seed);
  for (auto& f : d.features) {
    f = MatrixF(350, dim);
    for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = static_cast<float>(rng.normal());
  }
  return d;
}

VapNetwork<float> toy_net(int input_dim = 8) {
  auto m = ModelConfig::toy(16, 2, input_dim, 400);
  m.lid_classes = 2;
  m.init_seed = 3;
  return VapNetwork<float>(m);
}

ShiftHoldOptions short_context() {
  ShiftHoldOptions o;
  o.context_frames = 300;
  return o;
}

}  // namespace

TEST_CASE("next-speaker prediction") {
  CHECK(predict_turn({0.7, 0.3}, 0) == TurnLabel::hold);
  CHECK(predict_turn({0.7, 0.3}, 1) == TurnLabel::shift);
  CHECK(predict_turn({0.2, 0.8}, 0) == TurnLabel::shift);
  CHECK(predict_turn({0.5, 0.5}, 0) == TurnLabel::hold);
  CHECK(predict_turn({0.5, 0.5}, 1) == TurnLabel::hold);
}

TEST_CASE("balanced accuracy agrees with the oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Confusion c{};
    std::vector<int> truth, pred;
    const std::size_t n = rng.below(40);
    const double skew = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      const int t = rng.bernoulli(skew) ? 0 : 1;
      const int p = rng.bernoulli(0.7) ? t : 1 - t;
      ++c[t][p];
      truth.push_back(t);
      pred.push_back(p);
    }
    CHECK(balanced_accuracy(c) == doctest::Approx(oracle::balanced_accuracy(truth, pred)));
  }
  CHECK(balanced_accuracy(Confusion{}) == 0.0);
  // Only holds present: the score is the hold recall.
  CHECK(balanced_accuracy(Confusion{{{0, 0}, {1, 3}}}) == doctest::Approx(0.75));
}

TEST_CASE("LID scores from a confusion matrix") {
  const auto r = score_lid({{8, 2}, {0, 10}}, {"a", "b"});
  REQUIRE(r.classes.size() == 2);
  CHECK(r.classes[0].precision == doctest::Approx(1.0));
  CHECK(r.classes[0].recall == doctest::Approx(0.8));
  CHECK(r.classes[0].f1 == doctest::Approx(2 * 0.8 / 1.8));
  CHECK(r.classes[1].precision == doctest::Approx(10.0 / 12.0));
  CHECK(r.classes[1].f1 == doctest::Approx(2 * (10.0 / 12.0) / (10.0 / 12.0 + 1.0)));
  CHECK(r.weighted_f1 == doctest::Approx((r.classes[0].f1 * 10 + r.classes[1].f1 * 10) / 20));
  CHECK(r.frames == 20);
  CHECK(format_lid_table(r) ==
        "Class\tSupport\tPrecision\tRecall\tF1\n"
        "a\t10\t1.0000\t0.8000\t0.8889\n"
        "b\t10\t0.8333\t1.0000\t0.9091\n"
        "weighted\t20\t-\t-\t0.8990\n");
  CHECK_THROWS_AS(score_lid({{1, 2}}, {"a"}), DimensionError);
}

TEST_CASE("result table layouts") {
  const auto loss = format_loss_table(reference::kLanguages, reference::kTestLoss);
  CHECK(loss.rfind("Training data\tENG\tMAN\tJPN\nEnglish\t2.387\t3.401\t2.956\n", 0) == 0);
  CHECK(loss.find("Multi (proposed)\t2.396\t2.832\t2.265\n") != std::string::npos);
  const auto acc = format_accuracy_table(reference::kLanguages, reference::kShiftHoldAccuracy);
  CHECK(acc.find("Japanese\t64.46\t67.89\t74.20\n") != std::string::npos);
  CHECK(format_shift_hold_table(reference::kShiftHoldCounts) ==
        "Dataset\t#Shift\t#Hold\t%Shift\n"
        "English\t1253\t11432\t9.9\n"
        "Mandarin\t718\t1807\t28.4\n"
        "Japanese\t1029\t1371\t42.9\n");
  const auto delta = format_delta_table(reference::kPitchColumns, reference::kPitchRows, reference::kPitchFlattening);
  CHECK(delta ==
        "Test data\tMono\tMulti\n"
        "English\t79.68 (+0.09)\t76.28 (+0.12)\n"
        "Mandarin\t82.47 (-2.02)\t82.30 (-2.30)\n"
        "Japanese\t72.83 (-1.37)\t74.73 (-1.81)\n");
  CHECK(format_loss_table({"a", "b"}, {{"m", {1.0, std::nullopt}}}) == "Training data\ta\tb\nm\t1.000\t-\n");
}

TEST_CASE("shift/hold evaluation follows p_now at each decision frame") {
  const auto net = toy_net();
  const std::vector<PreparedDialogue> ds{scripted(0, 1), scripted(1, 2), scripted(1, 3)};
  auto opts = short_context();
  opts.audit_samples = 100;
  const auto r = eval_shift_hold(net, ds, 2, opts);
  REQUIRE(r.overall.size() == 6);
  CHECK(r.per_language[0].size() == 2);
  CHECK(r.per_language[1].size() == 4);
  for (const auto& rec : r.overall.records) {
    const auto& d = rec.dialogue_id == "s1" ? ds[0] : rec.dialogue_id == "s2" ? ds[1] : ds[2];
    CHECK(rec.p_now == p_now_at(net, d, rec.frame, 300));
    CHECK(rec.prediction == predict_turn(rec.p_now, rec.prev_speaker));
    CHECK(rec.p_now[0] + rec.p_now[1] == doctest::Approx(1.0));
  }
  CHECK(r.overall.records[0].frame == 102);
  CHECK(r.overall.records[0].truth == TurnLabel::hold);
  CHECK(r.overall.records[1].frame == 202);
  CHECK(r.overall.records[1].truth == TurnLabel::shift);
  CHECK(r.audit.checked == 6);
  CHECK(r.audit.passed());
  CHECK_THROWS_AS(eval_shift_hold(net, ds, 1, opts), ValidationError);
}

TEST_CASE("decision outputs ignore frames after the decision") {
  const auto net = toy_net();
  const auto d = scripted(0, 4);
  auto cut = d;
  for (auto& f : cut.features) f.bottomRows(350 - 203).setConstant(9.0f);
  for (std::size_t frame : {102u, 202u}) CHECK(p_now_at(net, d, frame, 300) == p_now_at(net, cut, frame, 300));
}

TEST_CASE("test loss per language") {
  const auto net = toy_net();
  const std::vector<PreparedDialogue> ds{scripted(0, 1), scripted(0, 2)};
  const auto rows = eval_test_loss(net, ds, {"a", "b"}, 200);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].present);
  CHECK(rows[0].dialogues == 2);
  CHECK_FALSE(rows[1].present);
  double sum = 0.0;
  for (const auto& d : ds) sum += compute_losses<float>(sliding_forward(net, d, 200), d.labels, d.vad).l_vap;
  CHECK(rows[0].loss.l_vap == doctest::Approx(sum / 2));
  CHECK(rows[0].loss.labeled_frames == 2 * 250);
}

TEST_CASE("frame-level language identification") {
  const auto net = toy_net();
  const std::vector<PreparedDialogue> ds{scripted(0, 1), scripted(1, 2)};
  const auto r = eval_lid(net, ds, {"a", "b"}, 200);
  CHECK(r.frames == 700);
  CHECK(r.classes[0].support == 350);
  auto m = net.config();
  m.lid_classes = 0;
  CHECK_THROWS_AS(eval_lid(VapNetwork<float>(m), ds, {"a", "b"}), ConfigError);
}

TEST_CASE("projection trace text") {
  const auto net = toy_net();
  const auto d = scripted(0, 5);
  const auto trace = projection_trace(net, d, 200);
  REQUIRE(trace.size() == 350);
  for (const auto& f : trace) {
    CHECK(f.p_now[0] + f.p_now[1] == doctest::Approx(1.0));
    CHECK(f.p_future[0] + f.p_future[1] == doctest::Approx(1.0));
  }
  const auto text = format_trace(trace);
  std::istringstream in(text);
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    CHECK(std::count(line.begin(), line.end(), '\t') == 4);
    ++lines;
  }
  CHECK(lines == 350);
  CHECK(text.rfind("0\t", 0) == 0);
}

TEST_CASE("perturbed evaluation pairs dialogues by file name") {
  const auto dir = fs::temp_directory_path() / "vap_eval_perturb";
  fs::remove_all(dir);
  fs::create_directories(dir / "orig");
  fs::create_directories(dir / "pert");
  const auto specs = default_specs();
  const BaselineEncoder enc(0);
  std::vector<PreparedDialogue> ds;
  for (int i = 0; i < 2; ++i) {
    const auto g = generate_dialogue(specs[i], 30.0, 10 + i, i);
    const std::string id = "g" + std::to_string(i);
    write_wav(dir / "orig" / (id + ".wav"), g.audio);
    VadAnnotation a;
    a.languages = {"a", "b"};
    a.segments = g.segments;
    std::ofstream(dir / "orig" / (id + ".vad")) << format_vad_annotation(a);
    DialogueManifest row{id, (dir / "orig" / (id + ".wav")).string(), (dir / "orig" / (id + ".vad")).string(), i, 0.0};
    ds.push_back(prepare_dialogue(load_dialogue(row), enc));
  }
  // Identical audio for g0 only.
  fs::copy_file(dir / "orig" / "g0.wav", dir / "pert" / "g0.wav");
  const auto net = toy_net(256);
  Diagnostics diag;
  const auto r = eval_with_perturbation(net, ds, dir / "pert", enc, {"a", "b"}, short_context(), &diag);
  CHECK(r.excluded == std::vector<std::string>{"g1"});
  REQUIRE(r.rows.size() == 1);
  CHECK(r.rows[0].corpus == "a");
  CHECK(r.rows[0].samples > 0);
  CHECK(r.rows[0].delta() == 0.0);
  CHECK(diag.warnings().size() == 1);
  fs::remove_all(dir);
}
