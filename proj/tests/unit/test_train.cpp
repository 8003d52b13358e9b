#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "vap/rng.hpp"
#include "vap/train.hpp"

using namespace vap;
namespace fs = std::filesystem;

namespace {

// A dialogue whose features carry its own voice activity, so a small model
// can learn something in a few steps.
PreparedDialogue toy_dialogue(std::size_t n, int dim, int language, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint8_t> v0(n), v1(n);
  int who = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (rng.bernoulli(0.03)) who = 1 - who;
    v0[t] = who == 0 && rng.bernoulli(0.9);
    v1[t] = who == 1 && rng.bernoulli(0.9);
  }
  PreparedDialogue d;
  d.manifest.dialogue_id = "toy" + std::to_string(seed);
  d.manifest.language_tag = language;
  d.manifest.duration_sec = static_cast<double>(n) / 50.0;
  d.vad = VadStream(v0, v1);
  d.labels = label_stream(d.vad);
  for (int c = 0; c < 2; ++c) {
    d.features[c] = MatrixF(static_cast<Eigen::Index>(n), dim);
    for (Eigen::Index t = 0; t < d.features[c].rows(); ++t) {
      for (int j = 0; j < dim; ++j) {
        const bool voiced = d.vad.voiced(c, static_cast<std::size_t>(t));
        d.features[c](t, j) = static_cast<float>((voiced ? 1.0 : -1.0) * (j % 2 ? 1 : 0.5) + 0.3 * rng.normal() +
                                                 (j == language ? 1.0 : 0.0));
      }
    }
  }
  return d;
}

ModelConfig toy_model() {
  ModelConfig m = ModelConfig::toy(16, 2, 8, 400);
  m.lid_classes = 2;
  return m;
}

TrainConfig toy_train() {
  TrainConfig t;
  t.epochs = 3;
  t.batch_size = 4;
  t.learning_rate = 3e-3;
  t.window_sec = 6.0;
  t.window_hop_sec = 3.0;
  return t;
}

}  // namespace

TEST_CASE("training windows") {
  TrainConfig cfg;  // 1000-frame windows, hop 500
  const std::vector<std::size_t> frames{2600, 1000, 1001, 100, 101};
  Diagnostics diag;
  const auto w = make_windows(frames, cfg, &diag);
  const std::vector<WindowRef> want{{0, 0, 1000},   {0, 500, 1000},  {0, 1000, 1000}, {0, 1500, 1000},
                                    {0, 2000, 600}, {1, 0, 1000},    {2, 0, 1000},    {2, 500, 501},
                                    {4, 0, 101}};
  CHECK(w == want);
  CHECK(diag.warnings().size() == 1);
  cfg.window_sec = 1.0;
  CHECK_THROWS_AS(make_windows(frames, cfg), ConfigError);
}

TEST_CASE("training configuration") {
  TrainConfig c;
  c.window_hop_sec = 30.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = 1.234e-4;
  c.seed = 99;
  c.max_sec_per_language = 3600;
  CHECK(TrainConfig::from_map(c.to_map()) == c);
  CHECK(c.window_frames() == 1000);
  CHECK(c.hop_frames() == 500);
}

TEST_CASE("per-language duration cap keeps manifest order") {
  std::vector<DialogueManifest> rows;
  for (int i = 0; i < 6; ++i) rows.push_back({"d" + std::to_string(i), "", "", i % 2, 100.0});
  Diagnostics diag;
  const auto kept = cap_duration_per_language(rows, 150.0, &diag);
  REQUIRE(kept.size() == 4);
  CHECK(kept[2].dialogue_id == "d2");
  CHECK(diag.warnings().size() == 2);
  CHECK(cap_duration_per_language(rows, 0.0).size() == 6);
  rows[0].duration_sec = 0.0;
  CHECK_THROWS_AS(cap_duration_per_language(rows, 10.0), ValidationError);
}

TEST_CASE("AdamW matches a scalar reference") {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.1;
  std::vector<Parameter<float>> params(1);
  params[0].value = MatrixF::Constant(1, 1, 0.5f);
  params[0].grad = MatrixF::Zero(1, 1);
  AdamW opt(cfg, params);
  double w = 0.5, m = 0.0, v = 0.0;
  const double grads[] = {0.3, -0.1, 0.7, 0.0};
  for (int t = 1; t <= 4; ++t) {
    const double g = grads[t - 1];
    params[0].grad(0, 0) = static_cast<float>(g);
    opt.step(params);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t)), vhat = v / (1.0 - std::pow(0.999, t));
    w = w * (1.0 - 0.01 * 0.1) - 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(std::abs(params[0].value(0, 0) - w) < 1e-6);
  }
  CHECK(opt.steps() == 4);
}

TEST_CASE("gradient clipping rescales to the maximum norm") {
  std::vector<Parameter<float>> params(2);
  params[0].grad = MatrixF::Constant(1, 1, 3.0f);
  params[1].grad = MatrixF::Constant(1, 1, 4.0f);
  CHECK(clip_grad_norm(params, 1.0) == doctest::Approx(5.0));
  CHECK(params[0].grad(0, 0) == doctest::Approx(0.6).epsilon(1e-5));
  CHECK(clip_grad_norm(params, 10.0) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(params[1].grad(0, 0) == doctest::Approx(0.8).epsilon(1e-5));
}

TEST_CASE("sliding inference takes each frame from one window") {
  auto m = toy_model();
  m.max_frames = 100;
  const VapNetwork<float> net(m);
  const auto d = toy_dialogue(260, 8, 0, 1);
  const auto out = sliding_forward(net, d, 100);
  REQUIRE(out.n_frames() == 260);
  // Windows: [0,100) all; [50,150) rows 100..149; [100,200) rows 150..199; ...
  const auto w1 = net.forward(MatrixF(d.features[0].middleRows(50, 100)), MatrixF(d.features[1].middleRows(50, 100)),
                              Mode::eval);
  CHECK(out.vap_logits.middleRows(100, 50) == w1.vap_logits.bottomRows(50));
  const auto w0 = net.forward(MatrixF(d.features[0].topRows(100)), MatrixF(d.features[1].topRows(100)), Mode::eval);
  CHECK(out.vap_logits.topRows(100) == w0.vap_logits);
  const auto last = net.forward(MatrixF(d.features[0].middleRows(200, 60)),
                                MatrixF(d.features[1].middleRows(200, 60)), Mode::eval);
  CHECK(out.vap_logits.bottomRows(10) == last.vap_logits.bottomRows(10));
  CHECK_THROWS_AS(sliding_forward(net, d, 101), ConfigError);
}

TEST_CASE("checkpoint round trip reproduces outputs bit-exactly") {
  auto m = toy_model();
  m.init_seed = 4;
  const VapNetwork<float> net(m);
  TrainConfig t = toy_train();
  auto ckpt = Checkpoint::from_network(net, t, 7, 1.25);
  ckpt.encoder = "baseline:3";
  ckpt.languages = {"a", "b"};
  const auto path = fs::temp_directory_path() / "vap_ckpt_test.ckpt";
  save_checkpoint(path, ckpt);
  const auto back = load_checkpoint(path);
  CHECK(back.model == m);
  CHECK(back.train == t);
  CHECK(back.encoder == "baseline:3");
  CHECK(back.languages == ckpt.languages);
  CHECK(back.epoch == 7);
  CHECK(back.val_loss == 1.25);
  CHECK(back.tensors == ckpt.tensors);
  const auto d = toy_dialogue(120, 8, 1, 2);
  const auto a = net.forward(d.features[0], d.features[1], Mode::eval);
  const auto b = back.to_network().forward(d.features[0], d.features[1], Mode::eval);
  CHECK(a.vap_logits == b.vap_logits);
  CHECK(a.lid_logits == b.lid_logits);
  fs::remove(path);
}

TEST_CASE("corrupt checkpoints are rejected") {
  const VapNetwork<float> net(toy_model());
  auto bytes = serialize_checkpoint(Checkpoint::from_network(net, toy_train(), 0, 0.0));
  CHECK_NOTHROW(deserialize_checkpoint(bytes));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad), FormatError);
  CHECK_THROWS_AS(deserialize_checkpoint(std::span(bytes).first(bytes.size() - 3)), FormatError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(deserialize_checkpoint(bad), FormatError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), IoError);
}

TEST_CASE("training is deterministic and selects the best validation epoch") {
  std::vector<PreparedDialogue> train, val;
  for (int i = 0; i < 6; ++i) train.push_back(toy_dialogue(400, 8, i % 2, 10 + i));
  for (int i = 0; i < 2; ++i) val.push_back(toy_dialogue(400, 8, i % 2, 50 + i));
  const auto m = toy_model();
  const auto t = toy_train();
  const auto r1 = run_training(train, val, m, t, "baseline", {"a", "b"});
  const auto r2 = run_training(train, val, m, t, "baseline", {"a", "b"});
  CHECK(format_loss_curves(r1.curves) == format_loss_curves(r2.curves));
  CHECK(r1.best.tensors == r2.best.tensors);
  CHECK(r1.windows_per_epoch == 6 * 2);
  double best = 1e300;
  int best_epoch = -1;
  double first = 0.0;
  for (const auto& c : r1.curves) {
    if (c.split != "val") continue;
    if (c.epoch == 0) first = c.loss.l_vap;
    if (c.loss.l_vap < best) {
      best = c.loss.l_vap;
      best_epoch = c.epoch;
    }
  }
  CHECK(r1.best.epoch == best_epoch);
  CHECK(r1.best.val_loss == doctest::Approx(best));
  CHECK(best < first);

  auto other = t;
  other.seed = 1;
  CHECK(format_loss_curves(run_training(train, val, m, other, "baseline", {"a", "b"}).curves) !=
        format_loss_curves(r1.curves));
}

TEST_CASE("training rejects empty splits") {
  std::vector<PreparedDialogue> some{toy_dialogue(300, 8, 0, 1)};
  CHECK_THROWS_AS(run_training({}, some, toy_model(), toy_train(), "baseline", {"a", "b"}), ConfigError);
  CHECK_THROWS_AS(run_training(some, {}, toy_model(), toy_train(), "baseline", {"a", "b"}), ConfigError);
}

TEST_CASE("loss curve text format") {
  std::vector<EpochLoss> curves(2);
  curves[0].epoch = 0;
  curves[0].split = "val";
  curves[0].loss.l_vap = 5.5;
  curves[0].loss.l_vad = 1.25;
  curves[1].epoch = 1;
  curves[1].split = "train";
  curves[1].loss.l_vap = 4.0;
  curves[1].loss.l_vad = 1.0;
  curves[1].loss.has_lid = true;
  curves[1].loss.l_lid = 0.5;
  CHECK(format_loss_curves(curves) == "0\tval\t5.500000\t1.250000\n1\ttrain\t4.000000\t1.000000\t0.500000\n");
}
