#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "vap/cli.hpp"
#include "vap/kv.hpp"
#include "vap/train.hpp"

using namespace vap;
namespace fs = std::filesystem;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "vap");
  return cli::run(args);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::size_t count_lines(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "vap_cli_test" / name;
  fs::remove_all(dir);
  return dir;
}

const std::string kFixture = std::string(VAP_TEST_DATA) + "/fixture/manifest.tsv";

}  // namespace

TEST_CASE("usage errors exit with 1, help and version with 0") {
  CHECK(run({"--version"}) == cli::kExitOk);
  CHECK(run({"analyze", "--help"}) == cli::kExitOk);
  CHECK(run({}) == cli::kExitInvalid);
  CHECK(run({"frobnicate"}) == cli::kExitInvalid);
  CHECK(run({"analyze", "--bogus"}) == cli::kExitInvalid);
  CHECK(run({"analyze", "--out", scratch("u").string()}) == cli::kExitInvalid);
  CHECK(run({"train", "--out", scratch("u").string(), "--train", kFixture}) == cli::kExitInvalid);
}

TEST_CASE("missing input files exit with 2") {
  CHECK(run({"analyze", "--out", scratch("m").string(), "--manifest", "/nonexistent/m.tsv"}) == cli::kExitRuntime);
}

TEST_CASE("analyze writes histograms and shift/hold statistics") {
  const auto out = scratch("analyze");
  REQUIRE(run({"analyze", "--out", out.string(), "--manifest", kFixture, "--name", "fixture", "--bin-width", "0.05"}) ==
          cli::kExitOk);
  CHECK(slurp(out / "shift_hold_stats.tsv") == "Dataset\t#Shift\t#Hold\t%Shift\nfixture\t5\t3\t62.5\n");
  CHECK(count_lines(out / "fixture" / "events.tsv") == 17);
  CHECK(count_lines(out / "fixture" / "shift_hold_samples.tsv") == 9);
  const auto kv = read_key_values(out / "run_config_echo");
  CHECK(kv.at("subcommand") == "analyze");
  CHECK(kv.at("bin-width") == "0.05");
  CHECK(kv.at("deterministic") == "false");
}

TEST_CASE("command-line flags override the config file") {
  const auto out = scratch("config");
  fs::create_directories(out);
  std::ofstream(out / "cfg") << "bin-width = 0.2\nname = fromfile\nseed = 9\n";
  REQUIRE(run({"analyze", "--config", (out / "cfg").string(), "--out", out.string(), "--manifest", kFixture,
               "--bin-width", "0.1"}) == cli::kExitOk);
  const auto kv = read_key_values(out / "run_config_echo");
  CHECK(kv.at("bin-width") == "0.1");
  CHECK(kv.at("name") == "fromfile");
  CHECK(kv.at("seed") == "9");
  CHECK(fs::exists(out / "fromfile" / "events.tsv"));

  std::ofstream(out / "bad") << "colour = blue\n";
  CHECK(run({"analyze", "--config", (out / "bad").string(), "--out", out.string(), "--manifest", kFixture}) ==
        cli::kExitInvalid);
}

TEST_CASE("synthesize, train and evaluate end to end") {
  const auto root = scratch("pipeline");
  const auto corpus = root / "corpus", model = root / "model", eval = root / "eval";
  REQUIRE(run({"synth", "--out", corpus.string(), "--langs", "2", "--per-lang", "10", "--duration", "30", "--seed",
               "1"}) == cli::kExitOk);
  CHECK(count_lines(corpus / "train.tsv") == 16);
  CHECK(fs::exists(corpus / "audio_flat" / "pfall_009.wav"));

  REQUIRE(run({"train", "--out", model.string(), "--train", (corpus / "train.tsv").string(), "--val",
               (corpus / "val.tsv").string(), "--d-model", "16", "--heads", "2", "--self-layers", "1",
               "--cross-layers", "1", "--max-frames", "500", "--epochs", "1", "--window-sec", "10",
               "--window-hop-sec", "10", "--max-sec-per-language", "120"}) == cli::kExitOk);
  const auto ckpt = load_checkpoint(model / "model.ckpt");
  CHECK(ckpt.model.lid_classes == 2);
  CHECK(ckpt.languages == std::vector<std::string>{"pfall", "aramp"});
  CHECK(count_lines(model / "loss_curves.tsv") == 3);
  CHECK(fs::exists(model / "model.cfg"));
  CHECK(read_key_values(model / "run_config_echo").at("d-model") == "16");

  const std::string c = (model / "model.ckpt").string(), t = (corpus / "test.tsv").string();
  CHECK(run({"eval-loss", "--out", eval.string(), "--checkpoint", c, "--label", "tiny", "--test", t, "--window",
             "500"}) == cli::kExitOk);
  CHECK(slurp(eval / "test_loss.tsv").rfind("Training data\tpfall\taramp\ntiny\t", 0) == 0);
  CHECK(run({"eval-shift-hold", "--out", eval.string(), "--checkpoint", c, "--label", "tiny", "--test", t,
             "--context", "500", "--audit", "20"}) == cli::kExitOk);
  CHECK(fs::exists(eval / "tiny.records.tsv"));
  CHECK(count_lines(eval / "shift_hold_accuracy.tsv") == 2);
  CHECK(run({"eval-lid", "--out", eval.string(), "--checkpoint", c, "--test", t, "--window", "500"}) ==
        cli::kExitOk);
  CHECK(count_lines(eval / "lid.tsv") == 4);
  CHECK(run({"eval-perturbed", "--out", eval.string(), "--checkpoint", c, "--label", "tiny", "--test", t,
             "--perturbed-dir", (corpus / "audio_flat").string(), "--context", "500"}) == cli::kExitOk);
  CHECK(slurp(eval / "perturbation.tsv").rfind("Test data\ttiny\n", 0) == 0);
  CHECK(run({"infer-trace", "--out", eval.string(), "--checkpoint", c, "--manifest", t, "--dialogue", "aramp_009",
             "--window", "500"}) == cli::kExitOk);
  CHECK(count_lines(eval / "aramp_009.trace.tsv") == 1500);
  CHECK(run({"eval-loss", "--out", eval.string(), "--checkpoint", (corpus / "train.tsv").string(), "--test", t}) ==
        cli::kExitInvalid);
  fs::remove_all(root);
}
