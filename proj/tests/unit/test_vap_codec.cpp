#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "vap/vap_codec.hpp"

using namespace vap;

TEST_CASE("state index round trip over all states") {
  for (int i = 0; i < kNumStates; ++i) {
    const auto bits = decode_state(i);
    CHECK(encode_state(bits) == i);
    CHECK(VapState(i).index() == i);
    for (int s = 0; s < 2; ++s) {
      for (int b = 0; b < kNumBins; ++b) CHECK(bits[s][b] == (((i >> (4 * s + b)) & 1) == 1));
    }
  }
  CHECK_THROWS_AS(decode_state(256), DomainError);
  CHECK_THROWS_AS(decode_state(-1), DomainError);
}

TEST_CASE("swapping speakers exchanges the nibbles") {
  CHECK(VapState(0x1F).swapped().index() == 0xF1);
  for (int i = 0; i < kNumStates; ++i) CHECK(VapState(i).swapped().swapped().index() == i);
}

TEST_CASE("discretize_window matches a literal recount") {
  std::mt19937_64 g(3);
  for (int trial = 0; trial < 2000; ++trial) {
    const double density = std::uniform_real_distribution<double>(0.0, 1.0)(g);
    oracle::Track a(100), b(100);
    for (int f = 0; f < 100; ++f) {
      a[f] = std::bernoulli_distribution(density)(g);
      b[f] = std::bernoulli_distribution(1.0 - density)(g);
    }
    CHECK(discretize_window(a, b).index() == oracle::recount_state(a, b));
  }
}

TEST_CASE("a bin with exactly half its frames voiced is unvoiced") {
  oracle::Track a(100, 0), b(100, 0);
  for (int f = 0; f < 5; ++f) a[f] = 1;
  CHECK(discretize_window(a, b).index() == 0);
  a[5] = 1;
  CHECK(discretize_window(a, b).index() == 1);
  for (int f = 30; f < 45; ++f) b[f] = 1;
  CHECK(discretize_window(a, b).index() == 1);
  b[45] = 1;
  CHECK(discretize_window(a, b).index() == (1 | (1 << 6)));
}

TEST_CASE("discretize_window rejects short windows") {
  oracle::Track a(99), b(99);
  CHECK_THROWS_AS(discretize_window(a, b), DimensionError);
}

TEST_CASE("projection of the uniform distribution is even") {
  const auto p = project_now_future(VapDistribution::uniform());
  CHECK(p.p_now[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.p_future[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("projection of a one-hot state") {
  // State 3: speaker 0 voiced in both near bins, nothing else.
  const auto p = project_now_future(VapDistribution::one_hot(3));
  const double expected = std::exp(2.0) / (std::exp(2.0) + 1.0);
  CHECK(std::abs(p.p_now[0] - expected) < 1e-12);
  CHECK(std::abs(p.p_now[0] - 0.8808) < 1e-4);
  CHECK(std::abs(p.p_future[0] - 0.5) < 1e-12);
}

TEST_CASE("marginals and projections match state sums") {
  std::mt19937_64 g(9);
  for (int trial = 0; trial < 200; ++trial) {
    std::array<double, 256> raw{};
    double z = 0.0;
    for (auto& x : raw) z += (x = std::exponential_distribution<double>(1.0)(g));
    VapDistribution d;
    for (int i = 0; i < 256; ++i) d.probs[i] = raw[i] / z;
    const auto m = bin_marginals(d);
    const auto want = oracle::state_marginals(d.probs);
    for (int s = 0; s < 2; ++s) {
      for (int b = 0; b < 4; ++b) CHECK(std::abs(m[s][b] - want[s][b]) < 1e-12);
    }
    const auto p = project_now_future(d);
    const auto now = oracle::projected(d.probs, 0, 2), fut = oracle::projected(d.probs, 2, 4);
    CHECK(std::abs(p.p_now[0] - now[0]) < 1e-12);
    CHECK(std::abs(p.p_future[1] - fut[1]) < 1e-12);
  }
}

TEST_CASE("distributions must be normalized") {
  VapDistribution d;
  CHECK_THROWS_AS(d.validate(), ValidationError);
  d.probs[0] = -0.5;
  d.probs[1] = 1.5;
  CHECK_THROWS_AS(d.validate(), ValidationError);
  CHECK_NOTHROW(VapDistribution::one_hot(200).validate());
}

TEST_CASE("from_logits is a stable softmax") {
  std::vector<float> logits(256, 0.0f);
  logits[7] = 1000.0f;
  const auto d = VapDistribution::from_logits(std::span<const float>(logits));
  CHECK(d.probs[7] == doctest::Approx(1.0));
  CHECK_THROWS_AS(VapDistribution::from_logits(std::span<const float>(logits).first(10)), DimensionError);
}

TEST_CASE("label_stream labels every frame with a full horizon") {
  std::mt19937_64 g(4);
  const std::size_t n = 400;
  oracle::Track a(n), b(n);
  for (std::size_t f = 0; f < n; ++f) {
    a[f] = (f / 37) % 2;
    b[f] = std::bernoulli_distribution(0.3)(g);
  }
  const auto labels = label_stream(VadStream(a, b));
  REQUIRE(labels.size() == n - 100);
  for (std::size_t t = 0; t < labels.size(); t += 13) {
    const oracle::Track wa(a.begin() + t + 1, a.begin() + t + 101), wb(b.begin() + t + 1, b.begin() + t + 101);
    CHECK(labels[t].index() == oracle::recount_state(wa, wb));
  }
}

TEST_CASE("label_stream on a stream without a full horizon is empty with a warning") {
  Diagnostics diag;
  CHECK(label_stream(VadStream(100), {}, &diag).empty());
  CHECK(diag.warnings().size() == 1);
}

TEST_CASE("custom bin boundaries") {
  const auto cfg = BinConfig::from_seconds({0.1, 0.3, 0.6, 1.0});
  CHECK(cfg.boundaries_frames == std::array<int, 4>{5, 15, 30, 50});
  BinConfig bad;
  bad.boundaries_frames = {10, 10, 60, 100};
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("label dump round trip") {
  const auto path = std::filesystem::temp_directory_path() / "vap_labels_test.bin";
  std::vector<VapState> labels{VapState(0), VapState(255), VapState(17)};
  write_label_dump(path, labels);
  CHECK(read_label_dump(path) == labels);
  std::filesystem::remove(path);
}
