#include "vap/encoder.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "vap/rng.hpp"

namespace vap {
namespace {

// Products are evaluated in fixed-height row chunks so that every output row
// sees the same kernel shapes no matter how long the input is. That keeps a
// prefix's features bit-identical to the corresponding rows of the full run.
constexpr Eigen::Index kRowChunk = 64;

MatrixF chunked_product(const MatrixF& a, const MatrixF& b) {
  MatrixF out(a.rows(), b.cols());
  MatrixF block(kRowChunk, a.cols());
  MatrixF prod(kRowChunk, b.cols());
  for (Eigen::Index r = 0; r < a.rows(); r += kRowChunk) {
    const Eigen::Index rows = std::min(kRowChunk, a.rows() - r);
    block.setZero();
    block.topRows(rows) = a.middleRows(r, rows);
    prod.noalias() = block * b;
    out.middleRows(r, rows) = prod.topRows(rows);
  }
  return out;
}

constexpr float kLogFloor = 1e-3f;
constexpr std::array<double, 3> kTimeConstantsSec{0.1, 0.3, 1.0};

}  // namespace

BaselineEncoder::BaselineEncoder(std::uint64_t seed, const FrameGrid& grid) : seed_(seed), grid_(grid) {
  grid_.validate();
  if (grid_.samples_per_frame() != 2 * kHop) {
    throw ConfigError("baseline encoder requires 320 samples per frame (16 kHz at 50 Hz)");
  }
  Rng rng(seed);
  static_assert(kBands * (1 + kTimeConstantsSec.size()) == kDim);
  filters_.resize(kKernel, 2 * kBands);
  const double fs = grid_.sample_rate_hz;
  const double lo = std::log(60.0), hi = std::log(4000.0);
  const double scale = 4.0 / kKernel;
  for (int j = 0; j < kBands; ++j) {
    const double freq = std::exp(rng.uniform(lo, hi));
    for (int n = 0; n < kKernel; ++n) {
      const double window = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * n / kKernel));
      const double phase = 2.0 * std::numbers::pi * freq * n / fs;
      filters_(n, j) = static_cast<float>(scale * window * std::cos(phase));
      filters_(n, kBands + j) = static_cast<float>(scale * window * std::sin(phase));
    }
  }
  mix_.resize(kDim, kDim);
  for (int i = 0; i < kDim; ++i) {
    for (int j = 0; j < kDim; ++j) mix_(i, j) = static_cast<float>(rng.normal() / std::sqrt(double{kDim}));
  }
  bias_.resize(kDim);
  for (int j = 0; j < kDim; ++j) bias_(j) = static_cast<float>(0.1 * rng.normal());
}

FeatureStream BaselineEncoder::encode(std::span<const float> waveform, const std::string&, int) const {
  const std::size_t n_frames = waveform.size() / grid_.samples_per_frame();
  const auto n_hops = static_cast<Eigen::Index>(2 * n_frames);
  MatrixF windows = MatrixF::Zero(n_hops, kKernel);
  for (Eigen::Index h = 0; h < n_hops; ++h) {
    // The hop ends at sample (h + 1) * kHop (exclusive); earlier samples only.
    const std::int64_t end = (h + 1) * kHop;
    for (int n = 0; n < kKernel; ++n) {
      const std::int64_t idx = end - kKernel + n;
      if (idx >= 0) windows(h, n) = waveform[static_cast<std::size_t>(idx)];
    }
  }
  const MatrixF response = chunked_product(windows, filters_);
  MatrixF stacked(static_cast<Eigen::Index>(n_frames), kDim);
  for (Eigen::Index t = 0; t < stacked.rows(); ++t) {
    for (int j = 0; j < kBands; ++j) {
      const float m0 = std::hypot(response(2 * t, j), response(2 * t, kBands + j));
      const float m1 = std::hypot(response(2 * t + 1, j), response(2 * t + 1, kBands + j));
      stacked(t, j) = 0.5f * (std::log(0.5f * (m0 + m1) + kLogFloor) + 4.0f);
    }
  }
  for (std::size_t k = 0; k < kTimeConstantsSec.size(); ++k) {
    const auto a = static_cast<float>(1.0 - std::exp(-1.0 / (kTimeConstantsSec[k] * grid_.frame_rate_hz)));
    const int col = kBands * static_cast<int>(k + 1);
    for (Eigen::Index t = 0; t < stacked.rows(); ++t) {
      for (int j = 0; j < kBands; ++j) {
        const float prev = t == 0 ? stacked(0, j) : stacked(t - 1, col + j);
        stacked(t, col + j) = prev + a * (stacked(t, j) - prev);
      }
    }
  }
  FeatureStream out;
  out.frames = chunked_product(stacked, mix_);
  out.frames.rowwise() += bias_;
  return out;
}

std::string BaselineEncoder::describe() const { return "baseline:" + std::to_string(seed_); }

FileFeatureEncoder::FileFeatureEncoder(std::string path_template, const FrameGrid& grid)
    : template_(std::move(path_template)), grid_(grid) {
  if (template_.empty()) throw ConfigError("empty feature path template");
}

std::filesystem::path FileFeatureEncoder::path_for(const std::string& dialogue_id, int channel) const {
  std::string p = template_;
  auto replace_all = [&](const std::string& key, const std::string& value) {
    for (auto pos = p.find(key); pos != std::string::npos; pos = p.find(key, pos + value.size())) {
      p.replace(pos, key.size(), value);
    }
  };
  replace_all("{id}", dialogue_id);
  replace_all("{ch}", std::to_string(channel));
  return p;
}

FeatureStream FileFeatureEncoder::encode(std::span<const float> waveform, const std::string& dialogue_id,
                                         int channel) const {
  return load_features(path_for(dialogue_id, channel), waveform.size() / grid_.samples_per_frame());
}

std::unique_ptr<AudioEncoder> make_encoder(const std::string& selector, std::uint64_t default_seed) {
  if (selector == "baseline") return std::make_unique<BaselineEncoder>(default_seed);
  if (selector.rfind("baseline:", 0) == 0) {
    try {
      return std::make_unique<BaselineEncoder>(std::stoull(selector.substr(9)));
    } catch (const std::logic_error&) {
      throw ConfigError("bad baseline encoder seed in '" + selector + "'");
    }
  }
  if (selector.rfind("file:", 0) == 0) return std::make_unique<FileFeatureEncoder>(selector.substr(5));
  throw ConfigError("unknown encoder '" + selector + "' (expected baseline or file:<template>)");
}

void write_features(const std::filesystem::path& path, const FeatureStream& features, int rate_hz) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::uint32_t version = kFeatureFileVersion;
  const auto dim = static_cast<std::uint32_t>(features.dim());
  const auto rate = static_cast<std::uint32_t>(rate_hz);
  const std::uint64_t count = features.n_frames();
  out.write("VAPF", 4);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&dim), 4);
  out.write(reinterpret_cast<const char*>(&rate), 4);
  out.write(reinterpret_cast<const char*>(&count), 8);
  out.write(reinterpret_cast<const char*>(features.frames.data()),
            static_cast<std::streamsize>(features.frames.size() * sizeof(float)));
  if (!out) throw IoError("write failed for " + path.string());
}

FeatureStream load_features(const std::filesystem::path& path, std::size_t expected_frames) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open feature file " + path.string());
  char magic[4];
  std::uint32_t version = 0, dim = 0, rate = 0;
  std::uint64_t count = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&dim), 4);
  in.read(reinterpret_cast<char*>(&rate), 4);
  in.read(reinterpret_cast<char*>(&count), 8);
  if (!in || std::memcmp(magic, "VAPF", 4) != 0) throw FormatError(path.string() + ": not a feature file");
  if (version != kFeatureFileVersion) throw FormatError(path.string() + ": unsupported feature file version");
  const EncoderContract contract;
  if (static_cast<int>(dim) != contract.output_dim) {
    throw FormatError(path.string() + ": feature dim " + std::to_string(dim) + ", expected 256");
  }
  if (static_cast<int>(rate) != contract.output_rate_hz) {
    throw FormatError(path.string() + ": feature rate " + std::to_string(rate) + " Hz, expected 50 Hz");
  }
  const auto diff = static_cast<std::int64_t>(count) - static_cast<std::int64_t>(expected_frames);
  if (diff > 2 || diff < -2) {
    throw ValidationError(path.string() + ": " + std::to_string(count) + " frames, expected " +
                          std::to_string(expected_frames) + " (tolerance 2)");
  }
  MatrixF raw(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(dim));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
  if (!in) throw FormatError(path.string() + ": truncated feature data");

  FeatureStream out;
  out.frames.resize(static_cast<Eigen::Index>(expected_frames), raw.cols());
  const Eigen::Index keep = std::min<Eigen::Index>(raw.rows(), out.frames.rows());
  out.frames.topRows(keep) = raw.topRows(keep);
  for (Eigen::Index r = keep; r < out.frames.rows(); ++r) {
    if (keep > 0) {
      out.frames.row(r) = raw.row(keep - 1);
    } else {
      out.frames.row(r).setZero();
    }
  }
  if (!out.all_finite()) throw FormatError(path.string() + ": non-finite feature values");
  return out;
}

}  // namespace vap
