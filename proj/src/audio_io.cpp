#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "vap/frame_core.hpp"

namespace vap {
namespace {

static_assert(std::endian::native == std::endian::little, "WAV codec assumes a little-endian host");

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

template <class T>
T read_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
  T v;
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

template <class T>
void append_le(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

void append_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

}  // namespace

Waveform decode_wav(std::span<const std::uint8_t> bytes, const FrameGrid& grid, const std::string& origin) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError(origin + ": not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::span<const std::uint8_t> data;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t size = read_le<std::uint32_t>(bytes, pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw FormatError(origin + ": truncated chunk");
    if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError(origin + ": short fmt chunk");
      format = read_le<std::uint16_t>(bytes, body);
      channels = read_le<std::uint16_t>(bytes, body + 2);
      rate = read_le<std::uint32_t>(bytes, body + 4);
      bits = read_le<std::uint16_t>(bytes, body + 14);
      if (format == kFormatExtensible) {
        if (size < 40) throw FormatError(origin + ": short extensible fmt chunk");
        format = read_le<std::uint16_t>(bytes, body + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
      data = bytes.subspan(body, size);
    }
    pos = body + size + (size & 1);
  }
  if (!have_fmt || data.data() == nullptr) throw FormatError(origin + ": missing fmt or data chunk");
  if (channels != kNumSpeakers) {
    throw ChannelCountError(origin + ": expected 2 channels, found " + std::to_string(channels));
  }
  const bool pcm16 = format == kFormatPcm && bits == 16;
  const bool f32 = format == kFormatFloat && bits == 32;
  if (!pcm16 && !f32) {
    throw FormatError(origin + ": unsupported encoding (format " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bits)");
  }
  if (static_cast<int>(rate) != grid.sample_rate_hz) {
    throw FormatError(origin + ": sample rate " + std::to_string(rate) + " Hz, expected " +
                      std::to_string(grid.sample_rate_hz) + " Hz");
  }
  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t total = data.size() / (bytes_per_sample * channels);
  const std::size_t spf = grid.samples_per_frame();
  const std::size_t n = total - total % spf;

  Waveform w;
  w.sample_rate_hz = grid.sample_rate_hz;
  for (auto& c : w.channels) c.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < kNumSpeakers; ++c) {
      const std::size_t off = (i * channels + c) * bytes_per_sample;
      if (pcm16) {
        w.channels[c][i] = static_cast<float>(read_le<std::int16_t>(data, off)) / 32768.0f;
      } else {
        w.channels[c][i] = std::clamp(read_le<float>(data, off), -1.0f, 1.0f);
      }
    }
  }
  return w;
}

Waveform load_stereo_audio(const std::filesystem::path& path, const FrameGrid& grid) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open audio file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, grid, path.string());
}

std::vector<std::uint8_t> encode_wav(const Waveform& wave, SampleFormat format) {
  const std::uint16_t channels = kNumSpeakers;
  const std::uint16_t bits = format == SampleFormat::pcm16 ? 16 : 32;
  const std::uint32_t n = static_cast<std::uint32_t>(wave.n_samples());
  const std::uint32_t data_size = n * channels * (bits / 8);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_size);
  append_tag(out, "RIFF");
  append_le<std::uint32_t>(out, 36 + data_size);
  append_tag(out, "WAVE");
  append_tag(out, "fmt ");
  append_le<std::uint32_t>(out, 16);
  append_le<std::uint16_t>(out, format == SampleFormat::pcm16 ? kFormatPcm : kFormatFloat);
  append_le<std::uint16_t>(out, channels);
  append_le<std::uint32_t>(out, static_cast<std::uint32_t>(wave.sample_rate_hz));
  append_le<std::uint32_t>(out, static_cast<std::uint32_t>(wave.sample_rate_hz) * channels * (bits / 8));
  append_le<std::uint16_t>(out, channels * (bits / 8));
  append_le<std::uint16_t>(out, bits);
  append_tag(out, "data");
  append_le<std::uint32_t>(out, data_size);
  for (std::uint32_t i = 0; i < n; ++i) {
    for (int c = 0; c < channels; ++c) {
      const float v = std::clamp(wave.channels[c][i], -1.0f, 1.0f);
      if (format == SampleFormat::pcm16) {
        append_le<std::int16_t>(out, static_cast<std::int16_t>(std::lround(std::clamp(v * 32768.0f, -32768.0f, 32767.0f))));
      } else {
        append_le<float>(out, v);
      }
    }
  }
  return out;
}

void write_wav(const std::filesystem::path& path, const Waveform& wave, SampleFormat format) {
  if (wave.channels[0].size() != wave.channels[1].size()) throw DimensionError("channel lengths differ");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode_wav(wave, format);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write audio file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace vap
