#include "vap/frame_core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace vap {
namespace {

// Timestamps carry at most millisecond precision, so products like 0.58 * 50
// that land a hair below an integer belong to the upper frame.
constexpr double kFrameEps = 1e-9;

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

// Decimal seconds with at most three fraction digits.
double parse_seconds(const std::string& field, const std::string& where) {
  const auto dot = field.find('.');
  if (field.empty() || field.find_first_not_of("0123456789.") != std::string::npos ||
      (dot != std::string::npos && (field.size() - dot - 1 > 3 || field.find('.', dot + 1) != std::string::npos))) {
    throw FormatError(where + ": bad seconds field '" + field + "'");
  }
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size()) {
    throw FormatError(where + ": bad seconds field '" + field + "'");
  }
  return value;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void FrameGrid::validate() const {
  if (frame_rate_hz <= 0 || sample_rate_hz <= 0) throw ConfigError("frame grid rates must be positive");
  if (sample_rate_hz % frame_rate_hz != 0) {
    throw ConfigError("sample rate must be an integer multiple of the frame rate");
  }
}

std::int64_t seconds_to_frame(double t, const FrameGrid& grid) {
  if (!(t >= 0.0)) throw DomainError("seconds_to_frame: negative or NaN time");
  return static_cast<std::int64_t>(std::floor(t * grid.frame_rate_hz + kFrameEps));
}

VadStream::VadStream(std::vector<std::uint8_t> speaker0, std::vector<std::uint8_t> speaker1)
    : tracks_{std::move(speaker0), std::move(speaker1)} {
  if (tracks_[0].size() != tracks_[1].size()) {
    throw DimensionError("VadStream: speaker tracks differ in length");
  }
  for (auto& t : tracks_) {
    for (auto& v : t) v = v ? 1 : 0;
  }
}

VadStream::VadStream(std::size_t n_frames)
    : tracks_{std::vector<std::uint8_t>(n_frames, 0), std::vector<std::uint8_t>(n_frames, 0)} {}

VadStream VadStream::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > n_frames()) throw DimensionError("VadStream::slice out of range");
  return VadStream(std::vector<std::uint8_t>(tracks_[0].begin() + begin, tracks_[0].begin() + end),
                   std::vector<std::uint8_t>(tracks_[1].begin() + begin, tracks_[1].begin() + end));
}

void VadSegments::validate() const {
  for (int s = 0; s < kNumSpeakers; ++s) {
    const auto& v = speakers[s];
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!(v[i].onset_sec >= 0.0)) {
        throw ValidationError("speaker " + std::to_string(s) + ": negative onset");
      }
      if (!(v[i].offset_sec > v[i].onset_sec)) {
        throw ValidationError("speaker " + std::to_string(s) + ": offset must exceed onset");
      }
      if (i > 0 && v[i].onset_sec < v[i - 1].offset_sec) {
        throw ValidationError("speaker " + std::to_string(s) + ": segments unsorted or overlapping");
      }
    }
  }
}

double VadSegments::max_offset() const {
  double m = 0.0;
  for (const auto& v : speakers) {
    for (const auto& iv : v) m = std::max(m, iv.offset_sec);
  }
  return m;
}

VadStream segments_to_stream(const VadSegments& segs, std::size_t n_frames, const FrameGrid& grid) {
  segs.validate();
  const double period = grid.frame_period_sec();
  const double limit = static_cast<double>(n_frames) * period;
  if (segs.max_offset() > limit + kFrameEps) {
    throw ValidationError("segments extend past the end of the stream");
  }
  std::array<std::vector<std::uint8_t>, kNumSpeakers> tracks;
  for (int s = 0; s < kNumSpeakers; ++s) {
    std::vector<double> covered(n_frames, 0.0);
    for (const auto& iv : segs.speakers[s]) {
      const auto first = static_cast<std::size_t>(seconds_to_frame(iv.onset_sec, grid));
      const auto last = std::min<std::size_t>(n_frames, static_cast<std::size_t>(
                                                            std::ceil(iv.offset_sec / period - kFrameEps)));
      for (std::size_t f = first; f < last; ++f) {
        const double lo = std::max(iv.onset_sec, f * period);
        const double hi = std::min(iv.offset_sec, (f + 1) * period);
        if (hi > lo) covered[f] += hi - lo;
      }
    }
    tracks[s].resize(n_frames);
    for (std::size_t f = 0; f < n_frames; ++f) {
      tracks[s][f] = covered[f] > 0.5 * period + kFrameEps ? 1 : 0;
    }
  }
  return VadStream(std::move(tracks[0]), std::move(tracks[1]));
}

VadSegments stream_to_segments(const VadStream& vad, const FrameGrid& grid) {
  VadSegments out;
  const double period = grid.frame_period_sec();
  for (int s = 0; s < kNumSpeakers; ++s) {
    const auto track = vad.track(s);
    std::size_t f = 0;
    while (f < track.size()) {
      if (!track[f]) {
        ++f;
        continue;
      }
      const std::size_t start = f;
      while (f < track.size() && track[f]) ++f;
      out.speakers[s].push_back({start * period, f * period});
    }
  }
  return out;
}

VadSegments clip_segments(const VadSegments& segs, double duration_sec) {
  VadSegments out;
  for (int s = 0; s < kNumSpeakers; ++s) {
    for (const auto& iv : segs.speakers[s]) {
      if (iv.onset_sec >= duration_sec) continue;
      out.speakers[s].push_back({iv.onset_sec, std::min(iv.offset_sec, duration_sec)});
    }
  }
  return out;
}

VadAnnotation parse_vad_annotation(const std::string& text, const std::string& origin) {
  VadAnnotation ann;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = origin + ":" + std::to_string(line_no);
    if (!have_header) {
      constexpr std::string_view kPrefix = "#languages:";
      if (line.rfind(kPrefix, 0) != 0) throw FormatError(where + ": missing '#languages:' header");
      for (auto& name : split(line.substr(kPrefix.size()), ',')) {
        auto t = trim(name);
        if (t.empty()) throw FormatError(where + ": empty language name");
        ann.languages.push_back(std::move(t));
      }
      have_header = true;
      continue;
    }
    if (trim(line).empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 3) throw FormatError(where + ": expected speaker<TAB>onset<TAB>offset");
    if (fields[0] != "0" && fields[0] != "1") throw FormatError(where + ": speaker index must be 0 or 1");
    const int spk = fields[0][0] - '0';
    ann.segments.speakers[spk].push_back({parse_seconds(fields[1], where), parse_seconds(fields[2], where)});
  }
  if (!have_header) throw FormatError(origin + ": empty annotation file");
  for (auto& v : ann.segments.speakers) {
    std::stable_sort(v.begin(), v.end(), [](const Interval& a, const Interval& b) { return a.onset_sec < b.onset_sec; });
  }
  ann.segments.validate();
  return ann;
}

std::string format_vad_annotation(const VadAnnotation& annotation) {
  std::ostringstream out;
  out << "#languages: ";
  for (std::size_t i = 0; i < annotation.languages.size(); ++i) {
    out << (i ? "," : "") << annotation.languages[i];
  }
  out << '\n';
  char buf[64];
  for (int s = 0; s < kNumSpeakers; ++s) {
    for (const auto& iv : annotation.segments.speakers[s]) {
      std::snprintf(buf, sizeof buf, "%d\t%.3f\t%.3f\n", s, iv.onset_sec, iv.offset_sec);
      out << buf;
    }
  }
  return out.str();
}

VadAnnotation read_vad_file(const std::filesystem::path& path) {
  return parse_vad_annotation(read_text(path), path.string());
}

void write_vad_file(const std::filesystem::path& path, const VadAnnotation& annotation) {
  write_text(path, format_vad_annotation(annotation));
}

std::vector<DialogueManifest> read_manifest(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  const auto base = path.parent_path();
  std::vector<DialogueManifest> rows;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line[0] == '#') continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    const auto f = split(line, '\t');
    if (f.size() != 4) throw ValidationError(where + ": expected 4 tab-separated fields");
    DialogueManifest row;
    row.dialogue_id = f[0];
    if (row.dialogue_id.empty()) throw ValidationError(where + ": empty dialogue id");
    auto resolve = [&](const std::string& p) {
      std::filesystem::path fp(p);
      return (fp.is_relative() ? base / fp : fp).lexically_normal().string();
    };
    row.audio_path = resolve(f[1]);
    row.vad_path = resolve(f[2]);
    int tag = -1;
    auto [ptr, ec] = std::from_chars(f[3].data(), f[3].data() + f[3].size(), tag);
    if (ec != std::errc() || ptr != f[3].data() + f[3].size() || tag < 0) {
      throw ValidationError(where + ": language tag must be a nonnegative integer");
    }
    row.language_tag = tag;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_manifest(const std::filesystem::path& path, const std::vector<DialogueManifest>& rows) {
  const auto base = path.parent_path();
  std::ostringstream out;
  for (const auto& r : rows) {
    auto rel = [&](const std::string& p) {
      std::filesystem::path fp(p);
      if (fp.is_absolute() || base.empty()) return fp.string();
      return fp.lexically_relative(base).string();
    };
    out << r.dialogue_id << '\t' << rel(r.audio_path) << '\t' << rel(r.vad_path) << '\t' << r.language_tag << '\n';
  }
  write_text(path, out.str());
}

VadStream load_vad_stream(const std::filesystem::path& vad_path, std::vector<std::string>* languages,
                          const FrameGrid& grid) {
  auto ann = read_vad_file(vad_path);
  if (languages) *languages = ann.languages;
  const auto n = static_cast<std::size_t>(std::ceil(ann.segments.max_offset() * grid.frame_rate_hz - kFrameEps));
  return segments_to_stream(ann.segments, n, grid);
}

Dialogue load_dialogue(const DialogueManifest& row, Diagnostics* diag, const FrameGrid& grid) {
  Dialogue d;
  d.manifest = row;
  auto ann = read_vad_file(row.vad_path);
  if (row.language_tag >= static_cast<int>(ann.languages.size())) {
    throw ValidationError(row.dialogue_id + ": language tag " + std::to_string(row.language_tag) +
                          " exceeds the " + std::to_string(ann.languages.size()) + " declared languages");
  }
  d.languages = ann.languages;
  d.audio = load_stereo_audio(row.audio_path, grid);
  const std::size_t audio_frames = d.audio.n_samples() / grid.samples_per_frame();
  const double audio_sec = static_cast<double>(audio_frames) / grid.frame_rate_hz;
  if (ann.segments.max_offset() > audio_sec + kFrameEps) {
    warn(diag, row.dialogue_id,
         "annotation extends past the audio (" + std::to_string(ann.segments.max_offset()) + " s > " +
             std::to_string(audio_sec) + " s); truncated to the audio length");
    ann.segments = clip_segments(ann.segments, audio_sec);
  }
  d.vad = segments_to_stream(ann.segments, audio_frames, grid);
  d.manifest.duration_sec = audio_sec;
  return d;
}

}  // namespace vap
