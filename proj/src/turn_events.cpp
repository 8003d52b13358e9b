#include "vap/turn_events.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace vap {
namespace {

constexpr double kEps = 1e-9;

// Index of the only voiced speaker at `frame`, or nullopt if none/both.
std::optional<int> sole_speaker(const VadStream& vad, std::size_t frame) {
  const bool a = vad.voiced(0, frame), b = vad.voiced(1, frame);
  if (a == b) return std::nullopt;
  return a ? 0 : 1;
}

bool any_voiced(std::span<const std::uint8_t> track, std::size_t begin, std::size_t end) {
  for (std::size_t f = begin; f < end; ++f) {
    if (track[f]) return true;
  }
  return false;
}

// Does `speaker`'s bridged utterance ending at frame `last` (voiced) start at
// or before `need_start`? Unvoiced stretches shorter than `bridge` frames are
// bridged.
bool utterance_reaches_back(std::span<const std::uint8_t> track, std::size_t last, std::size_t need_start,
                            std::size_t bridge) {
  std::size_t pos = last;
  while (true) {
    std::size_t r = pos;
    while (r > 0 && track[r - 1]) --r;
    if (r <= need_start) return true;
    // unvoiced stretch [q + 1, r)
    std::size_t q = r;
    while (q > 0 && !track[q - 1]) --q;
    if (q == 0) return false;
    if (r - q >= bridge) return false;
    pos = q - 1;
  }
}

bool utterance_reaches_forward(std::span<const std::uint8_t> track, std::size_t first, std::size_t need_end,
                               std::size_t bridge) {
  const std::size_t n = track.size();
  std::size_t pos = first;
  while (true) {
    std::size_t r = pos;
    while (r + 1 < n && track[r + 1]) ++r;
    if (r + 1 >= need_end) return true;
    std::size_t q = r + 1;
    while (q < n && !track[q]) ++q;
    if (q == n) return false;
    if (q - (r + 1) >= bridge) return false;
    pos = q;
  }
}

}  // namespace

const char* to_string(SilenceKind k) { return k == SilenceKind::gap ? "gap" : "pause"; }
const char* to_string(TurnLabel l) { return l == TurnLabel::shift ? "shift" : "hold"; }

std::size_t SilenceEvent::start_frame(const FrameGrid& grid) const {
  return static_cast<std::size_t>(seconds_to_frame(start_sec, grid));
}
std::size_t SilenceEvent::end_frame(const FrameGrid& grid) const {
  return static_cast<std::size_t>(seconds_to_frame(end_sec, grid));
}

std::vector<std::pair<std::size_t, std::size_t>> mutual_silence_runs(const VadStream& vad) {
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  const std::size_t n = vad.n_frames();
  std::size_t f = 0;
  while (f < n) {
    if (vad.voiced(0, f) || vad.voiced(1, f)) {
      ++f;
      continue;
    }
    const std::size_t begin = f;
    while (f < n && !vad.voiced(0, f) && !vad.voiced(1, f)) ++f;
    runs.emplace_back(begin, f);
  }
  return runs;
}

std::vector<SilenceEvent> extract_silences(const VadStream& vad, const FrameGrid& grid) {
  std::vector<SilenceEvent> events;
  const double period = grid.frame_period_sec();
  for (auto [begin, end] : mutual_silence_runs(vad)) {
    if (begin == 0 || end == vad.n_frames()) continue;
    const auto prev = sole_speaker(vad, begin - 1);
    const auto next = sole_speaker(vad, end);
    if (!prev || !next) continue;
    SilenceEvent e;
    e.start_sec = begin * period;
    e.end_sec = end * period;
    e.prev_speaker = *prev;
    e.next_speaker = *next;
    e.kind = *prev == *next ? SilenceKind::pause : SilenceKind::gap;
    events.push_back(e);
  }
  return events;
}

std::vector<ShiftHoldSample> extract_shift_hold(const VadStream& vad, const ShiftHoldConfig& cfg,
                                                const FrameGrid& grid) {
  const double rate = grid.frame_rate_hz;
  const auto utt = static_cast<std::size_t>(std::ceil(cfg.min_utterance_sec * rate - kEps));
  const auto bridge = static_cast<std::size_t>(std::ceil(cfg.min_silence_sec * rate - kEps));
  const std::size_t n = vad.n_frames();
  std::vector<ShiftHoldSample> samples;
  for (const auto& ev : extract_silences(vad, grid)) {
    if (!(ev.duration() > cfg.min_silence_sec + kEps)) continue;
    const std::size_t s = ev.start_frame(grid), e = ev.end_frame(grid);
    if (s < utt || e + utt > n) continue;
    const int p = ev.prev_speaker, q = ev.next_speaker;
    if (any_voiced(vad.track(1 - p), s - utt, s)) continue;
    if (any_voiced(vad.track(1 - q), e, e + utt)) continue;
    if (!utterance_reaches_back(vad.track(p), s - 1, s - utt, bridge)) continue;
    if (!utterance_reaches_forward(vad.track(q), e, e + utt, bridge)) continue;
    ShiftHoldSample sample;
    sample.silence = ev;
    sample.label = p != q ? TurnLabel::shift : TurnLabel::hold;
    sample.decision_frame = static_cast<std::size_t>(seconds_to_frame(ev.start_sec + cfg.decision_offset_sec, grid));
    samples.push_back(sample);
  }
  return samples;
}

std::vector<std::size_t> duration_histogram(const std::vector<SilenceEvent>& events, SilenceKind kind,
                                            double bin_width_sec) {
  if (!(bin_width_sec > 0.0)) throw DomainError("histogram bin width must be positive");
  std::vector<std::size_t> counts;
  for (const auto& e : events) {
    if (e.kind != kind) continue;
    const auto k = static_cast<std::size_t>(std::floor(e.duration() / bin_width_sec + kEps));
    if (k >= counts.size()) counts.resize(k + 1, 0);
    ++counts[k];
  }
  return counts;
}

double ShiftHoldStats::percent_shift() const {
  const std::size_t total = n_shift + n_hold;
  return total ? 100.0 * static_cast<double>(n_shift) / static_cast<double>(total) : 0.0;
}

ShiftHoldStats count_shift_hold(const std::string& dataset, const std::vector<ShiftHoldSample>& samples) {
  ShiftHoldStats st{dataset, 0, 0};
  for (const auto& s : samples) (s.label == TurnLabel::shift ? st.n_shift : st.n_hold)++;
  return st;
}

std::string format_shift_hold_table(const std::vector<ShiftHoldStats>& rows) {
  std::ostringstream out;
  out << "Dataset\t#Shift\t#Hold\t%Shift\n";
  char buf[32];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.1f", r.percent_shift());
    out << r.dataset << '\t' << r.n_shift << '\t' << r.n_hold << '\t' << buf << '\n';
  }
  return out.str();
}

std::string format_events(const std::string& dialogue_id, const std::vector<SilenceEvent>& events) {
  std::ostringstream out;
  char buf[128];
  for (const auto& e : events) {
    std::snprintf(buf, sizeof buf, "\t%s\t%.3f\t%.3f\t%d\t%d\n", to_string(e.kind), e.start_sec, e.end_sec,
                  e.prev_speaker, e.next_speaker);
    out << dialogue_id << buf;
  }
  return out.str();
}

std::string format_histogram(const std::vector<std::size_t>& counts, double bin_width_sec) {
  std::ostringstream out;
  char buf[64];
  for (std::size_t k = 0; k < counts.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.3f\t%zu\n", static_cast<double>(k) * bin_width_sec, counts[k]);
    out << buf;
  }
  return out.str();
}

}  // namespace vap
