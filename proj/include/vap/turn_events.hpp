#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vap/frame_core.hpp"

namespace vap {

enum class SilenceKind { gap, pause };
enum class TurnLabel { shift, hold };

const char* to_string(SilenceKind k);
const char* to_string(TurnLabel l);

/// A mutual silence flanked by single-speaker activity. A gap changes the
/// speaker; a pause returns to the same one.
struct SilenceEvent {
  double start_sec = 0.0;
  double end_sec = 0.0;
  int prev_speaker = 0;
  int next_speaker = 0;
  SilenceKind kind = SilenceKind::pause;

  double duration() const { return end_sec - start_sec; }
  std::size_t start_frame(const FrameGrid& grid = {}) const;
  std::size_t end_frame(const FrameGrid& grid = {}) const;
};

struct ShiftHoldSample {
  std::size_t decision_frame = 0;
  TurnLabel label = TurnLabel::hold;
  SilenceEvent silence;
};

struct ShiftHoldConfig {
  double min_silence_sec = 0.25;
  double min_utterance_sec = 1.0;
  double decision_offset_sec = 0.05;
};

/// Maximal runs of frames where neither speaker is voiced, including leading
/// and trailing ones. Returned as [begin, end) frame pairs in order.
std::vector<std::pair<std::size_t, std::size_t>> mutual_silence_runs(const VadStream& vad);

/// Mutual silences with speech on both sides, classified as gap or pause.
/// A silence whose flanking frame has both speakers voiced has no single
/// previous/next speaker and is not reported.
std::vector<SilenceEvent> extract_silences(const VadStream& vad, const FrameGrid& grid = {});

/// Shift/hold decision points: silences longer than `min_silence_sec` with at
/// least `min_utterance_sec` of overlap-free speech immediately before and
/// after. Utterances bridge same-speaker unvoiced stretches shorter than
/// `min_silence_sec`.
std::vector<ShiftHoldSample> extract_shift_hold(const VadStream& vad, const ShiftHoldConfig& cfg = {},
                                                const FrameGrid& grid = {});

/// Counts of `kind` events per duration bin [k*w, (k+1)*w). Empty when there
/// are no such events.
std::vector<std::size_t> duration_histogram(const std::vector<SilenceEvent>& events, SilenceKind kind,
                                            double bin_width_sec);

struct ShiftHoldStats {
  std::string dataset;
  std::size_t n_shift = 0;
  std::size_t n_hold = 0;
  double percent_shift() const;
};

ShiftHoldStats count_shift_hold(const std::string& dataset, const std::vector<ShiftHoldSample>& samples);

/// "Dataset\t#Shift\t#Hold\t%Shift" table, one row per dataset.
std::string format_shift_hold_table(const std::vector<ShiftHoldStats>& rows);

/// `dialogue_id TAB kind TAB start TAB end TAB prev TAB next` per event.
std::string format_events(const std::string& dialogue_id, const std::vector<SilenceEvent>& events);
/// `bin_start TAB count` per bin.
std::string format_histogram(const std::vector<std::size_t>& counts, double bin_width_sec);

}  // namespace vap
