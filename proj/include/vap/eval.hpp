#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vap/encoder.hpp"
#include "vap/net.hpp"
#include "vap/train.hpp"
#include "vap/turn_events.hpp"

namespace vap {

// ---------------------------------------------------------------------------
// Test loss

struct CorpusLoss {
  std::string corpus;
  int language = 0;
  /// False when the test set holds no labeled frame of this language.
  bool present = false;
  std::size_t dialogues = 0;
  LossBreakdown loss;
};

/// Mean l_vap over all labeled frames of each language (frame-weighted),
/// using sliding eval-mode inference with `window` frames.
std::vector<CorpusLoss> eval_test_loss(const VapNetwork<float>& net, std::span<const PreparedDialogue> dialogues,
                                       const std::vector<std::string>& languages, int window = 1000);

// ---------------------------------------------------------------------------
// Shift/hold

/// Next-speaker decision from p_now at the decision frame. A tie predicts
/// that `prev_speaker` continues (hold).
TurnLabel predict_turn(const std::array<double, 2>& p_now, int prev_speaker);

struct ShiftHoldRecord {
  std::string dialogue_id;
  int language = 0;
  std::size_t frame = 0;
  int prev_speaker = 0;
  TurnLabel truth = TurnLabel::hold;
  TurnLabel prediction = TurnLabel::hold;
  std::array<double, 2> p_now{};
};

/// confusion[truth][prediction], indexed by TurnLabel (shift = 0, hold = 1).
using Confusion = std::array<std::array<std::size_t, 2>, 2>;

/// Mean of the per-class recalls over the classes present in the truth;
/// 0 when there are no samples.
double balanced_accuracy(const Confusion& c);

struct ShiftHoldResult {
  Confusion confusion{};
  std::vector<ShiftHoldRecord> records;

  void add(const ShiftHoldRecord& r);
  std::size_t size() const { return records.size(); }
  double balanced_accuracy() const { return vap::balanced_accuracy(confusion); }
  double recall(TurnLabel truth) const;
};

struct TruncationAudit {
  std::size_t checked = 0;
  std::size_t prediction_mismatches = 0;
  double max_p_now_diff = 0.0;
  double tolerance = 1e-5;
  bool passed() const { return prediction_mismatches == 0 && max_p_now_diff <= tolerance; }
};

struct ShiftHoldOptions {
  ShiftHoldConfig events;
  /// Frames of context fed to the model for each decision (ending at it).
  int context_frames = 1000;
  /// Audit at most this many samples by re-running with `audit_extension`
  /// future frames appended; 0 disables the audit.
  std::size_t audit_samples = 0;
  std::size_t audit_extension = 50;
};

struct ShiftHoldEval {
  std::vector<ShiftHoldResult> per_language;  // indexed by language tag
  ShiftHoldResult overall;
  TruncationAudit audit;
};

/// For every extracted sample, runs the model causally on the frames ending at
/// the decision frame and predicts the next speaker from p_now there.
/// Samples whose decision frame lies beyond the stream are dropped with a
/// warning.
ShiftHoldEval eval_shift_hold(const VapNetwork<float>& net, std::span<const PreparedDialogue> dialogues,
                              int n_languages, const ShiftHoldOptions& opts = {}, Diagnostics* diag = nullptr);

/// p_now at `frame` from a causal forward over the `context` frames ending
/// there.
std::array<double, 2> p_now_at(const VapNetwork<float>& net, const PreparedDialogue& d, std::size_t frame,
                               int context);

// ---------------------------------------------------------------------------
// Language identification

struct LidClassStats {
  std::string name;
  std::size_t support = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct LidResult {
  std::vector<LidClassStats> classes;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
  double weighted_f1 = 0.0;
  std::size_t frames = 0;
};

/// Per-class precision/recall/F1 and the support-weighted mean F1.
LidResult score_lid(const std::vector<std::vector<std::size_t>>& confusion, const std::vector<std::string>& names);

/// Frame-level LID against each dialogue's tag. Throws ConfigError if the
/// network has no LID head.
LidResult eval_lid(const VapNetwork<float>& net, std::span<const PreparedDialogue> dialogues,
                   const std::vector<std::string>& languages, int window = 1000);

// ---------------------------------------------------------------------------
// Perturbed inputs

struct PerturbationRow {
  std::string corpus;
  std::size_t samples = 0;
  double original = 0.0;   // balanced accuracy
  double perturbed = 0.0;  // balanced accuracy
  double delta() const { return perturbed - original; }
};

struct PerturbationResult {
  std::vector<PerturbationRow> rows;  // per language with samples
  ShiftHoldEval original;
  ShiftHoldEval perturbed;
  std::vector<std::string> excluded;
};

/// Pairs each original dialogue with `perturbed_dir / filename(audio_path)`.
/// Dialogues without a perturbed file, or whose lengths differ by more than 2
/// frames, are excluded from both sides with a warning. Perturbed features are
/// padded or truncated to the original frame count; VAD and labels always come
/// from the original.
PerturbationResult eval_with_perturbation(const VapNetwork<float>& net, std::span<const PreparedDialogue> originals,
                                          const std::filesystem::path& perturbed_dir, const AudioEncoder& encoder,
                                          const std::vector<std::string>& languages,
                                          const ShiftHoldOptions& opts = {}, Diagnostics* diag = nullptr);

// ---------------------------------------------------------------------------
// Traces

struct FrameProjection {
  std::array<double, 2> p_now{};
  std::array<double, 2> p_future{};
};

std::vector<FrameProjection> projection_trace(const VapNetwork<float>& net, const PreparedDialogue& d,
                                              int window = 1000, const BinConfig& bins = {});

/// `frame TAB p_now0 TAB p_now1 TAB p_future0 TAB p_future1` per frame.
std::string format_trace(const std::vector<FrameProjection>& trace);

// ---------------------------------------------------------------------------
// Result tables

/// One row of a model-by-test-language table; absent cells print as "-".
struct TableRow {
  std::string label;
  std::vector<std::optional<double>> values;
};

/// `Training data TAB <lang>...` header, values with 3 decimals.
std::string format_loss_table(const std::vector<std::string>& languages, const std::vector<TableRow>& rows);
/// Same layout for balanced accuracies given in percent, 2 decimals.
std::string format_accuracy_table(const std::vector<std::string>& languages, const std::vector<TableRow>& rows);
/// `Test data TAB <column>...`, each cell `value (+delta)` in percent.
struct DeltaCell {
  double value = 0.0;
  double delta = 0.0;
};
std::string format_delta_table(const std::vector<std::string>& columns, const std::vector<std::string>& row_labels,
                               const std::vector<std::vector<DeltaCell>>& cells);
/// `Class TAB Support TAB Precision TAB Recall TAB F1` plus a weighted row.
std::string format_lid_table(const LidResult& r);

/// Published reference values, kept for documentation and for checking the
/// table layouts. They are not expected from the synthetic corpus.
namespace reference {
inline const std::vector<std::string> kLanguages{"ENG", "MAN", "JPN"};
inline const std::vector<TableRow> kTestLoss{
    {"English", {2.387, 3.401, 2.956}},
    {"Mandarin", {2.839, 2.817, 3.098}},
    {"Japanese", {3.306, 4.004, 2.329}},
    {"Multi (proposed)", {2.396, 2.832, 2.265}},
};
inline const std::vector<ShiftHoldStats> kShiftHoldCounts{
    {"English", 1253, 11432},
    {"Mandarin", 718, 1807},
    {"Japanese", 1029, 1371},
};
inline const std::vector<TableRow> kShiftHoldAccuracy{
    {"English", {79.59, 68.64, 59.43}},
    {"Mandarin", {65.31, 84.49, 59.72}},
    {"Japanese", {64.46, 67.89, 74.20}},
    {"Multi (proposed)", {77.16, 84.60, 76.54}},
};
inline const std::vector<std::string> kPitchColumns{"Mono", "Multi"};
inline const std::vector<std::string> kPitchRows{"English", "Mandarin", "Japanese"};
inline const std::vector<std::vector<DeltaCell>> kPitchFlattening{
    {{79.68, 0.09}, {76.28, 0.12}},
    {{82.47, -2.02}, {82.30, -2.30}},
    {{72.83, -1.37}, {74.73, -1.81}},
};
inline constexpr double kLidWeightedF1Percent = 99.99;
}  // namespace reference

}  // namespace vap
