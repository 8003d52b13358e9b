#include "vap/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace vap {
namespace {

int label_index(TurnLabel l) { return l == TurnLabel::shift ? 0 : 1; }

std::string language_name(const std::vector<std::string>& languages, int tag) {
  return tag >= 0 && static_cast<std::size_t>(tag) < languages.size() ? languages[tag] : "lang" + std::to_string(tag);
}

NetworkOutput<float> forward_range(const VapNetwork<float>& net, const PreparedDialogue& d, std::size_t begin,
                                   std::size_t end) {
  const auto b = static_cast<Eigen::Index>(begin), len = static_cast<Eigen::Index>(end - begin);
  return net.forward(MatrixF(d.features[0].middleRows(b, len)), MatrixF(d.features[1].middleRows(b, len)),
                     Mode::eval);
}

std::array<double, 2> p_now_of_row(const NetworkOutput<float>& out, Eigen::Index row) {
  const auto logits = out.vap_logits.row(row);
  const auto dist = VapDistribution::from_logits(std::span<const float>(logits.data(), logits.size()));
  return project_now_future(dist).p_now;
}

std::string format_value_table(const std::string& corner, const std::vector<std::string>& columns,
                               const std::vector<TableRow>& rows, const char* fmt) {
  std::string out = corner;
  for (const auto& c : columns) out += "\t" + c;
  out += "\n";
  char buf[64];
  for (const auto& r : rows) {
    out += r.label;
    for (const auto& v : r.values) {
      if (v) {
        std::snprintf(buf, sizeof buf, fmt, *v);
        out += std::string("\t") + buf;
      } else {
        out += "\t-";
      }
    }
    out += "\n";
  }
  return out;
}

}  // namespace

std::vector<CorpusLoss> eval_test_loss(const VapNetwork<float>& net, std::span<const PreparedDialogue> dialogues,
                                       const std::vector<std::string>& languages, int window) {
  std::vector<CorpusLoss> out;
  for (std::size_t lang = 0; lang < languages.size(); ++lang) {
    CorpusLoss row;
    row.corpus = languages[lang];
    row.language = static_cast<int>(lang);
    double vap = 0.0, vad = 0.0;
    for (const auto& d : dialogues) {
      if (d.manifest.language_tag != row.language) continue;
      ++row.dialogues;
      const auto result = sliding_forward(net, d, window);
      const LossBreakdown l = compute_losses<float>(result, d.labels, d.vad);
      vap += l.l_vap * static_cast<double>(l.labeled_frames);
      vad += l.l_vad * static_cast<double>(l.frames);
      row.loss.labeled_frames += l.labeled_frames;
      row.loss.frames += l.frames;
    }
    row.present = row.loss.labeled_frames > 0;
    if (row.present) {
      row.loss.l_vap = vap / static_cast<double>(row.loss.labeled_frames);
      row.loss.l_vad = vad / static_cast<double>(row.loss.frames);
      row.loss.total = row.loss.l_vap + row.loss.l_vad;
    }
    out.push_back(row);
  }
  for (const auto& d : dialogues) {
    if (d.manifest.language_tag < 0 || static_cast<std::size_t>(d.manifest.language_tag) >= languages.size()) {
      throw ValidationError(d.manifest.dialogue_id + ": language tag outside the declared languages");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

TurnLabel predict_turn(const std::array<double, 2>& p_now, int prev_speaker) {
  if (p_now[0] == p_now[1]) return TurnLabel::hold;
  const int next = p_now[1] > p_now[0] ? 1 : 0;
  return next == prev_speaker ? TurnLabel::hold : TurnLabel::shift;
}

double balanced_accuracy(const Confusion& c) {
  double sum = 0.0;
  int classes = 0;
  for (int t = 0; t < 2; ++t) {
    const std::size_t total = c[t][0] + c[t][1];
    if (total == 0) continue;
    sum += static_cast<double>(c[t][t]) / static_cast<double>(total);
    ++classes;
  }
  return classes ? sum / classes : 0.0;
}

void ShiftHoldResult::add(const ShiftHoldRecord& r) {
  ++confusion[label_index(r.truth)][label_index(r.prediction)];
  records.push_back(r);
}

double ShiftHoldResult::recall(TurnLabel truth) const {
  const auto& row = confusion[label_index(truth)];
  const std::size_t total = row[0] + row[1];
  return total ? static_cast<double>(row[label_index(truth)]) / static_cast<double>(total) : 0.0;
}

std::array<double, 2> p_now_at(const VapNetwork<float>& net, const PreparedDialogue& d, std::size_t frame,
                               int context) {
  if (frame >= d.n_frames()) throw DomainError("frame beyond the end of the dialogue");
  if (context < 1 || context > net.config().max_frames) throw ConfigError("context must be in [1, max_frames]");
  const auto ctx = static_cast<std::size_t>(context);
  const std::size_t begin = frame + 1 > ctx ? frame + 1 - ctx : 0;
  const auto out = forward_range(net, d, begin, frame + 1);
  return p_now_of_row(out, static_cast<Eigen::Index>(frame - begin));
}

ShiftHoldEval eval_shift_hold(const VapNetwork<float>& net, std::span<const PreparedDialogue> dialogues,
                              int n_languages, const ShiftHoldOptions& opts, Diagnostics* diag) {
  ShiftHoldEval result;
  result.per_language.resize(static_cast<std::size_t>(std::max(0, n_languages)));
  const int context = opts.context_frames;
  for (const auto& d : dialogues) {
    const int lang = d.manifest.language_tag;
    if (lang < 0 || lang >= n_languages) {
      throw ValidationError(d.manifest.dialogue_id + ": language tag outside the declared languages");
    }
    for (const auto& s : extract_shift_hold(d.vad, opts.events)) {
      if (s.decision_frame >= d.n_frames()) {
        warn(diag, d.manifest.dialogue_id,
             "shift/hold sample at frame " + std::to_string(s.decision_frame) + " lies beyond the stream; dropped");
        continue;
      }
      ShiftHoldRecord r;
      r.dialogue_id = d.manifest.dialogue_id;
      r.language = lang;
      r.frame = s.decision_frame;
      r.prev_speaker = s.silence.prev_speaker;
      r.truth = s.label;
      r.p_now = p_now_at(net, d, s.decision_frame, context);
      r.prediction = predict_turn(r.p_now, r.prev_speaker);
      result.per_language[static_cast<std::size_t>(lang)].add(r);
      result.overall.add(r);

      const std::size_t ext = opts.audit_extension;
      if (result.audit.checked < opts.audit_samples && ext > 0 && s.decision_frame + ext < d.n_frames()) {
        // Same start for both runs; one stops at the decision frame, the
        // other continues `ext` frames past it.
        const std::size_t end_long = s.decision_frame + 1 + ext;
        const auto ctx = static_cast<std::size_t>(context);
        const std::size_t begin = end_long > ctx ? end_long - ctx : 0;
        const auto row = static_cast<Eigen::Index>(s.decision_frame - begin);
        const auto p_long = p_now_of_row(forward_range(net, d, begin, end_long), row);
        const auto p_short = p_now_of_row(forward_range(net, d, begin, s.decision_frame + 1), row);
        ++result.audit.checked;
        if (predict_turn(p_long, r.prev_speaker) != predict_turn(p_short, r.prev_speaker)) {
          ++result.audit.prediction_mismatches;
        }
        for (int k = 0; k < 2; ++k) {
          result.audit.max_p_now_diff = std::max(result.audit.max_p_now_diff, std::abs(p_long[k] - p_short[k]));
        }
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

LidResult score_lid(const std::vector<std::vector<std::size_t>>& confusion, const std::vector<std::string>& names) {
  const std::size_t L = confusion.size();
  for (const auto& row : confusion) {
    if (row.size() != L) throw DimensionError("LID confusion matrix must be square");
  }
  LidResult r;
  r.confusion = confusion;
  double weighted = 0.0;
  for (std::size_t c = 0; c < L; ++c) {
    LidClassStats s;
    s.name = c < names.size() ? names[c] : "lang" + std::to_string(c);
    std::size_t predicted = 0;
    for (std::size_t t = 0; t < L; ++t) predicted += confusion[t][c];
    for (std::size_t p = 0; p < L; ++p) s.support += confusion[c][p];
    const auto tp = static_cast<double>(confusion[c][c]);
    s.precision = predicted ? tp / static_cast<double>(predicted) : 0.0;
    s.recall = s.support ? tp / static_cast<double>(s.support) : 0.0;
    s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    weighted += s.f1 * static_cast<double>(s.support);
    r.frames += s.support;
    r.classes.push_back(s);
  }
  r.weighted_f1 = r.frames ? weighted / static_cast<double>(r.frames) : 0.0;
  return r;
}

LidResult eval_lid(const VapNetwork<float>& net, std::span<const PreparedDialogue> dialogues,
                   const std::vector<std::string>& languages, int window) {
  const int L = net.config().lid_classes;
  if (L <= 0) throw ConfigError("the model has no language-identification head");
  std::vector<std::vector<std::size_t>> confusion(L, std::vector<std::size_t>(L, 0));
  for (const auto& d : dialogues) {
    const int truth = d.manifest.language_tag;
    if (truth < 0 || truth >= L) throw ValidationError(d.manifest.dialogue_id + ": language tag outside the LID classes");
    const auto out = sliding_forward(net, d, window);
    for (Eigen::Index t = 0; t < out.lid_logits.rows(); ++t) {
      Eigen::Index pred = 0;
      out.lid_logits.row(t).maxCoeff(&pred);
      ++confusion[truth][pred];
    }
  }
  return score_lid(confusion, languages);
}

// ---------------------------------------------------------------------------

PerturbationResult eval_with_perturbation(const VapNetwork<float>& net, std::span<const PreparedDialogue> originals,
                                          const std::filesystem::path& perturbed_dir, const AudioEncoder& encoder,
                                          const std::vector<std::string>& languages, const ShiftHoldOptions& opts,
                                          Diagnostics* diag) {
  const FrameGrid grid;
  std::vector<PreparedDialogue> kept, perturbed;
  PerturbationResult result;
  for (const auto& d : originals) {
    const auto path = perturbed_dir / std::filesystem::path(d.manifest.audio_path).filename();
    if (!std::filesystem::exists(path)) {
      warn(diag, d.manifest.dialogue_id, "no perturbed audio at " + path.string() + "; excluded from both sides");
      result.excluded.push_back(d.manifest.dialogue_id);
      continue;
    }
    const Waveform wave = load_stereo_audio(path, grid);
    const std::size_t frames = wave.n_samples() / static_cast<std::size_t>(grid.samples_per_frame());
    const auto diff = static_cast<long long>(frames) - static_cast<long long>(d.n_frames());
    if (diff > 2 || diff < -2) {
      warn(diag, d.manifest.dialogue_id,
           "perturbed audio has " + std::to_string(frames) + " frames, original " + std::to_string(d.n_frames()) +
               "; excluded from both sides");
      result.excluded.push_back(d.manifest.dialogue_id);
      continue;
    }
    PreparedDialogue p = d;
    for (int c = 0; c < kNumSpeakers; ++c) {
      const MatrixF f = encoder.encode(wave.channel(c), d.manifest.dialogue_id, c).frames;
      MatrixF aligned(static_cast<Eigen::Index>(d.n_frames()), f.cols());
      const Eigen::Index keep = std::min(f.rows(), aligned.rows());
      aligned.topRows(keep) = f.topRows(keep);
      for (Eigen::Index r = keep; r < aligned.rows(); ++r) aligned.row(r) = f.row(keep - 1);
      p.features[c] = std::move(aligned);
    }
    kept.push_back(d);
    perturbed.push_back(std::move(p));
  }
  const int L = static_cast<int>(languages.size());
  ShiftHoldOptions no_audit = opts;
  no_audit.audit_samples = 0;
  result.original = eval_shift_hold(net, kept, L, no_audit, diag);
  result.perturbed = eval_shift_hold(net, perturbed, L, no_audit, nullptr);
  for (int lang = 0; lang < L; ++lang) {
    const auto& o = result.original.per_language[lang];
    if (o.size() == 0) continue;
    PerturbationRow row;
    row.corpus = language_name(languages, lang);
    row.samples = o.size();
    row.original = o.balanced_accuracy();
    row.perturbed = result.perturbed.per_language[lang].balanced_accuracy();
    result.rows.push_back(row);
  }
  return result;
}

// ---------------------------------------------------------------------------

std::vector<FrameProjection> projection_trace(const VapNetwork<float>& net, const PreparedDialogue& d, int window,
                                              const BinConfig& bins) {
  const auto out = sliding_forward(net, d, window);
  std::vector<FrameProjection> trace;
  trace.reserve(out.n_frames());
  for (Eigen::Index t = 0; t < out.vap_logits.rows(); ++t) {
    const auto logits = out.vap_logits.row(t);
    const auto summary =
        project_now_future(VapDistribution::from_logits(std::span<const float>(logits.data(), logits.size())), bins);
    trace.push_back({summary.p_now, summary.p_future});
  }
  return trace;
}

std::string format_trace(const std::vector<FrameProjection>& trace) {
  std::string out;
  char buf[128];
  for (std::size_t t = 0; t < trace.size(); ++t) {
    const auto& f = trace[t];
    std::snprintf(buf, sizeof buf, "%zu\t%.6f\t%.6f\t%.6f\t%.6f\n", t, f.p_now[0], f.p_now[1], f.p_future[0],
                  f.p_future[1]);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string format_loss_table(const std::vector<std::string>& languages, const std::vector<TableRow>& rows) {
  return format_value_table("Training data", languages, rows, "%.3f");
}

std::string format_accuracy_table(const std::vector<std::string>& languages, const std::vector<TableRow>& rows) {
  return format_value_table("Training data", languages, rows, "%.2f");
}

std::string format_delta_table(const std::vector<std::string>& columns, const std::vector<std::string>& row_labels,
                               const std::vector<std::vector<DeltaCell>>& cells) {
  if (cells.size() != row_labels.size()) throw DimensionError("delta table: row count mismatch");
  std::string out = "Test data";
  for (const auto& c : columns) out += "\t" + c;
  out += "\n";
  char buf[64];
  for (std::size_t r = 0; r < cells.size(); ++r) {
    if (cells[r].size() != columns.size()) throw DimensionError("delta table: column count mismatch");
    out += row_labels[r];
    for (const auto& cell : cells[r]) {
      std::snprintf(buf, sizeof buf, "\t%.2f (%+.2f)", cell.value, cell.delta);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

std::string format_lid_table(const LidResult& r) {
  std::string out = "Class\tSupport\tPrecision\tRecall\tF1\n";
  char buf[160];
  for (const auto& c : r.classes) {
    std::snprintf(buf, sizeof buf, "%s\t%zu\t%.4f\t%.4f\t%.4f\n", c.name.c_str(), c.support, c.precision, c.recall,
                  c.f1);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "weighted\t%zu\t-\t-\t%.4f\n", r.frames, r.weighted_f1);
  out += buf;
  return out;
}

}  // namespace vap
