#include "vap/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "vap/eval.hpp"
#include "vap/kv.hpp"
#include "vap/selftest.hpp"
#include "vap/synthgen.hpp"
#include "vap/train.hpp"

namespace vap::cli {
namespace {

namespace fs = std::filesystem;

constexpr const char* kVersion = "1.0.0";

struct Common {
  std::string out;
  std::string config;
  std::uint64_t seed = 0;
  int jobs = 1;
  bool deterministic = false;

  int effective_jobs() const { return deterministic ? 1 : jobs; }
};

void add_common(CLI::App* sub, Common& c, bool needs_out = true) {
  sub->add_option("--config", c.config, "key=value file; command-line flags take precedence");
  if (needs_out) sub->add_option("--out", c.out, "Output directory");
  sub->add_option("--seed", c.seed, "Random seed");
  sub->add_option("--jobs", c.jobs, "Dialogue-level parallelism")->check(CLI::PositiveNumber);
  sub->add_flag("--deterministic", c.deterministic, "Force --jobs 1");
}

std::string option_key(const CLI::Option* opt) {
  const auto& names = opt->get_lnames();
  return names.empty() ? std::string() : names.front();
}

/// Fills options not given on the command line from the config file.
void apply_config(CLI::App* sub, const Common& c) {
  if (c.config.empty()) return;
  const auto kv = read_key_values(c.config);
  for (const auto& [key, value] : kv) {
    CLI::Option* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config" || key == "help") {
      throw ConfigError("unknown key '" + key + "' in config file " + c.config);
    }
    if (opt->count() > 0) continue;
    std::stringstream parts(value);
    std::string part;
    if (opt->get_expected_max() > 1) {
      while (std::getline(parts, part, ',')) opt->add_result(part);
    } else {
      opt->add_result(value);
    }
    try {
      opt->run_callback();
    } catch (const CLI::Error& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

void require(CLI::App* sub, std::initializer_list<const char*> names) {
  for (const char* n : names) {
    if (sub->get_option(n)->count() == 0) throw ConfigError(std::string("missing required option ") + n);
  }
}

fs::path prepare_out(const Common& c) {
  if (c.out.empty()) throw ConfigError("missing required option --out");
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec) throw IoError("cannot create output directory " + c.out + ": " + ec.message());
  return c.out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

/// Effective option values of the subcommand, one `key=value` per line.
void write_config_echo(const fs::path& out, const CLI::App* sub) {
  std::ostringstream os;
  os << "subcommand=" << sub->get_name() << "\n";
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string key = option_key(opt);
    if (key.empty() || key == "help") continue;
    std::string value;
    if (opt->get_expected_min() == 0) {
      value = opt->count() > 0 && opt->as<bool>() ? "true" : "false";
    } else if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
      if (value == "{}") value.clear();
    }
    os << key << "=" << value << "\n";
  }
  write_text(out / "run_config_echo", os.str());
}

void flush_warnings(const Diagnostics& diag) {
  for (const auto& w : diag.warnings()) std::cerr << "warning: " << w.context << ": " << w.message << "\n";
}

std::vector<DialogueManifest> read_manifests(const std::vector<std::string>& paths) {
  std::vector<DialogueManifest> rows;
  for (const auto& p : paths) {
    auto r = read_manifest(p);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (rows.empty()) throw ConfigError("manifest lists no dialogues");
  return rows;
}

std::vector<std::string> corpus_languages(const std::vector<DialogueManifest>& rows) {
  std::vector<std::string> languages;
  load_vad_stream(rows.front().vad_path, &languages);
  int max_tag = 0;
  for (const auto& r : rows) max_tag = std::max(max_tag, r.language_tag);
  if (languages.empty()) {
    for (int i = 0; i <= max_tag; ++i) languages.push_back("lang" + std::to_string(i));
  }
  if (max_tag >= static_cast<int>(languages.size())) {
    throw ValidationError("language tag " + std::to_string(max_tag) + " has no name in " + rows.front().vad_path);
  }
  return languages;
}

std::vector<std::string> labels_for(const std::vector<std::string>& checkpoints, const std::vector<std::string>& labels) {
  if (!labels.empty() && labels.size() != checkpoints.size()) {
    throw ConfigError("--label must be given once per --checkpoint");
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    out.push_back(labels.empty() ? fs::path(checkpoints[i]).stem().string() : labels[i]);
  }
  return out;
}

/// Test dialogues encoded once per distinct encoder selector.
class PreparedCache {
 public:
  PreparedCache(std::vector<DialogueManifest> rows, Diagnostics* diag, int jobs)
      : rows_(std::move(rows)), diag_(diag), jobs_(jobs) {}

  const std::vector<PreparedDialogue>& get(const std::string& encoder) {
    auto it = cache_.find(encoder);
    if (it == cache_.end()) {
      const auto enc = make_encoder(encoder);
      std::cerr << "encoding " << rows_.size() << " dialogues with " << enc->describe() << "\n";
      it = cache_.emplace(encoder, prepare_corpus(rows_, *enc, diag_, jobs_)).first;
    }
    return it->second;
  }

 private:
  std::vector<DialogueManifest> rows_;
  Diagnostics* diag_;
  int jobs_;
  std::map<std::string, std::vector<PreparedDialogue>> cache_;
};

ShiftHoldConfig events_config(double min_silence, double min_utterance, double offset) {
  ShiftHoldConfig cfg;
  cfg.min_silence_sec = min_silence;
  cfg.min_utterance_sec = min_utterance;
  cfg.decision_offset_sec = offset;
  if (!(min_silence > 0.0) || !(min_utterance > 0.0) || offset < 0.0) {
    throw ConfigError("event thresholds must be positive and the decision offset nonnegative");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Subcommands

struct AnalyzeArgs {
  Common common;
  std::vector<std::string> manifests;
  std::vector<std::string> names;
  double bin_width = 0.05;
  double min_silence = 0.25, min_utterance = 1.0, decision_offset = 0.05;
};

int cmd_analyze(const AnalyzeArgs& a, const CLI::App* sub) {
  if (!a.names.empty() && a.names.size() != a.manifests.size()) {
    throw ConfigError("--name must be given once per --manifest");
  }
  if (!(a.bin_width > 0.0)) throw ConfigError("--bin-width must be positive");
  const auto cfg = events_config(a.min_silence, a.min_utterance, a.decision_offset);
  const fs::path out = prepare_out(a.common);
  write_config_echo(out, sub);

  std::vector<ShiftHoldStats> stats;
  for (std::size_t m = 0; m < a.manifests.size(); ++m) {
    const std::string name = a.names.empty() ? fs::path(a.manifests[m]).stem().string() : a.names[m];
    const auto rows = read_manifests({a.manifests[m]});
    std::string events_text, samples_text = "dialogue_id\tdecision_frame\tlabel\tprev\tnext\n";
    std::vector<SilenceEvent> all_events;
    std::vector<ShiftHoldSample> all_samples;
    for (const auto& row : rows) {
      const VadStream vad = load_vad_stream(row.vad_path);
      auto events = extract_silences(vad);
      auto samples = extract_shift_hold(vad, cfg);
      events_text += format_events(row.dialogue_id, events);
      for (const auto& s : samples) {
        samples_text += row.dialogue_id + "\t" + std::to_string(s.decision_frame) + "\t" + to_string(s.label) + "\t" +
                        std::to_string(s.silence.prev_speaker) + "\t" + std::to_string(s.silence.next_speaker) + "\n";
      }
      all_events.insert(all_events.end(), events.begin(), events.end());
      all_samples.insert(all_samples.end(), samples.begin(), samples.end());
    }
    const fs::path dir = out / name;
    fs::create_directories(dir);
    write_text(dir / "events.tsv", events_text);
    write_text(dir / "shift_hold_samples.tsv", samples_text);
    write_text(dir / "gap_histogram.tsv",
               format_histogram(duration_histogram(all_events, SilenceKind::gap, a.bin_width), a.bin_width));
    write_text(dir / "pause_histogram.tsv",
               format_histogram(duration_histogram(all_events, SilenceKind::pause, a.bin_width), a.bin_width));
    stats.push_back(count_shift_hold(name, all_samples));
  }
  const std::string table = format_shift_hold_table(stats);
  write_text(out / "shift_hold_stats.tsv", table);
  std::cout << table;
  return kExitOk;
}

struct SynthArgs {
  Common common;
  int langs = 3;
  std::vector<std::string> spec_files;
  std::size_t per_lang = 30;
  double duration = 120.0;
  bool no_flat = false;
};

int cmd_synth(const SynthArgs& a, const CLI::App* sub) {
  std::vector<PseudoLanguageSpec> specs;
  if (!a.spec_files.empty()) {
    for (const auto& f : a.spec_files) specs.push_back(read_spec_file(f));
  } else {
    auto defaults = default_specs();
    if (a.langs < 1 || a.langs > static_cast<int>(defaults.size())) {
      throw ConfigError("--langs must be between 1 and " + std::to_string(defaults.size()) +
                        " (use --spec for more)");
    }
    specs.assign(defaults.begin(), defaults.begin() + a.langs);
  }
  const fs::path out = prepare_out(a.common);
  write_config_echo(out, sub);
  CorpusOptions opts;
  opts.dialogues_per_language = a.per_lang;
  opts.duration_sec = a.duration;
  opts.seed = a.common.seed;
  opts.flattened_test_audio = !a.no_flat;
  opts.jobs = a.common.effective_jobs();
  Diagnostics diag;
  const auto split = generate_corpus(specs, opts, out, &diag);
  flush_warnings(diag);
  std::cout << "generated " << split.total() << " dialogues (" << split.train.size() << " train, "
            << split.val.size() << " val, " << split.test.size() << " test) in " << out.string() << "\n";
  return kExitOk;
}

struct TrainArgs {
  Common common;
  std::vector<std::string> train, val;
  std::string encoder = "baseline";
  ModelConfig model;
  TrainConfig train_cfg;
  int lid_classes = -1;
  std::string positional = "learned";
  std::int64_t init_seed = -1;
};

int cmd_train(TrainArgs a, const CLI::App* sub) {
  a.model.positional = positional_from_string(a.positional);
  a.train_cfg.seed = a.common.seed;
  a.model.init_seed = a.init_seed >= 0 ? static_cast<std::uint64_t>(a.init_seed) : a.common.seed;
  const auto train_rows = read_manifests(a.train);
  const auto val_rows = read_manifests(a.val);
  const auto languages = corpus_languages(train_rows);
  a.model.lid_classes = a.lid_classes >= 0 ? a.lid_classes : (languages.size() > 1 ? static_cast<int>(languages.size()) : 0);
  a.model.validate();
  a.train_cfg.validate();
  const auto encoder = make_encoder(a.encoder, a.common.seed);
  if (encoder->contract().output_dim != a.model.input_dim) {
    throw ConfigError("encoder output dimension does not match --input-dim");
  }

  const fs::path out = prepare_out(a.common);
  write_config_echo(out, sub);
  Diagnostics diag;
  std::cerr << "encoding " << train_rows.size() + val_rows.size() << " dialogues with " << encoder->describe() << "\n";
  const int jobs = a.common.effective_jobs();
  auto train_set = prepare_corpus(train_rows, *encoder, &diag, jobs);
  const auto val_set = prepare_corpus(val_rows, *encoder, &diag, jobs);
  if (a.train_cfg.max_sec_per_language > 0.0) {
    // Durations are known only once the audio is loaded.
    std::vector<DialogueManifest> loaded;
    for (const auto& d : train_set) loaded.push_back(d.manifest);
    std::set<std::string> keep;
    for (const auto& m : cap_duration_per_language(loaded, a.train_cfg.max_sec_per_language, &diag)) {
      keep.insert(m.dialogue_id);
    }
    std::erase_if(train_set, [&](const PreparedDialogue& d) { return !keep.count(d.manifest.dialogue_id); });
  }

  const auto result = run_training(train_set, val_set, a.model, a.train_cfg, a.encoder, languages,
                                   [](const EpochLoss& e) {
                                     std::fprintf(stderr, "epoch %d %s l_vap %.4f l_vad %.4f\n", e.epoch,
                                                  e.split.c_str(), e.loss.l_vap, e.loss.l_vad);
                                   });
  save_checkpoint(out / "model.ckpt", result.best);
  write_config_sidecar(out / "model.cfg", result.best);
  write_text(out / "loss_curves.tsv", format_loss_curves(result.curves));
  flush_warnings(diag);
  std::printf("best epoch %d, validation l_vap %.4f, %zu windows per epoch\n", result.best.epoch,
              result.best.val_loss, result.windows_per_epoch);
  return kExitOk;
}

struct EvalArgs {
  Common common;
  std::vector<std::string> checkpoints;
  std::vector<std::string> labels;
  std::vector<std::string> test;
  int window = 1000;
  int context = 1000;
  std::size_t audit = 0;
  double min_silence = 0.25, min_utterance = 1.0, decision_offset = 0.05;
  std::string perturbed_dir;
  std::vector<std::string> dialogues;
};

struct EvalInputs {
  std::vector<Checkpoint> checkpoints;
  std::vector<std::string> labels;
  std::vector<std::string> languages;
  std::unique_ptr<PreparedCache> cache;
};

EvalInputs load_eval_inputs(const EvalArgs& a, Diagnostics* diag) {
  EvalInputs in;
  for (const auto& c : a.checkpoints) in.checkpoints.push_back(load_checkpoint(c));
  in.labels = labels_for(a.checkpoints, a.labels);
  auto rows = read_manifests(a.test);
  in.languages = corpus_languages(rows);
  in.cache = std::make_unique<PreparedCache>(std::move(rows), diag, a.common.effective_jobs());
  return in;
}

int cmd_eval_loss(const EvalArgs& a, const CLI::App* sub) {
  Diagnostics diag;
  auto in = load_eval_inputs(a, &diag);
  const fs::path out = prepare_out(a.common);
  write_config_echo(out, sub);
  std::vector<TableRow> rows;
  for (std::size_t i = 0; i < in.checkpoints.size(); ++i) {
    const auto net = in.checkpoints[i].to_network();
    const auto losses = eval_test_loss(net, in.cache->get(in.checkpoints[i].encoder), in.languages, a.window);
    TableRow row{in.labels[i], {}};
    for (const auto& l : losses) row.values.push_back(l.present ? std::optional<double>(l.loss.l_vap) : std::nullopt);
    rows.push_back(row);
  }
  const std::string table = format_loss_table(in.languages, rows);
  write_text(out / "test_loss.tsv", table);
  flush_warnings(diag);
  std::cout << table;
  return kExitOk;
}

std::string format_records(const ShiftHoldResult& r, const std::vector<std::string>& languages) {
  std::string s = "dialogue_id\tlanguage\tframe\tprev\ttruth\tprediction\tp_now0\tp_now1\n";
  char buf[256];
  for (const auto& x : r.records) {
    std::snprintf(buf, sizeof buf, "%s\t%s\t%zu\t%d\t%s\t%s\t%.6f\t%.6f\n", x.dialogue_id.c_str(),
                  languages.at(static_cast<std::size_t>(x.language)).c_str(), x.frame, x.prev_speaker,
                  to_string(x.truth), to_string(x.prediction), x.p_now[0], x.p_now[1]);
    s += buf;
  }
  return s;
}

int cmd_eval_shift_hold(const EvalArgs& a, const CLI::App* sub) {
  Diagnostics diag;
  auto in = load_eval_inputs(a, &diag);
  const fs::path out = prepare_out(a.common);
  write_config_echo(out, sub);
  ShiftHoldOptions opts;
  opts.events = events_config(a.min_silence, a.min_utterance, a.decision_offset);
  opts.context_frames = a.context;
  opts.audit_samples = a.audit;
  std::vector<TableRow> rows;
  bool audit_ok = true;
  for (std::size_t i = 0; i < in.checkpoints.size(); ++i) {
    const auto net = in.checkpoints[i].to_network();
    const auto r = eval_shift_hold(net, in.cache->get(in.checkpoints[i].encoder),
                                   static_cast<int>(in.languages.size()), opts, &diag);
    TableRow row{in.labels[i], {}};
    for (std::size_t l = 0; l < in.languages.size(); ++l) {
      const auto& pl = r.per_language[l];
      row.values.push_back(pl.size() ? std::optional<double>(100.0 * pl.balanced_accuracy()) : std::nullopt);
      std::printf("%s\t%s\tbalanced_accuracy %.4f\t(%zu samples)\n", in.labels[i].c_str(), in.languages[l].c_str(),
                  pl.balanced_accuracy(), pl.size());
    }
    rows.push_back(row);
    write_text(out / (in.labels[i] + ".records.tsv"), format_records(r.overall, in.languages));
    if (a.audit > 0) {
      std::printf("%s\ttruncation audit %s (%zu checked, max p_now diff %.3g)\n", in.labels[i].c_str(),
                  r.audit.passed() ? "passed" : "FAILED", r.audit.checked, r.audit.max_p_now_diff);
      audit_ok = audit_ok && r.audit.passed();
    }
  }
  write_text(out / "shift_hold_accuracy.tsv", format_accuracy_table(in.languages, rows));
  flush_warnings(diag);
  return audit_ok ? kExitOk : kExitRuntime;
}

int cmd_eval_lid(const EvalArgs& a, const CLI::App* sub) {
  Diagnostics diag;
  auto in = load_eval_inputs(a, &diag);
  if (in.checkpoints.size() != 1) throw ConfigError("eval-lid takes exactly one --checkpoint");
  const fs::path out = prepare_out(a.common);
  write_config_echo(out, sub);
  const auto net = in.checkpoints[0].to_network();
  const auto r = eval_lid(net, in.cache->get(in.checkpoints[0].encoder), in.languages, a.window);
  const std::string table = format_lid_table(r);
  write_text(out / "lid.tsv", table);
  flush_warnings(diag);
  std::cout << table;
  return kExitOk;
}

int cmd_eval_perturbed(const EvalArgs& a, const CLI::App* sub) {
  Diagnostics diag;
  auto in = load_eval_inputs(a, &diag);
  const fs::path out = prepare_out(a.common);
  write_config_echo(out, sub);
  ShiftHoldOptions opts;
  opts.events = events_config(a.min_silence, a.min_utterance, a.decision_offset);
  opts.context_frames = a.context;
  std::vector<std::vector<DeltaCell>> cells(in.languages.size(), std::vector<DeltaCell>(in.checkpoints.size()));
  std::vector<bool> seen(in.languages.size(), false);
  for (std::size_t i = 0; i < in.checkpoints.size(); ++i) {
    const auto net = in.checkpoints[i].to_network();
    const auto enc = make_encoder(in.checkpoints[i].encoder);
    const auto r = eval_with_perturbation(net, in.cache->get(in.checkpoints[i].encoder), a.perturbed_dir, *enc,
                                          in.languages, opts, &diag);
    for (const auto& row : r.rows) {
      const auto l = static_cast<std::size_t>(
          std::find(in.languages.begin(), in.languages.end(), row.corpus) - in.languages.begin());
      if (l >= in.languages.size()) continue;
      cells[l][i] = {100.0 * row.perturbed, 100.0 * row.delta()};
      seen[l] = true;
      std::printf("%s\t%s\toriginal %.4f\tperturbed %.4f\tdelta %+.4f\t(%zu samples)\n", in.labels[i].c_str(),
                  row.corpus.c_str(), row.original, row.perturbed, row.delta(), row.samples);
    }
  }
  std::vector<std::string> row_labels;
  std::vector<std::vector<DeltaCell>> kept;
  for (std::size_t l = 0; l < in.languages.size(); ++l) {
    if (!seen[l]) continue;
    row_labels.push_back(in.languages[l]);
    kept.push_back(cells[l]);
  }
  write_text(out / "perturbation.tsv", format_delta_table(in.labels, row_labels, kept));
  flush_warnings(diag);
  return kExitOk;
}

int cmd_infer_trace(const EvalArgs& a, const CLI::App* sub) {
  Diagnostics diag;
  auto in = load_eval_inputs(a, &diag);
  if (in.checkpoints.size() != 1) throw ConfigError("infer-trace takes exactly one --checkpoint");
  const fs::path out = prepare_out(a.common);
  write_config_echo(out, sub);
  const std::set<std::string> wanted(a.dialogues.begin(), a.dialogues.end());
  const auto net = in.checkpoints[0].to_network();
  std::size_t written = 0;
  for (const auto& d : in.cache->get(in.checkpoints[0].encoder)) {
    if (!wanted.empty() && !wanted.count(d.manifest.dialogue_id)) continue;
    write_text(out / (d.manifest.dialogue_id + ".trace.tsv"), format_trace(projection_trace(net, d, a.window)));
    ++written;
  }
  if (!wanted.empty() && written != wanted.size()) {
    throw ValidationError("some requested dialogues are not in the manifest");
  }
  flush_warnings(diag);
  std::printf("wrote %zu traces to %s\n", written, out.string().c_str());
  return kExitOk;
}

int cmd_selftest() {
  bool ok = true;
  for (const auto& c : run_selftest()) {
    std::printf("%s %s%s%s\n", c.passed ? "ok  " : "FAIL", c.name.c_str(), c.detail.empty() ? "" : ": ",
                c.detail.c_str());
    ok = ok && c.passed;
  }
  return ok ? kExitOk : kExitRuntime;
}

std::string version_text() {
  return std::string("vap ") + kVersion + "\nfeature-file " + std::to_string(kFeatureFileVersion) + "\ncheckpoint " +
         std::to_string(kCheckpointVersion) + "\nlabel-dump " + std::to_string(kLabelDumpVersion);
}

void add_event_options(CLI::App* sub, double& min_silence, double& min_utterance, double& offset) {
  sub->add_option("--min-silence", min_silence, "Minimum mutual silence (s)");
  sub->add_option("--min-utterance", min_utterance, "Minimum flanking utterance (s)");
  sub->add_option("--decision-offset", offset, "Decision point after silence onset (s)");
}

void add_eval_options(CLI::App* sub, EvalArgs& a) {
  add_common(sub, a.common);
  sub->add_option("--checkpoint", a.checkpoints, "Model checkpoint (repeatable)");
  sub->add_option("--label", a.labels, "Row label per checkpoint");
  sub->add_option("--test", a.test, "Test manifest (repeatable)");
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Voice activity projection toolkit", "vap"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", version_text);

  AnalyzeArgs analyze;
  auto* s_analyze = app.add_subcommand("analyze", "Silence histograms and shift/hold statistics");
  add_common(s_analyze, analyze.common);
  s_analyze->add_option("--manifest", analyze.manifests, "Corpus manifest (repeatable)");
  s_analyze->add_option("--name", analyze.names, "Dataset name per manifest");
  s_analyze->add_option("--bin-width", analyze.bin_width, "Histogram bin width (s)");
  add_event_options(s_analyze, analyze.min_silence, analyze.min_utterance, analyze.decision_offset);

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth", "Generate a synthetic multilingual corpus");
  add_common(s_synth, synth.common);
  s_synth->add_option("--langs", synth.langs, "Number of built-in pseudo-languages");
  s_synth->add_option("--spec", synth.spec_files, "Pseudo-language spec file (repeatable)");
  s_synth->add_option("--per-lang", synth.per_lang, "Dialogues per language");
  s_synth->add_option("--duration", synth.duration, "Dialogue duration (s)");
  s_synth->add_flag("--no-flat", synth.no_flat, "Skip pitch-flattened test audio");

  TrainArgs train;
  auto* s_train = app.add_subcommand("train", "Train a model");
  add_common(s_train, train.common);
  s_train->add_option("--train", train.train, "Training manifest (repeatable)");
  s_train->add_option("--val", train.val, "Validation manifest (repeatable)");
  s_train->add_option("--encoder", train.encoder, "baseline[:seed] or file:<template with {id} and {ch}>");
  s_train->add_option("--input-dim", train.model.input_dim);
  s_train->add_option("--d-model", train.model.d_model);
  s_train->add_option("--self-layers", train.model.self_layers);
  s_train->add_option("--cross-layers", train.model.cross_layers);
  s_train->add_option("--heads", train.model.heads);
  s_train->add_option("--dropout", train.model.dropout);
  s_train->add_option("--max-frames", train.model.max_frames);
  s_train->add_option("--lid-classes", train.lid_classes, "LID head size; -1 = number of corpus languages if > 1");
  s_train->add_flag("--tied", train.model.tied_channels, "Share parameters between channels");
  s_train->add_option("--positional", train.positional, "learned or alibi");
  s_train->add_option("--init-std", train.model.init_std);
  s_train->add_option("--init-seed", train.init_seed, "-1 = --seed");
  s_train->add_option("--epochs", train.train_cfg.epochs);
  s_train->add_option("--batch-size", train.train_cfg.batch_size);
  s_train->add_option("--lr", train.train_cfg.learning_rate);
  s_train->add_option("--weight-decay", train.train_cfg.weight_decay);
  s_train->add_option("--grad-clip", train.train_cfg.grad_clip);
  s_train->add_option("--window-sec", train.train_cfg.window_sec);
  s_train->add_option("--window-hop-sec", train.train_cfg.window_hop_sec);
  s_train->add_option("--max-sec-per-language", train.train_cfg.max_sec_per_language);

  EvalArgs loss;
  auto* s_loss = app.add_subcommand("eval-loss", "Test l_vap per language");
  add_eval_options(s_loss, loss);
  s_loss->add_option("--window", loss.window, "Inference window (frames)");

  EvalArgs sh;
  auto* s_sh = app.add_subcommand("eval-shift-hold", "Shift/hold balanced accuracy per language");
  add_eval_options(s_sh, sh);
  s_sh->add_option("--context", sh.context, "Frames of context per decision");
  s_sh->add_option("--audit", sh.audit, "Samples to re-run with appended future frames");
  add_event_options(s_sh, sh.min_silence, sh.min_utterance, sh.decision_offset);

  EvalArgs lid;
  auto* s_lid = app.add_subcommand("eval-lid", "Frame-level language identification");
  add_eval_options(s_lid, lid);
  s_lid->add_option("--window", lid.window, "Inference window (frames)");

  EvalArgs pert;
  auto* s_pert = app.add_subcommand("eval-perturbed", "Shift/hold accuracy on perturbed audio");
  add_eval_options(s_pert, pert);
  s_pert->add_option("--perturbed-dir", pert.perturbed_dir, "Directory of perturbed audio with original file names");
  s_pert->add_option("--context", pert.context, "Frames of context per decision");
  add_event_options(s_pert, pert.min_silence, pert.min_utterance, pert.decision_offset);

  EvalArgs trace;
  auto* s_trace = app.add_subcommand("infer-trace", "Per-frame p_now/p_future export");
  add_common(s_trace, trace.common);
  s_trace->add_option("--checkpoint", trace.checkpoints, "Model checkpoint");
  s_trace->add_option("--manifest", trace.test, "Manifest (repeatable)");
  s_trace->add_option("--dialogue", trace.dialogues, "Dialogue id (repeatable; default all)");
  s_trace->add_option("--window", trace.window, "Inference window (frames)");

  app.add_subcommand("selftest", "Run the invariant checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInvalid;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    if (name == "selftest") return cmd_selftest();
    if (name == "analyze") {
      apply_config(sub, analyze.common);
      require(sub, {"--manifest"});
      return cmd_analyze(analyze, sub);
    }
    if (name == "synth") {
      apply_config(sub, synth.common);
      return cmd_synth(synth, sub);
    }
    if (name == "train") {
      apply_config(sub, train.common);
      require(sub, {"--train", "--val"});
      return cmd_train(train, sub);
    }
    if (name == "infer-trace") {
      apply_config(sub, trace.common);
      require(sub, {"--checkpoint", "--manifest"});
      return cmd_infer_trace(trace, sub);
    }
    const std::map<std::string, std::pair<EvalArgs*, std::function<int(const EvalArgs&, const CLI::App*)>>> evals{
        {"eval-loss", {&loss, cmd_eval_loss}},
        {"eval-shift-hold", {&sh, cmd_eval_shift_hold}},
        {"eval-lid", {&lid, cmd_eval_lid}},
        {"eval-perturbed", {&pert, cmd_eval_perturbed}},
    };
    const auto& [args, fn] = evals.at(name);
    apply_config(sub, args->common);
    require(sub, {"--checkpoint", "--test"});
    if (name == "eval-perturbed") require(sub, {"--perturbed-dir"});
    return fn(*args, sub);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace vap::cli
