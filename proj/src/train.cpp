#include "vap/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "vap/kv.hpp"

namespace vap {
namespace {

std::string join(const std::vector<std::string>& items, char sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

// Frame-weighted running mean of loss breakdowns.
struct LossAccumulator {
  double vap = 0.0, vad = 0.0, lid = 0.0;
  std::size_t labeled = 0, frames = 0;
  bool has_lid = false;

  void add(const LossBreakdown& l) {
    vap += l.l_vap * static_cast<double>(l.labeled_frames);
    vad += l.l_vad * static_cast<double>(l.frames);
    lid += l.l_lid * static_cast<double>(l.frames);
    labeled += l.labeled_frames;
    frames += l.frames;
    has_lid = has_lid || l.has_lid;
  }

  LossBreakdown mean() const {
    LossBreakdown out;
    out.labeled_frames = labeled;
    out.frames = frames;
    out.has_lid = has_lid;
    if (labeled) out.l_vap = vap / static_cast<double>(labeled);
    if (frames) {
      out.l_vad = vad / static_cast<double>(frames);
      out.l_lid = lid / static_cast<double>(frames);
    }
    out.total = out.l_vap + out.l_vad + out.l_lid;
    return out;
  }
};

// Little-endian byte writer/reader for the checkpoint format.
class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string origin) : bytes_(bytes), origin_(std::move(origin)) {}

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError(origin_ + ": truncated checkpoint");
  }
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void get_raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be nonnegative");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be nonnegative");
  if (!(window_sec > 0.0) || !(window_hop_sec > 0.0)) throw ConfigError("window and hop must be positive");
  if (window_hop_sec > window_sec) throw ConfigError("window_hop_sec must not exceed window_sec");
  if (max_sec_per_language < 0.0) throw ConfigError("max_sec_per_language must be nonnegative");
}

int TrainConfig::window_frames(const FrameGrid& grid) const {
  return static_cast<int>(std::lround(window_sec * grid.frame_rate_hz));
}

int TrainConfig::hop_frames(const FrameGrid& grid) const {
  return static_cast<int>(std::lround(window_hop_sec * grid.frame_rate_hz));
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"epochs", std::to_string(epochs)},
      {"batch_size", std::to_string(batch_size)},
      {"learning_rate", format_exact(learning_rate)},
      {"weight_decay", format_exact(weight_decay)},
      {"beta1", format_exact(beta1)},
      {"beta2", format_exact(beta2)},
      {"adam_eps", format_exact(adam_eps)},
      {"grad_clip", format_exact(grad_clip)},
      {"seed", std::to_string(seed)},
      {"window_sec", format_exact(window_sec)},
      {"window_hop_sec", format_exact(window_hop_sec)},
      {"max_sec_per_language", format_exact(max_sec_per_language)},
  };
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig c;
  c.epochs = kv_int(kv, "epochs", c.epochs);
  c.batch_size = kv_int(kv, "batch_size", c.batch_size);
  c.learning_rate = kv_double(kv, "learning_rate", c.learning_rate);
  c.weight_decay = kv_double(kv, "weight_decay", c.weight_decay);
  c.beta1 = kv_double(kv, "beta1", c.beta1);
  c.beta2 = kv_double(kv, "beta2", c.beta2);
  c.adam_eps = kv_double(kv, "adam_eps", c.adam_eps);
  c.grad_clip = kv_double(kv, "grad_clip", c.grad_clip);
  c.seed = kv_u64(kv, "seed", c.seed);
  c.window_sec = kv_double(kv, "window_sec", c.window_sec);
  c.window_hop_sec = kv_double(kv, "window_hop_sec", c.window_hop_sec);
  c.max_sec_per_language = kv_double(kv, "max_sec_per_language", c.max_sec_per_language);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

std::vector<WindowRef> make_windows(std::span<const std::size_t> dialogue_frames, const TrainConfig& cfg,
                                    Diagnostics* diag, std::span<const std::string> ids) {
  cfg.validate();
  const auto win = static_cast<std::size_t>(cfg.window_frames());
  const auto hop = static_cast<std::size_t>(cfg.hop_frames());
  if (win < kMinWindowFrames) throw ConfigError("window shorter than 101 frames cannot hold a label");
  std::vector<WindowRef> out;
  for (std::size_t d = 0; d < dialogue_frames.size(); ++d) {
    const std::size_t n = dialogue_frames[d];
    const std::string name = d < ids.size() ? ids[d] : "dialogue " + std::to_string(d);
    if (n < kMinWindowFrames) {
      warn(diag, name, "skipped: " + std::to_string(n) + " frames, fewer than the 101 needed for one label");
      continue;
    }
    if (n <= win) {
      out.push_back({d, 0, n});
      continue;
    }
    for (std::size_t s = 0; s < n; s += hop) {
      const std::size_t len = std::min(win, n - s);
      if (len >= kMinWindowFrames) out.push_back({d, s, len});
    }
  }
  return out;
}

std::vector<WindowRef> make_windows(std::span<const DialogueManifest> manifests, const TrainConfig& cfg,
                                    Diagnostics* diag) {
  std::vector<std::size_t> frames;
  std::vector<std::string> ids;
  for (const auto& m : manifests) {
    frames.push_back(static_cast<std::size_t>(std::max<std::int64_t>(0, seconds_to_frame(m.duration_sec))));
    ids.push_back(m.dialogue_id);
  }
  return make_windows(frames, cfg, diag, ids);
}

std::vector<DialogueManifest> cap_duration_per_language(std::span<const DialogueManifest> manifests, double max_sec,
                                                        Diagnostics* diag) {
  if (max_sec <= 0.0) return {manifests.begin(), manifests.end()};
  std::map<int, double> used;
  std::vector<DialogueManifest> out;
  for (const auto& m : manifests) {
    if (!(m.duration_sec > 0.0)) throw ValidationError(m.dialogue_id + ": duration unknown, cannot apply cap");
    double& u = used[m.language_tag];
    if (u >= max_sec) {
      warn(diag, m.dialogue_id, "dropped by the per-language duration cap");
      continue;
    }
    u += m.duration_sec;
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------

PreparedDialogue prepare_dialogue(const Dialogue& dialogue, const AudioEncoder& encoder, const BinConfig& bins) {
  const FrameGrid grid;
  if (dialogue.audio.sample_rate_hz != grid.sample_rate_hz) {
    throw ConfigError(dialogue.manifest.dialogue_id + ": encoder expects " + std::to_string(grid.sample_rate_hz) +
                      " Hz audio");
  }
  PreparedDialogue p;
  p.manifest = dialogue.manifest;
  p.vad = dialogue.vad;
  for (int c = 0; c < kNumSpeakers; ++c) {
    FeatureStream f = encoder.encode(dialogue.audio.channel(c), dialogue.manifest.dialogue_id, c);
    if (f.n_frames() != dialogue.vad.n_frames()) {
      throw DimensionError(dialogue.manifest.dialogue_id + ": encoder produced " + std::to_string(f.n_frames()) +
                           " frames for a " + std::to_string(dialogue.vad.n_frames()) + "-frame dialogue");
    }
    if (!f.all_finite()) throw ValidationError(dialogue.manifest.dialogue_id + ": non-finite encoder features");
    p.features[c] = std::move(f.frames);
  }
  p.labels = label_stream(p.vad, bins);
  return p;
}

std::vector<PreparedDialogue> prepare_corpus(std::span<const DialogueManifest> manifests, const AudioEncoder& encoder,
                                             Diagnostics* diag, int jobs) {
  const std::size_t n = manifests.size();
  std::vector<PreparedDialogue> out(n);
  std::vector<Diagnostics> local(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        const Dialogue d = load_dialogue(manifests[i], &local[i]);
        out[i] = prepare_dialogue(d, encoder);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    if (diag) {
      for (const auto& w : local[i].warnings()) diag->warn(w.context, w.message);
    }
  }
  return out;
}

NetworkOutput<float> sliding_forward(const VapNetwork<float>& net, const PreparedDialogue& d, int window) {
  const auto n = static_cast<Eigen::Index>(d.n_frames());
  const auto W = static_cast<Eigen::Index>(window);
  if (W < 2 || W > net.config().max_frames) throw ConfigError("sliding window must be in [2, max_frames]");
  if (n <= W) return net.forward(d.features[0], d.features[1], Mode::eval);

  const Eigen::Index H = W / 2;
  NetworkOutput<float> out;
  auto place = [&](const NetworkOutput<float>& part, Eigen::Index offset, Eigen::Index from, Eigen::Index to) {
    if (out.vap_logits.size() == 0) {
      out.vap_logits.resize(n, part.vap_logits.cols());
      out.vad_logits.resize(n, part.vad_logits.cols());
      out.vad_probs.resize(n, part.vad_probs.cols());
      if (part.has_lid()) out.lid_logits.resize(n, part.lid_logits.cols());
    }
    const Eigen::Index rows = to - from;
    out.vap_logits.middleRows(from, rows) = part.vap_logits.middleRows(from - offset, rows);
    out.vad_logits.middleRows(from, rows) = part.vad_logits.middleRows(from - offset, rows);
    out.vad_probs.middleRows(from, rows) = part.vad_probs.middleRows(from - offset, rows);
    if (part.has_lid()) out.lid_logits.middleRows(from, rows) = part.lid_logits.middleRows(from - offset, rows);
  };
  auto run = [&](Eigen::Index s, Eigen::Index e) {
    return net.forward(MatrixF(d.features[0].middleRows(s, e - s)), MatrixF(d.features[1].middleRows(s, e - s)),
                       Mode::eval);
  };
  place(run(0, W), 0, 0, W);
  for (Eigen::Index covered = W; covered < n;) {
    const Eigen::Index s = covered - H;
    const Eigen::Index e = std::min(s + W, n);
    place(run(s, e), s, covered, e);
    covered = e;
  }
  return out;
}

LossBreakdown evaluate_loss(const VapNetwork<float>& net, std::span<const PreparedDialogue> dialogues, int window,
                            bool with_lid) {
  LossAccumulator acc;
  for (const auto& d : dialogues) {
    const auto out = sliding_forward(net, d, window);
    std::optional<int> lang;
    if (with_lid) lang = d.manifest.language_tag;
    acc.add(compute_losses<float>(out, d.labels, d.vad, lang, nullptr));
  }
  return acc.mean();
}

// ---------------------------------------------------------------------------

AdamW::AdamW(const TrainConfig& cfg, const std::vector<Parameter<float>>& params)
    : lr_(cfg.learning_rate), wd_(cfg.weight_decay), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_eps) {
  for (const auto& p : params) {
    m_.push_back(Matrix<float>::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Matrix<float>::Zero(p.value.rows(), p.value.cols()));
  }
}

void AdamW::step(std::vector<Parameter<float>>& params) {
  if (params.size() != m_.size()) throw DimensionError("optimizer state does not match the parameters");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  const auto b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
  const auto step = static_cast<float>(lr_ / c1);
  const auto inv_sqrt_c2 = static_cast<float>(1.0 / std::sqrt(c2));
  const auto eps = static_cast<float>(eps_);
  const auto decay = static_cast<float>(1.0 - lr_ * wd_);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    m_[i] = b1 * m_[i] + (1.0f - b1) * p.grad;
    v_[i] = b2 * v_[i] + (1.0f - b2) * p.grad.cwiseProduct(p.grad);
    p.value *= decay;
    p.value.array() -= step * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_c2 + eps);
  }
}

double clip_grad_norm(std::vector<Parameter<float>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) sq += p.grad.template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto scale = static_cast<float>(max_norm / (norm + 1e-6));
    for (auto& p : params) p.grad *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------

Checkpoint Checkpoint::from_network(const VapNetwork<float>& net, const TrainConfig& train, int epoch,
                                    double val_loss) {
  Checkpoint c;
  c.model = net.config();
  c.train = train;
  c.epoch = epoch;
  c.val_loss = val_loss;
  for (const auto& p : net.parameters()) c.tensors.push_back({p.name, p.value});
  return c;
}

VapNetwork<float> Checkpoint::to_network() const {
  VapNetwork<float> net(model);
  auto& params = net.parameters();
  if (params.size() != tensors.size()) {
    throw FormatError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != tensors[i].name || params[i].value.rows() != tensors[i].value.rows() ||
        params[i].value.cols() != tensors[i].value.cols()) {
      throw FormatError("checkpoint tensor '" + tensors[i].name + "' does not match model parameter '" +
                        params[i].name + "'");
    }
    params[i].value = tensors[i].value;
  }
  return net;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  KeyValues kv;
  for (const auto& [k, v] : ckpt.model.to_map()) kv["model." + k] = v;
  for (const auto& [k, v] : ckpt.train.to_map()) kv["train." + k] = v;
  kv["encoder"] = ckpt.encoder;
  kv["languages"] = join(ckpt.languages, ',');

  ByteWriter w;
  w.put_raw("VAPC", 4);
  w.put(kCheckpointVersion);
  w.put_string(format_key_values(kv));
  w.put(static_cast<std::int32_t>(ckpt.epoch));
  w.put(ckpt.val_loss);
  w.put(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    w.put_string(t.name);
    w.put(static_cast<std::uint32_t>(t.value.rows()));
    w.put(static_cast<std::uint32_t>(t.value.cols()));
    w.put_raw(t.value.data(), static_cast<std::size_t>(t.value.size()) * sizeof(float));
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin) {
  ByteReader r(bytes, origin);
  char magic[4];
  r.get_raw(magic, 4);
  if (std::memcmp(magic, "VAPC", 4) != 0) throw FormatError(origin + ": not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError(origin + ": checkpoint version " + std::to_string(version) + " is not supported");
  }
  const KeyValues kv = parse_key_values(r.get_string(), origin);
  Checkpoint c;
  c.model = ModelConfig::from_map(kv_section(kv, "model."));
  c.train = TrainConfig::from_map(kv_section(kv, "train."));
  c.encoder = kv_string(kv, "encoder", "");
  c.languages = split(kv_string(kv, "languages", ""), ',');
  c.epoch = r.get<std::int32_t>();
  c.val_loss = r.get<double>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.get_string();
    const auto rows = r.get<std::uint32_t>();
    const auto cols = r.get<std::uint32_t>();
    r.need(static_cast<std::size_t>(rows) * cols * sizeof(float));
    t.value.resize(rows, cols);
    r.get_raw(t.value.data(), static_cast<std::size_t>(rows) * cols * sizeof(float));
    c.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError(origin + ": trailing bytes after checkpoint");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

void write_config_sidecar(const std::filesystem::path& path, const Checkpoint& ckpt) {
  KeyValues kv;
  for (const auto& [k, v] : ckpt.model.to_map()) kv["model." + k] = v;
  for (const auto& [k, v] : ckpt.train.to_map()) kv["train." + k] = v;
  kv["encoder"] = ckpt.encoder;
  kv["languages"] = join(ckpt.languages, ',');
  kv["epoch"] = std::to_string(ckpt.epoch);
  kv["val_loss"] = format_exact(ckpt.val_loss);
  kv["format_version"] = std::to_string(kCheckpointVersion);
  write_key_values(path, kv);
}

// ---------------------------------------------------------------------------

std::string format_loss_curves(std::span<const EpochLoss> curves) {
  std::string out;
  char buf[160];
  for (const auto& e : curves) {
    std::snprintf(buf, sizeof buf, "%d\t%s\t%.6f\t%.6f", e.epoch, e.split.c_str(), e.loss.l_vap, e.loss.l_vad);
    out += buf;
    if (e.loss.has_lid) {
      std::snprintf(buf, sizeof buf, "\t%.6f", e.loss.l_lid);
      out += buf;
    }
    out += '\n';
  }
  return out;
}

TrainResult run_training(std::span<const PreparedDialogue> train_set, std::span<const PreparedDialogue> val_set,
                         const ModelConfig& model_cfg, const TrainConfig& train_cfg, const std::string& encoder,
                         const std::vector<std::string>& languages, const ProgressFn& progress) {
  train_cfg.validate();
  model_cfg.validate();
  if (train_set.empty()) throw ConfigError("empty training set");
  if (val_set.empty()) throw ConfigError("empty validation set");
  if (train_cfg.window_frames() > model_cfg.max_frames) throw ConfigError("window_sec exceeds the model's max_frames");
  const bool with_lid = model_cfg.lid_classes > 0;
  for (const auto* set : {&train_set, &val_set}) {
    for (const auto& d : *set) {
      if (with_lid && d.manifest.language_tag >= model_cfg.lid_classes) {
        throw ConfigError(d.manifest.dialogue_id + ": language tag outside the LID head's classes");
      }
    }
  }

  std::vector<std::size_t> frames;
  std::vector<std::string> ids;
  for (const auto& d : train_set) {
    frames.push_back(d.n_frames());
    ids.push_back(d.manifest.dialogue_id);
  }
  Diagnostics skipped;
  const std::vector<WindowRef> windows = make_windows(frames, train_cfg, &skipped, ids);
  if (windows.empty()) throw ConfigError("no training window has a label (all dialogues shorter than 101 frames)");

  VapNetwork<float> net(model_cfg);
  AdamW opt(train_cfg, net.parameters());
  Rng order_rng(train_cfg.seed);
  Rng dropout_rng(train_cfg.seed ^ 0x5DEECE66DULL);
  const int eval_window = train_cfg.window_frames();

  TrainResult result;
  result.windows_per_epoch = windows.size();
  auto record = [&](int epoch, const char* split_name, const LossBreakdown& loss) {
    result.curves.push_back({epoch, split_name, loss});
    if (progress) progress(result.curves.back());
  };

  const LossBreakdown val0 = evaluate_loss(net, val_set, eval_window, with_lid);
  record(0, "val", val0);
  result.best = Checkpoint::from_network(net, train_cfg, 0, val0.l_vap);

  std::vector<WindowRef> order = windows;
  for (int epoch = 1; epoch <= train_cfg.epochs; ++epoch) {
    order_rng.shuffle(order);
    LossAccumulator acc;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(train_cfg.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(train_cfg.batch_size));
      const auto inv = static_cast<float>(1.0 / static_cast<double>(b1 - b0));
      net.zero_grad();
      for (std::size_t i = b0; i < b1; ++i) {
        const WindowRef& w = order[i];
        const PreparedDialogue& d = train_set[w.dialogue];
        const auto begin = static_cast<Eigen::Index>(w.begin), len = static_cast<Eigen::Index>(w.length);
        Tape<float> tape;
        const auto out = net.forward(MatrixF(d.features[0].middleRows(begin, len)),
                                     MatrixF(d.features[1].middleRows(begin, len)), Mode::train, &dropout_rng, tape);
        const std::size_t labeled = std::min(w.length, d.labels.size() - w.begin);
        const std::span<const VapState> labels(d.labels.data() + w.begin, labeled);
        std::optional<int> lang;
        if (with_lid) lang = d.manifest.language_tag;
        OutputGradient<float> grad;
        const LossBreakdown loss =
            compute_losses_prefix<float>(out, labels, d.vad.slice(w.begin, w.begin + w.length), lang, &grad);
        if (!std::isfinite(loss.total)) {
          throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", dialogue " +
                                d.manifest.dialogue_id + " frames " + std::to_string(w.begin) + ".." +
                                std::to_string(w.begin + w.length) + " (l_vap " + std::to_string(loss.l_vap) +
                                ", l_vad " + std::to_string(loss.l_vad) + ")");
        }
        acc.add(loss);
        grad.vap_logits *= inv;
        grad.vad_logits *= inv;
        if (grad.lid_logits.size()) grad.lid_logits *= inv;
        net.backward(tape, grad);
      }
      const double norm = clip_grad_norm(net.parameters(), train_cfg.grad_clip);
      if (!std::isfinite(norm)) {
        throw DivergenceError("non-finite gradient norm at epoch " + std::to_string(epoch));
      }
      opt.step(net.parameters());
    }
    record(epoch, "train", acc.mean());
    const LossBreakdown val = evaluate_loss(net, val_set, eval_window, with_lid);
    if (!std::isfinite(val.total)) throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
    record(epoch, "val", val);
    if (val.l_vap < result.best.val_loss) result.best = Checkpoint::from_network(net, train_cfg, epoch, val.l_vap);
  }
  result.best.encoder = encoder;
  result.best.languages = languages;
  return result;
}

}  // namespace vap
