#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vap/encoder.hpp"
#include "vap/frame_core.hpp"
#include "vap/net.hpp"
#include "vap/vap_codec.hpp"

namespace vap {

/// Optimization hyperparameters. Defaults: 20 epochs, batch 8, AdamW with
/// lr 3.63e-4 and weight decay 0.001, 20 s windows with a 10 s hop.
struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double learning_rate = 3.63e-4;
  double weight_decay = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables clipping.
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  double window_sec = 20.0;
  double window_hop_sec = 10.0;
  /// Per-language duration cap applied to the training manifests; 0 = no cap.
  double max_sec_per_language = 0.0;

  void validate() const;
  int window_frames(const FrameGrid& grid = {}) const;
  int hop_frames(const FrameGrid& grid = {}) const;

  std::map<std::string, std::string> to_map() const;
  static TrainConfig from_map(const std::map<std::string, std::string>& kv);
  bool operator==(const TrainConfig&) const = default;
};

/// A training sample: frames [begin, begin + length) of one dialogue.
struct WindowRef {
  std::size_t dialogue = 0;
  std::size_t begin = 0;
  std::size_t length = 0;
  bool operator==(const WindowRef&) const = default;
};

/// Minimum window length: one labeled frame plus the 100-frame horizon.
inline constexpr std::size_t kMinWindowFrames = 101;

/// Windows of window_frames with hop_frames; a trailing partial window is kept
/// if it has at least 101 frames. A dialogue that fits in one window yields
/// exactly one window. Dialogues shorter than 101 frames are skipped with a
/// warning. Order is dialogue-major, then by start frame.
std::vector<WindowRef> make_windows(std::span<const std::size_t> dialogue_frames, const TrainConfig& cfg,
                                    Diagnostics* diag = nullptr, std::span<const std::string> ids = {});
/// Same, taking frame counts from the manifests' duration_sec.
std::vector<WindowRef> make_windows(std::span<const DialogueManifest> manifests, const TrainConfig& cfg,
                                    Diagnostics* diag = nullptr);

/// Keeps manifests in order until each language has accumulated
/// `max_sec` seconds; later dialogues of a full language are dropped.
/// Requires duration_sec to be filled in.
std::vector<DialogueManifest> cap_duration_per_language(std::span<const DialogueManifest> manifests, double max_sec,
                                                        Diagnostics* diag = nullptr);

// ---------------------------------------------------------------------------
// Encoded dialogues

/// A dialogue reduced to what the model sees: frozen-encoder features per
/// channel, the VAD truth and the full-dialogue VAP labels.
struct PreparedDialogue {
  DialogueManifest manifest;
  std::array<MatrixF, 2> features;
  VadStream vad;
  std::vector<VapState> labels;

  std::size_t n_frames() const { return vad.n_frames(); }
};

PreparedDialogue prepare_dialogue(const Dialogue& dialogue, const AudioEncoder& encoder, const BinConfig& bins = {});

/// Loads and encodes every manifest row, using up to `jobs` threads. Output
/// order follows the input regardless of `jobs`.
std::vector<PreparedDialogue> prepare_corpus(std::span<const DialogueManifest> manifests, const AudioEncoder& encoder,
                                             Diagnostics* diag = nullptr, int jobs = 1);

/// Whole-dialogue eval-mode outputs computed from overlapping windows of
/// `window` frames with hop window/2. Each frame's output comes from exactly
/// one window: the first window supplies its full length, later windows only
/// their second half, so every frame sees at least window/2 frames of context
/// (or everything before it).
NetworkOutput<float> sliding_forward(const VapNetwork<float>& net, const PreparedDialogue& d, int window);

/// Frame-weighted loss over a set of dialogues (sliding eval-mode inference).
LossBreakdown evaluate_loss(const VapNetwork<float>& net, std::span<const PreparedDialogue> dialogues, int window,
                            bool with_lid);

// ---------------------------------------------------------------------------
// Optimizer

/// AdamW with decoupled weight decay applied to every parameter.
class AdamW {
 public:
  AdamW(const TrainConfig& cfg, const std::vector<Parameter<float>>& params);
  /// Applies one update using the accumulated gradients.
  void step(std::vector<Parameter<float>>& params);
  long steps() const { return t_; }

 private:
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<Matrix<float>> m_, v_;
};

/// Scales all gradients so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<Parameter<float>>& params, double max_norm);

// ---------------------------------------------------------------------------
// Checkpoints

struct NamedTensor {
  std::string name;
  Matrix<float> value;
  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  std::string encoder;
  std::vector<std::string> languages;
  int epoch = 0;
  double val_loss = 0.0;
  std::vector<NamedTensor> tensors;  // declaration order

  static Checkpoint from_network(const VapNetwork<float>& net, const TrainConfig& train, int epoch, double val_loss);
  VapNetwork<float> to_network() const;
};

/// Checkpoint file: "VAPC", u32 version, length-prefixed key=value config
/// text, then the tensors as (name, rows, cols, float32 data) in declaration
/// order. All integers little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes `key=value` lines for both configs (the checkpoint sidecar).
void write_config_sidecar(const std::filesystem::path& path, const Checkpoint& ckpt);

// ---------------------------------------------------------------------------
// Training loop

struct EpochLoss {
  int epoch = 0;
  std::string split;  // "train" or "val"
  LossBreakdown loss;
};

/// `epoch<TAB>split<TAB>l_vap<TAB>l_vad[<TAB>l_lid]` lines.
std::string format_loss_curves(std::span<const EpochLoss> curves);

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLoss> curves;
  std::size_t windows_per_epoch = 0;
};

using ProgressFn = std::function<void(const EpochLoss&)>;

/// Trains from the model's seeded initialization. Epoch 0 is the untrained
/// model's validation loss; the returned checkpoint is the epoch with the
/// lowest validation l_vap (epoch 0 included). Throws DivergenceError on a
/// non-finite training loss.
TrainResult run_training(std::span<const PreparedDialogue> train_set, std::span<const PreparedDialogue> val_set,
                         const ModelConfig& model_cfg, const TrainConfig& train_cfg, const std::string& encoder,
                         const std::vector<std::string>& languages, const ProgressFn& progress = {});

}  // namespace vap
