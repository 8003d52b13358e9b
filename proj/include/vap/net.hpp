#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vap/frame_core.hpp"
#include "vap/rng.hpp"
#include "vap/tensor.hpp"
#include "vap/vap_codec.hpp"

namespace vap {

enum class PositionalEncoding { learned, alibi };
enum class Mode { train, eval };

const char* to_string(PositionalEncoding p);
PositionalEncoding positional_from_string(const std::string& s);

/// Architecture hyperparameters. Defaults are the full-size profile: 256-dim
/// encoder features, one self-attention layer per channel, three
/// cross-attention layers, 4 heads, dropout 0.1, 20 s context at 50 Hz.
struct ModelConfig {
  int input_dim = 256;
  int d_model = 256;
  int self_layers = 1;
  int cross_layers = 3;
  int heads = 4;
  double dropout = 0.1;
  int max_frames = 1000;
  int lid_classes = 0;
  int state_classes = kNumStates;
  int ffn_multiplier = 4;
  /// Share one parameter set between the two channel stacks and make the
  /// heads speaker-equivariant.
  bool tied_channels = false;
  PositionalEncoding positional = PositionalEncoding::learned;
  double init_std = 0.02;
  std::uint64_t init_seed = 0;

  void validate() const;
  int head_dim() const { return d_model / heads; }

  /// Small double-precision profile for gradient checks.
  static ModelConfig toy(int d_model = 16, int heads = 2, int input_dim = 8, int max_frames = 8);

  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);
  bool operator==(const ModelConfig&) const = default;
};

template <class S>
struct NetworkOutput {
  Matrix<S> vap_logits;  // n_frames x 256
  Matrix<S> vad_logits;  // n_frames x 2
  Matrix<S> vad_probs;   // sigmoid(vad_logits)
  Matrix<S> lid_logits;  // n_frames x L, empty when the LID head is off

  std::size_t n_frames() const { return static_cast<std::size_t>(vap_logits.rows()); }
  bool has_lid() const { return lid_logits.size() > 0; }
};

/// Gradient of the loss w.r.t. the raw head outputs.
template <class S>
struct OutputGradient {
  Matrix<S> vap_logits;
  Matrix<S> vad_logits;
  Matrix<S> lid_logits;
};

struct LossBreakdown {
  double l_vap = 0.0;
  double l_vad = 0.0;
  double l_lid = 0.0;
  bool has_lid = false;
  double total = 0.0;
  std::size_t labeled_frames = 0;
  std::size_t frames = 0;
};

template <class S>
struct Parameter {
  std::string name;
  Matrix<S> value;
  Matrix<S> grad;
};

namespace detail {

struct LinearIdx {
  int w = -1, b = -1;
};
struct NormIdx {
  int gamma = -1, beta = -1;
};
struct AttentionIdx {
  LinearIdx q, k, v, o;
};
struct BlockIdx {
  NormIdx ln1;
  AttentionIdx attn;
  NormIdx ln2;
  LinearIdx ff1, ff2;
};
struct ChannelIdx {
  LinearIdx in_proj;
  int pos = -1;
  std::vector<BlockIdx> self_blocks;
  std::vector<BlockIdx> cross_blocks;
  NormIdx final_norm;
};

template <class S>
struct NormCache {
  Matrix<S> xhat;
  ColVector<S> rstd;
};

template <class S>
struct AttentionCache {
  Matrix<S> q_in, kv_in, q, k, v, o;
  // Per head, then per block of query rows: rows x (causal key prefix),
  // zero above the diagonal.
  std::vector<Matrix<S>> probs;
};

template <class S>
struct BlockCache {
  NormCache<S> ln1;
  Matrix<S> n1;
  AttentionCache<S> attn;
  Matrix<S> attn_mask;  // dropout mask, empty when inactive
  NormCache<S> ln2;
  Matrix<S> n2, hidden_pre, hidden;
  Matrix<S> ff_mask;
};

}  // namespace detail

/// Activations retained by a forward pass for the matching backward pass.
template <class S>
struct Tape {
  std::size_t n_frames = 0;
  std::array<Matrix<S>, 2> features;
  std::array<std::vector<detail::BlockCache<S>>, 2> self_blocks;
  std::array<std::vector<detail::BlockCache<S>>, 2> cross_blocks;
  std::array<detail::NormCache<S>, 2> final_norm;
  Matrix<S> head_ab;  // [channel0 | channel1]
  Matrix<S> head_ba;  // [channel1 | channel0], tied heads only
};

/// Dual-channel causal transformer with VAP, VAD and optional LID heads.
///
/// Each channel is projected to d_model, passed through causal self-attention
/// layers, then through cross-attention layers in which each channel queries
/// the other (both directions at once). The two channel outputs are
/// concatenated (2 * d_model) and fed to linear heads. Every attention is
/// restricted to frames <= t, so output t depends only on features 0..t.
template <class S>
class VapNetwork {
 public:
  explicit VapNetwork(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter<S>>& parameters() { return params_; }
  const std::vector<Parameter<S>>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// `features[c]` is n_frames x input_dim for channel c. Train mode applies
  /// dropout using `rng`, which must then be non-null.
  NetworkOutput<S> forward(const Matrix<S>& ch0, const Matrix<S>& ch1, Mode mode, Rng* rng = nullptr) const;
  NetworkOutput<S> forward(const Matrix<S>& ch0, const Matrix<S>& ch1, Mode mode, Rng* rng, Tape<S>& tape) const;

  /// Accumulates parameter gradients for the forward pass recorded in `tape`.
  void backward(const Tape<S>& tape, const OutputGradient<S>& grad);
  void zero_grad();

  /// Copies parameter values from a network of another scalar type with the
  /// same configuration.
  template <class T>
  void assign_from(const VapNetwork<T>& other) {
    if (other.parameters().size() != params_.size()) throw DimensionError("parameter layout mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      params_[i].value = other.parameters()[i].value.template cast<S>();
    }
  }

 private:
  int add_param(const std::string& name, int rows, int cols);
  detail::LinearIdx add_linear(const std::string& name, int in, int out);
  detail::NormIdx add_norm(const std::string& name, int dim);
  detail::BlockIdx add_block(const std::string& name);
  void initialize();

  ModelConfig cfg_;
  std::vector<Parameter<S>> params_;
  std::array<detail::ChannelIdx, 2> channels_;
  detail::LinearIdx vap_head_, vad_head_, lid_head_;
};

extern template class VapNetwork<float>;
extern template class VapNetwork<double>;

/// Losses averaged over frames: l_vap over the labeled frames, l_vad over all
/// frames (summed over the two speakers), l_lid over all frames against the
/// dialogue tag. `labels` must hold exactly n_frames - 100 entries.
template <class S>
LossBreakdown compute_losses(const NetworkOutput<S>& out, std::span<const VapState> labels, const VadStream& vad_truth,
                             std::optional<int> language = std::nullopt, OutputGradient<S>* grad = nullptr);

/// Same as compute_losses but accepts labels for any prefix of the frames
/// (frame i is supervised iff i < labels.size()).
template <class S>
LossBreakdown compute_losses_prefix(const NetworkOutput<S>& out, std::span<const VapState> labels,
                                    const VadStream& vad_truth, std::optional<int> language,
                                    OutputGradient<S>* grad);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
  bool all_finite = true;
};

/// Compares analytic gradients of the total loss with central finite
/// differences (h = 1e-5) in double precision on random inputs. Requires a
/// toy-sized profile with dropout disabled.
GradientCheckResult gradient_check(const ModelConfig& cfg, std::size_t n_frames, std::uint64_t seed,
                                   bool zero_features = false, double step = 1e-5);

}  // namespace vap
