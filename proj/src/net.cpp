#include "vap/net.hpp"

#include "vap/kv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace vap {
namespace {

using detail::AttentionCache;
using detail::AttentionIdx;
using detail::BlockCache;
using detail::BlockIdx;
using detail::LinearIdx;
using detail::NormCache;
using detail::NormIdx;

constexpr double kNormEps = 1e-5;
constexpr Eigen::Index kAttentionBlock = 64;

// ---------------------------------------------------------------------------
// Layer primitives. Weights are stored in x out so that y = x W + b.

template <class S>
Matrix<S> linear_forward(const std::vector<Parameter<S>>& p, LinearIdx idx, const Matrix<S>& x) {
  Matrix<S> y(x.rows(), p[idx.w].value.cols());
  y.noalias() = x * p[idx.w].value;
  y.rowwise() += p[idx.b].value.row(0);
  return y;
}

template <class S>
Matrix<S> linear_backward(std::vector<Parameter<S>>& p, LinearIdx idx, const Matrix<S>& x, const Matrix<S>& dy) {
  p[idx.w].grad.noalias() += x.transpose() * dy;
  p[idx.b].grad.row(0) += dy.colwise().sum();
  Matrix<S> dx(dy.rows(), p[idx.w].value.rows());
  dx.noalias() = dy * p[idx.w].value.transpose();
  return dx;
}

template <class S>
Matrix<S> norm_forward(const std::vector<Parameter<S>>& p, NormIdx idx, const Matrix<S>& x, NormCache<S>& cache) {
  const auto d = static_cast<S>(x.cols());
  cache.xhat.resize(x.rows(), x.cols());
  cache.rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mean = x.row(r).sum() / d;
    const S var = (x.row(r).array() - mean).square().sum() / d;
    const S rstd = S(1) / std::sqrt(var + static_cast<S>(kNormEps));
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = (x.row(r).array() - mean) * rstd;
  }
  Matrix<S> y = cache.xhat.array().rowwise() * p[idx.gamma].value.row(0).array();
  y.rowwise() += p[idx.beta].value.row(0);
  return y;
}

template <class S>
Matrix<S> norm_backward(std::vector<Parameter<S>>& p, NormIdx idx, const NormCache<S>& cache, const Matrix<S>& dy) {
  p[idx.gamma].grad.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  p[idx.beta].grad.row(0) += dy.colwise().sum();
  const Matrix<S> dxhat = dy.array().rowwise() * p[idx.gamma].value.row(0).array();
  const auto d = static_cast<S>(dy.cols());
  Matrix<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const S mean_d = dxhat.row(r).sum() / d;
    const S mean_dx = dxhat.row(r).dot(cache.xhat.row(r)) / d;
    dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - mean_d - cache.xhat.row(r).array() * mean_dx);
  }
  return dx;
}

template <class S>
constexpr S kGeluC = static_cast<S>(0.7978845608028654);  // sqrt(2 / pi)
template <class S>
constexpr S kGeluA = static_cast<S>(0.044715);

template <class S>
Matrix<S> gelu_forward(const Matrix<S>& x) {
  const auto u = kGeluC<S> * (x.array() + kGeluA<S> * x.array().cube());
  return (S(0.5) * x.array() * (S(1) + u.tanh())).matrix();
}

template <class S>
Matrix<S> gelu_backward(const Matrix<S>& x, const Matrix<S>& dy) {
  const auto xa = x.array();
  const Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t =
      (kGeluC<S> * (xa + kGeluA<S> * xa.cube())).tanh();
  const auto deriv =
      S(0.5) * (S(1) + t) + S(0.5) * xa * (S(1) - t.square()) * kGeluC<S> * (S(1) + S(3) * kGeluA<S> * xa.square());
  return (dy.array() * deriv).matrix();
}

template <class S>
Matrix<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Matrix<S> mask(rows, cols);
  const S keep = static_cast<S>(1.0 / (1.0 - rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < rate ? S(0) : keep;
  return mask;
}

double alibi_slope(int head, int heads) { return std::pow(2.0, -8.0 * (head + 1) / heads); }

template <class S>
Matrix<S> attention_forward(const std::vector<Parameter<S>>& p, const AttentionIdx& idx, const ModelConfig& cfg,
                            const Matrix<S>& q_in, const Matrix<S>& kv_in, AttentionCache<S>* cache) {
  const Eigen::Index T = q_in.rows();
  const int heads = cfg.heads, dh = cfg.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  Matrix<S> q = linear_forward(p, idx.q, q_in);
  Matrix<S> k = linear_forward(p, idx.k, kv_in);
  Matrix<S> v = linear_forward(p, idx.v, kv_in);
  Matrix<S> o(T, cfg.d_model);
  std::vector<Matrix<S>> probs;
  for (int h = 0; h < heads; ++h) {
    const S slope = static_cast<S>(alibi_slope(h, heads));
    const bool alibi = cfg.positional == PositionalEncoding::alibi;
    for (Eigen::Index r0 = 0; r0 < T; r0 += kAttentionBlock) {
      const Eigen::Index rows = std::min(kAttentionBlock, T - r0);
      const Eigen::Index keys = r0 + rows;
      Matrix<S> s(rows, keys);
      s.noalias() = q.block(r0, h * dh, rows, dh) * k.block(0, h * dh, keys, dh).transpose();
      for (Eigen::Index i = 0; i < rows; ++i) {
        const Eigen::Index valid = r0 + i + 1;
        auto seg = s.row(i).head(valid).array();
        seg *= scale;
        if (alibi) {
          for (Eigen::Index j = 0; j < valid; ++j) seg(j) -= slope * static_cast<S>(r0 + i - j);
        }
        const S m = seg.maxCoeff();
        seg = (seg - m).exp();
        seg /= seg.sum();
        s.row(i).tail(keys - valid).setZero();
      }
      o.block(r0, h * dh, rows, dh).noalias() = s * v.block(0, h * dh, keys, dh);
      if (cache) probs.push_back(std::move(s));
    }
  }
  Matrix<S> out = linear_forward(p, idx.o, o);
  if (cache) {
    cache->q_in = q_in;
    cache->kv_in = kv_in;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
    cache->probs = std::move(probs);
  }
  return out;
}

// Adds the input gradients into dq_in and dkv_in.
template <class S>
void attention_backward(std::vector<Parameter<S>>& p, const AttentionIdx& idx, const ModelConfig& cfg,
                        const AttentionCache<S>& c, const Matrix<S>& dout, Matrix<S>& dq_in, Matrix<S>& dkv_in) {
  const Eigen::Index T = c.q.rows();
  const int heads = cfg.heads, dh = cfg.head_dim();
  const S scale = S(1) / std::sqrt(static_cast<S>(dh));
  const Matrix<S> d_o = linear_backward(p, idx.o, c.o, dout);
  Matrix<S> dq = Matrix<S>::Zero(T, cfg.d_model);
  Matrix<S> dk = Matrix<S>::Zero(T, cfg.d_model);
  Matrix<S> dv = Matrix<S>::Zero(T, cfg.d_model);
  std::size_t blk = 0;
  for (int h = 0; h < heads; ++h) {
    for (Eigen::Index r0 = 0; r0 < T; r0 += kAttentionBlock) {
      const Eigen::Index rows = std::min(kAttentionBlock, T - r0);
      const Eigen::Index keys = r0 + rows;
      const Matrix<S>& P = c.probs[blk++];
      const auto dO = d_o.block(r0, h * dh, rows, dh);
      Matrix<S> dP(rows, keys);
      dP.noalias() = dO * c.v.block(0, h * dh, keys, dh).transpose();
      dv.block(0, h * dh, keys, dh).noalias() += P.transpose() * dO;
      const ColVector<S> row_dot = (P.array() * dP.array()).rowwise().sum();
      Matrix<S> dS = (P.array() * (dP.colwise() - row_dot).array()).matrix() * scale;
      dq.block(r0, h * dh, rows, dh).noalias() += dS * c.k.block(0, h * dh, keys, dh);
      dk.block(0, h * dh, keys, dh).noalias() += dS.transpose() * c.q.block(r0, h * dh, rows, dh);
    }
  }
  dq_in += linear_backward(p, idx.q, c.q_in, dq);
  dkv_in += linear_backward(p, idx.k, c.kv_in, dk);
  dkv_in += linear_backward(p, idx.v, c.kv_in, dv);
}

// Feed-forward half of a block: y = x + drop(ff2(gelu(ff1(ln2(x))))).
template <class S>
Matrix<S> ffn_forward(const std::vector<Parameter<S>>& p, const BlockIdx& b, const ModelConfig& cfg, const Matrix<S>& x,
                      bool drop, Rng* rng, BlockCache<S>* cache) {
  NormCache<S> ln2;
  Matrix<S> n2 = norm_forward(p, b.ln2, x, ln2);
  Matrix<S> pre = linear_forward(p, b.ff1, n2);
  Matrix<S> hidden = gelu_forward(pre);
  Matrix<S> f = linear_forward(p, b.ff2, hidden);
  Matrix<S> mask;
  if (drop) {
    mask = dropout_mask<S>(f.rows(), f.cols(), cfg.dropout, *rng);
    f.array() *= mask.array();
  }
  if (cache) {
    cache->ln2 = std::move(ln2);
    cache->n2 = std::move(n2);
    cache->hidden_pre = std::move(pre);
    cache->hidden = std::move(hidden);
    cache->ff_mask = std::move(mask);
  }
  return x + f;
}

template <class S>
Matrix<S> ffn_backward(std::vector<Parameter<S>>& p, const BlockIdx& b, const BlockCache<S>& c, const Matrix<S>& dy) {
  Matrix<S> df = dy;
  if (c.ff_mask.size()) df.array() *= c.ff_mask.array();
  const Matrix<S> dh = linear_backward(p, b.ff2, c.hidden, df);
  const Matrix<S> dpre = gelu_backward(c.hidden_pre, dh);
  const Matrix<S> dn2 = linear_backward(p, b.ff1, c.n2, dpre);
  return dy + norm_backward(p, b.ln2, c.ln2, dn2);
}

template <class S>
Matrix<S> apply_attention_dropout(Matrix<S> a, bool drop, double rate, Rng* rng, Matrix<S>& mask_out) {
  if (drop) {
    mask_out = dropout_mask<S>(a.rows(), a.cols(), rate, *rng);
    a.array() *= mask_out.array();
  }
  return a;
}

// Column permutation of the VAP logits under a speaker swap.
const std::array<int, kNumStates>& swap_permutation() {
  static const std::array<int, kNumStates> perm = [] {
    std::array<int, kNumStates> p{};
    for (int i = 0; i < kNumStates; ++i) p[i] = VapState(i).swapped().index();
    return p;
  }();
  return perm;
}

template <class S>
Matrix<S> permute_columns(const Matrix<S>& m, std::span<const int> perm) {
  Matrix<S> out(m.rows(), m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j) out.col(j) = m.col(perm[j]);
  return out;
}

template <class S>
Matrix<S> sigmoid(const Matrix<S>& x) {
  return (S(1) / (S(1) + (-x.array()).exp())).matrix();
}

}  // namespace

const char* to_string(PositionalEncoding p) { return p == PositionalEncoding::alibi ? "alibi" : "learned"; }

PositionalEncoding positional_from_string(const std::string& s) {
  if (s == "learned") return PositionalEncoding::learned;
  if (s == "alibi") return PositionalEncoding::alibi;
  throw ConfigError("unknown positional encoding '" + s + "'");
}

void ModelConfig::validate() const {
  if (input_dim <= 0 || d_model <= 0 || heads <= 0 || max_frames <= 0 || ffn_multiplier <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (self_layers < 0 || cross_layers < 0) throw ConfigError("layer counts must be nonnegative");
  if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
  if (lid_classes < 0) throw ConfigError("lid_classes must be nonnegative");
  if (state_classes != kNumStates) throw ConfigError("state_classes must be 256");
  if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
}

ModelConfig ModelConfig::toy(int d_model, int heads, int input_dim, int max_frames) {
  ModelConfig c;
  c.d_model = d_model;
  c.heads = heads;
  c.input_dim = input_dim;
  c.max_frames = max_frames;
  c.dropout = 0.0;
  c.self_layers = 1;
  c.cross_layers = 2;
  return c;
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {
      {"input_dim", std::to_string(input_dim)},
      {"d_model", std::to_string(d_model)},
      {"self_layers", std::to_string(self_layers)},
      {"cross_layers", std::to_string(cross_layers)},
      {"heads", std::to_string(heads)},
      {"dropout", format_exact(dropout)},
      {"max_frames", std::to_string(max_frames)},
      {"lid_classes", std::to_string(lid_classes)},
      {"state_classes", std::to_string(state_classes)},
      {"ffn_multiplier", std::to_string(ffn_multiplier)},
      {"tied_channels", tied_channels ? "1" : "0"},
      {"positional", to_string(positional)},
      {"init_std", format_exact(init_std)},
      {"init_seed", std::to_string(init_seed)},
  };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  c.input_dim = kv_int(kv, "input_dim", c.input_dim);
  c.d_model = kv_int(kv, "d_model", c.d_model);
  c.self_layers = kv_int(kv, "self_layers", c.self_layers);
  c.cross_layers = kv_int(kv, "cross_layers", c.cross_layers);
  c.heads = kv_int(kv, "heads", c.heads);
  c.dropout = kv_double(kv, "dropout", c.dropout);
  c.max_frames = kv_int(kv, "max_frames", c.max_frames);
  c.lid_classes = kv_int(kv, "lid_classes", c.lid_classes);
  c.state_classes = kv_int(kv, "state_classes", c.state_classes);
  c.ffn_multiplier = kv_int(kv, "ffn_multiplier", c.ffn_multiplier);
  c.tied_channels = kv_bool(kv, "tied_channels", c.tied_channels);
  c.positional = positional_from_string(kv_string(kv, "positional", to_string(c.positional)));
  c.init_std = kv_double(kv, "init_std", c.init_std);
  c.init_seed = kv_u64(kv, "init_seed", c.init_seed);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

template <class S>
VapNetwork<S>::VapNetwork(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.d_model;
  const int n_stacks = cfg_.tied_channels ? 1 : 2;
  for (int c = 0; c < n_stacks; ++c) {
    const std::string prefix = cfg_.tied_channels ? "shared." : "ch" + std::to_string(c) + ".";
    detail::ChannelIdx ch;
    ch.in_proj = add_linear(prefix + "in_proj", cfg_.input_dim, d);
    if (cfg_.positional == PositionalEncoding::learned) ch.pos = add_param(prefix + "pos_emb", cfg_.max_frames, d);
    for (int l = 0; l < cfg_.self_layers; ++l) ch.self_blocks.push_back(add_block(prefix + "self" + std::to_string(l)));
    for (int l = 0; l < cfg_.cross_layers; ++l) {
      ch.cross_blocks.push_back(add_block(prefix + "cross" + std::to_string(l)));
    }
    ch.final_norm = add_norm(prefix + "final_norm", d);
    channels_[c] = ch;
  }
  if (cfg_.tied_channels) channels_[1] = channels_[0];
  vap_head_ = add_linear("head.vap", 2 * d, cfg_.state_classes);
  vad_head_ = add_linear("head.vad", 2 * d, kNumSpeakers);
  if (cfg_.lid_classes > 0) lid_head_ = add_linear("head.lid", 2 * d, cfg_.lid_classes);
  initialize();
}

template <class S>
int VapNetwork<S>::add_param(const std::string& name, int rows, int cols) {
  params_.push_back({name, Matrix<S>::Zero(rows, cols), Matrix<S>::Zero(rows, cols)});
  return static_cast<int>(params_.size()) - 1;
}

template <class S>
detail::LinearIdx VapNetwork<S>::add_linear(const std::string& name, int in, int out) {
  return {add_param(name + ".w", in, out), add_param(name + ".b", 1, out)};
}

template <class S>
detail::NormIdx VapNetwork<S>::add_norm(const std::string& name, int dim) {
  return {add_param(name + ".gamma", 1, dim), add_param(name + ".beta", 1, dim)};
}

template <class S>
detail::BlockIdx VapNetwork<S>::add_block(const std::string& name) {
  const int d = cfg_.d_model, hidden = cfg_.ffn_multiplier * cfg_.d_model;
  detail::BlockIdx b;
  b.ln1 = add_norm(name + ".ln1", d);
  b.attn.q = add_linear(name + ".attn.q", d, d);
  b.attn.k = add_linear(name + ".attn.k", d, d);
  b.attn.v = add_linear(name + ".attn.v", d, d);
  b.attn.o = add_linear(name + ".attn.o", d, d);
  b.ln2 = add_norm(name + ".ln2", d);
  b.ff1 = add_linear(name + ".ff1", d, hidden);
  b.ff2 = add_linear(name + ".ff2", hidden, d);
  return b;
}

template <class S>
void VapNetwork<S>::initialize() {
  Rng rng(cfg_.init_seed);
  auto ends_with = [](const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (auto& p : params_) {
    if (ends_with(p.name, ".gamma")) {
      p.value.setOnes();
    } else if (ends_with(p.name, ".b") || ends_with(p.name, ".beta")) {
      p.value.setZero();
    } else {
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(rng.normal(0.0, cfg_.init_std));
    }
  }
}

template <class S>
std::size_t VapNetwork<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

template <class S>
void VapNetwork<S>::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

template <class S>
NetworkOutput<S> VapNetwork<S>::forward(const Matrix<S>& ch0, const Matrix<S>& ch1, Mode mode, Rng* rng) const {
  Tape<S> tape;
  return forward(ch0, ch1, mode, rng, tape);
}

template <class S>
NetworkOutput<S> VapNetwork<S>::forward(const Matrix<S>& ch0, const Matrix<S>& ch1, Mode mode, Rng* rng,
                                        Tape<S>& tape) const {
  const Eigen::Index T = ch0.rows();
  if (ch1.rows() != T) throw DimensionError("channel frame counts differ");
  if (ch0.cols() != cfg_.input_dim || ch1.cols() != cfg_.input_dim) {
    throw DimensionError("feature dim " + std::to_string(ch0.cols()) + " does not match model input_dim " +
                         std::to_string(cfg_.input_dim));
  }
  if (T > cfg_.max_frames) throw DimensionError("input longer than max_frames");
  const bool drop = mode == Mode::train && cfg_.dropout > 0.0;
  if (drop && rng == nullptr) throw ConfigError("train mode with dropout needs an rng");
  const auto& p = params_;

  tape = Tape<S>{};
  tape.n_frames = static_cast<std::size_t>(T);
  tape.features = {ch0, ch1};
  std::array<Matrix<S>, 2> x;
  for (int c = 0; c < 2; ++c) {
    x[c] = linear_forward(p, channels_[c].in_proj, tape.features[c]);
    if (channels_[c].pos >= 0) x[c] += p[channels_[c].pos].value.topRows(T);
    tape.self_blocks[c].resize(channels_[c].self_blocks.size());
  }

  for (int c = 0; c < 2; ++c) {
    for (std::size_t l = 0; l < channels_[c].self_blocks.size(); ++l) {
      const auto& b = channels_[c].self_blocks[l];
      auto& cache = tape.self_blocks[c][l];
      cache.n1 = norm_forward(p, b.ln1, x[c], cache.ln1);
      Matrix<S> a = attention_forward(p, b.attn, cfg_, cache.n1, cache.n1, &cache.attn);
      x[c] += apply_attention_dropout(std::move(a), drop, cfg_.dropout, rng, cache.attn_mask);
      x[c] = ffn_forward(p, b, cfg_, x[c], drop, rng, &cache);
    }
  }

  const std::size_t n_cross = channels_[0].cross_blocks.size();
  for (int c = 0; c < 2; ++c) tape.cross_blocks[c].resize(n_cross);
  for (std::size_t l = 0; l < n_cross; ++l) {
    std::array<BlockCache<S>*, 2> cache{&tape.cross_blocks[0][l], &tape.cross_blocks[1][l]};
    for (int c = 0; c < 2; ++c) {
      cache[c]->n1 = norm_forward(p, channels_[c].cross_blocks[l].ln1, x[c], cache[c]->ln1);
    }
    std::array<Matrix<S>, 2> attn;
    for (int c = 0; c < 2; ++c) {
      attn[c] = attention_forward(p, channels_[c].cross_blocks[l].attn, cfg_, cache[c]->n1, cache[1 - c]->n1,
                                  &cache[c]->attn);
    }
    for (int c = 0; c < 2; ++c) {
      x[c] += apply_attention_dropout(std::move(attn[c]), drop, cfg_.dropout, rng, cache[c]->attn_mask);
      x[c] = ffn_forward(p, channels_[c].cross_blocks[l], cfg_, x[c], drop, rng, cache[c]);
    }
  }

  const int d = cfg_.d_model;
  tape.head_ab.resize(T, 2 * d);
  for (int c = 0; c < 2; ++c) {
    tape.head_ab.middleCols(c * d, d) = norm_forward(p, channels_[c].final_norm, x[c], tape.final_norm[c]);
  }

  NetworkOutput<S> out;
  out.vap_logits = linear_forward(p, vap_head_, tape.head_ab);
  out.vad_logits = linear_forward(p, vad_head_, tape.head_ab);
  if (cfg_.lid_classes > 0) out.lid_logits = linear_forward(p, lid_head_, tape.head_ab);
  if (cfg_.tied_channels) {
    tape.head_ba.resize(T, 2 * d);
    tape.head_ba.leftCols(d) = tape.head_ab.rightCols(d);
    tape.head_ba.rightCols(d) = tape.head_ab.leftCols(d);
    out.vap_logits += permute_columns<S>(linear_forward(p, vap_head_, tape.head_ba), swap_permutation());
    static constexpr std::array<int, 2> kSwap{1, 0};
    out.vad_logits += permute_columns<S>(linear_forward(p, vad_head_, tape.head_ba), kSwap);
    if (cfg_.lid_classes > 0) out.lid_logits += linear_forward(p, lid_head_, tape.head_ba);
  }
  out.vad_probs = sigmoid(out.vad_logits);
  return out;
}

template <class S>
void VapNetwork<S>::backward(const Tape<S>& tape, const OutputGradient<S>& grad) {
  auto& p = params_;
  const int d = cfg_.d_model;
  const auto T = static_cast<Eigen::Index>(tape.n_frames);

  Matrix<S> d_ab = Matrix<S>::Zero(T, 2 * d);
  Matrix<S> d_ba;
  const bool has_lid = cfg_.lid_classes > 0 && grad.lid_logits.size() > 0;
  d_ab += linear_backward(p, vap_head_, tape.head_ab, grad.vap_logits);
  d_ab += linear_backward(p, vad_head_, tape.head_ab, grad.vad_logits);
  if (has_lid) d_ab += linear_backward(p, lid_head_, tape.head_ab, grad.lid_logits);
  if (cfg_.tied_channels) {
    // out[:, i] += H(ba)[:, perm[i]]  =>  dH(ba)[:, perm[i]] = dout[:, i]; perm is an involution.
    d_ba = linear_backward(p, vap_head_, tape.head_ba, permute_columns<S>(grad.vap_logits, swap_permutation()));
    static constexpr std::array<int, 2> kSwap{1, 0};
    d_ba += linear_backward(p, vad_head_, tape.head_ba, permute_columns<S>(grad.vad_logits, kSwap));
    if (has_lid) d_ba += linear_backward(p, lid_head_, tape.head_ba, grad.lid_logits);
    d_ab.leftCols(d) += d_ba.rightCols(d);
    d_ab.rightCols(d) += d_ba.leftCols(d);
  }

  std::array<Matrix<S>, 2> dx;
  for (int c = 0; c < 2; ++c) {
    dx[c] = norm_backward(p, channels_[c].final_norm, tape.final_norm[c], Matrix<S>(d_ab.middleCols(c * d, d)));
  }

  const std::size_t n_cross = channels_[0].cross_blocks.size();
  for (std::size_t li = n_cross; li-- > 0;) {
    std::array<Matrix<S>, 2> dn1;
    for (int c = 0; c < 2; ++c) {
      dx[c] = ffn_backward(p, channels_[c].cross_blocks[li], tape.cross_blocks[c][li], dx[c]);
      dn1[c] = Matrix<S>::Zero(T, d);
    }
    for (int c = 0; c < 2; ++c) {
      const auto& cache = tape.cross_blocks[c][li];
      Matrix<S> da = dx[c];
      if (cache.attn_mask.size()) da.array() *= cache.attn_mask.array();
      attention_backward(p, channels_[c].cross_blocks[li].attn, cfg_, cache.attn, da, dn1[c], dn1[1 - c]);
    }
    for (int c = 0; c < 2; ++c) {
      dx[c] += norm_backward(p, channels_[c].cross_blocks[li].ln1, tape.cross_blocks[c][li].ln1, dn1[c]);
    }
  }

  for (int c = 0; c < 2; ++c) {
    for (std::size_t li = channels_[c].self_blocks.size(); li-- > 0;) {
      const auto& b = channels_[c].self_blocks[li];
      const auto& cache = tape.self_blocks[c][li];
      dx[c] = ffn_backward(p, b, cache, dx[c]);
      Matrix<S> da = dx[c];
      if (cache.attn_mask.size()) da.array() *= cache.attn_mask.array();
      Matrix<S> dn1 = Matrix<S>::Zero(T, d);
      attention_backward(p, b.attn, cfg_, cache.attn, da, dn1, dn1);
      dx[c] += norm_backward(p, b.ln1, cache.ln1, dn1);
    }
    if (channels_[c].pos >= 0) p[channels_[c].pos].grad.topRows(T) += dx[c];
    linear_backward(p, channels_[c].in_proj, tape.features[c], dx[c]);
  }
}

template class VapNetwork<float>;
template class VapNetwork<double>;

// ---------------------------------------------------------------------------
// Losses

template <class S>
LossBreakdown compute_losses_prefix(const NetworkOutput<S>& out, std::span<const VapState> labels,
                                    const VadStream& vad_truth, std::optional<int> language,
                                    OutputGradient<S>* grad) {
  const auto T = static_cast<Eigen::Index>(out.n_frames());
  if (static_cast<Eigen::Index>(vad_truth.n_frames()) != T) throw DimensionError("VAD truth length mismatch");
  if (static_cast<Eigen::Index>(labels.size()) > T) throw DimensionError("more labels than frames");
  if (language && !out.has_lid()) throw ConfigError("language given but the LID head is off");
  if (language && (*language < 0 || *language >= out.lid_logits.cols())) {
    throw DomainError("language tag outside the LID head's classes");
  }
  LossBreakdown loss;
  loss.frames = static_cast<std::size_t>(T);
  loss.labeled_frames = labels.size();
  if (grad) {
    grad->vap_logits = Matrix<S>::Zero(T, out.vap_logits.cols());
    grad->vad_logits = Matrix<S>::Zero(T, out.vad_logits.cols());
    grad->lid_logits = language ? Matrix<S>::Zero(T, out.lid_logits.cols()) : Matrix<S>();
  }

  // Cross-entropy with log-sum-exp, accumulated in double. `g` is a
  // contiguous gradient row or null.
  auto softmax_ce = [](const auto& row, int target, S* g, double weight) {
    const double m = static_cast<double>(row.maxCoeff());
    double z = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) z += std::exp(static_cast<double>(row(j)) - m);
    const double lse = m + std::log(z);
    if (g) {
      for (Eigen::Index j = 0; j < row.size(); ++j) {
        const double pj = std::exp(static_cast<double>(row(j)) - lse);
        g[j] = static_cast<S>(weight * (pj - (j == target ? 1.0 : 0.0)));
      }
    }
    return lse - static_cast<double>(row(target));
  };

  if (!labels.empty()) {
    const double w = 1.0 / static_cast<double>(labels.size());
    double sum = 0.0;
    for (std::size_t t = 0; t < labels.size(); ++t) {
      const auto r = static_cast<Eigen::Index>(t);
      S* g = grad ? grad->vap_logits.row(r).data() : nullptr;
      sum += softmax_ce(out.vap_logits.row(r), labels[t].index(), g, w);
    }
    loss.l_vap = sum * w;
  }

  if (T > 0) {
    const double w = 1.0 / static_cast<double>(T);
    double sum = 0.0;
    for (Eigen::Index t = 0; t < T; ++t) {
      for (int s = 0; s < kNumSpeakers; ++s) {
        const double x = static_cast<double>(out.vad_logits(t, s));
        const double v = vad_truth.voiced(s, static_cast<std::size_t>(t)) ? 1.0 : 0.0;
        // BCE on logits: softplus(x) - v * x
        sum += std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - v * x;
        if (grad) grad->vad_logits(t, s) = static_cast<S>(w * (1.0 / (1.0 + std::exp(-x)) - v));
      }
    }
    loss.l_vad = sum * w;

    if (language) {
      double lsum = 0.0;
      for (Eigen::Index t = 0; t < T; ++t) {
        S* g = grad ? grad->lid_logits.row(t).data() : nullptr;
        lsum += softmax_ce(out.lid_logits.row(t), *language, g, w);
      }
      loss.l_lid = lsum * w;
      loss.has_lid = true;
    }
  }
  loss.total = loss.l_vap + loss.l_vad + loss.l_lid;
  return loss;
}

template <class S>
LossBreakdown compute_losses(const NetworkOutput<S>& out, std::span<const VapState> labels, const VadStream& vad_truth,
                             std::optional<int> language, OutputGradient<S>* grad) {
  const auto window = static_cast<std::size_t>(BinConfig{}.window_frames());
  const std::size_t expected = out.n_frames() > window ? out.n_frames() - window : 0;
  if (labels.size() != expected) {
    throw DimensionError("expected " + std::to_string(expected) + " VAP labels, got " + std::to_string(labels.size()));
  }
  return compute_losses_prefix(out, labels, vad_truth, language, grad);
}

template LossBreakdown compute_losses_prefix<float>(const NetworkOutput<float>&, std::span<const VapState>,
                                                    const VadStream&, std::optional<int>, OutputGradient<float>*);
template LossBreakdown compute_losses_prefix<double>(const NetworkOutput<double>&, std::span<const VapState>,
                                                     const VadStream&, std::optional<int>, OutputGradient<double>*);
template LossBreakdown compute_losses<float>(const NetworkOutput<float>&, std::span<const VapState>, const VadStream&,
                                             std::optional<int>, OutputGradient<float>*);
template LossBreakdown compute_losses<double>(const NetworkOutput<double>&, std::span<const VapState>,
                                              const VadStream&, std::optional<int>, OutputGradient<double>*);

// ---------------------------------------------------------------------------

// Below this magnitude, finite-difference round-off (about 1e-10 absolute)
// dominates, so errors are measured relative to the floor instead.
constexpr double kGradientFloor = 1e-5;

static std::string fmt_e(double v) { char b[32]; std::snprintf(b, 32, "%.6e", v); return b; }
GradientCheckResult gradient_check(const ModelConfig& cfg, std::size_t n_frames, std::uint64_t seed,
                                   bool zero_features, double step) {
  if (cfg.dropout != 0.0) throw ConfigError("gradient check requires dropout = 0 (deterministic forward)");
  if (cfg.d_model > 16 || n_frames > 8) throw ConfigError("gradient check is limited to toy sizes (d_model <= 16, <= 8 frames)");
  if (n_frames == 0 || static_cast<int>(n_frames) > cfg.max_frames) throw ConfigError("bad frame count for gradient check");

  VapNetwork<double> net(cfg);
  Rng rng(seed);
  // Perturb the freshly initialized weights so that LayerNorm gains, biases
  // and heads all carry non-trivial gradients.
  for (auto& p : net.parameters()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] += rng.normal(0.0, 0.3);
  }
  const auto T = static_cast<Eigen::Index>(n_frames);
  MatrixD f0 = MatrixD::Zero(T, cfg.input_dim), f1 = MatrixD::Zero(T, cfg.input_dim);
  if (!zero_features) {
    for (Eigen::Index i = 0; i < f0.size(); ++i) {
      f0.data()[i] = rng.normal();
      f1.data()[i] = rng.normal();
    }
  }
  std::vector<std::uint8_t> v0(n_frames), v1(n_frames);
  std::vector<VapState> labels;
  for (std::size_t t = 0; t < n_frames; ++t) {
    v0[t] = rng.bernoulli(0.5);
    v1[t] = rng.bernoulli(0.5);
    labels.emplace_back(static_cast<int>(rng.below(kNumStates)));
  }
  const VadStream vad(v0, v1);
  std::optional<int> lang;
  if (cfg.lid_classes > 0) lang = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.lid_classes)));

  auto total_loss = [&]() {
    const auto out = net.forward(f0, f1, Mode::eval);
    return compute_losses_prefix<double>(out, labels, vad, lang, nullptr).total;
  };

  net.zero_grad();
  Tape<double> tape;
  const auto out = net.forward(f0, f1, Mode::eval, nullptr, tape);
  OutputGradient<double> og;
  compute_losses_prefix<double>(out, labels, vad, lang, &og);
  net.backward(tape, og);

  GradientCheckResult result;
  for (auto& p : net.parameters()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double& w = p.value.data()[i];
      const double saved = w;
      w = saved + step;
      const double up = total_loss();
      w = saved - step;
      const double down = total_loss();
      w = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = p.grad.data()[i];
      if (!std::isfinite(analytic) || !std::isfinite(numeric)) result.all_finite = false;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradientFloor});
      const double rel = std::abs(analytic - numeric) / denom;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_parameter = p.name + "[" + std::to_string(i) + "] a=" + fmt_e(analytic) + " n=" + fmt_e(numeric);
      }
      ++result.checked;
    }
  }
  return result;
}

}  // namespace vap
