#include "fgl/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fgl/error.hpp"

namespace fgl {

void TransformerConfig::validate() const {
  if (num_layers == 0 || num_heads == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0 || max_positions == 0) {
    throw Error("invalid transformer config: zero dimension");
  }
  if (d_model % num_heads != 0) throw Error("invalid transformer config: d_model not divisible by num_heads");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw Error("invalid transformer config: dropout_rate");
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers}, {"num_heads", c.num_heads},       {"d_model", c.d_model},
                     {"d_ff", c.d_ff},             {"dropout_rate", c.dropout_rate}, {"vocab_size", c.vocab_size},
                     {"max_positions", c.max_positions}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_positions = j.at("max_positions").get<std::size_t>();
}

template <typename T>
Tensor<T>& NamedTensors<T>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("unknown tensor: " + name);
  return it->second;
}

template <typename T>
const Tensor<T>& NamedTensors<T>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw Error("unknown tensor: " + name);
  return it->second;
}

template <typename T>
std::size_t NamedTensors<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.values.size();
  return n;
}

template <typename T>
NamedTensors<T> NamedTensors<T>::zeros_like() const {
  NamedTensors out;
  for (const auto& [name, t] : tensors) out.tensors.emplace(name, Tensor<T>{t.shape, AlignedVector<T>(t.values.size())});
  return out;
}

template <typename T>
void NamedTensors<T>::check_compatible(const NamedTensors& other) const {
  if (tensors.size() != other.tensors.size()) throw Error("tensor set mismatch: different tensor counts");
  for (const auto& [name, t] : tensors) {
    auto it = other.tensors.find(name);
    if (it == other.tensors.end()) throw Error("tensor set mismatch: missing " + name);
    if (it->second.shape != t.shape) throw Error("tensor set mismatch: shape of " + name);
  }
}

template <typename T>
bool NamedTensors<T>::all_finite() const {
  for (const auto& [name, t] : tensors) {
    for (T v : t.values) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

namespace {

using Index = Eigen::Index;

template <typename T>
using Mat = Matrix<T>;

constexpr double kLayerNormEps = 1e-5;

std::string block_name(const char* side, std::size_t layer) {
  return std::string(side) + "." + std::to_string(layer) + ".";
}

template <typename T>
void add_linear(ModelParameters<T>& p, const std::string& name, std::size_t in, std::size_t out) {
  p.tensors[name + ".weight"] = Tensor<T>{{in, out}, AlignedVector<T>(in * out)};
  p.tensors[name + ".bias"] = Tensor<T>{{out}, AlignedVector<T>(out)};
}

template <typename T>
void add_norm(ModelParameters<T>& p, const std::string& name, std::size_t d) {
  p.tensors[name + ".gain"] = Tensor<T>{{d}, AlignedVector<T>(d, T(1))};
  p.tensors[name + ".bias"] = Tensor<T>{{d}, AlignedVector<T>(d)};
}

template <typename T>
void add_attention(ModelParameters<T>& p, const std::string& name, std::size_t d) {
  for (const char* proj : {".q", ".k", ".v", ".o"}) add_linear(p, name + proj, d, d);
}

template <typename T>
ModelParameters<T> parameter_layout(const TransformerConfig& c) {
  ModelParameters<T> p;
  const std::size_t d = c.d_model;
  p.tensors["embed.weight"] = Tensor<T>{{c.vocab_size, d}, AlignedVector<T>(c.vocab_size * d)};
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string e = block_name("encoder", l);
    add_attention(p, e + "self_attn", d);
    add_norm(p, e + "self_attn_norm", d);
    add_linear(p, e + "ffn.fc1", d, c.d_ff);
    add_linear(p, e + "ffn.fc2", c.d_ff, d);
    add_norm(p, e + "ffn_norm", d);

    const std::string dn = block_name("decoder", l);
    add_attention(p, dn + "self_attn", d);
    add_norm(p, dn + "self_attn_norm", d);
    add_attention(p, dn + "cross_attn", d);
    add_norm(p, dn + "cross_attn_norm", d);
    add_linear(p, dn + "ffn.fc1", d, c.d_ff);
    add_linear(p, dn + "ffn.fc2", c.d_ff, d);
    add_norm(p, dn + "ffn_norm", d);
  }
  add_linear(p, "output", d, c.vocab_size);
  return p;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// ---------------------------------------------------------------------------
// Building blocks. Activations are (rows x features) row-major matrices where
// a batch of B sequences of length L occupies rows b*L .. b*L+L-1.

template <typename T>
struct Net {
  const ModelParameters<T>& params;
  GradientSet<T>* grads;
  const TransformerConfig& config;
  Rng* rng;  // null disables dropout
  double drop;

  auto W(const std::string& name) const { return params.at(name).mat(); }
  auto G(const std::string& name) { return grads->at(name).mat(); }
  bool dropping() const { return rng != nullptr && drop > 0.0; }
};

template <typename T>
Mat<T> dropout_mask(Net<T>& net, Index rows, Index cols) {
  Mat<T> mask;
  if (!net.dropping()) return mask;
  mask.resize(rows, cols);
  const T keep_scale = T(1.0 / (1.0 - net.drop));
  // 16-bit uniforms from a splitmix64 stream seeded by one draw of the caller's rng
  const auto threshold = static_cast<std::uint64_t>(net.drop * 65536.0);
  std::uint64_t state = net.rng->next();
  T* data = mask.data();
  const Index n = mask.size();
  for (Index i = 0; i < n; i += 4) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t r = Rng::mix(state);
    for (Index k = i; k < std::min<Index>(i + 4, n); ++k, r >>= 16) {
      data[k] = (r & 0xffffULL) < threshold ? T(0) : keep_scale;
    }
  }
  return mask;
}

template <typename T>
Mat<T> apply_mask(const Mat<T>& x, const Mat<T>& mask) {
  return mask.size() ? Mat<T>(x.cwiseProduct(mask)) : x;
}

template <typename T>
Mat<T> linear_forward(const Net<T>& net, const std::string& name, const Mat<T>& x) {
  Mat<T> y = x * net.W(name + ".weight");
  y.rowwise() += net.W(name + ".bias").row(0);
  return y;
}

template <typename T>
Mat<T> linear_backward(Net<T>& net, const std::string& name, const Mat<T>& x, const Mat<T>& dy) {
  net.G(name + ".weight").noalias() += x.transpose() * dy;
  net.G(name + ".bias").row(0) += dy.colwise().sum();
  return dy * net.W(name + ".weight").transpose();
}

template <typename T>
struct NormCache {
  Mat<T> xhat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
};

template <typename T>
Mat<T> norm_forward(const Net<T>& net, const std::string& name, const Mat<T>& x, NormCache<T>* cache) {
  const Index n = x.rows(), d = x.cols();
  Mat<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv(n);
  for (Index r = 0; r < n; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    inv(r) = T(1) / std::sqrt(var + T(kLayerNormEps));
    xhat.row(r) = (x.row(r).array() - mean) * inv(r);
  }
  Mat<T> y = xhat.array().rowwise() * net.W(name + ".gain").row(0).array();
  y.rowwise() += net.W(name + ".bias").row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

template <typename T>
Mat<T> norm_backward(Net<T>& net, const std::string& name, const NormCache<T>& cache, const Mat<T>& dy) {
  const auto& xhat = cache.xhat;
  net.G(name + ".gain").row(0) += dy.cwiseProduct(xhat).colwise().sum();
  net.G(name + ".bias").row(0) += dy.colwise().sum();
  Mat<T> dxhat = dy.array().rowwise() * net.W(name + ".gain").row(0).array();
  const T inv_d = T(1) / static_cast<T>(dy.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Index r = 0; r < dy.rows(); ++r) {
    const T mean_dxhat = dxhat.row(r).sum() * inv_d;
    const T mean_dxhat_xhat = dxhat.row(r).dot(xhat.row(r)) * inv_d;
    dx.row(r) = cache.inv_std(r) * (dxhat.row(r).array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat);
  }
  return dx;
}

template <typename T>
struct AttentionCache {
  Mat<T> xq, xkv;
  Mat<T> q, k, v;
  Mat<T> probs;  // (B*H*Tq) x Tk, before dropout
  Mat<T> drop;   // dropout mask over probs, or empty
  Mat<T> heads;  // concatenated per-head outputs, (B*Tq) x d
};

struct AttentionShape {
  std::size_t batch, tq, tk;
  const std::vector<std::uint8_t>* key_mask;  // batch x tk
  bool causal;
};

template <typename T>
Mat<T> attention_forward(Net<T>& net, const std::string& name, const Mat<T>& xq, const Mat<T>& xkv,
                         const AttentionShape& s, AttentionCache<T>* cache) {
  const Index H = static_cast<Index>(net.config.num_heads);
  const Index d = static_cast<Index>(net.config.d_model);
  const Index dh = d / H;
  const Index B = static_cast<Index>(s.batch), Tq = static_cast<Index>(s.tq), Tk = static_cast<Index>(s.tk);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> q = linear_forward(net, name + ".q", xq);
  Mat<T> k = linear_forward(net, name + ".k", xkv);
  Mat<T> v = linear_forward(net, name + ".v", xkv);
  Mat<T> probs(B * H * Tq, Tk);
  Mat<T> drop = dropout_mask(net, B * H * Tq, Tk);
  Mat<T> heads = Mat<T>::Zero(B * Tq, d);

  for (Index b = 0; b < B; ++b) {
    const std::uint8_t* km = s.key_mask->data() + b * Tk;
    for (Index h = 0; h < H; ++h) {
      auto P = probs.block((b * H + h) * Tq, 0, Tq, Tk);
      if (Tk == 0) continue;
      P.noalias() = q.block(b * Tq, h * dh, Tq, dh) * k.block(b * Tk, h * dh, Tk, dh).transpose();
      for (Index i = 0; i < Tq; ++i) {
        const Index limit = s.causal ? std::min<Index>(i + 1, Tk) : Tk;
        T mx = -std::numeric_limits<T>::infinity();
        for (Index j = 0; j < limit; ++j) {
          if (km[j]) mx = std::max(mx, P(i, j) * scale);
        }
        if (!std::isfinite(mx)) {
          P.row(i).setZero();
          continue;
        }
        T sum = 0;
        for (Index j = 0; j < Tk; ++j) {
          if (j < limit && km[j]) {
            const T e = std::exp(P(i, j) * scale - mx);
            P(i, j) = e;
            sum += e;
          } else {
            P(i, j) = 0;
          }
        }
        P.row(i) /= sum;
      }
      auto out = heads.block(b * Tq, h * dh, Tq, dh);
      if (drop.size()) {
        out.noalias() = P.cwiseProduct(drop.block((b * H + h) * Tq, 0, Tq, Tk)) * v.block(b * Tk, h * dh, Tk, dh);
      } else {
        out.noalias() = P * v.block(b * Tk, h * dh, Tk, dh);
      }
    }
  }
  Mat<T> y = linear_forward(net, name + ".o", heads);
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->drop = std::move(drop);
    cache->heads = std::move(heads);
  }
  return y;
}

// Returns (d xq, d xkv).
template <typename T>
std::pair<Mat<T>, Mat<T>> attention_backward(Net<T>& net, const std::string& name, const AttentionCache<T>& c,
                                             const AttentionShape& s, const Mat<T>& dy) {
  const Index H = static_cast<Index>(net.config.num_heads);
  const Index d = static_cast<Index>(net.config.d_model);
  const Index dh = d / H;
  const Index B = static_cast<Index>(s.batch), Tq = static_cast<Index>(s.tq), Tk = static_cast<Index>(s.tk);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> dheads = linear_backward(net, name + ".o", c.heads, dy);
  Mat<T> dq = Mat<T>::Zero(B * Tq, d);
  Mat<T> dk = Mat<T>::Zero(B * Tk, d);
  Mat<T> dv = Mat<T>::Zero(B * Tk, d);
  if (Tk > 0) {
    for (Index b = 0; b < B; ++b) {
      for (Index h = 0; h < H; ++h) {
        const auto P = c.probs.block((b * H + h) * Tq, 0, Tq, Tk);
        const auto dO = dheads.block(b * Tq, h * dh, Tq, dh);
        const auto V = c.v.block(b * Tk, h * dh, Tk, dh);
        Mat<T> dP = dO * V.transpose();
        if (c.drop.size()) {
          const auto D = c.drop.block((b * H + h) * Tq, 0, Tq, Tk);
          dv.block(b * Tk, h * dh, Tk, dh).noalias() = P.cwiseProduct(D).transpose() * dO;
          dP = dP.cwiseProduct(D);
        } else {
          dv.block(b * Tk, h * dh, Tk, dh).noalias() = P.transpose() * dO;
        }
        const Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = dP.cwiseProduct(P).rowwise().sum();
        Mat<T> dS = (P.array() * (dP.colwise() - rowdot).array()) * scale;
        dq.block(b * Tq, h * dh, Tq, dh).noalias() = dS * c.k.block(b * Tk, h * dh, Tk, dh);
        dk.block(b * Tk, h * dh, Tk, dh).noalias() = dS.transpose() * c.q.block(b * Tq, h * dh, Tq, dh);
      }
    }
  }
  Mat<T> dxq = linear_backward(net, name + ".q", c.xq, dq);
  Mat<T> dxkv = linear_backward(net, name + ".k", c.xkv, dk);
  dxkv += linear_backward(net, name + ".v", c.xkv, dv);
  return {std::move(dxq), std::move(dxkv)};
}

template <typename T>
struct FfnCache {
  Mat<T> x, pre, drop_hidden, hidden;
};

template <typename T>
Mat<T> ffn_forward(Net<T>& net, const std::string& name, const Mat<T>& x, FfnCache<T>* cache) {
  Mat<T> pre = linear_forward(net, name + ".fc1", x);
  Mat<T> drop_hidden = dropout_mask(net, pre.rows(), pre.cols());
  Mat<T> hidden = apply_mask<T>(pre.cwiseMax(T(0)), drop_hidden);
  Mat<T> y = linear_forward(net, name + ".fc2", hidden);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->drop_hidden = std::move(drop_hidden);
    cache->hidden = std::move(hidden);
  }
  return y;
}

template <typename T>
Mat<T> ffn_backward(Net<T>& net, const std::string& name, const FfnCache<T>& c, const Mat<T>& dy) {
  Mat<T> dhidden = linear_backward(net, name + ".fc2", c.hidden, dy);
  if (c.drop_hidden.size()) dhidden = dhidden.cwiseProduct(c.drop_hidden);
  Mat<T> dpre = (c.pre.array() > T(0)).select(dhidden, T(0));
  return linear_backward(net, name + ".fc1", c.x, dpre);
}

// Residual sublayer wrapper: y = Norm(x + Dropout(sublayer)).
template <typename T>
struct ResidualCache {
  Mat<T> drop;
  NormCache<T> norm;
};

template <typename T>
Mat<T> residual_forward(Net<T>& net, const std::string& norm_name, const Mat<T>& x, const Mat<T>& sub,
                        ResidualCache<T>* cache) {
  Mat<T> drop = dropout_mask(net, sub.rows(), sub.cols());
  Mat<T> sum = x + apply_mask(sub, drop);
  Mat<T> y = norm_forward(net, norm_name, sum, cache ? &cache->norm : nullptr);
  if (cache) cache->drop = std::move(drop);
  return y;
}

// Returns (d x, d sublayer).
template <typename T>
std::pair<Mat<T>, Mat<T>> residual_backward(Net<T>& net, const std::string& norm_name, const ResidualCache<T>& c,
                                            const Mat<T>& dy) {
  Mat<T> dsum = norm_backward(net, norm_name, c.norm, dy);
  Mat<T> dsub = apply_mask(dsum, c.drop);
  return {std::move(dsum), std::move(dsub)};
}

template <typename T>
const Mat<T>& positional_table(std::size_t max_positions, std::size_t d) {
  thread_local Mat<T> table;
  if (static_cast<std::size_t>(table.rows()) != max_positions || static_cast<std::size_t>(table.cols()) != d) {
    table.resize(static_cast<Index>(max_positions), static_cast<Index>(d));
    for (std::size_t pos = 0; pos < max_positions; ++pos) {
      for (std::size_t i = 0; i < d; i += 2) {
        const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
        table(static_cast<Index>(pos), static_cast<Index>(i)) = static_cast<T>(std::sin(angle));
        if (i + 1 < d) table(static_cast<Index>(pos), static_cast<Index>(i + 1)) = static_cast<T>(std::cos(angle));
      }
    }
  }
  return table;
}

template <typename T>
struct EmbedCache {
  Mat<T> drop;
};

template <typename T>
Mat<T> embed_forward(Net<T>& net, const TokenId* ids, std::size_t batch, std::size_t len, EmbedCache<T>* cache) {
  const auto& c = net.config;
  const Index d = static_cast<Index>(c.d_model);
  const auto E = net.W("embed.weight");
  const auto& pe = positional_table<T>(c.max_positions, c.d_model);
  const T scale = std::sqrt(static_cast<T>(c.d_model));
  Mat<T> x(static_cast<Index>(batch * len), d);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      const Index r = static_cast<Index>(b * len + t);
      x.row(r) = E.row(ids[b * len + t]) * scale + pe.row(static_cast<Index>(t));
    }
  }
  Mat<T> drop = dropout_mask(net, x.rows(), x.cols());
  x = apply_mask(x, drop);
  if (cache) cache->drop = std::move(drop);
  return x;
}

template <typename T>
void embed_backward(Net<T>& net, const TokenId* ids, std::size_t batch, std::size_t len, const EmbedCache<T>& c,
                    const Mat<T>& dx_in) {
  const Mat<T> dx = apply_mask(dx_in, c.drop);
  auto dE = net.G("embed.weight");
  const T scale = std::sqrt(static_cast<T>(net.config.d_model));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      dE.row(ids[b * len + t]) += dx.row(static_cast<Index>(b * len + t)) * scale;
    }
  }
}

template <typename T>
struct EncoderLayerCache {
  AttentionCache<T> attn;
  ResidualCache<T> attn_res;
  FfnCache<T> ffn;
  ResidualCache<T> ffn_res;
};

template <typename T>
struct DecoderLayerCache {
  AttentionCache<T> self_attn;
  ResidualCache<T> self_res;
  AttentionCache<T> cross_attn;
  ResidualCache<T> cross_res;
  FfnCache<T> ffn;
  ResidualCache<T> ffn_res;
};

template <typename T>
struct Tape {
  EmbedCache<T> enc_embed, dec_embed;
  std::vector<EncoderLayerCache<T>> enc;
  std::vector<DecoderLayerCache<T>> dec;
  Mat<T> dec_out;
};

// Raw inputs for one pass: context (B x S) and decoder input (B x L).
struct PassInput {
  std::size_t batch = 0;
  std::size_t src_len = 0;
  std::size_t dec_len = 0;
  std::vector<TokenId> src;
  std::vector<std::uint8_t> src_mask;
  std::vector<TokenId> dec;
  std::vector<std::uint8_t> dec_mask;
};

void validate_ids(const TransformerConfig& c, const std::vector<TokenId>& ids, std::size_t len) {
  if (len > c.max_positions) throw Error("sequence too long");
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) throw Error("token id out of range");
  }
}

template <typename T>
Mat<T> encoder_forward(Net<T>& net, const PassInput& in, Tape<T>* tape) {
  const auto& c = net.config;
  Mat<T> x = embed_forward(net, in.src.data(), in.batch, in.src_len, tape ? &tape->enc_embed : nullptr);
  const AttentionShape shape{in.batch, in.src_len, in.src_len, &in.src_mask, false};
  if (tape) tape->enc.resize(c.num_layers);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string base = block_name("encoder", l);
    EncoderLayerCache<T>* lc = tape ? &tape->enc[l] : nullptr;
    Mat<T> a = attention_forward(net, base + "self_attn", x, x, shape, lc ? &lc->attn : nullptr);
    x = residual_forward(net, base + "self_attn_norm", x, a, lc ? &lc->attn_res : nullptr);
    Mat<T> f = ffn_forward(net, base + "ffn", x, lc ? &lc->ffn : nullptr);
    x = residual_forward(net, base + "ffn_norm", x, f, lc ? &lc->ffn_res : nullptr);
  }
  return x;
}

template <typename T>
Mat<T> decoder_forward(Net<T>& net, const PassInput& in, const Mat<T>& memory, Tape<T>* tape) {
  const auto& c = net.config;
  Mat<T> y = embed_forward(net, in.dec.data(), in.batch, in.dec_len, tape ? &tape->dec_embed : nullptr);
  const AttentionShape self_shape{in.batch, in.dec_len, in.dec_len, &in.dec_mask, true};
  const AttentionShape cross_shape{in.batch, in.dec_len, in.src_len, &in.src_mask, false};
  if (tape) tape->dec.resize(c.num_layers);
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::string base = block_name("decoder", l);
    DecoderLayerCache<T>* lc = tape ? &tape->dec[l] : nullptr;
    Mat<T> a = attention_forward(net, base + "self_attn", y, y, self_shape, lc ? &lc->self_attn : nullptr);
    y = residual_forward(net, base + "self_attn_norm", y, a, lc ? &lc->self_res : nullptr);
    Mat<T> x = attention_forward(net, base + "cross_attn", y, memory, cross_shape, lc ? &lc->cross_attn : nullptr);
    y = residual_forward(net, base + "cross_attn_norm", y, x, lc ? &lc->cross_res : nullptr);
    Mat<T> f = ffn_forward(net, base + "ffn", y, lc ? &lc->ffn : nullptr);
    y = residual_forward(net, base + "ffn_norm", y, f, lc ? &lc->ffn_res : nullptr);
  }
  return y;
}

template <typename T>
Mat<T> run_forward(Net<T>& net, const PassInput& in, Tape<T>* tape) {
  validate_ids(net.config, in.src, in.src_len);
  validate_ids(net.config, in.dec, in.dec_len);
  Mat<T> memory = encoder_forward(net, in, tape);
  Mat<T> out = decoder_forward(net, in, memory, tape);
  Mat<T> logits = linear_forward(net, "output", out);
  if (tape) tape->dec_out = std::move(out);
  return logits;
}

template <typename T>
void run_backward(Net<T>& net, const PassInput& in, const Tape<T>& tape, const Mat<T>& dlogits) {
  const auto& c = net.config;
  const AttentionShape enc_shape{in.batch, in.src_len, in.src_len, &in.src_mask, false};
  const AttentionShape self_shape{in.batch, in.dec_len, in.dec_len, &in.dec_mask, true};
  const AttentionShape cross_shape{in.batch, in.dec_len, in.src_len, &in.src_mask, false};

  Mat<T> dy = linear_backward(net, "output", tape.dec_out, dlogits);
  Mat<T> dmemory = Mat<T>::Zero(static_cast<Index>(in.batch * in.src_len), static_cast<Index>(c.d_model));
  for (std::size_t l = c.num_layers; l-- > 0;) {
    const std::string base = block_name("decoder", l);
    const auto& lc = tape.dec[l];
    auto [dy_ffn_in, dffn] = residual_backward(net, base + "ffn_norm", lc.ffn_res, dy);
    dy = dy_ffn_in + ffn_backward(net, base + "ffn", lc.ffn, dffn);
    auto [dy_cross_in, dcross] = residual_backward(net, base + "cross_attn_norm", lc.cross_res, dy);
    auto [dq, dkv] = attention_backward(net, base + "cross_attn", lc.cross_attn, cross_shape, dcross);
    dy = dy_cross_in + dq;
    dmemory += dkv;
    auto [dy_self_in, dself] = residual_backward(net, base + "self_attn_norm", lc.self_res, dy);
    auto [dsq, dskv] = attention_backward(net, base + "self_attn", lc.self_attn, self_shape, dself);
    dy = dy_self_in + dsq + dskv;
  }
  embed_backward(net, in.dec.data(), in.batch, in.dec_len, tape.dec_embed, dy);

  Mat<T> dx = std::move(dmemory);
  for (std::size_t l = c.num_layers; l-- > 0;) {
    const std::string base = block_name("encoder", l);
    const auto& lc = tape.enc[l];
    auto [dx_ffn_in, dffn] = residual_backward(net, base + "ffn_norm", lc.ffn_res, dx);
    dx = dx_ffn_in + ffn_backward(net, base + "ffn", lc.ffn, dffn);
    auto [dx_attn_in, dattn] = residual_backward(net, base + "self_attn_norm", lc.attn_res, dx);
    auto [dq, dkv] = attention_backward(net, base + "self_attn", lc.attn, enc_shape, dattn);
    dx = dx_attn_in + dq + dkv;
  }
  embed_backward(net, in.src.data(), in.batch, in.src_len, tape.enc_embed, dx);
}

PassInput pass_from_batch(const Batch& batch) {
  if (batch.target_len < 2) throw Error("empty target");
  PassInput in;
  in.batch = batch.size;
  in.src_len = batch.context_len;
  in.src = batch.context;
  in.src_mask = batch.context_mask;
  in.dec_len = batch.target_len - 1;
  in.dec.resize(in.batch * in.dec_len);
  in.dec_mask.resize(in.batch * in.dec_len);
  for (std::size_t b = 0; b < in.batch; ++b) {
    for (std::size_t t = 0; t < in.dec_len; ++t) {
      in.dec[b * in.dec_len + t] = batch.target[b * batch.target_len + t];
      in.dec_mask[b * in.dec_len + t] = batch.target_mask[b * batch.target_len + t];
    }
  }
  return in;
}

PassInput pass_from_sequence(const TokenIds& context, const TokenIds& prefix) {
  PassInput in;
  in.batch = 1;
  in.src_len = context.size();
  in.src = context;
  in.src_mask.assign(context.size(), 1);
  in.dec_len = prefix.size();
  in.dec = prefix;
  in.dec_mask.assign(prefix.size(), 1);
  return in;
}

template <typename T>
Rng* dropout_rng(Mode mode, Rng* rng) {
  return mode == Mode::Train ? rng : nullptr;
}

}  // namespace

template <typename T>
ModelParameters<T> init_parameters(const TransformerConfig& config, Rng& rng) {
  config.validate();
  ModelParameters<T> p = parameter_layout<T>(config);
  for (auto& [name, t] : p.tensors) {
    if (t.shape.size() != 2 || !ends_with(name, ".weight")) continue;
    const std::size_t fan_in = name == "embed.weight" ? config.d_model : t.shape[0];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.values) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  }
  return p;
}

template <typename T>
Matrix<T> forward(const ModelParameters<T>& params, const TransformerConfig& config, const Batch& batch, Mode mode,
                  Rng* rng) {
  Net<T> net{params, nullptr, config, dropout_rng<T>(mode, rng), config.dropout_rate};
  return run_forward<T>(net, pass_from_batch(batch), nullptr);
}

template <typename T>
Matrix<T> forward(const ModelParameters<T>& params, const TransformerConfig& config, const TokenIds& context_ids,
                  const TokenIds& target_prefix, Mode mode, Rng* rng) {
  Net<T> net{params, nullptr, config, dropout_rng<T>(mode, rng), config.dropout_rate};
  return run_forward<T>(net, pass_from_sequence(context_ids, target_prefix), nullptr);
}

template <typename T>
std::vector<double> log_softmax_row(const T* logits, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) sum += std::exp(static_cast<double>(logits[j]) - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<double>(logits[j]) - lse;
  return out;
}

template <typename T>
LossResult nll_loss(const Matrix<T>& logits, const std::vector<TokenId>& target_ids,
                    const std::vector<std::uint8_t>& mask) {
  const auto rows = static_cast<std::size_t>(logits.rows());
  const auto V = static_cast<std::size_t>(logits.cols());
  if (target_ids.size() != rows || mask.size() != rows) throw Error("nll_loss: shape mismatch");
  LossResult r;
  r.per_token.assign(rows, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!mask[i]) continue;
    const TokenId y = target_ids[i];
    if (y < 0 || static_cast<std::size_t>(y) >= V) throw Error("token id out of range");
    const T* row = logits.data() + i * V;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    r.per_token[i] = mx + std::log(sum) - static_cast<double>(row[y]);
    total += r.per_token[i];
    ++r.count;
  }
  if (r.count == 0) throw Error("empty target");
  r.mean = total / static_cast<double>(r.count);
  return r;
}

std::pair<std::vector<TokenId>, std::vector<std::uint8_t>> shifted_labels(const Batch& batch) {
  if (batch.target_len < 2) throw Error("empty target");
  const std::size_t L = batch.target_len - 1;
  std::vector<TokenId> labels(batch.size * L);
  std::vector<std::uint8_t> mask(batch.size * L);
  for (std::size_t b = 0; b < batch.size; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      labels[b * L + t] = batch.target[b * batch.target_len + t + 1];
      mask[b * L + t] = batch.target_mask[b * batch.target_len + t + 1];
    }
  }
  return {std::move(labels), std::move(mask)};
}

template <typename T>
BackwardResult<T> backward(const ModelParameters<T>& params, const TransformerConfig& config, const Batch& batch,
                           Rng* rng, Mode mode, double loss_scale) {
  BackwardResult<T> result;
  result.grads = params.zeros_like();
  Net<T> net{params, &result.grads, config, dropout_rng<T>(mode, rng), config.dropout_rate};
  const PassInput in = pass_from_batch(batch);
  Tape<T> tape;
  Mat<T> logits = run_forward<T>(net, in, &tape);
  const auto [labels, mask] = shifted_labels(batch);
  const LossResult loss = nll_loss(logits, labels, mask);
  if (!std::isfinite(loss.mean)) throw Error("non-finite loss");
  result.loss = loss.mean;
  result.tokens = loss.count;

  // d mean / d logits = (softmax - onehot) / count on unmasked rows
  const auto V = static_cast<std::size_t>(logits.cols());
  const double coef = loss_scale / static_cast<double>(loss.count);
  for (std::size_t i = 0; i < static_cast<std::size_t>(logits.rows()); ++i) {
    T* row = logits.data() + i * V;
    if (!mask[i]) {
      std::fill(row, row + V, T(0));
      continue;
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (std::size_t j = 0; j < V; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    for (std::size_t j = 0; j < V; ++j) {
      row[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - mx) / sum * coef);
    }
    row[labels[i]] -= static_cast<T>(coef);
  }
  run_backward<T>(net, in, tape, logits);
  return result;
}

template <typename T>
double sequence_logprob(const ModelParameters<T>& params, const TransformerConfig& config, const TokenIds& context_ids,
                        const TokenIds& target_ids) {
  if (target_ids.size() < 2) throw Error("empty target");
  const TokenIds prefix(target_ids.begin(), target_ids.end() - 1);
  const Matrix<T> logits = forward<T>(params, config, context_ids, prefix, Mode::Eval, nullptr);
  double total = 0.0;
  const auto V = static_cast<std::size_t>(logits.cols());
  for (std::size_t t = 0; t < prefix.size(); ++t) {
    const auto lp = log_softmax_row(logits.data() + t * V, V);
    total += lp[static_cast<std::size_t>(target_ids[t + 1])];
  }
  return total;
}

template <typename T>
EncodedContext<T> encode_context(const ModelParameters<T>& params, const TransformerConfig& config,
                                 const TokenIds& context_ids) {
  Net<T> net{params, nullptr, config, nullptr, 0.0};
  PassInput in = pass_from_sequence(context_ids, {});
  validate_ids(config, in.src, in.src_len);
  EncodedContext<T> out;
  out.memory = encoder_forward<T>(net, in, nullptr);
  out.mask = in.src_mask;
  return out;
}

template <typename T>
std::vector<std::vector<double>> next_token_logprobs(const ModelParameters<T>& params,
                                                     const TransformerConfig& config,
                                                     const EncodedContext<T>& context,
                                                     const std::vector<TokenIds>& prefixes) {
  std::vector<std::vector<double>> out;
  if (prefixes.empty()) return out;
  Net<T> net{params, nullptr, config, nullptr, 0.0};
  PassInput in;
  in.batch = prefixes.size();
  in.src_len = context.mask.size();
  for (const auto& p : prefixes) {
    if (p.empty()) throw Error("empty decoder prefix");
    in.dec_len = std::max(in.dec_len, p.size());
  }
  in.dec.assign(in.batch * in.dec_len, Vocabulary::pad());
  in.dec_mask.assign(in.batch * in.dec_len, 0);
  for (std::size_t b = 0; b < in.batch; ++b) {
    std::copy(prefixes[b].begin(), prefixes[b].end(), in.dec.begin() + static_cast<std::ptrdiff_t>(b * in.dec_len));
    std::fill_n(in.dec_mask.begin() + static_cast<std::ptrdiff_t>(b * in.dec_len), prefixes[b].size(), 1);
    in.src_mask.insert(in.src_mask.end(), context.mask.begin(), context.mask.end());
  }
  validate_ids(config, in.dec, in.dec_len);
  Mat<T> memory(static_cast<Index>(in.batch * in.src_len), context.memory.cols());
  for (std::size_t b = 0; b < in.batch; ++b) {
    memory.middleRows(static_cast<Index>(b * in.src_len), static_cast<Index>(in.src_len)) = context.memory;
  }
  const Mat<T> hidden = decoder_forward<T>(net, in, memory, nullptr);
  Mat<T> last(static_cast<Index>(in.batch), hidden.cols());
  for (std::size_t b = 0; b < in.batch; ++b) {
    last.row(static_cast<Index>(b)) = hidden.row(static_cast<Index>(b * in.dec_len + prefixes[b].size() - 1));
  }
  const Mat<T> logits = linear_forward<T>(net, "output", last);
  const auto V = static_cast<std::size_t>(logits.cols());
  for (std::size_t b = 0; b < in.batch; ++b) out.push_back(log_softmax_row(logits.data() + b * V, V));
  return out;
}

template <typename T>
NllTotal corpus_nll(const ModelParameters<T>& params, const TransformerConfig& config,
                    const std::vector<SequencePair>& pairs, std::size_t batch_size) {
  NllTotal out;
  for (std::size_t i = 0; i < pairs.size(); i += batch_size) {
    const Batch batch = make_batch(pairs, i, std::min(pairs.size(), i + batch_size));
    const Matrix<T> logits = forward<T>(params, config, batch, Mode::Eval, nullptr);
    const auto [labels, mask] = shifted_labels(batch);
    const LossResult loss = nll_loss(logits, labels, mask);
    for (double v : loss.per_token) out.total += v;
    out.tokens += loss.count;
  }
  return out;
}

#define FGL_INSTANTIATE_MODEL(T)                                                                                  \
  template struct NamedTensors<T>;                                                                               \
  template ModelParameters<T> init_parameters<T>(const TransformerConfig&, Rng&);                                \
  template Matrix<T> forward<T>(const ModelParameters<T>&, const TransformerConfig&, const Batch&, Mode, Rng*);   \
  template Matrix<T> forward<T>(const ModelParameters<T>&, const TransformerConfig&, const TokenIds&,            \
                                const TokenIds&, Mode, Rng*);                                                    \
  template LossResult nll_loss<T>(const Matrix<T>&, const std::vector<TokenId>&, const std::vector<std::uint8_t>&); \
  template BackwardResult<T> backward<T>(const ModelParameters<T>&, const TransformerConfig&, const Batch&, Rng*, \
                                         Mode, double);                                                          \
  template double sequence_logprob<T>(const ModelParameters<T>&, const TransformerConfig&, const TokenIds&,      \
                                      const TokenIds&);                                                          \
  template EncodedContext<T> encode_context<T>(const ModelParameters<T>&, const TransformerConfig&,              \
                                               const TokenIds&);                                                 \
  template std::vector<std::vector<double>> next_token_logprobs<T>(                                              \
      const ModelParameters<T>&, const TransformerConfig&, const EncodedContext<T>&, const std::vector<TokenIds>&); \
  template std::vector<double> log_softmax_row<T>(const T*, std::size_t);                                      \
  template NllTotal corpus_nll<T>(const ModelParameters<T>&, const TransformerConfig&,                           \
                                  const std::vector<SequencePair>&, std::size_t);

FGL_INSTANTIATE_MODEL(float)
FGL_INSTANTIATE_MODEL(double)

#undef FGL_INSTANTIATE_MODEL

}  // namespace fgl
