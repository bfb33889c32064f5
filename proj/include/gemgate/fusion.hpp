#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "gemgate/diff.hpp"
#include "gemgate/errors.hpp"

namespace gemgate::fusion {

using diff::Tape;
using diff::Var;

using TokenSeq = std::vector<std::vector<Var>>;

inline Var cosine(std::span<const Var> u, std::span<const Var> v) {
  if (u.size() != v.size() || u.empty()) throw DimensionError("cosine: size mismatch or empty");
  const Var nu = diff::l2norm(u);
  const Var nv = diff::l2norm(v);
  if (!(nu.value() > 0.0) || !(nv.value() > 0.0))
    throw DomainError("cosine: zero-norm input");
  return diff::div_positive(diff::dot(u, v), nu * nv);
}

// Pairwise signed score of an image patch against a language feature:
// gelu(cosine). The gelu squashes [-1,1] into roughly [-0.159, 0.841] while
// keeping the sign structure.
inline Var signed_score(std::span<const Var> v, std::span<const Var> l) {
  return diff::gelu(cosine(v, l));
}

// Row-stochastic attention of patches over concepts. Row m is
// softmax(lambda2 * s_m).
struct AttentionWeights {
  std::size_t patches = 0;   // rows (P)
  std::size_t concepts = 0;  // cols (T)
  std::vector<Var> alpha;    // row-major P x T
  double lambda2 = 1.0;

  Var at(std::size_t m, std::size_t ti) const { return alpha[m * concepts + ti]; }
};

inline AttentionWeights attention_weights(std::span<const Var> scores, std::size_t patches,
                                          std::size_t concepts, double lambda2) {
  if (patches == 0 || concepts == 0 || scores.size() != patches * concepts)
    throw DimensionError("attention_weights: empty or mis-shaped score matrix");
  if (!(lambda2 >= 1.0)) throw ConfigError("attention_weights: lambda2 must be >= 1");
  AttentionWeights w;
  w.patches = patches;
  w.concepts = concepts;
  w.lambda2 = lambda2;
  w.alpha.reserve(scores.size());
  std::vector<Var> row(concepts);
  for (std::size_t m = 0; m < patches; ++m) {
    for (std::size_t ti = 0; ti < concepts; ++ti) row[ti] = lambda2 * scores[m * concepts + ti];
    std::vector<Var> soft = diff::softmax(row);
    w.alpha.insert(w.alpha.end(), soft.begin(), soft.end());
  }
  return w;
}

// a_ti = (sum_m alpha_m,ti) * l_ti
inline std::vector<Var> reweigh(std::span<const Var> l_ti, const AttentionWeights& weights,
                                std::size_t ti) {
  if (ti >= weights.concepts) throw DimensionError("reweigh: concept index out of range");
  std::vector<Var> column;
  column.reserve(weights.patches);
  for (std::size_t m = 0; m < weights.patches; ++m) column.push_back(weights.at(m, ti));
  const Var factor = diff::sum(column);
  std::vector<Var> out;
  out.reserve(l_ti.size());
  for (const Var& x : l_ti) out.push_back(factor * x);
  return out;
}

// R: cosine of a patch feature and a reweighed language feature.
inline Var similarity(std::span<const Var> v_m, std::span<const Var> a) { return cosine(v_m, a); }

// ---------------------------------------------------------------------------
// Cross-attention unit. Q/K/V projections are d x d and partitioned across
// heads; logits are scaled by 1/sqrt(d_head). The feed-forward part (two
// affine maps with a gelu between) is optional: ffn_dim == 0 skips it, which
// is the bare attention map.

struct FusionBlockParams {
  std::size_t dim = 0;
  std::size_t heads = 1;
  std::size_t ffn_dim = 0;
  std::vector<Var> wq, wk, wv;  // d x d row-major
  std::vector<Var> w1, b1;      // ffn_dim x d, ffn_dim
  std::vector<Var> w2, b2;      // d x ffn_dim, d

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw ConfigError("fusion block: head count must divide dim");
    if (wq.size() != dim * dim || wk.size() != dim * dim || wv.size() != dim * dim)
      throw DimensionError("fusion block: projection shape mismatch");
    if (ffn_dim > 0 && (w1.size() != ffn_dim * dim || b1.size() != ffn_dim ||
                        w2.size() != dim * ffn_dim || b2.size() != dim))
      throw DimensionError("fusion block: feed-forward shape mismatch");
  }
};

namespace detail {
inline void check_tokens(const TokenSeq& seq, std::size_t dim, const char* what) {
  for (const auto& t : seq)
    if (t.size() != dim) throw DimensionError(std::string(what) + ": token dim mismatch");
}
}  // namespace detail

// Multi-head attention only: per head softmax(q k^T / sqrt(d_head)) v, heads
// concatenated. keys and values are parallel sequences.
inline TokenSeq attention_core(const TokenSeq& queries, const TokenSeq& keys,
                               const TokenSeq& values, const FusionBlockParams& p) {
  p.validate();
  if (keys.size() != values.size() || keys.empty())
    throw DimensionError("attention_core: key/value size mismatch or empty");
  detail::check_tokens(queries, p.dim, "queries");
  detail::check_tokens(keys, p.dim, "keys");
  detail::check_tokens(values, p.dim, "values");
  const std::size_t dh = p.dim / p.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<std::vector<Var>> pk(keys.size()), pv(values.size());
  for (std::size_t j = 0; j < keys.size(); ++j) {
    pk[j] = diff::matvec(p.wk, p.dim, p.dim, keys[j]);
    pv[j] = diff::matvec(p.wv, p.dim, p.dim, values[j]);
  }

  TokenSeq out;
  out.reserve(queries.size());
  std::vector<Var> logits(keys.size());
  std::vector<Var> column(keys.size());
  for (const auto& query : queries) {
    const std::vector<Var> q = diff::matvec(p.wq, p.dim, p.dim, query);
    std::vector<Var> mixed(p.dim, Var{});
    for (std::size_t h = 0; h < p.heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t j = 0; j < keys.size(); ++j) {
        logits[j] = scale * diff::dot(std::span<const Var>(q).subspan(off, dh),
                                      std::span<const Var>(pk[j]).subspan(off, dh));
      }
      const std::vector<Var> att = diff::softmax(logits);
      for (std::size_t c = 0; c < dh; ++c) {
        for (std::size_t j = 0; j < keys.size(); ++j) column[j] = pv[j][off + c];
        mixed[off + c] = diff::dot(att, column);
      }
    }
    out.push_back(std::move(mixed));
  }
  return out;
}

inline std::vector<Var> feed_forward(std::span<const Var> x, const FusionBlockParams& p) {
  std::vector<Var> h = diff::matvec(p.w1, p.ffn_dim, p.dim, x);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = diff::gelu(h[i] + p.b1[i]);
  std::vector<Var> y = diff::matvec(p.w2, p.dim, p.ffn_dim, h);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] + p.b2[i];
  return y;
}

// Attention followed by the optional feed-forward map. Both modality
// directions are this same function with the streams swapped.
inline TokenSeq cross_attention(const TokenSeq& queries, const TokenSeq& keys,
                                const TokenSeq& values, const FusionBlockParams& p) {
  TokenSeq out = attention_core(queries, keys, values, p);
  if (p.ffn_dim == 0) return out;
  for (auto& token : out) token = feed_forward(token, p);
  return out;
}

// ---------------------------------------------------------------------------
// Merged-attention encoder: per block, every token of each stream queries
// the concatenation of both streams, with residual connections and layer
// norm around the attention and feed-forward maps. Weights are shared
// between the two directions.

struct LayerNormParams {
  std::vector<Var> gain, bias;  // d each
};

inline std::vector<Var> layer_norm(std::span<const Var> x, const LayerNormParams& p,
                                   double eps = 1e-5) {
  if (x.empty() || p.gain.size() != x.size() || p.bias.size() != x.size())
    throw DimensionError("layer_norm: shape mismatch");
  const Var m = diff::mean(x);
  std::vector<Var> centered;
  centered.reserve(x.size());
  for (const Var& xi : x) centered.push_back(xi - m);
  const Var var = diff::dot(centered, centered) / static_cast<double>(x.size());
  // 1/sqrt(var + eps) composed from primitives; var + eps > 0 always.
  const Var rstd = diff::exp(-0.5 * diff::log(var + eps));
  std::vector<Var> out;
  out.reserve(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.push_back(p.gain[i] * (centered[i] * rstd) + p.bias[i]);
  return out;
}

struct EncoderBlockParams {
  FusionBlockParams attn;  // ffn weights live here as well
  LayerNormParams ln_attn, ln_ffn;
};

struct FusedStreams {
  TokenSeq image;
  TokenSeq language;
};

namespace detail {
inline TokenSeq block_stream(const TokenSeq& stream, const TokenSeq& merged_kv,
                             const EncoderBlockParams& p) {
  TokenSeq att = attention_core(stream, merged_kv, merged_kv, p.attn);
  TokenSeq out;
  out.reserve(stream.size());
  for (std::size_t t = 0; t < stream.size(); ++t) {
    std::vector<Var> h(stream[t].size(), Var{});
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = stream[t][i] + att[t][i];
    h = layer_norm(h, p.ln_attn);
    if (p.attn.ffn_dim > 0) {
      const std::vector<Var> f = feed_forward(h, p.attn);
      for (std::size_t i = 0; i < h.size(); ++i) h[i] = h[i] + f[i];
      h = layer_norm(h, p.ln_ffn);
    }
    out.push_back(std::move(h));
  }
  return out;
}
}  // namespace detail

// Runs the full stack. Each block updates both streams from the previous
// block's outputs; the key/value set is their concatenation.
inline FusedStreams fuse(const TokenSeq& image, const TokenSeq& language,
                         const std::vector<EncoderBlockParams>& blocks) {
  FusedStreams s{image, language};
  for (const EncoderBlockParams& block : blocks) {
    TokenSeq merged = s.image;
    merged.insert(merged.end(), s.language.begin(), s.language.end());
    TokenSeq new_image = detail::block_stream(s.image, merged, block);
    TokenSeq new_language = detail::block_stream(s.language, merged, block);
    s.image = std::move(new_image);
    s.language = std::move(new_language);
  }
  return s;
}

}  // namespace gemgate::fusion
