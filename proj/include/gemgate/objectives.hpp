#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "gemgate/diff.hpp"
#include "gemgate/errors.hpp"
#include "gemgate/fusion.hpp"

namespace gemgate::objectives {

using diff::Tape;
using diff::Var;

// Maps a cosine-range similarity into a usable probability:
// p = (R+1)/2 clamped into [1e-7, 1-1e-7]. The clamp region carries zero
// gradient.
inline Var prob_from_similarity(Var r) {
  const double rv = r.value();
  if (!(rv >= -1.0 - 1e-9 && rv <= 1.0 + 1e-9))
    throw DomainError("prob_from_similarity: R outside [-1,1]");
  constexpr double kLo = 1e-7, kHi = 1.0 - 1e-7;
  const double raw = (rv + 1.0) / 2.0;
  const double p = raw < kLo ? kLo : (raw > kHi ? kHi : raw);
  const bool interior = raw > kLo && raw < kHi;
  Var parents[1] = {r};
  double partials[1] = {interior ? 0.5 : 0.0};
  return diff::detail::tape_of(r).make_node(p, parents, partials);
}

// Knowledge-triple loss: mean over (m, ti) of
//   gate_ti * bce( p(R(v_m, a_ti)), y_mti )
// where a_ti is the attention-reweighed language feature. Gated-out triples
// (gate value 0) contribute exactly zero forward; the gate node's recorded
// partials carry the surrogate backward.
inline Var ood_loss(const fusion::TokenSeq& patches, const fusion::TokenSeq& triples,
                    std::span<const Var> gates, const fusion::AttentionWeights& weights,
                    std::span<const int> labels) {
  if (patches.empty() || triples.empty()) throw DimensionError("ood_loss: empty features");
  if (gates.size() != triples.size() || labels.size() != patches.size() * triples.size())
    throw DimensionError("ood_loss: decisions/labels misaligned with features");
  if (weights.patches != patches.size() || weights.concepts != triples.size())
    throw DimensionError("ood_loss: attention weights misaligned");
  std::vector<Var> terms;
  terms.reserve(labels.size());
  for (std::size_t ti = 0; ti < triples.size(); ++ti) {
    const std::vector<Var> a = fusion::reweigh(triples[ti], weights, ti);
    for (std::size_t m = 0; m < patches.size(); ++m) {
      const Var r = fusion::similarity(patches[m], a);
      const Var cost = diff::bce(prob_from_similarity(r), labels[m * triples.size() + ti]);
      terms.push_back(gates[ti] * cost);
    }
  }
  return diff::mean(terms);
}

// Image-text matching: mean bce over all (patch, caption-feature) pairs plus
// the knowledge loss evaluated on the same feature view. Negative captions
// are appended by the caller (batch sampling is the trainer's job); labels
// are row-major patches x captions.
inline Var itm_loss(const fusion::TokenSeq& patches, const fusion::TokenSeq& captions,
                    std::span<const int> labels, Var l_ood) {
  if (patches.empty() || captions.empty()) throw DimensionError("itm_loss: empty features");
  if (labels.size() != patches.size() * captions.size())
    throw DimensionError("itm_loss: labels misaligned");
  std::vector<Var> terms;
  terms.reserve(labels.size());
  for (std::size_t m = 0; m < patches.size(); ++m) {
    for (std::size_t n = 0; n < captions.size(); ++n) {
      const Var r = fusion::similarity(patches[m], captions[n]);
      terms.push_back(diff::bce(prob_from_similarity(r), labels[m * captions.size() + n]));
    }
  }
  return diff::mean(terms) + l_ood;
}

// One masked token position: the fused feature of the triple holding it and
// the candidate index of the original token.
struct MaskedPosition {
  std::size_t triple_index = 0;
  std::size_t label = 0;
};

// Masked-token prediction: softmax over the candidate table of cosine
// similarities between the fused feature at the masked position and each
// candidate vector, scored by cross-entropy; plus the knowledge loss on the
// masked view. Zero masked positions fall back to the knowledge loss alone
// and set *no_mask_warning.
inline Var mlm_loss(const fusion::TokenSeq& fused_triples,
                    std::span<const MaskedPosition> positions,
                    const fusion::TokenSeq& candidates, Var l_ood,
                    bool* no_mask_warning = nullptr) {
  if (no_mask_warning) *no_mask_warning = positions.empty();
  if (positions.empty()) return l_ood;
  if (candidates.empty()) throw DimensionError("mlm_loss: empty candidate table");
  std::vector<Var> terms;
  terms.reserve(positions.size());
  std::vector<Var> logits(candidates.size());
  for (const MaskedPosition& pos : positions) {
    if (pos.triple_index >= fused_triples.size() || pos.label >= candidates.size())
      throw DimensionError("mlm_loss: masked position out of range");
    const auto& feature = fused_triples[pos.triple_index];
    for (std::size_t c = 0; c < candidates.size(); ++c)
      logits[c] = fusion::similarity(feature, candidates[c]);
    terms.push_back(diff::logsumexp(logits) - logits[pos.label]);
  }
  return diff::mean(terms) + l_ood;
}

struct LossBreakdown {
  double l_ood = 0.0;
  double l_itm = 0.0;
  double l_mlm = 0.0;
  double total = 0.0;
  double lambda3 = 1.0;
};

// L = L_itm + lambda3 * L_mlm
inline Var total_loss(Var l_itm, Var l_mlm, double lambda3) {
  if (!(lambda3 > 0.0)) throw ConfigError("total_loss: lambda3 must be positive");
  return l_itm + affine(lambda3, l_mlm, 0.0);
}

inline LossBreakdown breakdown(double l_ood, double l_itm, double l_mlm, double lambda3) {
  if (!(lambda3 > 0.0)) throw ConfigError("total_loss: lambda3 must be positive");
  return LossBreakdown{l_ood, l_itm, l_mlm, l_itm + lambda3 * l_mlm, lambda3};
}

}  // namespace gemgate::objectives
