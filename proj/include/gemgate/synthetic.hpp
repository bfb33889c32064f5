#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gemgate/data.hpp"
#include "gemgate/errors.hpp"
#include "gemgate/linalg.hpp"
#include "gemgate/rng.hpp"

namespace gemgate::harness {

// Generator for desk-scale stand-in data: each sample is one "image" whose
// patch features and seed-triple tokens come from a ground-truth concept
// cluster; retrieved (external) triples are clean with probability
// 1 - noise_rate and otherwise drawn from a mean-shifted token pool, labeled
// y = 0.
struct SyntheticConfig {
  std::size_t dim = 12;
  std::size_t patches = 3;  // P per image
  std::size_t clusters = 3;
  std::size_t samples = 96;
  std::size_t n_id = 3;       // seed triples per caption
  std::size_t n_external = 5; // retrieved triples per caption
  double noise_rate = 0.3;    // fraction of external triples drawn off-distribution
  double shift = 10.0;        // sigma-multiple for the off-distribution pools
  double sigma = 0.25;        // within-cluster standard deviation
  double center_scale = 2.5;  // cluster center radius
  std::size_t concepts_per_cluster = 12;
  std::size_t relations = 4;
  std::uint64_t seed = 1;

  void validate() const {
    if (dim == 0 || clusters == 0 || samples == 0 || patches == 0)
      throw ConfigError("synthetic config: dim/clusters/samples/patches must be positive");
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0))
      throw ConfigError("synthetic config: noise_rate must be in [0,1]");
    if (!(sigma > 0.0) || !(center_scale > 0.0) || !(shift >= 0.0))
      throw ConfigError("synthetic config: sigma/center_scale must be positive, shift >= 0");
    if (dim < 2 * clusters + 1)
      throw ConfigError(
          "synthetic config: dim must be >= 2*clusters + 1 (orthogonal patch/token centers "
          "plus a shift direction)");
    if (concepts_per_cluster < 2 || relations == 0)
      throw ConfigError("synthetic config: need >= 2 concepts per cluster and >= 1 relation");
  }
};

namespace detail {
// Random orthonormal frame via Gram-Schmidt on Gaussian draws.
inline std::vector<Vec> orthonormal_frame(std::size_t dim, Rng& rng) {
  std::vector<Vec> frame;
  frame.reserve(dim);
  while (frame.size() < dim) {
    Vec v(dim);
    for (double& x : v) x = rng.normal();
    for (const Vec& u : frame) axpy(-dot(v, u), u, v);
    const double n = norm2(v);
    if (n < 1e-8) continue;
    for (double& x : v) x /= n;
    frame.push_back(std::move(v));
  }
  return frame;
}

inline Vec draw_around(const Vec& center, double sigma, Rng& rng) {
  Vec v(center.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = center[i] + sigma * rng.normal();
  return v;
}
}  // namespace detail

inline Dataset gen_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);

  // Patch clusters and token clusters sit on disjoint orthogonal directions:
  // the cross-modal alignment is something training has to learn, while the
  // token-space cluster structure (which the density fit sees) is present
  // from the start. Off-distribution pools shift along further orthogonal
  // directions, so they are at least shift*sigma from every token center.
  const std::vector<Vec> frame = detail::orthonormal_frame(cfg.dim, rng);
  std::vector<Vec> patch_centers(cfg.clusters);
  std::vector<Vec> token_centers(cfg.clusters);
  std::vector<Vec> ood_centers(cfg.clusters);
  const std::size_t spare = cfg.dim - 2 * cfg.clusters;
  for (std::size_t c = 0; c < cfg.clusters; ++c) {
    patch_centers[c] = frame[c];
    for (double& x : patch_centers[c]) x *= cfg.center_scale;
    token_centers[c] = frame[cfg.clusters + c];
    for (double& x : token_centers[c]) x *= cfg.center_scale;
    const Vec& dir = frame[2 * cfg.clusters + (c % spare)];
    ood_centers[c] = token_centers[c];
    axpy(cfg.shift * cfg.sigma, dir, ood_centers[c]);
  }

  Dataset ds;
  ds.dim = cfg.dim;
  ds.clusters = cfg.clusters;
  ds.table = kg::ConceptEmbeddingTable(cfg.dim);

  std::vector<std::vector<std::string>> cluster_tokens(cfg.clusters);
  std::vector<std::vector<std::string>> ood_tokens(cfg.clusters);
  for (std::size_t c = 0; c < cfg.clusters; ++c) {
    for (std::size_t j = 0; j < cfg.concepts_per_cluster; ++j) {
      const std::string tok = "c" + std::to_string(c) + "_w" + std::to_string(j);
      ds.table.set(tok, detail::draw_around(token_centers[c], cfg.sigma, rng));
      cluster_tokens[c].push_back(tok);
    }
    for (std::size_t j = 0; j < cfg.concepts_per_cluster; ++j) {
      const std::string tok = "c" + std::to_string(c) + "_x" + std::to_string(j);
      ds.table.set(tok, detail::draw_around(ood_centers[c], cfg.sigma, rng));
      ood_tokens[c].push_back(tok);
    }
  }
  std::vector<std::string> relation_tokens;
  const Vec origin(cfg.dim, 0.0);
  for (std::size_t r = 0; r < cfg.relations; ++r) {
    const std::string tok = "rel" + std::to_string(r);
    ds.table.set(tok, detail::draw_around(origin, cfg.sigma, rng));
    relation_tokens.push_back(tok);
  }

  const auto make_triple = [&](const std::vector<std::string>& pool, kg::TripleSource source,
                               int label) {
    const std::size_t h = static_cast<std::size_t>(rng.uniform_int(pool.size()));
    std::size_t t = static_cast<std::size_t>(rng.uniform_int(pool.size() - 1));
    if (t >= h) ++t;
    const std::size_t r = static_cast<std::size_t>(rng.uniform_int(relation_tokens.size()));
    return TripleRecord{kg::KnowledgeTriple{pool[h], relation_tokens[r], pool[t], 1.0, source},
                        label};
  };

  // Retrieval noise: real concepts from two different unrelated clusters
  // bridged by a shared relation. The pooled feature lands between token
  // clusters, where per-cluster components see an outlier but a single
  // pooled Gaussian does not; the concepts themselves are tokens clean
  // captions elsewhere depend on. With fewer than three clusters there is no
  // "between", so the triple mixes a foreign concept with that cluster's
  // off-distribution pool instead.
  const auto make_noisy_triple = [&](std::size_t own_cluster) {
    const std::size_t r = static_cast<std::size_t>(rng.uniform_int(relation_tokens.size()));
    if (cfg.clusters >= 3) {
      std::size_t first = static_cast<std::size_t>(rng.uniform_int(cfg.clusters - 1));
      if (first >= own_cluster) ++first;
      std::size_t second = static_cast<std::size_t>(rng.uniform_int(cfg.clusters - 2));
      for (std::size_t skip : {std::min(own_cluster, first), std::max(own_cluster, first)})
        if (second >= skip) ++second;
      const auto& heads = cluster_tokens[first];
      const auto& tails = cluster_tokens[second];
      return TripleRecord{
          kg::KnowledgeTriple{heads[rng.uniform_int(heads.size())], relation_tokens[r],
                              tails[rng.uniform_int(tails.size())], 1.0,
                              kg::TripleSource::kExternal},
          0};
    }
    std::size_t other = own_cluster;
    if (cfg.clusters > 1) {
      other = static_cast<std::size_t>(rng.uniform_int(cfg.clusters - 1));
      if (other >= own_cluster) ++other;
    }
    const auto& heads = cluster_tokens[other];
    const auto& tails = ood_tokens[other];
    return TripleRecord{
        kg::KnowledgeTriple{heads[rng.uniform_int(heads.size())], relation_tokens[r],
                            tails[rng.uniform_int(tails.size())], 1.0,
                            kg::TripleSource::kExternal},
        0};
  };

  ds.samples.reserve(cfg.samples);
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    TrainSample sample;
    sample.id = static_cast<int>(s);
    const std::size_t c = s % cfg.clusters;
    sample.cluster = static_cast<int>(c);
    for (std::size_t p = 0; p < cfg.patches; ++p)
      sample.patches.push_back(detail::draw_around(patch_centers[c], cfg.sigma, rng));
    for (std::size_t i = 0; i < cfg.n_id; ++i)
      sample.triples.push_back(make_triple(cluster_tokens[c], kg::TripleSource::kId, 1));
    for (std::size_t i = 0; i < cfg.n_external; ++i) {
      const bool noisy = rng.uniform01() < cfg.noise_rate;
      sample.triples.push_back(noisy ? make_noisy_triple(c)
                                     : make_triple(cluster_tokens[c],
                                                   kg::TripleSource::kExternal, 1));
    }
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

}  // namespace gemgate::harness
