#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gemgate/csv.hpp"
#include "gemgate/data.hpp"
#include "gemgate/diff.hpp"
#include "gemgate/errors.hpp"
#include "gemgate/fusion.hpp"
#include "gemgate/gmm.hpp"
#include "gemgate/objectives.hpp"
#include "gemgate/ood.hpp"
#include "gemgate/rng.hpp"

namespace gemgate::harness {

struct TrainConfig {
  std::size_t epochs = 6;
  double learning_rate = 1.0;
  std::size_t batch_size = 8;

  std::size_t k = 3;  // mixture components
  // lambda1: NaN means "calibrate to the lambda1_percentile quantile of the
  // fitting scores" (the default rule).
  double lambda1 = std::numeric_limits<double>::quiet_NaN();
  double lambda1_percentile = 0.05;
  double lambda2 = 2.0;
  double lambda3 = 1.0;
  std::size_t em_max_iters = 25;  // T
  double em_tol = 1e-6;
  double eps_cov = gmm::kDefaultEpsCov;
  gmm::InitStrategy em_init = gmm::InitStrategy::kKmeansLike;

  std::size_t fusion_depth = 2;
  std::size_t fusion_heads = 2;
  std::size_t ffn_mult = 2;  // ffn_dim = ffn_mult * dim; 0 disables the ffn
  double init_scale = 1.0;

  ood::GateSurrogate surrogate = ood::GateSurrogate::kRelu;
  double gate_temperature = 1.0;
  double mask_rate = 0.15;
  double corruption_rate = 0.0;  // triple-blanking applied before training

  bool use_knowledge = true;  // false: external triples dropped entirely
  bool use_ood = true;        // false: every gate forced to 1
  // Knowledge-loss labels. Retrieved triples are trained as matching
  // (y = 1): the pipeline cannot know which retrieved facts are noise, which
  // is what the gate is for. true uses the generator's ground-truth labels
  // instead.
  bool oracle_labels = false;
  bool route_gated_to_negatives = false;
  // When false (default) the gate multiplies loss terms as a detached
  // constant: filtering only, gradients flow through the retained terms.
  // When true the gate node carries the surrogate derivative, so the loss
  // can also move features across the threshold (the smooth-gate training
  // mode and the gradient-check configuration).
  bool gate_gradient = false;
  bool interaction_mode = false;  // means become trainable (fixed point still frozen)
  bool gate_vision = false;       // score patches against their own mixture
  std::size_t max_external = std::numeric_limits<std::size_t>::max();

  std::uint64_t seed = 1;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw ConfigError("train config: epochs/batch_size >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("train config: learning rate must be >= 0");
    if (k == 0) throw ConfigError("train config: k must be >= 1");
    if (!(lambda2 >= 1.0)) throw ConfigError("train config: lambda2 must be >= 1");
    if (!(lambda3 > 0.0)) throw ConfigError("train config: lambda3 must be positive");
    if (em_max_iters == 0) throw ConfigError("train config: em_max_iters must be >= 1");
    if (!(mask_rate >= 0.0 && mask_rate <= 1.0))
      throw ConfigError("train config: mask_rate must be in [0,1]");
    if (!(corruption_rate >= 0.0 && corruption_rate <= 1.0))
      throw ConfigError("train config: corruption_rate must be in [0,1]");
    if (fusion_depth == 0 || fusion_heads == 0)
      throw ConfigError("train config: fusion depth/heads must be >= 1");
    if (surrogate == ood::GateSurrogate::kSigmoid && !(gate_temperature > 0.0))
      throw ConfigError("train config: gate temperature must be positive");
  }
};

struct StepTrace {
  std::size_t step = 0;
  double l_itm = 0.0, l_mlm = 0.0, l_ood = 0.0, total = 0.0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_total = 0.0;
  double accuracy = 0.0;
  double gate_pass_all = 0.0;
  double gate_pass_external = 0.0;
};

struct RunReport {
  std::vector<StepTrace> steps;
  std::vector<EpochStats> epochs;
  // Hard indicators and scores for every triple in dataset order, computed
  // with the final parameters; the robustness protocol compares these across
  // runs.
  std::vector<std::uint8_t> final_gates;
  std::vector<double> final_scores;
  double final_accuracy = 0.0;
  bool itm_negative_fallback = false;
  bool mlm_no_mask = false;
  std::size_t gmm_reinit_events = 0;
  double wall_seconds = 0.0;  // never exported to CSV
};

struct FusionLayout {
  std::size_t dim = 0, heads = 1, ffn_dim = 0, depth = 1;
  std::size_t block_size() const {
    return 3 * dim * dim + (ffn_dim > 0 ? 2 * ffn_dim * dim + ffn_dim + dim : 0) + 4 * dim;
  }
  std::size_t total() const { return depth * block_size(); }
};

// Everything needed to rerun the model forward after training.
struct ModelState {
  std::size_t dim = 0;
  std::vector<std::string> vocab;
  std::map<std::string, std::size_t> vocab_index;
  std::vector<double> params;  // [table | mask | fusion | mu?]
  std::size_t table_offset = 0, mask_offset = 0, fusion_offset = 0, mu_offset = 0;
  FusionLayout layout;
  gmm::GmmParams mixture;
  double lambda1 = 0.0;
  TrainConfig config;
};

struct TrainOutcome {
  RunReport report;
  ModelState model;
};

// ---------------------------------------------------------------------------

namespace detail {

using diff::Tape;
using diff::Var;

struct TripleTokens {
  int head = -1, rel = -1, tail = -1;  // vocab index, -1 = unknown token
};

// Builds fusion block parameter views over the flat parameter var array.
inline std::vector<fusion::EncoderBlockParams> fusion_views(std::span<const Var> pv,
                                                            std::size_t fusion_offset,
                                                            const FusionLayout& layout) {
  std::vector<fusion::EncoderBlockParams> blocks;
  blocks.reserve(layout.depth);
  std::size_t at = fusion_offset;
  const auto take = [&](std::size_t n) {
    std::vector<Var> out(pv.begin() + static_cast<std::ptrdiff_t>(at),
                         pv.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
    return out;
  };
  const std::size_t d = layout.dim, m = layout.ffn_dim;
  for (std::size_t b = 0; b < layout.depth; ++b) {
    fusion::EncoderBlockParams block;
    block.attn.dim = d;
    block.attn.heads = layout.heads;
    block.attn.ffn_dim = m;
    block.attn.wq = take(d * d);
    block.attn.wk = take(d * d);
    block.attn.wv = take(d * d);
    if (m > 0) {
      block.attn.w1 = take(m * d);
      block.attn.b1 = take(m);
      block.attn.w2 = take(d * m);
      block.attn.b2 = take(d);
    }
    block.ln_attn.gain = take(d);
    block.ln_attn.bias = take(d);
    block.ln_ffn.gain = take(d);
    block.ln_ffn.bias = take(d);
    blocks.push_back(std::move(block));
  }
  return blocks;
}

// Deterministic per-sample mask plan over the seed triples' token slots,
// independent of the epoch so that zero-learning-rate runs are stationary.
struct MaskSlot {
  std::size_t triple = 0;
  int slot = 0;  // 0 head, 1 rel, 2 tail
};

inline std::vector<MaskSlot> mask_plan(std::size_t id_triples, double rate, std::uint64_t seed,
                                       int sample_id) {
  std::vector<MaskSlot> all;
  for (std::size_t t = 0; t < id_triples; ++t)
    for (int s = 0; s < 3; ++s) all.push_back(MaskSlot{t, s});
  const std::size_t want = static_cast<std::size_t>(
      std::llround(rate * static_cast<double>(all.size())));
  if (want == 0 || all.empty()) return {};
  Rng rng(derive_seed(seed, 0x3A5C0000ULL + static_cast<std::uint64_t>(sample_id)));
  std::vector<std::size_t> picks = rng.sample_without_replacement(all.size(), want);
  std::vector<MaskSlot> out;
  out.reserve(picks.size());
  for (std::size_t p : picks) out.push_back(all[p]);
  return out;
}

}  // namespace detail

class Trainer {
 public:
  Trainer(const Dataset& dataset, const TrainConfig& config) : config_(config) {
    config_.validate();
    data_ = config_.corruption_rate > 0.0
                ? corrupt_dataset(dataset, config_.corruption_rate, config_.seed)
                : dataset;
    if (data_.samples.empty()) throw DimensionError("train: dataset is empty");
    prepare_working_set();
    init_parameters();
  }

  TrainOutcome run() {
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < config_.epochs; ++epoch) {
      refit_mixture();
      const gmm::ComponentSolver solver(mixture_);

      EpochStats stats;
      stats.epoch = epoch;
      // Gate statistics are taken right after the refit, while the mixture
      // and the features it was fitted on agree.
      gate_fractions(stats.gate_pass_all, stats.gate_pass_external);

      const std::vector<std::vector<std::size_t>> batches = batch_order();
      double epoch_total = 0.0;
      std::size_t epoch_steps = 0;
      for (std::size_t bi = 0; bi < batches.size(); ++bi) {
        const StepTrace trace = train_step(batches[bi], bi, solver, global_step);
        report_.steps.push_back(trace);
        epoch_total += trace.total;
        ++epoch_steps;
        ++global_step;
      }

      stats.mean_total = epoch_steps ? epoch_total / static_cast<double>(epoch_steps) : 0.0;
      stats.accuracy = evaluate_accuracy();
      report_.epochs.push_back(stats);
    }
    // Final gates are reported against a mixture refitted to the final
    // features, so the indicators describe the trained model.
    refit_mixture();
    finalize_gates();
    report_.final_accuracy = report_.epochs.back().accuracy;
    report_.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    TrainOutcome out;
    out.report = std::move(report_);
    out.model = snapshot_model();
    return out;
  }

 private:
  using Tape = diff::Tape;
  using Var = diff::Var;

  // --- setup -----------------------------------------------------------------

  void prepare_working_set() {
    dim_ = data_.dim;
    if (dim_ == 0) throw DimensionError("train: dataset has dim 0");
    for (const auto& [token, vec] : data_.table.entries()) {
      vocab_index_[token] = vocab_.size();
      vocab_.push_back(token);
    }
    if (vocab_.empty()) throw DimensionError("train: empty embedding table");

    for (TrainSample& s : data_.samples) {
      if (!config_.use_knowledge || config_.max_external < s.triples.size()) {
        std::vector<TripleRecord> kept;
        std::size_t externals = 0;
        for (const TripleRecord& t : s.triples) {
          if (t.triple.source == kg::TripleSource::kExternal) {
            if (!config_.use_knowledge || externals >= config_.max_external) continue;
            ++externals;
          }
          kept.push_back(t);
        }
        s.triples = std::move(kept);
      }
      if (s.triples.empty()) throw DimensionError("train: sample without triples");
      if (s.patches.empty()) throw DimensionError("train: sample without patches");
    }

    tokens_.resize(data_.samples.size());
    for (std::size_t i = 0; i < data_.samples.size(); ++i) {
      tokens_[i].resize(data_.samples[i].triples.size());
      for (std::size_t t = 0; t < data_.samples[i].triples.size(); ++t) {
        const kg::KnowledgeTriple& tr = data_.samples[i].triples[t].triple;
        tokens_[i][t].head = token_index(tr.head);
        tokens_[i][t].rel = token_index(tr.relation);
        tokens_[i][t].tail = token_index(tr.tail);
      }
    }
  }

  int token_index(const std::string& token) const {
    const auto it = vocab_index_.find(kg::normalize_concept(token));
    return it == vocab_index_.end() ? -1 : static_cast<int>(it->second);
  }

  void init_parameters() {
    layout_.dim = dim_;
    layout_.heads = config_.fusion_heads;
    layout_.ffn_dim = config_.ffn_mult * dim_;
    layout_.depth = config_.fusion_depth;
    if (dim_ % layout_.heads != 0)
      throw ConfigError("train config: fusion_heads must divide feature dim");

    table_offset_ = 0;
    mask_offset_ = vocab_.size() * dim_;
    fusion_offset_ = mask_offset_ + dim_;
    mu_offset_ = fusion_offset_ + layout_.total();
    const std::size_t total =
        mu_offset_ + (config_.interaction_mode ? config_.k * dim_ : 0);
    params_.assign(total, 0.0);

    for (std::size_t v = 0; v < vocab_.size(); ++v) {
      const Vec e = data_.table.lookup(vocab_[v]);
      for (std::size_t j = 0; j < dim_; ++j) params_[table_offset_ + v * dim_ + j] = e[j];
    }

    Rng rng(derive_seed(config_.seed, 0x1A17));
    for (std::size_t j = 0; j < dim_; ++j)
      params_[mask_offset_ + j] = 0.1 * rng.normal();

    const double d = static_cast<double>(dim_);
    const double proj_std = config_.init_scale / std::sqrt(d);
    const double ffn_std =
        layout_.ffn_dim > 0
            ? config_.init_scale * std::sqrt(2.0 / (d + static_cast<double>(layout_.ffn_dim)))
            : 0.0;
    std::size_t at = fusion_offset_;
    for (std::size_t b = 0; b < layout_.depth; ++b) {
      for (std::size_t i = 0; i < 3 * dim_ * dim_; ++i) params_[at++] = proj_std * rng.normal();
      if (layout_.ffn_dim > 0) {
        for (std::size_t i = 0; i < layout_.ffn_dim * dim_; ++i)
          params_[at++] = ffn_std * rng.normal();
        for (std::size_t i = 0; i < layout_.ffn_dim; ++i) params_[at++] = 0.0;  // b1
        for (std::size_t i = 0; i < dim_ * layout_.ffn_dim; ++i)
          params_[at++] = ffn_std * rng.normal();
        for (std::size_t i = 0; i < dim_; ++i) params_[at++] = 0.0;  // b2
      }
      for (std::size_t i = 0; i < dim_; ++i) params_[at++] = 1.0;  // ln_attn gain
      for (std::size_t i = 0; i < dim_; ++i) params_[at++] = 0.0;  // ln_attn bias
      for (std::size_t i = 0; i < dim_; ++i) params_[at++] = 1.0;  // ln_ffn gain
      for (std::size_t i = 0; i < dim_; ++i) params_[at++] = 0.0;  // ln_ffn bias
    }
    // Interaction-mode means are seeded at the first refit.
  }

  // --- per-epoch mixture -------------------------------------------------------

  Vec encode_triple_values(std::size_t sample, std::size_t t) const {
    const detail::TripleTokens& tt = tokens_[sample][t];
    Vec out(dim_, 0.0);
    for (int idx : {tt.head, tt.rel, tt.tail}) {
      if (idx < 0) continue;
      const std::size_t off = table_offset_ + static_cast<std::size_t>(idx) * dim_;
      for (std::size_t j = 0; j < dim_; ++j) out[j] += params_[off + j];
    }
    for (double& v : out) v /= 3.0;
    return out;
  }

  std::vector<Vec> id_features() const {
    std::vector<Vec> out;
    for (std::size_t i = 0; i < data_.samples.size(); ++i)
      for (std::size_t t = 0; t < data_.samples[i].triples.size(); ++t)
        if (data_.samples[i].triples[t].triple.source == kg::TripleSource::kId)
          out.push_back(encode_triple_values(i, t));
    if (out.empty()) throw DimensionError("train: no seed triples to fit the mixture on");
    return out;
  }

  void refit_mixture() {
    const std::vector<Vec> features = id_features();
    const std::size_t k = std::min<std::size_t>(config_.k, features.size());
    gmm::FitConfig fit_cfg;
    fit_cfg.max_iters = config_.em_max_iters;
    fit_cfg.tol = config_.em_tol;
    fit_cfg.eps_cov = config_.eps_cov;
    fit_cfg.seed = derive_seed(config_.seed, 0xF17);
    fit_cfg.init = config_.em_init;

    gmm::GmmParams init;
    if (config_.interaction_mode && mu_seeded_) {
      init.k = k;
      init.dim = dim_;
      const Mat cov = gmm::detail::global_covariance_with_ridge(features, dim_, config_.eps_cov);
      for (std::size_t i = 0; i < k; ++i) {
        const std::size_t off = mu_offset_ + i * dim_;
        init.means.emplace_back(params_.begin() + static_cast<std::ptrdiff_t>(off),
                                params_.begin() + static_cast<std::ptrdiff_t>(off + dim_));
        init.covariances.push_back(cov);
      }
    } else {
      init = gmm::init_params(features, k, fit_cfg.seed, fit_cfg.init, fit_cfg.eps_cov);
      if (config_.interaction_mode) {
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < dim_; ++j)
            params_[mu_offset_ + i * dim_ + j] = init.means[i][j];
        mu_seeded_ = true;
      }
    }

    const gmm::FitResult fit = gmm::fit_fixed_point(features, init, fit_cfg);
    mixture_ = fit.params;
    report_.gmm_reinit_events += fit.reinit_events;

    if (std::isfinite(config_.lambda1)) {
      lambda1_ = config_.lambda1;
    } else {
      std::vector<double> scores;
      scores.reserve(features.size());
      const gmm::ComponentSolver solver(mixture_);
      for (const Vec& f : features) scores.push_back(ood::gem_score(f, solver));
      lambda1_ = ood::calibrate_threshold(std::move(scores), config_.lambda1_percentile);
    }

    if (config_.gate_vision) refit_vision_mixture();
  }

  void refit_vision_mixture() {
    std::vector<Vec> features;
    for (const TrainSample& s : data_.samples)
      for (const Vec& p : s.patches) features.push_back(p);
    const std::size_t k = std::min<std::size_t>(config_.k, features.size());
    gmm::FitConfig fit_cfg;
    fit_cfg.max_iters = config_.em_max_iters;
    fit_cfg.tol = config_.em_tol;
    fit_cfg.eps_cov = config_.eps_cov;
    fit_cfg.seed = derive_seed(config_.seed, 0xF18);
    fit_cfg.init = config_.em_init;
    const gmm::GmmParams init = gmm::init_params(features, k, fit_cfg.seed, fit_cfg.init,
                                                 fit_cfg.eps_cov);
    vision_mixture_ = gmm::fit_fixed_point(features, init, fit_cfg).params;
    std::vector<double> scores;
    const gmm::ComponentSolver solver(*vision_mixture_);
    for (const Vec& f : features) scores.push_back(ood::gem_score(f, solver));
    vision_lambda1_ = ood::calibrate_threshold(std::move(scores), config_.lambda1_percentile);
  }

  // --- batching ---------------------------------------------------------------

  std::vector<std::vector<std::size_t>> batch_order() const {
    // Epoch-independent shuffle: zero-learning-rate runs must produce a
    // constant loss trace, so the batch layout cannot vary across epochs.
    std::vector<std::size_t> order(data_.samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(config_.seed, 0x0D4));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t at = 0; at < order.size(); at += config_.batch_size) {
      const std::size_t end = std::min(order.size(), at + config_.batch_size);
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
  }

  // --- one optimization step ----------------------------------------------------

  struct SampleLoss {
    Var total, itm, mlm, ood;
  };

  StepTrace train_step(const std::vector<std::size_t>& batch, std::size_t batch_index,
                       const gmm::ComponentSolver& solver, std::size_t global_step) {
    tape_.reset();
    std::vector<Var> pv = materialize(tape_);
    const std::vector<fusion::EncoderBlockParams> blocks =
        detail::fusion_views(pv, fusion_offset_, layout_);
    const fusion::TokenSeq candidates = candidate_views(pv);

    // Partner assignment for ITM negatives: uniform over other batch
    // members, seeded by the batch index only (stationary across epochs).
    std::vector<std::size_t> partner(batch.size(), SIZE_MAX);
    if (batch.size() > 1) {
      Rng rng(derive_seed(config_.seed, 0x17B0000ULL + batch_index));
      for (std::size_t i = 0; i < batch.size(); ++i) {
        std::size_t j = static_cast<std::size_t>(rng.uniform_int(batch.size() - 1));
        if (j >= i) ++j;
        partner[i] = batch[j];
      }
    } else {
      report_.itm_negative_fallback = true;
    }

    std::vector<Var> totals, itms, mlms, oods;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const SampleLoss loss =
          sample_loss(tape_, pv, blocks, candidates, solver, batch[i], partner[i]);
      totals.push_back(loss.total);
      itms.push_back(loss.itm);
      mlms.push_back(loss.mlm);
      oods.push_back(loss.ood);
    }
    const Var batch_total = diff::mean(totals);
    if (!std::isfinite(batch_total.value()))
      throw NumericError("train: loss diverged at step " + std::to_string(global_step));

    tape_.backward(batch_total);
    if (config_.learning_rate != 0.0) {
      for (std::size_t i = 0; i < params_.size(); ++i) {
        const double g = tape_.adjoint(pv[i]);
        if (!std::isfinite(g))
          throw NumericError("train: non-finite gradient at step " + std::to_string(global_step));
        params_[i] -= config_.learning_rate * g;
      }
    }

    StepTrace trace;
    trace.step = global_step;
    trace.total = batch_total.value();
    trace.l_itm = diff::mean(itms).value();
    trace.l_mlm = diff::mean(mlms).value();
    trace.l_ood = diff::mean(oods).value();
    return trace;
  }

  std::vector<Var> materialize(Tape& tape) const {
    std::vector<Var> pv;
    pv.reserve(params_.size());
    for (double v : params_) pv.push_back(tape.input(v));
    return pv;
  }

  fusion::TokenSeq candidate_views(std::span<const Var> pv) const {
    fusion::TokenSeq cand;
    cand.reserve(vocab_.size());
    for (std::size_t v = 0; v < vocab_.size(); ++v)
      cand.emplace_back(pv.begin() + static_cast<std::ptrdiff_t>(table_offset_ + v * dim_),
                        pv.begin() + static_cast<std::ptrdiff_t>(table_offset_ + (v + 1) * dim_));
    return cand;
  }

  std::vector<Var> token_vars(Tape& tape, std::span<const Var> pv, int idx) const {
    if (idx < 0) {
      std::vector<Var> zero;
      zero.reserve(dim_);
      for (std::size_t j = 0; j < dim_; ++j) zero.push_back(tape.constant(0.0));
      return zero;
    }
    const std::size_t off = table_offset_ + static_cast<std::size_t>(idx) * dim_;
    return std::vector<Var>(pv.begin() + static_cast<std::ptrdiff_t>(off),
                            pv.begin() + static_cast<std::ptrdiff_t>(off + dim_));
  }

  std::vector<Var> encode_triple_vars(Tape& tape, std::span<const Var> pv, std::size_t sample,
                                      std::size_t t, int masked_slots) const {
    const detail::TripleTokens& tt = tokens_[sample][t];
    const int ids[3] = {tt.head, tt.rel, tt.tail};
    std::vector<std::vector<Var>> parts;
    for (int s = 0; s < 3; ++s) {
      if (masked_slots & (1 << s)) {
        parts.emplace_back(pv.begin() + static_cast<std::ptrdiff_t>(mask_offset_),
                           pv.begin() + static_cast<std::ptrdiff_t>(mask_offset_ + dim_));
      } else {
        parts.push_back(token_vars(tape, pv, ids[s]));
      }
    }
    std::vector<Var> out;
    out.reserve(dim_);
    for (std::size_t j = 0; j < dim_; ++j)
      out.push_back((parts[0][j] + parts[1][j] + parts[2][j]) / 3.0);
    return out;
  }

  fusion::TokenSeq patch_vars(Tape& tape, std::size_t sample) const {
    fusion::TokenSeq out;
    for (const Vec& p : data_.samples[sample].patches) {
      std::vector<Var> token;
      token.reserve(dim_);
      for (double v : p) token.push_back(tape.constant(v));
      out.push_back(std::move(token));
    }
    return out;
  }

  Var gate_for(Tape& tape, std::span<const Var> pv, std::span<const Var> l,
               const gmm::ComponentSolver& solver) const {
    if (!config_.use_ood) return tape.constant(1.0);
    const ood::OodLayerConfig cfg{lambda1_, config_.surrogate, config_.gate_temperature};
    if (!config_.gate_gradient) {
      Vec lv(l.size());
      for (std::size_t i = 0; i < l.size(); ++i) lv[i] = l[i].value();
      const double s = ood::gem_score(lv, solver);
      const double value = config_.surrogate == ood::GateSurrogate::kRelu
                               ? (ood::detect(s, lambda1_) ? 1.0 : 0.0)
                               : 1.0 / (1.0 + std::exp(-(s - lambda1_) /
                                                       config_.gate_temperature));
      return tape.constant(value);
    }
    if (config_.interaction_mode) {
      const std::span<const Var> mu =
          pv.subspan(mu_offset_, solver.params().k * dim_);
      return ood::gate_var(tape, l, mu, solver, cfg);
    }
    return ood::gate_var(tape, l, solver, cfg);
  }

  // Patches that fail their own gate are excluded from the loss sums.
  std::vector<std::size_t> visible_patches(std::size_t sample) const {
    std::vector<std::size_t> keep;
    const TrainSample& s = data_.samples[sample];
    if (!config_.gate_vision || !vision_mixture_) {
      keep.resize(s.patches.size());
      for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
      return keep;
    }
    const gmm::ComponentSolver solver(*vision_mixture_);
    for (std::size_t i = 0; i < s.patches.size(); ++i)
      if (ood::detect(ood::gem_score(s.patches[i], solver), vision_lambda1_)) keep.push_back(i);
    if (keep.empty()) keep.push_back(0);  // never drop a whole image
    return keep;
  }

  // The similarity-based losses act on the encoder features themselves: the
  // same v_m / l_ti the gate scores. The fusion encoder contributes the
  // masked-position features for token prediction and is trained through
  // that path.
  SampleLoss sample_loss(Tape& tape, std::span<const Var> pv,
                         const std::vector<fusion::EncoderBlockParams>& blocks,
                         const fusion::TokenSeq& candidates, const gmm::ComponentSolver& solver,
                         std::size_t sample, std::size_t partner) {
    const TrainSample& s = data_.samples[sample];
    const std::size_t n_triples = s.triples.size();

    fusion::TokenSeq patches_all = patch_vars(tape, sample);
    fusion::TokenSeq patches;
    for (std::size_t i : visible_patches(sample)) patches.push_back(patches_all[i]);
    const std::size_t P = patches.size();

    // Unmasked (ITM) view.
    fusion::TokenSeq pre;
    std::vector<Var> gates;
    for (std::size_t t = 0; t < n_triples; ++t) {
      pre.push_back(encode_triple_vars(tape, pv, sample, t, 0));
      gates.push_back(gate_for(tape, pv, pre.back(), solver));
    }
    std::vector<int> labels(P * n_triples);
    for (std::size_t m = 0; m < P; ++m)
      for (std::size_t t = 0; t < n_triples; ++t)
        labels[m * n_triples + t] = config_.oracle_labels ? s.triples[t].label : 1;

    const fusion::AttentionWeights alpha = pair_weights(patches, pre);
    const Var l_ood_itm = objectives::ood_loss(patches, pre, gates, alpha, labels);

    // Positive caption features: the seed triples plus every retrieved
    // triple that clears the gate (gate-passing retrievals join the
    // in-distribution set). Negatives are a batch partner's seed triples,
    // and optionally this sample's gated-out retrievals.
    std::vector<bool> passes(n_triples, true);
    if (config_.use_ood) {
      for (std::size_t t = 0; t < n_triples; ++t) {
        if (s.triples[t].triple.source != kg::TripleSource::kExternal) continue;
        Vec lv(dim_);
        for (std::size_t j = 0; j < dim_; ++j) lv[j] = pre[t][j].value();
        passes[t] = ood::detect(ood::gem_score(lv, solver), lambda1_);
      }
    }
    fusion::TokenSeq captions;
    std::vector<int> caption_labels_per_feature;
    for (std::size_t t = 0; t < n_triples; ++t) {
      if (s.triples[t].triple.source == kg::TripleSource::kId || passes[t]) {
        captions.push_back(pre[t]);
        caption_labels_per_feature.push_back(1);
      }
    }
    if (partner != SIZE_MAX) {
      for (std::size_t t = 0; t < data_.samples[partner].triples.size(); ++t) {
        if (data_.samples[partner].triples[t].triple.source != kg::TripleSource::kId) continue;
        captions.push_back(encode_triple_vars(tape, pv, partner, t, 0));
        caption_labels_per_feature.push_back(0);
      }
    }
    if (config_.route_gated_to_negatives) {
      for (std::size_t t = 0; t < n_triples; ++t) {
        if (s.triples[t].triple.source == kg::TripleSource::kExternal && !passes[t]) {
          captions.push_back(pre[t]);
          caption_labels_per_feature.push_back(0);
        }
      }
    }
    std::vector<int> itm_labels(P * captions.size());
    for (std::size_t m = 0; m < P; ++m)
      for (std::size_t n = 0; n < captions.size(); ++n)
        itm_labels[m * captions.size() + n] = caption_labels_per_feature[n];
    const Var l_itm = objectives::itm_loss(patches, captions, itm_labels, l_ood_itm);

    // Masked (MLM) view: seed-triple token slots replaced by the learned
    // mask vector; gates recomputed on the masked features, since the same
    // triple can score differently under different masks.
    std::size_t id_count = 0;
    for (std::size_t t = 0; t < n_triples; ++t)
      if (s.triples[t].triple.source == kg::TripleSource::kId) ++id_count;
    const std::vector<detail::MaskSlot> plan =
        detail::mask_plan(id_count, config_.mask_rate, config_.seed, s.id);

    std::vector<int> mask_bits(n_triples, 0);
    std::vector<objectives::MaskedPosition> positions;
    {
      std::vector<std::size_t> id_indices;
      for (std::size_t t = 0; t < n_triples; ++t)
        if (s.triples[t].triple.source == kg::TripleSource::kId) id_indices.push_back(t);
      for (const detail::MaskSlot& slot : plan) {
        const std::size_t t = id_indices[slot.triple];
        const detail::TripleTokens& tt = tokens_[sample][t];
        const int ids[3] = {tt.head, tt.rel, tt.tail};
        if (ids[slot.slot] < 0) continue;  // blanked token: nothing to predict
        mask_bits[t] |= 1 << slot.slot;
        positions.push_back(objectives::MaskedPosition{
            t, static_cast<std::size_t>(ids[slot.slot])});
      }
    }

    fusion::TokenSeq pre_masked;
    std::vector<Var> gates_masked;
    for (std::size_t t = 0; t < n_triples; ++t) {
      if (mask_bits[t] == 0) {
        pre_masked.push_back(pre[t]);
        gates_masked.push_back(gates[t]);
      } else {
        pre_masked.push_back(encode_triple_vars(tape, pv, sample, t, mask_bits[t]));
        gates_masked.push_back(gate_for(tape, pv, pre_masked.back(), solver));
      }
    }
    const fusion::AttentionWeights alpha_m = pair_weights(patches, pre_masked);
    const Var l_ood_mlm =
        objectives::ood_loss(patches, pre_masked, gates_masked, alpha_m, labels);

    // Only retrieved triples that clear the gate join the encoder stream;
    // seed triples always enter (they are the fitting data, not candidates
    // for filtering). Masked positions index into the kept stream.
    fusion::TokenSeq stream;
    std::vector<std::size_t> stream_slot(n_triples, SIZE_MAX);
    for (std::size_t t = 0; t < n_triples; ++t) {
      if (s.triples[t].triple.source == kg::TripleSource::kExternal && config_.use_ood) {
        Vec lv(dim_);
        for (std::size_t j = 0; j < dim_; ++j) lv[j] = pre_masked[t][j].value();
        if (!ood::detect(ood::gem_score(lv, solver), lambda1_)) continue;
      }
      stream_slot[t] = stream.size();
      stream.push_back(pre_masked[t]);
    }
    std::vector<objectives::MaskedPosition> stream_positions;
    for (const objectives::MaskedPosition& pos : positions)
      if (stream_slot[pos.triple_index] != SIZE_MAX)
        stream_positions.push_back(
            objectives::MaskedPosition{stream_slot[pos.triple_index], pos.label});

    // Masked-position prediction reads the fused language tokens.
    const fusion::FusedStreams fused_m = fusion::fuse(patches, stream, blocks);
    bool no_mask = false;
    const Var l_mlm =
        objectives::mlm_loss(fused_m.language, stream_positions, candidates, l_ood_mlm, &no_mask);
    report_.mlm_no_mask = report_.mlm_no_mask || no_mask;

    SampleLoss out;
    out.itm = l_itm;
    out.mlm = l_mlm;
    out.ood = l_ood_itm;
    out.total = objectives::total_loss(l_itm, l_mlm, config_.lambda3);
    return out;
  }

  fusion::AttentionWeights pair_weights(const fusion::TokenSeq& patches,
                                        const fusion::TokenSeq& language) const {
    const std::size_t P = patches.size(), T = language.size();
    std::vector<Var> scores;
    scores.reserve(P * T);
    for (std::size_t m = 0; m < P; ++m)
      for (std::size_t t = 0; t < T; ++t)
        scores.push_back(fusion::signed_score(patches[m], language[t]));
    return fusion::attention_weights(scores, P, T, config_.lambda2);
  }

  // --- evaluation ----------------------------------------------------------------

  // Alignment accuracy: fraction of samples whose own caption features score
  // a higher mean similarity against their patches than a fixed negative
  // partner's caption features do. Same feature space as the matching loss.
  // The negative is drawn from another cluster when one exists (a true
  // distractor); same-cluster negatives are coin flips that only add noise.
  double evaluate_accuracy() {
    Rng rng(derive_seed(config_.seed, 0xEA7));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data_.samples.size(); ++i) {
      std::vector<std::size_t> pool;
      for (std::size_t j = 0; j < data_.samples.size(); ++j)
        if (j != i && data_.samples[j].cluster != data_.samples[i].cluster) pool.push_back(j);
      if (pool.empty()) {
        for (std::size_t j = 0; j < data_.samples.size(); ++j)
          if (j != i) pool.push_back(j);
      }
      if (pool.empty()) continue;
      const std::size_t j = pool[rng.uniform_int(pool.size())];
      const double pos = mean_caption_similarity(i, i);
      const double neg = mean_caption_similarity(i, j);
      if (pos > neg) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data_.samples.size());
  }

  // Mean cosine between patches of `img` and the current seed-triple caption
  // features of `cap`.
  double mean_caption_similarity(std::size_t img, std::size_t cap) const {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t < data_.samples[cap].triples.size(); ++t) {
      if (data_.samples[cap].triples[t].triple.source != kg::TripleSource::kId) continue;
      const Vec l = encode_triple_values(cap, t);
      const double ln = norm2(l);
      if (!(ln > 0.0)) continue;
      for (const Vec& p : data_.samples[img].patches) {
        const double pn = norm2(p);
        if (!(pn > 0.0)) continue;
        total += dot(p, l) / (pn * ln);
        ++count;
      }
    }
    return count ? total / static_cast<double>(count) : 0.0;
  }

  void gate_fractions(double& all_pass, double& external_pass) {
    const gmm::ComponentSolver solver(mixture_);
    std::size_t pass_all = 0, n_all = 0, pass_ext = 0, n_ext = 0;
    for (std::size_t i = 0; i < data_.samples.size(); ++i) {
      for (std::size_t t = 0; t < data_.samples[i].triples.size(); ++t) {
        const bool pass =
            !config_.use_ood ||
            ood::detect(ood::gem_score(encode_triple_values(i, t), solver), lambda1_);
        ++n_all;
        pass_all += pass ? 1 : 0;
        if (data_.samples[i].triples[t].triple.source == kg::TripleSource::kExternal) {
          ++n_ext;
          pass_ext += pass ? 1 : 0;
        }
      }
    }
    all_pass = n_all ? static_cast<double>(pass_all) / static_cast<double>(n_all) : 0.0;
    external_pass = n_ext ? static_cast<double>(pass_ext) / static_cast<double>(n_ext) : 1.0;
  }

  void finalize_gates() {
    const gmm::ComponentSolver solver(mixture_);
    for (std::size_t i = 0; i < data_.samples.size(); ++i) {
      for (std::size_t t = 0; t < data_.samples[i].triples.size(); ++t) {
        const double s = ood::gem_score(encode_triple_values(i, t), solver);
        const bool g = !config_.use_ood || ood::detect(s, lambda1_);
        report_.final_scores.push_back(s);
        report_.final_gates.push_back(g ? 1 : 0);
      }
    }
  }

  ModelState snapshot_model() const {
    ModelState m;
    m.dim = dim_;
    m.vocab = vocab_;
    m.vocab_index = vocab_index_;
    m.params = params_;
    m.table_offset = table_offset_;
    m.mask_offset = mask_offset_;
    m.fusion_offset = fusion_offset_;
    m.mu_offset = mu_offset_;
    m.layout = layout_;
    m.mixture = mixture_;
    m.lambda1 = lambda1_;
    m.config = config_;
    return m;
  }

  TrainConfig config_;
  Dataset data_;
  std::size_t dim_ = 0;
  std::vector<std::string> vocab_;
  std::map<std::string, std::size_t> vocab_index_;
  std::vector<std::vector<detail::TripleTokens>> tokens_;

  std::vector<double> params_;
  std::size_t table_offset_ = 0, mask_offset_ = 0, fusion_offset_ = 0, mu_offset_ = 0;
  FusionLayout layout_;
  bool mu_seeded_ = false;

  gmm::GmmParams mixture_;
  double lambda1_ = 0.0;
  std::optional<gmm::GmmParams> vision_mixture_;
  double vision_lambda1_ = 0.0;

  Tape tape_;
  RunReport report_;
};

inline TrainOutcome train(const Dataset& dataset, const TrainConfig& config) {
  return Trainer(dataset, config).run();
}

// --- CSV exports --------------------------------------------------------------

inline void write_loss_trace_csv(const RunReport& report, std::ostream& out) {
  out << "step,l_itm,l_mlm,l_ood,total\n";
  for (const StepTrace& s : report.steps)
    out << s.step << ',' << format_double(s.l_itm) << ',' << format_double(s.l_mlm) << ','
        << format_double(s.l_ood) << ',' << format_double(s.total) << '\n';
}

inline void write_epoch_csv(const RunReport& report, std::ostream& out) {
  out << "epoch,mean_total,accuracy,gate_pass_all,gate_pass_external\n";
  for (const EpochStats& e : report.epochs)
    out << e.epoch << ',' << format_double(e.mean_total) << ',' << format_double(e.accuracy)
        << ',' << format_double(e.gate_pass_all) << ',' << format_double(e.gate_pass_external)
        << '\n';
}

}  // namespace gemgate::harness
