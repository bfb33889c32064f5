#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "gemgate/csv.hpp"
#include "gemgate/data.hpp"
#include "gemgate/trainer.hpp"

namespace gemgate::harness {

// --- component ablation (knowledge triples x gating) ---------------------------

struct AblationCell {
  bool kg = false;
  bool ood = false;
  double accuracy = 0.0;
  double final_loss = 0.0;
};

// Four paired-seed runs: neither component, knowledge only, gating only,
// both. "No KG" drops external triples; "no OOD" forces every gate to 1.
inline std::vector<AblationCell> ablate_components(const Dataset& dataset,
                                                   const TrainConfig& base) {
  std::vector<AblationCell> cells;
  for (const auto [kg_on, ood_on] :
       {std::pair{false, false}, std::pair{true, false}, std::pair{false, true},
        std::pair{true, true}}) {
    TrainConfig cfg = base;
    cfg.use_knowledge = kg_on;
    cfg.use_ood = ood_on;
    const TrainOutcome out = train(dataset, cfg);
    cells.push_back(AblationCell{kg_on, ood_on, out.report.final_accuracy,
                                 out.report.steps.back().total});
  }
  return cells;
}

inline void write_ablation_csv(const std::vector<AblationCell>& cells, std::ostream& out) {
  out << "kg,ood,accuracy,final_loss\n";
  for (const AblationCell& c : cells)
    out << (c.kg ? 1 : 0) << ',' << (c.ood ? 1 : 0) << ',' << format_double(c.accuracy) << ','
        << format_double(c.final_loss) << '\n';
}

// --- hyperparameter sweeps ------------------------------------------------------

enum class SweepAxis { kNExternal, kComponents };

struct SweepRow {
  double value = 0.0;
  double accuracy = 0.0;
};

// One training run per value, shared seeds; output rows sorted by value.
inline std::vector<SweepRow> sweep(const Dataset& dataset, const TrainConfig& base,
                                   SweepAxis axis, std::vector<double> values) {
  if (values.empty()) throw ConfigError("sweep: no values");
  std::sort(values.begin(), values.end());
  values.erase(std::unique(values.begin(), values.end()), values.end());
  std::vector<SweepRow> rows;
  for (double v : values) {
    if (!(v >= 0.0) || v != std::floor(v)) throw ConfigError("sweep: values must be integers >= 0");
    TrainConfig cfg = base;
    if (axis == SweepAxis::kNExternal) {
      cfg.max_external = static_cast<std::size_t>(v);
      cfg.use_knowledge = cfg.max_external > 0;
    } else {
      if (v < 1.0) throw ConfigError("sweep: k must be >= 1");
      cfg.k = static_cast<std::size_t>(v);
    }
    const TrainOutcome out = train(dataset, cfg);
    rows.push_back(SweepRow{v, out.report.final_accuracy});
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "value,accuracy\n";
  for (const SweepRow& r : rows)
    out << format_double(r.value) << ',' << format_double(r.accuracy) << '\n';
}

// --- incomplete-knowledge robustness ---------------------------------------------

struct RobustnessRow {
  double level = 0.0;
  double hamming = 0.0;  // normalized: fraction of gate indicators flipped
  double accuracy = 0.0;
};

// Trains once per corruption level on a blanked copy of the dataset and
// compares the final gate vector against the clean run's.
inline std::vector<RobustnessRow> robustness(const Dataset& dataset, const TrainConfig& base,
                                             std::vector<double> levels) {
  if (levels.empty()) throw ConfigError("robustness: no levels");
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  TrainConfig cfg = base;
  cfg.corruption_rate = 0.0;
  const TrainOutcome clean = train(dataset, cfg);

  std::vector<RobustnessRow> rows;
  for (double level : levels) {
    if (!(level >= 0.0 && level <= 1.0)) throw ConfigError("robustness: level outside [0,1]");
    const Dataset corrupted = corrupt_dataset(dataset, level, base.seed);
    const TrainOutcome out = train(corrupted, cfg);
    if (out.report.final_gates.size() != clean.report.final_gates.size())
      throw NumericError("robustness: gate vectors of different lengths");
    std::size_t diff = 0;
    for (std::size_t i = 0; i < out.report.final_gates.size(); ++i)
      diff += out.report.final_gates[i] != clean.report.final_gates[i] ? 1 : 0;
    const double hamming =
        static_cast<double>(diff) / static_cast<double>(clean.report.final_gates.size());
    rows.push_back(RobustnessRow{level, hamming, out.report.final_accuracy});
  }
  return rows;
}

inline void write_robustness_csv(const std::vector<RobustnessRow>& rows, std::ostream& out) {
  out << "level,hamming,accuracy\n";
  for (const RobustnessRow& r : rows)
    out << format_double(r.level) << ',' << format_double(r.hamming) << ','
        << format_double(r.accuracy) << '\n';
}

// --- fused embedding export -------------------------------------------------------

// Per-sample multimodal feature: mean of the fused patch tokens, fused seed
// triples, and fused gate-passing external triples, under the trained
// parameters.
inline std::vector<Vec> fused_sample_embeddings(const Dataset& dataset, const ModelState& model) {
  std::vector<Vec> out;
  out.reserve(dataset.samples.size());
  const gmm::ComponentSolver solver(model.mixture);
  for (const TrainSample& s : dataset.samples) {
    diff::Tape tape;
    std::vector<diff::Var> pv;
    pv.reserve(model.params.size());
    for (double v : model.params) pv.push_back(tape.input(v));
    const std::vector<fusion::EncoderBlockParams> blocks =
        detail::fusion_views(pv, model.fusion_offset, model.layout);

    fusion::TokenSeq patches;
    for (const Vec& p : s.patches) {
      std::vector<diff::Var> token;
      for (double v : p) token.push_back(tape.constant(v));
      patches.push_back(std::move(token));
    }
    // Gate-passing triples only; the encoder never sees filtered-out
    // retrievals, matching the training-time routing.
    fusion::TokenSeq language;
    for (const TripleRecord& t : s.triples) {
      Vec value(model.dim, 0.0);
      for (const std::string* tok : {&t.triple.head, &t.triple.relation, &t.triple.tail}) {
        const auto it = model.vocab_index.find(kg::normalize_concept(*tok));
        if (it == model.vocab_index.end()) continue;
        const std::size_t off = model.table_offset + it->second * model.dim;
        for (std::size_t j = 0; j < model.dim; ++j) value[j] += model.params[off + j];
      }
      for (double& v : value) v /= 3.0;
      const bool pass = t.triple.source == kg::TripleSource::kId ||
                        !model.config.use_ood ||
                        ood::detect(ood::gem_score(value, solver), model.lambda1);
      if (!pass) continue;
      std::vector<diff::Var> feature;
      feature.reserve(model.dim);
      for (std::size_t j = 0; j < model.dim; ++j) feature.push_back(tape.constant(value[j]));
      language.push_back(std::move(feature));
    }
    const fusion::FusedStreams fused = fusion::fuse(patches, language, blocks);
    Vec pooled(model.dim, 0.0);
    std::size_t count = 0;
    for (const auto& token : fused.image) {
      for (std::size_t j = 0; j < model.dim; ++j) pooled[j] += token[j].value();
      ++count;
    }
    for (const auto& token : fused.language) {
      for (std::size_t j = 0; j < model.dim; ++j) pooled[j] += token[j].value();
      ++count;
    }
    for (double& v : pooled) v /= static_cast<double>(count);
    out.push_back(std::move(pooled));
  }
  return out;
}

inline void write_embeddings_csv(const Dataset& dataset, const std::vector<Vec>& embeddings,
                                 std::ostream& out) {
  if (embeddings.size() != dataset.samples.size())
    throw DimensionError("embedding export: row count mismatch");
  const std::size_t d = embeddings.empty() ? 0 : embeddings[0].size();
  out << "id,cluster";
  for (std::size_t j = 0; j < d; ++j) out << ",f" << (j + 1);
  out << '\n';
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    out << dataset.samples[i].id << ',' << dataset.samples[i].cluster;
    for (double v : embeddings[i]) out << ',' << format_double(v);
    out << '\n';
  }
}

inline void export_embeddings(const Dataset& dataset, const ModelState& model,
                              const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open for writing: " + path);
  write_embeddings_csv(dataset, fused_sample_embeddings(dataset, model), file);
  if (!file) throw IoError("write failed: " + path);
}

}  // namespace gemgate::harness
