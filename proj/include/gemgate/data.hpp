#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "gemgate/csv.hpp"
#include "gemgate/errors.hpp"
#include "gemgate/knowledge.hpp"
#include "gemgate/linalg.hpp"
#include "gemgate/rng.hpp"

namespace gemgate::harness {

// Token used for blanked triple fields; not present in any embedding table,
// so it resolves through the unknown-token policy.
inline constexpr const char* kUnknownToken = "<unk>";

struct TripleRecord {
  kg::KnowledgeTriple triple;
  // Match label of this triple against every patch of its sample.
  int label = 1;
};

struct TrainSample {
  int id = 0;
  int cluster = 0;
  std::vector<Vec> patches;
  std::vector<TripleRecord> triples;  // seed triples first, then external
};

struct Dataset {
  std::size_t dim = 0;
  std::size_t clusters = 0;
  kg::ConceptEmbeddingTable table;
  std::vector<TrainSample> samples;

  std::size_t triple_count() const {
    std::size_t n = 0;
    for (const TrainSample& s : samples) n += s.triples.size();
    return n;
  }
};

// --- flat text persistence ---------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << "gemgate-dataset 1\n";
  out << "dim " << ds.dim << "\nclusters " << ds.clusters << "\nvocab " << ds.table.size()
      << '\n';
  for (const auto& [token, vec] : ds.table.entries()) {
    out << token;
    for (double v : vec) out << ' ' << format_double(v);
    out << '\n';
  }
  out << "samples " << ds.samples.size() << '\n';
  for (const TrainSample& s : ds.samples) {
    out << "sample " << s.id << ' ' << s.cluster << ' ' << s.patches.size() << ' '
        << s.triples.size() << '\n';
    for (const Vec& p : s.patches) {
      out << "patch";
      for (double v : p) out << ' ' << format_double(v);
      out << '\n';
    }
    for (const TripleRecord& t : s.triples) {
      out << "triple " << t.triple.head << ' ' << t.triple.relation << ' ' << t.triple.tail << ' '
          << format_double(t.triple.weight) << ' '
          << (t.triple.source == kg::TripleSource::kId ? "id" : "ext") << ' ' << t.label << '\n';
    }
  }
  if (!out) throw IoError("write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path);
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "gemgate-dataset" || version != 1)
    throw IoError("not a gemgate dataset file: " + path);
  Dataset ds;
  std::string key;
  std::size_t vocab = 0;
  if (!(in >> key >> ds.dim) || key != "dim") throw IoError("dataset: bad dim line");
  if (!(in >> key >> ds.clusters) || key != "clusters") throw IoError("dataset: bad clusters line");
  if (!(in >> key >> vocab) || key != "vocab") throw IoError("dataset: bad vocab line");
  ds.table = kg::ConceptEmbeddingTable(ds.dim);
  for (std::size_t i = 0; i < vocab; ++i) {
    std::string token;
    Vec v(ds.dim);
    if (!(in >> token)) throw IoError("dataset: truncated vocab");
    for (double& x : v)
      if (!(in >> x)) throw IoError("dataset: truncated embedding for " + token);
    ds.table.set(token, std::move(v));
  }
  std::size_t n_samples = 0;
  if (!(in >> key >> n_samples) || key != "samples") throw IoError("dataset: bad samples line");
  ds.samples.reserve(n_samples);
  for (std::size_t si = 0; si < n_samples; ++si) {
    TrainSample s;
    std::size_t n_patches = 0, n_triples = 0;
    if (!(in >> key >> s.id >> s.cluster >> n_patches >> n_triples) || key != "sample")
      throw IoError("dataset: bad sample header");
    for (std::size_t p = 0; p < n_patches; ++p) {
      Vec v(ds.dim);
      if (!(in >> key) || key != "patch") throw IoError("dataset: bad patch line");
      for (double& x : v)
        if (!(in >> x)) throw IoError("dataset: truncated patch");
      s.patches.push_back(std::move(v));
    }
    for (std::size_t t = 0; t < n_triples; ++t) {
      TripleRecord rec;
      std::string source;
      if (!(in >> key >> rec.triple.head >> rec.triple.relation >> rec.triple.tail >>
            rec.triple.weight >> source >> rec.label) ||
          key != "triple")
        throw IoError("dataset: bad triple line");
      rec.triple.source =
          source == "id" ? kg::TripleSource::kId : kg::TripleSource::kExternal;
      s.triples.push_back(std::move(rec));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// Incomplete-knowledge corruption: each triple independently has its tail
// token blanked with the given probability. Level 0 returns a bit-identical
// copy.
inline Dataset corrupt_dataset(const Dataset& ds, double level, std::uint64_t seed) {
  if (!(level >= 0.0 && level <= 1.0)) throw ConfigError("corrupt level must be in [0,1]");
  Dataset out = ds;
  Rng rng(derive_seed(seed, 0xC044));
  for (TrainSample& s : out.samples)
    for (TripleRecord& t : s.triples)
      if (rng.uniform01() < level) t.triple.tail = kUnknownToken;
  return out;
}

// Plain feature matrix file: first line `n d`, then n rows of d values.
inline std::vector<Vec> load_features(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open feature file: " + path);
  std::size_t n = 0, d = 0;
  if (!(in >> n >> d) || d == 0) throw IoError("feature file: bad `n d` header: " + path);
  std::vector<Vec> out(n, Vec(d));
  for (Vec& row : out)
    for (double& x : row)
      if (!(in >> x)) throw IoError("feature file: truncated row: " + path);
  return out;
}

inline void save_features(const std::vector<Vec>& features, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << features.size() << ' ' << (features.empty() ? 0 : features[0].size()) << '\n';
  for (const Vec& row : features) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out << ' ';
      out << format_double(row[i]);
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace gemgate::harness
