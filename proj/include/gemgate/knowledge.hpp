#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "gemgate/csv.hpp"
#include "gemgate/errors.hpp"
#include "gemgate/linalg.hpp"
#include "gemgate/rng.hpp"

namespace gemgate::kg {

enum class TripleSource { kId, kExternal };

// (head, relation, tail) edge. source distinguishes caption-derived seed
// triples from retrieved ones.
struct KnowledgeTriple {
  std::string head;
  std::string relation;
  std::string tail;
  double weight = 1.0;
  TripleSource source = TripleSource::kId;

  bool same_fields(const KnowledgeTriple& o) const {
    return head == o.head && relation == o.relation && tail == o.tail;
  }
};

// Store/table key normalization: lowercase, trim, internal whitespace runs
// collapse to a single underscore.
inline std::string normalize_concept(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  std::size_t begin = 0, end = raw.size();
  while (begin < end && std::isspace(static_cast<unsigned char>(raw[begin]))) ++begin;
  while (end > begin && std::isspace(static_cast<unsigned char>(raw[end - 1]))) --end;
  bool in_ws = false;
  for (std::size_t i = begin; i < end; ++i) {
    const unsigned char c = static_cast<unsigned char>(raw[i]);
    if (std::isspace(c)) {
      in_ws = true;
      continue;
    }
    if (in_ws) {
      out.push_back('_');
      in_ws = false;
    }
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Caption parsing. A small rule-based pass: a bridging token (preposition or
// -ing verb) linking the nearest noun-like token on its left to the last
// noun-like token before the next bridge on its right. Emits at most three
// triples per caption.

namespace detail {
inline const std::set<std::string>& preposition_set() {
  static const std::set<std::string> s = {
      "in",   "on",     "at",    "by",     "with",  "down",  "up",     "over",  "under",
      "near", "from",   "into",  "onto",   "across", "through", "along", "behind", "beside",
      "above", "below", "of",   "off",    "inside", "outside", "between", "against", "around"};
  return s;
}

inline const std::set<std::string>& stopword_set() {
  static const std::set<std::string> s = {
      "a",    "an",   "the",  "this", "that", "these", "those", "his",  "her",  "its",
      "their", "my",  "your", "our",  "some", "any",   "and",   "or",   "is",   "are",
      "was",  "were", "be",   "been", "being", "am",   "to",    "as",   "while"};
  return s;
}

inline std::vector<std::string> tokenize_caption(const std::string& caption) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char raw : caption) {
    const unsigned char c = static_cast<unsigned char>(raw);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

inline bool is_determiner(const std::string& t) {
  static const std::set<std::string> s = {"a", "an", "the", "this", "that", "these", "those"};
  return s.count(t) > 0;
}

// An -ing token reads as a verb bridge unless a determiner directly precedes
// it ("a painting" stays a noun).
inline bool is_bridge(const std::vector<std::string>& tokens, std::size_t i) {
  const std::string& t = tokens[i];
  if (preposition_set().count(t)) return true;
  if (t.size() >= 5 && t.ends_with("ing")) {
    if (i > 0 && is_determiner(tokens[i - 1])) return false;
    return true;
  }
  return false;
}

inline bool is_noun_candidate(const std::vector<std::string>& tokens, std::size_t i) {
  return !is_bridge(tokens, i) && stopword_set().count(tokens[i]) == 0;
}
}  // namespace detail

inline std::vector<KnowledgeTriple> parse_caption(const std::string& caption) {
  const std::vector<std::string> tokens = detail::tokenize_caption(caption);
  std::vector<KnowledgeTriple> out;
  for (std::size_t i = 0; i < tokens.size() && out.size() < 3; ++i) {
    if (!detail::is_bridge(tokens, i)) continue;
    std::optional<std::size_t> subject;
    for (std::size_t j = i; j-- > 0;) {
      if (detail::is_noun_candidate(tokens, j)) {
        subject = j;
        break;
      }
    }
    std::optional<std::size_t> object;
    for (std::size_t j = i + 1; j < tokens.size(); ++j) {
      if (detail::is_bridge(tokens, j)) break;
      if (detail::is_noun_candidate(tokens, j)) object = j;
    }
    if (subject && object)
      out.push_back(KnowledgeTriple{tokens[*subject], tokens[i], tokens[*object], 1.0,
                                    TripleSource::kId});
  }
  return out;
}

// One caption-corpus record: `id<TAB>caption[<TAB>head|rel|tail;...]`. When
// the third field is present it is taken verbatim and the rule-based parser
// is bypassed.
struct CaptionRecord {
  std::string id;
  std::string caption;
  std::vector<KnowledgeTriple> triples;
  bool pre_parsed = false;
};

inline CaptionRecord parse_caption_record(const std::string& line) {
  CaptionRecord rec;
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    fields.push_back(line.substr(start, pos == std::string::npos ? pos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  if (fields.size() < 2) throw IoError("caption record needs at least `id<TAB>caption`");
  rec.id = fields[0];
  rec.caption = fields[1];
  if (fields.size() >= 3 && !fields[2].empty()) {
    rec.pre_parsed = true;
    std::stringstream ss(fields[2]);
    std::string item;
    while (std::getline(ss, item, ';')) {
      if (item.empty()) continue;
      std::stringstream ts(item);
      std::string h, r, t;
      if (!std::getline(ts, h, '|') || !std::getline(ts, r, '|') || !std::getline(ts, t, '|'))
        throw IoError("pre-parsed triple must be head|rel|tail: " + item);
      rec.triples.push_back(KnowledgeTriple{normalize_concept(h), normalize_concept(r),
                                            normalize_concept(t), 1.0, TripleSource::kId});
    }
  } else {
    rec.triples = parse_caption(rec.caption);
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Edge store. Loaded once, immutable afterwards; lookups are exact on the
// normalized head (and relation).

class TripleStore {
 public:
  void add_edge(KnowledgeTriple edge) {
    if (edge.head.empty() || edge.relation.empty() || edge.tail.empty())
      throw DomainError("store edge: fields must be nonempty");
    if (!(edge.weight >= 0.0)) throw DomainError("store edge: weight must be >= 0");
    edge.head = normalize_concept(edge.head);
    edge.relation = normalize_concept(edge.relation);
    edge.tail = normalize_concept(edge.tail);
    by_head_[edge.head].push_back(edges_.size());
    edges_.push_back(std::move(edge));
  }

  const std::vector<KnowledgeTriple>& edges() const { return edges_; }
  std::size_t size() const { return edges_.size(); }

  std::span<const std::size_t> edges_with_head(const std::string& normalized_head) const {
    const auto it = by_head_.find(normalized_head);
    if (it == by_head_.end()) return {};
    return it->second;
  }

 private:
  std::vector<KnowledgeTriple> edges_;
  std::unordered_map<std::string, std::vector<std::size_t>> by_head_;
};

struct StoreLoadResult {
  TripleStore store;
  std::size_t malformed_lines = 0;
};

// Edge file: UTF-8, one `head<TAB>relation<TAB>tail<TAB>weight` per line;
// `#` lines are comments. Malformed lines are counted, not fatal.
inline StoreLoadResult load_store(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open edge file: " + path);
  StoreLoadResult result;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t pos = line.find('\t', start);
      fields.push_back(line.substr(start, pos == std::string::npos ? pos : pos - start));
      if (pos == std::string::npos) break;
      start = pos + 1;
    }
    if (fields.size() != 4) {
      ++result.malformed_lines;
      continue;
    }
    double weight = 0.0;
    try {
      std::size_t used = 0;
      weight = std::stod(fields[3], &used);
      if (used != fields[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      ++result.malformed_lines;
      continue;
    }
    try {
      result.store.add_edge(
          KnowledgeTriple{fields[0], fields[1], fields[2], weight, TripleSource::kExternal});
    } catch (const DomainError&) {
      ++result.malformed_lines;
    }
  }
  return result;
}

namespace detail {
// weight descending, ties lexicographic.
inline bool retrieval_order(const KnowledgeTriple& a, const KnowledgeTriple& b) {
  if (a.weight != b.weight) return a.weight > b.weight;
  if (a.relation != b.relation) return a.relation < b.relation;
  if (a.tail != b.tail) return a.tail < b.tail;
  return a.head < b.head;
}

inline std::vector<KnowledgeTriple> dedupe_sorted_by_fields(std::vector<KnowledgeTriple> v) {
  std::sort(v.begin(), v.end(), [](const KnowledgeTriple& a, const KnowledgeTriple& b) {
    if (a.head != b.head) return a.head < b.head;
    if (a.relation != b.relation) return a.relation < b.relation;
    if (a.tail != b.tail) return a.tail < b.tail;
    return a.weight > b.weight;  // keep the heaviest duplicate
  });
  v.erase(std::unique(v.begin(), v.end(),
                      [](const KnowledgeTriple& a, const KnowledgeTriple& b) {
                        return a.same_fields(b);
                      }),
          v.end());
  return v;
}
}  // namespace detail

// Edges whose head matches the concept (and relation, when given), deduped
// on (head, relation, tail), ordered by weight descending with
// lexicographic tie-breaking, truncated to n. Unknown concepts yield an
// empty list.
inline std::vector<KnowledgeTriple> retrieve(const TripleStore& store, const std::string& query_concept,
                                             const std::optional<std::string>& relation,
                                             std::size_t n) {
  std::vector<KnowledgeTriple> out;
  if (n == 0) return out;
  const std::string head = normalize_concept(query_concept);
  const std::optional<std::string> rel =
      relation ? std::optional<std::string>(normalize_concept(*relation)) : std::nullopt;
  for (std::size_t idx : store.edges_with_head(head)) {
    const KnowledgeTriple& e = store.edges()[idx];
    if (rel && e.relation != *rel) continue;
    KnowledgeTriple copy = e;
    copy.source = TripleSource::kExternal;
    out.push_back(std::move(copy));
  }
  out = detail::dedupe_sorted_by_fields(std::move(out));
  std::sort(out.begin(), out.end(), detail::retrieval_order);
  if (out.size() > n) out.resize(n);
  return out;
}

// T = T_id plus up to n_external retrieved triples: every seed triple's head
// and tail are queried across all relations, the union is deduped and
// truncated globally by weight.
inline std::vector<KnowledgeTriple> augment(const std::vector<KnowledgeTriple>& id_triples,
                                            const TripleStore& store, std::size_t n_external) {
  std::vector<KnowledgeTriple> external;
  if (n_external > 0) {
    for (const KnowledgeTriple& t : id_triples) {
      for (const std::string& query_concept : {t.head, t.tail}) {
        auto hits = retrieve(store, query_concept, std::nullopt, store.size());
        external.insert(external.end(), hits.begin(), hits.end());
      }
    }
    external = detail::dedupe_sorted_by_fields(std::move(external));
    std::sort(external.begin(), external.end(), detail::retrieval_order);
    if (external.size() > n_external) external.resize(n_external);
  }
  std::vector<KnowledgeTriple> out = id_triples;
  out.insert(out.end(), external.begin(), external.end());
  return out;
}

// ---------------------------------------------------------------------------
// Token embedding table. Ordered map so iteration (and therefore every
// consumer that enumerates the vocabulary) is deterministic.

enum class UnknownTokenPolicy { kZeroVector, kHashedUnit };

class ConceptEmbeddingTable {
 public:
  ConceptEmbeddingTable() = default;
  explicit ConceptEmbeddingTable(std::size_t dim,
                                 UnknownTokenPolicy policy = UnknownTokenPolicy::kZeroVector)
      : dim_(dim), policy_(policy) {}

  std::size_t dim() const { return dim_; }
  UnknownTokenPolicy policy() const { return policy_; }
  std::size_t size() const { return vectors_.size(); }
  const std::map<std::string, Vec>& entries() const { return vectors_; }

  void set(const std::string& token, Vec v) {
    if (v.size() != dim_) throw DimensionError("embedding table: vector dim mismatch");
    if (!all_finite(v)) throw NumericError("embedding table: non-finite vector");
    vectors_[normalize_concept(token)] = std::move(v);
  }

  bool contains(const std::string& token) const {
    return vectors_.count(normalize_concept(token)) > 0;
  }

  // Unknown tokens fall back to the policy vector: all-zero, or a
  // deterministic unit vector hashed from the token text.
  Vec lookup(const std::string& token) const {
    const std::string key = normalize_concept(token);
    const auto it = vectors_.find(key);
    if (it != vectors_.end()) return it->second;
    if (policy_ == UnknownTokenPolicy::kZeroVector || key.empty()) return Vec(dim_, 0.0);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : key) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
    Rng rng(h);
    Vec v(dim_);
    for (double& x : v) x = rng.normal();
    const double n = norm2(v);
    if (n > 0.0)
      for (double& x : v) x /= n;
    return v;
  }

 private:
  std::size_t dim_ = 0;
  UnknownTokenPolicy policy_ = UnknownTokenPolicy::kZeroVector;
  std::map<std::string, Vec> vectors_;
};

// Mean of the head, relation and tail vectors.
inline Vec encode_triple(const KnowledgeTriple& triple, const ConceptEmbeddingTable& table) {
  Vec h = table.lookup(triple.head);
  const Vec r = table.lookup(triple.relation);
  const Vec t = table.lookup(triple.tail);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = (h[i] + r[i] + t[i]) / 3.0;
  return h;
}

// Embedding file: first line `d`, then `token v1 ... vd` per line.
inline ConceptEmbeddingTable load_embeddings(const std::string& path,
                                             UnknownTokenPolicy policy =
                                                 UnknownTokenPolicy::kZeroVector) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open embedding file: " + path);
  std::size_t d = 0;
  if (!(in >> d) || d == 0) throw IoError("embedding file: bad dimension line: " + path);
  ConceptEmbeddingTable table(d, policy);
  std::string token;
  while (in >> token) {
    Vec v(d);
    for (double& x : v)
      if (!(in >> x)) throw IoError("embedding file: truncated vector for token " + token);
    table.set(token, std::move(v));
  }
  return table;
}

inline void save_embeddings(const ConceptEmbeddingTable& table, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << table.dim() << '\n';
  for (const auto& [token, vec] : table.entries()) {
    out << token;
    for (double v : vec) out << ' ' << format_double(v);
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace gemgate::kg
