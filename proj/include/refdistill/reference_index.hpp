#pragma once

// Tokenization, an Okapi BM25 inverted index and the reference pairing that
// assigns every document its highest-scoring other document.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "refdistill/binary_io.hpp"
#include "refdistill/error.hpp"

namespace refdistill {

// ---------------------------------------------------------------------------
// Corpus

struct Document {
  std::string id;
  std::string text;
};

struct Corpus {
  std::vector<Document> docs;

  std::size_t size() const { return docs.size(); }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& d : docs) {
      if (d.id.empty()) throw ValidationError("corpus contains an empty document id");
      if (!seen.insert(d.id).second) throw ValidationError("duplicate document id '" + d.id + "'");
    }
  }

  std::size_t index_of(const std::string& id) const {
    for (std::size_t i = 0; i < docs.size(); ++i)
      if (docs[i].id == id) return i;
    throw ValidationError("unknown document id '" + id + "'");
  }
};

/// Plain text (one document per line, id = 0-based line number) or JSONL
/// with {"id", "text"} objects. JSONL is detected by a .jsonl extension or a
/// leading '{'.
inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus '" + path + "'");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  const bool jsonl = path.ends_with(".jsonl") || (!lines.empty() && lines.front().starts_with("{"));
  Corpus corpus;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (!jsonl) {
      corpus.docs.push_back({std::to_string(i), lines[i]});
      continue;
    }
    if (lines[i].find_first_not_of(" \t") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(lines[i]);
      const auto& id = j.at("id");
      corpus.docs.push_back({id.is_string() ? id.get<std::string>() : id.dump(), j.at("text").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw IoError("'" + path + "' line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  corpus.validate();
  return corpus;
}

// ---------------------------------------------------------------------------
// Tokenization

/// Lowercases ASCII letters and splits on runs of characters that are not
/// ASCII alphanumerics. Bytes >= 0x80 (UTF-8 multibyte sequences) are kept
/// inside words.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u) || u >= 0x80) {
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    } else if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kMask = 2;
  static constexpr std::size_t kSpecialCount = 3;

  Vocabulary() : terms_{"[PAD]", "[UNK]", "[MASK]"} {
    for (std::size_t i = 0; i < terms_.size(); ++i) ids_[terms_[i]] = i;
  }

  /// Words ranked by descending frequency, ties broken by byte order.
  /// max_size counts the special tokens; 0 means unlimited.
  static Vocabulary build(const Corpus& corpus, std::size_t max_size = 0) {
    std::map<std::string, std::size_t> counts;
    for (const auto& d : corpus.docs)
      for (auto& w : split_words(d.text)) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [word, count] : ranked) {
      if (max_size != 0 && v.size() >= max_size) break;
      v.ids_[word] = v.terms_.size();
      v.terms_.push_back(word);
    }
    return v;
  }

  std::size_t size() const { return terms_.size(); }
  const std::string& term(std::size_t id) const { return terms_.at(id); }

  std::size_t id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
  }

  std::vector<std::size_t> encode(std::string_view text) const {
    std::vector<std::size_t> out;
    for (const auto& w : split_words(text)) out.push_back(id(w));
    return out;
  }

 private:
  std::vector<std::string> terms_;
  std::unordered_map<std::string, std::size_t> ids_;
};

inline std::vector<std::size_t> tokenize(std::string_view text, const Vocabulary& vocab) { return vocab.encode(text); }

// ---------------------------------------------------------------------------
// BM25

struct Posting {
  std::size_t doc = 0;
  std::size_t tf = 0;
  friend bool operator==(const Posting&, const Posting&) = default;
};

struct InvertedIndex {
  std::map<std::size_t, std::vector<Posting>> postings;  // term -> postings sorted by doc
  std::vector<std::vector<std::size_t>> documents;      // forward index: token sequence per doc
  std::vector<std::size_t> doc_lengths;
  double avg_doc_length = 0.0;
  std::size_t doc_count = 0;
  double k1 = 1.2;
  double b = 0.75;

  double idf(std::size_t term) const {
    auto it = postings.find(term);
    const double n_t = it == postings.end() ? 0.0 : static_cast<double>(it->second.size());
    const double n = static_cast<double>(doc_count);
    return std::log(1.0 + (n - n_t + 0.5) / (n_t + 0.5));
  }

  /// Contribution of one query-term occurrence with frequency tf in doc.
  double term_weight(double idf_value, std::size_t tf, std::size_t doc) const {
    const double f = static_cast<double>(tf);
    const double ratio = avg_doc_length > 0.0 ? static_cast<double>(doc_lengths[doc]) / avg_doc_length : 0.0;
    return idf_value * f * (k1 + 1.0) / (f + k1 * (1.0 - b + b * ratio));
  }

  std::size_t term_frequency(std::size_t term, std::size_t doc) const {
    auto it = postings.find(term);
    if (it == postings.end()) return 0;
    auto p = std::lower_bound(it->second.begin(), it->second.end(), doc,
                              [](const Posting& x, std::size_t d) { return x.doc < d; });
    return p != it->second.end() && p->doc == doc ? p->tf : 0;
  }

  friend bool operator==(const InvertedIndex&, const InvertedIndex&) = default;
};

inline InvertedIndex build_index(const std::vector<std::vector<std::size_t>>& docs, double k1 = 1.2, double b = 0.75) {
  if (docs.empty()) throw ValidationError("cannot index an empty corpus");
  if (!(k1 > 0.0) || !(b >= 0.0 && b <= 1.0)) throw ValidationError("BM25 requires k1 > 0 and b in [0, 1]");
  InvertedIndex index;
  index.k1 = k1;
  index.b = b;
  index.doc_count = docs.size();
  index.documents = docs;
  double total = 0.0;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    std::map<std::size_t, std::size_t> tf;
    for (std::size_t t : docs[d]) ++tf[t];
    for (const auto& [term, count] : tf) index.postings[term].push_back({d, count});
    index.doc_lengths.push_back(docs[d].size());
    total += static_cast<double>(docs[d].size());
  }
  index.avg_doc_length = total / static_cast<double>(docs.size());
  return index;
}

/// Σ over query tokens (with multiplicity) of IDF(t) * tf (k1 + 1) / (tf + k1 (1 - b + b len / avglen)).
inline double bm25_score(const InvertedIndex& index, std::span<const std::size_t> query, std::size_t doc) {
  if (doc >= index.doc_count) {
    throw ValidationError("document index " + std::to_string(doc) + " outside index of " +
                          std::to_string(index.doc_count) + " documents");
  }
  double score = 0.0;
  for (std::size_t term : query) {
    const std::size_t tf = index.term_frequency(term, doc);
    if (tf > 0) score += index.term_weight(index.idf(term), tf, doc);
  }
  return score;
}

struct Match {
  std::size_t doc = 0;
  double score = 0.0;
};

/// Highest BM25 score for x's full token multiset among all other
/// documents; ties go to the smallest document index.
inline Match nearest_reference(const InvertedIndex& index, std::size_t x) {
  if (index.doc_count < 2) throw ValidationError("reference pairing needs at least two documents");
  if (x >= index.doc_count) throw ValidationError("document index outside index");
  std::vector<double> scores(index.doc_count, 0.0);
  for (std::size_t term : index.documents[x]) {
    auto it = index.postings.find(term);
    if (it == index.postings.end()) continue;
    const double idf = index.idf(term);
    for (const Posting& p : it->second) scores[p.doc] += index.term_weight(idf, p.tf, p.doc);
  }
  Match best{x == 0 ? 1u : 0u, 0.0};
  best.score = scores[best.doc];
  for (std::size_t d = 0; d < index.doc_count; ++d) {
    if (d == x) continue;
    if (scores[d] > best.score) best = {d, scores[d]};
  }
  return best;
}

struct ReferencePair {
  std::string x_id;
  std::string r_id;
  double score = 0.0;
  std::vector<std::size_t> x_tokens;
  std::vector<std::size_t> r_tokens;
};

inline std::vector<ReferencePair> build_reference_dataset(const Corpus& corpus, const Vocabulary& vocab,
                                                          double k1 = 1.2, double b = 0.75) {
  corpus.validate();
  if (corpus.size() < 2) throw ValidationError("reference pairing needs at least two documents");
  std::vector<std::vector<std::size_t>> docs;
  for (const auto& d : corpus.docs) docs.push_back(tokenize(d.text, vocab));
  const InvertedIndex index = build_index(docs, k1, b);
  std::vector<ReferencePair> pairs;
  pairs.reserve(corpus.size());
  for (std::size_t x = 0; x < corpus.size(); ++x) {
    const Match m = nearest_reference(index, x);
    pairs.push_back({corpus.docs[x].id, corpus.docs[m.doc].id, m.score, docs[x], docs[m.doc]});
  }
  return pairs;
}

inline std::string pairs_to_jsonl(const std::vector<ReferencePair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["x_id"] = p.x_id;
    j["r_id"] = p.r_id;
    j["score"] = p.score;
    out += j.dump() + "\n";
  }
  return out;
}

/// Reads x_id / r_id pairs; token sequences are filled from the corpus.
inline std::vector<ReferencePair> load_pairs(const std::string& path, const Corpus& corpus, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pairs file '" + path + "'");
  std::vector<ReferencePair> pairs;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ReferencePair p{j.at("x_id").get<std::string>(), j.at("r_id").get<std::string>(),
                      j.value("score", 0.0), {}, {}};
      if (p.x_id == p.r_id) throw ValidationError("pair pairs document '" + p.x_id + "' with itself");
      p.x_tokens = tokenize(corpus.docs[corpus.index_of(p.x_id)].text, vocab);
      p.r_tokens = tokenize(corpus.docs[corpus.index_of(p.r_id)].text, vocab);
      pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("'" + path + "' line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pairs;
}

// Index file ("RFBI"): magic | u32 version | f64 k1 | f64 b | u64 N | f64 avg
//   | per doc: u32 length, length * u32 token ids
//   | u64 term count | per term: u32 term, u32 postings, postings * (u32 doc, u32 tf)
inline BinaryWriter encode_index(const InvertedIndex& index) {
  BinaryWriter w;
  w.bytes("RFBI", 4);
  w.u32(1);
  w.f64(index.k1);
  w.f64(index.b);
  w.u64(index.doc_count);
  w.f64(index.avg_doc_length);
  for (const auto& doc : index.documents) {
    w.u32(static_cast<std::uint32_t>(doc.size()));
    for (std::size_t t : doc) w.u32(static_cast<std::uint32_t>(t));
  }
  w.u64(index.postings.size());
  for (const auto& [term, list] : index.postings) {
    w.u32(static_cast<std::uint32_t>(term));
    w.u32(static_cast<std::uint32_t>(list.size()));
    for (const Posting& p : list) {
      w.u32(static_cast<std::uint32_t>(p.doc));
      w.u32(static_cast<std::uint32_t>(p.tf));
    }
  }
  return w;
}

inline InvertedIndex decode_index(BinaryReader& r) {
  r.expect_magic("RFBI");
  if (r.u32() != 1) throw IoError("'" + r.source() + "': unsupported index version");
  InvertedIndex index;
  index.k1 = r.f64();
  index.b = r.f64();
  index.doc_count = r.u64();
  index.avg_doc_length = r.f64();
  for (std::size_t d = 0; d < index.doc_count; ++d) {
    std::vector<std::size_t> doc(r.u32());
    for (auto& t : doc) t = r.u32();
    index.doc_lengths.push_back(doc.size());
    index.documents.push_back(std::move(doc));
  }
  const std::uint64_t terms = r.u64();
  for (std::uint64_t i = 0; i < terms; ++i) {
    const std::size_t term = r.u32();
    std::vector<Posting> list(r.u32());
    for (auto& p : list) {
      p.doc = r.u32();
      p.tf = r.u32();
    }
    index.postings[term] = std::move(list);
  }
  if (!r.at_end()) throw IoError("'" + r.source() + "': trailing bytes in index");
  return index;
}

}  // namespace refdistill
