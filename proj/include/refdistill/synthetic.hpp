#pragma once

// Seeded synthetic corpus with topic structure: each document follows one
// topic's word cycle with occasional substitutions, so documents of the same
// topic share vocabulary and BM25 pairs them together.

#include <cstdint>
#include <string>
#include <vector>

#include "refdistill/reference_index.hpp"
#include "refdistill/rng.hpp"

namespace refdistill {

struct SyntheticSpec {
  std::size_t documents = 512;
  std::size_t words = 61;  // plus three special tokens gives a vocabulary of 64
  std::size_t topics = 8;
  std::size_t min_length = 8;
  std::size_t max_length = 24;
  double noise = 0.1;  // probability a position leaves the topic cycle
  std::uint64_t seed = 0;
};

inline std::string synthetic_word(std::size_t i) {
  std::string s = "w";
  if (i < 10) s += '0';
  return s + std::to_string(i);
}

inline Corpus synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.words < spec.topics || spec.topics == 0 || spec.min_length == 0 || spec.min_length > spec.max_length)
    throw ValidationError("invalid synthetic corpus settings");
  Rng rng(spec.seed);
  // Topic k owns the words congruent to k modulo the topic count and walks
  // them in a fixed shuffled order.
  std::vector<std::vector<std::size_t>> cycles(spec.topics);
  for (std::size_t w = 0; w < spec.words; ++w) cycles[w % spec.topics].push_back(w);
  for (auto& c : cycles) rng.shuffle(c);

  Corpus corpus;
  for (std::size_t d = 0; d < spec.documents; ++d) {
    const auto& cycle = cycles[rng.below(spec.topics)];
    const std::size_t len = spec.min_length + rng.below(spec.max_length - spec.min_length + 1);
    std::size_t pos = rng.below(cycle.size());
    std::string text;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t w = rng.uniform() < spec.noise ? rng.below(spec.words) : cycle[pos];
      pos = (pos + 1) % cycle.size();
      if (i) text += ' ';
      text += synthetic_word(w);
    }
    corpus.docs.push_back({std::to_string(d), std::move(text)});
  }
  return corpus;
}

}  // namespace refdistill
