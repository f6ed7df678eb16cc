#pragma once

// Does the reference matter? Trains the same student twice per seed, once
// with the BM25 references and once with references reassigned at random,
// and compares the hidden-state loss on a held-out split.

#include <cstdint>
#include <string>
#include <vector>

#include "refdistill/distillation.hpp"

namespace refdistill {

struct RelevanceRow {
  std::uint64_t seed = 0;
  std::size_t train = 0;
  std::size_t heldout = 0;
  double true_hidden = 0.0;      // held-out hidden loss with BM25 references
  double shuffled_hidden = 0.0;  // same with reassigned references

  double delta() const { return shuffled_hidden - true_hidden; }
};

/// A permutation without fixed points where, additionally, no example gets
/// its own document or its true reference back. Needs at least three
/// examples with distinct references to succeed reliably.
inline std::vector<std::size_t> reference_shuffle(std::span<const TrainingExample> ex, Rng& rng) {
  const std::size_t n = ex.size();
  if (n < 3) throw ValidationError("reference shuffling needs at least three examples");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  // Sattolo: a single n-cycle, so perm[i] != i.
  for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[static_cast<std::size_t>(rng.below(i))]);
  auto bad = [&](std::size_t i, std::size_t j) {
    const std::string& r = ex[j].reference.doc_id;
    return i == j || r == ex[i].x_id || r == ex[i].reference.doc_id;
  };
  for (std::size_t pass = 0; pass < 4 * n; ++pass) {
    bool clean = true;
    for (std::size_t i = 0; i < n; ++i) {
      if (!bad(i, perm[i])) continue;
      clean = false;
      const std::size_t k = static_cast<std::size_t>(rng.below(n));
      if (!bad(i, perm[k]) && !bad(k, perm[i])) std::swap(perm[i], perm[k]);
    }
    if (clean) return perm;
  }
  throw ValidationError("could not reassign references without repeating the true ones");
}

/// For each seed: a 90/10 split, one student trained on each condition from
/// the same initialization for config.epochs epochs, then held-out hidden
/// loss (summed over student layers) under each condition's references.
inline std::vector<RelevanceRow> relevance_report(std::span<const TrainingExample> examples,
                                                  const ModelConfig& student_config,
                                                  const ModelConfig& teacher_config, const DistillConfig& config,
                                                  std::size_t seeds) {
  if (examples.size() < 10) throw ValidationError("relevance report needs at least ten examples");
  std::vector<RelevanceRow> rows;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    const std::uint64_t seed = config.seed + s;
    Rng rng(seed);

    std::vector<std::size_t> order(examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const std::size_t heldout = (examples.size() + 9) / 10;

    std::vector<TrainingExample> truth(examples.begin(), examples.end());
    std::vector<TrainingExample> shuffled = truth;
    const auto perm = reference_shuffle(examples, rng);
    for (std::size_t i = 0; i < examples.size(); ++i) shuffled[i].reference = examples[perm[i]].reference;

    auto split = [&](const std::vector<TrainingExample>& all, std::size_t begin, std::size_t end) {
      std::vector<TrainingExample> part;
      for (std::size_t i = begin; i < end; ++i) part.push_back(all[order[i]]);
      return part;
    };

    TrainState init{init_student(student_config, config.delta, rng),
                    init_projections(student_config.num_layers, student_config.hidden_size,
                                     teacher_config.hidden_size, rng),
                    {}};
    DistillConfig c = config;
    c.seed = seed;
    const StepContext ctx = make_step_context(c, student_config, teacher_config);

    RelevanceRow row{seed, examples.size() - heldout, heldout, 0.0, 0.0};
    for (int cond = 0; cond < 2; ++cond) {
      const auto& all = cond == 0 ? truth : shuffled;
      const auto train = split(all, heldout, all.size());
      const auto test = split(all, 0, heldout);
      const DistillResult r = distill_run(init, train, c, teacher_config);
      const double loss = evaluate(r.state, test, ctx).hidden_sum();
      (cond == 0 ? row.true_hidden : row.shuffled_hidden) = loss;
    }
    rows.push_back(row);
  }
  return rows;
}

inline std::string relevance_csv(const std::vector<RelevanceRow>& rows) {
  std::string out = "seed,train,heldout,true_hidden,shuffled_hidden,delta\n";
  for (const auto& r : rows) {
    out += std::to_string(r.seed) + "," + std::to_string(r.train) + "," + std::to_string(r.heldout) + "," +
           detail::format_real(r.true_hidden) + "," + detail::format_real(r.shuffled_hidden) + "," +
           detail::format_real(r.delta()) + "\n";
  }
  return out;
}

}  // namespace refdistill
