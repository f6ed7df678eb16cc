#pragma once

// Masked-language-model training of a teacher from scratch, so a desk-scale
// teacher has real predictions to distill instead of random ones.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "refdistill/autodiff.hpp"
#include "refdistill/optimizer.hpp"
#include "refdistill/rng.hpp"
#include "refdistill/transformer.hpp"

namespace refdistill {

struct PretrainConfig {
  std::size_t epochs = 0;
  std::size_t batch = 8;
  double mask_rate = 0.15;
  AdamParams adam{1e-3, 0.9, 0.999, 1e-8};
  std::uint64_t seed = 0;
};

/// Trains `teacher` in place on `docs` (token ids, already truncated) and
/// returns the mean masked-token cross-entropy of each epoch. Masks are
/// redrawn every epoch from the seed.
inline std::vector<double> mlm_pretrain(TeacherModel& teacher, const std::vector<std::vector<std::size_t>>& docs,
                                        const PretrainConfig& c, std::size_t mask_token) {
  if (c.batch == 0) throw ValidationError("pretraining batch must be positive");
  std::vector<double> history;
  if (c.epochs == 0) return history;
  if (docs.empty()) throw ValidationError("no pretraining documents");
  Rng rng(c.seed);
  AdamState adam;
  const auto params = weight_list(teacher.weights);
  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += c.batch) {
      const std::size_t end = std::min(order.size(), start + c.batch);
      std::vector<Tensor> grads;
      for (std::size_t i = start; i < end; ++i) {
        std::vector<std::size_t> tokens = docs[order[i]];
        if (tokens.empty()) continue;
        const std::size_t n = std::clamp<std::size_t>(
            static_cast<std::size_t>(c.mask_rate * static_cast<double>(tokens.size()) + 0.5), 1, tokens.size());
        std::vector<std::size_t> positions(tokens.size());
        for (std::size_t p = 0; p < positions.size(); ++p) positions[p] = p;
        rng.shuffle(positions);
        positions.resize(n);
        std::sort(positions.begin(), positions.end());
        std::vector<std::size_t> labels;
        for (std::size_t p : positions) {
          labels.push_back(tokens[p]);
          tokens[p] = mask_token;
        }

        Tape tape;
        auto w = bind(tape, teacher.weights, true);
        const ForwardVars fv = teacher_forward(w, teacher.config, tokens);
        const Var loss = ad::cross_entropy_rows(fv.logits, positions, labels);
        epoch_loss += loss.value().item();
        tape.backward(loss);
        const auto vars = var_list(w);
        for (std::size_t k = 0; k < vars.size(); ++k) {
          if (grads.size() <= k) {
            grads.push_back(tape.grad(vars[k]));
          } else {
            const Tensor g = tape.grad(vars[k]);
            for (std::size_t e = 0; e < g.size(); ++e) grads[k][e] += g[e];
          }
        }
      }
      if (grads.empty()) continue;
      const double scale = 1.0 / static_cast<double>(end - start);
      for (Tensor& g : grads)
        for (double& v : g.values()) v *= scale;
      adam_update(params, grads, adam, c.adam);
    }
    history.push_back(epoch_loss / static_cast<double>(docs.size()));
  }
  return history;
}

}  // namespace refdistill
