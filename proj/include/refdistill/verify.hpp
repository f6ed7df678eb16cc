#pragma once

// Self-contained invariant suite behind `refdistill verify`. Each property
// builds its own small random instances from the seed and reports the
// measured worst case next to its tolerance.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "refdistill/distillation.hpp"
#include "refdistill/grad_check.hpp"
#include "refdistill/infotheory.hpp"
#include "refdistill/reference_index.hpp"
#include "refdistill/transformer.hpp"

namespace refdistill {

struct PropertyResult {
  std::string module;
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace verify_detail {

inline std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

inline PropertyResult bound(std::string module, std::string name, double measured, double tolerance) {
  return {std::move(module), std::move(name), measured <= tolerance,
          "worst " + sci(measured) + " (tolerance " + sci(tolerance) + ")"};
}

inline Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t = Tensor::zeros(r, c);
  for (double& v : t.values()) v = rng.uniform(-scale, scale);
  return t;
}

inline ModelConfig small(std::size_t layers, std::size_t d, std::size_t heads, std::size_t ref = 0) {
  return {layers, d, heads, 2 * d, 11, 8, ref};
}

template <typename W>
void scramble(W& w, Rng& rng) {
  W::visit(w, [&](const std::string& name, Tensor& t) {
    const bool gamma = name.find("gamma") != std::string::npos;
    for (double& v : t.values()) v = gamma ? rng.uniform(0.5, 1.5) : rng.uniform(-0.6, 0.6);
  });
}

template <template <typename> class W>
W<Var> unflatten(const W<Tensor>& like, std::span<const Var> vars, std::size_t& offset) {
  W<Var> out;
  out.resize_like(like);
  W<Var>::visit(out, [&](const std::string&, Var& v) { v = vars[offset++]; });
  return out;
}

inline std::vector<std::size_t> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::size_t> t(n);
  for (auto& x : t) x = rng.below(vocab);
  return t;
}

inline StudentModel student_from_teacher(const TeacherModel& t) {
  ModelConfig sc = t.config;
  sc.reference_hidden_size = t.config.hidden_size;
  StudentModel s{sc, 0.0, {}};
  s.weights.token_embedding = t.weights.token_embedding;
  s.weights.position_embedding = t.weights.position_embedding;
  s.weights.first = t.weights.layers.at(0);
  s.weights.layers.assign(t.weights.layers.begin() + 1, t.weights.layers.end());
  s.weights.ref_wk = Tensor::zeros(sc.hidden_size, sc.hidden_size);
  s.weights.ref_wv = Tensor::zeros(sc.hidden_size, sc.hidden_size);
  s.weights.output_bias = t.weights.output_bias;
  return s;
}

}  // namespace verify_detail

// ---------------------------------------------------------------------------
// Individual properties, also used by the acceptance report.

/// Parameter accounting of the full-size presets.
inline PropertyResult check_param_counts() {
  const double teacher = static_cast<double>(param_count(presets::teacher_base(), ModelRole::kTeacher));
  const double student = static_cast<double>(param_count(presets::student_tiny(), ModelRole::kStudent));
  const double ratio = teacher / student;
  const bool ok = std::abs(teacher / 109e6 - 1.0) <= 0.02 && std::abs(student / 14.8e6 - 1.0) <= 0.02 &&
                  ratio >= 7.0 && ratio <= 7.8;
  std::ostringstream os;
  os << "teacher-base " << static_cast<std::size_t>(teacher) << ", student-tiny " << static_cast<std::size_t>(student)
     << ", ratio " << ratio;
  return {"transformer", "parameter counts", ok, os.str()};
}

/// Max relative gradient error of the student first layer and the whole
/// distillation objective on a small config, over `seeds` seeds.
inline double worst_objective_grad_error(std::uint64_t seed, std::size_t seeds) {
  using namespace verify_detail;
  double worst = 0.0;
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng(seed * 1000 + s);
    TeacherModel teacher = init_teacher(small(3, 8, 2), rng);
    scramble(teacher.weights, rng);
    StudentModel student = init_student(small(1, 4, 2, 8), 0.05, rng);
    scramble(student.weights, rng);
    const ProjectionSet proj = init_projections(1, 4, 8, rng);
    ReferenceContext ref{"r", random_tensor(rng, 3, 8), random_tensor(rng, 3, 8)};
    const auto tokens = random_tokens(rng, 5, 11);
    const std::vector<std::size_t> rows{1, 3};
    const ForwardPass tp = teacher_forward(tokens, teacher);
    std::vector<Tensor> params;
    for (const Tensor* t : weight_list(student.weights)) params.push_back(*t);
    for (const Tensor* t : weight_list(proj)) params.push_back(*t);
    const std::vector<double> lambdas{1, 1, 1};
    const std::vector<std::size_t> map{3};
    auto f = [&](Tape&, std::span<const Var> p) {
      std::size_t offset = 0;
      const auto sw = unflatten(student.weights, p, offset);
      const auto pw = unflatten(proj, p, offset);
      const auto fv = student_forward(sw, student.config, 0.05, tokens, ref);
      return total_loss(fv, tp, pw, lambdas, map, 1.0, rows).total;
    };
    worst = std::max(worst, grad_check(f, params, 1e-5).max_relative_error);
  }
  return worst;
}

/// Worst |row sum - (1 - n delta)| and worst |shifted(delta = 0) - softmax|.
struct ShiftIdentity {
  double row_sum_error = 0.0;
  double zero_delta_error = 0.0;
};

inline ShiftIdentity shift_identity(std::uint64_t seed, std::size_t matrices) {
  Rng rng(seed);
  ShiftIdentity out;
  for (std::size_t m = 0; m < matrices; ++m) {
    const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(12);
    const Tensor s = verify_detail::random_tensor(rng, rows, cols, 5.0);
    for (double delta : {0.0, 0.01, 0.05, 0.2}) {
      const Tensor w = shifted_softmax_rows(s, delta, {});
      for (std::size_t r = 0; r < rows; ++r) {
        double sum = 0.0;
        for (double v : w.row(r)) sum += v;
        out.row_sum_error =
            std::max(out.row_sum_error, std::abs(sum - (1.0 - static_cast<double>(cols) * delta)));
      }
      if (delta == 0.0) out.zero_delta_error = std::max(out.zero_delta_error, max_abs_diff(w, softmax_rows(s)));
    }
  }
  return out;
}

/// Worst deviation of a student whose generic layers carry the teacher's
/// weights from the teacher, layer by layer and in the logits. The first
/// layer sees an empty reference at delta = 0, so every layer should agree.
inline double generic_layer_reduction_error(std::uint64_t seed, std::size_t trials) {
  using namespace verify_detail;
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(seed + t);
    TeacherModel teacher = init_teacher(small(3, 8, 2), rng);
    scramble(teacher.weights, rng);
    const StudentModel student = student_from_teacher(teacher);
    const auto tokens = random_tokens(rng, 6, 11);
    const ReferenceContext empty{"none", Tensor::zeros(0, 8), Tensor::zeros(0, 8)};
    const ForwardPass a = teacher_forward(tokens, teacher);
    const ForwardPass b = student_forward(tokens, empty, student);
    for (std::size_t l = 0; l < a.hidden.size(); ++l) worst = std::max(worst, max_abs_diff(a.hidden[l], b.hidden[l]));
    worst = std::max(worst, max_abs_diff(a.logits, b.logits));
  }
  return worst;
}

/// Worst deviation of the empty-reference, delta = 0 first layer from the
/// vanilla layer.
inline double empty_reference_reduction_error(std::uint64_t seed, std::size_t trials) {
  using namespace verify_detail;
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(seed + t);
    const ModelConfig c = small(1, 8, 2, 6);
    StudentModel s = init_student(c, 0.0, rng);
    scramble(s.weights, rng);
    const Tensor x = random_tensor(rng, 4, 8);
    const ReferenceContext empty{"none", Tensor::zeros(0, 6), Tensor::zeros(0, 6)};
    Tape tape;
    const auto w = bind(tape, s.weights, false);
    const Var xv = tape.constant(x);
    const LayerOutput a = student_first_layer(xv, empty, w.first, w.ref_wk, w.ref_wv, c, 0.0);
    const LayerOutput b = encoder_layer(xv, w.first, c);
    worst = std::max(worst, max_abs_diff(a.hidden.value(), b.hidden.value()));
    for (std::size_t h = 0; h < c.num_heads; ++h)
      worst = std::max(worst, max_abs_diff(a.scores[h].value(), b.scores[h].value()));
  }
  return worst;
}

/// Largest layer-term objective (prediction weight 0) for an
/// identical-architecture student at teacher weights, plus the largest
/// |prediction - teacher entropy| seen.
struct LossFloor {
  double total = 0.0;
  double prediction_minus_entropy = 0.0;
};

inline LossFloor identical_student_loss_floor(std::uint64_t seed, std::size_t trials) {
  using namespace verify_detail;
  LossFloor out;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(seed + t);
    const ModelConfig c = small(3, 8, 2);
    TeacherModel teacher = init_teacher(c, rng);
    scramble(teacher.weights, rng);
    const StudentModel student = student_from_teacher(teacher);
    const auto tokens = random_tokens(rng, 6, 11);
    const std::vector<std::size_t> rows{0, 3, 5};
    const ReferenceContext empty{"none", Tensor::zeros(0, 8), Tensor::zeros(0, 8)};
    const ForwardPass tp = teacher_forward(tokens, teacher);
    Tape tape;
    const auto sw = bind(tape, student.weights, true);
    const auto pw = bind(tape, identity_projections(3, 8), false);
    const auto fv = student_forward(sw, student.config, 0.0, tokens, empty);
    const std::vector<std::size_t> map{1, 2, 3};
    const LossBreakdown b = total_loss(fv, tp, pw, std::vector<double>{1, 1, 1, 1, 0}, map, 1.0, rows).values();
    out.total = std::max(out.total, b.total);
    double entropy = 0.0;
    for (std::size_t r : rows) {
      std::vector<double> p(tp.logits.cols());
      double mx = -INFINITY, z = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) mx = std::max(mx, tp.logits(r, k));
      for (std::size_t k = 0; k < p.size(); ++k) z += (p[k] = std::exp(tp.logits(r, k) - mx));
      for (double& v : p) v /= z;
      entropy += refdistill::entropy(p) / static_cast<double>(rows.size());
    }
    out.prediction_minus_entropy = std::max(out.prediction_minus_entropy, std::abs(b.prediction - entropy));
  }
  return out;
}

/// Queries whose nearest reference differs from a full scan, and whether any
/// query was paired with itself.
struct Bm25Agreement {
  std::size_t queries = 0;
  std::size_t mismatches = 0;
  std::size_t self_matches = 0;
};

inline Bm25Agreement bm25_brute_force_agreement(std::uint64_t seed, std::size_t docs) {
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> corpus(docs);
  for (auto& d : corpus) d = verify_detail::random_tokens(rng, 1 + rng.below(15), 40);
  const InvertedIndex index = build_index(corpus);
  Bm25Agreement out;
  for (std::size_t x = 0; x < docs; ++x) {
    const Match m = nearest_reference(index, x);
    std::size_t best = docs;
    double best_score = -INFINITY;
    for (std::size_t d = 0; d < docs; ++d) {
      if (d == x) continue;
      const double s = bm25_score(index, corpus[x], d);
      if (s > best_score) {
        best_score = s;
        best = d;
      }
    }
    ++out.queries;
    out.mismatches += m.doc != best;
    out.self_matches += m.doc == x;
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Every invariant, in module order.
inline std::vector<PropertyResult> run_verify_suite(std::uint64_t seed) {
  using namespace verify_detail;
  std::vector<PropertyResult> out;

  // tensor_core
  {
    Rng rng(seed);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
      const Tensor s = softmax_rows(random_tensor(rng, 1 + rng.below(5), 1 + rng.below(9), 10.0));
      for (std::size_t r = 0; r < s.rows(); ++r) {
        double sum = 0.0;
        for (double v : s.row(r)) sum += v;
        worst = std::max(worst, std::abs(sum - 1.0));
      }
    }
    out.push_back(bound("tensor_core", "softmax rows sum to 1", worst, 1e-12));
  }
  {
    Rng rng(seed + 1);
    double worst = 0.0;
    for (int t = 0; t < 5; ++t) {
      const Tensor x = random_tensor(rng, 3, 5), g = random_tensor(rng, 1, 5), b = random_tensor(rng, 1, 5);
      const Tensor w = random_tensor(rng, 5, 4), target = random_tensor(rng, 3, 4, 3.0);
      auto f = [&](Tape&, std::span<const Var> p) {
        const Var h = ad::gelu(ad::matmul(ad::layer_norm(p[0], p[1], p[2], 1e-12), p[3]));
        return ad::soft_cross_entropy_rows(target, ad::softmax_rows(h), 1.0);
      };
      worst = std::max(worst, grad_check(f, {x, g, b, w}).max_relative_error);
    }
    out.push_back(bound("tensor_core", "gradient check of composed kernels", worst, 1e-4));
  }
  {
    Rng rng(seed + 2);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
      const Tensor o = random_tensor(rng, 2, 6, 4.0), s = random_tensor(rng, 2, 6, 4.0);
      Tape tape;
      const double ce = ad::soft_cross_entropy_rows(o, tape.constant(s), 1.0).value().item();
      const double floor = ad::soft_cross_entropy_rows(o, tape.constant(o), 1.0).value().item();
      worst = std::max(worst, floor - ce);
    }
    out.push_back(bound("tensor_core", "soft cross-entropy >= teacher entropy", std::max(worst, 0.0), 1e-12));
  }

  // transformer
  out.push_back(check_param_counts());
  {
    const ShiftIdentity s = shift_identity(seed, 100);
    out.push_back(bound("transformer", "shifted rows sum to 1 - n delta", s.row_sum_error, 1e-12));
    out.push_back(bound("transformer", "delta = 0 equals standard attention", s.zero_delta_error, 1e-12));
  }
  out.push_back(bound("transformer", "generic layers reduce to teacher", generic_layer_reduction_error(seed, 5), 1e-12));
  out.push_back(
      bound("transformer", "empty reference, delta = 0 reduces to vanilla", empty_reference_reduction_error(seed, 5),
            1e-12));
  {
    Rng rng(seed + 3);
    const ModelConfig c = small(1, 8, 2, 6);
    StudentModel s = init_student(c, 0.05, rng);
    scramble(s.weights, rng);
    ReferenceContext ref{"r", random_tensor(rng, 4, 6), random_tensor(rng, 4, 6)};
    ReferenceContext perm = ref;
    const std::size_t order[] = {2, 0, 3, 1};
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t k = 0; k < 6; ++k) {
        perm.emb(i, k) = ref.emb(order[i], k);
        perm.hid(i, k) = ref.hid(order[i], k);
      }
    const auto tokens = random_tokens(rng, 5, 11);
    const double diff = max_abs_diff(student_forward(tokens, ref, s).hidden.back(),
                                     student_forward(tokens, perm, s).hidden.back());
    out.push_back(bound("transformer", "reference row order does not matter", diff, 1e-12));
  }

  // reference_index
  {
    const Bm25Agreement a = bm25_brute_force_agreement(seed, 100);
    out.push_back({"reference_index", "nearest reference equals full scan", a.mismatches == 0 && a.self_matches == 0,
                   std::to_string(a.queries) + " queries, " + std::to_string(a.mismatches) + " mismatches, " +
                       std::to_string(a.self_matches) + " self matches"});
  }

  // distillation
  out.push_back(bound("distillation", "objective gradient check", worst_objective_grad_error(seed, 3), 1e-4));
  {
    const LossFloor f = identical_student_loss_floor(seed, 3);
    out.push_back(bound("distillation", "identical student at teacher weights has zero loss", f.total, 1e-20));
    out.push_back(bound("distillation", "prediction loss floor is the teacher entropy", f.prediction_minus_entropy,
                        1e-12));
  }
  {
    Rng rng(seed + 4);
    TeacherModel teacher = init_teacher(small(6, 8, 2), rng);
    StudentModel student = init_student(small(2, 4, 2, 8), 0.05, rng);
    scramble(student.weights, rng);
    const ProjectionSet proj = init_projections(2, 4, 8, rng);
    ReferenceContext ref{"r", random_tensor(rng, 3, 8), random_tensor(rng, 3, 8)};
    const auto tokens = random_tokens(rng, 6, 11);
    const std::vector<std::size_t> rows{2};
    const std::vector<double> lambdas{0.3, 1.0, 2.0, 0.5};
    const std::vector<std::size_t> map{3, 6};
    const ForwardPass tp = teacher_forward(tokens, teacher);
    Tape tape;
    const auto sw = bind(tape, student.weights, true);
    const auto pw = bind(tape, proj, true);
    const auto fv = student_forward(sw, student.config, 0.05, tokens, ref);
    const LossVars l = total_loss(fv, tp, pw, lambdas, map, 1.0, rows);
    const LossBreakdown b = l.values();
    out.push_back(bound("distillation", "total equals weighted component sum",
                        std::abs(b.total - b.weighted_sum(lambdas)), 1e-12));
    tape.backward(l.total);
    std::size_t leaked = 0;
    for (std::size_t i = 0; i < tape.size(); ++i) {
      const Var v{&tape, i};
      leaked += !tape.requires_grad(v) && tape.has_grad(v);
    }
    out.push_back({"distillation", "no gradient reaches teacher outputs or reference", leaked == 0,
                   std::to_string(leaked) + " frozen nodes with gradients"});

    Tape t2;
    Tensor scores = random_tensor(rng, 3, 5);
    const std::vector<Tensor> teacher_scores{random_tensor(rng, 3, 3)};
    const double a = loss_attention(std::vector<Var>{t2.constant(scores)}, teacher_scores).value().item();
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 3; c < 5; ++c) scores(r, c) = rng.uniform(-50, 50);
    const double b2 = loss_attention(std::vector<Var>{t2.constant(scores)}, teacher_scores).value().item();
    out.push_back(bound("distillation", "attention loss ignores reference columns", std::abs(a - b2), 0.0));
  }

  // infotheory
  for (const SweepResult& s : run_theorem_sweeps(1000, seed)) {
    std::ostringstream os;
    os << s.trials << " trials, min margin " << sci(s.min_margin) << ", max residual " << sci(s.max_residual);
    out.push_back({"infotheory", s.theorem, s.passed, os.str()});
  }
  return out;
}

inline std::string format_verify(const std::vector<PropertyResult>& results) {
  std::ostringstream os;
  for (const auto& r : results)
    os << (r.passed ? "PASS" : "FAIL") << "  [" << r.module << "] " << r.name << ": " << r.detail << '\n';
  return os.str();
}

}  // namespace refdistill
