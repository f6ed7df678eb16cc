#include <gtest/gtest.h>

#include <cmath>

#include "refdistill/checkpoint.hpp"
#include "refdistill/distillation.hpp"
#include "refdistill/grad_check.hpp"
#include "test_models.hpp"

using namespace refdistill;
using namespace testing_models;

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t = Tensor::zeros(r, c);
  for (double& v : t.values()) v = rng.uniform(-scale, scale);
  return t;
}

double scalar_mse(const Tensor& a, const Tensor& b) {
  // Compares the first b.cols() columns of a with b.
  const std::size_t n = b.cols();
  double s = 0.0;
  for (std::size_t r = 0; r < b.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) s += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
  return s / static_cast<double>(b.rows() * n);
}

double scalar_soft_ce(const Tensor& o, const Tensor& os, double t, const std::vector<std::size_t>& rows) {
  double total = 0.0;
  for (std::size_t r : rows) {
    double zt = 0.0, zs = 0.0;
    for (std::size_t c = 0; c < o.cols(); ++c) {
      zt += std::exp(o(r, c));
      zs += std::exp(os(r, c) / t);
    }
    for (std::size_t c = 0; c < o.cols(); ++c) total -= std::exp(o(r, c)) / zt * (os(r, c) / t - std::log(zs));
  }
  return total / static_cast<double>(rows.size());
}

// Teacher with 3 layers of width 8 and a 1-layer student of width 4, so the
// default m(l) = 3l applies.
struct Toy {
  TeacherModel teacher;
  StudentModel student;
  ProjectionSet proj;
  ReferenceContext ref;
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> rows;

  explicit Toy(std::uint64_t seed, std::size_t student_layers = 1) {
    Rng rng(seed);
    teacher = init_teacher(tiny(3 * student_layers, 8, 2), rng);
    scramble(teacher.weights, rng);
    student = init_student(tiny(student_layers, 4, 2, 8), 0.05, rng);
    scramble(student.weights, rng);
    proj = init_projections(student_layers, 4, 8, rng);
    ref = random_ref(rng, 3, 8);
    tokens = {3, 1, 4, 1, 5};
    rows = {1, 3};
  }
};

template <template <typename> class W>
W<Var> unflatten(const W<Tensor>& like, std::span<const Var> vars, std::size_t& offset) {
  W<Var> out;
  out.resize_like(like);
  W<Var>::visit(out, [&](const std::string&, Var& v) { v = vars[offset++]; });
  return out;
}

template <typename W>
std::vector<Tensor> flatten(const W& w) {
  std::vector<Tensor> out;
  for (const Tensor* t : weight_list(w)) out.push_back(*t);
  return out;
}

std::vector<TrainingExample> toy_examples(const Toy& toy, std::size_t n) {
  std::vector<TrainingExample> out;
  Rng rng(99);
  for (std::size_t i = 0; i < n; ++i) {
    TrainingExample ex;
    ex.x_id = std::to_string(i);
    for (std::size_t k = 0; k < 4 + i % 3; ++k) ex.tokens.push_back(3 + rng.below(8));
    ex.masked_positions = mask_tokens(ex.tokens, 0.3, rng);
    ex.teacher = teacher_forward(ex.tokens, toy.teacher);
    ex.reference = toy.ref;
    out.push_back(std::move(ex));
  }
  return out;
}

DistillConfig toy_config() {
  DistillConfig c;
  c.epochs = 2;
  c.batch = 2;
  c.seed = 5;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(LayerMap, EmbeddingAndPredictionEnds) {
  EXPECT_EQ(layer_map(0, 4, 12), 0u);
  EXPECT_EQ(layer_map(2, 4, 12), 6u);
  EXPECT_EQ(layer_map(5, 4, 12), 13u);
  EXPECT_EQ(layer_map(1, 2, 6), 3u);
}

TEST(LayerMap, IncompatibleDepthsNeedCustomMap) {
  EXPECT_THROW(layer_map(1, 4, 10), ValidationError);
  EXPECT_THROW(layer_map(6, 4, 12), ValidationError);
  const std::vector<std::size_t> custom{2, 5, 7, 10};
  EXPECT_EQ(layer_map(3, 4, 10, custom), 7u);
  EXPECT_EQ(layer_map(5, 4, 10, custom), 11u);
}

TEST(LayerMap, CustomMapValidation) {
  DistillConfig c;
  c.map = LayerMapKind::kCustom;
  c.custom_map = {2, 1};
  EXPECT_THROW(resolve_layer_map(c, 2, 6), ValidationError);
  c.custom_map = {1, 7};
  EXPECT_THROW(resolve_layer_map(c, 2, 6), ValidationError);
  c.custom_map = {1};
  EXPECT_THROW(resolve_layer_map(c, 2, 6), ValidationError);
  c.custom_map = {2, 2};
  EXPECT_EQ(resolve_layer_map(c, 2, 6), (std::vector<std::size_t>{2, 2}));
  EXPECT_EQ(resolve_layer_map(DistillConfig{}, 2, 6), (std::vector<std::size_t>{3, 6}));
}

TEST(ProjectedMse, ExactProjectionIsZero) {
  Rng rng(1);
  const Tensor hs = random_tensor(rng, 3, 4), w = random_tensor(rng, 4, 6);
  Tape tape;
  EXPECT_EQ(projected_mse(tape.constant(hs), tape.constant(w), matmul(hs, w)).value().item(), 0.0);
}

TEST(ProjectedMse, ZeroProjectionIsMeanSquare) {
  Rng rng(2);
  const Tensor hs = random_tensor(rng, 3, 4), ht = random_tensor(rng, 3, 6);
  Tape tape;
  double expected = 0.0;
  for (double v : ht.values()) expected += v * v / 18.0;
  EXPECT_NEAR(projected_mse(tape.constant(hs), tape.constant(Tensor::zeros(4, 6)), ht).value().item(), expected,
              1e-15);
}

TEST(ProjectedMse, MatchesScalarLoop) {
  Rng rng(3);
  const Tensor hs = random_tensor(rng, 5, 3), w = random_tensor(rng, 3, 7), ht = random_tensor(rng, 5, 7);
  double expected = 0.0;
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 7; ++c) {
      double p = 0.0;
      for (std::size_t k = 0; k < 3; ++k) p += hs(r, k) * w(k, c);
      expected += (p - ht(r, c)) * (p - ht(r, c));
    }
  Tape tape;
  EXPECT_NEAR(projected_mse(tape.constant(hs), tape.constant(w), ht).value().item(), expected / 35.0, 1e-14);
}

TEST(ProjectedMse, GradientsReachStudentAndProjectionOnly) {
  Rng rng(4);
  const Tensor hs = random_tensor(rng, 3, 4), w = random_tensor(rng, 4, 6), ht = random_tensor(rng, 3, 6);
  const auto report = grad_check(
      [&](Tape&, std::span<const Var> p) { return projected_mse(p[0], p[1], ht); }, {hs, w});
  EXPECT_LE(report.max_relative_error, 1e-6);
  Tape tape;
  const Var a = tape.parameter(hs), b = tape.parameter(w);
  tape.backward(projected_mse(a, b, ht));
  for (std::size_t i = 0; i < tape.size(); ++i) {
    const Var v{&tape, i};
    if (!tape.requires_grad(v)) {
      EXPECT_FALSE(tape.has_grad(v)) << "node " << i;
    }
  }
}

TEST(ProjectedMse, ShapeMismatch) {
  Tape tape;
  EXPECT_THROW(projected_mse(tape.constant(Tensor::zeros(3, 4)), tape.constant(Tensor::zeros(5, 6)),
                             Tensor::zeros(3, 6)),
               ShapeError);
}

TEST(AttentionLoss, IdenticalScoresGiveZero) {
  Rng rng(5);
  std::vector<Tensor> t{random_tensor(rng, 3, 3), random_tensor(rng, 3, 3)};
  Tape tape;
  std::vector<Var> s{tape.constant(t[0]), tape.constant(t[1])};
  EXPECT_EQ(loss_attention(s, t).value().item(), 0.0);
}

TEST(AttentionLoss, ReferenceColumnIgnored) {
  Tape tape;
  std::vector<Var> s{tape.constant(Tensor::from_rows({{1, 2, 9}}))};
  std::vector<Tensor> t{Tensor::from_rows({{1, 2}})};
  EXPECT_EQ(loss_attention(s, t).value().item(), 0.0);
}

TEST(AttentionLoss, HandSummedTwoHeads) {
  Rng rng(6);
  std::vector<Tensor> student{random_tensor(rng, 3, 5), random_tensor(rng, 3, 5)};
  std::vector<Tensor> teacher{random_tensor(rng, 3, 3), random_tensor(rng, 3, 3)};
  double expected = 0.0;
  for (std::size_t h = 0; h < 2; ++h) {
    double s = 0.0;
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 3; ++c) s += std::pow(student[h](r, c) - teacher[h](r, c), 2);
    expected += s / 9.0 / 2.0;
  }
  Tape tape;
  std::vector<Var> s{tape.constant(student[0]), tape.constant(student[1])};
  EXPECT_NEAR(loss_attention(s, teacher).value().item(), expected, 1e-15);
}

TEST(AttentionLoss, InvariantToReferenceColumnContent) {
  Rng rng(7);
  Tensor a = random_tensor(rng, 2, 6);
  const std::vector<Tensor> teacher{random_tensor(rng, 2, 2)};
  Tape tape;
  const double before = loss_attention(std::vector<Var>{tape.constant(a)}, teacher).value().item();
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 2; c < 6; ++c) a(r, c) = rng.uniform(-100, 100);
  EXPECT_EQ(loss_attention(std::vector<Var>{tape.constant(a)}, teacher).value().item(), before);
}

TEST(AttentionLoss, HeadCountMismatch) {
  Tape tape;
  std::vector<Var> s{tape.constant(Tensor::zeros(2, 2))};
  std::vector<Tensor> t{Tensor::zeros(2, 2), Tensor::zeros(2, 2)};
  EXPECT_THROW(loss_attention(s, t), ShapeError);
}

TEST(PredictionLoss, EqualLogitsGiveTeacherEntropy) {
  const Tensor o = Tensor::from_rows({{0.3, -1.2, 2.0, 0.5}});
  Tape tape;
  EXPECT_NEAR(loss_prediction(o, tape.constant(o), 1.0).value().item(), 0.9054285437205618, 1e-14);
}

TEST(PredictionLoss, UniformIsLogK) {
  Tape tape;
  const Tensor u({3, 7}, 0.25);
  EXPECT_NEAR(loss_prediction(u, tape.constant(Tensor({3, 7}, -1.0)), 1.0).value().item(), std::log(7.0), 1e-15);
}

TEST(PredictionLoss, MatchesScalarLoop) {
  Rng rng(8);
  const Tensor o = random_tensor(rng, 4, 6, 3.0), os = random_tensor(rng, 4, 6, 3.0);
  const std::vector<std::size_t> rows{0, 2, 3};
  for (double t : {1.0, 2.0}) {
    Tape tape;
    EXPECT_NEAR(loss_prediction(o, tape.constant(os), t, rows).value().item(), scalar_soft_ce(o, os, t, rows), 1e-13);
  }
}

TEST(TotalLoss, ZeroWeightsGiveZero) {
  Toy toy(10);
  const ForwardPass tp = teacher_forward(toy.tokens, toy.teacher);
  Tape tape;
  const auto sw = bind(tape, toy.student.weights, true);
  const auto pw = bind(tape, toy.proj, true);
  const auto fv = student_forward(sw, toy.student.config, 0.05, toy.tokens, toy.ref);
  const std::vector<double> lambdas{0, 0, 0};
  const std::vector<std::size_t> map{3};
  EXPECT_EQ(total_loss(fv, tp, pw, lambdas, map, 1.0, toy.rows).total.value().item(), 0.0);
}

TEST(TotalLoss, OneHotSelectsEmbeddingLoss) {
  Toy toy(11);
  const ForwardPass tp = teacher_forward(toy.tokens, toy.teacher);
  Tape tape;
  const auto sw = bind(tape, toy.student.weights, true);
  const auto pw = bind(tape, toy.proj, true);
  const auto fv = student_forward(sw, toy.student.config, 0.05, toy.tokens, toy.ref);
  const std::vector<double> lambdas{1, 0, 0};
  const std::vector<std::size_t> map{3};
  const LossVars l = total_loss(fv, tp, pw, lambdas, map, 1.0, toy.rows);
  EXPECT_EQ(l.total.value().item(), l.embedding.value().item());
}

TEST(TotalLoss, EqualsIndependentComponentSum) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Toy toy(20 + seed, 2);
    const ForwardPass tp = teacher_forward(toy.tokens, toy.teacher);
    const ForwardPass sp = student_forward(toy.tokens, toy.ref, toy.student);
    const std::vector<double> lambdas{0.5, 1.0, 2.0, 0.7};
    const std::vector<std::size_t> map{3, 6};
    Tape tape;
    const auto sw = bind(tape, toy.student.weights, false);
    const auto pw = bind(tape, toy.proj, false);
    const auto fv = student_forward(sw, toy.student.config, 0.05, toy.tokens, toy.ref);
    const LossBreakdown b = total_loss(fv, tp, pw, lambdas, map, 1.0, toy.rows).values();

    const double emb = scalar_mse(matmul(sp.hidden[0], toy.proj.embedding), tp.hidden[0]);
    double expected = lambdas[0] * emb;
    EXPECT_NEAR(b.embedding, emb, 1e-14);
    for (std::size_t l = 1; l <= 2; ++l) {
      const double hid = scalar_mse(matmul(sp.hidden[l], toy.proj.layers[l - 1]), tp.hidden[map[l - 1]]);
      double att = 0.0;
      for (std::size_t h = 0; h < 2; ++h) att += scalar_mse(sp.scores[l - 1][h], tp.scores[map[l - 1] - 1][h]) / 2.0;
      EXPECT_NEAR(b.hidden[l - 1], hid, 1e-14);
      EXPECT_NEAR(b.attention[l - 1], att, 1e-14);
      expected += lambdas[l] * (hid + att);
    }
    const double pred = scalar_soft_ce(tp.logits, sp.logits, 1.0, toy.rows);
    EXPECT_NEAR(b.prediction, pred, 1e-13);
    expected += lambdas[3] * pred;
    EXPECT_NEAR(b.total, expected, 1e-12);
    EXPECT_NEAR(b.total, b.weighted_sum(lambdas), 1e-12);
  }
}

TEST(TotalLoss, DroppingLayerOneAttention) {
  Toy toy(12);
  const ForwardPass tp = teacher_forward(toy.tokens, toy.teacher);
  Tape tape;
  const auto sw = bind(tape, toy.student.weights, false);
  const auto pw = bind(tape, toy.proj, false);
  const auto fv = student_forward(sw, toy.student.config, 0.05, toy.tokens, toy.ref);
  const std::vector<double> lambdas{1, 1, 1};
  const std::vector<std::size_t> map{3};
  const LossBreakdown b = total_loss(fv, tp, pw, lambdas, map, 1.0, toy.rows, false).values();
  EXPECT_EQ(b.attention[0], 0.0);
  EXPECT_NEAR(b.total, b.embedding + b.hidden[0] + b.prediction, 1e-14);
}

TEST(TotalLoss, WholeGraphGradientCheck) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Toy toy(30 + seed);
    const ForwardPass tp = teacher_forward(toy.tokens, toy.teacher);
    std::vector<Tensor> params = flatten(toy.student.weights);
    for (Tensor& t : flatten(toy.proj)) params.push_back(t);
    const std::vector<double> lambdas{1, 1, 1};
    const std::vector<std::size_t> map{3};
    auto f = [&](Tape&, std::span<const Var> p) {
      std::size_t offset = 0;
      const auto sw = unflatten(toy.student.weights, p, offset);
      const auto pw = unflatten(toy.proj, p, offset);
      const auto fv = student_forward(sw, toy.student.config, 0.05, toy.tokens, toy.ref);
      return total_loss(fv, tp, pw, lambdas, map, 1.0, toy.rows).total;
    };
    EXPECT_LE(grad_check(f, params, 1e-5).max_relative_error, 1e-4) << "seed " << seed;
  }
}

TEST(TotalLoss, NoGradientReachesTeacherOrReference) {
  Toy toy(13);
  const ForwardPass tp = teacher_forward(toy.tokens, toy.teacher);
  Tape tape;
  const auto sw = bind(tape, toy.student.weights, true);
  const auto pw = bind(tape, toy.proj, true);
  const std::size_t first_op = tape.size();
  const auto fv = student_forward(sw, toy.student.config, 0.05, toy.tokens, toy.ref);
  const std::vector<double> lambdas{1, 1, 1};
  const std::vector<std::size_t> map{3};
  const LossVars l = total_loss(fv, tp, pw, lambdas, map, 1.0, toy.rows);
  tape.backward(l.total);
  std::size_t constants = 0;
  for (std::size_t i = first_op; i < tape.size(); ++i) {
    const Var v{&tape, i};
    if (tape.requires_grad(v)) continue;
    ++constants;
    EXPECT_FALSE(tape.has_grad(v)) << "constant node " << i << " received a gradient";
  }
  EXPECT_GT(constants, 0u);  // teacher targets and reference tensors are among them
}

// Identical architecture, teacher weights, empty reference, delta 0, identity
// projections and m(l) = l: every layer term vanishes.
TEST(TotalLoss, FloorAtTeacherWeights) {
  Rng rng(14);
  const ModelConfig tc = tiny(3, 8, 2);
  TeacherModel teacher = init_teacher(tc, rng);
  scramble(teacher.weights, rng);
  ModelConfig sc = tc;
  sc.reference_hidden_size = tc.hidden_size;
  StudentModel student{sc, 0.0, {}};
  student.weights.token_embedding = teacher.weights.token_embedding;
  student.weights.position_embedding = teacher.weights.position_embedding;
  student.weights.first = teacher.weights.layers[0];
  student.weights.layers.assign(teacher.weights.layers.begin() + 1, teacher.weights.layers.end());
  student.weights.ref_wk = Tensor::zeros(8, 8);
  student.weights.ref_wv = Tensor::zeros(8, 8);
  student.weights.output_bias = teacher.weights.output_bias;
  const ReferenceContext empty{"none", Tensor::zeros(0, 8), Tensor::zeros(0, 8)};
  const std::vector<std::size_t> tokens{1, 5, 2, 7, 3, 3};
  const std::vector<std::size_t> rows{1, 4};

  const ForwardPass tp = teacher_forward(tokens, teacher);
  Tape tape;
  const auto sw = bind(tape, student.weights, true);
  const auto pw = bind(tape, identity_projections(3, 8), false);
  const auto fv = student_forward(sw, sc, 0.0, tokens, empty);
  const std::vector<std::size_t> map{1, 2, 3};
  const LossBreakdown b = total_loss(fv, tp, pw, std::vector<double>{1, 1, 1, 1, 0}, map, 1.0, rows).values();
  EXPECT_LE(b.total, 1e-20);
  // The prediction term sits at its own floor: the teacher's entropy.
  double entropy = 0.0;
  for (std::size_t r : rows) {
    double z = 0.0;
    for (std::size_t c = 0; c < tp.logits.cols(); ++c) z += std::exp(tp.logits(r, c));
    for (std::size_t c = 0; c < tp.logits.cols(); ++c) {
      const double p = std::exp(tp.logits(r, c)) / z;
      entropy -= p * std::log(p) / 2.0;
    }
  }
  EXPECT_NEAR(b.prediction, entropy, 1e-12);
}

TEST(Masking, CountAndDeterminism) {
  Rng a(3), b(3);
  std::vector<std::size_t> t1(20, 7), t2(20, 7);
  const auto p1 = mask_tokens(t1, 0.15, a);
  const auto p2 = mask_tokens(t2, 0.15, b);
  EXPECT_EQ(p1, p2);
  EXPECT_EQ(p1.size(), 3u);
  EXPECT_TRUE(std::is_sorted(p1.begin(), p1.end()));
  for (std::size_t p : p1) EXPECT_EQ(t1[p], Vocabulary::kMask);
  std::vector<std::size_t> one{9};
  EXPECT_EQ(mask_tokens(one, 0.15, a), (std::vector<std::size_t>{0}));
}

TEST(TrainStep, ZeroStepSizeLeavesParametersUnchanged) {
  Toy toy(40);
  const auto examples = toy_examples(toy, 3);
  DistillConfig c = toy_config();
  c.lr = 0.0;
  const StepContext ctx = make_step_context(c, toy.student.config, toy.teacher.config);
  TrainState s{toy.student, toy.proj, {}};
  std::vector<const TrainingExample*> batch{&examples[0], &examples[1]};
  const LossBreakdown b = train_step(s, batch, ctx);
  EXPECT_GT(b.total, 0.0);
  EXPECT_EQ(named_tensors(s.student.weights), named_tensors(toy.student.weights));
  EXPECT_EQ(named_tensors(s.projections), named_tensors(toy.proj));
}

TEST(TrainStep, TeacherTargetsAndReferenceUntouched) {
  Toy toy(41);
  const auto examples = toy_examples(toy, 2);
  const auto copy = examples;
  const StepContext ctx = make_step_context(toy_config(), toy.student.config, toy.teacher.config);
  TrainState s{toy.student, toy.proj, {}};
  std::vector<const TrainingExample*> batch{&examples[0], &examples[1]};
  train_step(s, batch, ctx);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(examples[i].teacher.hidden, copy[i].teacher.hidden);
    EXPECT_EQ(examples[i].teacher.logits, copy[i].teacher.logits);
    EXPECT_EQ(examples[i].reference.emb, copy[i].reference.emb);
    EXPECT_EQ(examples[i].reference.hid, copy[i].reference.hid);
  }
}

TEST(TrainStep, BitwiseDeterministic) {
  Toy toy(42);
  const auto examples = toy_examples(toy, 4);
  const StepContext ctx = make_step_context(toy_config(), toy.student.config, toy.teacher.config);
  std::vector<const TrainingExample*> batch{&examples[0], &examples[1], &examples[2], &examples[3]};
  TrainState a{toy.student, toy.proj, {}}, b{toy.student, toy.proj, {}};
  for (int i = 0; i < 3; ++i) {
    const auto la = train_step(a, batch, ctx);
    const auto lb = train_step(b, batch, ctx);
    EXPECT_EQ(la.total, lb.total);
  }
  EXPECT_EQ(named_tensors(a.student.weights), named_tensors(b.student.weights));
  EXPECT_EQ(named_tensors(a.projections), named_tensors(b.projections));
}

TEST(TrainStep, RepeatedStepsOnOneBatchDecrease) {
  Rng rng(43);
  const TeacherModel teacher = init_teacher(presets::teacher_toy(), rng);
  StudentModel student = init_student(presets::student_toy(), 0.05, rng);
  const ProjectionSet proj = init_projections(2, 24, 48, rng);
  std::vector<TrainingExample> examples;
  for (int i = 0; i < 4; ++i) {
    TrainingExample ex;
    for (int k = 0; k < 12; ++k) ex.tokens.push_back(3 + rng.below(61));
    ex.masked_positions = mask_tokens(ex.tokens, 0.15, rng);
    ex.teacher = teacher_forward(ex.tokens, teacher);
    std::vector<std::size_t> rtok;
    for (int k = 0; k < 10; ++k) rtok.push_back(3 + rng.below(61));
    ex.reference = teacher_cache(rtok, teacher, "r");
    examples.push_back(std::move(ex));
  }
  const StepContext ctx = make_step_context(DistillConfig{}, student.config, teacher.config);
  TrainState s{student, proj, {}};
  std::vector<const TrainingExample*> batch;
  for (const auto& ex : examples) batch.push_back(&ex);
  double previous = train_step(s, batch, ctx).total;
  int decreases = 0;
  for (int step = 1; step < 100; ++step) {
    const double loss = train_step(s, batch, ctx).total;
    decreases += loss < previous;
    previous = loss;
  }
  // 99 transitions among the first 100 steps; at least 95 must go down.
  EXPECT_GE(decreases, 95);
}

TEST(TrainStep, EmptyBatchRejected) {
  Toy toy(44);
  const StepContext ctx = make_step_context(toy_config(), toy.student.config, toy.teacher.config);
  TrainState s{toy.student, toy.proj, {}};
  EXPECT_THROW(train_step(s, std::span<const TrainingExample* const>{}, ctx), ValidationError);
}

TEST(TrainStep, NonFiniteLossCarriesBreakdown) {
  Toy toy(45);
  auto examples = toy_examples(toy, 1);
  examples[0].teacher.hidden[0](0, 0) = NAN;
  const StepContext ctx = make_step_context(toy_config(), toy.student.config, toy.teacher.config);
  TrainState s{toy.student, toy.proj, {}};
  std::vector<const TrainingExample*> batch{&examples[0]};
  try {
    train_step(s, batch, ctx);
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_TRUE(std::isnan(e.breakdown.embedding));
    EXPECT_TRUE(std::isfinite(e.breakdown.prediction));
  }
}

TEST(DistillRun, ZeroEpochsIsNoOp) {
  Toy toy(50);
  const auto examples = toy_examples(toy, 3);
  DistillConfig c = toy_config();
  c.epochs = 0;
  const auto res = distill_run({toy.student, toy.proj, {}}, examples, c, toy.teacher.config);
  EXPECT_TRUE(res.history.empty());
  EXPECT_EQ(named_tensors(res.state.student.weights), named_tensors(toy.student.weights));
}

TEST(DistillRun, HistoryHasOneEntryPerEpochAndIsReproducible) {
  Toy toy(51);
  const auto examples = toy_examples(toy, 5);
  DistillConfig c = toy_config();
  c.epochs = 3;
  const auto a = distill_run({toy.student, toy.proj, {}}, examples, c, toy.teacher.config);
  const auto b = distill_run({toy.student, toy.proj, {}}, examples, c, toy.teacher.config);
  ASSERT_EQ(a.history.size(), 3u);
  EXPECT_EQ(metrics_csv(a.history), metrics_csv(b.history));
  EXPECT_EQ(named_tensors(a.state.student.weights), named_tensors(b.state.student.weights));
  // Each epoch average is a mean over examples, so its total is the weighted
  // component sum as well.
  for (const auto& h : a.history) EXPECT_NEAR(h.total, h.weighted_sum(std::vector<double>{1, 1, 1}), 1e-12);
}

TEST(DistillRun, DeltaMustMatchConfig) {
  Toy toy(52);
  const auto examples = toy_examples(toy, 2);
  DistillConfig c = toy_config();
  c.delta = 0.1;
  EXPECT_THROW(distill_run({toy.student, toy.proj, {}}, examples, c, toy.teacher.config), ValidationError);
}

TEST(DistillRun, FailureKeepsCompletedEpochs) {
  Toy toy(53);
  const auto examples = toy_examples(toy, 2);
  DistillConfig c = toy_config();
  c.epochs = 3;
  c.batch = 2;       // one step per epoch
  c.lr = 1e300;      // the first update destroys the weights
  try {
    distill_run({toy.student, toy.proj, {}}, examples, c, toy.teacher.config);
    FAIL() << "expected DistillError";
  } catch (const DistillError& e) {
    EXPECT_EQ(e.history.size(), 1u);
    EXPECT_NE(std::string(e.what()).find("epoch 2"), std::string::npos);
  }
}

TEST(Metrics, CsvLayout) {
  LossBreakdown b;
  b.embedding = 0.5;
  b.hidden = {1.0, 2.0};
  b.attention = {0.25, 0.25};
  b.prediction = 3.0;
  b.total = 7.0;
  EXPECT_EQ(metrics_csv({b}), "epoch,embedding,hidden,attention,prediction,total\n1,0.5,3,0.5,3,7\n");
  EXPECT_EQ(decreasing_fraction({b, b}), 0.0);
}

TEST(Config, ParseRoundTrip) {
  DistillConfig c;
  c.delta = 0.2;
  c.temperature = 2.0;
  c.lambda_weights = {1, 0.5, 0, 2};
  c.map = LayerMapKind::kCustom;
  c.custom_map = {2, 4};
  c.epochs = 7;
  c.seed = 123;
  c.layer1_attention = false;
  std::string text = "# comment\n";
  for (const auto& [k, v] : c.entries()) text += k + " = " + v + "\n";
  const DistillConfig back = DistillConfig::parse(text);
  EXPECT_EQ(back.entries(), c.entries());
}

TEST(Config, Errors) {
  EXPECT_THROW(DistillConfig::parse("bogus = 1\n"), ValidationError);
  EXPECT_THROW(DistillConfig::parse("delta 0.1\n"), ValidationError);
  EXPECT_THROW(DistillConfig::parse("lambda.0 = 1\nlambda.2 = 1\n"), ValidationError);
  EXPECT_THROW(DistillConfig::parse("epochs = -3\n"), ValidationError);
  EXPECT_THROW(DistillConfig::parse("map = 2l\n"), ValidationError);
  DistillConfig c;
  c.lambda_weights = {1, 1};
  EXPECT_THROW(c.validate(2), ValidationError);
  c.lambda_weights.clear();
  c.delta = 1.0;
  EXPECT_THROW(c.validate(2), ValidationError);
  EXPECT_THROW(DistillConfig::load("/nonexistent/config.txt"), IoError);
}
