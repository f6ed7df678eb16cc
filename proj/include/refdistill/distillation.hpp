#pragma once

// Layer-wise distillation of a reference-augmented student from a frozen
// teacher: embedding, hidden-state, attention and prediction losses, the
// weighted objective, an Adam optimizer and the epoch loop.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "refdistill/autodiff.hpp"
#include "refdistill/error.hpp"
#include "refdistill/optimizer.hpp"
#include "refdistill/reference_index.hpp"
#include "refdistill/rng.hpp"
#include "refdistill/transformer.hpp"

namespace refdistill {

// ---------------------------------------------------------------------------
// Configuration

enum class LayerMapKind { kEveryThird, kCustom };

struct DistillConfig {
  std::vector<double> lambda_weights;  // lambda_0 .. lambda_{L^S+1}; empty means all 1
  double temperature = 1.0;
  double delta = 0.05;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 30;
  std::size_t batch = 8;
  std::uint64_t seed = 0;
  LayerMapKind map = LayerMapKind::kEveryThird;
  std::vector<std::size_t> custom_map;  // m(1) .. m(L^S) when map == kCustom
  bool layer1_attention = true;         // false drops the layer-1 attention term
  double mask_rate = 0.15;

  AdamParams adam() const { return {lr, beta1, beta2, adam_eps}; }

  /// Weights resolved to length L^S + 2.
  std::vector<double> lambdas(std::size_t student_layers) const {
    if (lambda_weights.empty()) return std::vector<double>(student_layers + 2, 1.0);
    return lambda_weights;
  }

  void validate(std::size_t student_layers) const {
    if (!lambda_weights.empty() && lambda_weights.size() != student_layers + 2) {
      throw ValidationError("expected " + std::to_string(student_layers + 2) + " lambda weights, got " +
                            std::to_string(lambda_weights.size()));
    }
    for (double l : lambda_weights)
      if (!(l >= 0.0) || !std::isfinite(l)) throw ValidationError("lambda weights must be finite and non-negative");
    if (!(temperature > 0.0)) throw ValidationError("temperature must be positive");
    if (!(delta > 0.0 && delta < 1.0)) throw ValidationError("delta must lie in (0, 1)");
    if (!(lr >= 0.0)) throw ValidationError("lr must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ValidationError("moment decays must lie in [0, 1)");
    if (batch == 0) throw ValidationError("batch size must be positive");
    if (!(mask_rate > 0.0 && mask_rate <= 1.0)) throw ValidationError("mask_rate must lie in (0, 1]");
  }

  /// Flat key=value listing in a fixed order; parse() reads it back.
  std::vector<std::pair<std::string, std::string>> entries() const;

  static DistillConfig parse(const std::string& text, const std::string& source = "config");
  static DistillConfig load(const std::string& path);
};

namespace detail {

inline std::string format_real(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_real(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError("config key '" + key + "': '" + s + "' is not a number");
}

inline std::uint64_t parse_count(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ValidationError("config key '" + key + "': '" + s + "' is not a non-negative integer");
  return v;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::vector<std::pair<std::string, std::string>> DistillConfig::entries() const {
  using detail::format_real;
  std::vector<std::pair<std::string, std::string>> out{
      {"delta", format_real(delta)},       {"t", format_real(temperature)},
      {"lr", format_real(lr)},             {"beta1", format_real(beta1)},
      {"beta2", format_real(beta2)},       {"adam_eps", format_real(adam_eps)},
      {"epochs", std::to_string(epochs)},  {"batch", std::to_string(batch)},
      {"seed", std::to_string(seed)},      {"mask_rate", format_real(mask_rate)},
      {"layer1_attention", layer1_attention ? "1" : "0"},
      {"map", map == LayerMapKind::kEveryThird ? "3l" : "custom"}};
  for (std::size_t i = 0; i < custom_map.size(); ++i)
    out.emplace_back("map." + std::to_string(i + 1), std::to_string(custom_map[i]));
  for (std::size_t i = 0; i < lambda_weights.size(); ++i)
    out.emplace_back("lambda." + std::to_string(i), format_real(lambda_weights[i]));
  return out;
}

/// Lines of `key = value`; '#' starts a comment. Indexed keys lambda.N and
/// map.N must be numbered without gaps.
inline DistillConfig DistillConfig::parse(const std::string& text, const std::string& source) {
  DistillConfig c;
  std::map<std::size_t, double> lambdas;
  std::map<std::size_t, std::size_t> mapping;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(source + ":" + std::to_string(line_no) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key == "delta") c.delta = detail::parse_real(value, key);
    else if (key == "t") c.temperature = detail::parse_real(value, key);
    else if (key == "lr") c.lr = detail::parse_real(value, key);
    else if (key == "beta1") c.beta1 = detail::parse_real(value, key);
    else if (key == "beta2") c.beta2 = detail::parse_real(value, key);
    else if (key == "adam_eps") c.adam_eps = detail::parse_real(value, key);
    else if (key == "epochs") c.epochs = detail::parse_count(value, key);
    else if (key == "batch") c.batch = detail::parse_count(value, key);
    else if (key == "seed") c.seed = detail::parse_count(value, key);
    else if (key == "mask_rate") c.mask_rate = detail::parse_real(value, key);
    else if (key == "layer1_attention") c.layer1_attention = detail::parse_count(value, key) != 0;
    else if (key == "map") {
      if (value == "3l") c.map = LayerMapKind::kEveryThird;
      else if (value == "custom") c.map = LayerMapKind::kCustom;
      else throw ValidationError("config key 'map': expected 3l or custom, got '" + value + "'");
    } else if (key.rfind("lambda.", 0) == 0) {
      lambdas[detail::parse_count(key.substr(7), key)] = detail::parse_real(value, key);
    } else if (key.rfind("map.", 0) == 0) {
      mapping[detail::parse_count(key.substr(4), key)] = detail::parse_count(value, key);
    } else {
      throw ValidationError(source + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (!lambdas.count(i)) throw ValidationError("lambda weights must be numbered 0..n without gaps");
    c.lambda_weights.push_back(lambdas[i]);
  }
  for (std::size_t i = 1; i <= mapping.size(); ++i) {
    if (!mapping.count(i)) throw ValidationError("map entries must be numbered 1..L^S without gaps");
    c.custom_map.push_back(mapping[i]);
  }
  return c;
}

inline DistillConfig DistillConfig::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

// ---------------------------------------------------------------------------
// Layer mapping

/// Teacher layer index m(l) imitated by student layer l, for l in 0..L^S+1.
/// Index 0 is the embedding layer and L^S+1 / L+1 the prediction layer.
inline std::size_t layer_map(std::size_t l, std::size_t student_layers, std::size_t teacher_layers,
                             std::span<const std::size_t> custom = {}) {
  if (l > student_layers + 1) throw ValidationError("student layer " + std::to_string(l) + " out of range");
  if (l == 0) return 0;
  if (l == student_layers + 1) return teacher_layers + 1;
  if (custom.empty()) {
    if (teacher_layers != 3 * student_layers) {
      throw ValidationError("the default map m(l) = 3l needs L = 3 L^S, got L = " + std::to_string(teacher_layers) +
                            ", L^S = " + std::to_string(student_layers));
    }
    return 3 * l;
  }
  return custom[l - 1];
}

/// Checks and resolves m(1..L^S).
inline std::vector<std::size_t> resolve_layer_map(const DistillConfig& c, std::size_t student_layers,
                                                  std::size_t teacher_layers) {
  std::vector<std::size_t> out;
  if (c.map == LayerMapKind::kCustom) {
    if (c.custom_map.size() != student_layers)
      throw ValidationError("custom map needs " + std::to_string(student_layers) + " entries");
    for (std::size_t i = 0; i < c.custom_map.size(); ++i) {
      const std::size_t m = c.custom_map[i];
      if (m < 1 || m > teacher_layers) throw ValidationError("custom map entry outside 1..L");
      if (i > 0 && m < c.custom_map[i - 1]) throw ValidationError("custom map must be monotone");
    }
  }
  const std::span<const std::size_t> custom =
      c.map == LayerMapKind::kCustom ? std::span<const std::size_t>(c.custom_map) : std::span<const std::size_t>();
  for (std::size_t l = 1; l <= student_layers; ++l) out.push_back(layer_map(l, student_layers, teacher_layers, custom));
  return out;
}

// ---------------------------------------------------------------------------
// Projections W_e, W_l: student width -> teacher width

template <typename T>
struct ProjectionWeights {
  T embedding;
  std::vector<T> layers;

  template <typename U>
  void resize_like(const ProjectionWeights<U>& other) {
    layers.resize(other.layers.size());
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(std::string("proj.embedding"), self.embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) f("proj.layers." + std::to_string(i), self.layers[i]);
  }
};

using ProjectionSet = ProjectionWeights<Tensor>;

inline ProjectionSet init_projections(std::size_t student_layers, std::size_t d_student, std::size_t d_teacher,
                                      Rng& rng) {
  ProjectionSet p;
  p.embedding = detail::xavier(rng, d_student, d_teacher);
  for (std::size_t l = 0; l < student_layers; ++l) p.layers.push_back(detail::xavier(rng, d_student, d_teacher));
  return p;
}

inline ProjectionSet identity_projections(std::size_t student_layers, std::size_t d) {
  ProjectionSet p;
  p.embedding = Tensor::identity(d);
  for (std::size_t l = 0; l < student_layers; ++l) p.layers.push_back(Tensor::identity(d));
  return p;
}

// ---------------------------------------------------------------------------
// Losses

/// mse(h_s W, h_t); h_t enters as a constant.
inline Var projected_mse(Var h_s, Var w, const Tensor& h_t) {
  if (h_s.cols() != w.rows() || w.cols() != h_t.cols() || h_s.rows() != h_t.rows()) {
    throw ShapeError("projected_mse: h_s " + shape_string(h_s.value().shape()) + ", W " +
                     shape_string(w.value().shape()) + ", h_t " + shape_string(h_t.shape()));
  }
  return ad::mse(ad::matmul(h_s, w), h_s.tape->constant(h_t));
}

/// Head-averaged mse of unnormalized scores. Only the first T key columns of
/// the student are compared, so reference columns never contribute.
inline Var loss_attention(std::span<const Var> student_scores, std::span<const Tensor> teacher_scores) {
  if (student_scores.empty() || student_scores.size() != teacher_scores.size()) {
    throw ShapeError("loss_attention: " + std::to_string(student_scores.size()) + " student heads vs " +
                     std::to_string(teacher_scores.size()) + " teacher heads");
  }
  Tape& tape = *student_scores.front().tape;
  std::vector<std::pair<double, Var>> terms;
  const double w = 1.0 / static_cast<double>(student_scores.size());
  for (std::size_t h = 0; h < student_scores.size(); ++h) {
    const Tensor& t = teacher_scores[h];
    Var s = student_scores[h];
    if (s.rows() != t.rows() || s.cols() < t.cols())
      throw ShapeError("loss_attention: student scores " + shape_string(s.value().shape()) + " vs teacher " +
                       shape_string(t.shape()));
    if (s.cols() != t.cols()) s = ad::slice_cols(s, 0, t.cols());
    terms.emplace_back(w, ad::mse(s, tape.constant(t)));
  }
  return ad::weighted_sum(terms, tape);
}

/// Soft cross-entropy against frozen teacher logits, averaged over `rows`
/// (all rows when empty).
inline Var loss_prediction(const Tensor& teacher_logits, Var student_logits, double temperature,
                           std::span<const std::size_t> rows = {}) {
  return ad::soft_cross_entropy_rows(teacher_logits, student_logits, temperature, rows);
}

struct LossBreakdown {
  double embedding = 0.0;
  std::vector<double> hidden;     // per student layer 1..L^S
  std::vector<double> attention;  // per student layer 1..L^S
  double prediction = 0.0;
  double total = 0.0;

  double hidden_sum() const { return std::accumulate(hidden.begin(), hidden.end(), 0.0); }
  double attention_sum() const { return std::accumulate(attention.begin(), attention.end(), 0.0); }

  bool all_finite() const {
    auto ok = [](double v) { return std::isfinite(v); };
    return ok(embedding) && ok(prediction) && ok(total) && std::all_of(hidden.begin(), hidden.end(), ok) &&
           std::all_of(attention.begin(), attention.end(), ok);
  }

  /// sum_l lambda_l * layer term, recomputed from the components.
  double weighted_sum(std::span<const double> lambdas) const {
    double s = lambdas[0] * embedding;
    for (std::size_t l = 0; l < hidden.size(); ++l) s += lambdas[l + 1] * (hidden[l] + attention[l]);
    return s + lambdas[hidden.size() + 1] * prediction;
  }

  void accumulate(const LossBreakdown& o, double w) {
    hidden.resize(o.hidden.size(), 0.0);
    attention.resize(o.attention.size(), 0.0);
    embedding += w * o.embedding;
    for (std::size_t l = 0; l < o.hidden.size(); ++l) {
      hidden[l] += w * o.hidden[l];
      attention[l] += w * o.attention[l];
    }
    prediction += w * o.prediction;
    total += w * o.total;
  }
};

/// Raised when a step produces a non-finite loss.
class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(const std::string& what, LossBreakdown b) : Error(what), breakdown(std::move(b)) {}
  LossBreakdown breakdown;
};

struct LossVars {
  Var embedding;
  std::vector<Var> hidden;
  std::vector<Var> attention;  // absent entries are exact zeros
  Var prediction;
  Var total;

  LossBreakdown values() const {
    LossBreakdown b;
    b.embedding = embedding.value().item();
    for (const Var& v : hidden) b.hidden.push_back(v.value().item());
    for (const Var& v : attention) b.attention.push_back(v.value().item());
    b.prediction = prediction.value().item();
    b.total = total.value().item();
    return b;
  }
};

/// The weighted objective for one example.
///   l = 0          embedding loss against teacher h_0
///   1 <= l <= L^S  hidden + attention losses against teacher layer m(l)
///   l = L^S + 1    prediction loss on `predict_rows` of the logits
inline LossVars total_loss(const ForwardVars& student, const ForwardPass& teacher, const ProjectionWeights<Var>& proj,
                           std::span<const double> lambdas, std::span<const std::size_t> mapping, double temperature,
                           std::span<const std::size_t> predict_rows, bool layer1_attention = true) {
  const std::size_t ls = mapping.size();
  if (lambdas.size() != ls + 2) throw ValidationError("total_loss: lambda count does not match the student depth");
  if (student.hidden.size() != ls + 1 || proj.layers.size() != ls)
    throw ShapeError("total_loss: student pass and projections disagree on depth");
  Tape& tape = *student.logits.tape;
  LossVars out;
  out.embedding = projected_mse(student.hidden[0], proj.embedding, teacher.hidden.at(0));
  for (std::size_t l = 1; l <= ls; ++l) {
    const std::size_t m = mapping[l - 1];
    if (m < 1 || m >= teacher.hidden.size()) throw ValidationError("layer map points outside the teacher");
    out.hidden.push_back(projected_mse(student.hidden[l], proj.layers[l - 1], teacher.hidden[m]));
    if (l == 1 && !layer1_attention) {
      out.attention.push_back(tape.constant(Tensor::scalar(0.0)));
    } else {
      out.attention.push_back(loss_attention(student.scores[l - 1], teacher.scores[m - 1]));
    }
  }
  out.prediction = loss_prediction(teacher.logits, student.logits, temperature, predict_rows);
  std::vector<std::pair<double, Var>> terms{{lambdas[0], out.embedding}};
  for (std::size_t l = 1; l <= ls; ++l) {
    terms.emplace_back(lambdas[l], out.hidden[l - 1]);
    terms.emplace_back(lambdas[l], out.attention[l - 1]);
  }
  terms.emplace_back(lambdas[ls + 1], out.prediction);
  out.total = ad::weighted_sum(terms, tape);
  return out;
}

// ---------------------------------------------------------------------------
// Training data

/// One input with its masked copy, frozen teacher pass and reference.
struct TrainingExample {
  std::string x_id;
  std::vector<std::size_t> tokens;            // masked input fed to both models
  std::vector<std::size_t> masked_positions;  // rows scored by the prediction loss
  ForwardPass teacher;
  ReferenceContext reference;
};

/// Replaces round(rate * T) positions (at least one) with [MASK]; positions
/// are drawn from `rng` without replacement and returned sorted.
inline std::vector<std::size_t> mask_tokens(std::vector<std::size_t>& tokens, double rate, Rng& rng) {
  if (tokens.empty()) return {};
  std::size_t count = static_cast<std::size_t>(std::llround(rate * static_cast<double>(tokens.size())));
  count = std::clamp<std::size_t>(count, 1, tokens.size());
  std::vector<std::size_t> order(tokens.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  order.resize(count);
  std::sort(order.begin(), order.end());
  for (std::size_t p : order) tokens[p] = Vocabulary::kMask;
  return order;
}

inline std::vector<std::size_t> truncate(std::vector<std::size_t> tokens, std::size_t max_len) {
  if (tokens.size() > max_len) tokens.resize(max_len);
  return tokens;
}

/// Builds the example for each pair. Masking depends only on the seed and the
/// document position, so examples are independent of processing order.
inline std::vector<TrainingExample> prepare_examples(const std::vector<ReferencePair>& pairs,
                                                     const std::vector<ReferenceContext>& references,
                                                     const TeacherModel& teacher, double mask_rate,
                                                     std::uint64_t seed) {
  std::map<std::string, const ReferenceContext*> by_id;
  for (const auto& r : references) by_id[r.doc_id] = &r;
  std::vector<TrainingExample> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    auto it = by_id.find(p.r_id);
    if (it == by_id.end()) throw ValidationError("no cached teacher outputs for reference '" + p.r_id + "'");
    TrainingExample ex;
    ex.x_id = p.x_id;
    ex.tokens = truncate(p.x_tokens, teacher.config.max_seq_len);
    if (ex.tokens.empty()) throw ValidationError("document '" + p.x_id + "' has no tokens");
    Rng rng(seed ^ (0xD1B54A32D192ED03ULL * (i + 1)));
    ex.masked_positions = mask_tokens(ex.tokens, mask_rate, rng);
    ex.teacher = teacher_forward(ex.tokens, teacher);
    ex.reference = *it->second;
    out.push_back(std::move(ex));
  }
  return out;
}

/// Teacher outputs for every document that serves as a reference.
inline std::vector<ReferenceContext> cache_references(const std::vector<ReferencePair>& pairs, const Corpus& corpus,
                                                      const Vocabulary& vocab, const TeacherModel& teacher) {
  std::set<std::string> wanted;
  for (const auto& p : pairs) wanted.insert(p.r_id);
  std::vector<ReferenceContext> out;
  for (const auto& d : corpus.docs) {
    if (!wanted.count(d.id)) continue;
    const auto tokens = truncate(tokenize(d.text, vocab), teacher.config.max_seq_len);
    out.push_back(teacher_cache(tokens, teacher, d.id));
  }
  if (out.size() != wanted.size()) throw ValidationError("some reference ids are missing from the corpus");
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainState {
  StudentModel student;
  ProjectionSet projections;
  AdamState adam;
};

/// Everything one step needs besides the state.
struct StepContext {
  DistillConfig config;
  std::vector<double> lambdas;
  std::vector<std::size_t> mapping;
};

inline StepContext make_step_context(const DistillConfig& c, const ModelConfig& student, const ModelConfig& teacher) {
  c.validate(student.num_layers);
  return {c, c.lambdas(student.num_layers), resolve_layer_map(c, student.num_layers, teacher.num_layers)};
}

namespace detail {

inline std::vector<Tensor*> trainable_tensors(TrainState& s) {
  std::vector<Tensor*> out = weight_list(s.student.weights);
  for (Tensor* t : weight_list(s.projections)) out.push_back(t);
  return out;
}

}  // namespace detail

/// Loss and gradients of one example, gradients in trainable_tensors order.
inline LossBreakdown example_gradients(const TrainState& s, const TrainingExample& ex, const StepContext& ctx,
                                       std::vector<Tensor>* grads) {
  Tape tape;
  auto sw = bind(tape, s.student.weights, true);
  auto pw = bind(tape, s.projections, true);
  const ForwardVars fv = student_forward(sw, s.student.config, s.student.delta, ex.tokens, ex.reference);
  const LossVars loss = total_loss(fv, ex.teacher, pw, ctx.lambdas, ctx.mapping, ctx.config.temperature,
                                   ex.masked_positions, ctx.config.layer1_attention);
  LossBreakdown b = loss.values();
  if (grads != nullptr && b.all_finite()) {
    tape.backward(loss.total);
    std::vector<Var> vars = var_list(sw);
    for (Var v : var_list(pw)) vars.push_back(v);
    if (grads->empty()) {
      for (Var v : vars) grads->push_back(tape.grad(v));
    } else {
      for (std::size_t i = 0; i < vars.size(); ++i) {
        Tensor& acc = (*grads)[i];
        const Tensor g = tape.grad(vars[i]);
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
      }
    }
  }
  return b;
}

/// Mean loss of a batch and one optimizer update on student and projections.
/// Gradients are summed in batch order so the result is deterministic.
inline LossBreakdown train_step(TrainState& s, std::span<const TrainingExample* const> batch, const StepContext& ctx) {
  if (batch.empty()) throw ValidationError("train_step needs a non-empty batch");
  std::vector<Tensor> grads;
  LossBreakdown mean;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const TrainingExample* ex : batch) {
    const LossBreakdown b = example_gradients(s, *ex, ctx, &grads);
    if (!b.all_finite()) throw NonFiniteLoss("non-finite loss on example '" + ex->x_id + "'", b);
    mean.accumulate(b, w);
  }
  for (Tensor& g : grads)
    for (double& v : g.values()) v *= w;
  const auto params = detail::trainable_tensors(s);
  adam_update(params, grads, s.adam, ctx.config.adam());
  return mean;
}

/// Mean loss over examples without updating anything.
inline LossBreakdown evaluate(const TrainState& s, std::span<const TrainingExample> examples, const StepContext& ctx) {
  LossBreakdown mean;
  const double w = examples.empty() ? 0.0 : 1.0 / static_cast<double>(examples.size());
  for (const auto& ex : examples) mean.accumulate(example_gradients(s, ex, ctx, nullptr), w);
  return mean;
}

struct DistillResult {
  TrainState state;
  std::vector<LossBreakdown> history;  // per-epoch means over examples
};

/// Raised from distill_run with the epochs completed so far.
class DistillError : public Error {
 public:
  DistillError(const std::string& what, std::vector<LossBreakdown> h) : Error(what), history(std::move(h)) {}
  std::vector<LossBreakdown> history;
};

/// Epoch loop: examples shuffled per epoch with the run seed, split into
/// batches, one train_step each.
inline DistillResult distill_run(TrainState init, std::span<const TrainingExample> examples, const DistillConfig& c,
                                 const ModelConfig& teacher_config) {
  const StepContext ctx = make_step_context(c, init.student.config, teacher_config);
  if (init.student.delta != c.delta) {
    throw ValidationError("student delta " + detail::format_real(init.student.delta) + " differs from config delta " +
                          detail::format_real(c.delta));
  }
  if (examples.empty() && c.epochs > 0) throw ValidationError("no training examples");
  DistillResult res{std::move(init), {}};
  Rng rng(c.seed);
  std::vector<const TrainingExample*> order;
  for (const auto& ex : examples) order.push_back(&ex);
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    rng.shuffle(order);
    LossBreakdown mean;
    try {
      for (std::size_t start = 0; start < order.size(); start += c.batch) {
        const std::size_t end = std::min(order.size(), start + c.batch);
        const std::span<const TrainingExample* const> batch(order.data() + start, end - start);
        const LossBreakdown b = train_step(res.state, batch, ctx);
        mean.accumulate(b, static_cast<double>(batch.size()) / static_cast<double>(order.size()));
      }
    } catch (const Error& e) {
      throw DistillError("epoch " + std::to_string(epoch + 1) + ": " + e.what(), res.history);
    }
    res.history.push_back(mean);
  }
  return res;
}

/// CSV with columns epoch, embedding, hidden, attention, prediction, total.
/// hidden and attention are summed over student layers.
inline std::string metrics_csv(const std::vector<LossBreakdown>& history) {
  std::string out = "epoch,embedding,hidden,attention,prediction,total\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    const auto& b = history[e];
    out += std::to_string(e + 1) + "," + detail::format_real(b.embedding) + "," + detail::format_real(b.hidden_sum()) +
           "," + detail::format_real(b.attention_sum()) + "," + detail::format_real(b.prediction) + "," +
           detail::format_real(b.total) + "\n";
  }
  return out;
}

/// Fraction of consecutive epochs whose total loss went down.
inline double decreasing_fraction(const std::vector<LossBreakdown>& history) {
  if (history.size() < 2) return 1.0;
  std::size_t down = 0;
  for (std::size_t e = 1; e < history.size(); ++e) down += history[e].total < history[e - 1].total;
  return static_cast<double>(down) / static_cast<double>(history.size() - 1);
}

}  // namespace refdistill
