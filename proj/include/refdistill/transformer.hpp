#pragma once

// Teacher encoder and the reference-augmented student.
//
// Per-head projection matrices are stored as column blocks of one d x d
// matrix: head h owns columns [h * d/H, (h+1) * d/H). The masked-LM head is
// tied to the token embedding table, so it contributes only an output bias.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "refdistill/autodiff.hpp"
#include "refdistill/config.hpp"
#include "refdistill/rng.hpp"

namespace refdistill {

using TokenIds = std::vector<std::size_t>;

template <typename T>
struct EncoderLayerWeights {
  T wq, wk, wv, wo;
  T ln1_gamma, ln1_beta;
  T w1, b1, w2, b2;
  T ln2_gamma, ln2_beta;

  template <typename Self, typename F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + "wq", self.wq);
    f(prefix + "wk", self.wk);
    f(prefix + "wv", self.wv);
    f(prefix + "wo", self.wo);
    f(prefix + "ln1.gamma", self.ln1_gamma);
    f(prefix + "ln1.beta", self.ln1_beta);
    f(prefix + "ffn.w1", self.w1);
    f(prefix + "ffn.b1", self.b1);
    f(prefix + "ffn.w2", self.w2);
    f(prefix + "ffn.b2", self.b2);
    f(prefix + "ln2.gamma", self.ln2_gamma);
    f(prefix + "ln2.beta", self.ln2_beta);
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    visit(self, std::string(), f);
  }
};

template <typename T>
struct TeacherWeights {
  T token_embedding;     // vocab x d
  T position_embedding;  // max_seq_len x d
  std::vector<EncoderLayerWeights<T>> layers;
  T output_bias;  // 1 x vocab

  template <typename U>
  void resize_like(const TeacherWeights<U>& other) {
    layers.resize(other.layers.size());
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(std::string("embeddings.token"), self.token_embedding);
    f(std::string("embeddings.position"), self.position_embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      EncoderLayerWeights<T>::visit(self.layers[i], "layers." + std::to_string(i) + ".", f);
    }
    f(std::string("head.bias"), self.output_bias);
  }
};

template <typename T>
struct StudentWeights {
  T token_embedding;
  T position_embedding;
  EncoderLayerWeights<T> first;
  T ref_wk;  // d_teacher x d_student, head blocks of d_student/H columns
  T ref_wv;
  std::vector<EncoderLayerWeights<T>> layers;  // layers 2..L^S
  T output_bias;

  template <typename U>
  void resize_like(const StudentWeights<U>& other) {
    layers.resize(other.layers.size());
  }

  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    f(std::string("embeddings.token"), self.token_embedding);
    f(std::string("embeddings.position"), self.position_embedding);
    EncoderLayerWeights<T>::visit(self.first, "layers.0.", f);
    f(std::string("layers.0.ref_wk"), self.ref_wk);
    f(std::string("layers.0.ref_wv"), self.ref_wv);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      EncoderLayerWeights<T>::visit(self.layers[i], "layers." + std::to_string(i + 1) + ".", f);
    }
    f(std::string("head.bias"), self.output_bias);
  }
};

struct TeacherModel {
  ModelConfig config;
  TeacherWeights<Tensor> weights;
};

struct StudentModel {
  ModelConfig config;
  double delta = 0.05;
  StudentWeights<Tensor> weights;
};

/// Frozen teacher outputs for one reference document: emb = Emb(r), hid = Hid(r).
struct ReferenceContext {
  std::string doc_id;
  Tensor emb;
  Tensor hid;

  std::size_t length() const { return emb.rows(); }

  void validate() const {
    if (emb.rank() != 2 || hid.rank() != 2 || emb.shape() != hid.shape()) {
      throw ShapeError("reference context '" + doc_id + "': emb " + shape_string(emb.shape()) + " and hid " +
                       shape_string(hid.shape()) + " disagree");
    }
  }
};

/// Collects references to every weight tensor in visiting order.
template <typename W>
std::vector<Tensor*> weight_list(W& w) {
  std::vector<Tensor*> out;
  W::visit(w, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

template <typename W>
std::vector<const Tensor*> weight_list(const W& w) {
  std::vector<const Tensor*> out;
  W::visit(w, [&](const std::string&, const Tensor& t) { out.push_back(&t); });
  return out;
}

template <typename W>
std::vector<std::string> weight_names(const W& w) {
  std::vector<std::string> out;
  W::visit(w, [&](const std::string& name, const Tensor&) { out.push_back(name); });
  return out;
}

/// Places every weight on the tape, as trainable parameters or as constants.
template <template <typename> class W>
W<Var> bind(Tape& tape, const W<Tensor>& weights, bool trainable) {
  W<Var> out;
  out.resize_like(weights);
  std::vector<Var*> slots;
  W<Var>::visit(out, [&](const std::string&, Var& v) { slots.push_back(&v); });
  const auto tensors = weight_list(weights);
  for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = tape.leaf(*tensors[i], trainable);
  return out;
}

template <template <typename> class W>
std::vector<Var> var_list(W<Var>& w) {
  std::vector<Var> out;
  W<Var>::visit(w, [&](const std::string&, Var& v) { out.push_back(v); });
  return out;
}

template <typename W>
std::size_t count_weights(const W& w) {
  std::size_t n = 0;
  for (const Tensor* t : weight_list(w)) n += t->size();
  return n;
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

inline Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t = Tensor::zeros(fan_in, fan_out);
  for (double& v : t.values()) v = rng.uniform(-limit, limit);
  return t;
}

inline Tensor ones_row(std::size_t n) { return Tensor({1, n}, 1.0); }
inline Tensor zeros_row(std::size_t n) { return Tensor({1, n}, 0.0); }

inline EncoderLayerWeights<Tensor> init_layer(const ModelConfig& c, Rng& rng) {
  const std::size_t d = c.hidden_size, f = c.ffn_size;
  EncoderLayerWeights<Tensor> w;
  w.wq = xavier(rng, d, d);
  w.wk = xavier(rng, d, d);
  w.wv = xavier(rng, d, d);
  w.wo = xavier(rng, d, d);
  w.ln1_gamma = ones_row(d);
  w.ln1_beta = zeros_row(d);
  w.w1 = xavier(rng, d, f);
  w.b1 = zeros_row(f);
  w.w2 = xavier(rng, f, d);
  w.b2 = zeros_row(d);
  w.ln2_gamma = ones_row(d);
  w.ln2_beta = zeros_row(d);
  return w;
}

}  // namespace detail

inline TeacherModel init_teacher(const ModelConfig& config, Rng& rng) {
  config.validate();
  TeacherModel m{config, {}};
  const std::size_t d = config.hidden_size;
  m.weights.token_embedding = detail::xavier(rng, config.vocab_size, d);
  m.weights.position_embedding = detail::xavier(rng, config.max_seq_len, d);
  for (std::size_t l = 0; l < config.num_layers; ++l) m.weights.layers.push_back(detail::init_layer(config, rng));
  m.weights.output_bias = detail::zeros_row(config.vocab_size);
  return m;
}

inline StudentModel init_student(const ModelConfig& config, double delta, Rng& rng) {
  config.validate_student();
  StudentModel m{config, delta, {}};
  const std::size_t d = config.hidden_size;
  m.weights.token_embedding = detail::xavier(rng, config.vocab_size, d);
  m.weights.position_embedding = detail::xavier(rng, config.max_seq_len, d);
  m.weights.first = detail::init_layer(config, rng);
  m.weights.ref_wk = detail::xavier(rng, config.reference_hidden_size, d);
  m.weights.ref_wv = detail::xavier(rng, config.reference_hidden_size, d);
  for (std::size_t l = 1; l < config.num_layers; ++l) m.weights.layers.push_back(detail::init_layer(config, rng));
  m.weights.output_bias = detail::zeros_row(config.vocab_size);
  return m;
}

// ---------------------------------------------------------------------------
// Forward computation

struct LayerOutput {
  Var hidden;
  std::vector<Var> scores;  // per head, unnormalized QK^T / sqrt(d)
};

/// Token plus position embedding rows.
inline Var embed(Var token_embedding, Var position_embedding, std::span<const std::size_t> tokens) {
  const std::size_t vocab = token_embedding.rows();
  if (tokens.size() > position_embedding.rows()) {
    throw ValidationError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max length " +
                          std::to_string(position_embedding.rows()));
  }
  for (std::size_t id : tokens) {
    if (id >= vocab) {
      throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  std::vector<std::size_t> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  return ad::add(ad::gather_rows(token_embedding, tokens), ad::gather_rows(position_embedding, positions));
}

inline Var ffn(Var x, Var w1, Var b1, Var w2, Var b2, Activation act) {
  const Var inner = ad::add_row(ad::matmul(x, w1), b1);
  const Var activated = act == Activation::kGelu ? ad::gelu(inner) : ad::relu(inner);
  return ad::add_row(ad::matmul(activated, w2), b2);
}

/// Attention weights from scores, then times V. delta = 0 with no mask is
/// standard softmax attention.
inline Var shifted_attention(Var scores, Var values, double delta, std::span<const bool> key_mask = {}) {
  if (!(delta >= 0.0 && delta < 1.0)) throw ValidationError("delta must lie in [0, 1)");
  if (scores.cols() != values.rows()) {
    throw ShapeError("shifted_attention: scores " + shape_string(scores.value().shape()) + " vs values " +
                     shape_string(values.value().shape()));
  }
  return ad::matmul(ad::shifted_softmax_rows(scores, delta, key_mask), values);
}

/// Multi-head attention block followed by the two residual LayerNorms.
/// extra_keys / extra_values, when non-null, are appended along the sequence
/// axis after the keys and values projected from x.
inline LayerOutput attention_layer(Var x, const EncoderLayerWeights<Var>& w, const ModelConfig& config, double delta,
                                   const Var* extra_keys = nullptr, const Var* extra_values = nullptr) {
  const std::size_t d = config.hidden_size;
  if (x.cols() != d) {
    throw ShapeError("layer input " + shape_string(x.value().shape()) + " does not have width " + std::to_string(d));
  }
  const std::size_t dh = config.head_dim();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

  const Var q = ad::matmul(x, w.wq);
  Var k = ad::matmul(x, w.wk);
  Var v = ad::matmul(x, w.wv);
  if (extra_keys != nullptr) {
    k = ad::concat_rows(k, *extra_keys);
    v = ad::concat_rows(v, *extra_values);
  }

  LayerOutput out;
  std::vector<Var> heads;
  for (std::size_t h = 0; h < config.num_heads; ++h) {
    const Var qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
    const Var kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
    const Var vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
    const Var scores = ad::scale(ad::matmul_transposed(qh, kh), inv_sqrt_d);
    out.scores.push_back(scores);
    heads.push_back(shifted_attention(scores, vh, delta));
  }
  const Var attended = ad::matmul(ad::concat_cols(heads), w.wo);
  const Var b = ad::layer_norm(ad::add(x, attended), w.ln1_gamma, w.ln1_beta, config.ln_eps);
  const Var f = ffn(b, w.w1, w.b1, w.w2, w.b2, config.activation);
  out.hidden = ad::layer_norm(ad::add(f, b), w.ln2_gamma, w.ln2_beta, config.ln_eps);
  return out;
}

/// Vanilla encoder layer: self-attention over x only.
inline LayerOutput encoder_layer(Var x, const EncoderLayerWeights<Var>& w, const ModelConfig& config) {
  return attention_layer(x, w, config, 0.0);
}

/// First student layer: keys and values extended by the projected teacher
/// embedding (keys) and last hidden state (values) of the reference.
inline LayerOutput student_first_layer(Var emb_x, const ReferenceContext& ref, const EncoderLayerWeights<Var>& w,
                                       Var ref_wk, Var ref_wv, const ModelConfig& config, double delta) {
  ref.validate();
  if (ref.emb.cols() != ref_wk.rows() || ref.hid.cols() != ref_wv.rows()) {
    throw ShapeError("reference width " + std::to_string(ref.emb.cols()) + " does not match reference projections " +
                     shape_string(ref_wk.value().shape()));
  }
  Tape& tape = *emb_x.tape;
  const Var ref_emb = tape.constant(ref.emb);
  const Var ref_hid = tape.constant(ref.hid);
  const Var keys = ad::matmul(ref_emb, ref_wk);
  const Var values = ad::matmul(ref_hid, ref_wv);
  return attention_layer(emb_x, w, config, delta, &keys, &values);
}

inline Var mlm_logits(Var hidden, Var token_embedding, Var output_bias) {
  return ad::add_row(ad::matmul_transposed(hidden, token_embedding), output_bias);
}

struct ForwardVars {
  std::vector<Var> hidden;               // h_0 .. h_L
  std::vector<std::vector<Var>> scores;  // scores[l-1][head] for layer l
  Var logits;
};

inline ForwardVars teacher_forward(const TeacherWeights<Var>& w, const ModelConfig& config,
                                   std::span<const std::size_t> tokens) {
  ForwardVars out;
  out.hidden.push_back(embed(w.token_embedding, w.position_embedding, tokens));
  for (const auto& layer : w.layers) {
    LayerOutput lo = encoder_layer(out.hidden.back(), layer, config);
    out.hidden.push_back(lo.hidden);
    out.scores.push_back(std::move(lo.scores));
  }
  out.logits = mlm_logits(out.hidden.back(), w.token_embedding, w.output_bias);
  return out;
}

inline ForwardVars student_forward(const StudentWeights<Var>& w, const ModelConfig& config, double delta,
                                   std::span<const std::size_t> tokens, const ReferenceContext& ref) {
  ForwardVars out;
  out.hidden.push_back(embed(w.token_embedding, w.position_embedding, tokens));
  LayerOutput first = student_first_layer(out.hidden.back(), ref, w.first, w.ref_wk, w.ref_wv, config, delta);
  out.hidden.push_back(first.hidden);
  out.scores.push_back(std::move(first.scores));
  for (const auto& layer : w.layers) {
    LayerOutput lo = encoder_layer(out.hidden.back(), layer, config);
    out.hidden.push_back(lo.hidden);
    out.scores.push_back(std::move(lo.scores));
  }
  out.logits = mlm_logits(out.hidden.back(), w.token_embedding, w.output_bias);
  return out;
}

/// Materialized forward pass with no gradient tracking.
struct ForwardPass {
  std::vector<Tensor> hidden;
  std::vector<std::vector<Tensor>> scores;
  Tensor logits;
};

inline ForwardPass materialize(const ForwardVars& v) {
  ForwardPass p;
  for (const Var& h : v.hidden) p.hidden.push_back(h.value());
  for (const auto& layer : v.scores) {
    std::vector<Tensor> heads;
    for (const Var& s : layer) heads.push_back(s.value());
    p.scores.push_back(std::move(heads));
  }
  p.logits = v.logits.value();
  return p;
}

inline ForwardPass teacher_forward(std::span<const std::size_t> tokens, const TeacherModel& teacher) {
  Tape tape;
  const auto w = bind(tape, teacher.weights, false);
  return materialize(teacher_forward(w, teacher.config, tokens));
}

inline ForwardPass student_forward(std::span<const std::size_t> tokens, const ReferenceContext& ref,
                                   const StudentModel& student) {
  Tape tape;
  const auto w = bind(tape, student.weights, false);
  return materialize(student_forward(w, student.config, student.delta, tokens, ref));
}

inline ReferenceContext teacher_cache(std::span<const std::size_t> tokens, const TeacherModel& teacher,
                                      std::string doc_id = {}) {
  ForwardPass pass = teacher_forward(tokens, teacher);
  return ReferenceContext{std::move(doc_id), std::move(pass.hidden.front()), std::move(pass.hidden.back())};
}

/// True when delta is large enough that every attention weight over
/// key_count visible keys can be negative (delta >= 1 / key_count).
inline bool delta_exceeds_uniform_weight(double delta, std::size_t key_count) {
  return key_count > 0 && delta >= 1.0 / static_cast<double>(key_count);
}

// ---------------------------------------------------------------------------
// Parameter accounting

enum class ModelRole { kTeacher, kStudent };

/// Closed form:
///   embeddings     = (V + P) d
///   per layer      = 4 d^2 (Q, K, V, O) + 2 d f + f + d (FFN) + 4 d (two LayerNorms)
///   reference proj = 2 d_ref d          (student only)
///   output bias    = V                  (head tied to the token table)
struct ParamBreakdown {
  std::size_t embeddings = 0;
  std::size_t per_layer = 0;
  std::size_t layers = 0;
  std::size_t reference_projections = 0;
  std::size_t output_bias = 0;
  std::size_t total = 0;
};

inline ParamBreakdown param_breakdown(const ModelConfig& c, ModelRole role) {
  ParamBreakdown b;
  const std::size_t d = c.hidden_size, f = c.ffn_size;
  b.embeddings = (c.vocab_size + c.max_seq_len) * d;
  b.per_layer = 4 * d * d + 2 * d * f + f + d + 4 * d;
  b.layers = c.num_layers * b.per_layer;
  b.reference_projections = role == ModelRole::kStudent ? 2 * c.reference_hidden_size * d : 0;
  b.output_bias = c.vocab_size;
  b.total = b.embeddings + b.layers + b.reference_projections + b.output_bias;
  return b;
}

inline std::size_t param_count(const ModelConfig& c, ModelRole role) { return param_breakdown(c, role).total; }

}  // namespace refdistill
