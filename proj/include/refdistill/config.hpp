#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "refdistill/error.hpp"

namespace refdistill {

enum class Activation { kGelu, kRelu };

inline std::string_view activation_name(Activation a) { return a == Activation::kGelu ? "gelu" : "relu"; }

inline Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::kGelu;
  if (name == "relu") return Activation::kRelu;
  throw ValidationError("unknown activation '" + std::string(name) + "'");
}

/// Encoder shape. reference_hidden_size is the width of the teacher
/// representations a student's first layer attends over (0 for teachers).
struct ModelConfig {
  std::size_t num_layers = 0;
  std::size_t hidden_size = 0;
  std::size_t num_heads = 1;
  std::size_t ffn_size = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 0;
  std::size_t reference_hidden_size = 0;
  Activation activation = Activation::kGelu;
  double ln_eps = 1e-12;

  std::size_t head_dim() const { return hidden_size / num_heads; }

  void validate() const {
    if (hidden_size == 0 || num_heads == 0 || ffn_size == 0 || vocab_size == 0 || max_seq_len == 0) {
      throw ValidationError("model config has a zero dimension");
    }
    if (hidden_size % num_heads != 0) {
      throw ValidationError("hidden size " + std::to_string(hidden_size) + " is not divisible by " +
                            std::to_string(num_heads) + " heads");
    }
    if (!(ln_eps > 0.0)) throw ValidationError("layer norm eps must be positive");
  }

  void validate_student() const {
    validate();
    if (num_layers < 1) throw ValidationError("a student needs at least the reference-augmented layer");
    if (reference_hidden_size == 0) throw ValidationError("student config needs the teacher hidden size");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace presets {

inline ModelConfig teacher_base() { return {12, 768, 12, 3072, 30522, 512, 0}; }
inline ModelConfig student_tiny() { return {4, 312, 12, 1200, 30522, 512, 768}; }
inline ModelConfig teacher_toy() { return {6, 48, 4, 96, 64, 32, 0}; }
inline ModelConfig student_toy() { return {2, 24, 4, 48, 64, 32, 48}; }

inline bool is_student(std::string_view name) { return name == "student-tiny" || name == "student-toy"; }

inline ModelConfig by_name(std::string_view name) {
  if (name == "teacher-base") return teacher_base();
  if (name == "student-tiny") return student_tiny();
  if (name == "teacher-toy") return teacher_toy();
  if (name == "student-toy") return student_toy();
  throw ValidationError("unknown preset '" + std::string(name) +
                        "' (expected teacher-base, student-tiny, teacher-toy, student-toy)");
}

}  // namespace presets
}  // namespace refdistill
