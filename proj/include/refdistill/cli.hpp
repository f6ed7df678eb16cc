#pragma once

// Command-line front end. run_cli takes the arguments after the program name
// and writes to the given streams, so tests can drive it in-process.
//
// Exit codes: 0 success, 1 validation failure or bad usage, 2 I/O failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "refdistill/checkpoint.hpp"
#include "refdistill/distillation.hpp"
#include "refdistill/infotheory.hpp"
#include "refdistill/pretrain.hpp"
#include "refdistill/reference_index.hpp"
#include "refdistill/relevance.hpp"
#include "refdistill/synthetic.hpp"
#include "refdistill/verify.hpp"

namespace refdistill {

namespace cli_detail {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline fs::path prepare_out_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + dir + "'");
  return fs::path(dir);
}

inline void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw IoError("no such file '" + path + "'");
}

/// Run record written next to the outputs. Inputs keep the path they were
/// given with; outputs are named relative to the output directory so two
/// runs into different directories write the same manifest.
class Manifest {
 public:
  explicit Manifest(std::string command) { j_["command"] = std::move(command); }

  void config(const std::string& key, const nlohmann::ordered_json& value) { j_["config"][key] = value; }
  void seed(std::uint64_t s) { j_["seed"] = s; }

  void input(const std::string& role, const std::string& path) {
    j_["inputs"][role] = {{"path", path}, {"checksum", file_checksum(path)}};
  }

  void output(const fs::path& dir, const std::string& name) {
    outputs_.push_back({name, file_checksum((dir / name).string())});
  }

  void write(const fs::path& dir) {
    auto& outs = j_["outputs"];
    outs = nlohmann::ordered_json::array();
    for (const auto& [name, sum] : outputs_) outs.push_back({{"file", name}, {"checksum", sum}});
    write_text(dir / "manifest.json", j_.dump(2) + "\n");
  }

 private:
  nlohmann::ordered_json j_;
  std::vector<std::pair<std::string, std::string>> outputs_;
};

inline void save_projections(const std::string& path, const ProjectionSet& p, const StudentModel& s) {
  encode_checkpoint({CheckpointRole::kProjections, s.config, s.delta, named_tensors(p)}).save(path);
}

inline std::vector<std::vector<std::size_t>> tokenized(const Corpus& c, const Vocabulary& v, std::size_t max_len) {
  std::vector<std::vector<std::size_t>> docs;
  for (const auto& d : c.docs) docs.push_back(truncate(tokenize(d.text, v), max_len));
  return docs;
}

// ---------------------------------------------------------------------------
// Commands

struct SynthArgs {
  std::string out;
  SyntheticSpec spec;
};

inline int synth_corpus(const SynthArgs& a, std::ostream& out) {
  const Corpus corpus = synthetic_corpus(a.spec);
  const fs::path dir = prepare_out_dir(a.out);
  std::string text;
  for (const auto& d : corpus.docs) {
    nlohmann::ordered_json j;
    j["id"] = d.id;
    j["text"] = d.text;
    text += j.dump() + "\n";
  }
  write_text(dir / "corpus.jsonl", text);
  Manifest m("synth-corpus");
  m.config("documents", a.spec.documents);
  m.config("words", a.spec.words);
  m.config("topics", a.spec.topics);
  m.config("min_length", a.spec.min_length);
  m.config("max_length", a.spec.max_length);
  m.config("noise", a.spec.noise);
  m.seed(a.spec.seed);
  m.output(dir, "corpus.jsonl");
  m.write(dir);
  out << "wrote " << corpus.size() << " documents to " << (dir / "corpus.jsonl").string() << "\n";
  return 0;
}

struct BuildRefsArgs {
  std::string corpus, out;
  double k1 = 1.2, b = 0.75;
};

inline int build_refs(const BuildRefsArgs& a, std::ostream& out) {
  require_file(a.corpus);
  const Corpus corpus = load_corpus(a.corpus);
  const Vocabulary vocab = Vocabulary::build(corpus);
  const auto pairs = build_reference_dataset(corpus, vocab, a.k1, a.b);
  std::vector<std::vector<std::size_t>> docs;
  for (const auto& d : corpus.docs) docs.push_back(tokenize(d.text, vocab));
  const InvertedIndex index = build_index(docs, a.k1, a.b);

  const fs::path dir = prepare_out_dir(a.out);
  write_text(dir / "pairs.jsonl", pairs_to_jsonl(pairs));
  encode_index(index).save((dir / "index.rfbi").string());
  Manifest m("build-refs");
  m.config("k1", a.k1);
  m.config("b", a.b);
  m.input("corpus", a.corpus);
  m.output(dir, "pairs.jsonl");
  m.output(dir, "index.rfbi");
  m.write(dir);
  out << "paired " << pairs.size() << " documents, vocabulary " << vocab.size() << "\n";
  return 0;
}

struct CacheArgs {
  std::string corpus, pairs, out, teacher;
  std::string preset = "teacher-toy";
  std::uint64_t seed = 0;
  PretrainConfig pretrain;
};

inline int cache_teacher(const CacheArgs& a, std::ostream& out) {
  require_file(a.corpus);
  require_file(a.pairs);
  const Corpus corpus = load_corpus(a.corpus);
  const fs::path dir = prepare_out_dir(a.out);
  Manifest m("cache-teacher");
  m.input("corpus", a.corpus);
  m.input("pairs", a.pairs);

  TeacherModel teacher;
  std::vector<double> history;
  if (!a.teacher.empty()) {
    require_file(a.teacher);
    teacher = load_teacher(a.teacher);
    m.input("teacher", a.teacher);
  } else {
    Rng rng(a.seed);
    teacher = init_teacher(presets::by_name(a.preset), rng);
    const Vocabulary vocab = Vocabulary::build(corpus, teacher.config.vocab_size);
    PretrainConfig pc = a.pretrain;
    pc.seed = a.seed;
    history = mlm_pretrain(teacher, tokenized(corpus, vocab, teacher.config.max_seq_len), pc, Vocabulary::kMask);
    // Checkpoints hold single precision; continue from the stored weights so
    // the cache matches what later commands load.
    save_teacher((dir / "teacher.rfbm").string(), teacher);
    teacher = load_teacher((dir / "teacher.rfbm").string());
    m.config("preset", a.preset);
    m.config("pretrain_epochs", pc.epochs);
    m.config("pretrain_batch", pc.batch);
    m.config("pretrain_lr", pc.adam.lr);
    m.config("mask_rate", pc.mask_rate);
    m.seed(a.seed);
  }
  const Vocabulary vocab = Vocabulary::build(corpus, teacher.config.vocab_size);
  const auto pairs = load_pairs(a.pairs, corpus, vocab);
  const auto refs = cache_references(pairs, corpus, vocab, teacher);
  save_cache((dir / "cache.rfbc").string(), refs, teacher.config.hidden_size);

  if (a.teacher.empty()) {
    std::string csv = "epoch,mlm_loss\n";
    for (std::size_t e = 0; e < history.size(); ++e)
      csv += std::to_string(e + 1) + "," + detail::format_real(history[e]) + "\n";
    write_text(dir / "pretrain.csv", csv);
    m.output(dir, "teacher.rfbm");
    m.output(dir, "pretrain.csv");
    if (!history.empty()) out << "pretrained " << history.size() << " epochs, final MLM loss " << history.back() << "\n";
  }
  m.output(dir, "cache.rfbc");
  m.write(dir);
  out << "cached " << refs.size() << " reference documents\n";
  return 0;
}

struct DistillArgs {
  std::string corpus, pairs, cache, teacher, out, config, student_init;
  std::string preset = "student-toy";
  std::optional<std::size_t> epochs;
  std::optional<double> delta;
  std::optional<std::uint64_t> seed;
  std::size_t relevance_seeds = 0;
  std::size_t relevance_epochs = 5;
};

inline int distill(const DistillArgs& a, std::ostream& out, std::ostream& err) {
  for (const auto* p : {&a.corpus, &a.pairs, &a.cache, &a.teacher}) require_file(*p);
  if (!a.config.empty()) require_file(a.config);
  DistillConfig cfg = a.config.empty() ? DistillConfig{} : DistillConfig::load(a.config);
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.delta) cfg.delta = *a.delta;
  if (a.seed) cfg.seed = *a.seed;

  const Corpus corpus = load_corpus(a.corpus);
  const TeacherModel teacher = load_teacher(a.teacher);
  const TeacherCache cache = load_cache(a.cache);
  if (cache.hidden != teacher.config.hidden_size)
    throw ValidationError("cache width " + std::to_string(cache.hidden) + " does not match the teacher");

  Rng rng(cfg.seed);
  StudentModel student;
  if (a.student_init.empty()) {
    student = init_student(presets::by_name(a.preset), cfg.delta, rng);
  } else {
    require_file(a.student_init);
    student = load_student(a.student_init);
    if (student.delta != cfg.delta) throw ValidationError("--student-init delta differs from the run delta");
  }
  const ModelConfig& sc = student.config;
  if (sc.vocab_size != teacher.config.vocab_size || sc.reference_hidden_size != teacher.config.hidden_size)
    throw ValidationError("student vocabulary and reference width must match the teacher");
  cfg.validate(sc.num_layers);
  ProjectionSet projections = init_projections(sc.num_layers, sc.hidden_size, teacher.config.hidden_size, rng);

  const Vocabulary vocab = Vocabulary::build(corpus, teacher.config.vocab_size);
  const auto pairs = load_pairs(a.pairs, corpus, vocab);
  for (const auto& p : pairs)
    if (cache.find(p.r_id) == nullptr) throw ValidationError("reference '" + p.r_id + "' is not in the cache");
  const auto examples = prepare_examples(pairs, cache.records, teacher, cfg.mask_rate, cfg.seed);
  for (const auto& ex : examples) {
    if (delta_exceeds_uniform_weight(cfg.delta, ex.tokens.size() + ex.reference.length())) {
      err << "warning: delta " << cfg.delta << " is at least 1/n for some first-layer rows; "
          << "their attention weights can all be negative\n";
      break;
    }
  }

  const fs::path dir = prepare_out_dir(a.out);
  Manifest m("distill");
  m.input("corpus", a.corpus);
  m.input("pairs", a.pairs);
  m.input("cache", a.cache);
  m.input("teacher", a.teacher);
  if (!a.config.empty()) m.input("config", a.config);
  if (!a.student_init.empty()) m.input("student_init", a.student_init);
  m.config("preset", a.student_init.empty() ? a.preset : std::string("checkpoint"));
  for (const auto& [k, v] : cfg.entries()) m.config(k, v);
  m.seed(cfg.seed);

  save_student((dir / "student_init.rfbm").string(), student);
  student = load_student((dir / "student_init.rfbm").string());
  m.output(dir, "student_init.rfbm");
  TrainState init{student, projections, {}};
  int code = 0;
  std::vector<LossBreakdown> history;
  try {
    DistillResult r = distill_run(std::move(init), examples, cfg, teacher.config);
    history = std::move(r.history);
    save_student((dir / "student.rfbm").string(), r.state.student);
    save_projections((dir / "projections.rfbm").string(), r.state.projections, r.state.student);
    m.output(dir, "student.rfbm");
    m.output(dir, "projections.rfbm");
  } catch (const DistillError& e) {
    history = e.history;
    err << "error: " << e.what() << "\n";
    code = 1;
  }
  write_text(dir / "metrics.csv", metrics_csv(history));
  m.output(dir, "metrics.csv");
  if (!history.empty()) {
    out << "epoch 1 total " << history.front().total << ", epoch " << history.size() << " total "
        << history.back().total << ", decreasing " << decreasing_fraction(history) << "\n";
  }

  if (code == 0 && a.relevance_seeds > 0) {
    DistillConfig rc = cfg;
    rc.epochs = a.relevance_epochs;
    const auto rows = relevance_report(examples, sc, teacher.config, rc, a.relevance_seeds);
    write_text(dir / "relevance.csv", relevance_csv(rows));
    m.output(dir, "relevance.csv");
    m.config("relevance_seeds", a.relevance_seeds);
    m.config("relevance_epochs", a.relevance_epochs);
    double mean = 0.0;
    for (const auto& r : rows) mean += r.delta() / static_cast<double>(rows.size());
    out << "held-out hidden loss, shuffled minus true references: mean " << mean << " over " << rows.size()
        << " seeds\n";
  }
  m.write(dir);
  return code;
}

inline int param_count_cmd(const std::string& preset, std::ostream& out) {
  const ModelConfig c = presets::by_name(preset);
  const ModelRole role = presets::is_student(preset) ? ModelRole::kStudent : ModelRole::kTeacher;
  const ParamBreakdown b = param_breakdown(c, role);
  out << preset << ": L=" << c.num_layers << " d=" << c.hidden_size << " d_f=" << c.ffn_size << " H=" << c.num_heads
      << " V=" << c.vocab_size << " P=" << c.max_seq_len;
  if (role == ModelRole::kStudent) out << " d_ref=" << c.reference_hidden_size;
  out << "\n"
      << "  embeddings             (V + P) d              " << b.embeddings << "\n"
      << "  per layer              4d^2 + 2d d_f + d_f + 5d  " << b.per_layer << "\n"
      << "  layers                 L x per layer          " << b.layers << "\n"
      << "  reference projections  2 d_ref d              " << b.reference_projections << "\n"
      << "  output bias            V                      " << b.output_bias << "\n"
      << "  total                                         " << b.total << "\n";
  return 0;
}

}  // namespace cli_detail

/// Entry point; `args` excludes the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  using namespace cli_detail;
  CLI::App app{"Reference-augmented transformer distillation toolkit", "refdistill"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth-corpus", "Write a seeded topic-structured corpus");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--documents", synth.spec.documents);
  synth_cmd->add_option("--words", synth.spec.words);
  synth_cmd->add_option("--topics", synth.spec.topics);
  synth_cmd->add_option("--min-length", synth.spec.min_length);
  synth_cmd->add_option("--max-length", synth.spec.max_length);
  synth_cmd->add_option("--noise", synth.spec.noise);
  synth_cmd->add_option("--seed", synth.spec.seed);

  BuildRefsArgs refs;
  auto* refs_cmd = app.add_subcommand("build-refs", "Pair every document with its BM25 nearest neighbour");
  refs_cmd->add_option("--corpus", refs.corpus, "Plain text or JSONL corpus")->required();
  refs_cmd->add_option("--out", refs.out, "Output directory")->required();
  refs_cmd->add_option("--k1", refs.k1);
  refs_cmd->add_option("--b", refs.b);

  CacheArgs cache;
  auto* cache_cmd = app.add_subcommand("cache-teacher", "Cache teacher outputs for every reference document");
  cache_cmd->add_option("--corpus", cache.corpus)->required();
  cache_cmd->add_option("--pairs", cache.pairs)->required();
  cache_cmd->add_option("--out", cache.out)->required();
  cache_cmd->add_option("--teacher", cache.teacher, "Existing teacher checkpoint");
  cache_cmd->add_option("--preset", cache.preset, "Teacher preset when no checkpoint is given");
  cache_cmd->add_option("--seed", cache.seed);
  cache_cmd->add_option("--pretrain-epochs", cache.pretrain.epochs, "MLM epochs for a fresh teacher");
  cache_cmd->add_option("--pretrain-lr", cache.pretrain.adam.lr);
  cache_cmd->add_option("--pretrain-batch", cache.pretrain.batch);

  DistillArgs dist;
  auto* dist_cmd = app.add_subcommand("distill", "Distill a student from the teacher");
  dist_cmd->add_option("--corpus", dist.corpus)->required();
  dist_cmd->add_option("--pairs", dist.pairs)->required();
  dist_cmd->add_option("--cache", dist.cache)->required();
  dist_cmd->add_option("--teacher", dist.teacher)->required();
  dist_cmd->add_option("--out", dist.out)->required();
  dist_cmd->add_option("--config", dist.config, "key = value settings file");
  dist_cmd->add_option("--epochs", dist.epochs);
  dist_cmd->add_option("--delta", dist.delta);
  dist_cmd->add_option("--seed", dist.seed);
  dist_cmd->add_option("--preset", dist.preset, "Student preset");
  dist_cmd->add_option("--student-init", dist.student_init, "Start from this student checkpoint");
  dist_cmd->add_option("--relevance-seeds", dist.relevance_seeds, "Also run the shuffled-reference comparison");
  dist_cmd->add_option("--relevance-epochs", dist.relevance_epochs);

  std::uint64_t verify_seed = 0;
  auto* verify_cmd = app.add_subcommand("verify", "Run the invariant suite");
  verify_cmd->add_option("--seed", verify_seed);

  std::size_t trials = 1000;
  std::uint64_t info_seed = 0;
  auto* info_cmd = app.add_subcommand("infotheory", "Run the information-theoretic sweeps");
  info_cmd->add_option("--trials", trials);
  info_cmd->add_option("--seed", info_seed);

  std::string preset;
  auto* count_cmd = app.add_subcommand("param-count", "Exact parameter count of a preset");
  count_cmd->add_option("--preset", preset)->required();

  std::vector<std::string> argv_storage{"refdistill"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_storage) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*synth_cmd) return synth_corpus(synth, out);
    if (*refs_cmd) return build_refs(refs, out);
    if (*cache_cmd) return cache_teacher(cache, out);
    if (*dist_cmd) return distill(dist, out, err);
    if (*verify_cmd) {
      const auto results = run_verify_suite(verify_seed);
      out << format_verify(results);
      for (const auto& r : results)
        if (!r.passed) return 1;
      return 0;
    }
    if (*info_cmd) {
      const auto results = run_theorem_sweeps(trials, info_seed);
      out << format_sweeps(results);
      for (const auto& r : results)
        if (!r.passed) return 1;
      return 0;
    }
    if (*count_cmd) return param_count_cmd(preset, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace refdistill
