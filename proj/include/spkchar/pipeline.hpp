#pragma once

// Command-line pipeline: one JSON config per run, flags override fields, and
// every seeded component draws from a named sub-seed of the root seed.
//
//   gen-synth     corpus splits + encoder spec      <out>/corpus/
//   lm-init       frozen LM checkpoint              <out>/lm.bin
//   train         connector + training report       <out>/connectors/, <out>/reports/
//   eval          metric records for a task         <out>/metrics/<task>.jsonl
//   gen-trials    verification trial list           <out>/trials/
//   score-trials  scores + EER record               <out>/scores/, <out>/metrics/
//   annotate      annotated dialogues               <out>/annotated/dialogues.jsonl

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "spkchar/annotator.hpp"
#include "spkchar/connector.hpp"
#include "spkchar/core.hpp"
#include "spkchar/encoder.hpp"
#include "spkchar/errors.hpp"
#include "spkchar/metrics.hpp"
#include "spkchar/prompts.hpp"
#include "spkchar/rng.hpp"
#include "spkchar/toylm.hpp"
#include "spkchar/training.hpp"
#include "spkchar/verification.hpp"

namespace spkchar {

inline constexpr const char* kTaskUniversal = "universal";

/// Per-task training settings; unset fields fall back to RunConfig::train.
struct TaskTrainSettings {
  int k = 1;
  double init_scale = 1.0;
  std::optional<double> learning_rate;
  std::optional<int> batch_size, max_epochs, patience;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";

  // synthetic encoder and corpus splits
  int d_enc = 32;
  double noise_sigma = 0.05;
  std::vector<std::string> attributes{"gender", "age", "emotion"};
  std::map<std::string, SynthCorpusSpec> splits;
  // split names used by each task family
  std::string train_split = "train", dev_split = "dev", test_split = "test";
  std::string asv_train_split = "asv_train", asv_dev_split = "asv_dev", asv_test_split = "asv_test";

  LMConfig lm;
  TrainConfig train;
  std::map<std::string, TaskTrainSettings> tasks;
  std::vector<std::string> universal_tasks{kTaskAgeGender, kTaskEmotion};

  int asv_train_pairs = 2000;
  int asv_dev_pairs = 200;
  TrialProtocol protocol;  // seed field ignored: trials use a sub-seed

  std::optional<std::filesystem::path> dialogues;
  int dialogue_turns = 3;

  std::string task;  // --task

  static RunConfig defaults() {
    RunConfig c;
    SynthCorpusSpec s;
    s.sessions_per_speaker = 1;
    s.with_transcripts = true;
    s.n_speakers = 100;
    s.utterances_per_session = 3;
    s.speaker_prefix = "tr";
    c.splits["train"] = s;
    s.n_speakers = 25;
    s.utterances_per_session = 2;
    s.speaker_prefix = "dv";
    c.splits["dev"] = s;
    s.speaker_prefix = "te";
    c.splits["test"] = s;
    SynthCorpusSpec a;
    a.sessions_per_speaker = 2;
    a.utterances_per_session = 5;
    a.n_speakers = 250;
    a.speaker_prefix = "vtr";
    c.splits["asv_train"] = a;
    a.n_speakers = 20;
    a.speaker_prefix = "vdv";
    c.splits["asv_dev"] = a;
    a.n_speakers = 40;
    a.speaker_prefix = "vte";
    c.splits["asv_test"] = a;
    return c;
  }

  TaskTrainSettings settings(const std::string& t) const {
    auto it = tasks.find(t);
    return it == tasks.end() ? TaskTrainSettings{} : it->second;
  }

  TrainConfig train_config(const std::string& t) const {
    TrainConfig tc = train;
    const auto s = settings(t);
    if (s.learning_rate) tc.learning_rate = *s.learning_rate;
    if (s.batch_size) tc.batch_size = *s.batch_size;
    if (s.max_epochs) tc.max_epochs = *s.max_epochs;
    if (s.patience) tc.patience = *s.patience;
    tc.seed = derive_seed(seed, "train:" + t);
    tc.multi_task = t == kTaskUniversal;
    return tc;
  }

  LMConfig lm_config() const {
    LMConfig c = lm;
    c.seed = derive_seed(seed, "lm");
    return c;
  }

  TrialProtocol trial_protocol() const {
    TrialProtocol p = protocol;
    p.seed = derive_seed(seed, "trials:nj" + std::to_string(p.n_j) + "_nk" + std::to_string(p.n_k));
    return p;
  }

  void validate() const {
    if (d_enc <= 0) throw ConfigError("d_enc must be positive");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be nonnegative");
    if (splits.empty()) throw ConfigError("no corpus splits configured");
    lm_config().validate();
    train.validate();
    for (const auto& [name, s] : tasks) {
      if (name != kTaskUniversal) builtin_task(name);
      if (s.k < 1) throw ConfigError("task '" + name + "': k must be positive");
      train_config(name).validate();
    }
    for (const auto& t : universal_tasks)
      if (t == kTaskVerification || t == kTaskUniversal)
        throw ConfigError("universal connector covers attribute tasks only, not '" + t + "'");
    if (universal_tasks.size() < 2) throw ConfigError("universal connector needs at least two tasks");
    if (asv_train_pairs < 2 || asv_dev_pairs < 2) throw ConfigError("asv pair counts must be at least 2");
    protocol.validate();
    if (dialogue_turns < 1) throw ConfigError("dialogue_turns must be positive");
  }
};

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

inline SynthCorpusSpec split_from_json(const json& j, SynthCorpusSpec s, const std::string& name) {
  check_keys(j,
             {"n_speakers", "sessions_per_speaker", "utterances_per_session", "age_min", "age_max",
              "with_transcripts", "speaker_prefix"},
             "split '" + name + "'");
  s.n_speakers = j.value("n_speakers", s.n_speakers);
  s.sessions_per_speaker = j.value("sessions_per_speaker", s.sessions_per_speaker);
  s.utterances_per_session = j.value("utterances_per_session", s.utterances_per_session);
  s.age_min = j.value("age_min", s.age_min);
  s.age_max = j.value("age_max", s.age_max);
  s.with_transcripts = j.value("with_transcripts", s.with_transcripts);
  s.speaker_prefix = j.value("speaker_prefix", s.speaker_prefix);
  return s;
}

}  // namespace detail

inline RunConfig run_config_from_json(const json& j) {
  using detail::check_keys;
  RunConfig c = RunConfig::defaults();
  try {
    check_keys(j,
               {"seed", "out", "synth", "lm", "train", "tasks", "universal_tasks", "verification", "protocol",
                "annotate"},
               "config");
    c.seed = j.value("seed", c.seed);
    if (j.contains("out")) c.out = j["out"].get<std::string>();
    if (j.contains("synth")) {
      const auto& s = j["synth"];
      check_keys(s, {"d_enc", "noise_sigma", "attributes", "splits"}, "synth");
      c.d_enc = s.value("d_enc", c.d_enc);
      c.noise_sigma = s.value("noise_sigma", c.noise_sigma);
      if (s.contains("attributes")) c.attributes = s["attributes"].get<std::vector<std::string>>();
      if (s.contains("splits")) {
        std::map<std::string, SynthCorpusSpec> splits;
        for (const auto& [name, sj] : s["splits"].items()) {
          SynthCorpusSpec base;
          base.speaker_prefix = name;
          if (c.splits.count(name)) base = c.splits[name];
          splits[name] = detail::split_from_json(sj, base, name);
        }
        c.splits = std::move(splits);
      }
    }
    if (j.contains("lm")) {
      check_keys(j["lm"], {"vocab", "d_lm", "n_layers", "n_heads", "max_seq"}, "lm");
      c.lm = lm_config_from_json(j["lm"]);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      check_keys(t, {"learning_rate", "batch_size", "max_epochs", "patience"}, "train");
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.max_epochs = t.value("max_epochs", c.train.max_epochs);
      c.train.patience = t.value("patience", c.train.patience);
    }
    if (j.contains("tasks")) {
      for (const auto& [name, tj] : j["tasks"].items()) {
        check_keys(tj, {"k", "init_scale", "learning_rate", "batch_size", "max_epochs", "patience"},
                   "tasks." + name);
        TaskTrainSettings s;
        s.k = tj.value("k", s.k);
        s.init_scale = tj.value("init_scale", s.init_scale);
        if (tj.contains("learning_rate")) s.learning_rate = tj["learning_rate"].get<double>();
        if (tj.contains("batch_size")) s.batch_size = tj["batch_size"].get<int>();
        if (tj.contains("max_epochs")) s.max_epochs = tj["max_epochs"].get<int>();
        if (tj.contains("patience")) s.patience = tj["patience"].get<int>();
        c.tasks[name] = s;
      }
    }
    if (j.contains("universal_tasks")) c.universal_tasks = j["universal_tasks"].get<std::vector<std::string>>();
    if (j.contains("verification")) {
      const auto& v = j["verification"];
      check_keys(v, {"train_pairs", "dev_pairs"}, "verification");
      c.asv_train_pairs = v.value("train_pairs", c.asv_train_pairs);
      c.asv_dev_pairs = v.value("dev_pairs", c.asv_dev_pairs);
    }
    if (j.contains("protocol")) {
      const auto& p = j["protocol"];
      check_keys(p, {"n_j", "n_k", "n_trials", "target_fraction"}, "protocol");
      c.protocol.n_j = p.value("n_j", c.protocol.n_j);
      c.protocol.n_k = p.value("n_k", c.protocol.n_k);
      c.protocol.n_trials = p.value("n_trials", c.protocol.n_trials);
      c.protocol.target_fraction = p.value("target_fraction", c.protocol.target_fraction);
    }
    if (j.contains("annotate")) {
      const auto& a = j["annotate"];
      check_keys(a, {"dialogues", "turns_per_speaker"}, "annotate");
      if (a.contains("dialogues")) c.dialogues = a["dialogues"].get<std::string>();
      c.dialogue_turns = a.value("turns_per_speaker", c.dialogue_turns);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

// ---- artifact paths

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path corpus(const std::string& split) const { return root / "corpus" / (split + ".jsonl"); }
  std::filesystem::path encoder() const { return root / "corpus" / "encoder.json"; }
  std::filesystem::path lm() const { return root / "lm.bin"; }
  std::filesystem::path connector(const std::string& t) const { return root / "connectors" / (t + ".conn"); }
  std::filesystem::path report(const std::string& t) const { return root / "reports" / (t + ".train.json"); }
  std::filesystem::path metrics(const std::string& name) const { return root / "metrics" / (name + ".jsonl"); }
  static std::string protocol_name(int nj, int nk) {
    return "nj" + std::to_string(nj) + "_nk" + std::to_string(nk);
  }
  std::filesystem::path trials(int nj, int nk) const { return root / "trials" / (protocol_name(nj, nk) + ".jsonl"); }
  std::filesystem::path scores(int nj, int nk) const { return root / "scores" / (protocol_name(nj, nk) + ".jsonl"); }
  std::filesystem::path annotated() const { return root / "annotated" / "dialogues.jsonl"; }
};

inline json to_json(const SyntheticEncoderSpec& s) {
  return json{{"d_enc", s.d_enc}, {"noise_sigma", s.noise_sigma}, {"seed", s.seed}, {"encoder_id", s.encoder_id},
              {"attribute_directions", s.attribute_directions}};
}

inline SyntheticEncoderSpec encoder_spec_from_json(const json& j) {
  SyntheticEncoderSpec s;
  s.d_enc = j.at("d_enc").get<int>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.encoder_id = j.at("encoder_id").get<std::string>();
  s.attribute_directions = j.at("attribute_directions").get<std::map<std::string, std::vector<double>>>();
  return s;
}

// ---- pipeline steps (library entry points, also used by the CLI)

namespace detail {

inline void require_file(const std::filesystem::path& p, const std::string& what) {
  if (!std::filesystem::is_regular_file(p)) throw ValidationError(what + " not found: " + p.string());
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

inline bool is_attribute_task(const std::string& t) {
  return t == kTaskAgeGender || t == kTaskEmotion || t == kTaskAsr;
}

inline void check_task(const std::string& t, bool allow_universal = true) {
  if (t.empty()) throw ConfigError("--task is required");
  if (t == kTaskUniversal && allow_universal) return;
  builtin_task(t);
}

}  // namespace detail

inline void step_gen_synth(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const RunPaths P{cfg.out};
  const auto enc = make_synthetic_spec(cfg.d_enc, cfg.attributes, cfg.noise_sigma, derive_seed(cfg.seed, "encoder"),
                                       "synthetic");
  std::map<std::string, EmbeddingCorpus> corpora;
  for (const auto& [name, shape] : cfg.splits)
    corpora.emplace(name, generate_synthetic_corpus(shape, enc, derive_seed(cfg.seed, "corpus:" + name)));
  detail::write_json(P.encoder(), to_json(enc));
  for (const auto& [name, corpus] : corpora) {
    save_corpus(corpus, P.corpus(name));
    log << "wrote " << P.corpus(name).string() << " (" << corpus.size() << " utterances)\n";
  }
}

inline void step_lm_init(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const FrozenLM lm = init_toy_lm(cfg.lm_config());
  save_lm(lm, RunPaths{cfg.out}.lm());
  log << "wrote " << RunPaths{cfg.out}.lm().string() << " checksum " << std::hex << lm.checksum() << std::dec
      << "\n";
}

/// Train and dev data for one task, read from the configured splits.
struct LoadedTask {
  std::vector<TaskData> data;
  std::vector<EmbeddingCorpus> corpora;  // kept alive for the example pointers
};

inline LoadedTask load_task_data(const RunConfig& cfg, const std::string& task) {
  const RunPaths P{cfg.out};
  LoadedTask out;
  out.corpora.reserve(2 * cfg.universal_tasks.size() + 2);
  if (task == kTaskVerification) {
    detail::require_file(P.corpus(cfg.asv_train_split), "corpus split");
    detail::require_file(P.corpus(cfg.asv_dev_split), "corpus split");
    out.corpora.push_back(load_corpus(P.corpus(cfg.asv_train_split)));
    out.corpora.push_back(load_corpus(P.corpus(cfg.asv_dev_split)));
    const auto& tr = out.corpora[0];
    const auto& dv = out.corpora[1];
    auto train_trials = make_pair_trials(tr, cfg.asv_train_pairs, derive_seed(cfg.seed, "asv-train-pairs"));
    auto dev_trials = make_pair_trials(dv, cfg.asv_dev_pairs, derive_seed(cfg.seed, "asv-dev-pairs"));
    out.data.push_back({builtin_task(kTaskVerification), verification_examples(tr, train_trials),
                        verification_examples(dv, dev_trials)});
    return out;
  }
  detail::require_file(P.corpus(cfg.train_split), "corpus split");
  detail::require_file(P.corpus(cfg.dev_split), "corpus split");
  out.corpora.push_back(load_corpus(P.corpus(cfg.train_split)));
  out.corpora.push_back(load_corpus(P.corpus(cfg.dev_split)));
  const std::vector<std::string> ids = task == kTaskUniversal ? cfg.universal_tasks : std::vector{task};
  for (const auto& id : ids) {
    TaskSpec spec = builtin_task(id);
    TaskData d{spec, attribute_examples(out.corpora[0], spec), attribute_examples(out.corpora[1], spec)};
    if (d.train.empty() || d.dev.empty())
      throw ValidationError("task '" + id + "': corpus splits have no items with the labels it needs");
    out.data.push_back(std::move(d));
  }
  return out;
}

inline std::pair<Connector, TrainReport> step_train(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  detail::check_task(cfg.task);
  const RunPaths P{cfg.out};
  detail::require_file(P.lm(), "LM checkpoint");
  const FrozenLM lm = load_lm(P.lm());
  LoadedTask data = load_task_data(cfg, cfg.task);
  const int d_enc = data.corpora[0].d_enc();
  const auto s = cfg.settings(cfg.task);
  Connector init = init_connector(cfg.task, d_enc, lm.d_lm(), s.k, derive_seed(cfg.seed, "connector"), s.init_scale);
  auto result = train_connector(std::move(init), lm, data.data, cfg.train_config(cfg.task),
                                [&](int e, double tr, double dv) {
                                  log << cfg.task << " epoch " << e << " train_loss " << tr << " dev_loss " << dv
                                      << "\n";
                                });
  save_connector(result.first, P.connector(cfg.task));
  json rep = to_json(result.second);
  rep["task"] = cfg.task;
  rep["lm_checksum"] = lm.checksum();
  detail::write_json(P.report(cfg.task), rep);
  log << "wrote " << P.connector(cfg.task).string() << "\n";
  return result;
}

/// Greedy answers for every usable test item of an attribute task.
inline std::vector<MetricRecord> evaluate_attribute_task(const FrozenLM& lm, const Connector& c,
                                                         const EmbeddingCorpus& test, const std::string& task,
                                                         const std::string& record_task) {
  const TaskSpec spec = builtin_task(task);
  const PrefixCache cache = lm.make_prefix_cache(leading_tokens(spec.prompt, lm.vocab()));
  std::vector<ParsedAnswer> preds;
  std::vector<AttributeLabels> refs;
  for (const auto& ex : attribute_examples(test, spec)) {
    preds.push_back(parse_answer(task, generate_answer_text(spec.prompt, c, ex.embeddings, lm, &cache)));
    refs.push_back(ex.answer.labels);
  }
  if (preds.empty()) throw ValidationError("test split has no items labelled for task '" + task + "'");
  std::vector<MetricRecord> out;
  const std::size_t n = preds.size();
  if (task == kTaskAgeGender) {
    out.push_back({record_task, "gender_accuracy", classification_accuracy(preds, refs, Attribute::gender), n, {}});
    try {
      const auto m = age_mae(preds, refs);
      out.push_back({record_task, "age_mae", m.mae, n, m.invalid_rate});
    } catch (const UndefinedMetricError& e) {
      out.push_back({record_task, "age_mae", std::nullopt, n, e.invalid_rate()});
    }
  } else if (task == kTaskEmotion) {
    out.push_back({record_task, "emotion_accuracy", classification_accuracy(preds, refs, Attribute::emotion), n, {}});
  } else if (task == kTaskAsr) {
    double total = 0.0;
    std::size_t empty = 0;
    for (std::size_t i = 0; i < n; ++i) {
      total += wer(preds[i].transcript, *refs[i].transcript);
      empty += preds[i].transcript.empty();
    }
    out.push_back({record_task, "wer", total / static_cast<double>(n), n,
                   static_cast<double>(empty) / static_cast<double>(n)});
  }
  return out;
}

inline std::vector<MetricRecord> step_eval(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  detail::check_task(cfg.task);
  const RunPaths P{cfg.out};
  detail::require_file(P.connector(cfg.task), "connector checkpoint");
  detail::require_file(P.lm(), "LM checkpoint");
  const bool asv = cfg.task == kTaskVerification;
  const auto test_path = P.corpus(asv ? cfg.asv_test_split : cfg.test_split);
  detail::require_file(test_path, "corpus split");
  const FrozenLM lm = load_lm(P.lm());
  const Connector c = load_connector(P.connector(cfg.task));
  const EmbeddingCorpus test = load_corpus(test_path);
  std::vector<MetricRecord> records;
  if (asv) {
    TrialProtocol p = cfg.trial_protocol();
    p.n_j = 1;
    p.n_k = 0;
    p.seed = derive_seed(cfg.seed, "trials:nj1_nk0");
    const auto r = evaluate_protocol(lm, c, test, p);
    records.push_back({cfg.task, "eer", r.eer.eer, r.scores.size(), {}});
  } else {
    const std::vector<std::string> ids = cfg.task == kTaskUniversal ? cfg.universal_tasks : std::vector{cfg.task};
    for (const auto& id : ids)
      for (auto& r : evaluate_attribute_task(lm, c, test, id, cfg.task)) records.push_back(std::move(r));
  }
  save_metrics(records, P.metrics(cfg.task));
  for (const auto& r : records)
    log << r.task << " " << r.metric << " " << (r.value ? std::to_string(*r.value) : "undefined") << "\n";
  return records;
}

inline std::vector<Trial> step_gen_trials(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const RunPaths P{cfg.out};
  detail::require_file(P.corpus(cfg.asv_test_split), "corpus split");
  const EmbeddingCorpus test = load_corpus(P.corpus(cfg.asv_test_split));
  const TrialProtocol p = cfg.trial_protocol();
  auto trials = (p.n_j == 1 && p.n_k == 0) ? make_pair_trials(test, p.n_trials, p.seed)
                                             : make_conversation_trials(test, p);
  save_trials(trials, P.trials(p.n_j, p.n_k));
  log << "wrote " << P.trials(p.n_j, p.n_k).string() << " (" << trials.size() << " trials)\n";
  return trials;
}

inline EERResult step_score_trials(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const RunPaths P{cfg.out};
  const auto& p = cfg.protocol;
  const auto trials_path = P.trials(p.n_j, p.n_k);
  detail::require_file(trials_path, "trial list");
  detail::require_file(P.connector(kTaskVerification), "connector checkpoint");
  detail::require_file(P.lm(), "LM checkpoint");
  detail::require_file(P.corpus(cfg.asv_test_split), "corpus split");
  const FrozenLM lm = load_lm(P.lm());
  const Connector c = load_connector(P.connector(kTaskVerification));
  const EmbeddingCorpus test = load_corpus(P.corpus(cfg.asv_test_split));
  const auto trials = load_trials(trials_path);
  const auto scores = score_trials(lm, c, test, trials);
  const auto eer = compute_eer(scores);
  save_scores(scores, P.scores(p.n_j, p.n_k));
  const std::string name = std::string(kTaskVerification) + "_" + RunPaths::protocol_name(p.n_j, p.n_k);
  save_metrics({{kTaskVerification, "eer_" + RunPaths::protocol_name(p.n_j, p.n_k), eer.eer, scores.size(), {}}},
               P.metrics(name));
  log << name << " eer " << eer.eer << " threshold " << eer.threshold << "\n";
  return eer;
}

inline std::vector<AnnotatedDialogue> step_annotate(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const RunPaths P{cfg.out};
  detail::require_file(P.lm(), "LM checkpoint");
  detail::require_file(P.corpus(cfg.test_split), "corpus split");
  std::map<std::string, Connector> conns;
  for (const char* t : {kTaskAgeGender, kTaskEmotion}) {
    detail::require_file(P.connector(t), "connector checkpoint");
    conns.emplace(t, load_connector(P.connector(t)));
  }
  if (cfg.dialogues) detail::require_file(*cfg.dialogues, "dialogue file");
  const FrozenLM lm = load_lm(P.lm());
  const EmbeddingCorpus corpus = load_corpus(P.corpus(cfg.test_split));
  const auto dialogues = cfg.dialogues ? load_dialogues(*cfg.dialogues)
                                       : dialogues_from_corpus(corpus, cfg.dialogue_turns);
  std::vector<AnnotatedDialogue> out;
  for (const auto& d : dialogues) out.push_back(annotate_dialogue(d, corpus, lm, conns));
  emit_annotated(out, P.annotated());
  log << "wrote " << P.annotated().string() << " (" << out.size() << " dialogues)\n";
  return out;
}

// ---- CLI

/// Parses argv, runs one subcommand. Exit status: 0 ok, 1 validation or
/// runtime failure, 2 usage error.
inline int run_command(int argc, const char* const* argv, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  CLI::App app{"spkchar: speaker characterisation through a frozen LM and trained connectors"};
  app.require_subcommand(1, 1);
  std::string config_path, task, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> nj, nk, n_trials;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run config");
    sub->add_option("--seed", seed, "root seed (overrides config)");
    sub->add_option("--out", out_dir, "output directory (overrides config)");
    sub->add_option("--task", task, "emotion | age_gender | asr | verification | universal");
    sub->add_option("--nj", nj, "test utterances from speaker j");
    sub->add_option("--nk", nk, "test utterances from speaker k");
    sub->add_option("--n-trials", n_trials, "number of trials");
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-synth", "write synthetic corpus splits"},
      {"lm-init", "write the frozen LM checkpoint"},
      {"train", "train one task connector (or 'universal')"},
      {"eval", "write metric records for a task"},
      {"gen-trials", "write a verification trial list"},
      {"score-trials", "score a trial list and compute the EER"},
      {"annotate", "annotate dialogues with speaker tags"}};
  for (const auto& [name, help] : commands) add_common(app.add_subcommand(name, help));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig::defaults() : load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    cfg.task = task;
    if (nj) cfg.protocol.n_j = *nj;
    if (nk) cfg.protocol.n_k = *nk;
    if (n_trials) cfg.protocol.n_trials = *n_trials;
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gen-synth") step_gen_synth(cfg, out);
    else if (cmd == "lm-init") step_lm_init(cfg, out);
    else if (cmd == "train") step_train(cfg, out);
    else if (cmd == "eval") step_eval(cfg, out);
    else if (cmd == "gen-trials") step_gen_trials(cfg, out);
    else if (cmd == "score-trials") step_score_trials(cfg, out);
    else step_annotate(cfg, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace spkchar
