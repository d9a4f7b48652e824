#pragma once

// Dialogue annotation: per-turn emotion tags plus per-speaker age and gender
// aggregated over that speaker's turns.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "spkchar/connector.hpp"
#include "spkchar/core.hpp"
#include "spkchar/errors.hpp"
#include "spkchar/metrics.hpp"
#include "spkchar/prompts.hpp"
#include "spkchar/toylm.hpp"

namespace spkchar {

struct DialogueTurn {
  std::string utterance_key;
  std::string speaker_id;
  std::optional<std::vector<std::string>> transcript;
  bool operator==(const DialogueTurn&) const = default;
};

struct Dialogue {
  std::string dialogue_id;
  std::vector<DialogueTurn> turns;
};

struct SpeakerTags {
  std::string speaker_id;
  std::optional<int> age;  // nullopt: unknown
  std::optional<Gender> gender;
  bool operator==(const SpeakerTags&) const = default;
};

struct AnnotatedTurn {
  std::string utterance_key;
  std::string speaker_id;
  std::optional<std::vector<std::string>> transcript;
  std::optional<Emotion> emotion;
  bool operator==(const AnnotatedTurn&) const = default;
};

struct AnnotatedDialogue {
  std::string dialogue_id;
  std::vector<SpeakerTags> speakers;  // first-appearance order
  std::vector<AnnotatedTurn> turns;
  bool operator==(const AnnotatedDialogue&) const = default;
};

/// Majority vote; a tie or no votes gives unknown.
inline std::optional<Gender> majority_gender(const std::vector<std::optional<Gender>>& votes) {
  int male = 0, female = 0;
  for (const auto& v : votes)
    if (v) (*v == Gender::male ? male : female)++;
  if (male == female) return std::nullopt;
  return male > female ? Gender::male : Gender::female;
}

/// Median of the valid ages; an even count averages the middle pair and
/// rounds half up.
inline std::optional<int> median_age(const std::vector<std::optional<int>>& ages) {
  std::vector<int> v;
  for (const auto& a : ages)
    if (a) v.push_back(*a);
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  if (v.size() % 2) return v[m];
  return (v[m - 1] + v[m] + 1) / 2;
}

/// Combines per-turn parses (one age_gender and one emotion parse per turn)
/// into the annotation.
inline AnnotatedDialogue aggregate_annotation(const Dialogue& d, const std::vector<ParsedAnswer>& age_gender,
                                              const std::vector<ParsedAnswer>& emotion) {
  if (age_gender.size() != d.turns.size() || emotion.size() != d.turns.size())
    throw ValidationError("dialogue '" + d.dialogue_id + "': one parse per turn expected");
  AnnotatedDialogue out;
  out.dialogue_id = d.dialogue_id;
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<std::optional<Gender>>, std::vector<std::optional<int>>>> votes;
  for (std::size_t t = 0; t < d.turns.size(); ++t) {
    const auto& turn = d.turns[t];
    if (!votes.count(turn.speaker_id)) order.push_back(turn.speaker_id);
    votes[turn.speaker_id].first.push_back(age_gender[t].gender);
    votes[turn.speaker_id].second.push_back(age_gender[t].age);
    out.turns.push_back({turn.utterance_key, turn.speaker_id, turn.transcript, emotion[t].emotion});
  }
  for (const auto& s : order)
    out.speakers.push_back({s, median_age(votes[s].second), majority_gender(votes[s].first)});
  return out;
}

using QueryFn = std::function<ParsedAnswer(const std::string& task_id, const AudioEmbedding&)>;

inline AnnotatedDialogue annotate_dialogue(const Dialogue& d, const EmbeddingCorpus& corpus, const QueryFn& query) {
  if (d.turns.empty()) throw ValidationError("dialogue '" + d.dialogue_id + "' has no turns");
  std::vector<ParsedAnswer> ag, emo;
  for (const auto& turn : d.turns) {
    const AudioEmbedding* e = corpus.find(turn.utterance_key);
    if (!e)
      throw ValidationError("dialogue '" + d.dialogue_id + "': utterance '" + turn.utterance_key + "' not in corpus");
    if (e->speaker_id != turn.speaker_id)
      throw ValidationError("dialogue '" + d.dialogue_id + "': turn speaker '" + turn.speaker_id +
                            "' does not match utterance '" + turn.utterance_key + "'");
    ag.push_back(query(kTaskAgeGender, *e));
    emo.push_back(query(kTaskEmotion, *e));
  }
  return aggregate_annotation(d, ag, emo);
}

/// Queries the age_gender and emotion connectors through the frozen LM.
inline AnnotatedDialogue annotate_dialogue(const Dialogue& d, const EmbeddingCorpus& corpus, const FrozenLM& lm,
                                           const std::map<std::string, Connector>& connectors) {
  for (const char* task : {kTaskAgeGender, kTaskEmotion})
    if (!connectors.count(task)) throw ConfigError(std::string("annotation needs a '") + task + "' connector");
  std::map<std::string, std::pair<TaskSpec, PrefixCache>> tasks;
  for (const char* task : {kTaskAgeGender, kTaskEmotion}) {
    TaskSpec spec = builtin_task(task);
    PrefixCache cache = lm.make_prefix_cache(leading_tokens(spec.prompt, lm.vocab()));
    tasks.emplace(task, std::pair{std::move(spec), std::move(cache)});
  }
  return annotate_dialogue(d, corpus, [&](const std::string& task, const AudioEmbedding& e) {
    const auto& [spec, cache] = tasks.at(task);
    return parse_answer(task, generate_answer_text(spec.prompt, connectors.at(task), {&e}, lm, &cache));
  });
}

inline json to_json(const AnnotatedDialogue& a) {
  json speakers = json::array(), turns = json::array();
  for (const auto& s : a.speakers)
    speakers.push_back({{"speaker_id", s.speaker_id},
                        {"age", s.age ? json(*s.age) : json("unknown")},
                        {"gender", s.gender ? json(to_string(*s.gender)) : json("unknown")}});
  for (const auto& t : a.turns) {
    json j{{"utterance_id", t.utterance_key}, {"speaker_id", t.speaker_id}};
    if (t.transcript) j["transcript"] = join_words(*t.transcript);
    j["emotion"] = t.emotion ? to_string(*t.emotion) : "unknown";
    turns.push_back(std::move(j));
  }
  return json{{"dialogue_id", a.dialogue_id}, {"speakers", speakers}, {"turns", turns}};
}

inline AnnotatedDialogue annotated_from_json(const json& j) {
  AnnotatedDialogue a;
  a.dialogue_id = j.at("dialogue_id").get<std::string>();
  for (const auto& s : j.at("speakers")) {
    SpeakerTags t{s.at("speaker_id").get<std::string>(), std::nullopt, std::nullopt};
    if (s.at("age").is_number_integer()) {
      t.age = s.at("age").get<int>();
    } else if (s.at("age") != "unknown") {
      throw ParseError("bad age tag " + s.at("age").dump());
    }
    const auto g = s.at("gender").get<std::string>();
    if (g != "unknown") {
      t.gender = gender_from_string(g);
      if (!t.gender) throw ParseError("bad gender tag '" + g + "'");
    }
    a.speakers.push_back(std::move(t));
  }
  for (const auto& tj : j.at("turns")) {
    AnnotatedTurn t{tj.at("utterance_id").get<std::string>(), tj.at("speaker_id").get<std::string>(), std::nullopt,
                    std::nullopt};
    if (tj.contains("transcript")) t.transcript = split_words(tj.at("transcript").get<std::string>());
    const auto e = tj.at("emotion").get<std::string>();
    if (e != "unknown") {
      t.emotion = emotion_from_string(e);
      if (!t.emotion) throw ParseError("bad emotion tag '" + e + "'");
    }
    a.turns.push_back(std::move(t));
  }
  return a;
}

/// One annotated dialogue per line.
inline void emit_annotated(const std::vector<AnnotatedDialogue>& dialogues, const std::filesystem::path& path) {
  std::ostringstream out;
  for (const auto& d : dialogues) out << to_json(d).dump() << '\n';
  detail::write_text(path, out.str());
}

inline std::vector<AnnotatedDialogue> load_annotated(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotation file " + path.string());
  std::vector<AnnotatedDialogue> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(annotated_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline Dialogue dialogue_from_json(const json& j) {
  Dialogue d;
  d.dialogue_id = j.at("dialogue_id").get<std::string>();
  for (const auto& t : j.at("turns")) {
    DialogueTurn turn{t.at("utterance_key").get<std::string>(), t.at("speaker_id").get<std::string>(), std::nullopt};
    if (t.contains("transcript")) turn.transcript = split_words(t.at("transcript").get<std::string>());
    d.turns.push_back(std::move(turn));
  }
  return d;
}

inline json to_json(const Dialogue& d) {
  json turns = json::array();
  for (const auto& t : d.turns) {
    json j{{"utterance_key", t.utterance_key}, {"speaker_id", t.speaker_id}};
    if (t.transcript) j["transcript"] = join_words(*t.transcript);
    turns.push_back(std::move(j));
  }
  return json{{"dialogue_id", d.dialogue_id}, {"turns", turns}};
}

inline std::vector<Dialogue> load_dialogues(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dialogue file " + path.string());
  std::vector<Dialogue> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(dialogue_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

/// Two-speaker dialogues built from a corpus: speakers are paired in corpus
/// order and alternate turns, each contributing its first `turns_each`
/// utterances.
inline std::vector<Dialogue> dialogues_from_corpus(const EmbeddingCorpus& corpus, int turns_each) {
  const auto spk = corpus.speakers();
  std::map<std::string, std::vector<const AudioEmbedding*>> by_spk;
  for (const auto& e : corpus.entries()) by_spk[e.speaker_id].push_back(&e);
  std::vector<Dialogue> out;
  for (std::size_t s = 0; s + 1 < spk.size(); s += 2) {
    Dialogue d;
    d.dialogue_id = "dlg" + std::to_string(s / 2);
    for (int t = 0; t < turns_each; ++t)
      for (std::size_t who : {s, s + 1}) {
        const auto& utts = by_spk[spk[who]];
        if (t >= static_cast<int>(utts.size())) continue;
        const AudioEmbedding* e = utts[static_cast<std::size_t>(t)];
        std::optional<std::vector<std::string>> tr;
        if (e->transcript) tr = split_words(*e->transcript);
        d.turns.push_back({e->key(), e->speaker_id, tr});
      }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace spkchar
