#pragma once

// Prompt templates, mixed-sequence assembly with soft-token injection, slot
// decoding, and answer parsing.

#include <algorithm>
#include <cctype>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "spkchar/connector.hpp"
#include "spkchar/core.hpp"
#include "spkchar/errors.hpp"
#include "spkchar/toylm.hpp"

namespace spkchar {

inline constexpr const char* kTaskEmotion = "emotion";
inline constexpr const char* kTaskAgeGender = "age_gender";
inline constexpr const char* kTaskAsr = "asr";
inline constexpr const char* kTaskVerification = "verification";

struct TextSegment {
  std::string text;
};
struct EmbeddingSlot {
  int index = 0;
};
struct AnswerSlot {
  std::string field;  // age | gender | emotion | transcript | verify
};
using Segment = std::variant<TextSegment, EmbeddingSlot, AnswerSlot>;

inline bool is_known_answer_field(const std::string& f) {
  return f == "age" || f == "gender" || f == "emotion" || f == "transcript" || f == "verify";
}

struct PromptTemplate {
  std::string task_id;
  std::vector<Segment> segments;

  int embedding_slots() const {
    return static_cast<int>(std::count_if(segments.begin(), segments.end(), [](const Segment& s) {
      return std::holds_alternative<EmbeddingSlot>(s);
    }));
  }

  /// Renders with bracketed slot markers, e.g. for logging.
  std::string render() const {
    std::string out;
    for (const auto& s : segments) {
      if (!out.empty()) out.push_back(' ');
      if (auto* t = std::get_if<TextSegment>(&s)) out += t->text;
      else if (auto* e = std::get_if<EmbeddingSlot>(&s)) out += "[Embedding " + std::to_string(e->index) + "]";
      else out += "[" + std::get<AnswerSlot>(s).field + "]";
    }
    return out;
  }

  void validate(const Vocabulary& vocab) const {
    const int n_emb = embedding_slots();
    if (n_emb < 1) throw ConfigError("template '" + task_id + "' has no embedding slot");
    std::vector<int> seen;
    bool answer_seen = false;
    for (const auto& s : segments) {
      if (auto* e = std::get_if<EmbeddingSlot>(&s)) {
        if (answer_seen) throw ConfigError("template '" + task_id + "': answer slot before an embedding slot");
        if (e->index < 0 || e->index >= n_emb || std::count(seen.begin(), seen.end(), e->index))
          throw ConfigError("template '" + task_id + "': embedding slot indices must be 0..n-1, each once");
        seen.push_back(e->index);
      } else if (auto* a = std::get_if<AnswerSlot>(&s)) {
        if (!is_known_answer_field(a->field))
          throw ConfigError("template '" + task_id + "': unknown answer field '" + a->field + "'");
        answer_seen = true;
      } else {
        const auto& text = std::get<TextSegment>(s).text;
        auto ids = vocab.encode(text);
        if (std::count(ids.begin(), ids.end(), vocab.unk_id()) || vocab.decode(ids) != text)
          throw ConfigError("template '" + task_id + "': text does not round-trip through the tokenizer: '" +
                            text + "'");
      }
    }
    if (!answer_seen) throw ConfigError("template '" + task_id + "' has no answer slot");
  }
};

inline PromptTemplate emotion_template() {
  return {kTaskEmotion,
          {TextSegment{"What is the emotion of the speaker, using the following audio embeddings:"},
           EmbeddingSlot{0}, TextSegment{"Emotion:"}, AnswerSlot{"emotion"}}};
}

inline PromptTemplate age_gender_template() {
  return {kTaskAgeGender,
          {TextSegment{"What is the age and the gender of the speaker, using the following audio embeddings:"},
           EmbeddingSlot{0}, TextSegment{"Age:"}, AnswerSlot{"age"}, TextSegment{"Gender:"},
           AnswerSlot{"gender"}}};
}

inline PromptTemplate asr_template() {
  return {kTaskAsr,
          {TextSegment{"Transcribe the following text:"}, EmbeddingSlot{0}, TextSegment{"Transcript:"},
           AnswerSlot{"transcript"}}};
}

/// Pair prompt for one test embedding; the conversation form for more.
inline PromptTemplate verification_template(int n_tests = 1) {
  if (n_tests < 1) throw ConfigError("verification needs at least one test embedding");
  PromptTemplate t{kTaskVerification, {}};
  if (n_tests == 1) {
    t.segments = {TextSegment{"Answer by yes or no, are those two audio embeddings from the same speaker:"},
                  EmbeddingSlot{0}, EmbeddingSlot{1}};
  } else {
    t.segments.push_back(TextSegment{
        "Answer by yes or no, did the first speaker speak at least once in the following audio embeddings:"});
    for (int i = 0; i <= n_tests; ++i) t.segments.push_back(EmbeddingSlot{i});
  }
  t.segments.push_back(TextSegment{"Answer:"});
  t.segments.push_back(AnswerSlot{"verify"});
  return t;
}

struct TaskSpec {
  std::string task_id;
  PromptTemplate prompt;
  std::string parser;  // one of the four built-in task ids
  std::string metric;  // accuracy | age_gender | wer | eer
};

inline TaskSpec builtin_task(const std::string& id) {
  if (id == kTaskEmotion) return {id, emotion_template(), kTaskEmotion, "accuracy"};
  if (id == kTaskAgeGender) return {id, age_gender_template(), kTaskAgeGender, "age_gender"};
  if (id == kTaskAsr) return {id, asr_template(), kTaskAsr, "wer"};
  if (id == kTaskVerification) return {id, verification_template(1), kTaskVerification, "eer"};
  throw ConfigError("unknown task '" + id + "'");
}

/// Template from a config segment list: [{"text": ...}, {"embedding": 0},
/// {"answer": "emotion"}, ...].
inline PromptTemplate template_from_json(const std::string& task_id, const json& segs) {
  PromptTemplate t{task_id, {}};
  if (!segs.is_array()) throw ConfigError("template for '" + task_id + "' must be a segment list");
  for (const auto& s : segs) {
    if (s.contains("text")) t.segments.push_back(TextSegment{s["text"].get<std::string>()});
    else if (s.contains("embedding")) t.segments.push_back(EmbeddingSlot{s["embedding"].get<int>()});
    else if (s.contains("answer")) t.segments.push_back(AnswerSlot{s["answer"].get<std::string>()});
    else throw ConfigError("template for '" + task_id + "': segment needs text, embedding or answer");
  }
  return t;
}

/// Supervision target for one training sequence.
struct Answer {
  AttributeLabels labels;
  std::optional<bool> same_speaker;

  static Answer from_labels(AttributeLabels l) { return {std::move(l), std::nullopt}; }
  static Answer verify(bool same) { return {{}, same}; }
};

/// Longest decode for each answer field at inference time.
inline int slot_budget(const std::string& field) { return field == "transcript" ? 24 : 1; }

inline std::vector<int> answer_tokens(const std::string& field, const Answer& a, const Vocabulary& v) {
  auto missing = [&] { return ValidationError("training answer lacks field '" + field + "'"); };
  if (field == "age") {
    if (!a.labels.age) throw missing();
    return {v.id(std::to_string(*a.labels.age))};
  }
  if (field == "gender") {
    if (!a.labels.gender) throw missing();
    return {v.id(to_string(*a.labels.gender))};
  }
  if (field == "emotion") {
    if (!a.labels.emotion) throw missing();
    return {v.id(to_string(*a.labels.emotion))};
  }
  if (field == "verify") {
    if (!a.same_speaker) throw missing();
    return {*a.same_speaker ? v.yes_id() : v.no_id()};
  }
  if (field == "transcript") {
    if (!a.labels.transcript) throw missing();
    std::vector<int> ids;
    for (const auto& w : *a.labels.transcript) {
      std::string lw = w;
      std::transform(lw.begin(), lw.end(), lw.begin(), [](unsigned char c) { return std::tolower(c); });
      ids.push_back(v.find(lw).value_or(v.unk_id()));
    }
    ids.push_back(v.end_id());
    return ids;
  }
  throw ConfigError("unknown answer field '" + field + "'");
}

/// Builds the LM input. With an answer, every answer slot is filled and only
/// its tokens carry the loss mask; without one the sequence stops right
/// before the first answer slot, i.e. at the cue text.
inline MixedSequence assemble(const PromptTemplate& t, const Connector& c,
                              const std::vector<const AudioEmbedding*>& embeddings,
                              const std::optional<Answer>& answer, const FrozenLM& lm) {
  if (static_cast<int>(embeddings.size()) != t.embedding_slots())
    throw ValidationError("template '" + t.task_id + "' has " + std::to_string(t.embedding_slots()) +
                          " embedding slots, got " + std::to_string(embeddings.size()) + " embeddings");
  if (c.d_lm != lm.d_lm())
    throw DimensionError("connector d_lm=" + std::to_string(c.d_lm) + " but LM d_lm=" + std::to_string(lm.d_lm()));
  const Vocabulary& v = lm.vocab();
  MixedSequence seq;
  for (const auto& s : t.segments) {
    if (auto* text = std::get_if<TextSegment>(&s)) {
      seq.push_tokens(v.encode(text->text));
    } else if (auto* slot = std::get_if<EmbeddingSlot>(&s)) {
      for (auto& tok : project(c, *embeddings[static_cast<std::size_t>(slot->index)])) seq.push_vector(std::move(tok));
    } else {
      if (!answer) break;
      seq.push_tokens(answer_tokens(std::get<AnswerSlot>(s).field, *answer, v), true);
    }
  }
  if (seq.size() > static_cast<std::size_t>(lm.config().max_seq))
    throw SequenceLengthError("prompt for '" + t.task_id + "' has " + std::to_string(seq.size()) +
                              " items, max_seq is " + std::to_string(lm.config().max_seq));
  return seq;
}

/// Token ids of the template's text before its first slot. Every assembled
/// sequence starts with them, so their keys and values can be cached.
inline std::vector<int> leading_tokens(const PromptTemplate& t, const Vocabulary& v) {
  std::vector<int> ids;
  for (const auto& s : t.segments) {
    auto* text = std::get_if<TextSegment>(&s);
    if (!text) break;
    auto more = v.encode(text->text);
    ids.insert(ids.end(), more.begin(), more.end());
  }
  return ids;
}

/// Runs inference: decodes each answer slot greedily in turn, feeding the
/// template's cue text between slots. Returns the generated text from the
/// first answer onward, e.g. "37 Gender: male".
inline std::string generate_answer_text(const PromptTemplate& t, const Connector& c,
                                        const std::vector<const AudioEmbedding*>& embeddings,
                                        const FrozenLM& lm, const PrefixCache* cache = nullptr) {
  MixedSequence seq = assemble(t, c, embeddings, std::nullopt, lm);
  const Vocabulary& v = lm.vocab();
  std::vector<int> generated;
  bool started = false;
  for (const auto& s : t.segments) {
    if (auto* a = std::get_if<AnswerSlot>(&s)) {
      started = true;
      const int budget = std::min<int>(slot_budget(a->field),
                                       lm.config().max_seq - static_cast<int>(seq.size()));
      if (budget <= 0) break;
      for (int id : lm.greedy_decode_ids(seq, budget, cache)) {
        seq.push_token(id);
        generated.push_back(id);
      }
    } else if (started) {
      if (auto* text = std::get_if<TextSegment>(&s)) {
        auto ids = v.encode(text->text);
        if (seq.size() + ids.size() > static_cast<std::size_t>(lm.config().max_seq)) break;
        seq.push_tokens(ids);
        generated.insert(generated.end(), ids.begin(), ids.end());
      }
    }
  }
  return v.decode(generated);
}

struct ParsedAnswer {
  std::string task_id;
  std::optional<Gender> gender;    // nullopt: invalid
  std::optional<int> age;          // nullopt: invalid
  std::optional<Emotion> emotion;  // nullopt: invalid
  std::vector<std::string> transcript;
  std::optional<bool> verify;      // nullopt: invalid
};

/// Lowercased alphanumeric runs; "speaker's" -> {"speaker", "s"}.
inline std::vector<std::string> match_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Lowercase, strip punctuation, split on whitespace.
inline std::vector<std::string> normalize_words(std::string_view text) {
  std::string cleaned;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::ispunct(u)) continue;
    cleaned.push_back(static_cast<char>(std::tolower(u)));
  }
  return split_words(cleaned);
}

namespace detail {
template <class T>
std::optional<T> exactly_one(const std::vector<std::string>& toks,
                             const std::vector<std::pair<std::string, T>>& classes) {
  std::optional<T> found;
  int n = 0;
  for (const auto& [name, value] : classes) {
    if (std::find(toks.begin(), toks.end(), name) != toks.end()) {
      found = value;
      ++n;
    }
  }
  return n == 1 ? found : std::nullopt;
}

inline std::optional<int> first_integer(const std::vector<std::string>& toks) {
  for (const auto& t : toks) {
    if (t.empty() || !std::all_of(t.begin(), t.end(), [](unsigned char ch) { return std::isdigit(ch); })) continue;
    if (t.size() > 3) return std::nullopt;
    const int v = std::stoi(t);
    if (v < kMinAge || v > kMaxAge) return std::nullopt;
    return v;
  }
  return std::nullopt;
}
}  // namespace detail

inline ParsedAnswer parse_answer(const std::string& task_id, std::string_view text) {
  ParsedAnswer p;
  p.task_id = task_id;
  const auto toks = match_tokens(text);
  if (task_id == kTaskAgeGender) {
    p.age = detail::first_integer(toks);
    p.gender = detail::exactly_one<Gender>(toks, {{"male", Gender::male}, {"female", Gender::female}});
  } else if (task_id == kTaskEmotion) {
    std::vector<std::pair<std::string, Emotion>> classes;
    for (Emotion e : kEmotions) classes.emplace_back(to_string(e), e);
    p.emotion = detail::exactly_one<Emotion>(toks, classes);
  } else if (task_id == kTaskAsr) {
    p.transcript = normalize_words(text);
  } else if (task_id == kTaskVerification) {
    p.verify = detail::exactly_one<bool>(toks, {{"yes", true}, {"no", false}});
  } else {
    throw ConfigError("no parser for task '" + task_id + "'");
  }
  return p;
}

}  // namespace spkchar
