#pragma once

// Domain data model shared by every pipeline stage, plus the corpus file
// format (one JSON header line followed by one JSON record per utterance).

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "spkchar/errors.hpp"

namespace spkchar {

using json = nlohmann::json;

enum class Gender { male, female };
enum class Emotion { neutral, happy, angry, sad };

inline constexpr std::array<Emotion, 4> kEmotions = {
    Emotion::neutral, Emotion::happy, Emotion::angry, Emotion::sad};

inline constexpr int kMinAge = 1;
inline constexpr int kMaxAge = 100;

inline std::string to_string(Gender g) {
  return g == Gender::male ? "male" : "female";
}

inline std::string to_string(Emotion e) {
  switch (e) {
    case Emotion::neutral: return "neutral";
    case Emotion::happy: return "happy";
    case Emotion::angry: return "angry";
    case Emotion::sad: return "sad";
  }
  return "neutral";
}

inline std::optional<Gender> gender_from_string(std::string_view s) {
  if (s == "male") return Gender::male;
  if (s == "female") return Gender::female;
  return std::nullopt;
}

inline std::optional<Emotion> emotion_from_string(std::string_view s) {
  for (Emotion e : kEmotions)
    if (s == to_string(e)) return e;
  return std::nullopt;
}

/// Splits on whitespace.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out.push_back(' ');
    out += words[i];
  }
  return out;
}

struct AttributeLabels {
  std::optional<int> age;
  std::optional<Gender> gender;
  std::optional<Emotion> emotion;
  std::optional<std::vector<std::string>> transcript;

  bool empty() const { return !age && !gender && !emotion && !transcript; }
  bool operator==(const AttributeLabels&) const = default;
};

struct UtteranceRef {
  std::string speaker_id;
  std::string session_id;
  std::string utterance_id;

  std::string key() const {
    return speaker_id + "/" + session_id + "/" + utterance_id;
  }
  bool operator==(const UtteranceRef&) const = default;
};

struct AudioEmbedding {
  std::vector<double> vector;
  std::string speaker_id;
  std::string session_id;
  std::string utterance_id;
  std::string encoder_id;
  std::optional<std::string> transcript;

  std::string key() const {
    return speaker_id + "/" + session_id + "/" + utterance_id;
  }
  UtteranceRef ref() const { return {speaker_id, session_id, utterance_id}; }
  bool operator==(const AudioEmbedding&) const = default;
};

inline void validate_labels(const AttributeLabels& l, const std::string& key) {
  if (l.age && (*l.age < kMinAge || *l.age > kMaxAge))
    throw ValidationError("utterance " + key + ": age " +
                          std::to_string(*l.age) + " outside [1,100]");
}

/// Per-utterance embeddings of a single encoder, in file order. Values are
/// validated on insertion; a loaded corpus is never mutated.
class EmbeddingCorpus {
 public:
  EmbeddingCorpus() = default;
  EmbeddingCorpus(int d_enc, std::string encoder_id)
      : d_enc_(d_enc), encoder_id_(std::move(encoder_id)) {
    if (d_enc <= 0) throw ValidationError("d_enc must be positive");
  }

  int d_enc() const { return d_enc_; }
  const std::string& encoder_id() const { return encoder_id_; }
  const std::vector<AudioEmbedding>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::map<std::string, AttributeLabels>& labels() const {
    return labels_;
  }

  void add(AudioEmbedding e, AttributeLabels labels = {}) {
    check_entry(e, labels);
    add_unvalidated(std::move(e), std::move(labels));
  }

  /// Staging path for externally produced entries; only key uniqueness is
  /// enforced. save_corpus re-validates everything.
  void add_unvalidated(AudioEmbedding e, AttributeLabels labels = {}) {
    const std::string key = e.key();
    if (index_.count(key))
      throw ValidationError("duplicate utterance key " + key);
    if (labels.transcript && !e.transcript)
      e.transcript = join_words(*labels.transcript);
    if (e.transcript && !labels.transcript)
      labels.transcript = split_words(*e.transcript);
    index_.emplace(key, entries_.size());
    entries_.push_back(std::move(e));
    if (!labels.empty()) labels_.emplace(key, std::move(labels));
  }

  void validate() const {
    for (const auto& e : entries_) check_entry(e, labels_for(e.key()));
  }

  const AudioEmbedding* find(const std::string& key) const {
    auto it = index_.find(key);
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

  const AudioEmbedding& at(const std::string& key) const {
    const AudioEmbedding* e = find(key);
    if (!e) throw ValidationError("unknown utterance key " + key);
    return *e;
  }

  AttributeLabels labels_for(const std::string& key) const {
    auto it = labels_.find(key);
    return it == labels_.end() ? AttributeLabels{} : it->second;
  }

  /// Distinct speaker ids in order of first appearance.
  std::vector<std::string> speakers() const {
    std::vector<std::string> out;
    for (const auto& e : entries_)
      if (std::find(out.begin(), out.end(), e.speaker_id) == out.end())
        out.push_back(e.speaker_id);
    return out;
  }

  bool operator==(const EmbeddingCorpus& o) const {
    return d_enc_ == o.d_enc_ && encoder_id_ == o.encoder_id_ &&
           entries_ == o.entries_ && labels_ == o.labels_;
  }

 private:
  void check_entry(const AudioEmbedding& e, const AttributeLabels& labels) const {
    const std::string key = e.key();
    if (static_cast<int>(e.vector.size()) != d_enc_)
      throw DimensionError("utterance " + key + " has " +
                           std::to_string(e.vector.size()) +
                           " values, expected d_enc=" + std::to_string(d_enc_));
    for (double v : e.vector)
      if (!std::isfinite(v))
        throw ValidationError("utterance " + key + " has a non-finite value");
    if (e.encoder_id != encoder_id_)
      throw ValidationError("utterance " + key + " has encoder_id '" +
                            e.encoder_id + "', corpus is '" + encoder_id_ +
                            "'");
    validate_labels(labels, key);
    if (labels.transcript && e.transcript &&
        *labels.transcript != split_words(*e.transcript))
      throw ValidationError("utterance " + key +
                            ": transcript label disagrees with entry");
  }

  int d_enc_ = 1;
  std::string encoder_id_;
  std::vector<AudioEmbedding> entries_;
  std::map<std::string, AttributeLabels> labels_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr std::string_view kCorpusFormatVersion = "1";

namespace detail {

inline json record_to_json(const AudioEmbedding& e, const AttributeLabels& l) {
  json r;
  r["speaker_id"] = e.speaker_id;
  r["session_id"] = e.session_id;
  r["utterance_id"] = e.utterance_id;
  r["vector"] = e.vector;
  if (e.transcript) r["transcript"] = *e.transcript;
  if (l.age) r["age"] = *l.age;
  if (l.gender) r["gender"] = to_string(*l.gender);
  if (l.emotion) r["emotion"] = to_string(*l.emotion);
  return r;
}

inline void ensure_parent(const std::filesystem::path& path) {
  if (!path.has_parent_path()) return;
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
}

inline std::string where(std::size_t line_no) {
  return "line " + std::to_string(line_no) + " (record " +
         std::to_string(line_no - 1) + ")";
}

}  // namespace detail

inline EmbeddingCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  ++line_no;
  EmbeddingCorpus corpus;
  try {
    json h = json::parse(line);
    if (h.at("format_version").get<std::string>() != kCorpusFormatVersion)
      throw ParseError("unsupported format_version");
    corpus = EmbeddingCorpus(h.at("d_enc").get<int>(),
                             h.at("encoder_id").get<std::string>());
  } catch (const json::exception& ex) {
    throw ParseError(path.string() + ": line 1 (header): " + ex.what());
  }
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    AudioEmbedding e;
    AttributeLabels l;
    try {
      json r = json::parse(line);
      e.speaker_id = r.at("speaker_id").get<std::string>();
      e.session_id = r.at("session_id").get<std::string>();
      e.utterance_id = r.at("utterance_id").get<std::string>();
      e.vector = r.at("vector").get<std::vector<double>>();
      e.encoder_id = corpus.encoder_id();
      if (r.contains("transcript"))
        e.transcript = r["transcript"].get<std::string>();
      if (r.contains("age")) l.age = r["age"].get<int>();
      if (r.contains("gender")) {
        l.gender = gender_from_string(r["gender"].get<std::string>());
        if (!l.gender) throw ParseError("bad gender label");
      }
      if (r.contains("emotion")) {
        l.emotion = emotion_from_string(r["emotion"].get<std::string>());
        if (!l.emotion) throw ParseError("bad emotion label");
      }
    } catch (const json::exception& ex) {
      throw ParseError(path.string() + ": " + detail::where(line_no) + ": " +
                       ex.what());
    } catch (const ParseError& ex) {
      throw ParseError(path.string() + ": " + detail::where(line_no) + ": " +
                       ex.what());
    }
    try {
      corpus.add(std::move(e), std::move(l));
    } catch (const DimensionError& ex) {
      throw DimensionError(path.string() + ": " + detail::where(line_no) +
                           ": " + ex.what());
    } catch (const ValidationError& ex) {
      throw ValidationError(path.string() + ": " + detail::where(line_no) +
                            ": " + ex.what());
    }
  }
  return corpus;
}

inline void save_corpus(const EmbeddingCorpus& corpus,
                        const std::filesystem::path& path) {
  corpus.validate();
  std::ostringstream out;
  json h;
  h["format_version"] = std::string(kCorpusFormatVersion);
  h["d_enc"] = corpus.d_enc();
  h["encoder_id"] = corpus.encoder_id();
  out << h.dump() << '\n';
  for (const auto& e : corpus.entries())
    out << detail::record_to_json(e, corpus.labels_for(e.key())).dump()
        << '\n';
  detail::ensure_parent(path);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write corpus file " + path.string());
  f << out.str();
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace spkchar
