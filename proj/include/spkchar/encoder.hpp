#pragma once

// Frozen-encoder side of the pipeline: temporal mean pooling and a seeded
// synthetic encoder whose attribute signals are linear in the embedding.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spkchar/core.hpp"
#include "spkchar/errors.hpp"
#include "spkchar/rng.hpp"

namespace spkchar {

/// T x d_enc activations of one utterance, one row per frame.
struct FrameMatrix {
  Eigen::MatrixXd frames;
};

inline std::vector<double> mean_pool(const FrameMatrix& m) {
  const auto T = m.frames.rows();
  if (T < 1) throw ValidationError("mean_pool: frame matrix has no frames");
  if (!m.frames.allFinite())
    throw ValidationError("mean_pool: frame matrix has non-finite entries");
  std::vector<double> out(static_cast<std::size_t>(m.frames.cols()), 0.0);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index i = 0; i < m.frames.cols(); ++i)
      out[static_cast<std::size_t>(i)] += m.frames(t, i);
  for (double& v : out) v /= static_cast<double>(T);
  return out;
}

// Direction keys used by the synthetic encoder.
inline constexpr const char* kGenderDirection = "gender";
inline constexpr const char* kAgeDirection = "age";
inline std::string emotion_direction(Emotion e) { return "emotion/" + to_string(e); }

struct SyntheticEncoderSpec {
  int d_enc = 32;
  std::map<std::string, std::vector<double>> attribute_directions;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  std::string encoder_id = "synthetic";
};

/// Builds orthonormal attribute directions for the requested attributes
/// ("gender", "age", "emotion"; emotion expands to four sub-directions).
inline SyntheticEncoderSpec make_synthetic_spec(
    int d_enc, const std::vector<std::string>& attributes, double noise_sigma,
    std::uint64_t seed, std::string encoder_id = "synthetic") {
  std::vector<std::string> keys;
  for (const auto& a : attributes) {
    if (a == kGenderDirection || a == kAgeDirection) {
      keys.push_back(a);
    } else if (a == "emotion") {
      for (Emotion e : kEmotions) keys.push_back(emotion_direction(e));
    } else {
      throw ConfigError("unknown synthetic attribute '" + a + "'");
    }
  }
  if (static_cast<int>(keys.size()) >= d_enc)
    throw ConfigError("d_enc=" + std::to_string(d_enc) +
                      " too small for " + std::to_string(keys.size()) +
                      " attribute directions plus speaker offsets");
  if (noise_sigma < 0) throw ConfigError("noise_sigma must be nonnegative");
  SyntheticEncoderSpec spec;
  spec.d_enc = d_enc;
  spec.noise_sigma = noise_sigma;
  spec.seed = seed;
  spec.encoder_id = std::move(encoder_id);
  Rng rng(derive_seed(seed, "directions"));
  std::vector<Eigen::VectorXd> basis;
  for (const auto& key : keys) {
    Eigen::VectorXd v(d_enc);
    for (int i = 0; i < d_enc; ++i) v[i] = rng.normal();
    for (const auto& b : basis) v -= v.dot(b) * b;
    v.normalize();
    basis.push_back(v);
    spec.attribute_directions[key] =
        std::vector<double>(v.data(), v.data() + d_enc);
  }
  return spec;
}

/// Per-speaker identity offset, orthogonal to every attribute direction and of
/// norm 3*noise_sigma + 1.
inline std::vector<double> speaker_offset(const SyntheticEncoderSpec& spec,
                                          const std::string& speaker_id) {
  Rng rng(derive_seed(spec.seed, "speaker:" + speaker_id));
  Eigen::VectorXd v(spec.d_enc);
  for (int i = 0; i < spec.d_enc; ++i) v[i] = rng.normal();
  for (const auto& [key, dir] : spec.attribute_directions) {
    Eigen::Map<const Eigen::VectorXd> d(dir.data(), spec.d_enc);
    v -= v.dot(d) * d;
  }
  v *= (3.0 * spec.noise_sigma + 1.0) / v.norm();
  return {v.data(), v.data() + spec.d_enc};
}

inline AudioEmbedding synth_encode(const AttributeLabels& labels,
                                   const UtteranceRef& ref,
                                   const SyntheticEncoderSpec& spec,
                                   std::uint64_t utterance_seed) {
  const auto& dirs = spec.attribute_directions;
  const bool has_gender = labels.gender && dirs.count(kGenderDirection);
  const bool has_age = labels.age && dirs.count(kAgeDirection);
  const bool has_emotion =
      labels.emotion && dirs.count(emotion_direction(Emotion::neutral));
  if (!has_gender && !has_age && !has_emotion)
    throw ValidationError("synth_encode: utterance " + ref.key() +
                          " has no label the encoder spec can express");
  std::vector<double> x = speaker_offset(spec, ref.speaker_id);
  auto add = [&](const std::string& key, double scale) {
    const auto& d = dirs.at(key);
    for (int i = 0; i < spec.d_enc; ++i) x[i] += scale * d[i];
  };
  if (has_gender) add(kGenderDirection, *labels.gender == Gender::male ? 1.0 : -1.0);
  if (has_age) add(kAgeDirection, (*labels.age - 50) / 50.0);
  if (has_emotion) add(emotion_direction(*labels.emotion), 1.0);
  if (spec.noise_sigma > 0) {
    Rng rng(derive_seed(splitmix64(spec.seed ^ utterance_seed), ref.key()));
    for (double& v : x) v += spec.noise_sigma * rng.normal();
  }
  AudioEmbedding e;
  e.vector = std::move(x);
  e.speaker_id = ref.speaker_id;
  e.session_id = ref.session_id;
  e.utterance_id = ref.utterance_id;
  e.encoder_id = spec.encoder_id;
  if (labels.transcript) e.transcript = join_words(*labels.transcript);
  return e;
}

/// Shape of a synthetic corpus split.
struct SynthCorpusSpec {
  int n_speakers = 10;
  int sessions_per_speaker = 2;
  int utterances_per_session = 5;
  int age_min = 18;
  int age_max = 80;
  bool with_transcripts = false;
  std::string speaker_prefix = "spk";
};

/// Small fixed lexicon for synthetic transcripts.
inline const std::vector<std::string>& asr_lexicon() {
  static const std::vector<std::string> words = {
      "a",      "about",  "after",  "all",    "also",   "an",     "and",
      "any",    "as",     "at",     "back",   "be",     "because", "but",
      "by",     "call",   "can",    "come",   "could",  "day",    "do",
      "even",   "first",  "for",    "from",   "get",    "give",   "go",
      "good",   "have",   "he",     "her",    "here",   "him",    "his",
      "how",    "i",      "if",     "in",     "into",   "it",     "just",
      "know",   "like",   "look",   "make",   "me",     "more",   "most",
      "my",     "new",    "no",     "not",    "now",    "of",     "on",
      "one",    "only",   "or",     "other",  "our",    "out",    "over",
      "people", "say",    "see",    "she",    "so",     "some",   "take",
      "than",   "that",   "their",  "them",   "then",   "there",  "these",
      "they",   "think",  "this",   "time",   "to",     "two",    "up",
      "us",     "use",    "very",   "want",   "way",    "we",     "well",
      "what",   "when",   "which",  "who",    "will",   "with",   "work",
      "would",  "year",   "you",    "your"};
  return words;
}

/// Generates labelled speakers and encodes every utterance. Age and gender
/// are per speaker and copied onto each utterance; emotion and transcript
/// vary per utterance.
inline EmbeddingCorpus generate_synthetic_corpus(const SynthCorpusSpec& shape,
                                                 const SyntheticEncoderSpec& enc,
                                                 std::uint64_t seed) {
  if (shape.n_speakers < 1 || shape.sessions_per_speaker < 1 ||
      shape.utterances_per_session < 1)
    throw ConfigError("synthetic corpus shape counts must be positive");
  if (shape.age_min < kMinAge || shape.age_max > kMaxAge ||
      shape.age_min > shape.age_max)
    throw ConfigError("synthetic age range must lie within [1,100]");
  EmbeddingCorpus corpus(enc.d_enc, enc.encoder_id);
  Rng rng(derive_seed(seed, "labels"));
  const auto& lexicon = asr_lexicon();
  std::uint64_t utt_counter = 0;
  for (int s = 0; s < shape.n_speakers; ++s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%04d", shape.speaker_prefix.c_str(), s);
    const std::string speaker = buf;
    const Gender gender = rng.below(2) ? Gender::female : Gender::male;
    const int age = rng.between(shape.age_min, shape.age_max);
    for (int ss = 0; ss < shape.sessions_per_speaker; ++ss) {
      std::snprintf(buf, sizeof buf, "sess%02d", ss);
      const std::string session = buf;
      for (int u = 0; u < shape.utterances_per_session; ++u) {
        std::snprintf(buf, sizeof buf, "utt%03d", u);
        AttributeLabels labels;
        labels.gender = gender;
        labels.age = age;
        labels.emotion = kEmotions[rng.below(kEmotions.size())];
        if (shape.with_transcripts) {
          std::vector<std::string> words(3 + rng.below(4));
          for (auto& w : words) w = lexicon[rng.below(lexicon.size())];
          labels.transcript = std::move(words);
        }
        UtteranceRef ref{speaker, session, buf};
        AudioEmbedding e = synth_encode(labels, ref, enc, ++utt_counter);
        corpus.add(std::move(e), std::move(labels));
      }
    }
  }
  return corpus;
}

}  // namespace spkchar
