#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

#include <gtest/gtest.h>

#include "spkchar/encoder.hpp"
#include "spkchar/rng.hpp"
#include "spkchar/toylm.hpp"

namespace spkchar::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "spkchar_";
    if (info) name += std::string(info->test_suite_name()) + "_" + info->name();
    name += "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++);
    for (char& c : name)
      if (c == '/') c = '_';
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Small model so finite differences and loops stay fast.
inline LMConfig tiny_lm_config(std::uint64_t seed = 11) {
  LMConfig c;
  c.d_lm = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.max_seq = 128;
  c.seed = seed;
  return c;
}

inline EmbeddingCorpus small_corpus(int n_speakers, int sessions, int utts, std::uint64_t seed = 1,
                                    double sigma = 0.05, const std::string& prefix = "spk") {
  auto enc = make_synthetic_spec(12, {"gender", "age", "emotion"}, sigma, 99);
  SynthCorpusSpec s;
  s.n_speakers = n_speakers;
  s.sessions_per_speaker = sessions;
  s.utterances_per_session = utts;
  s.with_transcripts = true;
  s.speaker_prefix = prefix;
  return generate_synthetic_corpus(s, enc, seed);
}

inline Eigen::VectorXd random_vector(Rng& rng, int n, double scale = 1.0) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}


/// Fixed probe for the golden next-token distribution: text, one injected
/// vector, more text.
inline MixedSequence golden_probe(const FrozenLM& lm) {
  MixedSequence s;
  s.push_tokens(lm.vocab().encode("Answer by yes or no, are those two audio embeddings from the same speaker:"));
  Rng r(123);
  s.push_vector(random_vector(r, lm.d_lm()));
  s.push_tokens(lm.vocab().encode("Answer:"));
  return s;
}

}  // namespace spkchar::test
