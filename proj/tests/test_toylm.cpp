#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "json.hpp"
#include "spkchar/toylm.hpp"

using namespace spkchar;

TEST(Tokenizer, SplitsPunctuationAndLowercasesNothing) {
  EXPECT_EQ(pre_tokenize("Age: 42, male."), (std::vector<std::string>{"Age", ":", "42", ",", "male", "."}));
  EXPECT_TRUE(pre_tokenize("   ").empty());
}

TEST(Vocabulary, RequiresSpecialsAndRejectsDuplicates) {
  EXPECT_THROW(Vocabulary({"<pad>", "</s>", "<unk>", "yes"}), ValidationError);
  EXPECT_THROW(Vocabulary({"<pad>", "</s>", "<unk>", "yes", "no", "no"}), ValidationError);
  Vocabulary v({"<pad>", "</s>", "<unk>", "yes", "no", "hello", ","});
  EXPECT_EQ(v.encode("hello, world"), (std::vector<int>{5, 6, v.unk_id()}));
  EXPECT_EQ(v.decode({5, 6, 3}), "hello, yes");
}

TEST(Vocabulary, DefaultCoversAgesAndClassNames) {
  Vocabulary v(default_vocabulary_tokens());
  for (int a = kMinAge; a <= kMaxAge; ++a) EXPECT_TRUE(v.find(std::to_string(a))) << a;
  for (Emotion e : kEmotions) EXPECT_TRUE(v.find(to_string(e)));
  EXPECT_TRUE(v.find("male") && v.find("female"));
  for (const auto& w : asr_lexicon()) EXPECT_TRUE(v.find(w)) << w;
}

TEST(FrozenLM, InitIsDeterministicPerSeed) {
  FrozenLM a(test::tiny_lm_config(3)), b(test::tiny_lm_config(3)), c(test::tiny_lm_config(4));
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
}

TEST(FrozenLM, ConfigValidation) {
  auto c = test::tiny_lm_config();
  c.n_heads = 3;
  EXPECT_THROW(FrozenLM{c}, ValidationError);
  c = test::tiny_lm_config();
  c.n_layers = 0;
  EXPECT_THROW(FrozenLM{c}, ValidationError);
}

TEST(FrozenLM, GoldenNextDistribution) {
  FrozenLM lm(test::tiny_lm_config(11));
  const auto got = lm.next_distribution(test::golden_probe(lm));
  const auto want = nlohmann::json::parse(test::read_file(std::string(SPKCHAR_TEST_DATA) + "/golden_next_distribution.json"))
                        .get<std::vector<double>>();
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12) << i;
}

TEST(FrozenLM, DistributionIsNormalised) {
  FrozenLM lm(test::tiny_lm_config());
  auto p = lm.next_distribution(test::golden_probe(lm));
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
  for (double v : p) EXPECT_GT(v, 0.0);
}

TEST(FrozenLM, SoftmaxIsShiftInvariant) {
  Eigen::VectorXd x(4);
  x << 1000, 1001, 999, -5;
  Eigen::VectorXd p = FrozenLM::softmax(x), q = FrozenLM::softmax(x.array() - 1000);
  EXPECT_TRUE(p.allFinite());
  EXPECT_NEAR((p - q).norm(), 0.0, 1e-15);
  EXPECT_NEAR((FrozenLM::log_softmax(x).array().exp().matrix() - p).norm(), 0.0, 1e-12);
}

TEST(FrozenLM, IsCausal) {
  FrozenLM lm(test::tiny_lm_config());
  Rng r(5);
  MixedSequence s;
  s.push_tokens(lm.vocab().encode("Age :"));
  s.push_vector(test::random_vector(r, 16));
  s.push_tokens(lm.vocab().encode("42 male"), true);
  const double before = lm.sequence_loss(s);
  auto t = s;
  t.push_vector(test::random_vector(r, 16));
  t.push_tokens(lm.vocab().encode("happy sad"));
  EXPECT_EQ(lm.sequence_loss(t), before);
}

TEST(FrozenLM, RejectsBadSequences) {
  FrozenLM lm(test::tiny_lm_config());
  MixedSequence s;
  EXPECT_THROW(lm.last_logits(s), SequenceLengthError);
  s.push_vector(Eigen::VectorXd::Zero(15));
  EXPECT_THROW(lm.last_logits(s), DimensionError);
  MixedSequence nan;
  nan.push_vector(Eigen::VectorXd::Constant(16, std::nan("")));
  EXPECT_THROW(lm.last_logits(nan), ValidationError);
  MixedSequence long_seq;
  long_seq.push_tokens(std::vector<int>(129, lm.vocab().yes_id()));
  EXPECT_THROW(lm.last_logits(long_seq), SequenceLengthError);
  MixedSequence no_loss;
  no_loss.push_tokens({1, 2, 3});
  EXPECT_THROW(lm.sequence_loss(no_loss), ValidationError);
  MixedSequence bad_token;
  bad_token.push_token(100000);
  EXPECT_THROW(lm.last_logits(bad_token), ValidationError);
}

namespace {
MixedSequence fd_sequence(const FrozenLM& lm, Rng& r) {
  MixedSequence s;
  s.push_tokens(lm.vocab().encode("Provide the age and gender of the speaker ."));
  s.push_vector(test::random_vector(r, lm.d_lm()));
  s.push_vector(test::random_vector(r, lm.d_lm()));
  s.push_tokens(lm.vocab().encode("Age :"));
  s.push_tokens(lm.vocab().encode("37 , female"), true);
  return s;
}
}  // namespace

TEST(FrozenLM, InputGradientsMatchFiniteDifferences) {
  FrozenLM lm(test::tiny_lm_config());
  Rng r(17);
  auto s = fd_sequence(lm, r);
  auto g = lm.loss_and_input_grads(s);
  EXPECT_NEAR(g.loss, lm.sequence_loss(s), 1e-12);
  ASSERT_EQ(g.grads.size(), 2u);
  const double h = 1e-5;
  std::size_t vi = 0;
  for (auto& item : s.items) {
    if (!item.is_vector()) continue;
    for (int k = 0; k < lm.d_lm(); ++k) {
      auto& v = std::get<VectorItem>(item.value).value;
      const double x0 = v[k];
      v[k] = x0 + h;
      const double lp = lm.sequence_loss(s);
      v[k] = x0 - h;
      const double lm_ = lm.sequence_loss(s);
      v[k] = x0;
      const double fd = (lp - lm_) / (2 * h);
      EXPECT_NEAR(g.grads[vi][k], fd, 1e-6 + 1e-4 * std::abs(fd)) << vi << "," << k;
    }
    ++vi;
  }
}

TEST(PrefixCache, MatchesUncachedComputation) {
  FrozenLM lm(test::tiny_lm_config());
  Rng r(9);
  auto s = fd_sequence(lm, r);
  const auto lead = lm.vocab().encode("Provide the age and gender of the speaker .");
  auto cache = lm.make_prefix_cache(lead);
  EXPECT_EQ(cache.size(), lead.size());
  EXPECT_NEAR(lm.sequence_loss(s, &cache), lm.sequence_loss(s), 1e-12);
  auto a = lm.loss_and_input_grads(s, &cache), b = lm.loss_and_input_grads(s);
  ASSERT_EQ(a.grads.size(), b.grads.size());
  for (std::size_t i = 0; i < a.grads.size(); ++i) EXPECT_LT((a.grads[i] - b.grads[i]).norm(), 1e-12);
  MixedSequence prefix;
  prefix.items.assign(s.items.begin(), s.items.end() - 3);
  auto p = lm.next_distribution(prefix, &cache), q = lm.next_distribution(prefix);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-14);
}

TEST(PrefixCache, RejectsMismatchedPrefix) {
  FrozenLM lm(test::tiny_lm_config());
  auto cache = lm.make_prefix_cache(lm.vocab().encode("Answer by yes or no"));
  MixedSequence s;
  s.push_tokens(lm.vocab().encode("Answer by no or yes :"));
  EXPECT_THROW(lm.last_logits(s, &cache), ValidationError);
  MixedSequence same;
  same.push_tokens(lm.vocab().encode("Answer by yes or no"));
  EXPECT_THROW(lm.last_logits(same, &cache), ValidationError);  // nothing left to compute
}

TEST(FrozenLM, GreedyDecodeIsDeterministicAndBounded) {
  FrozenLM lm(test::tiny_lm_config());
  auto probe = test::golden_probe(lm);
  auto a = lm.greedy_decode_ids(probe, 5), b = lm.greedy_decode_ids(probe, 5);
  EXPECT_EQ(a, b);
  EXPECT_LE(a.size(), 5u);
  EXPECT_TRUE(lm.greedy_decode_ids(probe, 0).empty());
  for (int id : a) EXPECT_NE(id, lm.vocab().end_id());
  EXPECT_THROW(lm.greedy_decode_ids(probe, 1000), SequenceLengthError);
}

TEST(FrozenLM, SaveLoadRoundTrip) {
  test::TempDir dir;
  FrozenLM lm(test::tiny_lm_config(21));
  save_lm(lm, dir / "sub/lm.bin");
  FrozenLM back = load_lm(dir / "sub/lm.bin");
  EXPECT_EQ(back.checksum(), lm.checksum());
  EXPECT_EQ(back.config(), lm.config());
  EXPECT_EQ(back.next_distribution(test::golden_probe(back)), lm.next_distribution(test::golden_probe(lm)));
}

TEST(FrozenLM, LoadRejectsCorruptFiles) {
  test::TempDir dir;
  test::write_file(dir / "bad.bin", "NOTANLM0xxxxxxxx");
  EXPECT_THROW(load_lm(dir / "bad.bin"), ParseError);
  FrozenLM lm(test::tiny_lm_config());
  save_lm(lm, dir / "lm.bin");
  auto bytes = test::read_file(dir / "lm.bin");
  test::write_file(dir / "trunc.bin", bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_lm(dir / "trunc.bin"), ParseError);
  EXPECT_THROW(load_lm(dir / "missing.bin"), IoError);
}
