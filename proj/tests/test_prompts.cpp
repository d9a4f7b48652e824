#include <gtest/gtest.h>

#include "helpers.hpp"
#include "spkchar/prompts.hpp"

using namespace spkchar;

namespace {
AudioEmbedding emb(int d, double v, const std::string& spk = "s") {
  AudioEmbedding e;
  e.vector.assign(static_cast<std::size_t>(d), v);
  e.speaker_id = spk;
  e.session_id = "x";
  e.utterance_id = "u";
  e.encoder_id = "synthetic";
  return e;
}
}  // namespace

TEST(Templates, BuiltinsValidateAgainstDefaultVocabulary) {
  Vocabulary v(default_vocabulary_tokens());
  for (auto id : {kTaskEmotion, kTaskAgeGender, kTaskAsr, kTaskVerification}) EXPECT_NO_THROW(builtin_task(id).prompt.validate(v)) << id;
  for (int n : {1, 2, 5, 10}) EXPECT_NO_THROW(verification_template(n).validate(v));
  EXPECT_EQ(verification_template(1).embedding_slots(), 2);
  EXPECT_EQ(verification_template(10).embedding_slots(), 11);
  EXPECT_THROW(builtin_task("dance"), ConfigError);
}

TEST(Templates, RenderShowsSlots) {
  EXPECT_EQ(age_gender_template().render(),
            "What is the age and the gender of the speaker, using the following audio embeddings: [Embedding 0] "
            "Age: [age] Gender: [gender]");
}

TEST(Templates, ValidationRejectsBrokenTemplates) {
  Vocabulary v(default_vocabulary_tokens());
  PromptTemplate no_emb{"x", {TextSegment{"Answer:"}, AnswerSlot{"emotion"}}};
  EXPECT_THROW(no_emb.validate(v), ConfigError);
  PromptTemplate no_ans{"x", {EmbeddingSlot{0}, TextSegment{"Answer:"}}};
  EXPECT_THROW(no_ans.validate(v), ConfigError);
  PromptTemplate dup{"x", {EmbeddingSlot{0}, EmbeddingSlot{0}, AnswerSlot{"verify"}}};
  EXPECT_THROW(dup.validate(v), ConfigError);
  PromptTemplate oov{"x", {TextSegment{"Zebra crossing:"}, EmbeddingSlot{0}, AnswerSlot{"emotion"}}};
  EXPECT_THROW(oov.validate(v), ConfigError);
  PromptTemplate field{"x", {EmbeddingSlot{0}, AnswerSlot{"height"}}};
  EXPECT_THROW(field.validate(v), ConfigError);
}

TEST(Templates, FromJson) {
  auto t = template_from_json("emotion", json::parse(R"([{"text":"Emotion:"},{"embedding":0},{"answer":"emotion"}])"));
  ASSERT_EQ(t.segments.size(), 3u);
  EXPECT_EQ(std::get<EmbeddingSlot>(t.segments[1]).index, 0);
  EXPECT_THROW(template_from_json("x", json::parse(R"([{"bogus":1}])")), ConfigError);
  EXPECT_THROW(template_from_json("x", json::parse(R"({"text":"a"})")), ConfigError);
}

TEST(Assemble, InjectsKSoftTokensPerEmbeddingAndMasksAnswer) {
  FrozenLM lm(test::tiny_lm_config());
  Connector c = init_connector(kTaskAgeGender, 4, 16, 3, 1);
  auto e = emb(4, 0.5);
  AttributeLabels l;
  l.age = 42;
  l.gender = Gender::female;
  auto seq = assemble(age_gender_template(), c, {&e}, Answer::from_labels(l), lm);
  const auto& v = lm.vocab();
  const auto lead = v.encode("What is the age and the gender of the speaker, using the following audio embeddings:");
  ASSERT_EQ(seq.size(), lead.size() + 3 + 2 + 1 + 2 + 1);
  EXPECT_EQ(seq.vector_count(), 3u);
  auto toks = project(c, e);
  for (int j = 0; j < 3; ++j) EXPECT_EQ(seq.items[lead.size() + j].vector(), toks[j]);
  EXPECT_EQ(seq.loss_count(), 2u);
  const auto n = seq.size();
  EXPECT_TRUE(seq.items[n - 1].loss);
  EXPECT_EQ(seq.items[n - 1].token(), v.id("female"));
  EXPECT_EQ(seq.items[n - 4].token(), v.id("42"));
  EXPECT_TRUE(seq.items[n - 4].loss);
  EXPECT_FALSE(seq.items[n - 2].loss);
}

TEST(Assemble, InferenceStopsAtFirstAnswerSlot) {
  FrozenLM lm(test::tiny_lm_config());
  Connector c = zero_connector(kTaskEmotion, 4, 16, 2);
  auto e = emb(4, 1.0);
  auto seq = assemble(emotion_template(), c, {&e}, std::nullopt, lm);
  EXPECT_EQ(seq.items.back().token(), lm.vocab().id(":"));
  EXPECT_EQ(seq.loss_count(), 0u);
}

TEST(Assemble, VerificationSlotsTakeEmbeddingsInOrder) {
  FrozenLM lm(test::tiny_lm_config());
  Connector c = zero_connector(kTaskVerification, 2, 16, 1);
  c.W(0, 0) = 1.0;
  auto a = emb(2, 1.0), b = emb(2, 2.0), d = emb(2, 3.0);
  auto seq = assemble(verification_template(2), c, {&a, &b, &d}, Answer::verify(true), lm);
  std::vector<double> firsts;
  for (const auto& it : seq.items)
    if (it.is_vector()) firsts.push_back(it.vector()[0]);
  EXPECT_EQ(firsts, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(seq.items.back().token(), lm.vocab().yes_id());
}

TEST(Assemble, Errors) {
  FrozenLM lm(test::tiny_lm_config());
  auto e = emb(4, 1.0);
  Connector c = zero_connector(kTaskVerification, 4, 16);
  EXPECT_THROW(assemble(verification_template(1), c, {&e}, std::nullopt, lm), ValidationError);
  Connector wrong = zero_connector(kTaskEmotion, 4, 8);
  EXPECT_THROW(assemble(emotion_template(), wrong, {&e}, std::nullopt, lm), DimensionError);
  auto short_e = emb(3, 1.0);
  EXPECT_THROW(assemble(emotion_template(), zero_connector(kTaskEmotion, 4, 16), {&short_e}, std::nullopt, lm),
               DimensionError);
  AttributeLabels l;
  l.age = 30;
  EXPECT_THROW(assemble(age_gender_template(), zero_connector(kTaskAgeGender, 4, 16), {&e}, Answer::from_labels(l), lm),
               ValidationError);
  Connector big = zero_connector(kTaskEmotion, 4, 16, 120);
  EXPECT_THROW(assemble(emotion_template(), big, {&e}, std::nullopt, lm), SequenceLengthError);
}

TEST(AnswerTokens, TranscriptEndsWithEndToken) {
  Vocabulary v(default_vocabulary_tokens());
  AttributeLabels l;
  l.transcript = std::vector<std::string>{asr_lexicon()[0], "Qwertyuiop"};
  auto ids = answer_tokens("transcript", Answer::from_labels(l), v);
  EXPECT_EQ(ids, (std::vector<int>{v.id(asr_lexicon()[0]), v.unk_id(), v.end_id()}));
}

TEST(LeadingTokens, StopAtFirstSlot) {
  Vocabulary v(default_vocabulary_tokens());
  EXPECT_EQ(leading_tokens(asr_template(), v), v.encode("Transcribe the following text:"));
  PromptTemplate t{"x", {EmbeddingSlot{0}, TextSegment{"Answer:"}, AnswerSlot{"verify"}}};
  EXPECT_TRUE(leading_tokens(t, v).empty());
}

TEST(Generate, AgeGenderTextFollowsTemplateCue) {
  FrozenLM lm(test::tiny_lm_config());
  Connector c = init_connector(kTaskAgeGender, 4, 16, 1, 3);
  auto e = emb(4, 0.3);
  auto text = generate_answer_text(age_gender_template(), c, {&e}, lm);
  EXPECT_NE(text.find("Gender:"), std::string::npos) << text;
  auto cache = lm.make_prefix_cache(leading_tokens(age_gender_template(), lm.vocab()));
  EXPECT_EQ(generate_answer_text(age_gender_template(), c, {&e}, lm, &cache), text);
}

TEST(Parse, AgeGender) {
  auto p = parse_answer(kTaskAgeGender, "Age: 42, Gender: Female.");
  EXPECT_EQ(p.age, 42);
  EXPECT_EQ(p.gender, Gender::female);
  p = parse_answer(kTaskAgeGender, "about 35 or 40 male");
  EXPECT_EQ(p.age, 35);
  EXPECT_EQ(p.gender, Gender::male);
  p = parse_answer(kTaskAgeGender, "male female");
  EXPECT_FALSE(p.gender);
  EXPECT_FALSE(p.age);
  EXPECT_FALSE(parse_answer(kTaskAgeGender, "age 0").age);
  EXPECT_FALSE(parse_answer(kTaskAgeGender, "age 101").age);
  EXPECT_EQ(parse_answer(kTaskAgeGender, "100").age, 100);
  EXPECT_EQ(parse_answer(kTaskAgeGender, "1").age, 1);
  EXPECT_FALSE(parse_answer(kTaskAgeGender, "females").gender);  // whole tokens only
  EXPECT_FALSE(parse_answer(kTaskAgeGender, "").gender);
}

TEST(Parse, Emotion) {
  EXPECT_EQ(parse_answer(kTaskEmotion, "The speaker sounds ANGRY!").emotion, Emotion::angry);
  EXPECT_EQ(parse_answer(kTaskEmotion, "sad sad").emotion, Emotion::sad);
  EXPECT_FALSE(parse_answer(kTaskEmotion, "happy or sad").emotion);
  EXPECT_FALSE(parse_answer(kTaskEmotion, "unhappy").emotion);
  EXPECT_FALSE(parse_answer(kTaskEmotion, "").emotion);
}

TEST(Parse, VerificationAndAsr) {
  EXPECT_EQ(parse_answer(kTaskVerification, "Yes.").verify, true);
  EXPECT_EQ(parse_answer(kTaskVerification, "no").verify, false);
  EXPECT_FALSE(parse_answer(kTaskVerification, "yes no").verify);
  EXPECT_FALSE(parse_answer(kTaskVerification, "maybe").verify);
  EXPECT_EQ(parse_answer(kTaskAsr, "Hello, World!").transcript, (std::vector<std::string>{"hello", "world"}));
  EXPECT_THROW(parse_answer("other", "x"), ConfigError);
}

TEST(Normalize, LowercasesAndStripsPunctuation) {
  EXPECT_EQ(normalize_words("  It's  A-OK. "), (std::vector<std::string>{"its", "aok"}));
  EXPECT_EQ(match_tokens("speaker's age:42"), (std::vector<std::string>{"speaker", "s", "age", "42"}));
}
