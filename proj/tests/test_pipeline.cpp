#include <gtest/gtest.h>

#include <sstream>

#include "helpers.hpp"
#include "spkchar/pipeline.hpp"

using namespace spkchar;

namespace {

const char* kSmallConfig = R"({
  "seed": 7,
  "synth": {"d_enc": 16, "splits": {
    "train": {"n_speakers": 8, "utterances_per_session": 2, "with_transcripts": true},
    "dev": {"n_speakers": 4, "utterances_per_session": 2, "with_transcripts": true},
    "test": {"n_speakers": 4, "utterances_per_session": 2, "with_transcripts": true},
    "asv_train": {"n_speakers": 6, "sessions_per_speaker": 2, "utterances_per_session": 3},
    "asv_dev": {"n_speakers": 4, "sessions_per_speaker": 2, "utterances_per_session": 3},
    "asv_test": {"n_speakers": 5, "sessions_per_speaker": 2, "utterances_per_session": 3}}},
  "lm": {"d_lm": 16, "n_heads": 2, "n_layers": 1, "max_seq": 96},
  "train": {"learning_rate": 0.01, "max_epochs": 1, "batch_size": 8},
  "verification": {"train_pairs": 16, "dev_pairs": 6},
  "protocol": {"n_trials": 12}
})";

int run(std::vector<std::string> args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  args.insert(args.begin(), "spkchar");
  std::vector<const char*> argv;
  for (auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int rc = run_command(static_cast<int>(argv.size()), argv.data(), out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return rc;
}

}  // namespace

TEST(Config, DefaultsValidate) { EXPECT_NO_THROW(RunConfig::defaults().validate()); }

TEST(Config, UnknownKeysAreRejected) {
  EXPECT_THROW(run_config_from_json(json::parse(R"({"sede": 1})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"train": {"lr": 1}})")), ConfigError);
  EXPECT_THROW(run_config_from_json(json::parse(R"({"train": {"batch_size": "big"}})")), ConfigError);
  auto c = run_config_from_json(json::parse(R"({"tasks": {"dance": {"k": 2}}})"));
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, TaskSettingsOverrideTrainDefaults) {
  auto c = run_config_from_json(json::parse(kSmallConfig));
  c.tasks["emotion"].learning_rate = 0.5;
  EXPECT_EQ(c.train_config("emotion").learning_rate, 0.5);
  EXPECT_EQ(c.train_config("asr").learning_rate, 0.01);
  EXPECT_TRUE(c.train_config("universal").multi_task);
  EXPECT_NE(c.train_config("emotion").seed, c.train_config("asr").seed);
  EXPECT_EQ(c.splits.at("train").speaker_prefix, "tr");
}

TEST(Cli, UsageErrorsExitTwo) {
  std::string out, err;
  EXPECT_EQ(run({}, &out, &err), 2);
  EXPECT_EQ(run({"bogus"}), 2);
  EXPECT_EQ(run({"train", "--nj", "x"}), 2);
  EXPECT_EQ(run({"--help"}, &out), 0);
  EXPECT_NE(out.find("gen-synth"), std::string::npos);
}

TEST(Cli, MissingInputsExitOne) {
  test::TempDir dir;
  test::write_file(dir / "c.json", kSmallConfig);
  std::string err;
  const auto cfg = (dir / "c.json").string(), out = (dir / "run").string();
  EXPECT_EQ(run({"train", "--config", cfg, "--out", out, "--task", "emotion"}, nullptr, &err), 1);
  EXPECT_NE(err.find("LM checkpoint not found"), std::string::npos) << err;
  EXPECT_EQ(run({"train", "--config", cfg, "--out", out}, nullptr, &err), 1);
  EXPECT_NE(err.find("--task is required"), std::string::npos);
  EXPECT_EQ(run({"eval", "--config", (dir / "none.json").string()}, nullptr, &err), 1);
}

TEST(Pipeline, EndToEndSmallRun) {
  test::TempDir dir;
  test::write_file(dir / "c.json", kSmallConfig);
  const auto cfg = (dir / "c.json").string(), out = (dir / "run").string();
  auto ok = [&](std::vector<std::string> a) {
    a.insert(a.end(), {"--config", cfg, "--out", out});
    std::string o, e;
    EXPECT_EQ(run(a, &o, &e), 0) << e;
  };
  ok({"gen-synth"});
  ok({"lm-init"});
  const RunPaths P{out};
  const auto lm_bytes = test::read_file(P.lm());
  const auto enc_bytes = test::read_file(P.encoder());
  for (auto t : {"age_gender", "emotion", "asr", "verification", "universal"}) {
    ok({"train", "--task", t});
    ok({"eval", "--task", t});
    EXPECT_TRUE(std::filesystem::exists(P.connector(t)));
    EXPECT_FALSE(load_metrics(P.metrics(t)).empty());
  }
  EXPECT_EQ(test::read_file(P.lm()), lm_bytes);
  EXPECT_EQ(test::read_file(P.encoder()), enc_bytes);
  auto universal = load_metrics(P.metrics("universal"));
  EXPECT_EQ(universal.size(), 3u);  // gender, age, emotion
  ok({"gen-trials", "--nj", "2", "--nk", "1"});
  ok({"score-trials", "--nj", "2", "--nk", "1"});
  EXPECT_EQ(load_scores(P.scores(2, 1)).size(), 12u);
  EXPECT_EQ(load_trials(P.trials(2, 1))[0].n_k, 1);
  ok({"annotate"});
  auto ann = load_annotated(P.annotated());
  EXPECT_EQ(ann.size(), 2u);
}
