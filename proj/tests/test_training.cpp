#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "spkchar/training.hpp"

using namespace spkchar;

namespace {

struct Fixture {
  FrozenLM lm{test::tiny_lm_config()};
  EmbeddingCorpus train = test::small_corpus(6, 1, 4, 1);
  EmbeddingCorpus dev = test::small_corpus(3, 1, 2, 2, 0.05, "dev");
};

TrainConfig quick(int epochs, double lr = 1e-2) {
  TrainConfig c;
  c.learning_rate = lr;
  c.batch_size = 8;
  c.max_epochs = epochs;
  c.patience = 100;
  c.seed = 4;
  return c;
}

}  // namespace

TEST(AttributeExamples, OnlyItemsWithEveryRequestedField) {
  Fixture f;
  auto ex = attribute_examples(f.train, builtin_task(kTaskAgeGender));
  EXPECT_EQ(ex.size(), f.train.size());
  EmbeddingCorpus partial(f.train.d_enc(), f.train.encoder_id());
  AttributeLabels only_emotion;
  only_emotion.emotion = Emotion::happy;
  partial.add(f.train.entries()[0], only_emotion);
  EXPECT_TRUE(attribute_examples(partial, builtin_task(kTaskAgeGender)).empty());
  EXPECT_EQ(attribute_examples(partial, builtin_task(kTaskEmotion)).size(), 1u);
}

TEST(ConnectorGradients, MatchFiniteDifferences) {
  Fixture f;
  const TaskSpec task = builtin_task(kTaskAgeGender);
  auto ex = attribute_examples(f.train, task);
  ex.resize(3);
  Connector c = init_connector(task.task_id, 12, 16, 2, 8);
  c.b.setRandom();
  ConnectorGrads g;
  const double loss = connector_loss_and_grads(c, f.lm, task, ex, &g);
  EXPECT_NEAR(loss, connector_loss_and_grads(c, f.lm, task, ex, nullptr), 1e-12);
  const double h = 1e-5;
  Rng r(1);
  for (int trial = 0; trial < 30; ++trial) {
    const auto i = static_cast<Eigen::Index>(r.below(static_cast<std::uint64_t>(c.W.rows())));
    const auto j = static_cast<Eigen::Index>(r.below(static_cast<std::uint64_t>(c.W.cols())));
    Connector p = c, m = c;
    p.W(i, j) += h;
    m.W(i, j) -= h;
    const double fd = (connector_loss_and_grads(p, f.lm, task, ex, nullptr) -
                       connector_loss_and_grads(m, f.lm, task, ex, nullptr)) / (2 * h);
    EXPECT_NEAR(g.dW(i, j), fd, 1e-6 + 1e-4 * std::abs(fd));
    Connector pb = c, mb = c;
    pb.b[i] += h;
    mb.b[i] -= h;
    const double fdb = (connector_loss_and_grads(pb, f.lm, task, ex, nullptr) -
                        connector_loss_and_grads(mb, f.lm, task, ex, nullptr)) / (2 * h);
    EXPECT_NEAR(g.db[i], fdb, 1e-6 + 1e-4 * std::abs(fdb));
  }
}

TEST(Training, ReducesDevLossAndLeavesLmUntouched) {
  Fixture f;
  const TaskSpec task = builtin_task(kTaskEmotion);
  const auto before = f.lm.checksum();
  auto [c, rep] = train_connector(init_connector(task.task_id, 12, 16, 1, 2), f.lm, task,
                                  attribute_examples(f.train, task), attribute_examples(f.dev, task), quick(8));
  EXPECT_EQ(f.lm.checksum(), before);
  ASSERT_EQ(rep.dev_loss.size(), rep.train_loss.size() + 1);
  EXPECT_LT(rep.final_dev_loss, rep.dev_loss[0]);
  EXPECT_EQ(rep.final_dev_loss, rep.dev_loss[static_cast<std::size_t>(rep.best_epoch)]);
  EXPECT_NEAR(mean_dev_loss(c, f.lm, {TaskData{task, {}, attribute_examples(f.dev, task)}}), rep.final_dev_loss,
              1e-12);
}

TEST(Training, DeterministicForSeed) {
  Fixture f;
  const TaskSpec task = builtin_task(kTaskEmotion);
  auto run = [&](std::uint64_t seed) {
    auto cfg = quick(2);
    cfg.seed = seed;
    return train_connector(init_connector(task.task_id, 12, 16, 1, 2), f.lm, task,
                           attribute_examples(f.train, task), attribute_examples(f.dev, task), cfg)
        .first;
  };
  EXPECT_EQ(run(1), run(1));
  EXPECT_FALSE(run(1) == run(2));
}

TEST(Training, EarlyStoppingReturnsBestParameters) {
  Fixture f;
  const TaskSpec task = builtin_task(kTaskEmotion);
  auto cfg = quick(20, 0.0);
  cfg.patience = 2;
  Connector init = init_connector(task.task_id, 12, 16, 1, 2);
  auto [c, rep] = train_connector(init, f.lm, task, attribute_examples(f.train, task),
                                  attribute_examples(f.dev, task), cfg);
  EXPECT_EQ(rep.stopped_epoch, 2);
  EXPECT_EQ(rep.best_epoch, 0);
  EXPECT_EQ(c, init);
}

TEST(Training, StrataAreBalancedWithinBatches) {
  Fixture f;
  const TaskSpec task = builtin_task(kTaskEmotion);
  auto ex = attribute_examples(f.train, task);
  for (std::size_t i = 0; i < ex.size(); ++i) ex[i].stratum = i < 4 ? 1 : 0;  // 4 vs 20
  auto cfg = quick(2);
  cfg.batch_size = 7;
  auto rep = train_connector(init_connector(task.task_id, 12, 16, 1, 2), f.lm, task, ex,
                             attribute_examples(f.dev, task), cfg)
                 .second;
  ASSERT_EQ(rep.groups, (std::vector<std::string>{"emotion:0", "emotion:1"}));
  for (const auto& epoch : rep.batch_group_counts) {
    int a = 0, b = 0;
    for (const auto& batch : epoch) {
      EXPECT_LE(std::abs(batch[0] - batch[1]), 1);
      a += batch[0];
      b += batch[1];
    }
    EXPECT_EQ(a + b, static_cast<int>(ex.size()));
    EXPECT_LE(std::abs(a - b), 1);
  }
}

TEST(Training, MultiTaskBatchesSplitEvenly) {
  Fixture f;
  std::vector<TaskData> tasks;
  for (auto id : {kTaskEmotion, kTaskAgeGender, kTaskAsr}) {
    auto spec = builtin_task(id);
    auto tr = attribute_examples(f.train, spec);
    if (std::string(id) == kTaskAsr) tr.resize(5);
    tasks.push_back({spec, tr, attribute_examples(f.dev, spec)});
  }
  auto cfg = quick(2);
  cfg.multi_task = true;
  cfg.batch_size = 8;
  auto rep = train_connector(init_connector("universal", 12, 16, 1, 2), f.lm, tasks, cfg).second;
  for (const auto& epoch : rep.batch_group_counts) {
    std::vector<int> tot(3, 0);
    for (const auto& batch : epoch) {
      EXPECT_LE(*std::max_element(batch.begin(), batch.end()) - *std::min_element(batch.begin(), batch.end()), 1);
      for (int g = 0; g < 3; ++g) tot[static_cast<std::size_t>(g)] += batch[static_cast<std::size_t>(g)];
    }
    EXPECT_LE(*std::max_element(tot.begin(), tot.end()) - *std::min_element(tot.begin(), tot.end()), 1);
  }
}

TEST(Training, RejectsBadSetups) {
  Fixture f;
  const TaskSpec task = builtin_task(kTaskEmotion);
  auto tr = attribute_examples(f.train, task);
  auto dv = attribute_examples(f.dev, task);
  auto c = init_connector(task.task_id, 12, 16, 1, 2);
  auto bad = quick(1);
  bad.batch_size = 0;
  EXPECT_THROW(train_connector(c, f.lm, task, tr, dv, bad), ConfigError);
  EXPECT_THROW(train_connector(c, f.lm, task, tr, {}, quick(1)), ConfigError);
  EXPECT_THROW(train_connector(init_connector(task.task_id, 12, 8, 1, 2), f.lm, task, tr, dv, quick(1)),
               DimensionError);
  auto multi = quick(1);
  multi.multi_task = true;
  EXPECT_THROW(train_connector(c, f.lm, {TaskData{task, tr, dv}}, multi), ConfigError);
  EXPECT_THROW(connector_loss_and_grads(c, f.lm, task, {}, nullptr), ValidationError);
}
