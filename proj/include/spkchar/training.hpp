#pragma once

// Connector training over a frozen LM. Only W and b of the connector change;
// gradients reach them through the LM's input gradients and project().

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "spkchar/connector.hpp"
#include "spkchar/errors.hpp"
#include "spkchar/prompts.hpp"
#include "spkchar/rng.hpp"
#include "spkchar/toylm.hpp"

namespace spkchar {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int max_epochs = 50;
  int patience = 3;
  std::uint64_t seed = 0;
  bool multi_task = false;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate must be a finite nonnegative number");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (max_epochs <= 0) throw ConfigError("max_epochs must be positive");
    if (patience < 0) throw ConfigError("patience must be nonnegative");
  }
};

struct TrainingExample {
  std::vector<const AudioEmbedding*> embeddings;
  Answer answer;
  int stratum = 0;  // sampling group within a task (e.g. target/nontarget)
};

struct TaskData {
  TaskSpec spec;
  std::vector<TrainingExample> train;
  std::vector<TrainingExample> dev;
};

struct TrainReport {
  std::vector<double> train_loss;  // per epoch, 1-based epochs at index e-1
  std::vector<double> dev_loss;    // index 0 is the untrained connector
  int stopped_epoch = 0;
  int best_epoch = 0;
  double final_dev_loss = 0.0;
  // Per epoch, per batch, number of items drawn from each sampling group.
  std::vector<std::vector<std::vector<int>>> batch_group_counts;
  std::vector<std::string> groups;
};

inline json to_json(const TrainReport& r) {
  return json{{"train_loss", r.train_loss},       {"dev_loss", r.dev_loss},
              {"stopped_epoch", r.stopped_epoch}, {"best_epoch", r.best_epoch},
              {"final_dev_loss", r.final_dev_loss}, {"groups", r.groups},
              {"batch_group_counts", r.batch_group_counts}};
}

/// Examples from an attribute corpus: one embedding each, answer = labels.
inline std::vector<TrainingExample> attribute_examples(const EmbeddingCorpus& corpus, const TaskSpec& task) {
  std::vector<TrainingExample> out;
  for (const auto& e : corpus.entries()) {
    AttributeLabels l = corpus.labels_for(e.key());
    bool usable = true;
    for (const auto& s : task.prompt.segments)
      if (auto* a = std::get_if<AnswerSlot>(&s)) {
        const auto& f = a->field;
        if ((f == "age" && !l.age) || (f == "gender" && !l.gender) || (f == "emotion" && !l.emotion) ||
            (f == "transcript" && !l.transcript) || f == "verify")
          usable = false;
      }
    if (usable) out.push_back({{&e}, Answer::from_labels(std::move(l)), 0});
  }
  return out;
}

namespace detail {

struct ExampleRef {
  int task;
  std::size_t index;
};

inline double example_loss_and_grads(const Connector& c, const FrozenLM& lm, const TaskSpec& spec,
                                     const TrainingExample& ex, ConnectorGrads* acc, double weight,
                                     const PrefixCache* cache = nullptr) {
  MixedSequence seq = assemble(spec.prompt, c, ex.embeddings, ex.answer, lm);
  if (!acc) return lm.sequence_loss(seq, cache);
  LossAndGrads lg = lm.loss_and_input_grads(seq, cache);
  // VectorItems appear as k consecutive soft tokens per embedding, in slot
  // order.
  std::vector<int> slot_order;
  for (const auto& s : spec.prompt.segments)
    if (auto* e = std::get_if<EmbeddingSlot>(&s)) slot_order.push_back(e->index);
  for (std::size_t i = 0; i < slot_order.size(); ++i) {
    std::vector<Eigen::VectorXd> g(lg.grads.begin() + static_cast<std::ptrdiff_t>(i * c.k),
                                   lg.grads.begin() + static_cast<std::ptrdiff_t>((i + 1) * c.k));
    accumulate_projection_grads(c, ex.embeddings[static_cast<std::size_t>(slot_order[i])]->vector, g, *acc, weight);
  }
  return lg.loss;
}

}  // namespace detail

/// Mean task loss of `examples` and its exact gradient w.r.t. (W, b).
inline double connector_loss_and_grads(const Connector& c, const FrozenLM& lm, const TaskSpec& spec,
                                       const std::vector<TrainingExample>& examples, ConnectorGrads* grads) {
  if (grads) *grads = ConnectorGrads::zeros_like(c);
  if (examples.empty()) throw ValidationError("connector_loss_and_grads: no examples");
  const PrefixCache cache = lm.make_prefix_cache(leading_tokens(spec.prompt, lm.vocab()));
  double total = 0.0;
  const double w = 1.0 / static_cast<double>(examples.size());
  for (const auto& ex : examples) total += detail::example_loss_and_grads(c, lm, spec, ex, grads, w, &cache);
  return total * w;
}

namespace detail {
inline std::vector<PrefixCache> task_caches(const FrozenLM& lm, const std::vector<TaskData>& tasks) {
  std::vector<PrefixCache> out;
  for (const auto& t : tasks) out.push_back(lm.make_prefix_cache(leading_tokens(t.spec.prompt, lm.vocab())));
  return out;
}
inline double mean_dev_loss(const Connector& c, const FrozenLM& lm, const std::vector<TaskData>& tasks,
                            const std::vector<PrefixCache>& caches) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (const auto& ex : tasks[i].dev) {
      total += example_loss_and_grads(c, lm, tasks[i].spec, ex, nullptr, 1.0, &caches[i]);
      ++n;
    }
  return n ? total / static_cast<double>(n) : 0.0;
}
}  // namespace detail

/// Mean loss over the dev items of all tasks, each item weighted equally.
inline double mean_dev_loss(const Connector& c, const FrozenLM& lm, const std::vector<TaskData>& tasks) {
  return detail::mean_dev_loss(c, lm, tasks, detail::task_caches(lm, tasks));
}

using EpochCallback = std::function<void(int epoch, double train_loss, double dev_loss)>;

/// Trains one connector on one task, or on several tasks at once (the
/// universal connector) with every batch split evenly across tasks. Within a
/// single task, batches are split evenly across the examples' strata.
/// Returns the parameters with the lowest dev loss seen, including the
/// initial ones.
inline std::pair<Connector, TrainReport> train_connector(Connector connector, const FrozenLM& lm,
                                                         const std::vector<TaskData>& tasks,
                                                         const TrainConfig& cfg,
                                                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  connector.validate();
  if (tasks.empty()) throw ConfigError("train_connector: no tasks");
  if (cfg.multi_task && tasks.size() < 2) throw ConfigError("multi-task training needs at least two tasks");
  if (!cfg.multi_task && tasks.size() != 1) throw ConfigError("single-task training takes exactly one task");
  for (const auto& t : tasks) {
    if (t.train.empty() || t.dev.empty())
      throw ConfigError("task '" + t.spec.task_id + "' has an empty train or dev set");
    t.spec.prompt.validate(lm.vocab());
  }
  if (connector.d_lm != lm.d_lm())
    throw DimensionError("connector d_lm=" + std::to_string(connector.d_lm) + " but LM d_lm=" +
                         std::to_string(lm.d_lm()));

  // Sampling groups: tasks in multi-task mode, strata otherwise.
  std::vector<std::vector<detail::ExampleRef>> groups;
  TrainReport report;
  if (cfg.multi_task) {
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      groups.emplace_back();
      report.groups.push_back(tasks[t].spec.task_id);
      for (std::size_t i = 0; i < tasks[t].train.size(); ++i) groups.back().push_back({static_cast<int>(t), i});
    }
  } else {
    std::vector<int> strata;
    for (const auto& ex : tasks[0].train)
      if (std::find(strata.begin(), strata.end(), ex.stratum) == strata.end()) strata.push_back(ex.stratum);
    std::sort(strata.begin(), strata.end());
    groups.resize(strata.size());
    for (int s : strata) report.groups.push_back(tasks[0].spec.task_id + ":" + std::to_string(s));
    for (std::size_t i = 0; i < tasks[0].train.size(); ++i) {
      auto pos = std::find(strata.begin(), strata.end(), tasks[0].train[i].stratum) - strata.begin();
      groups[static_cast<std::size_t>(pos)].push_back({0, i});
    }
  }
  std::size_t total = 0;
  for (const auto& g : groups) total += g.size();
  const auto n_batches = static_cast<int>((total + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                          static_cast<std::size_t>(cfg.batch_size));

  Rng rng(derive_seed(cfg.seed, "train"));
  std::vector<std::vector<detail::ExampleRef>> queues(groups.size());
  std::vector<std::size_t> cursor(groups.size(), 0);
  auto draw = [&](std::size_t g) {
    if (cursor[g] == queues[g].size()) {
      queues[g] = groups[g];
      rng.shuffle(queues[g]);
      cursor[g] = 0;
    }
    return queues[g][cursor[g]++];
  };

  const std::vector<PrefixCache> caches = detail::task_caches(lm, tasks);
  AdamHyper hyper;
  hyper.learning_rate = cfg.learning_rate;
  AdamState state = AdamState::for_connector(connector);
  Connector best = connector;
  double best_dev = detail::mean_dev_loss(connector, lm, tasks, caches);
  if (!std::isfinite(best_dev)) throw TrainingError("initial dev loss is not finite");
  report.dev_loss.push_back(best_dev);
  int since_best = 0;
  int epoch = 0;
  for (epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::vector<std::vector<int>> epoch_counts;
    std::size_t remaining = total;
    for (int b = 0; b < n_batches; ++b) {
      const std::size_t bsz = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), remaining);
      remaining -= bsz;
      // Even split across groups, remainder rotated so no group is favoured.
      std::vector<int> counts(groups.size(), static_cast<int>(bsz / groups.size()));
      for (std::size_t r = 0; r < bsz % groups.size(); ++r)
        ++counts[(static_cast<std::size_t>(b) + r) % groups.size()];
      std::vector<detail::ExampleRef> batch;
      for (std::size_t g = 0; g < groups.size(); ++g)
        for (int i = 0; i < counts[g]; ++i) batch.push_back(draw(g));
      epoch_counts.push_back(counts);

      ConnectorGrads grads = ConnectorGrads::zeros_like(connector);
      const double w = 1.0 / static_cast<double>(batch.size());
      double batch_loss = 0.0;
      for (const auto& ref : batch) {
        const auto& task = tasks[static_cast<std::size_t>(ref.task)];
        batch_loss += w * detail::example_loss_and_grads(connector, lm, task.spec, task.train[ref.index], &grads, w,
                                                            &caches[static_cast<std::size_t>(ref.task)]);
      }
      if (!std::isfinite(batch_loss) || !grads.dW.allFinite() || !grads.db.allFinite())
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
      auto step = sgd_step(connector, state, grads, hyper);
      connector = std::move(step.connector);
      state = std::move(step.state);
      epoch_loss += batch_loss * static_cast<double>(batch.size());
    }
    report.batch_group_counts.push_back(std::move(epoch_counts));
    report.train_loss.push_back(epoch_loss / static_cast<double>(total));
    const double dev = detail::mean_dev_loss(connector, lm, tasks, caches);
    if (!std::isfinite(dev)) throw TrainingError("non-finite dev loss at epoch " + std::to_string(epoch));
    report.dev_loss.push_back(dev);
    if (on_epoch) on_epoch(epoch, report.train_loss.back(), dev);
    if (dev < best_dev) {
      best_dev = dev;
      best = connector;
      report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  report.stopped_epoch = std::min(epoch, cfg.max_epochs);
  report.final_dev_loss = best_dev;
  return {std::move(best), std::move(report)};
}

/// Single-task convenience overload.
inline std::pair<Connector, TrainReport> train_connector(Connector connector, const FrozenLM& lm,
                                                         const TaskSpec& task,
                                                         std::vector<TrainingExample> train,
                                                         std::vector<TrainingExample> dev,
                                                         const TrainConfig& cfg,
                                                         const EpochCallback& on_epoch = {}) {
  TrainConfig single = cfg;
  single.multi_task = false;
  return train_connector(std::move(connector), lm, {TaskData{task, std::move(train), std::move(dev)}}, single,
                         on_epoch);
}

}  // namespace spkchar
