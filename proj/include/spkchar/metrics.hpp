#pragma once

// Accuracy, age MAE, WER, LLR scores and EER, plus the scores file and the
// one-line metric records.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "spkchar/core.hpp"
#include "spkchar/errors.hpp"
#include "spkchar/prompts.hpp"
#include "spkchar/toylm.hpp"

namespace spkchar {

class UndefinedMetricError : public ValidationError {
 public:
  UndefinedMetricError(const std::string& what, double invalid_rate)
      : ValidationError(what), invalid_rate_(invalid_rate) {}
  double invalid_rate() const { return invalid_rate_; }

 private:
  double invalid_rate_;
};

enum class Attribute { gender, emotion };

/// Invalid predictions count as wrong.
inline double classification_accuracy(const std::vector<ParsedAnswer>& preds,
                                      const std::vector<AttributeLabels>& refs, Attribute attr) {
  if (preds.size() != refs.size())
    throw ValidationError("accuracy: " + std::to_string(preds.size()) + " predictions vs " +
                          std::to_string(refs.size()) + " references");
  if (preds.empty()) throw ValidationError("accuracy: no items");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (attr == Attribute::gender) {
      if (!refs[i].gender) throw ValidationError("accuracy: reference " + std::to_string(i) + " has no gender");
      correct += preds[i].gender && *preds[i].gender == *refs[i].gender;
    } else {
      if (!refs[i].emotion) throw ValidationError("accuracy: reference " + std::to_string(i) + " has no emotion");
      correct += preds[i].emotion && *preds[i].emotion == *refs[i].emotion;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

struct MaeResult {
  double mae = 0.0;
  double invalid_rate = 0.0;
};

/// MAE over valid predictions only; the share of invalid ones is reported
/// next to it.
inline MaeResult age_mae(const std::vector<ParsedAnswer>& preds, const std::vector<AttributeLabels>& refs) {
  if (preds.size() != refs.size())
    throw ValidationError("age_mae: " + std::to_string(preds.size()) + " predictions vs " +
                          std::to_string(refs.size()) + " references");
  if (preds.empty()) throw ValidationError("age_mae: no items");
  double sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!refs[i].age) throw ValidationError("age_mae: reference " + std::to_string(i) + " has no age");
    if (!preds[i].age) continue;
    sum += std::abs(*preds[i].age - *refs[i].age);
    ++valid;
  }
  const double invalid_rate = static_cast<double>(preds.size() - valid) / static_cast<double>(preds.size());
  if (valid == 0) throw UndefinedMetricError("age_mae: no valid age prediction", invalid_rate);
  return {sum / static_cast<double>(valid), invalid_rate};
}

/// Word-level Levenshtein distance over normalized words, divided by the
/// reference length.
inline double wer(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  auto norm = [](const std::vector<std::string>& ws) {
    std::vector<std::string> out;
    for (const auto& w : ws)
      for (auto& n : normalize_words(w)) out.push_back(std::move(n));
    return out;
  };
  const auto h = norm(hyp), r = norm(ref);
  if (r.empty()) throw ValidationError("wer: empty reference");
  std::vector<std::size_t> prev(h.size() + 1), cur(h.size() + 1);
  for (std::size_t j = 0; j <= h.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= r.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= h.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r[i - 1] == h[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return static_cast<double>(prev[h.size()]) / static_cast<double>(r.size());
}

/// log P(yes) - log P(no) for the token following `prefix`.
inline double llr_score(const FrozenLM& lm, const MixedSequence& prefix, const PrefixCache* cache = nullptr) {
  Eigen::VectorXd logits = lm.last_logits(prefix, cache);
  return logits[lm.vocab().yes_id()] - logits[lm.vocab().no_id()];
}

enum class TrialLabel { nontarget, target };

inline std::string to_string(TrialLabel l) { return l == TrialLabel::target ? "target" : "nontarget"; }
inline TrialLabel trial_label_from_string(const std::string& s) {
  if (s == "target") return TrialLabel::target;
  if (s == "nontarget") return TrialLabel::nontarget;
  throw ParseError("bad trial label '" + s + "'");
}

struct ScoredTrial {
  std::string trial_id;
  double score = 0.0;
  TrialLabel label = TrialLabel::nontarget;
  bool operator==(const ScoredTrial&) const = default;
};

struct EERResult {
  double eer = 0.0;
  double threshold = 0.0;
};

/// FAR(t) = share of nontargets scoring >= t, FRR(t) = share of targets
/// scoring < t, evaluated at -inf, +inf and midway between distinct scores.
/// The EER is read off where FAR - FRR changes sign, interpolating linearly
/// between the two neighbouring operating points. The threshold is
/// interpolated the same way; when one end is infinite the finite end is
/// reported (0 if both are).
inline EERResult compute_eer(const std::vector<ScoredTrial>& trials) {
  std::vector<std::pair<double, bool>> s;
  std::size_t nt = 0;
  for (const auto& t : trials) {
    if (!std::isfinite(t.score)) throw ValidationError("compute_eer: trial '" + t.trial_id + "' has non-finite score");
    const bool tgt = t.label == TrialLabel::target;
    nt += tgt;
    s.emplace_back(t.score, tgt);
  }
  const std::size_t nn = s.size() - nt;
  if (nt == 0 || nn == 0) throw ValidationError("compute_eer: need at least one target and one nontarget trial");
  std::sort(s.begin(), s.end());

  constexpr double inf = std::numeric_limits<double>::infinity();
  // Walk thresholds upward: start below every score.
  double thr_prev = -inf, far_prev = 1.0, frr_prev = 0.0;
  std::size_t below_t = 0, below_n = 0;  // targets / nontargets strictly below threshold
  std::size_t i = 0;
  while (true) {
    double thr;
    if (i < s.size()) {
      const double v = s[i].first;
      while (i < s.size() && s[i].first == v) {
        (s[i].second ? below_t : below_n)++;
        ++i;
      }
      thr = i < s.size() ? v + (s[i].first - v) / 2.0 : inf;
    } else {
      thr = inf;
    }
    const double far = static_cast<double>(nn - below_n) / static_cast<double>(nn);
    const double frr = static_cast<double>(below_t) / static_cast<double>(nt);
    const double d_prev = far_prev - frr_prev, d = far - frr;
    if (d <= 0.0) {
      if (d == 0.0) return {far, std::isfinite(thr) ? thr : (std::isfinite(thr_prev) ? thr_prev : 0.0)};
      const double a = d_prev / (d_prev - d);
      double threshold;
      if (std::isfinite(thr_prev) && std::isfinite(thr))
        threshold = thr_prev + a * (thr - thr_prev);
      else if (std::isfinite(thr_prev))
        threshold = thr_prev;
      else if (std::isfinite(thr))
        threshold = thr;
      else
        threshold = 0.0;
      return {far_prev + a * (far - far_prev), threshold};
    }
    thr_prev = thr;
    far_prev = far;
    frr_prev = frr;
  }
}

inline json to_json(const ScoredTrial& t) {
  return json{{"trial_id", t.trial_id}, {"score", t.score}, {"label", to_string(t.label)}};
}

namespace detail {
inline void write_text(const std::filesystem::path& path, const std::string& text) {
  detail::ensure_parent(path);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}
}  // namespace detail

/// One JSON record per line.
inline void save_scores(const std::vector<ScoredTrial>& trials, const std::filesystem::path& path) {
  std::ostringstream out;
  for (const auto& t : trials) out << to_json(t).dump() << '\n';
  detail::write_text(path, out.str());
}

inline std::vector<ScoredTrial> load_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scores file " + path.string());
  std::vector<ScoredTrial> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      out.push_back({j.at("trial_id").get<std::string>(), j.at("score").get<double>(),
                     trial_label_from_string(j.at("label").get<std::string>())});
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

struct MetricRecord {
  std::string task;
  std::string metric;
  std::optional<double> value;  // nullopt: undefined (written as null)
  std::size_t n = 0;
  std::optional<double> invalid_rate;
  bool operator==(const MetricRecord&) const = default;
};

inline json to_json(const MetricRecord& r) {
  json j{{"task", r.task}, {"metric", r.metric}, {"value", r.value ? json(*r.value) : json(nullptr)}, {"n", r.n}};
  if (r.invalid_rate) j["invalid_rate"] = *r.invalid_rate;
  return j;
}

inline MetricRecord metric_record_from_json(const json& j) {
  MetricRecord r{j.at("task").get<std::string>(), j.at("metric").get<std::string>(), std::nullopt,
                 j.at("n").get<std::size_t>(), std::nullopt};
  if (!j.at("value").is_null()) r.value = j.at("value").get<double>();
  if (j.contains("invalid_rate")) r.invalid_rate = j.at("invalid_rate").get<double>();
  return r;
}

inline void save_metrics(const std::vector<MetricRecord>& records, const std::filesystem::path& path) {
  std::ostringstream out;
  for (const auto& r : records) out << to_json(r).dump() << '\n';
  detail::write_text(path, out.str());
}

inline std::vector<MetricRecord> load_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file " + path.string());
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(metric_record_from_json(json::parse(line)));
  return out;
}

}  // namespace spkchar
