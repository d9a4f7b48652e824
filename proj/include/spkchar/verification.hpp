#pragma once

// Verification trials (enrollment vs N_j + N_k shuffled test utterances),
// their scoring through connector + frozen LM, and the trial-list file.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "spkchar/connector.hpp"
#include "spkchar/core.hpp"
#include "spkchar/errors.hpp"
#include "spkchar/metrics.hpp"
#include "spkchar/prompts.hpp"
#include "spkchar/rng.hpp"
#include "spkchar/toylm.hpp"
#include "spkchar/training.hpp"

namespace spkchar {

struct Trial {
  std::string trial_id;
  std::string enroll;              // utterance key
  std::vector<std::string> tests;  // shuffled
  TrialLabel label = TrialLabel::nontarget;
  int n_j = 1;
  int n_k = 0;
  bool operator==(const Trial&) const = default;
};

struct TrialProtocol {
  int n_j = 1;
  int n_k = 0;
  int n_trials = 500;
  double target_fraction = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_j < 1) throw ConfigError("protocol n_j must be >= 1");
    if (n_k < 0) throw ConfigError("protocol n_k must be >= 0");
    if (n_trials < 1) throw ConfigError("protocol n_trials must be positive");
    if (!(target_fraction > 0.0 && target_fraction < 1.0))
      throw ConfigError("protocol target_fraction must lie in (0,1)");
  }
};

namespace detail {

// speaker -> sessions -> utterances, all in corpus order.
struct SpeakerIndex {
  struct Session {
    std::string id;
    std::vector<const AudioEmbedding*> utts;
  };
  struct Speaker {
    std::string id;
    std::vector<Session> sessions;
  };
  std::vector<Speaker> speakers;

  explicit SpeakerIndex(const EmbeddingCorpus& corpus) {
    std::map<std::string, std::size_t> spk_pos;
    for (const auto& e : corpus.entries()) {
      auto [it, fresh] = spk_pos.try_emplace(e.speaker_id, speakers.size());
      if (fresh) speakers.push_back({e.speaker_id, {}});
      auto& sessions = speakers[it->second].sessions;
      auto s = std::find_if(sessions.begin(), sessions.end(), [&](const Session& x) { return x.id == e.session_id; });
      if (s == sessions.end()) {
        sessions.push_back({e.session_id, {}});
        s = sessions.end() - 1;
      }
      s->utts.push_back(&e);
    }
  }
};

inline std::vector<std::size_t> sessions_with(const SpeakerIndex::Speaker& s, int min_utts, int skip = -1) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < s.sessions.size(); ++i)
    if (static_cast<int>(i) != skip && static_cast<int>(s.sessions[i].utts.size()) >= min_utts) out.push_back(i);
  return out;
}

template <class T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[static_cast<std::size_t>(rng.below(v.size()))];
}

inline std::vector<std::string> sample_keys(Rng& rng, const std::vector<const AudioEmbedding*>& utts, int n,
                                            const AudioEmbedding* exclude = nullptr) {
  std::vector<const AudioEmbedding*> pool;
  for (const auto* u : utts)
    if (u != exclude) pool.push_back(u);
  std::vector<std::string> out;
  for (std::size_t i : rng.sample(pool.size(), static_cast<std::size_t>(n))) out.push_back(pool[i]->key());
  return out;
}

// Shared generator. With allow_same_session, a target enrollment may come
// from the test session when its speaker has no other usable session.
inline std::vector<Trial> generate_trials(const EmbeddingCorpus& corpus, const TrialProtocol& p,
                                          bool allow_same_session) {
  p.validate();
  const SpeakerIndex idx(corpus);
  const int n_sp = static_cast<int>(idx.speakers.size());
  const int needed = p.n_k > 0 ? 3 : 2;
  if (n_sp < needed)
    throw ValidationError("trial generation needs at least " + std::to_string(needed) + " speakers, corpus has " +
                          std::to_string(n_sp));

  // Target enrollment options: (speaker, enroll session) pairs with a usable
  // test session for the same speaker.
  struct EnrollOption {
    std::size_t speaker, session;
  };
  std::vector<EnrollOption> target_opts;
  std::vector<std::size_t> j_capable, k_capable;
  for (std::size_t s = 0; s < idx.speakers.size(); ++s) {
    const auto& spk = idx.speakers[s];
    for (std::size_t ss = 0; ss < spk.sessions.size(); ++ss) {
      bool ok = !sessions_with(spk, p.n_j, static_cast<int>(ss)).empty();
      if (!ok && allow_same_session) ok = static_cast<int>(spk.sessions[ss].utts.size()) >= p.n_j + 1;
      if (ok) target_opts.push_back({s, ss});
    }
    if (!sessions_with(spk, p.n_j).empty()) j_capable.push_back(s);
    if (p.n_k > 0 && !sessions_with(spk, p.n_k).empty()) k_capable.push_back(s);
  }

  const auto n_target = static_cast<int>(std::ceil(p.n_trials * p.target_fraction - 1e-9));
  const int n_nontarget = p.n_trials - n_target;
  if (n_target > 0 && target_opts.empty())
    throw ValidationError(allow_same_session
                              ? "no speaker has two utterances for a target trial"
                              : "no speaker has a second session with >= " + std::to_string(p.n_j) +
                                    " utterances, required for target trials");
  auto others = [](const std::vector<std::size_t>& v, std::size_t a, std::size_t b) {
    std::vector<std::size_t> out;
    for (std::size_t x : v)
      if (x != a && x != b) out.push_back(x);
    return out;
  };
  // j candidates for a nontarget enrolled on speaker s
  auto nontarget_js = [&](std::size_t s) {
    std::vector<std::size_t> out;
    for (std::size_t jj : others(j_capable, s, s))
      if (p.n_k == 0 || !others(k_capable, s, jj).empty()) out.push_back(jj);
    return out;
  };
  std::vector<std::size_t> nontarget_enroll;
  for (std::size_t s = 0; s < idx.speakers.size(); ++s)
    if (!nontarget_js(s).empty()) nontarget_enroll.push_back(s);
  if (n_nontarget > 0 && nontarget_enroll.empty())
    throw ValidationError("nontarget trials need two other speakers with sessions of >= " + std::to_string(p.n_j) +
                          " (speaker j) and >= " + std::to_string(p.n_k) + " (speaker k) utterances");
  if (p.n_k > 0) {
    std::erase_if(target_opts, [&](const EnrollOption& o) { return others(k_capable, o.speaker, o.speaker).empty(); });
    if (n_target > 0 && target_opts.empty())
      throw ValidationError("target trials with n_k > 0 need another speaker with a session of >= " +
                            std::to_string(p.n_k) + " utterances");
  }

  Rng rng(derive_seed(p.seed, "trials"));
  std::vector<TrialLabel> labels(static_cast<std::size_t>(n_target), TrialLabel::target);
  labels.resize(static_cast<std::size_t>(p.n_trials), TrialLabel::nontarget);
  rng.shuffle(labels);

  std::vector<Trial> trials;
  const int width = std::max<int>(5, static_cast<int>(std::to_string(p.n_trials).size()));
  for (int t = 0; t < p.n_trials; ++t) {
    Trial tr;
    std::string num = std::to_string(t);
    tr.trial_id = "t" + std::string(static_cast<std::size_t>(width) - std::min<std::size_t>(num.size(), width), '0') + num;
    tr.label = labels[static_cast<std::size_t>(t)];
    tr.n_j = p.n_j;
    tr.n_k = p.n_k;
    std::size_t i = 0, j = 0;
    if (tr.label == TrialLabel::target) {
      const auto opt = pick(rng, target_opts);
      i = j = opt.speaker;
      const auto& spk = idx.speakers[i];
      const auto* enroll = pick(rng, spk.sessions[opt.session].utts);
      tr.enroll = enroll->key();
      auto test_sessions = sessions_with(spk, p.n_j, static_cast<int>(opt.session));
      if (test_sessions.empty()) {
        tr.tests = sample_keys(rng, spk.sessions[opt.session].utts, p.n_j, enroll);
      } else {
        tr.tests = sample_keys(rng, spk.sessions[pick(rng, test_sessions)].utts, p.n_j);
      }
    } else {
      i = pick(rng, nontarget_enroll);
      const auto& spk_i = idx.speakers[i];
      const auto& sess_i = spk_i.sessions[rng.below(spk_i.sessions.size())];
      tr.enroll = pick(rng, sess_i.utts)->key();
      const auto j_choices = nontarget_js(i);
      j = pick(rng, j_choices);
      const auto& spk_j = idx.speakers[j];
      tr.tests = sample_keys(rng, spk_j.sessions[pick(rng, sessions_with(spk_j, p.n_j))].utts, p.n_j);
    }
    if (p.n_k > 0) {
      auto k_choices = others(k_capable, i, j);
      if (k_choices.empty())
        throw ValidationError("speaker " + idx.speakers[i].id + " has no third speaker available for n_k=" +
                              std::to_string(p.n_k));
      const auto& spk_k = idx.speakers[pick(rng, k_choices)];
      auto extra = sample_keys(rng, spk_k.sessions[pick(rng, sessions_with(spk_k, p.n_k))].utts, p.n_k);
      tr.tests.insert(tr.tests.end(), extra.begin(), extra.end());
    }
    rng.shuffle(tr.tests);
    trials.push_back(std::move(tr));
  }
  return trials;
}

}  // namespace detail

/// Balanced pair trials: ceil(n/2) targets, floor(n/2) nontargets. Target
/// pairs cross sessions when the speaker has another session.
inline std::vector<Trial> make_pair_trials(const EmbeddingCorpus& corpus, int n_trials, std::uint64_t seed) {
  return detail::generate_trials(corpus, TrialProtocol{1, 0, n_trials, 0.5, seed}, true);
}

/// One enrollment utterance against N_j utterances of speaker j (one session)
/// and N_k of a third speaker k (one session), shuffled. Target iff j is the
/// enrollment speaker, in which case the enrollment comes from another
/// session.
inline std::vector<Trial> make_conversation_trials(const EmbeddingCorpus& corpus, const TrialProtocol& p) {
  return detail::generate_trials(corpus, p, false);
}

inline PromptTemplate trial_template(const Trial& t) {
  return verification_template(static_cast<int>(t.tests.size()));
}

inline std::vector<const AudioEmbedding*> trial_embeddings(const EmbeddingCorpus& corpus, const Trial& t) {
  auto get = [&](const std::string& key) {
    const AudioEmbedding* e = corpus.find(key);
    if (!e) throw ValidationError("trial " + t.trial_id + ": utterance '" + key + "' not in corpus");
    return e;
  };
  std::vector<const AudioEmbedding*> out{get(t.enroll)};
  for (const auto& k : t.tests) out.push_back(get(k));
  return out;
}

inline ScoredTrial score_trial(const FrozenLM& lm, const Connector& c, const EmbeddingCorpus& corpus,
                               const Trial& t, const PrefixCache* cache = nullptr) {
  if (t.tests.empty()) throw ValidationError("trial " + t.trial_id + " has no test utterances");
  MixedSequence seq;
  try {
    seq = assemble(trial_template(t), c, trial_embeddings(corpus, t), std::nullopt, lm);
  } catch (const SequenceLengthError& e) {
    throw SequenceLengthError(std::string(e.what()) + "; use fewer test utterances (n_j + n_k) or a larger max_seq");
  }
  return {t.trial_id, llr_score(lm, seq, cache), t.label};
}

/// Scores every trial, sharing one prompt-prefix cache per test count.
inline std::vector<ScoredTrial> score_trials(const FrozenLM& lm, const Connector& c, const EmbeddingCorpus& corpus,
                                             const std::vector<Trial>& trials) {
  std::map<std::size_t, PrefixCache> caches;
  std::vector<ScoredTrial> out;
  out.reserve(trials.size());
  for (const auto& t : trials) {
    auto it = caches.find(t.tests.size());
    if (it == caches.end())
      it = caches.emplace(t.tests.size(), lm.make_prefix_cache(leading_tokens(trial_template(t), lm.vocab()))).first;
    out.push_back(score_trial(lm, c, corpus, t, &it->second));
  }
  return out;
}

struct ProtocolResult {
  std::vector<Trial> trials;
  std::vector<ScoredTrial> scores;
  EERResult eer;
};

inline ProtocolResult evaluate_protocol(const FrozenLM& lm, const Connector& c, const EmbeddingCorpus& corpus,
                                        const TrialProtocol& p) {
  ProtocolResult r;
  r.trials = (p.n_j == 1 && p.n_k == 0) ? make_pair_trials(corpus, p.n_trials, p.seed)
                                          : make_conversation_trials(corpus, p);
  r.scores = score_trials(lm, c, corpus, r.trials);
  r.eer = compute_eer(r.scores);
  return r;
}

/// Training items for the pair task; stratum 1 = target, 0 = nontarget, so
/// batches hold both halves equally.
inline std::vector<TrainingExample> verification_examples(const EmbeddingCorpus& corpus,
                                                          const std::vector<Trial>& trials) {
  std::vector<TrainingExample> out;
  for (const auto& t : trials) {
    const bool same = t.label == TrialLabel::target;
    out.push_back({trial_embeddings(corpus, t), Answer::verify(same), same ? 1 : 0});
  }
  return out;
}

inline json to_json(const Trial& t) {
  return json{{"trial_id", t.trial_id}, {"enroll_key", t.enroll}, {"test_keys", t.tests},
              {"label", to_string(t.label)}, {"n_j", t.n_j},       {"n_k", t.n_k}};
}

inline void save_trials(const std::vector<Trial>& trials, const std::filesystem::path& path) {
  std::ostringstream out;
  for (const auto& t : trials) out << to_json(t).dump() << '\n';
  detail::write_text(path, out.str());
}

inline std::vector<Trial> load_trials(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trial list " + path.string());
  std::vector<Trial> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      out.push_back({j.at("trial_id").get<std::string>(), j.at("enroll_key").get<std::string>(),
                     j.at("test_keys").get<std::vector<std::string>>(),
                     trial_label_from_string(j.at("label").get<std::string>()), j.at("n_j").get<int>(),
                     j.at("n_k").get<int>()});
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace spkchar
