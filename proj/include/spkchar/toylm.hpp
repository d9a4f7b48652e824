#pragma once

// A small frozen causal transformer (pre-LayerNorm GPT block layout) that
// accepts interleaved vocabulary tokens and continuous vectors. Weights are a
// seeded function of the config and never change after construction; the only
// gradients computed are with respect to the injected input vectors.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "spkchar/encoder.hpp"
#include "spkchar/errors.hpp"
#include "spkchar/rng.hpp"

namespace spkchar {

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kEndToken = "</s>";
inline constexpr std::string_view kUnknownToken = "<unk>";
inline constexpr std::string_view kYesToken = "yes";
inline constexpr std::string_view kNoToken = "no";

inline bool is_punctuation_token(std::string_view t) {
  return t.size() == 1 && std::ispunct(static_cast<unsigned char>(t[0])) &&
         t[0] != '<' && t[0] != '\'';
}

/// Splits text into tokenizer units: maximal runs of letters, digits and
/// apostrophes, plus every other non-space character on its own.
inline std::vector<std::string> pre_tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
  };
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isspace(u)) {
      flush();
    } else if (std::isalnum(u) || c == '\'' || u >= 0x80) {
      cur.push_back(c);
    } else {
      flush();
      out.emplace_back(1, c);
    }
  }
  flush();
  return out;
}

class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens)
      : tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
        throw ValidationError("vocabulary token '" + tokens_[i] +
                              "' appears twice");
    }
    for (auto t : {kPadToken, kEndToken, kUnknownToken, kYesToken, kNoToken})
      if (!index_.count(std::string(t)))
        throw ValidationError("vocabulary lacks required token '" +
                              std::string(t) + "'");
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::optional<int> find(std::string_view t) const {
    auto it = index_.find(std::string(t));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  int id(std::string_view t) const {
    auto v = find(t);
    if (!v) throw ValidationError("token '" + std::string(t) + "' not in vocabulary");
    return *v;
  }

  int pad_id() const { return id(kPadToken); }
  int end_id() const { return id(kEndToken); }
  int unk_id() const { return id(kUnknownToken); }
  int yes_id() const { return id(kYesToken); }
  int no_id() const { return id(kNoToken); }

  /// Unknown units map to <unk>.
  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& w : pre_tokenize(text)) ids.push_back(find(w).value_or(unk_id()));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
      const std::string& t = token(id);
      if (!out.empty() && !is_punctuation_token(t)) out.push_back(' ');
      out += t;
    }
    return out;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Word-level vocabulary: specials, yes/no, the prompt lexicon, class names,
/// the integers 1..100 and the synthetic transcript lexicon.
inline std::vector<std::string> default_vocabulary_tokens() {
  std::vector<std::string> out = {std::string(kPadToken), std::string(kEndToken),
                                  std::string(kUnknownToken), std::string(kYesToken),
                                  std::string(kNoToken)};
  auto add = [&](std::string_view t) {
    if (std::find(out.begin(), out.end(), t) == out.end()) out.emplace_back(t);
  };
  static const char* const kPromptText[] = {
      "What is the emotion of the speaker, using the following audio "
      "embeddings: Emotion:",
      "What is the age and the gender of the speaker, using the following "
      "audio embeddings: Age: Gender:",
      "Transcribe the following text: Transcript:",
      "Answer by yes or no, are those two audio embeddings from the same "
      "speaker: Answer:",
      "Answer by yes or no, did the first speaker speak at least once in the "
      "following audio embeddings: Answer:",
      "male female neutral happy angry sad . ? !"};
  for (const char* text : kPromptText)
    for (const auto& w : pre_tokenize(text)) add(w);
  for (int n = kMinAge; n <= kMaxAge; ++n) add(std::to_string(n));
  for (const auto& w : asr_lexicon()) add(w);
  return out;
}

struct LMConfig {
  std::vector<std::string> vocab = default_vocabulary_tokens();
  int d_lm = 128;
  int n_layers = 2;
  int n_heads = 8;
  int max_seq = 256;
  std::uint64_t seed = 0;

  void validate() const {
    if (d_lm <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq <= 0)
      throw ValidationError("LMConfig: d_lm, n_layers, n_heads, max_seq must be positive");
    if (d_lm % n_heads != 0)
      throw ValidationError("LMConfig: d_lm=" + std::to_string(d_lm) +
                            " not divisible by n_heads=" + std::to_string(n_heads));
    Vocabulary check(vocab);
    (void)check;
  }
  bool operator==(const LMConfig&) const = default;
};

inline json to_json(const LMConfig& c) {
  return json{{"vocab", c.vocab},   {"d_lm", c.d_lm},       {"n_layers", c.n_layers},
              {"n_heads", c.n_heads}, {"max_seq", c.max_seq}, {"seed", c.seed}};
}

inline LMConfig lm_config_from_json(const json& j) {
  LMConfig c;
  if (j.contains("vocab")) c.vocab = j["vocab"].get<std::vector<std::string>>();
  c.d_lm = j.value("d_lm", c.d_lm);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.seed = j.value("seed", c.seed);
  return c;
}

struct TokenItem {
  int id = 0;
};
struct VectorItem {
  Eigen::VectorXd value;
};

struct SequenceItem {
  std::variant<TokenItem, VectorItem> value;
  bool loss = false;

  bool is_vector() const { return std::holds_alternative<VectorItem>(value); }
  int token() const { return std::get<TokenItem>(value).id; }
  const Eigen::VectorXd& vector() const { return std::get<VectorItem>(value).value; }
};

/// LM input: tokens and soft vectors in order, with a per-item loss mask.
struct MixedSequence {
  std::vector<SequenceItem> items;

  void push_token(int id, bool loss = false) { items.push_back({TokenItem{id}, loss}); }
  void push_tokens(const std::vector<int>& ids, bool loss = false) {
    for (int id : ids) push_token(id, loss);
  }
  void push_vector(Eigen::VectorXd v) { items.push_back({VectorItem{std::move(v)}, false}); }

  std::size_t size() const { return items.size(); }
  std::size_t vector_count() const {
    return static_cast<std::size_t>(
        std::count_if(items.begin(), items.end(), [](const auto& i) { return i.is_vector(); }));
  }
  std::size_t loss_count() const {
    return static_cast<std::size_t>(
        std::count_if(items.begin(), items.end(), [](const auto& i) { return i.loss; }));
  }
};

struct LayerWeights {
  Eigen::VectorXd ln1_g, ln1_b;
  Eigen::MatrixXd w_qkv;  // d x 3d
  Eigen::VectorXd b_qkv;
  Eigen::MatrixXd w_o;  // d x d
  Eigen::VectorXd b_o;
  Eigen::VectorXd ln2_g, ln2_b;
  Eigen::MatrixXd w_fc;  // d x 4d
  Eigen::VectorXd b_fc;
  Eigen::MatrixXd w_proj;  // 4d x d
  Eigen::VectorXd b_proj;
};

struct LMWeights {
  Eigen::MatrixXd tok_emb;  // V x d, tied with the output projection
  Eigen::MatrixXd pos_emb;  // max_seq x d
  std::vector<LayerWeights> layers;
  Eigen::VectorXd lnf_g, lnf_b;

  template <class F>
  void for_each_tensor(F&& f) const {
    f(tok_emb);
    f(pos_emb);
    for (const auto& l : layers) {
      f(l.ln1_g); f(l.ln1_b); f(l.w_qkv); f(l.b_qkv); f(l.w_o); f(l.b_o);
      f(l.ln2_g); f(l.ln2_b); f(l.w_fc); f(l.b_fc); f(l.w_proj); f(l.b_proj);
    }
    f(lnf_g);
    f(lnf_b);
  }
  template <class F>
  void for_each_tensor_mut(F&& f) {
    f(tok_emb);
    f(pos_emb);
    for (auto& l : layers) {
      f(l.ln1_g); f(l.ln1_b); f(l.w_qkv); f(l.b_qkv); f(l.w_o); f(l.b_o);
      f(l.ln2_g); f(l.ln2_b); f(l.w_fc); f(l.b_fc); f(l.w_proj); f(l.b_proj);
    }
    f(lnf_g);
    f(lnf_b);
  }
};

/// Allocates zero tensors with the shapes implied by the config.
inline LMWeights zero_weights(const LMConfig& c) {
  const int d = c.d_lm, V = static_cast<int>(c.vocab.size());
  LMWeights w;
  w.tok_emb = Eigen::MatrixXd::Zero(V, d);
  w.pos_emb = Eigen::MatrixXd::Zero(c.max_seq, d);
  w.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (auto& l : w.layers) {
    l.ln1_g = Eigen::VectorXd::Ones(d);
    l.ln1_b = Eigen::VectorXd::Zero(d);
    l.w_qkv = Eigen::MatrixXd::Zero(d, 3 * d);
    l.b_qkv = Eigen::VectorXd::Zero(3 * d);
    l.w_o = Eigen::MatrixXd::Zero(d, d);
    l.b_o = Eigen::VectorXd::Zero(d);
    l.ln2_g = Eigen::VectorXd::Ones(d);
    l.ln2_b = Eigen::VectorXd::Zero(d);
    l.w_fc = Eigen::MatrixXd::Zero(d, 4 * d);
    l.b_fc = Eigen::VectorXd::Zero(4 * d);
    l.w_proj = Eigen::MatrixXd::Zero(4 * d, d);
    l.b_proj = Eigen::VectorXd::Zero(d);
  }
  w.lnf_g = Eigen::VectorXd::Ones(d);
  w.lnf_b = Eigen::VectorXd::Zero(d);
  return w;
}

/// Seeded initialisation. Integer tokens 1..100 are laid out on a half
/// circle in a random plane (plus a shared "number" direction), so nearby
/// integers have nearby embeddings; every other token is i.i.d. Gaussian.
inline LMWeights init_weights(const LMConfig& c) {
  c.validate();
  LMWeights w = zero_weights(c);
  const int d = c.d_lm;
  Rng rng(derive_seed(c.seed, "toylm"));
  auto fill = [&](Eigen::MatrixXd& m, double stddev) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = stddev * rng.normal();
  };
  fill(w.tok_emb, 1.0);
  fill(w.pos_emb, 0.2);
  // Attention gains of 2 make a single injected vector able to dominate the
  // attention of later positions.
  for (auto& l : w.layers) {
    fill(l.w_qkv, 2.0 / std::sqrt(d));
    fill(l.w_o, 2.0 / std::sqrt(d));
    fill(l.w_fc, 1.0 / std::sqrt(d));
    fill(l.w_proj, 1.0 / std::sqrt(4.0 * d));
  }
  if (d >= 3) {
    std::vector<Eigen::VectorXd> basis;
    for (int b = 0; b < 3; ++b) {
      Eigen::VectorXd v(d);
      for (int i = 0; i < d; ++i) v[i] = rng.normal();
      for (const auto& u : basis) v -= v.dot(u) * u;
      basis.push_back(v.normalized());
    }
    const double scale = std::sqrt(static_cast<double>(d));
    for (std::size_t t = 0; t < c.vocab.size(); ++t) {
      const std::string& tok = c.vocab[t];
      if (tok.empty() || tok.size() > 3 ||
          !std::all_of(tok.begin(), tok.end(), [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); }))
        continue;
      const int n = std::stoi(tok);
      if (n < kMinAge || n > kMaxAge || std::to_string(n) != tok) continue;
      const double theta = std::numbers::pi * (n - kMinAge) / double(kMaxAge - kMinAge);
      Eigen::VectorXd e = scale * (0.6 * basis[0] + 0.8 * (std::cos(theta) * basis[1] +
                                                           std::sin(theta) * basis[2]));
      w.tok_emb.row(static_cast<Eigen::Index>(t)) = e.transpose();
    }
  }
  return w;
}

struct LossAndGrads {
  double loss = 0.0;
  std::vector<Eigen::VectorXd> grads;  // one per VectorItem, in order
};

/// Per-layer keys and values of a token-only prompt prefix. Sequences that
/// start with the same tokens can reuse it instead of recomputing them.
class PrefixCache {
 public:
  const std::vector<int>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }

 private:
  friend class FrozenLM;
  std::vector<int> tokens_;
  std::vector<Eigen::MatrixXd> keys_, values_;
};

class FrozenLM {
 public:
  explicit FrozenLM(LMConfig config) : FrozenLM(config, init_weights(config)) {}

  FrozenLM(LMConfig config, LMWeights weights)
      : config_(std::move(config)), vocab_(config_.vocab), w_(std::move(weights)) {
    config_.validate();
    check_shapes();
  }

  const LMConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const LMWeights& weights() const { return w_; }
  int d_lm() const { return config_.d_lm; }

  /// FNV-1a over the config and the raw bytes of every parameter.
  std::uint64_t checksum() const {
    std::uint64_t h = fnv1a(to_json(config_).dump());
    w_.for_each_tensor([&](const auto& m) {
      const auto* bytes = reinterpret_cast<const char*>(m.data());
      h = fnv1a(std::string_view(bytes, static_cast<std::size_t>(m.size()) * sizeof(double)), h);
    });
    return h;
  }

  PrefixCache make_prefix_cache(const std::vector<int>& tokens) const {
    MixedSequence seq;
    seq.push_tokens(tokens);
    check_sequence(seq, false);
    PrefixCache cache;
    cache.tokens_ = tokens;
    if (tokens.empty()) return cache;
    Forward f = forward(seq, nullptr);
    for (const auto& l : f.layers) {
      cache.keys_.push_back(l.keys);
      cache.values_.push_back(l.values);
    }
    return cache;
  }

  std::vector<double> next_distribution(const MixedSequence& prefix, const PrefixCache* cache = nullptr) const {
    Eigen::VectorXd p = softmax(last_logits(prefix, cache));
    return {p.data(), p.data() + p.size()};
  }

  /// Logits of the token following `prefix`.
  Eigen::VectorXd last_logits(const MixedSequence& prefix, const PrefixCache* cache = nullptr) const {
    if (prefix.size() == 0) throw SequenceLengthError("empty prefix");
    check_sequence(prefix, false);
    check_cache(prefix, cache);
    Forward f = forward(prefix, cache);
    return logits_row(f.z.row(f.z.rows() - 1).transpose());
  }

  /// Mean cross-entropy (nats) over loss-masked positions.
  double sequence_loss(const MixedSequence& seq, const PrefixCache* cache = nullptr) const {
    check_sequence(seq, true);
    check_cache(seq, cache);
    Forward f = forward(seq, cache);
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 1; t < seq.size(); ++t) {
      if (!seq.items[t].loss) continue;
      const auto row = static_cast<Eigen::Index>(t - 1 - f.offset);
      total -= log_softmax(logits_row(f.z.row(row).transpose()))[seq.items[t].token()];
      ++n;
    }
    return total / static_cast<double>(n);
  }

  LossAndGrads loss_and_input_grads(const MixedSequence& seq, const PrefixCache* cache = nullptr) const {
    check_sequence(seq, true);
    check_cache(seq, cache);
    Forward f = forward(seq, cache);
    const auto Ts = f.z.rows();
    const int d = config_.d_lm;
    const double inv_n = 1.0 / static_cast<double>(seq.loss_count());
    const double out_scale = 1.0 / std::sqrt(static_cast<double>(d));

    LossAndGrads r;
    Eigen::MatrixXd dz = Eigen::MatrixXd::Zero(Ts, d);
    for (std::size_t t = 1; t < seq.size(); ++t) {
      const auto& item = seq.items[t];
      if (!item.loss) continue;
      const auto row = static_cast<Eigen::Index>(t - 1 - f.offset);
      Eigen::VectorXd lp = log_softmax(logits_row(f.z.row(row).transpose()));
      r.loss -= lp[item.token()] * inv_n;
      Eigen::VectorXd dlogits = lp.array().exp();
      dlogits[item.token()] -= 1.0;
      dz.row(row) = (w_.tok_emb.transpose() * dlogits).transpose() * (inv_n * out_scale);
    }
    Eigen::MatrixXd dx = ln_backward(dz, w_.lnf_g, f.lnf);
    for (std::size_t l = w_.layers.size(); l-- > 0;) dx = layer_backward(dx, w_.layers[l], f.layers[l]);
    for (std::size_t t = f.offset; t < seq.size(); ++t)
      if (seq.items[t].is_vector()) r.grads.push_back(dx.row(static_cast<Eigen::Index>(t - f.offset)).transpose());
    return r;
  }

  /// Greedy continuation; stops at the end token (not returned) or after
  /// max_new tokens. Ties go to the lowest vocabulary index.
  std::vector<int> greedy_decode_ids(MixedSequence prefix, int max_new, const PrefixCache* cache = nullptr) const {
    if (max_new < 0) throw ValidationError("max_new must be nonnegative");
    if (prefix.size() + static_cast<std::size_t>(max_new) > static_cast<std::size_t>(config_.max_seq))
      throw SequenceLengthError("prefix length " + std::to_string(prefix.size()) + " + max_new " +
                                std::to_string(max_new) + " exceeds max_seq " + std::to_string(config_.max_seq));
    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
      Eigen::VectorXd logits = last_logits(prefix, cache);
      Eigen::Index best = 0;
      for (Eigen::Index i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
      if (static_cast<int>(best) == vocab_.end_id()) break;
      out.push_back(static_cast<int>(best));
      prefix.push_token(static_cast<int>(best));
    }
    return out;
  }

  std::vector<std::string> greedy_decode(const MixedSequence& prefix, int max_new) const {
    std::vector<std::string> out;
    for (int id : greedy_decode_ids(prefix, max_new)) out.push_back(vocab_.token(id));
    return out;
  }

  static Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
    Eigen::VectorXd e = (logits.array() - logits.maxCoeff()).exp();
    return e / e.sum();
  }
  static Eigen::VectorXd log_softmax(const Eigen::VectorXd& logits) {
    const double m = logits.maxCoeff();
    const double lse = m + std::log((logits.array() - m).exp().sum());
    return logits.array() - lse;
  }

 private:
  struct LNCache {
    Eigen::MatrixXd xhat;
    Eigen::VectorXd rstd;
  };
  // Rows cover the computed (suffix) positions; keys/values cover the whole
  // sequence including any cached prefix.
  struct LayerCache {
    LNCache ln1, ln2;
    Eigen::MatrixXd q;
    Eigen::MatrixXd keys, values;
    std::vector<Eigen::MatrixXd> probs;  // per head, Ts x T
    Eigen::MatrixXd f;                   // MLP pre-activation
  };
  struct Forward {
    std::size_t offset = 0;  // number of cached prefix positions
    std::vector<LayerCache> layers;
    LNCache lnf;
    Eigen::MatrixXd z;  // final normalised hidden states of computed rows
  };

  static constexpr double kLnEps = 1e-5;
  static constexpr double kGeluC = 0.044715;

  void check_shapes() const {
    const LMWeights ref = zero_weights(config_);
    if (w_.layers.size() != ref.layers.size()) throw ValidationError("LM weights have wrong layer count");
    std::vector<std::pair<Eigen::Index, Eigen::Index>> want, got;
    ref.for_each_tensor([&](const auto& m) { want.emplace_back(m.rows(), m.cols()); });
    w_.for_each_tensor([&](const auto& m) { got.emplace_back(m.rows(), m.cols()); });
    if (want != got) throw ValidationError("LM weight shapes do not match config");
  }

  void check_sequence(const MixedSequence& seq, bool need_loss) const {
    if (seq.size() > static_cast<std::size_t>(config_.max_seq))
      throw SequenceLengthError("sequence length " + std::to_string(seq.size()) + " exceeds max_seq " +
                                std::to_string(config_.max_seq));
    for (std::size_t t = 0; t < seq.size(); ++t) {
      const auto& it = seq.items[t];
      if (it.is_vector()) {
        if (it.vector().size() != config_.d_lm)
          throw DimensionError("vector item " + std::to_string(t) + " has length " +
                               std::to_string(it.vector().size()) + ", expected d_lm=" +
                               std::to_string(config_.d_lm));
        if (!it.vector().allFinite()) throw ValidationError("vector item " + std::to_string(t) + " is not finite");
        if (it.loss) throw ValidationError("loss mask set on vector item " + std::to_string(t));
      } else if (it.token() < 0 || it.token() >= vocab_.size()) {
        throw ValidationError("token id " + std::to_string(it.token()) + " out of range");
      }
    }
    if (need_loss) {
      if (!seq.items.empty() && seq.items[0].loss)
        throw ValidationError("loss mask on position 0 has no prediction context");
      if (seq.loss_count() == 0) throw ValidationError("sequence has no loss-masked positions");
    }
  }

  void check_cache(const MixedSequence& seq, const PrefixCache* cache) const {
    if (!cache || cache->size() == 0) return;
    const std::size_t n = cache->size();
    if (seq.size() <= n) throw ValidationError("sequence is not longer than its cached prefix");
    for (std::size_t t = 0; t < n; ++t) {
      const auto& it = seq.items[t];
      if (it.is_vector() || it.token() != cache->tokens()[t])
        throw ValidationError("sequence does not start with the cached prefix tokens");
      if (it.loss || seq.items[t + 1].loss)
        throw ValidationError("loss mask inside a cached prefix");
    }
    if (cache->keys_.size() != w_.layers.size() || cache->keys_[0].cols() != config_.d_lm)
      throw ValidationError("prefix cache was built by a different model");
  }

  Eigen::VectorXd logits_row(const Eigen::VectorXd& z) const {
    return (w_.tok_emb * z) / std::sqrt(static_cast<double>(config_.d_lm));
  }

  static Eigen::MatrixXd ln_forward(const Eigen::MatrixXd& x, const Eigen::VectorXd& g, const Eigen::VectorXd& b,
                                    LNCache& cache) {
    const auto T = x.rows();
    const double d = static_cast<double>(x.cols());
    cache.xhat.resize(T, x.cols());
    cache.rstd.resize(T);
    for (Eigen::Index t = 0; t < T; ++t) {
      const double mu = x.row(t).sum() / d;
      const double var = (x.row(t).array() - mu).square().sum() / d;
      cache.rstd[t] = 1.0 / std::sqrt(var + kLnEps);
      cache.xhat.row(t) = (x.row(t).array() - mu) * cache.rstd[t];
    }
    Eigen::MatrixXd y = cache.xhat;
    y.array().rowwise() *= g.transpose().array();
    y.rowwise() += b.transpose();
    return y;
  }

  static Eigen::MatrixXd ln_backward(const Eigen::MatrixXd& dy, const Eigen::VectorXd& g, const LNCache& cache) {
    Eigen::MatrixXd dxhat = dy;
    dxhat.array().rowwise() *= g.transpose().array();
    Eigen::MatrixXd dx(dy.rows(), dy.cols());
    const double d = static_cast<double>(dy.cols());
    for (Eigen::Index t = 0; t < dy.rows(); ++t) {
      const double m1 = dxhat.row(t).sum() / d;
      const double m2 = dxhat.row(t).dot(cache.xhat.row(t)) / d;
      dx.row(t) = cache.rstd[t] * (dxhat.row(t).array() - m1 - cache.xhat.row(t).array() * m2);
    }
    return dx;
  }

  static double gelu(double x) {
    const double k = std::sqrt(2.0 / std::numbers::pi);
    return 0.5 * x * (1.0 + std::tanh(k * (x + kGeluC * x * x * x)));
  }
  static double gelu_grad(double x) {
    const double k = std::sqrt(2.0 / std::numbers::pi);
    const double th = std::tanh(k * (x + kGeluC * x * x * x));
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * k * (1.0 + 3.0 * kGeluC * x * x);
  }

  Eigen::MatrixXd embed(const MixedSequence& seq, std::size_t offset) const {
    const auto Ts = static_cast<Eigen::Index>(seq.size() - offset);
    Eigen::MatrixXd x(Ts, config_.d_lm);
    for (Eigen::Index r = 0; r < Ts; ++r) {
      const std::size_t t = offset + static_cast<std::size_t>(r);
      const auto& it = seq.items[t];
      if (it.is_vector())
        x.row(r) = it.vector().transpose();
      else
        x.row(r) = w_.tok_emb.row(it.token());
      x.row(r) += w_.pos_emb.row(static_cast<Eigen::Index>(t));
    }
    return x;
  }

  Forward forward(const MixedSequence& seq, const PrefixCache* cache) const {
    Forward f;
    f.offset = cache ? cache->size() : 0;
    Eigen::MatrixXd x = embed(seq, f.offset);
    f.layers.resize(w_.layers.size());
    for (std::size_t l = 0; l < w_.layers.size(); ++l) {
      const Eigen::MatrixXd* pk = f.offset ? &cache->keys_[l] : nullptr;
      const Eigen::MatrixXd* pv = f.offset ? &cache->values_[l] : nullptr;
      x = layer_forward(x, w_.layers[l], f.layers[l], pk, pv);
    }
    f.z = ln_forward(x, w_.lnf_g, w_.lnf_b, f.lnf);
    return f;
  }

  Eigen::MatrixXd layer_forward(const Eigen::MatrixXd& x, const LayerWeights& w, LayerCache& c,
                                const Eigen::MatrixXd* prefix_keys, const Eigen::MatrixXd* prefix_values) const {
    const int d = config_.d_lm, H = config_.n_heads, hd = d / H;
    const auto Ts = x.rows();
    const Eigen::Index T0 = prefix_keys ? prefix_keys->rows() : 0;
    const Eigen::Index T = T0 + Ts;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Eigen::MatrixXd a = ln_forward(x, w.ln1_g, w.ln1_b, c.ln1);
    Eigen::MatrixXd qkv = a * w.w_qkv;
    qkv.rowwise() += w.b_qkv.transpose();
    c.q = qkv.leftCols(d);
    c.keys.resize(T, d);
    c.values.resize(T, d);
    if (T0) {
      c.keys.topRows(T0) = *prefix_keys;
      c.values.topRows(T0) = *prefix_values;
    }
    c.keys.bottomRows(Ts) = qkv.middleCols(d, d);
    c.values.bottomRows(Ts) = qkv.rightCols(d);
    Eigen::MatrixXd o(Ts, d);
    c.probs.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      Eigen::MatrixXd s = (c.q.middleCols(h * hd, hd) * c.keys.middleCols(h * hd, hd).transpose()) * scale;
      Eigen::MatrixXd& p = c.probs[static_cast<std::size_t>(h)];
      p = Eigen::MatrixXd::Zero(Ts, T);
      for (Eigen::Index i = 0; i < Ts; ++i) {
        const Eigen::Index visible = T0 + i + 1;
        const double m = s.row(i).head(visible).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j < visible; ++j) z += (p(i, j) = std::exp(s(i, j) - m));
        p.row(i).head(visible) /= z;
      }
      o.middleCols(h * hd, hd) = p * c.values.middleCols(h * hd, hd);
    }
    Eigen::MatrixXd x1 = x + o * w.w_o;
    x1.rowwise() += w.b_o.transpose();
    Eigen::MatrixXd m = ln_forward(x1, w.ln2_g, w.ln2_b, c.ln2);
    c.f = m * w.w_fc;
    c.f.rowwise() += w.b_fc.transpose();
    Eigen::MatrixXd x2 = x1 + c.f.unaryExpr([](double v) { return gelu(v); }) * w.w_proj;
    x2.rowwise() += w.b_proj.transpose();
    return x2;
  }

  Eigen::MatrixXd layer_backward(const Eigen::MatrixXd& dx2, const LayerWeights& w, const LayerCache& c) const {
    const int d = config_.d_lm, H = config_.n_heads, hd = d / H;
    const auto Ts = dx2.rows();
    const auto T = c.keys.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    // MLP branch
    Eigen::MatrixXd dg = dx2 * w.w_proj.transpose();
    Eigen::MatrixXd df = dg.cwiseProduct(c.f.unaryExpr([](double v) { return gelu_grad(v); }));
    Eigen::MatrixXd dx1 = dx2 + ln_backward(df * w.w_fc.transpose(), w.ln2_g, c.ln2);
    // attention branch; gradients into cached prefix keys/values are dropped
    Eigen::MatrixXd dout = dx1 * w.w_o.transpose();
    Eigen::MatrixXd dqkv(Ts, 3 * d);
    for (int h = 0; h < H; ++h) {
      const Eigen::MatrixXd& p = c.probs[static_cast<std::size_t>(h)];
      auto dout_h = dout.middleCols(h * hd, hd);
      Eigen::MatrixXd dp = dout_h * c.values.middleCols(h * hd, hd).transpose();
      Eigen::MatrixXd dv = p.transpose() * dout_h;
      dqkv.middleCols(2 * d + h * hd, hd) = dv.bottomRows(Ts);
      Eigen::MatrixXd ds(Ts, T);
      for (Eigen::Index i = 0; i < Ts; ++i) {
        const double inner = p.row(i).dot(dp.row(i));
        ds.row(i) = p.row(i).array() * (dp.row(i).array() - inner);
      }
      ds *= scale;
      dqkv.middleCols(h * hd, hd) = ds * c.keys.middleCols(h * hd, hd);
      Eigen::MatrixXd dk = ds.transpose() * c.q.middleCols(h * hd, hd);
      dqkv.middleCols(d + h * hd, hd) = dk.bottomRows(Ts);
    }
    return dx1 + ln_backward(dqkv * w.w_qkv.transpose(), w.ln1_g, c.ln1);
  }

  LMConfig config_;
  Vocabulary vocab_;
  LMWeights w_;
};

inline FrozenLM init_toy_lm(const LMConfig& config) { return FrozenLM(config); }

inline constexpr char kLmMagic[8] = {'S', 'P', 'K', 'L', 'M', '0', '0', '1'};

inline void save_lm(const FrozenLM& lm, const std::filesystem::path& path) {
  detail::ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write LM checkpoint " + path.string());
  const std::string cfg = to_json(lm.config()).dump();
  auto put_u64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  out.write(kLmMagic, sizeof kLmMagic);
  put_u64(cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  lm.weights().for_each_tensor([&](const auto& m) {
    put_u64(static_cast<std::uint64_t>(m.rows()));
    put_u64(static_cast<std::uint64_t>(m.cols()));
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * static_cast<Eigen::Index>(sizeof(double))));
  });
  if (!out) throw IoError("write failed for " + path.string());
}

inline FrozenLM load_lm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open LM checkpoint " + path.string());
  char magic[sizeof kLmMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kLmMagic, sizeof magic) != 0)
    throw ParseError(path.string() + ": not an LM checkpoint (bad magic)");
  auto get_u64 = [&] {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw ParseError(path.string() + ": truncated LM checkpoint");
    return v;
  };
  const auto len = get_u64();
  if (len > (1u << 26)) throw ParseError(path.string() + ": implausible config length");
  std::string cfg(len, '\0');
  in.read(cfg.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError(path.string() + ": truncated LM checkpoint");
  LMConfig config;
  try {
    config = lm_config_from_json(json::parse(cfg));
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": bad LM config: " + e.what());
  }
  config.validate();
  LMWeights w = zero_weights(config);
  w.for_each_tensor_mut([&](auto& m) {
    const auto rows = get_u64(), cols = get_u64();
    if (rows != static_cast<std::uint64_t>(m.rows()) || cols != static_cast<std::uint64_t>(m.cols()))
      throw ParseError(path.string() + ": tensor shape mismatch");
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(m.size() * static_cast<Eigen::Index>(sizeof(double))));
    if (!in) throw ParseError(path.string() + ": truncated LM checkpoint");
  });
  return FrozenLM(std::move(config), std::move(w));
}

}  // namespace spkchar
