#pragma once

// The trainable affine map from encoder space to k soft tokens in LM space,
// its checkpoint format and the adaptive first-order update.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "spkchar/core.hpp"
#include "spkchar/errors.hpp"
#include "spkchar/rng.hpp"

namespace spkchar {

struct Connector {
  std::string task_id;
  int k = 1;
  int d_enc = 0;
  int d_lm = 0;
  Eigen::MatrixXd W;  // (k*d_lm) x d_enc
  Eigen::VectorXd b;  // k*d_lm

  void validate() const {
    if (k <= 0 || d_enc <= 0 || d_lm <= 0)
      throw ValidationError("connector '" + task_id + "': k, d_enc, d_lm must be positive");
    if (W.rows() != static_cast<Eigen::Index>(k) * d_lm || W.cols() != d_enc ||
        b.size() != static_cast<Eigen::Index>(k) * d_lm)
      throw DimensionError("connector '" + task_id + "': parameter shapes inconsistent with k=" +
                           std::to_string(k) + ", d_enc=" + std::to_string(d_enc) +
                           ", d_lm=" + std::to_string(d_lm));
    if (!W.allFinite() || !b.allFinite())
      throw ValidationError("connector '" + task_id + "' has non-finite parameters");
  }

  bool operator==(const Connector& o) const {
    return task_id == o.task_id && k == o.k && d_enc == o.d_enc && d_lm == o.d_lm &&
           W.rows() == o.W.rows() && W.cols() == o.W.cols() && b.size() == o.b.size() &&
           W == o.W && b == o.b;
  }
};

inline Connector zero_connector(std::string task_id, int d_enc, int d_lm, int k = 1) {
  Connector c{std::move(task_id), k, d_enc, d_lm,
              Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k) * d_lm, d_enc),
              Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k) * d_lm)};
  c.validate();
  return c;
}

/// W ~ N(0, scale^2 / d_enc), b = 0.
inline Connector init_connector(std::string task_id, int d_enc, int d_lm, int k,
                                std::uint64_t seed, double scale = 1.0) {
  Connector c = zero_connector(std::move(task_id), d_enc, d_lm, k);
  Rng rng(derive_seed(seed, "connector:" + c.task_id));
  const double s = scale / std::sqrt(static_cast<double>(d_enc));
  for (Eigen::Index j = 0; j < c.W.cols(); ++j)
    for (Eigen::Index i = 0; i < c.W.rows(); ++i) c.W(i, j) = s * rng.normal();
  return c;
}

/// k soft tokens for one embedding: rows of reshape(W x + b).
inline std::vector<Eigen::VectorXd> project(const Connector& c, const std::vector<double>& x) {
  if (static_cast<int>(x.size()) != c.d_enc)
    throw DimensionError("connector '" + c.task_id + "' expects d_enc=" + std::to_string(c.d_enc) +
                         ", got embedding of length " + std::to_string(x.size()));
  Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  Eigen::VectorXd y = c.W * xv + c.b;
  std::vector<Eigen::VectorXd> out;
  out.reserve(static_cast<std::size_t>(c.k));
  for (int j = 0; j < c.k; ++j) out.push_back(y.segment(static_cast<Eigen::Index>(j) * c.d_lm, c.d_lm));
  return out;
}

inline std::vector<Eigen::VectorXd> project(const Connector& c, const AudioEmbedding& e) {
  return project(c, e.vector);
}

struct ConnectorGrads {
  Eigen::MatrixXd dW;
  Eigen::VectorXd db;

  static ConnectorGrads zeros_like(const Connector& c) {
    return {Eigen::MatrixXd::Zero(c.W.rows(), c.W.cols()), Eigen::VectorXd::Zero(c.b.size())};
  }
};

/// Chains soft-token gradients back through project(): token j of input x
/// contributes g x^T to block j of dW and g to block j of db.
inline void accumulate_projection_grads(const Connector& c, const std::vector<double>& x,
                                        const std::vector<Eigen::VectorXd>& token_grads,
                                        ConnectorGrads& acc, double weight = 1.0) {
  Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  for (int j = 0; j < c.k; ++j) {
    const Eigen::VectorXd& g = token_grads.at(static_cast<std::size_t>(j));
    acc.dW.middleRows(static_cast<Eigen::Index>(j) * c.d_lm, c.d_lm).noalias() += weight * g * xv.transpose();
    acc.db.segment(static_cast<Eigen::Index>(j) * c.d_lm, c.d_lm) += weight * g;
  }
}

/// First/second moment state of the adaptive update.
struct AdamState {
  Eigen::MatrixXd mW, vW;
  Eigen::VectorXd mb, vb;
  long step = 0;

  static AdamState for_connector(const Connector& c) {
    return {Eigen::MatrixXd::Zero(c.W.rows(), c.W.cols()), Eigen::MatrixXd::Zero(c.W.rows(), c.W.cols()),
            Eigen::VectorXd::Zero(c.b.size()), Eigen::VectorXd::Zero(c.b.size()), 0};
  }
};

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct StepResult {
  Connector connector;
  AdamState state;
};

inline StepResult sgd_step(const Connector& c, const AdamState& s, const ConnectorGrads& g,
                           const AdamHyper& h) {
  if (g.dW.rows() != c.W.rows() || g.dW.cols() != c.W.cols() || g.db.size() != c.b.size())
    throw DimensionError("sgd_step: gradient shape does not match connector '" + c.task_id + "'");
  if (s.mW.rows() != c.W.rows() || s.mW.cols() != c.W.cols() || s.mb.size() != c.b.size())
    throw DimensionError("sgd_step: optimizer state shape does not match connector '" + c.task_id + "'");
  StepResult r{c, s};
  r.state.step = s.step + 1;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(r.state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(r.state.step));
  r.state.mW = h.beta1 * s.mW + (1.0 - h.beta1) * g.dW;
  r.state.vW = h.beta2 * s.vW + (1.0 - h.beta2) * g.dW.cwiseAbs2();
  r.state.mb = h.beta1 * s.mb + (1.0 - h.beta1) * g.db;
  r.state.vb = h.beta2 * s.vb + (1.0 - h.beta2) * g.db.cwiseAbs2();
  if (h.learning_rate != 0.0) {
    r.connector.W.array() -= h.learning_rate * (r.state.mW.array() / bc1) /
                             ((r.state.vW.array() / bc2).sqrt() + h.eps);
    r.connector.b.array() -= h.learning_rate * (r.state.mb.array() / bc1) /
                             ((r.state.vb.array() / bc2).sqrt() + h.eps);
  }
  return r;
}

inline constexpr int kConnectorFormatVersion = 1;

namespace detail {
inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}
inline double parse_hexfloat(const std::string& s, const std::string& where) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw ParseError(where + ": bad number '" + s + "'");
  return v;
}
}  // namespace detail

/// Line 1: JSON header. Line 2: b. Lines 3..: rows of W. Values are C99
/// hex floats so the round trip is bit-exact.
inline void save_connector(const Connector& c, const std::filesystem::path& path) {
  c.validate();
  std::ostringstream out;
  json h{{"format_version", kConnectorFormatVersion}, {"task_id", c.task_id}, {"d_enc", c.d_enc},
         {"d_lm", c.d_lm},
         {"k", c.k}};
  out << h.dump() << '\n';
  for (Eigen::Index i = 0; i < c.b.size(); ++i) out << (i ? " " : "") << detail::hexfloat(c.b[i]);
  out << '\n';
  for (Eigen::Index r = 0; r < c.W.rows(); ++r) {
    for (Eigen::Index j = 0; j < c.W.cols(); ++j) out << (j ? " " : "") << detail::hexfloat(c.W(r, j));
    out << '\n';
  }
  detail::ensure_parent(path);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write connector checkpoint " + path.string());
  f << out.str();
  if (!f) throw IoError("write failed for " + path.string());
}

inline Connector load_connector(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open connector checkpoint " + path.string());
  const std::string where = path.string();
  std::string line;
  if (!std::getline(in, line)) throw ParseError(where + ": empty connector file");
  Connector c;
  try {
    json h = json::parse(line);
    if (h.at("format_version").get<int>() != kConnectorFormatVersion)
      throw ParseError(where + ": unsupported connector format_version " + h.at("format_version").dump());
    c.task_id = h.at("task_id").get<std::string>();
    c.d_enc = h.at("d_enc").get<int>();
    c.d_lm = h.at("d_lm").get<int>();
    c.k = h.at("k").get<int>();
  } catch (const json::exception& e) {
    throw ParseError(where + ": bad connector header: " + e.what());
  }
  if (c.k <= 0 || c.d_enc <= 0 || c.d_lm <= 0) throw ParseError(where + ": nonpositive dimension in header");
  const Eigen::Index rows = static_cast<Eigen::Index>(c.k) * c.d_lm;
  auto read_row = [&](Eigen::Index expected, std::size_t line_no) {
    if (!std::getline(in, line)) throw ParseError(where + ": truncated at line " + std::to_string(line_no));
    auto words = split_words(line);
    if (static_cast<Eigen::Index>(words.size()) != expected)
      throw DimensionError(where + ": line " + std::to_string(line_no) + " has " + std::to_string(words.size()) +
                           " values, expected " + std::to_string(expected));
    std::vector<double> v;
    for (const auto& w : words) v.push_back(detail::parse_hexfloat(w, where + ": line " + std::to_string(line_no)));
    return v;
  };
  auto bias = read_row(rows, 2);
  c.b = Eigen::Map<Eigen::VectorXd>(bias.data(), rows);
  c.W.resize(rows, c.d_enc);
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto row = read_row(c.d_enc, static_cast<std::size_t>(r) + 3);
    for (Eigen::Index j = 0; j < c.d_enc; ++j) c.W(r, j) = row[static_cast<std::size_t>(j)];
  }
  c.validate();
  return c;
}

}  // namespace spkchar
