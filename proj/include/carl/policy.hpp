#pragma once

#include "common.hpp"
#include "rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace carl {

enum class ActionMode { Atomic, TokenSequence };

/// Token-sequence action space: actions are token strings that end with
/// end_token or run to max_len. In Atomic mode an action is one token.
struct TokenSpec {
  int vocab_size = 0;
  int max_len = 0;
  int end_token = 0;
};

/**
 * One agent decision. `tokens` has length 1 in Atomic mode. `logprob` is the
 * length-normalized log-probability of the whole sequence under the policy
 * that sampled it: (1/|Y|) * sum_j log pi(y_j | y_<j, s). Always <= 0.
 */
struct Action {
  std::vector<int> tokens;
  double logprob = 0.0;
};

/** Gradient with the same shape as a policy's logit table. */
struct PolicyGradient {
  std::vector<std::vector<double>> rows;

  void add_scaled(const PolicyGradient& other, double scale) {
    for (size_t r = 0; r < rows.size(); ++r)
      for (size_t k = 0; k < rows[r].size(); ++k) rows[r][k] += scale * other.rows[r][k];
  }
};

/**
 * Tabular softmax policy, the single mutable training object.
 *
 * Atomic mode keys one logit row per state. TokenSequence mode keys one row
 * per (state, position, previous token) so token count stays linear; the
 * "no previous token" slot at position 0 is prev = -1.
 *
 * temperature > 0 samples softmax(logits / temperature); temperature == 0 is
 * the deterministic argmax with ties broken to the lowest index.
 */
class PolicyParams {
 public:
  static PolicyParams atomic(std::vector<std::vector<double>> logits, double temperature = 1.0) {
    PolicyParams p;
    p.mode_ = ActionMode::Atomic;
    p.temperature_ = temperature;
    p.rows_ = std::move(logits);
    p.state_count_ = static_cast<int>(p.rows_.size());
    p.validate();
    return p;
  }

  static PolicyParams token_sequence(int state_count, TokenSpec spec,
                                     std::vector<std::vector<double>> rows,
                                     double temperature = 1.0) {
    PolicyParams p;
    p.mode_ = ActionMode::TokenSequence;
    p.temperature_ = temperature;
    p.state_count_ = state_count;
    p.tokens_ = spec;
    const size_t expected =
        static_cast<size_t>(state_count) * spec.max_len * (spec.vocab_size + 1);
    if (rows.size() != expected)
      throw ValidationError("token policy: expected " + std::to_string(expected) + " rows");
    p.rows_ = std::move(rows);
    p.validate();
    return p;
  }

  /// Uniform-logit token policy, handy for tests.
  static PolicyParams token_uniform(int state_count, TokenSpec spec, double temperature = 1.0) {
    const size_t n = static_cast<size_t>(state_count) * spec.max_len * (spec.vocab_size + 1);
    std::vector<std::vector<double>> rows(n, std::vector<double>(spec.vocab_size, 0.0));
    return token_sequence(state_count, spec, std::move(rows), temperature);
  }

  ActionMode mode() const { return mode_; }
  double temperature() const { return temperature_; }
  void set_temperature(double t) {
    if (t < 0) throw ValidationError("temperature must be nonnegative");
    temperature_ = t;
  }
  int state_count() const { return state_count_; }
  const TokenSpec& token_spec() const { return tokens_; }

  int context_count() const { return static_cast<int>(rows_.size()); }
  std::vector<double>& row(int ctx) { return rows_.at(ctx); }
  const std::vector<double>& row(int ctx) const { return rows_.at(ctx); }

  int atomic_context(int state) const { return state; }
  int token_context(int state, int pos, int prev) const {
    return (state * tokens_.max_len + pos) * (tokens_.vocab_size + 1) + (prev + 1);
  }

  /// Acting distribution at a context: softmax(z / T), or one-hot argmax at T = 0.
  std::vector<double> probs(int ctx) const {
    const auto& z = rows_.at(ctx);
    std::vector<double> p(z.size(), 0.0);
    if (temperature_ == 0.0) {
      p[argmax(ctx)] = 1.0;
      return p;
    }
    double zmax = -std::numeric_limits<double>::infinity();
    for (double v : z) zmax = std::max(zmax, v / temperature_);
    double sum = 0.0;
    for (size_t k = 0; k < z.size(); ++k) {
      p[k] = std::exp(z[k] / temperature_ - zmax);
      sum += p[k];
    }
    for (double& v : p) v /= sum;
    return p;
  }

  double logprob(int ctx, int k) const {
    const auto& z = rows_.at(ctx);
    if (k < 0 || k >= static_cast<int>(z.size()))
      throw DomainError("logprob: choice index out of range");
    if (temperature_ == 0.0)
      return k == argmax(ctx) ? 0.0 : -std::numeric_limits<double>::infinity();
    double zmax = -std::numeric_limits<double>::infinity();
    for (double v : z) zmax = std::max(zmax, v / temperature_);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v / temperature_ - zmax);
    return z[k] / temperature_ - zmax - std::log(sum);
  }

  int argmax(int ctx) const {
    const auto& z = rows_.at(ctx);
    int best = 0;
    for (int k = 1; k < static_cast<int>(z.size()); ++k)
      if (z[k] > z[best]) best = k;  // strict: ties keep the lowest index
    return best;
  }

  /// Sample one choice at a context. Temperature 0 consumes no randomness.
  int sample_choice(int ctx, Rng& rng) const {
    if (temperature_ == 0.0) return argmax(ctx);
    return rng.categorical(probs(ctx));
  }

  /// Sample a full action at a state and populate its normalized logprob.
  Action sample_action_at(int state, Rng& rng) const {
    Action a;
    if (mode_ == ActionMode::Atomic) {
      const int ctx = atomic_context(state);
      const int k = sample_choice(ctx, rng);
      a.tokens = {k};
      a.logprob = logprob(ctx, k);
      return a;
    }
    double lpsum = 0.0;
    int prev = -1;
    for (int pos = 0; pos < tokens_.max_len; ++pos) {
      const int ctx = token_context(state, pos, prev);
      const int t = sample_choice(ctx, rng);
      lpsum += logprob(ctx, t);
      a.tokens.push_back(t);
      if (t == tokens_.end_token) break;
      prev = t;
    }
    a.logprob = lpsum / static_cast<double>(a.tokens.size());
    return a;
  }

  /// Deterministic argmax action at a state (greedy continuation rule).
  Action greedy_action_at(int state) const {
    Action a;
    if (mode_ == ActionMode::Atomic) {
      const int ctx = atomic_context(state);
      const int k = argmax(ctx);
      a.tokens = {k};
      a.logprob = logprob(ctx, k);
      return a;
    }
    double lpsum = 0.0;
    int prev = -1;
    for (int pos = 0; pos < tokens_.max_len; ++pos) {
      const int ctx = token_context(state, pos, prev);
      const int t = argmax(ctx);
      lpsum += logprob(ctx, t);
      a.tokens.push_back(t);
      if (t == tokens_.end_token) break;
      prev = t;
    }
    a.logprob = lpsum / static_cast<double>(a.tokens.size());
    return a;
  }

  /// Length-normalized sequence log-probability, recomputed token by token.
  double action_logprob(int state, const Action& action) const {
    if (action.tokens.empty()) throw DomainError("action has no tokens");
    if (mode_ == ActionMode::Atomic) {
      if (action.tokens.size() != 1) throw DomainError("atomic action must have one token");
      return logprob(atomic_context(state), action.tokens[0]);
    }
    double lpsum = 0.0;
    int prev = -1;
    for (size_t pos = 0; pos < action.tokens.size(); ++pos) {
      const int t = action.tokens[pos];
      if (t < 0 || t >= tokens_.vocab_size) throw DomainError("token id out of vocabulary");
      lpsum += logprob(token_context(state, static_cast<int>(pos), prev), t);
      prev = t;
    }
    return lpsum / static_cast<double>(action.tokens.size());
  }

  /// Exact entropy of the acting distribution at a state (Atomic only), nats.
  double exact_state_entropy(int state) const {
    if (mode_ != ActionMode::Atomic)
      throw UnsupportedModeError("exact entropy requires Atomic mode");
    const auto p = probs(atomic_context(state));
    double h = 0.0;
    for (double v : p)
      if (v > 0.0) h -= v * std::log(v);
    return std::max(h, 0.0);
  }

  PolicyGradient zero_gradient() const {
    PolicyGradient g;
    g.rows.reserve(rows_.size());
    for (const auto& r : rows_) g.rows.emplace_back(r.size(), 0.0);
    return g;
  }

  void apply_gradient(const PolicyGradient& g, double step) {
    if (g.rows.size() != rows_.size()) throw ValidationError("gradient shape mismatch");
    for (size_t r = 0; r < rows_.size(); ++r)
      for (size_t k = 0; k < rows_[r].size(); ++k) rows_[r][k] += step * g.rows[r][k];
  }

  double mean_abs_logit() const {
    double sum = 0.0;
    size_t count = 0;
    for (const auto& r : rows_) {
      for (double v : r) sum += std::abs(v);
      count += r.size();
    }
    return count ? sum / static_cast<double>(count) : 0.0;
  }

  void validate() const {
    if (temperature_ < 0) throw ValidationError("temperature must be nonnegative");
    for (const auto& r : rows_) {
      if (r.empty()) throw ValidationError("empty logit row");
      for (double v : r)
        if (!std::isfinite(v)) throw ValidationError("non-finite logit");
    }
  }

  void save(std::ostream& out) const {
    out << "policy v1\n";
    out << "mode " << (mode_ == ActionMode::Atomic ? "atomic" : "token") << "\n";
    out << "temperature " << format_double_(temperature_) << "\n";
    out << "states " << state_count_ << "\n";
    if (mode_ == ActionMode::TokenSequence)
      out << "tokens " << tokens_.vocab_size << " " << tokens_.max_len << " "
          << tokens_.end_token << "\n";
    out << "rows " << rows_.size() << "\n";
    for (const auto& r : rows_) {
      out << "row";
      for (double v : r) out << " " << format_double_(v);
      out << "\n";
    }
  }

  static PolicyParams load(std::istream& in) {
    std::string tag, word;
    in >> tag >> word;
    if (tag != "policy" || word != "v1") throw IoError("bad policy header");
    PolicyParams p;
    in >> tag >> word;
    if (tag != "mode") throw IoError("bad policy mode line");
    p.mode_ = (word == "atomic") ? ActionMode::Atomic : ActionMode::TokenSequence;
    in >> tag >> p.temperature_;
    in >> tag >> p.state_count_;
    if (p.mode_ == ActionMode::TokenSequence) {
      in >> tag >> p.tokens_.vocab_size >> p.tokens_.max_len >> p.tokens_.end_token;
    }
    size_t nrows = 0;
    in >> tag >> nrows;
    p.rows_.resize(nrows);
    std::string line;
    std::getline(in, line);
    for (size_t r = 0; r < nrows; ++r) {
      std::getline(in, line);
      std::istringstream ls(line);
      ls >> tag;
      double v;
      while (ls >> v) p.rows_[r].push_back(v);
    }
    p.validate();
    return p;
  }

 private:
  static std::string format_double_(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
  }

  ActionMode mode_ = ActionMode::Atomic;
  double temperature_ = 1.0;
  int state_count_ = 0;
  TokenSpec tokens_;
  std::vector<std::vector<double>> rows_;
};

}  // namespace carl
