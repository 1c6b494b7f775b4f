#pragma once

#include "common.hpp"
#include "mdp.hpp"
#include "policy.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

namespace carl {

enum class CriticalityMethod { Enumerated, Sampled };

/**
 * How strongly the decision at a state steers the final reward: the standard
 * deviation of the outcome when only the first action is resampled from the
 * policy and everything afterwards is greedy (temperature 0).
 */
struct CriticalityRecord {
  int state = 0;
  Action action_taken;
  double criticality = 0.0;
  long sample_count = 0;
  CriticalityMethod method = CriticalityMethod::Sampled;
};

enum class EntropyMethod { Exact, MonteCarlo };

struct EntropyEstimate {
  int state = 0;
  double value = 0.0;  // nats
  long sample_count = 0;
  EntropyMethod method = EntropyMethod::MonteCarlo;
};

namespace detail {

// Expected greedy-continuation outcomes below a state, enumerating stochastic
// transition branches exactly. Appends (probability, reward) pairs.
inline void greedy_outcomes(const Mdp& env, const PolicyParams& policy, int state, int steps_used,
                            double prob, std::vector<std::pair<double, double>>& out) {
  if (env.is_terminal(state)) {
    out.emplace_back(prob, env.terminal_reward.at(state));
    return;
  }
  if (steps_used >= env.horizon) {
    out.emplace_back(prob, 0.0);  // truncated episodes score 0
    return;
  }
  const Action a = policy.greedy_action_at(state);
  const auto& row = env.transitions.at(state).at(action_key(a));
  for (const auto& [next, p] : row.next) {
    if (p <= 0.0) continue;
    greedy_outcomes(env, policy, next, steps_used + 1, prob * p, out);
  }
}

inline double population_std(const std::vector<std::pair<double, double>>& outcomes) {
  double mean = 0.0;
  for (const auto& [p, r] : outcomes) mean += p * r;
  double var = 0.0;
  for (const auto& [p, r] : outcomes) var += p * (r - mean) * (r - mean);
  return std::sqrt(std::max(var, 0.0));
}

// First-action enumeration for token-sequence policies. Walks every token
// string; throws CapacityError once `cap` action strings have been expanded.
inline void enumerate_token_actions(const PolicyParams& policy, int state, int pos, int prev,
                                    double prob, std::vector<int>& prefix,
                                    std::vector<std::pair<double, int>>& actions, long cap) {
  const auto& spec = policy.token_spec();
  const auto probs = policy.probs(policy.token_context(state, pos, prev));
  for (int t = 0; t < spec.vocab_size; ++t) {
    if (probs[t] <= 0.0) continue;
    prefix.push_back(t);
    const double p = prob * probs[t];
    if (t == spec.end_token || pos + 1 == spec.max_len) {
      if (static_cast<long>(actions.size()) >= cap)
        throw CapacityError("token action space exceeds enumeration cap");
      actions.emplace_back(p, prefix.front());
    } else {
      enumerate_token_actions(policy, state, pos + 1, t, p, prefix, actions, cap);
    }
    prefix.pop_back();
  }
}

}  // namespace detail

/**
 * Exact criticality by enumerating the first action under the policy and the
 * greedy continuation after it (population standard deviation). Stochastic
 * transitions are enumerated exactly as well.
 */
inline CriticalityRecord measure_criticality_exhaustive(const Mdp& env, const PolicyParams& policy,
                                                        int state, int steps_used = 0,
                                                        long enumeration_cap = 4096) {
  if (env.is_terminal(state))
    throw PreconditionError("measure_criticality: state is terminal");

  // (probability, transition key) pairs for the first action.
  std::vector<std::pair<double, int>> first;
  if (env.mode == ActionMode::Atomic) {
    const auto probs = policy.probs(state);
    for (int a = 0; a < static_cast<int>(probs.size()); ++a)
      if (probs[a] > 0.0) first.emplace_back(probs[a], a);
  } else {
    std::vector<int> prefix;
    detail::enumerate_token_actions(policy, state, 0, -1, 1.0, prefix, first, enumeration_cap);
  }

  std::vector<std::pair<double, double>> outcomes;
  for (const auto& [p, key] : first) {
    const auto& row = env.transitions.at(state).at(key);
    for (const auto& [next, tp] : row.next) {
      if (tp <= 0.0) continue;
      detail::greedy_outcomes(env, policy, next, steps_used + 1, p * tp, outcomes);
    }
  }

  CriticalityRecord rec;
  rec.state = state;
  rec.action_taken = policy.greedy_action_at(state);
  rec.criticality = detail::population_std(outcomes);
  rec.sample_count = static_cast<long>(first.size());
  rec.method = CriticalityMethod::Enumerated;
  return rec;
}

/// Monte Carlo criticality: n resampled first actions, greedy continuation.
inline CriticalityRecord measure_criticality_sampled(const Mdp& env, const PolicyParams& policy,
                                                     int state, int n, Rng& rng,
                                                     int steps_used = 0) {
  if (env.is_terminal(state))
    throw PreconditionError("measure_criticality: state is terminal");
  if (n < 1) throw PreconditionError("measure_criticality: sample count must be positive");

  std::vector<double> rewards;
  rewards.reserve(n);
  Action last;
  for (int i = 0; i < n; ++i) {
    Action a = policy.sample_action_at(state, rng);
    const int next = env.step(state, action_key(a), rng);
    double reward;
    if (env.is_terminal(next)) {
      reward = env.terminal_reward.at(next);
    } else {
      const Trajectory tail = greedy_rollout_from(env, policy, next, rng, steps_used + 1);
      reward = tail.reward;
    }
    rewards.push_back(reward);
    last = std::move(a);
  }
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;  // plain divisor-n standard deviation

  CriticalityRecord rec;
  rec.state = state;
  rec.action_taken = std::move(last);
  rec.criticality = std::sqrt(std::max(var, 0.0));
  rec.sample_count = n;
  rec.method = CriticalityMethod::Sampled;
  return rec;
}

/**
 * Monte Carlo action entropy: mean of n negative length-normalized action
 * log-probabilities (unbiased for the exact entropy in Atomic mode).
 */
inline EntropyEstimate estimate_action_entropy(const PolicyParams& policy, int state, int n,
                                               Rng& rng) {
  if (n < 1) throw PreconditionError("estimate_action_entropy: n must be >= 1");
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const Action a = policy.sample_action_at(state, rng);
    sum += -a.logprob;
  }
  EntropyEstimate est;
  est.state = state;
  est.value = std::max(sum / n, 0.0);
  est.sample_count = n;
  est.method = EntropyMethod::MonteCarlo;
  return est;
}

/// Closed-form entropy of the action distribution (Atomic mode only).
inline EntropyEstimate exact_entropy(const PolicyParams& policy, int state) {
  EntropyEstimate est;
  est.state = state;
  est.value = policy.exact_state_entropy(state);  // throws UnsupportedModeError on token mode
  est.sample_count = 0;
  est.method = EntropyMethod::Exact;
  return est;
}

namespace detail {

inline std::vector<double> average_ranks(const std::vector<double>& x) {
  const size_t n = x.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;  // average rank, 1-based
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

/// Spearman rank correlation with average ranks for ties.
inline double spearman_rank_correlation(const std::vector<double>& x,
                                        const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw DegenerateInputError("spearman: need >= 2 paired values");
  const auto rx = detail::average_ranks(x);
  const auto ry = detail::average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0)
    throw DegenerateInputError("spearman: a variable has no rank variance");
  return sxy / std::sqrt(sxx * syy);
}

struct CorrelationReport {
  double spearman = 0.0;
  size_t count = 0;
  double threshold = 0.2;
  double low_bin_mean_entropy = 0.0;
  double high_bin_mean_entropy = 0.0;
  size_t low_count = 0;
  size_t high_count = 0;
};

/**
 * Rank correlation between criticality and entropy plus mean entropy inside
 * the low/high criticality bins split at `threshold`.
 */
inline CorrelationReport correlation_report(
    const std::vector<std::pair<CriticalityRecord, EntropyEstimate>>& records,
    double threshold = 0.2) {
  if (records.size() < 2)
    throw DegenerateInputError("correlation_report: need >= 2 records");
  std::vector<double> crit, ent;
  crit.reserve(records.size());
  ent.reserve(records.size());
  for (const auto& [c, e] : records) {
    crit.push_back(c.criticality);
    ent.push_back(e.value);
  }
  const double cmin = *std::min_element(crit.begin(), crit.end());
  const double cmax = *std::max_element(crit.begin(), crit.end());
  if (cmin == cmax)
    throw DegenerateInputError("correlation_report: all criticalities identical");

  CorrelationReport rep;
  rep.spearman = spearman_rank_correlation(ent, crit);
  rep.count = records.size();
  rep.threshold = threshold;
  double lo = 0, hi = 0;
  for (size_t i = 0; i < records.size(); ++i) {
    if (crit[i] > threshold) {
      hi += ent[i];
      ++rep.high_count;
    } else {
      lo += ent[i];
      ++rep.low_count;
    }
  }
  rep.low_bin_mean_entropy = rep.low_count ? lo / rep.low_count : 0.0;
  rep.high_bin_mean_entropy = rep.high_count ? hi / rep.high_count : 0.0;
  return rep;
}

}  // namespace carl
