#pragma once

#include "common.hpp"
#include "policy.hpp"
#include "rng.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace carl {

/// One transition distribution over next states. Rows with a single entry
/// are deterministic and consume no randomness when stepped.
struct TransitionRow {
  std::vector<std::pair<int, double>> next;  // (state, probability)

  bool deterministic() const { return next.size() == 1; }

  int sample(Rng& rng) const {
    if (next.size() == 1) return next[0].first;
    const double u = rng.uniform01();
    double acc = 0.0;
    for (const auto& [s, p] : next) {
      acc += p;
      if (u < acc) return s;
    }
    return next.back().first;
  }
};

/**
 * Finite-horizon MDP with terminal rewards in [0, 1].
 *
 * Terminal states carry a reward and have no transition rows. Episodes that
 * reach `horizon` actions without hitting a terminal state are truncated and
 * scored 0. Transition rows are keyed by action: the atomic action index, or
 * the leading token of a token-sequence action.
 */
struct Mdp {
  int state_count = 0;
  int horizon = 0;  // max actions per episode
  int initial_state = 0;
  ActionMode mode = ActionMode::Atomic;
  TokenSpec tokens;

  std::vector<std::vector<TransitionRow>> transitions;  // [state][action key]
  std::vector<bool> terminal;
  std::vector<double> terminal_reward;  // meaningful where terminal[s]
  std::vector<std::string> state_tag;   // optional labels from the generator
  std::vector<int> state_depth;         // optional; -1 when unknown

  bool is_terminal(int s) const { return terminal.at(s); }

  int action_key_count(int s) const { return static_cast<int>(transitions.at(s).size()); }

  int step(int s, int key, Rng& rng) const {
    const auto& rows = transitions.at(s);
    if (key < 0 || key >= static_cast<int>(rows.size()))
      throw DomainError("transition key out of range");
    return rows[key].sample(rng);
  }

  int depth_of(int s) const {
    if (state_depth.empty()) return -1;
    return state_depth.at(s);
  }

  const std::string& tag_of(int s) const {
    static const std::string empty;
    if (state_tag.empty()) return empty;
    return state_tag.at(s);
  }

  void validate() const {
    if (state_count <= 0) throw ValidationError("state_count must be positive");
    if (horizon <= 0) throw ValidationError("horizon must be positive");
    if (initial_state < 0 || initial_state >= state_count)
      throw ValidationError("initial_state out of range");
    if (static_cast<int>(transitions.size()) != state_count ||
        static_cast<int>(terminal.size()) != state_count ||
        static_cast<int>(terminal_reward.size()) != state_count)
      throw ValidationError("per-state table size mismatch");
    for (int s = 0; s < state_count; ++s) {
      if (terminal[s]) {
        if (!transitions[s].empty())
          throw ValidationError("terminal state has transition rows");
        if (terminal_reward[s] < 0.0 || terminal_reward[s] > 1.0)
          throw ValidationError("terminal reward outside [0,1]");
        continue;
      }
      if (transitions[s].empty())
        throw ValidationError("non-terminal state has no actions");
      if (mode == ActionMode::TokenSequence &&
          static_cast<int>(transitions[s].size()) != tokens.vocab_size)
        throw ValidationError("token-mode state must have one row per leading token");
      for (const auto& row : transitions[s]) {
        if (row.next.empty()) throw ValidationError("empty transition row");
        double sum = 0.0;
        for (const auto& [t, p] : row.next) {
          if (t < 0 || t >= state_count) throw ValidationError("transition target out of range");
          if (p < 0.0) throw ValidationError("negative transition probability");
          sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-12)
          throw ValidationError("transition row does not sum to 1");
      }
    }
  }
};

/// Transition key for an action: atomic index, or leading token.
inline int action_key(const Action& a) {
  if (a.tokens.empty()) throw DomainError("action has no tokens");
  return a.tokens[0];
}

/// Sample an action from the policy at a non-terminal state.
inline Action sample_action(const Mdp& env, const PolicyParams& policy, int state, Rng& rng) {
  if (env.is_terminal(state))
    throw PreconditionError("sample_action: state is terminal");
  return policy.sample_action_at(state, rng);
}

/// Length-normalized log-probability of an action at a state.
inline double sequence_logprob(const PolicyParams& policy, int state, const Action& action) {
  return policy.action_logprob(state, action);
}

struct TrajectoryStep {
  int state = 0;
  Action action;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  int final_state = 0;
  double reward = 0.0;
  bool truncated = false;  // hit the horizon without reaching a terminal state
};

/**
 * Roll the policy forward from `start` until a terminal state or the horizon.
 * `steps_used` counts actions already taken before `start` so suffix rollouts
 * honor the episode budget. Truncated episodes score 0.
 */
inline Trajectory rollout_from(const Mdp& env, const PolicyParams& policy, int start, Rng& rng,
                               int steps_used = 0) {
  Trajectory traj;
  int s = start;
  int t = steps_used;
  while (!env.is_terminal(s)) {
    if (t >= env.horizon) {
      traj.final_state = s;
      traj.reward = 0.0;
      traj.truncated = true;
      return traj;
    }
    Action a = policy.sample_action_at(s, rng);
    const int next = env.step(s, action_key(a), rng);
    traj.steps.push_back({s, std::move(a)});
    s = next;
    ++t;
  }
  traj.final_state = s;
  traj.reward = env.terminal_reward.at(s);
  traj.truncated = false;
  return traj;
}

/// Greedy (argmax) rollout; deterministic whenever transitions on the path are.
inline Trajectory greedy_rollout_from(const Mdp& env, const PolicyParams& policy, int start,
                                      Rng& rng, int steps_used = 0) {
  Trajectory traj;
  int s = start;
  int t = steps_used;
  while (!env.is_terminal(s)) {
    if (t >= env.horizon) {
      traj.final_state = s;
      traj.reward = 0.0;
      traj.truncated = true;
      return traj;
    }
    Action a = policy.greedy_action_at(s);
    const int next = env.step(s, action_key(a), rng);
    traj.steps.push_back({s, std::move(a)});
    s = next;
    ++t;
  }
  traj.final_state = s;
  traj.reward = env.terminal_reward.at(s);
  return traj;
}

/// Check that a policy's table shape matches an environment.
inline void validate_policy_for_env(const Mdp& env, const PolicyParams& policy) {
  if (policy.mode() != env.mode) throw ValidationError("policy/env action mode mismatch");
  if (policy.state_count() < env.state_count)
    throw ValidationError("policy covers fewer states than the environment");
  if (env.mode == ActionMode::Atomic) {
    for (int s = 0; s < env.state_count; ++s) {
      if (env.is_terminal(s)) continue;
      if (static_cast<int>(policy.row(s).size()) != env.action_key_count(s))
        throw ValidationError("policy row size differs from action count at state " +
                              std::to_string(s));
    }
  } else {
    if (policy.token_spec().vocab_size != env.tokens.vocab_size ||
        policy.token_spec().max_len != env.tokens.max_len ||
        policy.token_spec().end_token != env.tokens.end_token)
      throw ValidationError("policy/env token spec mismatch");
  }
}

}  // namespace carl
