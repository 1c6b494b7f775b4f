#pragma once

#include "advantage.hpp"
#include "common.hpp"
#include "mdp.hpp"
#include "policy.hpp"
#include "rng.hpp"
#include "rollout.hpp"
#include "tree.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <unordered_map>
#include <vector>

namespace carl {

/**
 * Exact state values and action values under the policy, by backward
 * induction over (state, steps-used) pairs reachable from the start state.
 * Layered generators give every state a unique depth, so the depth argument
 * is usually the state's recorded depth.
 */
class ExactSolution {
 public:
  ExactSolution(const Mdp* env, const PolicyParams* policy, long cap)
      : env_(env), policy_(policy), cap_(cap) {
    if (env->mode != ActionMode::Atomic)
      throw UnsupportedModeError("solve_exact requires Atomic mode");
    value(env->initial_state, 0);  // populate everything reachable
  }

  double value(int state, int depth) const {
    const long long key = pack(state, depth);
    auto it = v_.find(key);
    if (it != v_.end()) return it->second;
    double val;
    if (env_->is_terminal(state)) {
      val = env_->terminal_reward.at(state);
    } else if (depth >= env_->horizon) {
      val = 0.0;  // truncated
    } else {
      const auto probs = policy_->probs(state);
      expanded_ += static_cast<long>(probs.size());
      if (expanded_ > cap_) throw CapacityError("solve_exact: state-action cap exceeded");
      val = 0.0;
      for (int a = 0; a < static_cast<int>(probs.size()); ++a)
        val += probs[a] * q(state, depth, a);
    }
    v_.emplace(key, val);
    return val;
  }

  double q(int state, int depth, int action) const {
    if (env_->is_terminal(state)) throw PreconditionError("q of a terminal state");
    double out = 0.0;
    for (const auto& [next, p] : env_->transitions.at(state).at(action).next) {
      if (p <= 0.0) continue;
      out += p * value(next, depth + 1);
    }
    return out;
  }

  /// True advantage of (state, action): Q(s,a) - V(s).
  double advantage(int state, int depth, int action) const {
    return q(state, depth, action) - value(state, depth);
  }

 private:
  static long long pack(int state, int depth) {
    return static_cast<long long>(depth) * (1LL << 32) + state;
  }

  const Mdp* env_;
  const PolicyParams* policy_;
  long cap_;
  mutable long expanded_ = 0;
  mutable std::unordered_map<long long, double> v_;
};

inline ExactSolution solve_exact(const Mdp& env, const PolicyParams& policy,
                                 long cap = 1000000) {
  return ExactSolution(&env, &policy, cap);
}

/// Expected rollout cost of progressive forking relative to a from-scratch
/// group, under uniformly distributed fork depths: N0/N + 1/2.
inline double expected_rollout_ratio(int n0, int n) {
  if (n < 1) throw ValidationError("expected_rollout_ratio: n must be >= 1");
  if (n0 < 0) throw ValidationError("expected_rollout_ratio: n0 must be >= 0");
  return static_cast<double>(n0) / static_cast<double>(n) + 0.5;
}

struct EfficiencyReport {
  long rollout_action_count = 0;  // |D_roll|: env steps executed (tree edges)
  long update_sample_count = 0;   // |D_upd|: action samples in the update set
  double predicted_ratio = 0.0;   // N0/N + 1/2
  double observed_ratio = 0.0;    // rollout actions / from-scratch cost at equal leaf count
  long lower_bound = 0;           // N + 1
  long upper_bound = 0;           // 2N
  bool bounds_ok = false;
};

/**
 * Cost accounting for one progressive rollout. Initial trajectories pay full
 * length, forks pay only their suffix, which is exactly the tree edge count.
 * The from-scratch reference cost at equal leaf count is
 * (N0 + N) * baseline_length.
 */
inline EfficiencyReport measure_efficiency(const TreeRollout& rollout, long update_sample_count,
                                           int baseline_length) {
  if (rollout.meta.strategy != RolloutStrategy::EntropyGuided &&
      rollout.meta.strategy != RolloutStrategy::Random)
    throw PreconditionError("measure_efficiency expects a progressive rollout");
  const int n0 = rollout.meta.initial_trajectories;
  const int n = rollout.meta.fork_budget;
  EfficiencyReport rep;
  rep.rollout_action_count = rollout.tree.edge_count();
  rep.update_sample_count = update_sample_count;
  rep.predicted_ratio = expected_rollout_ratio(n0, n);
  rep.observed_ratio = static_cast<double>(rep.rollout_action_count) /
                       (static_cast<double>(n0 + n) * baseline_length);
  rep.lower_bound = n + 1;
  rep.upper_bound = 2L * n;
  rep.bounds_ok =
      update_sample_count >= rep.lower_bound && update_sample_count <= rep.upper_bound;
  return rep;
}

// ---------------------------------------------------------------------------
// Statistical bias testing against the exact solver.
// ---------------------------------------------------------------------------

struct BiasTarget {
  int state = 0;
  int action = 0;
  int depth = 0;
};

struct BiasReport {
  EstimatorKind estimator = EstimatorKind::Carl;
  BiasTarget target;
  long trials = 0;
  long hits = 0;
  double hit_rate = 0.0;
  double mean_estimate = 0.0;
  double oracle_advantage = 0.0;
  double mean_deviation = 0.0;
  double stderr_mean = 0.0;
  double z = 0.0;
  bool biased = false;  // |z| >= 3
};

/// Produces the tree batch for one trial (batches have one tree except for
/// batch-level estimators).
using TreeBatchSampler = std::function<std::vector<TrajectoryTree>(Rng)>;

namespace detail {

/**
 * Per-tree estimates of the target action's advantage.
 *
 * The mean-of-children recursion makes every node value an unbiased estimate
 * of its state value, but a raw edge advantage conditioned on the edge's
 * action is attenuated by exactly (1 - 1/n): the child participates in its
 * parent's n-way mean. Sampling here is structure-independent, so scaling a
 * multi-child edge by n/(n-1) removes the attenuation and the corrected mean
 * targets Q(s,a) - V(s) itself. Single-child edges carry no contrast and are
 * skipped, matching the selective-update filter.
 */
inline void carl_edge_estimates(const TrajectoryTree& tree, const BiasTarget& target,
                                std::vector<double>& out) {
  const auto values = estimate_values(tree);
  for (int e = 0; e < tree.edge_count(); ++e) {
    const auto& ed = tree.edge(e);
    if (tree.node(ed.parent).state != target.state) continue;
    if (action_key(ed.action) != target.action) continue;
    const int n = tree.out_degree(ed.parent);
    if (n < 2) continue;
    const double adv = values[ed.child].value - values[ed.parent].value;
    out.push_back(adv * static_cast<double>(n) / static_cast<double>(n - 1));
  }
}

inline void sample_edge_estimates(const std::vector<AdvantageSample>& samples,
                                  const TrajectoryTree& tree, const BiasTarget& target,
                                  std::vector<double>& out) {
  for (const auto& s : samples) {
    if (tree.node(s.parent_node).state != target.state) continue;
    if (action_key(tree.edge(s.edge).action) != target.action) continue;
    out.push_back(s.advantage);
  }
}

}  // namespace detail

/**
 * Runs `trials` independent rollout+estimate cycles and compares the mean
 * collected advantage for the target (state, action) against the exact
 * solver's advantage, with a 3-sigma verdict. Trials whose trees never
 * sample the pair are counted toward the hit rate but contribute nothing.
 */
inline BiasReport bias_test(EstimatorKind estimator, const Mdp& env, const PolicyParams& policy,
                            const BiasTarget& target, long trials, Rng rng,
                            const TreeBatchSampler& sampler) {
  if (trials < 1) throw ValidationError("bias_test: trials must be >= 1");
  const ExactSolution solution = solve_exact(env, policy);
  const double oracle = solution.advantage(target.state, target.depth, target.action);

  std::vector<double> per_trial;
  per_trial.reserve(trials);
  for (long t = 0; t < trials; ++t) {
    const auto batch = sampler(rng.split(static_cast<uint64_t>(t)));
    std::vector<double> estimates;
    if (estimator == EstimatorKind::Carl || estimator == EstimatorKind::CarlInherit) {
      for (const auto& tree : batch) detail::carl_edge_estimates(tree, target, estimates);
    } else if (estimator == EstimatorKind::Arpo) {
      std::vector<const TrajectoryTree*> ptrs;
      for (const auto& tree : batch) ptrs.push_back(&tree);
      const auto stats = arpo_batch_stats(ptrs);
      for (const auto& tree : batch)
        detail::sample_edge_estimates(arpo_advantages(tree, stats), tree, target, estimates);
    } else {
      for (const auto& tree : batch) {
        std::vector<AdvantageSample> samples;
        switch (estimator) {
          case EstimatorKind::Grpo: samples = grpo_tree_advantages(tree); break;
          case EstimatorKind::TreeRl: samples = treerl_advantages(tree); break;
          case EstimatorKind::TreeRpo: samples = treerpo_advantages(tree); break;
          default: throw ValidationError("unsupported estimator in bias_test");
        }
        detail::sample_edge_estimates(samples, tree, target, estimates);
      }
    }
    if (estimates.empty()) continue;
    double m = 0.0;
    for (double v : estimates) m += v;
    per_trial.push_back(m / static_cast<double>(estimates.size()));
  }

  BiasReport rep;
  rep.estimator = estimator;
  rep.target = target;
  rep.trials = trials;
  rep.hits = static_cast<long>(per_trial.size());
  rep.hit_rate = static_cast<double>(rep.hits) / static_cast<double>(trials);
  rep.oracle_advantage = oracle;
  if (per_trial.empty())
    throw InsufficientCoverageError("bias_test: target pair never sampled (hit rate 0)");

  double mean = 0.0;
  for (double v : per_trial) mean += v;
  mean /= static_cast<double>(per_trial.size());
  double var = 0.0;
  for (double v : per_trial) var += (v - mean) * (v - mean);
  const double sd = per_trial.size() > 1
                        ? std::sqrt(var / static_cast<double>(per_trial.size() - 1))
                        : 0.0;
  rep.mean_estimate = mean;
  rep.mean_deviation = mean - oracle;
  rep.stderr_mean = sd / std::sqrt(static_cast<double>(per_trial.size()));
  if (rep.stderr_mean > 0.0) {
    rep.z = rep.mean_deviation / rep.stderr_mean;
  } else {
    rep.z = (rep.mean_deviation == 0.0) ? 0.0 : std::numeric_limits<double>::infinity();
  }
  rep.biased = std::abs(rep.z) >= 3.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Random layered environments (test beds for estimator checks).
// ---------------------------------------------------------------------------

/**
 * Random layered MDP: one start state, 2..3 states per interior layer,
 * terminal layer with uniform rewards, deterministic transitions pointing one
 * layer down. Every episode has length exactly `depth`, so tree structure
 * under schedule- or uniform-driven forking is independent of the sampled
 * actions, which is the regime where the mean-of-children recursion is
 * provably unbiased.
 */
inline Mdp random_layered_mdp(Rng& rng, int depth, int max_width = 3, int max_actions = 3) {
  if (depth < 1) throw ValidationError("depth must be >= 1");
  Mdp env;
  env.mode = ActionMode::Atomic;
  env.horizon = depth;
  std::vector<std::vector<int>> layers(depth + 1);
  int next_id = 0;
  layers[0] = {next_id++};
  for (int d = 1; d <= depth; ++d) {
    const int width = 2 + rng.uniform_int(max_width - 1);
    for (int i = 0; i < width; ++i) layers[d].push_back(next_id++);
  }
  env.state_count = next_id;
  env.initial_state = 0;
  env.transitions.resize(env.state_count);
  env.terminal.assign(env.state_count, false);
  env.terminal_reward.assign(env.state_count, 0.0);
  env.state_depth.assign(env.state_count, 0);
  env.state_tag.assign(env.state_count, "layer");

  for (int d = 0; d <= depth; ++d)
    for (int s : layers[d]) env.state_depth[s] = d;
  for (int d = 0; d < depth; ++d) {
    for (int s : layers[d]) {
      const int actions = 2 + rng.uniform_int(max_actions - 1);
      for (int a = 0; a < actions; ++a) {
        const int target = layers[d + 1][rng.uniform_int(static_cast<int>(layers[d + 1].size()))];
        env.transitions[s].push_back(TransitionRow{{{target, 1.0}}});
      }
    }
  }
  for (int s : layers[depth]) {
    env.terminal[s] = true;
    env.terminal_reward[s] = rng.uniform01();
    env.state_tag[s] = "terminal";
  }
  env.validate();
  return env;
}

/// Random tabular policy matched to an Atomic environment.
inline PolicyParams random_policy(const Mdp& env, Rng& rng, double logit_scale = 0.8) {
  std::vector<std::vector<double>> logits(env.state_count, std::vector<double>{0.0});
  for (int s = 0; s < env.state_count; ++s) {
    if (env.is_terminal(s)) continue;
    logits[s].assign(env.action_key_count(s), 0.0);
    for (double& v : logits[s]) v = rng.uniform_range(-logit_scale, logit_scale);
  }
  return PolicyParams::atomic(std::move(logits));
}

// ---------------------------------------------------------------------------
// Bias witness constructions.
// ---------------------------------------------------------------------------

struct WitnessSetup {
  Mdp env;
  PolicyParams policy;
  BiasTarget target;
  double reward_gap = 1.0;  // R_a - R_b in the branch pair being skewed
};

struct WitnessReport {
  BiasReport bias;
  double mean_share = 0.0;  // E[n_a / (n_a + n_b)] estimate
  double share_baseline = 0.5;
  double reward_gap = 1.0;
  /// Sign predicted by (E[share] - pi) * (R_a - R_b).
  double predicted_sign() const {
    const double v = (mean_share - share_baseline) * reward_gap;
    return (v > 0) - (v < 0);
  }
};

namespace detail {

inline int find_node_with_state(const TrajectoryTree& tree, int state) {
  for (int i = 0; i < tree.node_count(); ++i)
    if (tree.node(i).state == state) return i;
  return -1;
}

}  // namespace detail

/**
 * Descendant-leaf-mean witness. A branch state s sits behind a single-action
 * root edge whose true advantage is exactly 0, and the expansion strategy
 * always forks below s's first a-branch when one exists. Leaf-frequency
 * value estimates then overweight branch a, so any estimator that averages
 * descendant leaves mis-scores the root edge with the sign of
 * (E[n_a/(n_a+n_b)] - pi(a|s)) * (R_a - R_b).
 */
inline WitnessSetup make_treerl_witness() {
  Mdp env;
  env.mode = ActionMode::Atomic;
  env.horizon = 3;
  env.state_count = 7;
  env.initial_state = 0;
  // 0 root {w -> 1 s, x -> 4 mid-terminal}; 1 s {a -> 2, b -> 3};
  // 2 sa {-> 5}; 3 sb {-> 6}; terminals: 4 (0.5), 5 (1.0), 6 (0.0).
  env.transitions.resize(7);
  env.transitions[0] = {TransitionRow{{{1, 1.0}}}, TransitionRow{{{4, 1.0}}}};
  env.transitions[1] = {TransitionRow{{{2, 1.0}}}, TransitionRow{{{3, 1.0}}}};
  env.transitions[2] = {TransitionRow{{{5, 1.0}}}};
  env.transitions[3] = {TransitionRow{{{6, 1.0}}}};
  env.terminal = {false, false, false, false, true, true, true};
  env.terminal_reward = {0, 0, 0, 0, 0.5, 1.0, 0.0};
  env.state_depth = {0, 1, 2, 2, 1, 3, 3};
  env.state_tag = {"root", "branch", "a", "b", "terminal", "terminal", "terminal"};
  env.validate();

  std::vector<std::vector<double>> logits = {{0.0, 0.0}, {0.0, 0.0}, {0.0}, {0.0},
                                             {0.0},      {0.0},      {0.0}};
  WitnessSetup w{std::move(env), PolicyParams::atomic(std::move(logits)),
                 BiasTarget{0, 0, 0}, 1.0};
  return w;
}

/// First-branch-favoring expansion for the witness environments: initial
/// trajectories, then forks aimed below the favored branch when present.
inline TreeBatchSampler treerl_witness_sampler(const WitnessSetup& w) {
  const Mdp* env = &w.env;
  const PolicyParams* policy = &w.policy;
  return [env, policy](Rng rng) {
    detail::ForkEngine engine(*env, *policy, rng.split(0xac7100ULL));
    engine.run_initial(2);
    for (int i = 0; i < 2; ++i) {
      int node = detail::find_node_with_state(engine.tree(), 2);  // below branch a
      if (node < 0) node = detail::find_node_with_state(engine.tree(), 3);
      if (node < 0) node = engine.tree().root();
      engine.extend_to_leaf(node, EdgePhase::Forked);
    }
    std::vector<TrajectoryTree> out;
    out.push_back(std::move(engine).finish(RolloutMeta{RolloutStrategy::Random, 2, 2}).tree);
    return out;
  };
}

/// Share of branch-a leaves under the witness branch state, when measurable.
inline std::optional<double> witness_branch_share(const TrajectoryTree& tree, int branch_state,
                                                  int action_a) {
  const int node = detail::find_node_with_state(tree, branch_state);
  if (node < 0 || tree.out_degree(node) == 0) return std::nullopt;
  const auto counts = descendant_leaf_counts(tree);
  long na = 0, total = 0;
  for (int e : tree.node(node).out_edges) {
    const auto& ed = tree.edge(e);
    total += counts[ed.child];
    if (action_key(ed.action) == action_a) na += counts[ed.child];
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(na) / static_cast<double>(total);
}

/**
 * Shared-prefix witness for batch-normalized trajectory averaging. The target
 * edge's true advantage is 0; continuations after it are forked only when
 * the first continuation hit the high branch, so the traversing-reward mean
 * is skewed with the predictable sign.
 */
inline WitnessSetup make_arpo_witness() {
  Mdp env;
  env.mode = ActionMode::Atomic;
  env.horizon = 2;
  env.state_count = 5;
  env.initial_state = 0;
  // 0 root {a -> 1 s', c -> 2 mid-terminal}; 1 s' {u1 -> 3, u2 -> 4};
  // terminals: 2 (0.5), 3 (1.0), 4 (0.0).
  env.transitions.resize(5);
  env.transitions[0] = {TransitionRow{{{1, 1.0}}}, TransitionRow{{{2, 1.0}}}};
  env.transitions[1] = {TransitionRow{{{3, 1.0}}}, TransitionRow{{{4, 1.0}}}};
  env.terminal = {false, false, true, true, true};
  env.terminal_reward = {0, 0, 0.5, 1.0, 0.0};
  env.state_depth = {0, 1, 1, 2, 2};
  env.state_tag = {"root", "shared", "terminal", "terminal", "terminal"};
  env.validate();

  std::vector<std::vector<double>> logits = {{0.0, 0.0}, {0.0, 0.0}, {0.0}, {0.0}, {0.0}};
  WitnessSetup w{std::move(env), PolicyParams::atomic(std::move(logits)),
                 BiasTarget{0, 0, 0}, 1.0};
  return w;
}

inline TreeBatchSampler arpo_witness_sampler(const WitnessSetup& w, int batch_size = 8) {
  const Mdp* env = &w.env;
  const PolicyParams* policy = &w.policy;
  return [env, policy, batch_size](Rng rng) {
    std::vector<TrajectoryTree> out;
    out.reserve(batch_size);
    for (int i = 0; i < batch_size; ++i) {
      detail::ForkEngine engine(*env, *policy, rng.split(static_cast<uint64_t>(i)));
      engine.run_initial(1);
      const int shared = detail::find_node_with_state(engine.tree(), 1);
      if (shared >= 0) {
        // Fork extra continuations only after a first hit on the high branch.
        const int first_edge = engine.tree().node(shared).out_edges.at(0);
        if (engine.tree().node(engine.tree().edge(first_edge).child).state == 3) {
          engine.extend_to_leaf(shared, EdgePhase::Forked);
          engine.extend_to_leaf(shared, EdgePhase::Forked);
        }
      }
      out.push_back(std::move(engine).finish(RolloutMeta{RolloutStrategy::Random, 1, 0}).tree);
    }
    return out;
  };
}

}  // namespace carl
