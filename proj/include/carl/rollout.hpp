#pragma once

#include "common.hpp"
#include "criticality.hpp"
#include "mdp.hpp"
#include "policy.hpp"
#include "rng.hpp"
#include "tree.hpp"

#include <cmath>
#include <functional>
#include <unordered_map>
#include <limits>
#include <optional>
#include <vector>

namespace carl {

/**
 * Per-node exploration record. `entropy` is the running mean of the entropy
 * observations seen at this node (one observation per visit: the sampled
 * action's negative length-normalized log-probability) and `count` is the
 * number of children sampled from it so far. Fork selection minimizes the
 * action density count / entropy, which is the same rule as maximizing
 * entropy / count.
 */
struct StateBufferEntry {
  int node = 0;
  int state = 0;
  int depth = 0;
  double entropy = 0.0;
  int count = 0;
};

struct ArpoParams {
  double alpha = 0.2;
  double beta = 0.6;
  double tau_threshold = 0.5;
  int branch_count = 1;  // Z
  // Normalizer for the entropy delta; identity clamped to [0,1] by default.
  std::function<double(double)> normalize = [](double dh) {
    return std::min(std::max(dh, 0.0), 1.0);
  };
};

struct RolloutBudget {
  RolloutStrategy strategy = RolloutStrategy::EntropyGuided;
  int initial_trajectories = 1;  // N0
  int fork_budget = 0;           // N
  int group_size = 0;            // FromScratch
  int leaf_budget = 0;           // TreeRpoPartial
  ArpoParams arpo;

  void validate() const {
    switch (strategy) {
      case RolloutStrategy::EntropyGuided:
      case RolloutStrategy::Random:
        if (initial_trajectories < 1)
          throw ValidationError("initial_trajectories must be >= 1 (the fork buffer would start empty)");
        if (fork_budget < 1) throw ValidationError("fork_budget must be >= 1");
        break;
      case RolloutStrategy::FromScratch:
        if (group_size < 2) throw ValidationError("group_size must be >= 2");
        break;
      case RolloutStrategy::TreeRpoPartial:
        if (leaf_budget < 2) throw ValidationError("leaf_budget must be >= 2");
        break;
      case RolloutStrategy::ArpoBranching:
        if (arpo.alpha < 0 || arpo.beta < 0)
          throw ValidationError("arpo alpha/beta must be nonnegative");
        if (arpo.branch_count < 1) throw ValidationError("arpo branch_count must be >= 1");
        break;
    }
  }
};

struct RolloutMeta {
  RolloutStrategy strategy = RolloutStrategy::EntropyGuided;
  int initial_trajectories = 0;
  int fork_budget = 0;
};

struct TreeRollout {
  TrajectoryTree tree;
  std::vector<StateBufferEntry> buffer;  // final buffer state, for inspection
  std::vector<int> fork_nodes;           // fork target per phase-2 step
  std::vector<int> fork_depths;
  RolloutMeta meta;
};

/// Lowest action density (count / entropy); ties go to the shallowest node,
/// then the lowest node id. Node ids grow in creation order, so this is a
/// deterministic replay rule.
inline int select_min_density(const std::vector<StateBufferEntry>& buffer) {
  if (buffer.empty()) throw StructuralError("fork selection on an empty buffer");
  int best = -1;
  double best_density = std::numeric_limits<double>::infinity();
  for (int i = 0; i < static_cast<int>(buffer.size()); ++i) {
    const auto& e = buffer[i];
    const double density = (e.entropy > 0.0)
                               ? static_cast<double>(e.count) / e.entropy
                               : std::numeric_limits<double>::infinity();
    bool better = density < best_density;
    if (!better && density == best_density && best >= 0) {
      better = e.depth < buffer[best].depth ||
               (e.depth == buffer[best].depth && e.node < buffer[best].node);
    }
    if (best < 0 || better) {
      best = i;
      best_density = density;
    }
  }
  return best;
}

inline int select_uniform(const std::vector<StateBufferEntry>& buffer, Rng& rng) {
  if (buffer.empty()) throw StructuralError("fork selection on an empty buffer");
  return rng.uniform_int(static_cast<int>(buffer.size()));
}

namespace detail {

/**
 * Shared engine for tree construction. Keeps the visit buffer in sync with
 * the tree: a node enters the buffer the first time an action is taken from
 * it, its count increments per additional child, and its entropy mean folds
 * in one observation per visit. Terminal nodes and nodes at the horizon
 * never enter the buffer (no action can follow them).
 */
class ForkEngine {
 public:
  ForkEngine(const Mdp& env, const PolicyParams& policy, Rng sample_rng)
      : env_(env), policy_(policy), sample_rng_(std::move(sample_rng)), tree_(env.initial_state) {}

  // Extends the tree from `node` to a leaf; records buffer entries along the
  // way. The first created edge gets `first_phase`; the rest of the suffix is
  // tagged the same way (phase-1 calls pass Initial, forks pass Forked).
  void extend_to_leaf(int node, EdgePhase phase) {
    int cur = node;
    while (true) {
      const int state = tree_.node(cur).state;
      if (env_.is_terminal(state)) {
        tree_.set_leaf_reward(cur, env_.terminal_reward.at(state), false);
        return;
      }
      if (tree_.node(cur).depth >= env_.horizon) {
        tree_.set_leaf_reward(cur, 0.0, true);
        return;
      }
      Action a = policy_.sample_action_at(state, sample_rng_);
      record_visit(cur, -a.logprob);
      const int next_state = env_.step(state, action_key(a), sample_rng_);
      cur = tree_.add_child(cur, std::move(a), next_state, phase);
    }
  }

  void run_initial(int n0) {
    for (int i = 0; i < n0; ++i) extend_to_leaf(tree_.root(), EdgePhase::Initial);
  }

  // One fork step: pick a buffered node, sample a fresh action there, and
  // re-simulate the suffix. The shared prefix is reused, not recomputed.
  void fork_once(const std::function<int(const std::vector<StateBufferEntry>&)>& select) {
    if (buffer_.empty())
      throw StructuralError("no forkable states recorded (all initial trajectories were empty)");
    const int idx = select(buffer_);
    const int node = buffer_.at(idx).node;
    fork_nodes_.push_back(node);
    fork_depths_.push_back(tree_.node(node).depth);
    extend_to_leaf(node, EdgePhase::Forked);
  }

  TreeRollout finish(RolloutMeta meta) && {
    tree_.validate();
    return TreeRollout{std::move(tree_), std::move(buffer_), std::move(fork_nodes_),
                       std::move(fork_depths_), meta};
  }

  const std::vector<StateBufferEntry>& buffer() const { return buffer_; }
  TrajectoryTree& tree() { return tree_; }

  void record_visit(int node, double entropy_obs) {
    auto it = index_.find(node);
    if (it == index_.end()) {
      index_[node] = static_cast<int>(buffer_.size());
      buffer_.push_back(StateBufferEntry{node, tree_.node(node).state, tree_.node(node).depth,
                                         entropy_obs, 1});
      return;
    }
    auto& e = buffer_[it->second];
    e.count += 1;
    e.entropy += (entropy_obs - e.entropy) / static_cast<double>(e.count);
  }

 private:
  const Mdp& env_;
  const PolicyParams& policy_;
  Rng sample_rng_;
  TrajectoryTree tree_;
  std::vector<StateBufferEntry> buffer_;
  std::unordered_map<int, int> index_;
  std::vector<int> fork_nodes_;
  std::vector<int> fork_depths_;
};

}  // namespace detail

/**
 * Entropy-guided progressive forking. Phase 1 rolls `initial_trajectories`
 * root-to-leaf episodes and seeds the buffer; phase 2 repeats `fork_budget`
 * times: fork the buffered node with the lowest action density, fold the
 * fresh action's entropy observation into its running mean, and buffer the
 * newly visited states. Leaf count is always N0 + N.
 */
inline TreeRollout progressive_rollout(const Mdp& env, const PolicyParams& policy,
                                       const RolloutBudget& budget, Rng rng) {
  RolloutBudget b = budget;
  b.strategy = RolloutStrategy::EntropyGuided;
  b.validate();
  detail::ForkEngine engine(env, policy, rng.split(0xac7100ULL));
  engine.run_initial(b.initial_trajectories);
  for (int i = 0; i < b.fork_budget; ++i)
    engine.fork_once([](const std::vector<StateBufferEntry>& buf) {
      return select_min_density(buf);
    });
  return std::move(engine).finish(
      RolloutMeta{RolloutStrategy::EntropyGuided, b.initial_trajectories, b.fork_budget});
}

/// Ablation: identical bookkeeping, fork targets drawn uniformly instead.
inline TreeRollout random_fork_rollout(const Mdp& env, const PolicyParams& policy,
                                       const RolloutBudget& budget, Rng rng) {
  RolloutBudget b = budget;
  b.strategy = RolloutStrategy::Random;
  b.validate();
  Rng select_rng = rng.split(0x5e1ec7ULL);
  detail::ForkEngine engine(env, policy, rng.split(0xac7100ULL));
  engine.run_initial(b.initial_trajectories);
  for (int i = 0; i < b.fork_budget; ++i)
    engine.fork_once([&select_rng](const std::vector<StateBufferEntry>& buf) {
      return select_uniform(buf, select_rng);
    });
  return std::move(engine).finish(
      RolloutMeta{RolloutStrategy::Random, b.initial_trajectories, b.fork_budget});
}

/**
 * Baseline group rollout: `group_size` independent episodes sharing only the
 * root node. Trajectory i consumes the stream rng.split(i), so the leaves
 * replay exactly as `group_size` separate rollout_from calls.
 */
inline TreeRollout from_scratch_rollout(const Mdp& env, const PolicyParams& policy, int group_size,
                                        Rng rng) {
  if (group_size < 2) throw ValidationError("group_size must be >= 2");
  TrajectoryTree tree(env.initial_state);
  for (int i = 0; i < group_size; ++i) {
    Rng traj_rng = rng.split(static_cast<uint64_t>(i));
    const Trajectory traj = rollout_from(env, policy, env.initial_state, traj_rng);
    int cur = tree.root();
    for (size_t s = 0; s < traj.steps.size(); ++s) {
      const int next_state = (s + 1 < traj.steps.size()) ? traj.steps[s + 1].state
                                                         : traj.final_state;
      cur = tree.add_child(cur, traj.steps[s].action, next_state, EdgePhase::Initial);
    }
    tree.set_leaf_reward(cur, traj.reward, traj.truncated);
  }
  tree.validate();
  TreeRollout out{std::move(tree), {}, {}, {}, RolloutMeta{RolloutStrategy::FromScratch, group_size, 0}};
  return out;
}

/**
 * Partial n-ary expansion: one seed trajectory, then fork uniformly chosen
 * tree states until the leaf count reaches `leaf_budget`. Every fork adds
 * exactly one leaf; sibling groups are the children lists of the tree.
 */
inline TreeRollout treerpo_partial_rollout(const Mdp& env, const PolicyParams& policy,
                                           int leaf_budget, Rng rng) {
  if (leaf_budget < 2) throw ValidationError("leaf_budget must be >= 2");
  Rng select_rng = rng.split(0x5e1ec7ULL);
  detail::ForkEngine engine(env, policy, rng.split(0xac7100ULL));
  engine.run_initial(1);
  for (int i = 1; i < leaf_budget; ++i)
    engine.fork_once([&select_rng](const std::vector<StateBufferEntry>& buf) {
      return select_uniform(buf, select_rng);
    });
  return std::move(engine).finish(RolloutMeta{RolloutStrategy::TreeRpoPartial, 1, leaf_budget - 1});
}

/**
 * Entropy-delta branching along a main trajectory: after each step, if
 * alpha + beta * Normalize(H_t - H_initial) exceeds tau_threshold, spawn
 * `branch_count` extra suffix rollouts from the current node. Branch checks
 * run along the main path only, so growth stays linear in the horizon.
 */
inline TreeRollout arpo_branch_rollout(const Mdp& env, const PolicyParams& policy,
                                       const ArpoParams& params, Rng rng) {
  RolloutBudget b;
  b.strategy = RolloutStrategy::ArpoBranching;
  b.arpo = params;
  b.validate();

  auto entropy_at = [&](int state) {
    if (policy.mode() == ActionMode::Atomic) return policy.exact_state_entropy(state);
    // One-sample estimate in token mode; cheap and mode-agnostic.
    Rng probe = rng.split(0x9b5a11ULL ^ static_cast<uint64_t>(state));
    return estimate_action_entropy(policy, state, 1, probe).value;
  };

  detail::ForkEngine engine(env, policy, rng.split(0xac7100ULL));
  int branches = 0;

  // Main trajectory, step by step, with a branch check at each reached state.
  const double h_initial = env.is_terminal(env.initial_state) ? 0.0 : entropy_at(env.initial_state);
  int cur = engine.tree().root();
  {
    // Walk manually so the branch rule can fire mid-trajectory.
    Rng walk_rng = rng.split(0x3a11edULL);
    while (true) {
      const int state = engine.tree().node(cur).state;
      if (env.is_terminal(state)) {
        engine.tree().set_leaf_reward(cur, env.terminal_reward.at(state), false);
        break;
      }
      if (engine.tree().node(cur).depth >= env.horizon) {
        engine.tree().set_leaf_reward(cur, 0.0, true);
        break;
      }
      if (engine.tree().node(cur).depth > 0) {
        const double dh = params.normalize(entropy_at(state) - h_initial);
        const double p = params.alpha + params.beta * dh;
        if (p > params.tau_threshold) {
          for (int z = 0; z < params.branch_count; ++z) {
            engine.extend_to_leaf(cur, EdgePhase::Forked);
            ++branches;
          }
        }
      }
      Action a = policy.sample_action_at(state, walk_rng);
      engine.record_visit(cur, -a.logprob);
      const int next_state = env.step(state, action_key(a), walk_rng);
      cur = engine.tree().add_child(cur, std::move(a), next_state, EdgePhase::Initial);
    }
  }
  return std::move(engine).finish(RolloutMeta{RolloutStrategy::ArpoBranching, 1, branches});
}

/// Dispatch on the budget's strategy tag.
inline TreeRollout run_rollout(const Mdp& env, const PolicyParams& policy,
                               const RolloutBudget& budget, Rng rng) {
  budget.validate();
  switch (budget.strategy) {
    case RolloutStrategy::EntropyGuided: return progressive_rollout(env, policy, budget, rng);
    case RolloutStrategy::Random: return random_fork_rollout(env, policy, budget, rng);
    case RolloutStrategy::FromScratch:
      return from_scratch_rollout(env, policy, budget.group_size, rng);
    case RolloutStrategy::TreeRpoPartial:
      return treerpo_partial_rollout(env, policy, budget.leaf_budget, rng);
    case RolloutStrategy::ArpoBranching:
      return arpo_branch_rollout(env, policy, budget.arpo, rng);
  }
  throw ValidationError("unknown rollout strategy");
}

}  // namespace carl
