#pragma once

#include "advantage.hpp"
#include "common.hpp"
#include "criticality.hpp"
#include "mdp.hpp"
#include "policy.hpp"
#include "rng.hpp"
#include "rollout.hpp"
#include "tree.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

namespace carl {

enum class UpdateMode { HighCriticalityOnly, All, AllWithInheritance, OutcomeReward };

inline std::string update_mode_name(UpdateMode m) {
  switch (m) {
    case UpdateMode::HighCriticalityOnly: return "high_criticality";
    case UpdateMode::All: return "all";
    case UpdateMode::AllWithInheritance: return "all_with_inheritance";
    case UpdateMode::OutcomeReward: return "outcome_reward";
  }
  throw ValidationError("unknown update mode");
}

inline UpdateMode update_mode_from_name(const std::string& s) {
  if (s == "high_criticality") return UpdateMode::HighCriticalityOnly;
  if (s == "all") return UpdateMode::All;
  if (s == "all_with_inheritance") return UpdateMode::AllWithInheritance;
  if (s == "outcome_reward") return UpdateMode::OutcomeReward;
  throw ValidationError("unknown update mode: " + s);
}

/// One token-level training sample. Every token of an action carries the
/// action's advantage; old_logprob is recorded before any update.
struct TokenSample {
  int context = 0;
  int token = 0;
  double advantage = 0.0;
  double old_logprob = 0.0;
};

struct UpdateBatch {
  std::vector<TokenSample> tokens;
  long action_samples = 0;  // action-level count, the |D_upd| that gets logged
  double clip_epsilon = 0.2;
  double step_size = 0.1;
};

namespace detail {

inline void expand_action(const PolicyParams& policy, int state, const Action& action,
                          double advantage, UpdateBatch& batch) {
  if (policy.mode() == ActionMode::Atomic) {
    const int ctx = policy.atomic_context(state);
    const int tok = action.tokens.at(0);
    batch.tokens.push_back(TokenSample{ctx, tok, advantage, policy.logprob(ctx, tok)});
    return;
  }
  int prev = -1;
  for (size_t pos = 0; pos < action.tokens.size(); ++pos) {
    const int tok = action.tokens[pos];
    const int ctx = policy.token_context(state, static_cast<int>(pos), prev);
    batch.tokens.push_back(TokenSample{ctx, tok, advantage, policy.logprob(ctx, tok)});
    prev = tok;
  }
}

}  // namespace detail

/**
 * Build the training batch from one rollout's advantage samples.
 *
 * HighCriticalityOnly keeps edges whose parent has more than one child; All
 * keeps everything (use with advantage samples of either flavor);
 * AllWithInheritance is All over inheritance-style samples; OutcomeReward
 * keeps the high-criticality edges but replaces each advantage with the
 * root-to-leaf outcome reward, once per chain the edge lies on.
 *
 * An empty result is a skip signal for the iteration, not an error.
 */
inline UpdateBatch build_update_set(const TrajectoryTree& tree,
                                    const std::vector<AdvantageSample>& samples, UpdateMode mode,
                                    const PolicyParams& policy, double clip_epsilon,
                                    double step_size) {
  UpdateBatch batch;
  batch.clip_epsilon = clip_epsilon;
  batch.step_size = step_size;

  if (mode == UpdateMode::OutcomeReward) {
    for (int leaf : tree.leaves()) {
      const double outcome = tree.node(leaf).reward;
      for (int e : tree.path_edges(leaf)) {
        const auto& ed = tree.edge(e);
        if (tree.out_degree(ed.parent) <= 1) continue;
        detail::expand_action(policy, tree.node(ed.parent).state, ed.action, outcome, batch);
        ++batch.action_samples;
      }
    }
    return batch;
  }

  for (const auto& s : samples) {
    if (mode == UpdateMode::HighCriticalityOnly && s.sibling_count <= 1) continue;
    const auto& ed = tree.edge(s.edge);
    detail::expand_action(policy, tree.node(s.parent_node).state, ed.action, s.advantage, batch);
    ++batch.action_samples;
  }
  return batch;
}

struct PpoResult {
  double loss = 0.0;
  PolicyGradient gradient;
};

/**
 * Clipped surrogate objective and its exact gradient over the logit table.
 *
 * loss = mean over token samples of min(r * A, clip(r, 1-eps, 1+eps) * A)
 * with r = exp(new_logprob - old_logprob). The gradient flows through a
 * sample exactly when the unclipped branch attains the min; with a fresh
 * policy (r = 1) this reduces to the vanilla policy-gradient estimator.
 * Ascent on this gradient maximizes the objective.
 */
inline PpoResult ppo_loss_and_grad(const UpdateBatch& batch, const PolicyParams& policy) {
  if (policy.temperature() <= 0.0)
    throw PreconditionError("ppo_loss_and_grad: policy temperature must be positive");
  PpoResult res;
  res.gradient = policy.zero_gradient();
  if (batch.tokens.empty()) return res;

  const double eps = batch.clip_epsilon;
  const double inv_n = 1.0 / static_cast<double>(batch.tokens.size());
  const double inv_temp = 1.0 / policy.temperature();

  for (size_t i = 0; i < batch.tokens.size(); ++i) {
    const auto& s = batch.tokens[i];
    const double new_lp = policy.logprob(s.context, s.token);
    const double ratio = std::exp(new_lp - s.old_logprob);
    if (!std::isfinite(ratio))
      throw NumericalError("non-finite ppo ratio at token sample " + std::to_string(i));
    const double clipped_ratio = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
    const double unclipped = ratio * s.advantage;
    const double clipped = clipped_ratio * s.advantage;
    res.loss += inv_n * std::min(unclipped, clipped);
    if (unclipped <= clipped) {
      // d/dz [r * A] = A * r * dlog pi/dz, with dlog pi(t)/dz_k = (1{k=t} - pi_k) / T.
      const double scale = inv_n * s.advantage * ratio * inv_temp;
      const auto probs = policy.probs(s.context);
      auto& grow = res.gradient.rows.at(s.context);
      for (size_t k = 0; k < grow.size(); ++k) grow[k] -= scale * probs[k];
      grow.at(s.token) += scale;
    }
  }
  return res;
}

struct IterationMetrics {
  int iteration = 0;
  double mean_reward = 0.0;
  double policy_entropy = 0.0;
  long d_roll = 0;
  long d_upd = 0;
  double loss = 0.0;
};

struct TrainerConfig {
  double clip_epsilon = 0.2;
  double step_size = 0.1;
  int iterations = 200;
  int inner_epochs = 1;  // gradient steps per rollout batch (on-policy at 1)
  int eval_rollouts = 256;
  uint64_t eval_seed = 0xE7A1;  // frozen evaluation streams, shared across methods
  double logit_bound = 50.0;
  EstimatorKind estimator = EstimatorKind::Carl;
  UpdateMode update_mode = UpdateMode::HighCriticalityOnly;
  RolloutBudget budget;

  void validate() const {
    if (clip_epsilon <= 0.0 || clip_epsilon >= 1.0)
      throw ValidationError("clip_epsilon must lie in (0, 1)");
    if (step_size < 0.0) throw ValidationError("step_size must be nonnegative");
    if (iterations < 1) throw ValidationError("iterations must be >= 1");
    if (inner_epochs < 1) throw ValidationError("inner_epochs must be >= 1");
    if (eval_rollouts < 1) throw ValidationError("eval_rollouts must be >= 1");
    if (logit_bound <= 0.0) throw ValidationError("logit_bound must be positive");
    budget.validate();
    if (estimator == EstimatorKind::Grpo && budget.strategy != RolloutStrategy::FromScratch)
      throw ValidationError("grpo estimator requires the from_scratch strategy");
    if (estimator != EstimatorKind::Grpo && budget.strategy == RolloutStrategy::FromScratch)
      throw ValidationError("from_scratch strategy pairs with the grpo estimator");
  }
};

struct TrainState {
  PolicyParams policy;
  int iterations_run = 0;
  std::vector<IterationMetrics> log;
  bool diverged = false;
};

namespace detail {

inline std::vector<AdvantageSample> advantages_for(EstimatorKind estimator, UpdateMode mode,
                                                   const TrajectoryTree& tree) {
  if (mode == UpdateMode::AllWithInheritance)
    return collect_advantages_with_inheritance(tree, estimate_values(tree));
  switch (estimator) {
    case EstimatorKind::Carl: return collect_advantages(tree, estimate_values(tree));
    case EstimatorKind::CarlInherit:
      return collect_advantages_with_inheritance(tree, estimate_values(tree));
    case EstimatorKind::Grpo: return grpo_tree_advantages(tree);
    case EstimatorKind::TreeRl: return treerl_advantages(tree);
    case EstimatorKind::TreeRpo: return treerpo_advantages(tree);
    case EstimatorKind::Arpo: return arpo_advantages(tree, arpo_batch_stats({&tree}));
  }
  throw ValidationError("unknown estimator");
}

inline double eval_mean_reward(const Mdp& env, const PolicyParams& policy, int rollouts,
                               uint64_t eval_seed) {
  double sum = 0.0;
  const Rng base(eval_seed);
  for (int j = 0; j < rollouts; ++j) {
    Rng r = base.split(static_cast<uint64_t>(j));
    sum += rollout_from(env, policy, env.initial_state, r).reward;
  }
  return sum / static_cast<double>(rollouts);
}

inline double mean_visited_entropy(const Mdp& env, const PolicyParams& policy,
                                   const TrajectoryTree& tree, Rng& rng) {
  std::set<int> states;
  for (int e = 0; e < tree.edge_count(); ++e)
    states.insert(tree.node(tree.edge(e).parent).state);
  if (states.empty()) return 0.0;
  double sum = 0.0;
  for (int s : states) {
    if (policy.mode() == ActionMode::Atomic) {
      sum += policy.exact_state_entropy(s);
    } else {
      sum += estimate_action_entropy(policy, s, 8, rng).value;
    }
  }
  return sum / static_cast<double>(states.size());
}

}  // namespace detail

/**
 * Training loop: per iteration, one rollout batch, one advantage pass, one
 * update-set build, then inner_epochs ascent steps. Logs evaluation reward
 * on frozen seeds, exact policy entropy over visited states, and the rollout
 * and update sample counts. Returns early with diverged = true if the mean
 * absolute logit crosses the configured bound.
 */
inline TrainState train(const Mdp& env, PolicyParams policy, const TrainerConfig& cfg,
                        uint64_t seed) {
  cfg.validate();
  validate_policy_for_env(env, policy);
  TrainState state{std::move(policy), 0, {}, false};
  const Rng run_rng(seed);

  for (int it = 1; it <= cfg.iterations; ++it) {
    Rng iter_rng = run_rng.split(static_cast<uint64_t>(it));
    const TreeRollout rollout = run_rollout(env, state.policy, cfg.budget, iter_rng.split(1));
    const auto samples = detail::advantages_for(cfg.estimator, cfg.update_mode, rollout.tree);
    UpdateBatch batch = build_update_set(rollout.tree, samples, cfg.update_mode, state.policy,
                                         cfg.clip_epsilon, cfg.step_size);

    double loss = 0.0;
    if (!batch.tokens.empty() && cfg.step_size > 0.0) {
      for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
        PpoResult res = ppo_loss_and_grad(batch, state.policy);
        state.policy.apply_gradient(res.gradient, cfg.step_size);
        loss = res.loss;
      }
    } else if (!batch.tokens.empty()) {
      loss = ppo_loss_and_grad(batch, state.policy).loss;
    }

    IterationMetrics m;
    m.iteration = it;
    m.mean_reward = detail::eval_mean_reward(env, state.policy, cfg.eval_rollouts, cfg.eval_seed);
    Rng entropy_rng = iter_rng.split(2);
    m.policy_entropy = detail::mean_visited_entropy(env, state.policy, rollout.tree, entropy_rng);
    m.d_roll = rollout.tree.edge_count();
    m.d_upd = batch.action_samples;
    m.loss = loss;
    state.log.push_back(m);
    state.iterations_run = it;

    if (state.policy.mean_abs_logit() > cfg.logit_bound) {
      state.diverged = true;
      break;
    }
  }
  return state;
}

}  // namespace carl
