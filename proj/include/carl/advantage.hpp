#pragma once

#include "common.hpp"
#include "tree.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace carl {

enum class EstimatorKind { Carl, CarlInherit, Grpo, TreeRl, TreeRpo, Arpo };

inline std::string estimator_name(EstimatorKind e) {
  switch (e) {
    case EstimatorKind::Carl: return "carl";
    case EstimatorKind::CarlInherit: return "carl_inherit";
    case EstimatorKind::Grpo: return "grpo";
    case EstimatorKind::TreeRl: return "treerl";
    case EstimatorKind::TreeRpo: return "treerpo";
    case EstimatorKind::Arpo: return "arpo";
  }
  throw ValidationError("unknown estimator");
}

inline EstimatorKind estimator_from_name(const std::string& s) {
  if (s == "carl") return EstimatorKind::Carl;
  if (s == "carl_inherit") return EstimatorKind::CarlInherit;
  if (s == "grpo") return EstimatorKind::Grpo;
  if (s == "treerl") return EstimatorKind::TreeRl;
  if (s == "treerpo") return EstimatorKind::TreeRpo;
  if (s == "arpo") return EstimatorKind::Arpo;
  throw ValidationError("unknown estimator: " + s);
}

/// Estimated expected reward of the subtree below a node.
struct NodeValue {
  double value = 0.0;
  bool leaf = false;
};

/**
 * Bottom-up value estimation: leaves take their recorded reward, internal
 * nodes take the unweighted mean of their children. Children are independent
 * samples from the policy, so the mean estimates the state's expected reward.
 */
inline std::vector<NodeValue> estimate_values(const TrajectoryTree& tree) {
  std::vector<NodeValue> values(tree.node_count());
  // Nodes are created parent-first, so a reverse index scan is post-order.
  for (int i = tree.node_count() - 1; i >= 0; --i) {
    const auto& n = tree.node(i);
    if (n.out_edges.empty()) {
      if (!n.has_reward)
        throw StructuralError("leaf node " + std::to_string(i) + " has no reward");
      values[i] = NodeValue{n.reward, true};
      continue;
    }
    double sum = 0.0;
    for (int e : n.out_edges) sum += values[tree.edge(e).child].value;
    values[i] = NodeValue{sum / static_cast<double>(n.out_edges.size()), false};
  }
  return values;
}

/**
 * One per-edge training sample. `sibling_count` is the out-degree of the
 * edge's parent node, the key used by the selective update filter.
 */
struct AdvantageSample {
  int edge = 0;
  int parent_node = 0;
  int child_node = 0;
  double advantage = 0.0;
  int sibling_count = 1;
  EstimatorKind estimator = EstimatorKind::Carl;
};

/// Edge advantage = child value minus parent value. Single-child edges come
/// out exactly 0 by the mean rule.
inline std::vector<AdvantageSample> collect_advantages(const TrajectoryTree& tree,
                                                       const std::vector<NodeValue>& values) {
  std::vector<AdvantageSample> out;
  out.reserve(tree.edge_count());
  for (int e = 0; e < tree.edge_count(); ++e) {
    const auto& ed = tree.edge(e);
    out.push_back(AdvantageSample{e, ed.parent, ed.child,
                                  values.at(ed.child).value - values.at(ed.parent).value,
                                  tree.out_degree(ed.parent), EstimatorKind::Carl});
  }
  return out;
}

/**
 * Ablation variant: single-child edges inherit the advantage of the parent's
 * incoming edge instead of the uninformative 0 (the root's incoming
 * advantage counts as 0). Multi-child edges are unchanged.
 */
inline std::vector<AdvantageSample> collect_advantages_with_inheritance(
    const TrajectoryTree& tree, const std::vector<NodeValue>& values) {
  std::vector<AdvantageSample> out(tree.edge_count());
  // Edges are created in parent-before-child order, so one forward pass sees
  // every parent's incoming edge before its outgoing ones.
  for (int e = 0; e < tree.edge_count(); ++e) {
    const auto& ed = tree.edge(e);
    const int siblings = tree.out_degree(ed.parent);
    double adv;
    if (siblings > 1) {
      adv = values.at(ed.child).value - values.at(ed.parent).value;
    } else {
      const int parent_in = tree.node(ed.parent).parent_edge;
      adv = (parent_in >= 0) ? out[parent_in].advantage : 0.0;
    }
    out[e] = AdvantageSample{e, ed.parent, ed.child, adv, siblings, EstimatorKind::CarlInherit};
  }
  return out;
}

/// Group-relative advantages: (reward - group mean) / group population std,
/// all zero when the group is indistinguishable (std below 1e-8).
inline std::vector<double> grpo_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2)
    throw DegenerateInputError("grpo_advantages: group size must be >= 2");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double stddev = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (stddev < 1e-8) return adv;
  for (size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / stddev;
  return adv;
}

/**
 * GRPO on a tree of independent trajectories: each leaf's group-relative
 * advantage is broadcast to every edge on its root-to-leaf chain. Requires a
 * star-of-chains tree (each edge on exactly one chain), which is what
 * from_scratch_rollout produces.
 */
inline std::vector<AdvantageSample> grpo_tree_advantages(const TrajectoryTree& tree) {
  for (int i = 0; i < tree.node_count(); ++i)
    if (i != tree.root() && tree.out_degree(i) > 1)
      throw ValidationError("grpo requires independent trajectories (no interior branching)");
  const auto leaves = tree.leaves();
  std::vector<double> rewards;
  rewards.reserve(leaves.size());
  for (int l : leaves) rewards.push_back(tree.node(l).reward);
  const auto adv = grpo_advantages(rewards);

  std::vector<AdvantageSample> out;
  out.reserve(tree.edge_count());
  for (size_t i = 0; i < leaves.size(); ++i) {
    for (int e : tree.path_edges(leaves[i])) {
      const auto& ed = tree.edge(e);
      out.push_back(AdvantageSample{e, ed.parent, ed.child, adv[i],
                                    tree.out_degree(ed.parent), EstimatorKind::Grpo});
    }
  }
  return out;
}

/// Descendant-leaf count per node (a leaf counts itself).
inline std::vector<long> descendant_leaf_counts(const TrajectoryTree& tree) {
  std::vector<long> counts(tree.node_count(), 0);
  for (int i = tree.node_count() - 1; i >= 0; --i) {
    const auto& n = tree.node(i);
    if (n.out_edges.empty()) {
      counts[i] = 1;
      continue;
    }
    for (int e : n.out_edges) counts[i] += counts[tree.edge(e).child];
  }
  return counts;
}

/// Mean reward over each node's descendant leaves.
inline std::vector<double> descendant_leaf_means(const TrajectoryTree& tree) {
  std::vector<double> sums(tree.node_count(), 0.0);
  std::vector<long> counts(tree.node_count(), 0);
  for (int i = tree.node_count() - 1; i >= 0; --i) {
    const auto& n = tree.node(i);
    if (n.out_edges.empty()) {
      sums[i] = n.reward;
      counts[i] = 1;
      continue;
    }
    for (int e : n.out_edges) {
      sums[i] += sums[tree.edge(e).child];
      counts[i] += counts[tree.edge(e).child];
    }
  }
  std::vector<double> means(tree.node_count(), 0.0);
  for (int i = 0; i < tree.node_count(); ++i)
    means[i] = sums[i] / static_cast<double>(counts[i]);
  return means;
}

/**
 * Descendant-leaf-mean baseline with a leaf-count re-weight: node values are
 * means over all descendant leaves, and each non-root node scores
 * |L|^(-1/2) * ((V(s) - V(root)) + (V(s) - V(parent))). Leaf-frequency
 * weighting makes the value estimate depend on how the tree was expanded,
 * not only on the policy.
 */
inline std::vector<AdvantageSample> treerl_advantages(const TrajectoryTree& tree) {
  const auto means = descendant_leaf_means(tree);
  const auto counts = descendant_leaf_counts(tree);
  const double v_root = means[tree.root()];
  std::vector<AdvantageSample> out;
  out.reserve(tree.edge_count());
  for (int e = 0; e < tree.edge_count(); ++e) {
    const auto& ed = tree.edge(e);
    const double v = means[ed.child];
    const double v_parent = means[ed.parent];
    const double reweight = 1.0 / std::sqrt(static_cast<double>(counts[ed.child]));
    const double adv = reweight * ((v - v_root) + (v - v_parent));
    out.push_back(AdvantageSample{e, ed.parent, ed.child, adv, tree.out_degree(ed.parent),
                                  EstimatorKind::TreeRl});
  }
  return out;
}

/**
 * Group-relative advantages inside each sibling group: siblings' subtree
 * values (descendant-leaf means) are normalized with the usual
 * (value - mean) / population std rule. Singleton children are skipped.
 */
inline std::vector<AdvantageSample> treerpo_advantages(const TrajectoryTree& tree) {
  const auto means = descendant_leaf_means(tree);
  std::vector<AdvantageSample> out;
  for (int u = 0; u < tree.node_count(); ++u) {
    const auto& n = tree.node(u);
    if (n.out_edges.size() < 2) continue;
    std::vector<double> vals;
    vals.reserve(n.out_edges.size());
    for (int e : n.out_edges) vals.push_back(means[tree.edge(e).child]);
    const auto adv = grpo_advantages(vals);
    for (size_t i = 0; i < n.out_edges.size(); ++i) {
      const int e = n.out_edges[i];
      out.push_back(AdvantageSample{e, u, tree.edge(e).child, adv[i],
                                    static_cast<int>(n.out_edges.size()),
                                    EstimatorKind::TreeRpo});
    }
  }
  return out;
}

struct ArpoBatchStats {
  double mean = 0.0;
  double stddev = 0.0;
};

/// Leaf-reward mean and population std over every tree in a batch.
inline ArpoBatchStats arpo_batch_stats(const std::vector<const TrajectoryTree*>& batch) {
  std::vector<double> rewards;
  for (const TrajectoryTree* t : batch)
    for (int l : t->leaves()) rewards.push_back(t->node(l).reward);
  if (rewards.size() < 2)
    throw DegenerateInputError("arpo_batch_stats: need >= 2 leaves in the batch");
  ArpoBatchStats s;
  for (double r : rewards) s.mean += r;
  s.mean /= static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - s.mean) * (r - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(rewards.size()));
  return s;
}

/**
 * Shared-prefix averaging of trajectory-level advantages: an edge crossed by
 * d root-to-leaf paths gets the mean of those d group-relative advantages,
 * which collapses to (mean traversing reward - batch mean) / batch std.
 */
inline std::vector<AdvantageSample> arpo_advantages(const TrajectoryTree& tree,
                                                    const ArpoBatchStats& stats) {
  const auto means = descendant_leaf_means(tree);
  std::vector<AdvantageSample> out;
  out.reserve(tree.edge_count());
  const bool degenerate = stats.stddev < 1e-8;
  for (int e = 0; e < tree.edge_count(); ++e) {
    const auto& ed = tree.edge(e);
    const double adv = degenerate ? 0.0 : (means[ed.child] - stats.mean) / stats.stddev;
    out.push_back(AdvantageSample{e, ed.parent, ed.child, adv, tree.out_degree(ed.parent),
                                  EstimatorKind::Arpo});
  }
  return out;
}

}  // namespace carl
