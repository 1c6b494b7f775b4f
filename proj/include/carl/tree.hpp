#pragma once

#include "common.hpp"
#include "csv.hpp"
#include "policy.hpp"

#include <algorithm>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace carl {

enum class EdgePhase { Initial, Forked };

enum class RolloutStrategy { EntropyGuided, Random, FromScratch, TreeRpoPartial, ArpoBranching };

inline std::string strategy_name(RolloutStrategy s) {
  switch (s) {
    case RolloutStrategy::EntropyGuided: return "entropy_guided";
    case RolloutStrategy::Random: return "random_fork";
    case RolloutStrategy::FromScratch: return "from_scratch";
    case RolloutStrategy::TreeRpoPartial: return "treerpo_partial";
    case RolloutStrategy::ArpoBranching: return "arpo_branching";
  }
  throw ValidationError("unknown strategy");
}

inline RolloutStrategy strategy_from_name(const std::string& s) {
  if (s == "entropy_guided") return RolloutStrategy::EntropyGuided;
  if (s == "random_fork") return RolloutStrategy::Random;
  if (s == "from_scratch") return RolloutStrategy::FromScratch;
  if (s == "treerpo_partial") return RolloutStrategy::TreeRpoPartial;
  if (s == "arpo_branching") return RolloutStrategy::ArpoBranching;
  throw ValidationError("unknown strategy: " + s);
}

struct TreeNode {
  int state = 0;
  int depth = 0;
  int parent_edge = -1;  // -1 at the root
  std::vector<int> out_edges;
  bool has_reward = false;
  double reward = 0.0;
  bool truncated = false;
};

struct TreeEdge {
  int parent = 0;
  int child = 0;
  Action action;
  EdgePhase phase = EdgePhase::Initial;
};

/**
 * Rooted tree of sampled trajectories. Nodes are state instances at tree
 * positions (the same environment state reached along different histories is
 * a different node); edges carry the action taken. Duplicate actions are
 * stored as independent branches, never merged, because each sampled child
 * is an independent draw from the policy. Leaves carry the terminal (or
 * truncation) reward.
 */
class TrajectoryTree {
 public:
  explicit TrajectoryTree(int root_state = 0) {
    TreeNode root;
    root.state = root_state;
    root.depth = 0;
    nodes_.push_back(root);
  }

  int root() const { return 0; }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  int edge_count() const { return static_cast<int>(edges_.size()); }
  const TreeNode& node(int i) const { return nodes_.at(i); }
  const TreeEdge& edge(int i) const { return edges_.at(i); }

  int out_degree(int node) const { return static_cast<int>(nodes_.at(node).out_edges.size()); }
  bool is_leaf(int node) const { return nodes_.at(node).out_edges.empty(); }

  int add_child(int parent, Action action, int child_state, EdgePhase phase) {
    const int child = static_cast<int>(nodes_.size());
    const int e = static_cast<int>(edges_.size());
    TreeNode n;
    n.state = child_state;
    n.depth = nodes_.at(parent).depth + 1;
    n.parent_edge = e;
    nodes_.push_back(std::move(n));
    edges_.push_back(TreeEdge{parent, child, std::move(action), phase});
    nodes_[parent].out_edges.push_back(e);
    return child;
  }

  void set_leaf_reward(int node, double reward, bool truncated) {
    nodes_.at(node).has_reward = true;
    nodes_.at(node).reward = reward;
    nodes_.at(node).truncated = truncated;
  }

  std::vector<int> leaves() const {
    std::vector<int> out;
    for (int i = 0; i < node_count(); ++i)
      if (nodes_[i].out_edges.empty()) out.push_back(i);
    return out;
  }

  /// Edge ids on the root-to-node path, root side first.
  std::vector<int> path_edges(int node) const {
    std::vector<int> out;
    int cur = node;
    while (nodes_.at(cur).parent_edge >= 0) {
      out.push_back(nodes_[cur].parent_edge);
      cur = edges_[nodes_[cur].parent_edge].parent;
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

  /// Structural sanity: parent links consistent, every leaf scored.
  void validate() const {
    if (nodes_.empty()) throw StructuralError("tree has no root");
    if (static_cast<int>(edges_.size()) != node_count() - 1)
      throw StructuralError("edge count must equal node count - 1");
    for (int e = 0; e < edge_count(); ++e) {
      const auto& ed = edges_[e];
      if (nodes_.at(ed.child).parent_edge != e)
        throw StructuralError("child parent_edge mismatch");
      if (nodes_.at(ed.child).depth != nodes_.at(ed.parent).depth + 1)
        throw StructuralError("child depth mismatch");
    }
    for (int i = 0; i < node_count(); ++i)
      if (nodes_[i].out_edges.empty() && !nodes_[i].has_reward)
        throw StructuralError("leaf node " + std::to_string(i) + " has no reward");
  }

  /// Line-oriented text form: one node or edge per line with parent refs.
  void serialize(std::ostream& out) const {
    out << "tree v1 " << node_count() << " " << edge_count() << "\n";
    for (int i = 0; i < node_count(); ++i) {
      const auto& n = nodes_[i];
      out << "node " << i << " " << n.state << " " << n.depth;
      if (n.has_reward)
        out << " reward " << format_double(n.reward) << (n.truncated ? " truncated" : "");
      out << "\n";
    }
    for (int e = 0; e < edge_count(); ++e) {
      const auto& ed = edges_[e];
      out << "edge " << e << " " << ed.parent << " " << ed.child << " "
          << (ed.phase == EdgePhase::Initial ? "initial" : "forked") << " "
          << format_double(ed.action.logprob) << " tokens";
      for (int t : ed.action.tokens) out << " " << t;
      out << "\n";
    }
  }

  static TrajectoryTree parse(std::istream& in) {
    std::string tag, version;
    int nodes = 0, edges = 0;
    in >> tag >> version >> nodes >> edges;
    if (tag != "tree" || version != "v1") throw IoError("bad tree header");
    TrajectoryTree t;
    t.nodes_.assign(nodes, TreeNode{});
    t.edges_.assign(edges, TreeEdge{});
    std::string line;
    std::getline(in, line);
    for (int i = 0; i < nodes + edges; ++i) {
      if (!std::getline(in, line)) throw IoError("tree truncated");
      std::istringstream ls(line);
      std::string kind;
      ls >> kind;
      if (kind == "node") {
        int id;
        TreeNode n;
        ls >> id >> n.state >> n.depth;
        std::string word;
        while (ls >> word) {
          if (word == "reward") {
            ls >> n.reward;
            n.has_reward = true;
          } else if (word == "truncated") {
            n.truncated = true;
          }
        }
        n.parent_edge = -1;
        t.nodes_.at(id) = std::move(n);
      } else if (kind == "edge") {
        int id;
        TreeEdge e;
        std::string phase, word;
        ls >> id >> e.parent >> e.child >> phase >> e.action.logprob >> word;
        if (word != "tokens") throw IoError("bad edge line: " + line);
        int tok;
        while (ls >> tok) e.action.tokens.push_back(tok);
        e.phase = (phase == "forked") ? EdgePhase::Forked : EdgePhase::Initial;
        t.edges_.at(id) = std::move(e);
      } else {
        throw IoError("unknown tree line: " + line);
      }
    }
    for (int e = 0; e < edges; ++e) {
      t.nodes_.at(t.edges_[e].child).parent_edge = e;
      t.nodes_.at(t.edges_[e].parent).out_edges.push_back(e);
    }
    t.validate();
    return t;
  }

 private:
  std::vector<TreeNode> nodes_;
  std::vector<TreeEdge> edges_;
};

}  // namespace carl
