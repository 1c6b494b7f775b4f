#pragma once

#include "common.hpp"
#include "csv.hpp"
#include "mdp.hpp"
#include "policy.hpp"
#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace carl {

enum class Family { ChainCritical, NoisyFork, UniformCritical };

inline std::string family_name(Family f) {
  switch (f) {
    case Family::ChainCritical: return "chain_critical";
    case Family::NoisyFork: return "noisy_fork";
    case Family::UniformCritical: return "uniform_critical";
  }
  throw ValidationError("unknown family");
}

inline Family family_from_name(const std::string& s) {
  if (s == "chain_critical") return Family::ChainCritical;
  if (s == "noisy_fork") return Family::NoisyFork;
  if (s == "uniform_critical") return Family::UniformCritical;
  throw ValidationError("unknown family: " + s);
}

/**
 * Parameters of a synthetic environment draw. Generation is a pure function
 * of this record, so serializing it is enough to replay an experiment.
 *
 * confidence_gap controls how peaked the bundled reference policy is at
 * routine states; critical states stay near uniform with the correct action
 * tilted by critical_tilt so greedy continuation stays on the good track.
 */
struct FamilySpec {
  Family family = Family::ChainCritical;
  int chain_length = 8;        // T: actions from start to terminal
  int critical_positions = 1;  // k
  int branch_factor = 3;       // b: actions per state
  double reward_noise = 0.0;
  double confidence_gap = 5.0;
  double critical_tilt = 0.1;
  uint64_t seed = 1;

  void validate() const {
    if (chain_length < 1) throw ValidationError("chain_length must be >= 1");
    if (branch_factor < 1) throw ValidationError("branch_factor must be >= 1");
    if (critical_positions < 0 || critical_positions > chain_length)
      throw ValidationError("critical_positions must lie in [0, chain_length]");
    if (reward_noise < 0.0 || reward_noise > 0.5)
      throw ValidationError("reward_noise must lie in [0, 0.5]");
    if (confidence_gap < 0.0) throw ValidationError("confidence_gap must be nonnegative");
  }
};

struct Instance {
  Mdp env;
  PolicyParams policy;
  std::vector<int> critical_steps;    // sorted positions
  std::vector<int> correct_actions;   // by position; -1 where any action works
};

namespace detail {

inline std::vector<int> pick_distinct_positions(int total, int k, Rng& rng) {
  std::vector<int> pos(total);
  std::iota(pos.begin(), pos.end(), 0);
  for (int i = 0; i < k; ++i) {
    const int j = i + rng.uniform_int(total - i);
    std::swap(pos[i], pos[j]);
  }
  pos.resize(k);
  std::sort(pos.begin(), pos.end());
  return pos;
}

inline std::vector<double> peaked_row(int b, int pref, double gap, Rng& rng) {
  std::vector<double> z(b, 0.0);
  if (b > 1) z[pref] = gap * rng.uniform_range(0.95, 1.05);
  return z;
}

inline std::vector<double> hesitant_row(int b, int correct, double tilt) {
  std::vector<double> z(b, 0.0);
  if (b > 1) z[correct] = tilt;
  return z;
}

}  // namespace detail

/**
 * Build one environment instance plus its reference policy.
 *
 * ChainCritical: two tracks. A good chain g_0..g_{T-1} ends at reward ~1; at
 * each of the k critical positions exactly one action stays on the good
 * track and every other action drops to a failure chain ending at reward ~0.
 * At routine positions all actions are equivalent. The reference policy is
 * peaked at routine states and near uniform at critical ones.
 *
 * NoisyFork: same skeleton, but wrong critical actions terminate immediately
 * and both terminal rewards carry seeded noise.
 *
 * UniformCritical: a single chain where all actions are reward-equivalent;
 * the k seeded positions get a uniform policy (maximal entropy) and the rest
 * are strongly peaked. Used for rollout-cost accounting where uncertain
 * positions are uniform over depth.
 */
inline Instance make_instance(const FamilySpec& spec) {
  spec.validate();
  Rng rng(splitmix64(spec.seed ^ 0xfa417ca1ULL));
  const int T = spec.chain_length;
  const int b = spec.branch_factor;

  std::vector<int> critical = detail::pick_distinct_positions(T, spec.critical_positions, rng);
  std::vector<int> correct(T, -1);
  for (int t : critical) correct[t] = (b > 1) ? rng.uniform_int(b) : 0;
  auto is_critical = [&](int t) {
    return std::binary_search(critical.begin(), critical.end(), t);
  };

  Mdp env;
  env.mode = ActionMode::Atomic;
  env.horizon = T;

  auto det_row = [](int target) { return TransitionRow{{{target, 1.0}}}; };

  if (spec.family == Family::UniformCritical) {
    // ids: chain 0..T-1, terminal T
    env.state_count = T + 1;
    env.initial_state = 0;
    env.transitions.resize(env.state_count);
    env.terminal.assign(env.state_count, false);
    env.terminal_reward.assign(env.state_count, 0.0);
    env.state_tag.resize(env.state_count);
    env.state_depth.assign(env.state_count, 0);
    for (int t = 0; t < T; ++t) {
      env.transitions[t].assign(b, det_row(t + 1));
      env.state_tag[t] = is_critical(t) ? "critical" : "routine";
      env.state_depth[t] = t;
    }
    env.terminal[T] = true;
    env.terminal_reward[T] = 1.0;
    env.state_tag[T] = "terminal";
    env.state_depth[T] = T;
    env.validate();

    std::vector<std::vector<double>> logits(env.state_count, std::vector<double>{0.0});
    for (int t = 0; t < T; ++t) {
      if (is_critical(t)) {
        logits[t].assign(b, 0.0);
      } else {
        const int pref = (b > 1) ? rng.uniform_int(b) : 0;
        logits[t] = detail::peaked_row(b, pref, spec.confidence_gap, rng);
      }
    }
    return Instance{std::move(env), PolicyParams::atomic(std::move(logits)),
                    std::move(critical), std::move(correct)};
  }

  const bool short_circuit = (spec.family == Family::NoisyFork);
  // ids: good 0..T-1, good terminal T, failure chain T+1..2T-1 (positions
  // 1..T-1), failure terminal 2T. The failure chain is unused when wrong
  // actions short-circuit.
  env.state_count = 2 * T + 1;
  env.initial_state = 0;
  env.transitions.resize(env.state_count);
  env.terminal.assign(env.state_count, false);
  env.terminal_reward.assign(env.state_count, 0.0);
  env.state_tag.resize(env.state_count);
  env.state_depth.assign(env.state_count, 0);

  const int good_terminal = T;
  const int fail_terminal = 2 * T;
  auto fail_state = [&](int t) { return (t >= T) ? fail_terminal : T + t; };

  for (int t = 0; t < T; ++t) {
    const int good_next = (t == T - 1) ? good_terminal : t + 1;
    env.state_depth[t] = t;
    if (is_critical(t)) {
      env.state_tag[t] = "critical";
      env.transitions[t].assign(b, det_row(short_circuit ? fail_terminal : fail_state(t + 1)));
      env.transitions[t][correct[t]] = det_row(good_next);
    } else {
      env.state_tag[t] = "routine";
      env.transitions[t].assign(b, det_row(good_next));
    }
  }
  for (int t = 1; t < T; ++t) {
    const int s = T + t;
    env.state_tag[s] = "failure";
    env.state_depth[s] = t;
    env.transitions[s].assign(b, det_row(fail_state(t + 1)));
  }

  const double noise = spec.reward_noise;
  env.terminal[good_terminal] = true;
  env.terminal_reward[good_terminal] =
      std::clamp(1.0 - noise * rng.uniform01(), 0.0, 1.0);
  env.state_tag[good_terminal] = "terminal";
  env.state_depth[good_terminal] = T;
  env.terminal[fail_terminal] = true;
  env.terminal_reward[fail_terminal] = std::clamp(noise * rng.uniform01(), 0.0, 1.0);
  env.state_tag[fail_terminal] = "terminal";
  env.state_depth[fail_terminal] = T;
  env.validate();

  std::vector<std::vector<double>> logits(env.state_count, std::vector<double>{0.0});
  for (int t = 0; t < T; ++t) {
    if (is_critical(t)) {
      logits[t] = detail::hesitant_row(b, correct[t], spec.critical_tilt);
    } else {
      const int pref = (b > 1) ? rng.uniform_int(b) : 0;
      logits[t] = detail::peaked_row(b, pref, spec.confidence_gap, rng);
    }
  }
  for (int t = 1; t < T; ++t) {
    const int pref = (b > 1) ? rng.uniform_int(b) : 0;
    logits[T + t] = detail::peaked_row(b, pref, spec.confidence_gap, rng);
  }
  return Instance{std::move(env), PolicyParams::atomic(std::move(logits)),
                  std::move(critical), std::move(correct)};
}

inline void serialize_family(const FamilySpec& spec, std::ostream& out) {
  out << "family = " << family_name(spec.family) << "\n";
  out << "chain_length = " << spec.chain_length << "\n";
  out << "critical_positions = " << spec.critical_positions << "\n";
  out << "branch_factor = " << spec.branch_factor << "\n";
  out << "reward_noise = " << format_double(spec.reward_noise) << "\n";
  out << "confidence_gap = " << format_double(spec.confidence_gap) << "\n";
  out << "critical_tilt = " << format_double(spec.critical_tilt) << "\n";
  out << "seed = " << spec.seed << "\n";
}

inline FamilySpec parse_family(std::istream& in) {
  FamilySpec spec;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key, eq, value;
    if (!(ls >> key)) continue;
    if (!(ls >> eq >> value) || eq != "=") throw IoError("bad family line: " + line);
    if (key == "family") spec.family = family_from_name(value);
    else if (key == "chain_length") spec.chain_length = std::stoi(value);
    else if (key == "critical_positions") spec.critical_positions = std::stoi(value);
    else if (key == "branch_factor") spec.branch_factor = std::stoi(value);
    else if (key == "reward_noise") spec.reward_noise = std::stod(value);
    else if (key == "confidence_gap") spec.confidence_gap = std::stod(value);
    else if (key == "critical_tilt") spec.critical_tilt = std::stod(value);
    else if (key == "seed") spec.seed = std::stoull(value);
    else throw IoError("unknown family key: " + key);
  }
  spec.validate();
  return spec;
}

}  // namespace carl
