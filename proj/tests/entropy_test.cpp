#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <carl/criticality.hpp>
#include <carl/families.hpp>
#include <carl/mdp.hpp>

#include <algorithm>
#include <cmath>

using namespace carl;

namespace {

Mdp one_step_env(const std::vector<double>& rewards) {
  Mdp env;
  env.mode = ActionMode::Atomic;
  env.horizon = 1;
  env.state_count = 1 + static_cast<int>(rewards.size());
  env.initial_state = 0;
  env.transitions.resize(env.state_count);
  env.terminal.assign(env.state_count, true);
  env.terminal[0] = false;
  env.terminal_reward.assign(env.state_count, 0.0);
  for (size_t a = 0; a < rewards.size(); ++a) {
    env.transitions[0].push_back(TransitionRow{{{static_cast<int>(a) + 1, 1.0}}});
    env.terminal_reward[a + 1] = rewards[a];
  }
  env.validate();
  return env;
}

PolicyParams policy_with_probs(const std::vector<double>& probs, double temperature = 1.0) {
  std::vector<double> logits;
  for (double p : probs) logits.push_back(std::log(p));
  return PolicyParams::atomic({logits}, temperature);
}

// Direct evaluation of -sum p log p, independent of the library path.
double direct_entropy(const std::vector<double>& probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

}  // namespace

TEST_CASE("exact entropy closed forms") {
  SUBCASE("one-hot distribution has zero entropy") {
    const auto policy = PolicyParams::atomic({{3.0, 0.0, 0.0, 0.0}}, 0.0);
    CHECK(exact_entropy(policy, 0).value == 0.0);
  }
  SUBCASE("fair coin has ln 2") {
    const auto policy = policy_with_probs({0.5, 0.5});
    CHECK(exact_entropy(policy, 0).value == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("(0.7, 0.2, 0.1) evaluates to 0.8018") {
    const auto policy = policy_with_probs({0.7, 0.2, 0.1});
    const double h = exact_entropy(policy, 0).value;
    CHECK(h == doctest::Approx(0.801818552543337).epsilon(1e-9));
    CHECK(h == doctest::Approx(direct_entropy({0.7, 0.2, 0.1})).epsilon(1e-12));
  }
  SUBCASE("token mode is unsupported") {
    const auto policy = PolicyParams::token_uniform(1, TokenSpec{2, 2, 0});
    CHECK_THROWS_AS(exact_entropy(policy, 0), UnsupportedModeError);
  }
}

TEST_CASE("monte carlo entropy estimation") {
  SUBCASE("deterministic policy estimates zero for any n") {
    const auto policy = PolicyParams::atomic({{0.0}}, 1.0);  // single action
    Rng rng(5);
    for (int n : {1, 10, 100})
      CHECK(estimate_action_entropy(policy, 0, n, rng).value == 0.0);
  }
  SUBCASE("uniform over 4 actions converges to ln 4") {
    const auto policy = PolicyParams::atomic({{0.0, 0.0, 0.0, 0.0}}, 1.0);
    Rng rng(6);
    const auto est = estimate_action_entropy(policy, 0, 10000, rng);
    // Every observation equals ln 4 here, so the bound is slack on purpose.
    CHECK(std::abs(est.value - std::log(4.0)) <= 1e-12);
    CHECK(est.sample_count == 10000);
  }
  SUBCASE("skewed distribution converges to the exact entropy") {
    const std::vector<double> probs{0.6, 0.3, 0.1};
    const auto policy = policy_with_probs(probs);
    const double exact = direct_entropy(probs);
    // Population variance of -log p under p, for the standard error.
    double second = 0.0;
    for (double p : probs) second += p * std::log(p) * std::log(p);
    const int n = 20000;
    const double se = std::sqrt((second - exact * exact) / n);
    Rng rng(7);
    const auto est = estimate_action_entropy(policy, 0, n, rng);
    CHECK(std::abs(est.value - exact) <= 4.0 * se);
  }
}

TEST_CASE("monte carlo entropy is unbiased over repeated estimates") {
  const std::vector<double> probs{0.7, 0.2, 0.1};
  const auto policy = policy_with_probs(probs);
  const double exact = direct_entropy(probs);
  const int repeats = 200, n = 100;
  double grand = 0.0;
  Rng base(1001);
  for (int r = 0; r < repeats; ++r) {
    Rng rng = base.split(r);
    grand += estimate_action_entropy(policy, 0, n, rng).value;
  }
  grand /= repeats;
  double second = 0.0;
  for (double p : probs) second += p * std::log(p) * std::log(p);
  const double se = std::sqrt((second - exact * exact) / (repeats * n));
  CHECK(std::abs(grand - exact) <= 4.0 * se);
}

TEST_CASE("criticality closed forms") {
  SUBCASE("identical outcomes mean zero criticality") {
    const auto env = one_step_env({0.7, 0.7, 0.7});
    const auto policy = PolicyParams::atomic({{0.4, 0.1, -0.2}}, 1.0);
    CHECK(measure_criticality_exhaustive(env, policy, 0).criticality ==
          doctest::Approx(0.0).epsilon(1e-12));
    Rng rng(3);
    CHECK(measure_criticality_sampled(env, policy, 0, 200, rng).criticality == 0.0);
  }
  SUBCASE("fair coin over rewards 1 and 0 has criticality one half") {
    const auto env = one_step_env({1.0, 0.0});
    const auto policy = policy_with_probs({0.5, 0.5});
    const auto rec = measure_criticality_exhaustive(env, policy, 0);
    CHECK(rec.criticality == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(rec.method == CriticalityMethod::Enumerated);
  }
  SUBCASE("terminal states are rejected") {
    const auto env = one_step_env({1.0, 0.0});
    const auto policy = policy_with_probs({0.5, 0.5});
    CHECK_THROWS_AS(measure_criticality_exhaustive(env, policy, 1), PreconditionError);
  }
}

TEST_CASE("sampled criticality tracks the exhaustive value on a chain instance") {
  const auto inst = make_instance(FamilySpec{Family::ChainCritical, 6, 2, 3, 0.0, 2.5, 0.1, 21});
  Rng base(77);
  for (int s = 0; s < inst.env.state_count; ++s) {
    if (inst.env.is_terminal(s)) continue;
    const int depth = inst.env.depth_of(s);
    const auto exact = measure_criticality_exhaustive(inst.env, inst.policy, s, depth);
    const int n = 10000;
    Rng rng = base.split(s);
    const auto sampled = measure_criticality_sampled(inst.env, inst.policy, s, n, rng, depth);
    if (exact.criticality == 0.0) {
      CHECK(sampled.criticality == 0.0);
      continue;
    }
    // Delta-method standard error of a sample standard deviation, from the
    // exact outcome distribution (rewards r with probabilities p).
    const auto probs = inst.policy.probs(s);
    std::vector<double> rewards;
    for (int a = 0; a < static_cast<int>(probs.size()); ++a) {
      Rng tmp(0);
      const int next = inst.env.transitions[s][a].next[0].first;
      double r;
      if (inst.env.is_terminal(next)) {
        r = inst.env.terminal_reward[next];
      } else {
        r = greedy_rollout_from(inst.env, inst.policy, next, tmp, depth + 1).reward;
      }
      rewards.push_back(r);
    }
    double mu = 0, var = 0, mu4 = 0;
    for (size_t a = 0; a < probs.size(); ++a) mu += probs[a] * rewards[a];
    for (size_t a = 0; a < probs.size(); ++a) {
      var += probs[a] * std::pow(rewards[a] - mu, 2);
      mu4 += probs[a] * std::pow(rewards[a] - mu, 4);
    }
    const double se = std::sqrt(std::max(mu4 - var * var, 0.0) / (4.0 * var * n));
    CHECK(std::abs(sampled.criticality - exact.criticality) <= 3.0 * se);
  }
}

TEST_CASE("criticality is invariant to relabeling actions") {
  const auto env_a = one_step_env({0.9, 0.1, 0.5});
  const auto env_b = one_step_env({0.5, 0.9, 0.1});  // actions permuted by (2,0,1)
  const auto pol_a = PolicyParams::atomic({{0.3, 0.9, 0.1}}, 1.0);
  const auto pol_b = PolicyParams::atomic({{0.1, 0.3, 0.9}}, 1.0);
  const double ca = measure_criticality_exhaustive(env_a, pol_a, 0).criticality;
  const double cb = measure_criticality_exhaustive(env_b, pol_b, 0).criticality;
  CHECK(ca == doctest::Approx(cb).epsilon(1e-12));
}

TEST_CASE("exhaustive criticality refuses oversized token spaces") {
  const TokenSpec spec{4, 10, 3};
  Mdp env;
  env.mode = ActionMode::TokenSequence;
  env.tokens = spec;
  env.horizon = 1;
  env.state_count = 2;
  env.initial_state = 0;
  env.transitions.resize(2);
  env.transitions[0].assign(4, TransitionRow{{{1, 1.0}}});
  env.terminal = {false, true};
  env.terminal_reward = {0.0, 1.0};
  env.validate();
  const auto policy = PolicyParams::token_uniform(2, spec);
  CHECK_THROWS_AS(measure_criticality_exhaustive(env, policy, 0), CapacityError);
}

TEST_CASE("spearman correlation") {
  SUBCASE("strictly increasing pairs give 1") {
    CHECK(spearman_rank_correlation({1, 2, 3, 4, 5}, {0.1, 0.2, 0.5, 0.7, 0.9}) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("independent values are near zero") {
    Rng rng(2024);
    std::vector<double> x(1000), y(1000);
    for (auto& v : x) v = rng.uniform01();
    for (auto& v : y) v = rng.uniform01();
    CHECK(std::abs(spearman_rank_correlation(x, y)) <= 0.1);
  }
  SUBCASE("degenerate inputs raise") {
    CHECK_THROWS_AS(spearman_rank_correlation({1.0}, {2.0}), DegenerateInputError);
    CHECK_THROWS_AS(spearman_rank_correlation({1, 1, 1}, {1, 2, 3}), DegenerateInputError);
  }
}

TEST_CASE("correlation report separates criticality bins") {
  std::vector<std::pair<CriticalityRecord, EntropyEstimate>> records;
  auto add = [&](double crit, double ent) {
    CriticalityRecord c;
    c.criticality = crit;
    EntropyEstimate e;
    e.value = ent;
    records.emplace_back(c, e);
  };
  add(0.0, 0.2);
  add(0.05, 0.3);
  add(0.45, 1.0);
  add(0.5, 1.1);
  const auto rep = correlation_report(records, 0.2);
  CHECK(rep.spearman > 0.9);
  CHECK(rep.low_count == 2);
  CHECK(rep.high_count == 2);
  CHECK(rep.high_bin_mean_entropy > rep.low_bin_mean_entropy);

  SUBCASE("identical criticalities are degenerate") {
    std::vector<std::pair<CriticalityRecord, EntropyEstimate>> flat;
    CriticalityRecord c;
    EntropyEstimate e;
    flat.emplace_back(c, e);
    flat.emplace_back(c, e);
    CHECK_THROWS_AS(correlation_report(flat, 0.2), DegenerateInputError);
  }
}

TEST_CASE("chain instances show the entropy-criticality correlation") {
  std::vector<std::pair<CriticalityRecord, EntropyEstimate>> records;
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    const auto inst =
        make_instance(FamilySpec{Family::ChainCritical, 10, 2, 3, 0.0, 2.5, 0.1, seed});
    for (int s = 0; s < inst.env.state_count; ++s) {
      if (inst.env.is_terminal(s)) continue;
      records.emplace_back(
          measure_criticality_exhaustive(inst.env, inst.policy, s, inst.env.depth_of(s)),
          exact_entropy(inst.policy, s));
    }
  }
  REQUIRE(records.size() >= 200);
  const auto rep = correlation_report(records, 0.2);
  CHECK(rep.spearman > 0.0);
  CHECK(rep.high_bin_mean_entropy > rep.low_bin_mean_entropy);
}
