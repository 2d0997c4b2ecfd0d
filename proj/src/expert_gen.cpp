#include "ebaret/expert_gen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "ebaret/errors.hpp"

namespace ebaret::expert {

using market::Opportunity;

double DualMultipliers::bid_factor(double ros_bound) const {
  if (!(alpha_b >= 0.0) || !(alpha_c >= 0.0)) {
    throw InvalidMultipliers("multipliers must be non-negative");
  }
  const double denom = alpha_b + alpha_c;
  if (!(denom > 0.0)) throw InvalidMultipliers("alpha_b + alpha_c must be positive");
  return (1.0 + alpha_c * ros_bound) / denom;
}

double expert_bid(double value, const DualMultipliers& multipliers, double ros_bound) {
  return multipliers.bid_factor(ros_bound) * value;
}

double expert_step_action(double bid_factor, double cvr, double max_action) {
  return std::clamp(bid_factor * cvr, 0.0, max_action);
}

namespace {

// Replays a fixed bid factor step by step through market::settle_step so the
// accounting is identical to a live episode.
ReplaySummary replay_factor(std::span<const Opportunity> opps, std::span<const double> cvr_profile,
                            double factor, double budget, double max_action) {
  ReplaySummary out;
  const std::vector<double> no_draws(opps.size(), 1.0);
  const double inf = std::numeric_limits<double>::infinity();
  double remaining = budget;
  std::size_t begin = 0;
  while (begin < opps.size()) {
    std::size_t end = begin + 1;
    while (end < opps.size() && opps[end].step_index == opps[begin].step_index) ++end;
    const auto group = opps.subspan(begin, end - begin);
    const auto draws = std::span<const double>(no_draws).subspan(begin, end - begin);
    const double action =
        expert_step_action(factor, cvr_profile[opps[begin].step_index], max_action);

    const market::StepSettlement capped =
        market::settle_step(group, draws, cvr_profile, action, remaining);
    remaining = std::max(0.0, remaining - capped.spend);
    out.total_spend += capped.spend;
    out.total_value += capped.expected_value;
    out.wins += capped.wins;

    const market::StepSettlement free =
        market::settle_step(group, draws, cvr_profile, action, inf);
    out.uncapped_spend += free.spend;
    out.uncapped_value += free.expected_value;
    begin = end;
  }
  out.ros = out.total_value > 0.0 ? out.total_spend / out.total_value : 0.0;
  return out;
}

bool ros_ok(double spend, double value, double bound, double tol) {
  if (value <= 0.0) return spend <= 0.0;
  return spend / value <= bound + tol;
}

}  // namespace

ReplaySummary replay(std::span<const Opportunity> opportunities,
                     std::span<const double> cvr_profile, const DualMultipliers& multipliers,
                     const CampaignConstraints& constraints, double max_action) {
  return replay_factor(opportunities, cvr_profile, multipliers.bid_factor(constraints.ros_bound),
                       constraints.budget, max_action);
}

MultiplierSolution solve_multipliers(std::span<const Opportunity> opportunities,
                                     std::span<const double> cvr_profile,
                                     const CampaignConstraints& constraints,
                                     const SolverOptions& options) {
  constraints.validate();
  if (opportunities.empty()) throw InputError("solve_multipliers needs a non-empty stream");
  const double budget = constraints.budget;
  const double cap = constraints.ros_bound;

  auto uncapped_feasible = [&](double factor) {
    const ReplaySummary s = replay_factor(opportunities, cvr_profile, factor, budget,
                                          options.max_action);
    return s.uncapped_spend <= budget &&
           ros_ok(s.uncapped_spend, s.uncapped_value, cap, options.ros_tolerance);
  };

  MultiplierSolution best;
  best.multipliers = {options.alpha_b_max, 0.0};
  best.summary = replay(opportunities, cvr_profile, best.multipliers, constraints,
                        options.max_action);
  best.feasible = false;

  auto consider = [&](const DualMultipliers& m) {
    const ReplaySummary s = replay(opportunities, cvr_profile, m, constraints, options.max_action);
    if (s.total_spend > budget ||
        !ros_ok(s.total_spend, s.total_value, cap, options.ros_tolerance)) {
      return;
    }
    if (!best.feasible || s.total_value > best.summary.total_value) {
      best.multipliers = m;
      best.summary = s;
      best.feasible = true;
    }
  };

  std::vector<double> bisection_factors;
  const int grid_points =
      static_cast<int>(std::floor(options.alpha_c_max / options.alpha_c_step + 1e-9)) + 1;
  for (int g = 0; g < grid_points; ++g) {
    const double alpha_c = g * options.alpha_c_step;
    auto factor_of = [&](double alpha_b) { return DualMultipliers{alpha_b, alpha_c}.bid_factor(cap); };
    if (!uncapped_feasible(factor_of(options.alpha_b_max))) continue;

    double feasible_b = options.alpha_b_max;
    if (uncapped_feasible(factor_of(options.alpha_b_min))) {
      feasible_b = options.alpha_b_min;
    } else {
      // Larger alpha_b means a smaller bid factor, so feasibility is monotone.
      double lo = std::log(options.alpha_b_min);
      double hi = std::log(options.alpha_b_max);
      for (int it = 0; it < options.bisection_iters; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (uncapped_feasible(factor_of(std::exp(mid)))) {
          hi = mid;
        } else {
          lo = mid;
        }
      }
      feasible_b = std::exp(hi);
    }
    consider({feasible_b, alpha_c});
    bisection_factors.push_back(factor_of(feasible_b));
  }

  // Winning sets only change at the thresholds c_j / (v_j * cvr_j); scan the
  // gaps between consecutive thresholds near each bisection point, where the
  // forfeit rule can make a slightly more aggressive factor pay off.
  std::vector<double> thresholds;
  thresholds.reserve(opportunities.size());
  for (const Opportunity& o : opportunities) {
    thresholds.push_back(o.competitor_bid / (o.value * cvr_profile[o.step_index]));
  }
  std::sort(thresholds.begin(), thresholds.end());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<double> gap_factors;
  gap_factors.push_back(thresholds.front() * 0.5);
  for (std::size_t i = 0; i + 1 < thresholds.size(); ++i) {
    gap_factors.push_back(0.5 * (thresholds[i] + thresholds[i + 1]));
  }
  gap_factors.push_back(thresholds.back() * 2.0);

  std::set<std::size_t> scan;
  const std::size_t window = static_cast<std::size_t>(options.breakpoint_window);
  if (opportunities.size() <= window) {
    for (std::size_t i = 0; i < gap_factors.size(); ++i) scan.insert(i);
  } else {
    for (double f : bisection_factors) {
      const auto pos = static_cast<std::size_t>(
          std::lower_bound(gap_factors.begin(), gap_factors.end(), f) - gap_factors.begin());
      const std::size_t lo = pos > window ? pos - window : 0;
      const std::size_t hi = std::min(gap_factors.size(), pos + window + 1);
      for (std::size_t i = lo; i < hi; ++i) scan.insert(i);
    }
  }
  for (std::size_t i : scan) {
    const double alpha_b =
        std::clamp(1.0 / gap_factors[i], options.alpha_b_min, options.alpha_b_max);
    consider({alpha_b, 0.0});
  }
  return best;
}

double brute_force_optimal(std::span<const Opportunity> opportunities,
                           std::span<const double> cvr_profile,
                           const CampaignConstraints& constraints) {
  const std::size_t n = opportunities.size();
  if (n > static_cast<std::size_t>(kBruteForceLimit)) {
    throw SizeError("brute_force_optimal supports at most 20 opportunities");
  }
  std::vector<double> value(n), cost(n);
  for (std::size_t j = 0; j < n; ++j) {
    value[j] = opportunities[j].value * cvr_profile[opportunities[j].step_index];
    cost[j] = opportunities[j].competitor_bid;
  }
  double best = 0.0;
  const std::uint32_t subsets = 1u << n;
  for (std::uint32_t mask = 1; mask < subsets; ++mask) {
    double v = 0.0;
    double c = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (mask & (1u << j)) {
        v += value[j];
        c += cost[j];
      }
    }
    if (c <= constraints.budget && c <= constraints.ros_bound * v && v > best) best = v;
  }
  return best;
}

ExpertResult generate_expert_trajectory(const market::OpportunityStream& stream,
                                        const CampaignConstraints& constraints,
                                        const SolverOptions& options) {
  ExpertResult result;
  result.solution =
      solve_multipliers(stream.opportunities, stream.cvr_profile, constraints, options);
  const double factor = result.solution.multipliers.bid_factor(constraints.ros_bound);
  const std::vector<double>& profile = stream.cvr_profile;
  const double max_action = options.max_action;
  market::Policy policy = [&](const market::EpisodeHistory& h) {
    return expert_step_action(factor, profile[h.step()], max_action);
  };
  result.trajectory = market::run_episode(policy, stream, constraints, max_action);
  result.trajectory.source = "expert";
  result.trajectory.policy = "expert";
  return result;
}

ExpertResult generate_expert_trajectory(const market::MarketConfig& config,
                                        const CampaignConstraints& constraints,
                                        const SolverOptions& options) {
  SolverOptions opts = options;
  opts.max_action = config.max_action;
  ExpertResult r = generate_expert_trajectory(market::generate_stream(config), constraints, opts);
  r.trajectory.seed = config.seed;
  return r;
}

}  // namespace ebaret::expert
