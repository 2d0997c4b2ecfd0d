#pragma once

#include <span>
#include <vector>

#include "ebaret/market_sim.hpp"
#include "ebaret/trajectory.hpp"

namespace ebaret::expert {

// Budget and RoS Lagrange multipliers of the per-campaign bidding LP.
struct DualMultipliers {
  double alpha_b = 1.0;
  double alpha_c = 0.0;

  // (1 + alpha_c * C) / (alpha_b + alpha_c); throws InvalidMultipliers when
  // the denominator vanishes.
  double bid_factor(double ros_bound) const;
};

// b = (1 + alpha_c * C) / (alpha_b + alpha_c) * value
double expert_bid(double value, const DualMultipliers& multipliers, double ros_bound);

struct ReplaySummary {
  double total_value = 0.0;  // expected conversions, sum of v_j * cvr_profile[t]
  double total_spend = 0.0;
  double ros = 0.0;  // spend / value, 0 when value is 0
  // Same bids with the budget ignored (no forfeits). Monotone in the bid
  // factor, which is what the multiplier search bisects on.
  double uncapped_value = 0.0;
  double uncapped_spend = 0.0;
  int wins = 0;
};

// Per-step action of the expert policy: bid_factor * cvr_profile[t], clipped
// to [0, max_action]. Bids in the market are action * v_j, so the submitted
// bid equals the multiplier bid on the effective value v_j * cvr_profile[t].
double expert_step_action(double bid_factor, double cvr, double max_action);

// Hindsight replay of the multiplier bids against the recorded competitor
// bids, with the same sequential budget forfeiture the market applies.
ReplaySummary replay(std::span<const market::Opportunity> opportunities,
                     std::span<const double> cvr_profile, const DualMultipliers& multipliers,
                     const CampaignConstraints& constraints, double max_action = 10.0);

struct SolverOptions {
  double alpha_c_max = 4.0;
  double alpha_c_step = 0.25;
  double alpha_b_min = 1e-4;
  double alpha_b_max = 1e3;
  int bisection_iters = 80;
  // Threshold breakpoints examined around each bisection point; streams of at
  // most this many opportunities are scanned exhaustively.
  int breakpoint_window = 256;
  double ros_tolerance = 1e-6;
  double max_action = 10.0;
};

struct MultiplierSolution {
  DualMultipliers multipliers;
  bool feasible = false;
  ReplaySummary summary;
};

// Outer grid over alpha_c, inner bisection on alpha_b for full budget use,
// then a scan of nearby threshold breakpoints under forfeiture. Returns the
// best feasible point; when none exists returns the most conservative grid
// point with feasible=false.
MultiplierSolution solve_multipliers(std::span<const market::Opportunity> opportunities,
                                     std::span<const double> cvr_profile,
                                     const CampaignConstraints& constraints,
                                     const SolverOptions& options = {});

inline constexpr int kBruteForceLimit = 20;

// Exact optimum over all win subsets (payments = competitor bids). Throws
// SizeError above kBruteForceLimit opportunities.
double brute_force_optimal(std::span<const market::Opportunity> opportunities,
                           std::span<const double> cvr_profile,
                           const CampaignConstraints& constraints);

struct ExpertResult {
  Trajectory trajectory;
  MultiplierSolution solution;
};

ExpertResult generate_expert_trajectory(const market::MarketConfig& config,
                                        const CampaignConstraints& constraints,
                                        const SolverOptions& options = {});

ExpertResult generate_expert_trajectory(const market::OpportunityStream& stream,
                                        const CampaignConstraints& constraints,
                                        const SolverOptions& options = {});

}  // namespace ebaret::expert
