#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace ebaret {

inline constexpr int kStateDim = 8;

// [t/T, remaining_budget/B, spend_rate_last_step, cumulative_win_rate,
//  mean_cost_per_win, mean_value_last_step, cvr_profile[t], cumulative_value/B]
using StateVector = std::array<double, kStateDim>;

struct CampaignConstraints {
  double budget = 1.0;
  double ros_bound = 1.0;

  // Budget 0 is accepted as a degenerate "cannot spend" campaign.
  void validate() const;
};

// One timestep view over a Trajectory.
struct Transition {
  StateVector state{};
  double action = 0.0;
  double reward_raw = 0.0;
  double reward_redistributed = 0.0;
  double rtg = 0.0;
  int bag_index = 0;
  int pos_in_bag = 0;
  int expert_level = 0;
};

// One campaign-episode. The prepared fields (sigma_scores onwards) are empty
// until scoring / redistribution / level assignment have run.
struct Trajectory {
  std::string campaign_id;
  std::uint64_t seed = 0;
  int period = -1;
  std::string source = "behavior";  // "behavior" or "expert"
  std::string policy;
  CampaignConstraints constraints;

  std::vector<StateVector> states;
  std::vector<double> actions;
  std::vector<double> rewards;  // per-step reward (conversions or expected conversions)
  std::vector<double> spends;
  std::vector<double> values;   // expected conversions per step
  std::vector<int> conversions; // realized conversions per step

  std::vector<double> sigma_scores;
  std::vector<int> expert_levels;
  std::vector<double> rewards_redistributed;
  std::vector<double> rtg;

  int steps() const { return static_cast<int>(actions.size()); }
  bool is_expert() const { return source == "expert"; }
  double total_reward() const;
  double total_spend() const;
  double total_value() const;
  int total_conversions() const;

  Transition transition(int t, int bag_len) const;
};

}  // namespace ebaret
