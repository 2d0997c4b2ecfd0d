#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ebaret/trajectory.hpp"

namespace ebaret::market {

struct Opportunity {
  double value = 0.0;           // predicted conversion probability, (0,1)
  double competitor_bid = 0.0;  // highest competing bid
  int step_index = 0;
};

struct AuctionOutcome {
  bool won = false;
  double payment = 0.0;
  bool converted = false;
};

// What a step reports as reward: realized conversions, or their expectation
// sum(v * cvr) over won auctions.
enum class RewardSignal { kConversions, kExpected };

struct MarketConfig {
  int steps_per_episode = 48;
  int opportunities_per_step = 100;
  // Beta(value_alpha, value_beta) for the predicted conversion probability.
  double value_alpha = 2.0;
  double value_beta = 60.0;
  // Lognormal competitor bids: log(bid) ~ N(competitor_log_mean, competitor_log_sigma).
  double competitor_log_mean = -2.9;
  double competitor_log_sigma = 0.5;
  // Intraday conversion multiplier; empty means flat 1.0.
  std::vector<double> cvr_profile;
  std::uint64_t seed = 0;
  double max_action = 10.0;
  RewardSignal reward_signal = RewardSignal::kConversions;

  void validate(int bag_len = 1) const;
  double cvr_at(int step) const;
};

// Sinusoid-plus-noise intraday conversion profile, values in [0.05, 2].
std::vector<double> make_cvr_profile(int steps, std::uint64_t profile_seed,
                                     double amplitude = 0.5, double noise = 0.1);

// The full, policy-independent randomness of one episode.
struct OpportunityStream {
  int steps = 0;
  int per_step = 0;
  std::vector<Opportunity> opportunities;  // step-major
  std::vector<double> conversion_draws;    // uniform [0,1), one per opportunity
  std::vector<double> cvr_profile;
  RewardSignal reward_signal = RewardSignal::kConversions;

  std::span<const Opportunity> step_opportunities(int t) const;
  std::span<const double> step_draws(int t) const;
};

OpportunityStream generate_stream(const MarketConfig& config);

// Second-price auction for a single opportunity. Ties lose.
AuctionOutcome run_auction(double bid, const Opportunity& opp, double rng_draw,
                           std::span<const double> cvr_profile);

struct StepSettlement {
  double spend = 0.0;
  double expected_value = 0.0;
  int conversions = 0;
  int wins = 0;
  double mean_value = 0.0;  // mean predicted value over the step's opportunities
};

// Resolves every auction of one step with bid = action * value. An auction
// whose payment would push spend past remaining_budget is forfeited.
StepSettlement settle_step(std::span<const Opportunity> opps, std::span<const double> draws,
                           std::span<const double> cvr_profile, double action,
                           double remaining_budget);

struct StepResult {
  StateVector state{};
  double reward = 0.0;
  int conversions = 0;
  double spend = 0.0;
  double expected_value = 0.0;
  int wins = 0;
};

class Market {
 public:
  Market(const MarketConfig& config, const CampaignConstraints& constraints);
  Market(OpportunityStream stream, const CampaignConstraints& constraints, double max_action);

  const StateVector& state() const { return state_; }
  int step_index() const { return t_; }
  bool finished() const { return t_ >= stream_.steps; }
  double remaining_budget() const { return remaining_; }
  int clamp_count() const { return clamp_count_; }
  const OpportunityStream& stream() const { return stream_; }

  // Out-of-range actions are clamped to [0, max_action] with a warning;
  // non-finite actions throw InputError.
  StepResult step(double action);

 private:
  void refresh_state();

  OpportunityStream stream_;
  CampaignConstraints constraints_;
  double max_action_;
  int t_ = 0;
  double remaining_;
  double spent_ = 0.0;
  double value_ = 0.0;
  long wins_ = 0;
  long seen_ = 0;
  double last_spend_ = 0.0;
  double last_mean_value_ = 0.0;
  int clamp_count_ = 0;
  StateVector state_{};
};

// What a policy sees before acting at step t: states[0..t], and the actions
// and rewards of steps 0..t-1.
struct EpisodeHistory {
  std::vector<StateVector> states;
  std::vector<double> actions;
  std::vector<double> rewards;

  int step() const { return static_cast<int>(states.size()) - 1; }
};

using Policy = std::function<double(const EpisodeHistory&)>;

Trajectory run_episode(const Policy& policy, const MarketConfig& config,
                       const CampaignConstraints& constraints);

Trajectory run_episode(const Policy& policy, const OpportunityStream& stream,
                       const CampaignConstraints& constraints, double max_action);

}  // namespace ebaret::market
