#include "ebaret/market_sim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <utility>

#include "ebaret/errors.hpp"
#include "ebaret/log.hpp"
#include "ebaret/random.hpp"

namespace ebaret {

void CampaignConstraints::validate() const {
  if (!std::isfinite(budget) || budget < 0.0) throw InputError("budget must be finite and >= 0");
  if (!std::isfinite(ros_bound) || ros_bound <= 0.0) throw InputError("ros_bound must be > 0");
}

double Trajectory::total_reward() const {
  double s = 0.0;
  for (double r : rewards) s += r;
  return s;
}

double Trajectory::total_spend() const {
  double s = 0.0;
  for (double x : spends) s += x;
  return s;
}

double Trajectory::total_value() const {
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

int Trajectory::total_conversions() const {
  int s = 0;
  for (int c : conversions) s += c;
  return s;
}

Transition Trajectory::transition(int t, int bag_len) const {
  Transition tr;
  tr.state = states.at(t);
  tr.action = actions.at(t);
  tr.reward_raw = rewards.at(t);
  if (!rewards_redistributed.empty()) tr.reward_redistributed = rewards_redistributed.at(t);
  if (!rtg.empty()) tr.rtg = rtg.at(t);
  if (!expert_levels.empty()) tr.expert_level = expert_levels.at(t);
  tr.bag_index = t / bag_len;
  tr.pos_in_bag = t % bag_len;
  return tr;
}

namespace market {

void MarketConfig::validate(int bag_len) const {
  if (steps_per_episode <= 0) throw ConfigError("steps_per_episode must be positive");
  if (opportunities_per_step <= 0) throw ConfigError("opportunities_per_step must be positive");
  if (bag_len <= 0 || steps_per_episode % bag_len != 0) {
    throw ConfigError("steps_per_episode must be divisible by the bag length");
  }
  if (!(value_alpha > 0.0) || !(value_beta > 0.0)) throw ConfigError("Beta shape must be positive");
  if (!std::isfinite(competitor_log_mean) || !(competitor_log_sigma > 0.0)) {
    throw ConfigError("competitor lognormal parameters invalid");
  }
  if (!(max_action > 0.0)) throw ConfigError("max_action must be positive");
  if (!cvr_profile.empty()) {
    if (static_cast<int>(cvr_profile.size()) != steps_per_episode) {
      throw ConfigError("cvr_profile length must equal steps_per_episode");
    }
    for (double c : cvr_profile) {
      if (!(c > 0.0 && c <= 2.0)) throw ConfigError("cvr_profile values must lie in (0, 2]");
    }
  }
}

double MarketConfig::cvr_at(int step) const {
  return cvr_profile.empty() ? 1.0 : cvr_profile.at(step);
}

std::vector<double> make_cvr_profile(int steps, std::uint64_t profile_seed, double amplitude,
                                     double noise) {
  Rng rng(profile_seed);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise_dist(0.0, noise);
  const double phase = phase_dist(rng);
  std::vector<double> profile(steps);
  for (int t = 0; t < steps; ++t) {
    const double angle = 2.0 * std::numbers::pi * t / steps + phase;
    const double c = 1.0 + amplitude * std::sin(angle) + noise_dist(rng);
    profile[t] = std::clamp(c, 0.05, 2.0);
  }
  return profile;
}

std::span<const Opportunity> OpportunityStream::step_opportunities(int t) const {
  return std::span<const Opportunity>(opportunities).subspan(static_cast<std::size_t>(t) * per_step,
                                                             per_step);
}

std::span<const double> OpportunityStream::step_draws(int t) const {
  return std::span<const double>(conversion_draws)
      .subspan(static_cast<std::size_t>(t) * per_step, per_step);
}

OpportunityStream generate_stream(const MarketConfig& config) {
  config.validate();
  OpportunityStream stream;
  stream.steps = config.steps_per_episode;
  stream.per_step = config.opportunities_per_step;
  stream.cvr_profile = config.cvr_profile.empty()
                           ? std::vector<double>(config.steps_per_episode, 1.0)
                           : config.cvr_profile;
  stream.reward_signal = config.reward_signal;

  // Separate engines so the conversion draws do not perturb the auction stream.
  Rng auction_rng(derive_seed({config.seed, 1}));
  Rng draw_rng(derive_seed({config.seed, 2}));
  std::lognormal_distribution<double> competitor(config.competitor_log_mean,
                                                 config.competitor_log_sigma);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const std::size_t n = static_cast<std::size_t>(stream.steps) * stream.per_step;
  stream.opportunities.reserve(n);
  stream.conversion_draws.reserve(n);
  for (int t = 0; t < stream.steps; ++t) {
    for (int j = 0; j < stream.per_step; ++j) {
      Opportunity opp;
      opp.value = std::clamp(sample_beta(auction_rng, config.value_alpha, config.value_beta), 1e-9,
                             1.0 - 1e-9);
      opp.competitor_bid = competitor(auction_rng);
      opp.step_index = t;
      stream.opportunities.push_back(opp);
      stream.conversion_draws.push_back(unit(draw_rng));
    }
  }
  return stream;
}

AuctionOutcome run_auction(double bid, const Opportunity& opp, double rng_draw,
                           std::span<const double> cvr_profile) {
  if (!std::isfinite(bid) || bid < 0.0) throw InputError("bid must be finite and non-negative");
  AuctionOutcome out;
  out.won = bid > opp.competitor_bid;
  if (!out.won) return out;
  out.payment = opp.competitor_bid;
  const double p = std::clamp(opp.value * cvr_profile[opp.step_index], 0.0, 1.0);
  out.converted = rng_draw < p;
  return out;
}

StepSettlement settle_step(std::span<const Opportunity> opps, std::span<const double> draws,
                           std::span<const double> cvr_profile, double action,
                           double remaining_budget) {
  StepSettlement s;
  double value_sum = 0.0;
  for (std::size_t j = 0; j < opps.size(); ++j) {
    const Opportunity& opp = opps[j];
    value_sum += opp.value;
    const AuctionOutcome out = run_auction(action * opp.value, opp, draws[j], cvr_profile);
    if (!out.won) continue;
    if (s.spend + out.payment > remaining_budget) continue;  // forfeit
    s.spend += out.payment;
    s.expected_value += opp.value * cvr_profile[opp.step_index];
    s.conversions += out.converted ? 1 : 0;
    s.wins += 1;
  }
  s.mean_value = opps.empty() ? 0.0 : value_sum / static_cast<double>(opps.size());
  return s;
}

Market::Market(const MarketConfig& config, const CampaignConstraints& constraints)
    : Market(generate_stream(config), constraints, config.max_action) {}

Market::Market(OpportunityStream stream, const CampaignConstraints& constraints,
               double max_action)
    : stream_(std::move(stream)),
      constraints_(constraints),
      max_action_(max_action),
      remaining_(constraints.budget) {
  constraints_.validate();
  refresh_state();
}

void Market::refresh_state() {
  const double budget = constraints_.budget;
  const double steps = stream_.steps;
  state_[0] = t_ / steps;
  state_[1] = budget > 0.0 ? std::clamp(remaining_ / budget, 0.0, 1.0) : 0.0;
  state_[2] = budget > 0.0 ? last_spend_ / (budget / steps) : 0.0;
  state_[3] = seen_ > 0 ? static_cast<double>(wins_) / static_cast<double>(seen_) : 0.0;
  state_[4] = wins_ > 0 ? spent_ / static_cast<double>(wins_) : 0.0;
  state_[5] = last_mean_value_;
  state_[6] = t_ < stream_.steps ? stream_.cvr_profile[t_] : 0.0;
  state_[7] = budget > 0.0 ? value_ / budget : 0.0;
}

StepResult Market::step(double action) {
  if (finished()) throw InputError("episode already finished");
  if (!std::isfinite(action)) throw InputError("action must be finite");
  if (action < 0.0 || action > max_action_) {
    const double clamped = std::clamp(action, 0.0, max_action_);
    if (clamp_count_ == 0) {
      std::ostringstream msg;
      msg << "action " << action << " clamped to " << clamped;
      log::warning(msg.str());
    }
    ++clamp_count_;
    action = clamped;
  }

  const StepSettlement s = settle_step(stream_.step_opportunities(t_), stream_.step_draws(t_),
                                       stream_.cvr_profile, action, remaining_);
  remaining_ = std::max(0.0, remaining_ - s.spend);
  spent_ += s.spend;
  value_ += s.expected_value;
  wins_ += s.wins;
  seen_ += stream_.per_step;
  last_spend_ = s.spend;
  last_mean_value_ = s.mean_value;
  ++t_;
  refresh_state();

  StepResult r;
  r.state = state_;
  r.conversions = s.conversions;
  r.reward = stream_.reward_signal == RewardSignal::kExpected ? s.expected_value : s.conversions;
  r.spend = s.spend;
  r.expected_value = s.expected_value;
  r.wins = s.wins;
  return r;
}

Trajectory run_episode(const Policy& policy, const OpportunityStream& stream,
                       const CampaignConstraints& constraints, double max_action) {
  Market market(stream, constraints, max_action);
  Trajectory traj;
  traj.constraints = constraints;
  EpisodeHistory history;
  while (!market.finished()) {
    history.states.push_back(market.state());
    const double raw = policy(history);
    const double action = std::isfinite(raw) ? std::clamp(raw, 0.0, max_action) : raw;
    const StepResult r = market.step(raw);
    traj.states.push_back(history.states.back());
    traj.actions.push_back(action);
    traj.rewards.push_back(r.reward);
    traj.spends.push_back(r.spend);
    traj.values.push_back(r.expected_value);
    traj.conversions.push_back(r.conversions);
    history.actions.push_back(action);
    history.rewards.push_back(r.reward);
  }
  return traj;
}

Trajectory run_episode(const Policy& policy, const MarketConfig& config,
                       const CampaignConstraints& constraints) {
  Trajectory traj = run_episode(policy, generate_stream(config), constraints, config.max_action);
  traj.seed = config.seed;
  return traj;
}

}  // namespace market
}  // namespace ebaret
