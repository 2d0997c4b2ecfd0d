#include "ebaret/bag_reward.hpp"

#include <cmath>

#include "ebaret/errors.hpp"

namespace ebaret::reward {

double phi(double score, double beta) {
  if (!(beta > 0.0)) throw InputError("beta must be positive");
  return std::exp(score / beta);
}

std::vector<double> redistribute_bag(std::span<const double> rewards,
                                     std::span<const double> scores, double beta) {
  if (rewards.size() != scores.size()) throw ShapeError("rewards/scores length mismatch");
  if (!(beta > 0.0)) throw InputError("beta must be positive");
  std::vector<double> weights(rewards.size());
  double weight_sum = 0.0;
  double reward_sum = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    weights[i] = phi(scores[i], beta);
    weight_sum += weights[i];
    reward_sum += rewards[i];
  }
  std::vector<double> out(rewards.size(), 0.0);
  if (reward_sum == 0.0) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    out[i] = weights[i] / weight_sum * reward_sum;
  }
  return out;
}

std::vector<double> redistribute_episode(std::span<const double> rewards,
                                         std::span<const double> scores,
                                         const RedistributionConfig& config) {
  if (rewards.size() != scores.size()) throw ShapeError("rewards/scores length mismatch");
  const std::size_t bag = static_cast<std::size_t>(config.bag_len);
  if (bag == 0 || rewards.size() % bag != 0) {
    throw ConfigError("episode length must be a multiple of the bag length");
  }
  std::vector<double> out;
  out.reserve(rewards.size());
  for (std::size_t start = 0; start < rewards.size(); start += bag) {
    const auto part =
        redistribute_bag(rewards.subspan(start, bag), scores.subspan(start, bag), config.beta);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<double> recompute_rtg(std::span<const double> redistributed, double episode_total) {
  std::vector<double> rtg(redistributed.size());
  double r = episode_total;
  for (std::size_t t = 0; t < redistributed.size(); ++t) {
    rtg[t] = r;
    r = r - redistributed[t];
  }
  return rtg;
}

std::vector<double> recompute_rtg(std::span<const double> redistributed) {
  double total = 0.0;
  for (double x : redistributed) total += x;
  return recompute_rtg(redistributed, total);
}

void apply_redistribution(Trajectory& traj, const RedistributionConfig& config) {
  if (traj.sigma_scores.size() != traj.rewards.size()) {
    throw SchemaError("trajectory has no discriminator scores");
  }
  traj.rewards_redistributed = redistribute_episode(traj.rewards, traj.sigma_scores, config);
  traj.rtg = recompute_rtg(traj.rewards_redistributed, traj.total_reward());
}

void apply_raw_rtg(Trajectory& traj) {
  traj.rewards_redistributed = traj.rewards;
  traj.rtg = recompute_rtg(traj.rewards, traj.total_reward());
}

}  // namespace ebaret::reward
