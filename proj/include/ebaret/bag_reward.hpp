#pragma once

#include <span>
#include <vector>

#include "ebaret/trajectory.hpp"

namespace ebaret::reward {

struct RedistributionConfig {
  double beta = 0.5;
  int bag_len = 8;
};

// exp(score / beta); score is the post-sigmoid discriminator output in [0,1].
double phi(double score, double beta);

// r_hat_t = phi(score_t) / sum_j phi(score_j) * sum_j r_j over one bag.
std::vector<double> redistribute_bag(std::span<const double> rewards,
                                     std::span<const double> scores, double beta);

// Applies redistribute_bag to each aligned bag of an episode.
std::vector<double> redistribute_episode(std::span<const double> rewards,
                                         std::span<const double> scores,
                                         const RedistributionConfig& config);

// R_0 = episode_total, R_{t+1} = R_t - r_hat_t. The recurrence holds bitwise;
// R_t equals the suffix sum of r_hat up to rounding.
std::vector<double> recompute_rtg(std::span<const double> redistributed, double episode_total);

// Suffix sums of the given per-step rewards, starting from their exact total.
std::vector<double> recompute_rtg(std::span<const double> redistributed);

// Fills rewards_redistributed and rtg from sigma_scores.
void apply_redistribution(Trajectory& traj, const RedistributionConfig& config);

// Raw-reward labels: rewards_redistributed = rewards, rtg = suffix sums.
void apply_raw_rtg(Trajectory& traj);

}  // namespace ebaret::reward
