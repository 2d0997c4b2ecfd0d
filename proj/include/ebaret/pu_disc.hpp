#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ebaret/nn_core.hpp"
#include "ebaret/trajectory.hpp"

namespace ebaret::pu {

inline constexpr int kInputDim = kStateDim + 1;  // state ++ action

enum class LossKind {
  kNonNegativePu,  // expert = labeled positive, offline = unlabeled
  kCrossEntropy,   // offline treated as negative (ablation)
};

struct DiscriminatorConfig {
  int hidden = 64;
  double class_prior = 0.01;  // eta
  LossKind loss = LossKind::kNonNegativePu;
  int epochs = 30;
  int batch_size = 256;
  double lr = 1e-3;
  std::uint64_t seed = 7;
};

// Per-feature standardization of the 9-dim (state, action) input.
struct InputNormalizer {
  std::vector<double> mean = std::vector<double>(kInputDim, 0.0);
  std::vector<double> stddev = std::vector<double>(kInputDim, 1.0);

  static InputNormalizer fit(const nn::Matrix& inputs);
  nn::Matrix apply(const nn::Matrix& inputs) const;
};

// d(s, a): MLP 9 -> hidden -> hidden -> 1 with GELU activations, returning a
// logit. The output layer starts at zero, so a fresh model scores 0.
class DiscriminatorModel {
 public:
  struct Cache {
    nn::Matrix x;
    nn::Matrix pre1;
    nn::Matrix h1;
    nn::Matrix pre2;
    nn::Matrix h2;
  };

  explicit DiscriminatorModel(int hidden = 64, std::uint64_t seed = 7, double class_prior = 0.01);

  DiscriminatorModel(DiscriminatorModel&&) = default;
  DiscriminatorModel& operator=(DiscriminatorModel&&) = default;

  double score(const StateVector& state, double action) const;
  // Raw (un-normalized) inputs, one row per transition; returns logits.
  std::vector<double> score_batch(const nn::Matrix& inputs) const;

  std::vector<double> forward(const nn::Matrix& inputs, Cache* cache) const;
  // Backprop of d(loss)/d(logit) into parameter grads.
  void backward(std::span<const double> dlogits, const Cache& cache) const;

  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  InputNormalizer& normalizer() { return normalizer_; }
  const InputNormalizer& normalizer() const { return normalizer_; }
  double class_prior() const { return class_prior_; }
  int hidden() const { return hidden_; }

  std::vector<double> loss_curve;

  void save(const std::filesystem::path& path) const;
  static DiscriminatorModel load(const std::filesystem::path& path);

 private:
  int hidden_;
  double class_prior_;
  nn::ParameterSet params_;
  nn::Linear l1_;
  nn::Linear l2_;
  nn::Linear out_;
  InputNormalizer normalizer_;
};

double sigmoid(double logit);

struct RiskTerms {
  double loss = 0.0;
  double positive_risk = 0.0;       // E_E[-log sigma(d)]
  double offline_negative = 0.0;    // E_O[-log(1 - sigma(d))]
  double expert_negative = 0.0;     // E_E[-log(1 - sigma(d))]
  bool clamped = false;             // max(0, .) selected 0
};

// eta * E_E[-log s] + max(0, E_O[-log(1-s)] - eta * E_E[-log(1-s)]).
// When the grad spans are non-empty they receive d(loss)/d(logit).
RiskTerms nnpu_risk(std::span<const double> expert_logits, std::span<const double> offline_logits,
                    double eta, std::span<double> expert_grad = {},
                    std::span<double> offline_grad = {});

// E_E[-log s] + E_O[-log(1-s)].
RiskTerms cross_entropy_risk(std::span<const double> expert_logits,
                             std::span<const double> offline_logits,
                             std::span<double> expert_grad = {},
                             std::span<double> offline_grad = {});

double nnpu_loss(const DiscriminatorModel& model, const nn::Matrix& expert_batch,
                 const nn::Matrix& offline_batch, double eta);

// Stacks [state, action] rows of every transition.
nn::Matrix transition_inputs(std::span<const Trajectory> trajectories);

DiscriminatorModel train_discriminator(const nn::Matrix& expert_set, const nn::Matrix& offline_set,
                                       const DiscriminatorConfig& config);

DiscriminatorModel train_discriminator(std::span<const Trajectory> expert_set,
                                       std::span<const Trajectory> offline_set,
                                       const DiscriminatorConfig& config);

// Offline transitions are binned into k equal-frequency quantile levels of
// the score; transitions with expert_flag set get level k-1. Throws
// DegenerateBinning when the offline scores have fewer than k distinct values.
std::vector<int> assign_levels(std::span<const double> scores, int k,
                               std::span<const bool> expert_flags);

// Fills sigma_scores for every step.
void score_trajectory(const DiscriminatorModel& model, Trajectory& traj);

// Scores every trajectory and assigns levels jointly over the whole corpus.
void score_and_level(const DiscriminatorModel& model, std::span<Trajectory> trajectories, int k);

}  // namespace ebaret::pu
