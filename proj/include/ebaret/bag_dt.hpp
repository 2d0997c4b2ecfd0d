#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ebaret/market_sim.hpp"
#include "ebaret/nn_core.hpp"
#include "ebaret/pu_disc.hpp"
#include "ebaret/trajectory.hpp"

namespace ebaret::dt {

enum class Modality : int { kState = 0, kReturn = 1, kAction = 2 };

// How the return token is filled at inference.
enum class ReturnMode {
  kPredicted,  // the model's own RTG head output for the current step
  kManual,     // fixed target decremented by realized rewards (classic DT)
  kNone,       // no return tokens at all (behavior cloning)
};

struct ModelConfig {
  int d_model = 64;
  int layers = 2;
  int heads = 4;
  int context_steps = 48;
  int bag_len = 8;
  int k_levels = 2;

  ReturnMode return_mode = ReturnMode::kPredicted;
  bool level_embedding = true;
  bool bag_position = true;

  double lr = 1e-3;
  double min_lr_ratio = 0.1;
  int warmup_steps = 20;
  double grad_clip = 1.0;
  int batch_size = 16;
  int train_steps = 1500;
  std::uint64_t seed = 11;
  double max_action = 10.0;

  void validate() const;
  bool has_return_tokens() const { return return_mode != ReturnMode::kNone; }
  bool has_rtg_head() const { return return_mode == ReturnMode::kPredicted; }
  int tokens_per_step() const { return has_return_tokens() ? 3 : 2; }
  int max_tokens() const { return context_steps * tokens_per_step(); }
};

// Component switches of the full method, one per ablation variant.
struct AblationFlags {
  bool no_expert = false;         // drop expert data, expert tokens and the discriminator
  bool no_pu = false;             // discriminator trained with plain cross-entropy
  bool no_expert_action = false;  // no expert token at train or test time
  bool no_bag_reward = false;     // RTG labels from raw rewards

  // Throws ConfigError when no_expert is combined with another flag.
  void validate() const;
};

// Fixed input/label scaling fitted on the training corpus.
struct Scaling {
  StateVector state_mean{};
  StateVector state_std{1, 1, 1, 1, 1, 1, 1, 1};
  double rtg_scale = 1.0;
  double action_scale = 1.0;
  double manual_target = 0.0;  // DT inference target, 90th percentile of R_0

  static Scaling fit(std::span<const Trajectory> dataset);
};

// One (possibly partial) episode in model coordinates. rtg/actions may be
// shorter than states when decoding a prefix.
struct SequenceInput {
  std::vector<StateVector> states;
  std::vector<double> rtg;
  std::vector<double> actions;
  std::vector<int> levels;

  static SequenceInput from_trajectory(const Trajectory& traj, bool with_levels);
  int steps() const { return static_cast<int>(states.size()); }
};

struct TokenSequence {
  nn::Matrix embeddings;  // (tokens, d_model)
  std::vector<Modality> modality;
  std::vector<int> step;
  std::vector<int> bag_position;
  std::vector<int> level;

  int size() const { return static_cast<int>(modality.size()); }
};

struct Prediction {
  std::vector<double> rtg;     // model units (label / rtg_scale); empty without an RTG head
  std::vector<double> action;  // model units (action / action_scale)
};

struct LossTerms {
  double rtg = 0.0;
  double action = 0.0;
  double total() const { return rtg + action; }
};

// Index of a step's token in the interleaved <s_t, R_t, a_t> sequence.
int token_index(int step, Modality modality, int tokens_per_step);

namespace detail {

struct BlockCache {
  nn::LayerNormCache ln1;
  nn::Matrix h1;
  nn::CausalSelfAttention::Cache attn;
  nn::Matrix mid;
  nn::LayerNormCache ln2;
  nn::Matrix h2;
  nn::Matrix pre;
  nn::Matrix act;
};

class Block {
 public:
  Block() = default;
  Block(nn::ParameterSet& params, const std::string& name, int d_model, int heads, int max_len,
        Rng& rng, double init_std);

  nn::Matrix forward(const nn::Matrix& x, BlockCache* cache) const;
  nn::Matrix backward(const nn::Matrix& dy, const BlockCache& cache) const;
  nn::Matrix forward_step(const nn::Matrix& x_row, nn::CausalSelfAttention::KvCache& kv) const;

 private:
  nn::LayerNorm ln1_;
  nn::CausalSelfAttention attn_;
  nn::LayerNorm ln2_;
  nn::Linear fc1_;
  nn::Linear fc2_;
};

}  // namespace detail

class BagDecisionTransformer {
 public:
  explicit BagDecisionTransformer(const ModelConfig& config);

  BagDecisionTransformer(BagDecisionTransformer&&) = default;
  BagDecisionTransformer& operator=(BagDecisionTransformer&&) = default;

  // Embeds the first num_tokens tokens (all when negative). Throws SchemaError
  // when rtg or level fields the config needs are missing.
  TokenSequence tokenize(const SequenceInput& input, int num_tokens = -1) const;

  Prediction forward(const SequenceInput& input, int num_tokens = -1) const;

  // Loss on one sequence; adds weight * d(loss)/d(theta) into the grads.
  LossTerms accumulate_gradients(const SequenceInput& input, double weight);
  LossTerms evaluate_loss(const SequenceInput& input) const;

  // Token-by-token decoding with cached keys/values.
  class Decoder {
   public:
    explicit Decoder(const BagDecisionTransformer& model);
    // Feeds a token and returns the final-layer hidden row for it.
    nn::Matrix push(Modality modality, int step, int level, std::span<const double> input);
    double rtg_from(const nn::Matrix& hidden) const;
    double action_from(const nn::Matrix& hidden) const;
    int length() const { return length_; }

   private:
    const BagDecisionTransformer* model_;
    std::vector<nn::CausalSelfAttention::KvCache> kv_;
    int length_ = 0;
  };

  const ModelConfig& config() const { return config_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }
  Scaling& scaling() { return scaling_; }
  const Scaling& scaling() const { return scaling_; }

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static BagDecisionTransformer load(const std::filesystem::path& path);
  nlohmann::json checkpoint() const;

 private:
  struct ForwardCache;

  nn::Matrix embed(const SequenceInput& input, int num_tokens, TokenSequence* tokens) const;
  nn::Matrix embed_token(Modality modality, int step, int level,
                         std::span<const double> input) const;
  Prediction run(const SequenceInput& input, int num_tokens, ForwardCache* cache) const;

  ModelConfig config_;
  Scaling scaling_;
  nn::ParameterSet params_;
  nn::Linear state_in_;
  nn::Linear rtg_in_;
  nn::Linear action_in_;
  nn::Embedding modality_emb_;
  nn::Embedding time_emb_;
  nn::Embedding bag_pos_emb_;
  nn::Embedding level_emb_;
  std::vector<detail::Block> blocks_;
  nn::LayerNorm final_ln_;
  nn::Linear rtg_head_;
  nn::Linear action_head_;
};

// Summed squared error in model units; rtg term omitted when the model
// has no RTG head.
LossTerms sequence_loss(std::span<const double> rtg_pred, std::span<const double> action_pred,
                        std::span<const double> rtg_target, std::span<const double> action_target);

struct LossRecord {
  int step = 0;
  double rtg_loss = 0.0;
  double action_loss = 0.0;
};

struct TrainResult {
  BagDecisionTransformer model;
  std::vector<LossRecord> log;
};

// Mini-batch Adam on the dataset; batch loss = per-sequence loss averaged
// over the batch. Deterministic given config.seed.
// on_step runs after each optimizer step; returning false ends training early.
using StepCallback = std::function<bool(const BagDecisionTransformer&, const LossRecord&)>;
TrainResult train(std::span<const Trajectory> dataset, const ModelConfig& config,
                  const StepCallback& on_step = {});

std::string loss_log_csv(std::span<const LossRecord> log);

struct InferenceOptions {
  // Within a bag, decrement the return token by the redistributed reward of
  // the observed part of the bag instead of re-predicting it. Needs a
  // discriminator; the first step of each bag is always re-predicted.
  bool live_bag_decrement = false;
  const pu::DiscriminatorModel* discriminator = nullptr;
  double beta = 0.5;
};

// Stateful per-episode policy. The expert-level token is fixed to k-1 for
// every step; the return token is the clamped self-predicted RTG (or the
// manual DT target); the emitted action is clamped to [0, max_action].
class InferencePolicy {
 public:
  InferencePolicy(const BagDecisionTransformer& model, InferenceOptions options = {});

  double act(const market::EpisodeHistory& history);

  // Values fed as the return token so far (model input, unscaled).
  const std::vector<double>& return_inputs() const { return return_inputs_; }
  const std::vector<int>& level_inputs() const { return level_inputs_; }

 private:
  const BagDecisionTransformer* model_;
  InferenceOptions options_;
  BagDecisionTransformer::Decoder decoder_;
  int next_step_ = 0;
  std::vector<double> return_inputs_;
  std::vector<int> level_inputs_;
  std::vector<double> bag_phi_;
};

// Wraps InferencePolicy as a market::Policy (fresh state per call site).
market::Policy make_policy(const BagDecisionTransformer& model, InferenceOptions options = {});

}  // namespace ebaret::dt
