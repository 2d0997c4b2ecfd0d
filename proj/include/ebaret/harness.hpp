#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ebaret/bag_dt.hpp"
#include "ebaret/expert_gen.hpp"
#include "ebaret/market_sim.hpp"
#include "ebaret/pu_disc.hpp"
#include "ebaret/trajectory.hpp"

namespace ebaret::harness {

// Offline logging mix. Weights must be non-negative and sum to 1.
struct BehaviorMix {
  double random = 0.3;        // per-step uniform scale in [0, 2 f*]
  double fixed = 0.3;         // constant scale kappa * f*, kappa ~ U(0.3, 1.7), ignores cvr
  double noisy_expert = 0.4;  // expert action * lognormal(0, noise_sigma)
  double noise_sigma = 0.3;

  void validate() const;
};

struct ExperimentConfig {
  market::MarketConfig market;  // seed and cvr_profile are set per episode
  double cvr_amplitude = 0.5;
  double cvr_noise = 0.1;
  std::vector<CampaignConstraints> campaigns;
  BehaviorMix mix;

  std::vector<int> train_periods;
  int train_episodes_per_period = 1;
  std::vector<int> test_periods;
  int test_seeds = 5;
  std::uint64_t seed = 2024;

  dt::ModelConfig model;
  pu::DiscriminatorConfig discriminator;
  expert::SolverOptions solver;
  double beta = 0.5;
  std::filesystem::path output_dir = "out";

  static ExperimentConfig defaults();
  void validate() const;

  // Intraday conversion multiplier, fixed per campaign.
  std::vector<double> cvr_profile(int campaign) const;
  std::uint64_t train_stream_seed(int period, int replica, int campaign) const;
  std::uint64_t test_stream_seed(int period, int seed_index, int campaign) const;
  market::OpportunityStream stream(int campaign, std::uint64_t stream_seed) const;
};

nlohmann::json to_json(const ExperimentConfig& config);
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

std::string campaign_name(int index);

struct Datasets {
  std::vector<Trajectory> offline;
  std::vector<Trajectory> expert;
};

// Offline behavior set plus the expert set on the same streams.
Datasets gen_data(const ExperimentConfig& config);
std::vector<Trajectory> gen_expert(const ExperimentConfig& config);

// offline.jsonl, expert.jsonl and manifest.json under output_dir.
void write_datasets(const ExperimentConfig& config, const Datasets& data);
Datasets read_datasets(const std::filesystem::path& dir);
nlohmann::json make_manifest(const ExperimentConfig& config, const Datasets& data);

// True when no training trajectory uses a test stream seed.
bool check_isolation(const ExperimentConfig& config, const Datasets& data);

// ---- methods ----

enum class BaseMethod { kEbaret, kDt, kBc };

struct MethodSpec {
  std::string name;
  BaseMethod base = BaseMethod::kEbaret;
  dt::AblationFlags ablate;

  bool uses_discriminator() const { return base == BaseMethod::kEbaret && !ablate.no_expert; }
  bool uses_expert_data() const { return uses_discriminator(); }
};

// Accepts ebaret, dt, bc and ebaret_noE / _noPU / _noEA / _noBR (combinable,
// e.g. ebaret_noPU_noBR). Extra ablations use the CLI names no-expert,
// no-pu, no-expert-action, no-bag-reward. Throws ConfigError otherwise.
MethodSpec parse_method(const std::string& name, const std::vector<std::string>& ablations = {});
std::vector<std::string> all_methods();

dt::ModelConfig model_config_for(const ExperimentConfig& config, const MethodSpec& spec);

pu::DiscriminatorModel train_disc(const ExperimentConfig& config, const Datasets& data,
                                  pu::LossKind loss);

// Training corpus for a method: scored, leveled and labeled. Throws
// InputError if expert trajectories do not have higher mean R_0 than the
// offline ones.
std::vector<Trajectory> prep(const ExperimentConfig& config, const Datasets& data,
                             const MethodSpec& spec, const pu::DiscriminatorModel* disc);

dt::TrainResult train_method(const ExperimentConfig& config, const MethodSpec& spec,
                             std::span<const Trajectory> corpus);

// ---- evaluation ----

struct EpisodeRecord {
  int period = 0;
  int seed = 0;
  int campaign = 0;
  double conversions = 0.0;  // expected
  int realized = 0;
  double spend = 0.0;
  double optimal = 0.0;  // hindsight R* on the same stream
};

struct EvalRow {
  int period = 0;
  int seed = 0;
  double conversions = 0.0;  // summed over campaigns
  double spend = 0.0;
  int realized = 0;
};

struct EvalReport {
  std::string method;
  std::vector<EvalRow> rows;
  std::vector<EpisodeRecord> episodes;

  double grand_mean() const;
  double standard_error() const;
  std::map<int, double> period_means() const;
  std::string metrics_csv() const;  // period,seed,method,conversions,spend
  std::string episodes_csv() const;
};

nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

// Hindsight optimum per test episode, keyed by stream seed.
using OptimaCache = std::map<std::uint64_t, double>;

EvalReport evaluate(const ExperimentConfig& config, const std::string& method,
                    const std::function<market::Policy()>& make_policy,
                    OptimaCache* optima = nullptr);

EvalReport evaluate_model(const ExperimentConfig& config, const std::string& method,
                          const dt::BagDecisionTransformer& model, OptimaCache* optima = nullptr);

// ---- ratio report ----

struct RatioReport {
  std::vector<double> ratios;
  std::vector<int> histogram;  // 20 equal bins over [0, 1]; the last also takes ratios > 1
  double median = 0.0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
  int above_one = 0;  // ratios > 1 + 1e-9

  std::string histogram_csv() const;
  nlohmann::json summary() const;
};

// R / R* per trajectory using expected conversions. R* comes from the
// expert trajectory on the same stream seed; R* = 0 gives ratio 1 when R = 0.
RatioReport ratio_report(std::span<const Trajectory> trajectories,
                         std::span<const Trajectory> experts);

// ---- whole pipeline ----

struct PipelineResult {
  Datasets data;
  std::map<std::string, EvalReport> reports;
  std::map<std::string, std::vector<dt::LossRecord>> loss_logs;
};

// Data, both discriminators, every listed method, evaluation. Writes all
// artifacts under output_dir when write_files is set.
PipelineResult run_pipeline(const ExperimentConfig& config, const std::vector<std::string>& methods,
                            bool write_files);

std::string summary_markdown(const std::map<std::string, EvalReport>& reports,
                             const RatioReport* ratios);

}  // namespace ebaret::harness
