#include "ebaret/harness.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include "ebaret/bag_reward.hpp"
#include "ebaret/errors.hpp"
#include "ebaret/log.hpp"
#include "ebaret/random.hpp"
#include "ebaret/trajectory_io.hpp"

namespace ebaret::harness {

using nlohmann::json;

namespace {

constexpr std::uint64_t kTrainTag = 0x7a;
constexpr std::uint64_t kTestTag = 0x7e;
constexpr std::uint64_t kProfileTag = 0xc7;
constexpr std::uint64_t kBehaviorTag = 0xbe;

std::string fmt(double x, int precision = 6) {
  std::ostringstream out;
  out << std::setprecision(precision) << x;
  return out.str();
}


}  // namespace

void BehaviorMix::validate() const {
  if (random < 0.0 || fixed < 0.0 || noisy_expert < 0.0) {
    throw ConfigError("behavior mix weights must be non-negative");
  }
  if (std::abs(random + fixed + noisy_expert - 1.0) > 1e-9) {
    throw ConfigError("behavior mix weights must sum to 1");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.market.reward_signal = market::RewardSignal::kExpected;
  // RoS bounds are slack: the market does not enforce them, so a tight bound
  // would let unconstrained behavior beat the hindsight optimum.
  c.campaigns = {{0.6, 1.0}, {0.8, 0.8}, {1.0, 1.0}, {1.2, 0.6},
                 {1.5, 1.0}, {2.0, 0.8}, {0.9, 0.5}, {1.8, 0.5}};
  for (int p = 1; p <= 20; ++p) c.train_periods.push_back(p);
  for (int p = 21; p <= 27; ++p) c.test_periods.push_back(p);
  return c;
}

void ExperimentConfig::validate() const {
  market.validate(model.bag_len);
  if (campaigns.empty()) throw ConfigError("campaign roster is empty");
  for (const auto& c : campaigns) c.validate();
  mix.validate();
  model.validate();
  if (model.context_steps < market.steps_per_episode) {
    throw ConfigError("model context shorter than an episode");
  }
  if (train_periods.empty() || test_periods.empty()) throw ConfigError("no train or test periods");
  if (train_episodes_per_period < 1 || test_seeds < 1) throw ConfigError("episode counts must be >= 1");
  for (int p : test_periods) {
    if (std::find(train_periods.begin(), train_periods.end(), p) != train_periods.end()) {
      throw ConfigError("train and test periods overlap");
    }
  }
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
}

std::vector<double> ExperimentConfig::cvr_profile(int campaign) const {
  return market::make_cvr_profile(market.steps_per_episode,
                                  derive_seed({seed, kProfileTag, static_cast<std::uint64_t>(campaign)}),
                                  cvr_amplitude, cvr_noise);
}

std::uint64_t ExperimentConfig::train_stream_seed(int period, int replica, int campaign) const {
  return derive_seed({seed, kTrainTag, static_cast<std::uint64_t>(period),
                      static_cast<std::uint64_t>(replica), static_cast<std::uint64_t>(campaign)});
}

std::uint64_t ExperimentConfig::test_stream_seed(int period, int seed_index, int campaign) const {
  return derive_seed({seed, kTestTag, static_cast<std::uint64_t>(period),
                      static_cast<std::uint64_t>(seed_index), static_cast<std::uint64_t>(campaign)});
}

market::OpportunityStream ExperimentConfig::stream(int campaign, std::uint64_t stream_seed) const {
  market::MarketConfig mc = market;
  mc.seed = stream_seed;
  mc.cvr_profile = cvr_profile(campaign);
  return market::generate_stream(mc);
}

std::string campaign_name(int index) { return "c" + std::to_string(index); }

// ---- config json ----

json to_json(const ExperimentConfig& c) {
  json campaigns = json::array();
  for (const auto& k : c.campaigns) campaigns.push_back({{"budget", k.budget}, {"ros_bound", k.ros_bound}});
  const dt::ModelConfig& m = c.model;
  const pu::DiscriminatorConfig& d = c.discriminator;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir.string()},
      {"market",
       {{"steps_per_episode", c.market.steps_per_episode},
        {"opportunities_per_step", c.market.opportunities_per_step},
        {"value_alpha", c.market.value_alpha},
        {"value_beta", c.market.value_beta},
        {"competitor_log_mean", c.market.competitor_log_mean},
        {"competitor_log_sigma", c.market.competitor_log_sigma},
        {"max_action", c.market.max_action},
        {"reward_signal",
         c.market.reward_signal == market::RewardSignal::kExpected ? "expected" : "conversions"},
        {"cvr_amplitude", c.cvr_amplitude},
        {"cvr_noise", c.cvr_noise}}},
      {"campaigns", campaigns},
      {"behavior_mix",
       {{"random", c.mix.random},
        {"fixed", c.mix.fixed},
        {"noisy_expert", c.mix.noisy_expert},
        {"noise_sigma", c.mix.noise_sigma}}},
      {"train_periods", c.train_periods},
      {"train_episodes_per_period", c.train_episodes_per_period},
      {"test_periods", c.test_periods},
      {"test_seeds", c.test_seeds},
      {"beta", c.beta},
      {"model",
       {{"d_model", m.d_model},
        {"layers", m.layers},
        {"heads", m.heads},
        {"context_steps", m.context_steps},
        {"bag_len", m.bag_len},
        {"k_levels", m.k_levels},
        {"lr", m.lr},
        {"min_lr_ratio", m.min_lr_ratio},
        {"warmup_steps", m.warmup_steps},
        {"grad_clip", m.grad_clip},
        {"batch_size", m.batch_size},
        {"train_steps", m.train_steps},
        {"seed", m.seed}}},
      {"discriminator",
       {{"hidden", d.hidden},
        {"class_prior", d.class_prior},
        {"epochs", d.epochs},
        {"batch_size", d.batch_size},
        {"lr", d.lr},
        {"seed", d.seed}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c = ExperimentConfig::defaults();
  try {
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir.string());
    if (j.contains("market")) {
      const json& m = j.at("market");
      c.market.steps_per_episode = m.value("steps_per_episode", c.market.steps_per_episode);
      c.market.opportunities_per_step = m.value("opportunities_per_step", c.market.opportunities_per_step);
      c.market.value_alpha = m.value("value_alpha", c.market.value_alpha);
      c.market.value_beta = m.value("value_beta", c.market.value_beta);
      c.market.competitor_log_mean = m.value("competitor_log_mean", c.market.competitor_log_mean);
      c.market.competitor_log_sigma = m.value("competitor_log_sigma", c.market.competitor_log_sigma);
      c.market.max_action = m.value("max_action", c.market.max_action);
      const std::string signal = m.value("reward_signal", std::string("expected"));
      if (signal == "expected") {
        c.market.reward_signal = market::RewardSignal::kExpected;
      } else if (signal == "conversions") {
        c.market.reward_signal = market::RewardSignal::kConversions;
      } else {
        throw ConfigError("reward_signal must be expected or conversions");
      }
      c.cvr_amplitude = m.value("cvr_amplitude", c.cvr_amplitude);
      c.cvr_noise = m.value("cvr_noise", c.cvr_noise);
    }
    if (j.contains("campaigns")) {
      c.campaigns.clear();
      for (const json& k : j.at("campaigns")) {
        c.campaigns.push_back({k.at("budget").get<double>(), k.at("ros_bound").get<double>()});
      }
    }
    if (j.contains("behavior_mix")) {
      const json& b = j.at("behavior_mix");
      c.mix.random = b.value("random", c.mix.random);
      c.mix.fixed = b.value("fixed", c.mix.fixed);
      c.mix.noisy_expert = b.value("noisy_expert", c.mix.noisy_expert);
      c.mix.noise_sigma = b.value("noise_sigma", c.mix.noise_sigma);
    }
    c.train_periods = j.value("train_periods", c.train_periods);
    c.train_episodes_per_period = j.value("train_episodes_per_period", c.train_episodes_per_period);
    c.test_periods = j.value("test_periods", c.test_periods);
    c.test_seeds = j.value("test_seeds", c.test_seeds);
    c.beta = j.value("beta", c.beta);
    if (j.contains("model")) {
      const json& m = j.at("model");
      dt::ModelConfig& d = c.model;
      d.d_model = m.value("d_model", d.d_model);
      d.layers = m.value("layers", d.layers);
      d.heads = m.value("heads", d.heads);
      d.context_steps = m.value("context_steps", d.context_steps);
      d.bag_len = m.value("bag_len", d.bag_len);
      d.k_levels = m.value("k_levels", d.k_levels);
      d.lr = m.value("lr", d.lr);
      d.min_lr_ratio = m.value("min_lr_ratio", d.min_lr_ratio);
      d.warmup_steps = m.value("warmup_steps", d.warmup_steps);
      d.grad_clip = m.value("grad_clip", d.grad_clip);
      d.batch_size = m.value("batch_size", d.batch_size);
      d.train_steps = m.value("train_steps", d.train_steps);
      d.seed = m.value("seed", d.seed);
    }
    if (j.contains("discriminator")) {
      const json& m = j.at("discriminator");
      pu::DiscriminatorConfig& d = c.discriminator;
      d.hidden = m.value("hidden", d.hidden);
      d.class_prior = m.value("class_prior", d.class_prior);
      d.epochs = m.value("epochs", d.epochs);
      d.batch_size = m.value("batch_size", d.batch_size);
      d.lr = m.value("lr", d.lr);
      d.seed = m.value("seed", d.seed);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.model.max_action = c.market.max_action;
  c.solver.max_action = c.market.max_action;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// ---- data generation ----

namespace {

struct EpisodeKey {
  int period;
  int replica;
  int campaign;
};

std::vector<EpisodeKey> train_keys(const ExperimentConfig& config) {
  std::vector<EpisodeKey> keys;
  for (int p : config.train_periods) {
    for (int r = 0; r < config.train_episodes_per_period; ++r) {
      for (int c = 0; c < static_cast<int>(config.campaigns.size()); ++c) keys.push_back({p, r, c});
    }
  }
  return keys;
}

void tag(Trajectory& t, const EpisodeKey& k, std::uint64_t seed) {
  t.campaign_id = campaign_name(k.campaign);
  t.period = k.period;
  t.seed = seed;
}

Trajectory behavior_episode(const ExperimentConfig& config, const market::OpportunityStream& stream,
                            const CampaignConstraints& constraints, double factor, Rng& rng) {
  const BehaviorMix& mix = config.mix;
  std::discrete_distribution<int> pick({mix.random, mix.fixed, mix.noisy_expert});
  const double max_action = config.market.max_action;
  const int kind = pick(rng);
  const std::vector<double>& cvr = stream.cvr_profile;
  market::Policy policy;
  std::string name;
  if (kind == 0) {
    name = "random";
    policy = [&rng, factor](const market::EpisodeHistory&) {
      return std::uniform_real_distribution<double>(0.0, 2.0 * factor)(rng);
    };
  } else if (kind == 1) {
    name = "fixed";
    const double kappa = std::uniform_real_distribution<double>(0.3, 1.7)(rng);
    policy = [kappa, factor](const market::EpisodeHistory&) { return kappa * factor; };
  } else {
    name = "noisy_expert";
    const double sigma = mix.noise_sigma;
    policy = [&rng, &cvr, factor, sigma, max_action](const market::EpisodeHistory& h) {
      const double noise = std::exp(sigma * std::normal_distribution<double>(0.0, 1.0)(rng));
      return expert::expert_step_action(factor, cvr[h.step()], max_action) * noise;
    };
  }
  Trajectory t = market::run_episode(policy, stream, constraints, max_action);
  t.source = "behavior";
  t.policy = name;
  return t;
}

}  // namespace

Datasets gen_data(const ExperimentConfig& config) {
  config.validate();
  Datasets data;
  for (const EpisodeKey& k : train_keys(config)) {
    const std::uint64_t s = config.train_stream_seed(k.period, k.replica, k.campaign);
    const market::OpportunityStream stream = config.stream(k.campaign, s);
    const CampaignConstraints& cc = config.campaigns[k.campaign];
    expert::ExpertResult e = expert::generate_expert_trajectory(stream, cc, config.solver);
    tag(e.trajectory, k, s);
    const double factor = e.solution.multipliers.bid_factor(cc.ros_bound);

    Rng rng(derive_seed({s, kBehaviorTag}));
    Trajectory b = behavior_episode(config, stream, cc, factor, rng);
    tag(b, k, s);
    data.offline.push_back(std::move(b));
    data.expert.push_back(std::move(e.trajectory));
  }
  return data;
}

std::vector<Trajectory> gen_expert(const ExperimentConfig& config) {
  config.validate();
  std::vector<Trajectory> out;
  for (const EpisodeKey& k : train_keys(config)) {
    const std::uint64_t s = config.train_stream_seed(k.period, k.replica, k.campaign);
    expert::ExpertResult e =
        expert::generate_expert_trajectory(config.stream(k.campaign, s), config.campaigns[k.campaign],
                                           config.solver);
    tag(e.trajectory, k, s);
    out.push_back(std::move(e.trajectory));
  }
  return out;
}

json make_manifest(const ExperimentConfig& config, const Datasets& data) {
  auto file_entry = [](std::span<const Trajectory> set) {
    std::string body;
    for (const Trajectory& t : set) body += io::to_line(t) + "\n";
    return json{{"count", set.size()}, {"fnv1a64", io::hex64(io::fnv1a64(body))}};
  };
  std::vector<std::uint64_t> train_seeds, test_seeds;
  for (const EpisodeKey& k : train_keys(config)) {
    train_seeds.push_back(config.train_stream_seed(k.period, k.replica, k.campaign));
  }
  for (int p : config.test_periods) {
    for (int s = 0; s < config.test_seeds; ++s) {
      for (int c = 0; c < static_cast<int>(config.campaigns.size()); ++c) {
        test_seeds.push_back(config.test_stream_seed(p, s, c));
      }
    }
  }
  return {{"seed", config.seed},
          {"config_fnv1a64", io::hex64(io::fnv1a64(to_json(config).dump()))},
          {"files", {{"offline.jsonl", file_entry(data.offline)}, {"expert.jsonl", file_entry(data.expert)}}},
          {"train_stream_seeds", train_seeds},
          {"test_stream_seeds", test_seeds}};
}

void write_datasets(const ExperimentConfig& config, const Datasets& data) {
  std::error_code ec;
  std::filesystem::create_directories(config.output_dir, ec);
  if (ec) throw InputError("cannot create output directory " + config.output_dir.string());
  io::write_jsonl(config.output_dir / "offline.jsonl", data.offline);
  io::write_jsonl(config.output_dir / "expert.jsonl", data.expert);
  io::write_file_atomic(config.output_dir / "manifest.json",
                        make_manifest(config, data).dump(2) + "\n");
}

Datasets read_datasets(const std::filesystem::path& dir) {
  Datasets d;
  d.offline = io::read_jsonl(dir / "offline.jsonl");
  d.expert = io::read_jsonl(dir / "expert.jsonl");
  return d;
}

bool check_isolation(const ExperimentConfig& config, const Datasets& data) {
  std::set<std::uint64_t> test;
  for (int p : config.test_periods) {
    for (int s = 0; s < config.test_seeds; ++s) {
      for (int c = 0; c < static_cast<int>(config.campaigns.size()); ++c) {
        test.insert(config.test_stream_seed(p, s, c));
      }
    }
  }
  std::set<int> test_periods(config.test_periods.begin(), config.test_periods.end());
  for (const auto* set : {&data.offline, &data.expert}) {
    for (const Trajectory& t : *set) {
      if (test.count(t.seed) != 0 || test_periods.count(t.period) != 0) return false;
    }
  }
  return true;
}

// ---- methods ----

MethodSpec parse_method(const std::string& name, const std::vector<std::string>& ablations) {
  MethodSpec spec;
  std::vector<std::string> parts;
  std::stringstream ss(name);
  for (std::string p; std::getline(ss, p, '_');) parts.push_back(p);
  if (parts.empty()) throw ConfigError("empty method name");
  if (parts[0] == "ebaret") {
    spec.base = BaseMethod::kEbaret;
  } else if (parts[0] == "dt" && parts.size() == 1) {
    spec.base = BaseMethod::kDt;
  } else if (parts[0] == "bc" && parts.size() == 1) {
    spec.base = BaseMethod::kBc;
  } else {
    throw ConfigError("unknown method: " + name);
  }
  auto set_flag = [&](const std::string& f) {
    if (spec.base != BaseMethod::kEbaret) throw ConfigError("ablations apply to ebaret only");
    if (f == "noE" || f == "no-expert") {
      spec.ablate.no_expert = true;
    } else if (f == "noPU" || f == "no-pu") {
      spec.ablate.no_pu = true;
    } else if (f == "noEA" || f == "no-expert-action") {
      spec.ablate.no_expert_action = true;
    } else if (f == "noBR" || f == "no-bag-reward") {
      spec.ablate.no_bag_reward = true;
    } else {
      throw ConfigError("unknown ablation: " + f);
    }
  };
  for (std::size_t i = 1; i < parts.size(); ++i) set_flag(parts[i]);
  for (const std::string& a : ablations) set_flag(a);
  spec.ablate.validate();

  spec.name = parts[0];
  if (spec.ablate.no_expert) spec.name += "_noE";
  if (spec.ablate.no_pu) spec.name += "_noPU";
  if (spec.ablate.no_expert_action) spec.name += "_noEA";
  if (spec.ablate.no_bag_reward) spec.name += "_noBR";
  return spec;
}

std::vector<std::string> all_methods() {
  return {"ebaret", "dt", "bc", "ebaret_noE", "ebaret_noPU", "ebaret_noEA", "ebaret_noBR"};
}

dt::ModelConfig model_config_for(const ExperimentConfig& config, const MethodSpec& spec) {
  dt::ModelConfig m = config.model;
  m.max_action = config.market.max_action;
  switch (spec.base) {
    case BaseMethod::kBc:
      m.return_mode = dt::ReturnMode::kNone;
      m.level_embedding = false;
      break;
    case BaseMethod::kDt:
      m.return_mode = dt::ReturnMode::kManual;
      m.level_embedding = false;
      break;
    case BaseMethod::kEbaret:
      if (spec.ablate.no_expert) {
        // Without expert data there is nothing to condition on: plain DT.
        m.return_mode = dt::ReturnMode::kManual;
        m.level_embedding = false;
      } else {
        m.return_mode = dt::ReturnMode::kPredicted;
        m.level_embedding = !spec.ablate.no_expert_action;
      }
      break;
  }
  return m;
}

pu::DiscriminatorModel train_disc(const ExperimentConfig& config, const Datasets& data,
                                  pu::LossKind loss) {
  pu::DiscriminatorConfig dc = config.discriminator;
  dc.loss = loss;
  return pu::train_discriminator(data.expert, data.offline, dc);
}

std::vector<Trajectory> prep(const ExperimentConfig& config, const Datasets& data,
                             const MethodSpec& spec, const pu::DiscriminatorModel* disc) {
  std::vector<Trajectory> corpus = data.offline;
  if (!spec.uses_expert_data()) {
    for (Trajectory& t : corpus) reward::apply_raw_rtg(t);
    return corpus;
  }
  if (disc == nullptr) throw InputError(spec.name + " needs a trained discriminator");

  double offline_r0 = 0.0, expert_r0 = 0.0;
  for (const Trajectory& t : data.offline) offline_r0 += t.total_reward();
  for (const Trajectory& t : data.expert) expert_r0 += t.total_reward();
  offline_r0 /= std::max<std::size_t>(1, data.offline.size());
  expert_r0 /= std::max<std::size_t>(1, data.expert.size());
  if (data.expert.empty() || !(expert_r0 > offline_r0)) {
    throw InputError("expert trajectories must have a higher mean return than the offline set");
  }

  corpus.insert(corpus.end(), data.expert.begin(), data.expert.end());
  pu::score_and_level(*disc, corpus, config.model.k_levels);
  const reward::RedistributionConfig rc{config.beta, config.model.bag_len};
  for (Trajectory& t : corpus) {
    if (spec.ablate.no_bag_reward) {
      reward::apply_raw_rtg(t);
    } else {
      reward::apply_redistribution(t, rc);
    }
  }
  return corpus;
}

dt::TrainResult train_method(const ExperimentConfig& config, const MethodSpec& spec,
                             std::span<const Trajectory> corpus) {
  return dt::train(corpus, model_config_for(config, spec));
}

// ---- evaluation ----

double EvalReport::grand_mean() const {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const EvalRow& r : rows) s += r.conversions;
  return s / rows.size();
}

double EvalReport::standard_error() const {
  if (rows.size() < 2) return 0.0;
  const double m = grand_mean();
  double ss = 0.0;
  for (const EvalRow& r : rows) ss += (r.conversions - m) * (r.conversions - m);
  return std::sqrt(ss / (rows.size() - 1) / rows.size());
}

std::map<int, double> EvalReport::period_means() const {
  std::map<int, std::pair<double, int>> acc;
  for (const EvalRow& r : rows) {
    acc[r.period].first += r.conversions;
    acc[r.period].second += 1;
  }
  std::map<int, double> out;
  for (const auto& [p, v] : acc) out[p] = v.first / v.second;
  return out;
}

std::string EvalReport::metrics_csv() const {
  std::ostringstream out;
  out << "period,seed,method,conversions,spend\n";
  for (const EvalRow& r : rows) {
    out << r.period << ',' << r.seed << ',' << method << ',' << fmt(r.conversions, 10) << ','
        << fmt(r.spend, 10) << '\n';
  }
  return out.str();
}

std::string EvalReport::episodes_csv() const {
  std::ostringstream out;
  out << "period,seed,campaign,method,conversions,realized_conversions,spend,optimal,ratio\n";
  for (const EpisodeRecord& e : episodes) {
    const double ratio = e.optimal > 0.0 ? e.conversions / e.optimal : 1.0;
    out << e.period << ',' << e.seed << ',' << campaign_name(e.campaign) << ',' << method << ','
        << fmt(e.conversions, 10) << ',' << e.realized << ',' << fmt(e.spend, 10) << ','
        << fmt(e.optimal, 10) << ',' << fmt(ratio, 10) << '\n';
  }
  return out.str();
}

json to_json(const EvalReport& report) {
  json rows = json::array(), episodes = json::array();
  for (const EvalRow& r : report.rows) {
    rows.push_back({{"period", r.period}, {"seed", r.seed}, {"conversions", r.conversions},
                    {"spend", r.spend}, {"realized", r.realized}});
  }
  for (const EpisodeRecord& e : report.episodes) {
    episodes.push_back({{"period", e.period}, {"seed", e.seed}, {"campaign", e.campaign},
                        {"conversions", e.conversions}, {"realized", e.realized},
                        {"spend", e.spend}, {"optimal", e.optimal}});
  }
  return {{"method", report.method}, {"rows", rows}, {"episodes", episodes}};
}

EvalReport report_from_json(const json& j) {
  EvalReport r;
  try {
    r.method = j.at("method").get<std::string>();
    for (const json& x : j.at("rows")) {
      r.rows.push_back({x.at("period"), x.at("seed"), x.at("conversions"), x.at("spend"),
                        x.at("realized")});
    }
    for (const json& x : j.at("episodes")) {
      r.episodes.push_back({x.at("period"), x.at("seed"), x.at("campaign"), x.at("conversions"),
                            x.at("realized"), x.at("spend"), x.at("optimal")});
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("eval report: ") + e.what());
  }
  return r;
}

EvalReport evaluate(const ExperimentConfig& config, const std::string& method,
                    const std::function<market::Policy()>& make_policy, OptimaCache* optima) {
  EvalReport report;
  report.method = method;
  const int campaigns = static_cast<int>(config.campaigns.size());
  for (int p : config.test_periods) {
    for (int s = 0; s < config.test_seeds; ++s) {
      EvalRow row;
      row.period = p;
      row.seed = s;
      for (int c = 0; c < campaigns; ++c) {
        const std::uint64_t ss = config.test_stream_seed(p, s, c);
        const market::OpportunityStream stream = config.stream(c, ss);
        const CampaignConstraints& cc = config.campaigns[c];
        const Trajectory t = market::run_episode(make_policy(), stream, cc, config.market.max_action);

        EpisodeRecord e;
        e.period = p;
        e.seed = s;
        e.campaign = c;
        e.conversions = t.total_value();
        e.realized = t.total_conversions();
        e.spend = t.total_spend();
        if (optima != nullptr && optima->count(ss) != 0) {
          e.optimal = optima->at(ss);
        } else {
          e.optimal = expert::generate_expert_trajectory(stream, cc, config.solver).trajectory.total_value();
          if (optima != nullptr) (*optima)[ss] = e.optimal;
        }
        row.conversions += e.conversions;
        row.spend += e.spend;
        row.realized += e.realized;
        report.episodes.push_back(e);
      }
      report.rows.push_back(row);
    }
  }
  return report;
}

EvalReport evaluate_model(const ExperimentConfig& config, const std::string& method,
                          const dt::BagDecisionTransformer& model, OptimaCache* optima) {
  return evaluate(config, method, [&model] { return dt::make_policy(model); }, optima);
}

// ---- ratio report ----

std::string RatioReport::histogram_csv() const {
  std::ostringstream out;
  out << "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < histogram.size(); ++i) {
    out << fmt(i / 20.0) << ',' << fmt((i + 1) / 20.0) << ',' << histogram[i] << '\n';
  }
  return out.str();
}

json RatioReport::summary() const {
  return {{"count", ratios.size()}, {"median", median}, {"mean", mean},
          {"min", min},             {"max", max},       {"above_one", above_one}};
}

RatioReport ratio_report(std::span<const Trajectory> trajectories,
                         std::span<const Trajectory> experts) {
  std::map<std::pair<std::uint64_t, std::string>, double> optimum;
  for (const Trajectory& e : experts) optimum[{e.seed, e.campaign_id}] = e.total_value();
  RatioReport r;
  r.histogram.assign(20, 0);
  for (const Trajectory& t : trajectories) {
    const auto it = optimum.find({t.seed, t.campaign_id});
    if (it == optimum.end()) {
      throw InputError("no expert trajectory for seed " + std::to_string(t.seed));
    }
    const double rstar = it->second;
    const double ratio = rstar > 0.0 ? t.total_value() / rstar : (t.total_value() > 0.0 ? 2.0 : 1.0);
    r.ratios.push_back(ratio);
    const int bin = std::clamp(static_cast<int>(ratio * 20.0), 0, 19);
    r.histogram[bin] += 1;
    if (ratio > 1.0 + 1e-9) ++r.above_one;
  }
  if (r.ratios.empty()) return r;
  std::vector<double> sorted = r.ratios;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  double s = 0.0;
  for (double x : sorted) s += x;
  r.mean = s / n;
  r.min = sorted.front();
  r.max = sorted.back();
  return r;
}

// ---- pipeline ----

PipelineResult run_pipeline(const ExperimentConfig& config, const std::vector<std::string>& methods,
                            bool write_files) {
  PipelineResult result;
  result.data = gen_data(config);
  if (!check_isolation(config, result.data)) throw InputError("test seeds leaked into training data");
  if (write_files) write_datasets(config, result.data);

  std::optional<pu::DiscriminatorModel> nnpu, ce;
  OptimaCache optima;
  std::map<std::string, dt::TrainResult> trained_by_key;
  for (const std::string& name : methods) {
    const MethodSpec spec = parse_method(name);
    const pu::DiscriminatorModel* disc = nullptr;
    if (spec.uses_discriminator()) {
      auto& slot = spec.ablate.no_pu ? ce : nnpu;
      if (!slot) {
        slot.emplace(train_disc(config, result.data,
                                spec.ablate.no_pu ? pu::LossKind::kCrossEntropy
                                                  : pu::LossKind::kNonNegativePu));
        if (write_files) {
          slot->save(config.output_dir / (spec.ablate.no_pu ? "disc_ce.json" : "disc_nnpu.json"));
        }
      }
      disc = &*slot;
    }
    const std::vector<Trajectory> corpus = prep(config, result.data, spec, disc);
    // Same model config on the same corpus trains the same model (ebaret_noE is dt).
    json key = dt::BagDecisionTransformer(model_config_for(config, spec)).checkpoint().at("meta").at("config");
    for (const Trajectory& t : corpus) key["corpus"].push_back(io::to_json(t));
    const std::string key_text = key.dump();
    auto hit = trained_by_key.find(key_text);
    if (hit == trained_by_key.end()) {
      log::info("training " + spec.name + " on " + std::to_string(corpus.size()) + " trajectories");
      hit = trained_by_key.emplace(key_text, train_method(config, spec, corpus)).first;
    } else {
      log::info("reusing the identical model trained earlier for " + spec.name);
    }
    const dt::TrainResult& trained = hit->second;
    EvalReport report = evaluate_model(config, spec.name, trained.model, &optima);
    if (write_files) {
      const auto& dir = config.output_dir;
      trained.model.save(dir / ("ckpt_" + spec.name + ".json"), json{{"method", spec.name}});
      io::write_file_atomic(dir / ("loss_" + spec.name + ".csv"), dt::loss_log_csv(trained.log));
      io::write_file_atomic(dir / ("metrics_" + spec.name + ".csv"), report.metrics_csv());
      io::write_file_atomic(dir / ("episodes_" + spec.name + ".csv"), report.episodes_csv());
      io::write_file_atomic(dir / ("eval_" + spec.name + ".json"), to_json(report).dump() + "\n");
    }
    result.loss_logs[spec.name] = trained.log;
    result.reports[spec.name] = std::move(report);
  }
  return result;
}

std::string summary_markdown(const std::map<std::string, EvalReport>& reports,
                             const RatioReport* ratios) {
  std::ostringstream out;
  out << "# Evaluation summary\n\n";
  out << "Mean cumulative expected conversions per (period, seed), summed over campaigns.\n\n";
  out << "| method | mean | s.e. | mean R/R* |\n|---|---|---|---|\n";
  for (const auto& [name, r] : reports) {
    double ratio_sum = 0.0;
    for (const EpisodeRecord& e : r.episodes) ratio_sum += e.optimal > 0.0 ? e.conversions / e.optimal : 1.0;
    out << "| " << name << " | " << fmt(r.grand_mean()) << " | " << fmt(r.standard_error(), 3)
        << " | " << fmt(r.episodes.empty() ? 0.0 : ratio_sum / r.episodes.size(), 4) << " |\n";
  }
  std::set<int> periods;
  for (const auto& [name, r] : reports) {
    for (const auto& [p, m] : r.period_means()) periods.insert(p);
  }
  out << "\n## Per-period means\n\nIndividual periods can favor an ablation even when the "
         "grand mean does not.\n\n| period |";
  for (const auto& [name, r] : reports) out << ' ' << name << " |";
  out << "\n|---|";
  for (std::size_t i = 0; i < reports.size(); ++i) out << "---|";
  out << '\n';
  for (int p : periods) {
    out << "| " << p << " |";
    std::string best;
    double best_v = -1.0;
    for (const auto& [name, r] : reports) {
      const auto pm = r.period_means();
      const double v = pm.count(p) ? pm.at(p) : 0.0;
      if (v > best_v) {
        best_v = v;
        best = name;
      }
    }
    for (const auto& [name, r] : reports) {
      const auto pm = r.period_means();
      out << ' ' << (name == best ? "**" : "") << fmt(pm.count(p) ? pm.at(p) : 0.0)
          << (name == best ? "**" : "") << " |";
    }
    out << '\n';
  }
  if (ratios != nullptr) {
    out << "\n## Offline corpus R/R*\n\n"
        << "n = " << ratios->ratios.size() << ", median = " << fmt(ratios->median, 4)
        << ", mean = " << fmt(ratios->mean, 4) << ", max = " << fmt(ratios->max, 6)
        << ", above 1 = " << ratios->above_one << "\n";
  }
  return out.str();
}

}  // namespace ebaret::harness
