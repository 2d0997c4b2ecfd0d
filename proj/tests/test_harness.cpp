#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ebaret/bag_reward.hpp"
#include "ebaret/errors.hpp"
#include "ebaret/harness.hpp"
#include "ebaret/trajectory_io.hpp"

using namespace ebaret;
using namespace ebaret::harness;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config(const std::string& dir) {
  ExperimentConfig c = ExperimentConfig::defaults();
  c.market.steps_per_episode = 16;
  c.market.opportunities_per_step = 40;
  c.campaigns = {{0.5, 1.0}, {1.0, 0.8}};
  c.train_periods = {1, 2, 3};
  c.test_periods = {4};
  c.test_seeds = 2;
  c.model.d_model = 8;
  c.model.layers = 1;
  c.model.heads = 2;
  c.model.context_steps = 16;
  c.model.batch_size = 2;
  c.model.train_steps = 2;
  c.model.warmup_steps = 1;
  c.discriminator.hidden = 8;
  c.discriminator.epochs = 1;
  c.discriminator.batch_size = 16;
  c.output_dir = fs::temp_directory_path() / dir;
  fs::remove_all(c.output_dir);
  return c;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += !line.empty();
  return n;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(ExperimentConfigTest, DefaultsValidateAndRoundTrip) {
  const ExperimentConfig d = ExperimentConfig::defaults();
  EXPECT_NO_THROW(d.validate());
  EXPECT_EQ(d.campaigns.size(), 8u);
  EXPECT_EQ(d.test_periods.size(), 7u);
  EXPECT_GE(d.test_seeds, 5);
  const ExperimentConfig back = config_from_json(to_json(d));
  EXPECT_EQ(to_json(back).dump(), to_json(d).dump());
}

TEST(ExperimentConfigTest, RejectsBadValues) {
  ExperimentConfig c = ExperimentConfig::defaults();
  c.test_periods.push_back(3);
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig::defaults();
  c.mix.random = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ExperimentConfig::defaults();
  c.model.context_steps = 40;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Methods, ParseNames) {
  EXPECT_EQ(parse_method("ebaret").name, "ebaret");
  const MethodSpec a = parse_method("ebaret", {"no-pu", "no-bag-reward"});
  EXPECT_TRUE(a.ablate.no_pu);
  EXPECT_TRUE(a.ablate.no_bag_reward);
  EXPECT_EQ(a.name, "ebaret_noPU_noBR");
  EXPECT_EQ(parse_method("ebaret_noEA").name, "ebaret_noEA");
  EXPECT_FALSE(parse_method("ebaret_noE").uses_discriminator());
  EXPECT_THROW(parse_method("cql"), ConfigError);
  EXPECT_THROW(parse_method("dt", {"no-pu"}), ConfigError);
  EXPECT_THROW(parse_method("ebaret_noE_noPU"), ConfigError);
  EXPECT_THROW(parse_method("ebaret_fast"), ConfigError);
  for (const auto& m : all_methods()) EXPECT_NO_THROW(parse_method(m));
}

TEST(Methods, ModelConfigs) {
  const ExperimentConfig c = ExperimentConfig::defaults();
  const auto bc = model_config_for(c, parse_method("bc"));
  EXPECT_EQ(bc.return_mode, dt::ReturnMode::kNone);
  const auto d = model_config_for(c, parse_method("dt"));
  EXPECT_EQ(d.return_mode, dt::ReturnMode::kManual);
  const auto noe = model_config_for(c, parse_method("ebaret_noE"));
  EXPECT_EQ(noe.return_mode, d.return_mode);
  EXPECT_EQ(noe.level_embedding, d.level_embedding);
  EXPECT_TRUE(model_config_for(c, parse_method("ebaret")).level_embedding);
  EXPECT_FALSE(model_config_for(c, parse_method("ebaret_noEA")).level_embedding);
}

TEST(Data, RandomOnlyMix) {
  ExperimentConfig c = tiny_config("ebaret_mix");
  c.mix.random = 1.0;
  c.mix.fixed = 0.0;
  c.mix.noisy_expert = 0.0;
  const Datasets d = gen_data(c);
  ASSERT_EQ(d.offline.size(), 6u);
  for (const auto& t : d.offline) EXPECT_EQ(t.policy, "random");
  for (const auto& t : d.expert) EXPECT_TRUE(t.is_expert());
}

TEST(Data, ManifestMatchesFilesAndIsolation) {
  const ExperimentConfig c = tiny_config("ebaret_manifest");
  const Datasets d = gen_data(c);
  EXPECT_TRUE(check_isolation(c, d));
  write_datasets(c, d);
  const auto manifest = nlohmann::json::parse(slurp(c.output_dir / "manifest.json"));
  EXPECT_EQ(manifest["files"]["offline.jsonl"]["count"].get<std::size_t>(),
            line_count(c.output_dir / "offline.jsonl"));
  EXPECT_EQ(manifest["files"]["expert.jsonl"]["count"].get<std::size_t>(),
            line_count(c.output_dir / "expert.jsonl"));
  const Datasets back = read_datasets(c.output_dir);
  EXPECT_EQ(back.offline.size(), d.offline.size());
  EXPECT_EQ(io::to_line(back.offline[0]), io::to_line(d.offline[0]));

  // A trajectory carrying a test period must be caught.
  Datasets leaked = d;
  leaked.offline[0].period = c.test_periods[0];
  EXPECT_FALSE(check_isolation(c, leaked));
  Datasets leaked_seed = d;
  leaked_seed.expert[0].seed = c.test_stream_seed(c.test_periods[0], 0, 0);
  EXPECT_FALSE(check_isolation(c, leaked_seed));
  fs::remove_all(c.output_dir);
}

TEST(Data, DeterministicPerSeed) {
  const ExperimentConfig c = tiny_config("ebaret_det");
  const Datasets a = gen_data(c);
  const Datasets b = gen_data(c);
  EXPECT_EQ(make_manifest(c, a).dump(), make_manifest(c, b).dump());
  ExperimentConfig other = c;
  other.seed = c.seed + 1;
  EXPECT_NE(make_manifest(other, gen_data(other))["files"].dump(), make_manifest(c, a)["files"].dump());
}

TEST(Ratio, ExpertsScoreOneAndZeroPolicyScoresZero) {
  const ExperimentConfig c = tiny_config("ebaret_ratio");
  const Datasets d = gen_data(c);
  const RatioReport self = ratio_report(d.expert, d.expert);
  for (double r : self.ratios) EXPECT_DOUBLE_EQ(r, 1.0);

  std::vector<Trajectory> zero;
  for (const Trajectory& e : d.expert) {
    const auto stream = c.stream(std::stoi(e.campaign_id.substr(1)), e.seed);
    Trajectory t = market::run_episode([](const market::EpisodeHistory&) { return 0.0; }, stream,
                                       e.constraints, c.market.max_action);
    t.campaign_id = e.campaign_id;
    t.seed = e.seed;
    t.period = e.period;
    zero.push_back(std::move(t));
  }
  const RatioReport z = ratio_report(zero, d.expert);
  for (std::size_t i = 0; i < z.ratios.size(); ++i) {
    if (d.expert[i].total_value() > 0.0) EXPECT_EQ(z.ratios[i], 0.0);
  }
  EXPECT_EQ(std::accumulate(z.histogram.begin(), z.histogram.end(), 0), static_cast<int>(zero.size()));
  EXPECT_EQ(z.histogram.size(), 20u);
}

TEST(Prep, NoBagRewardLabelsAreRawSuffixSums) {
  const ExperimentConfig c = tiny_config("ebaret_prep");
  const Datasets d = gen_data(c);
  const auto disc = train_disc(c, d, pu::LossKind::kNonNegativePu);
  const auto corpus = prep(c, d, parse_method("ebaret_noBR"), &disc);
  ASSERT_EQ(corpus.size(), d.offline.size() + d.expert.size());
  for (const auto& t : corpus) {
    double acc = 0.0;
    for (int i = t.steps() - 1; i >= 0; --i) {
      acc += t.rewards[i];
      EXPECT_NEAR(t.rtg[i], acc, 1e-12);
    }
    EXPECT_EQ(t.expert_levels.size(), static_cast<std::size_t>(t.steps()));
  }
  const auto full = prep(c, d, parse_method("ebaret"), &disc);
  for (const auto& t : full) {
    EXPECT_EQ(t.rtg[0], t.total_reward());
    if (t.is_expert()) {
      for (int l : t.expert_levels) EXPECT_EQ(l, c.model.k_levels - 1);
    }
  }
  EXPECT_EQ(prep(c, d, parse_method("dt"), nullptr).size(), d.offline.size());
  EXPECT_THROW(prep(c, d, parse_method("ebaret"), nullptr), InputError);

  // The expert set must out-earn the offline set.
  Datasets swapped{d.expert, d.offline};
  EXPECT_THROW(prep(c, swapped, parse_method("ebaret"), &disc), InputError);
}

TEST(Pipeline, ReRunIsIdentical) {
  const ExperimentConfig c = tiny_config("ebaret_pipe");
  const std::vector<std::string> methods = {"ebaret", "bc"};
  const PipelineResult a = run_pipeline(c, methods, false);
  const PipelineResult b = run_pipeline(c, methods, false);
  for (const auto& m : methods) {
    ASSERT_TRUE(a.reports.count(m));
    EXPECT_EQ(to_json(a.reports.at(m)).dump(), to_json(b.reports.at(m)).dump());
    EXPECT_EQ(a.reports.at(m).rows.size(), 2u);
    for (const auto& e : a.reports.at(m).episodes) {
      EXPECT_GE(e.conversions, 0.0);
      EXPECT_LE(e.conversions, e.optimal + 1e-9);
    }
  }
  const std::string md = summary_markdown(a.reports, nullptr);
  EXPECT_NE(md.find("ebaret"), std::string::npos);
  EXPECT_NE(md.find("| 4 |"), std::string::npos);
}

TEST(Cli, EndToEndSmoke) {
  const ExperimentConfig c = tiny_config("ebaret_cli");
  fs::create_directories(c.output_dir);
  const fs::path cfg = c.output_dir / "tiny.json";
  std::ofstream(cfg) << to_json(c).dump(2);
  const std::string bin = EBARET_CLI_PATH;
  const std::string base = "\"" + bin + "\" --config \"" + cfg.string() + "\" ";
  auto run = [&](const std::string& args) { return std::system((base + args + " > /dev/null").c_str()); };
  ASSERT_EQ(run("gen-data"), 0);
  ASSERT_EQ(run("train-disc"), 0);
  ASSERT_EQ(run("prep --method ebaret"), 0);
  ASSERT_EQ(run("train --method ebaret --ablate no-bag-reward"), 0);
  ASSERT_EQ(run("eval --method ebaret --ablate no-bag-reward"), 0);
  ASSERT_EQ(run("train --method bc"), 0);
  ASSERT_EQ(run("eval --method bc"), 0);
  ASSERT_EQ(run("report"), 0);
  EXPECT_NE(run("train --method cql 2> /dev/null"), 0);
  for (const char* f : {"offline.jsonl", "expert.jsonl", "manifest.json", "disc_nnpu.json",
                        "prepared_ebaret.jsonl", "ckpt_ebaret_noBR.json", "loss_ebaret_noBR.csv",
                        "ckpt_bc.json", "metrics.csv", "ratio_hist.csv", "summary.md"}) {
    EXPECT_TRUE(fs::exists(c.output_dir / f)) << f;
  }
  const std::string metrics = slurp(c.output_dir / "metrics.csv");
  EXPECT_EQ(metrics.rfind("period,seed,method,conversions,spend\n", 0), 0u);
  EXPECT_NE(metrics.find(",bc,"), std::string::npos);
  fs::remove_all(c.output_dir);
}
