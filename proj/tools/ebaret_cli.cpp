// ebaret: data generation, training and evaluation driver.
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ebaret/bag_dt.hpp"
#include "ebaret/errors.hpp"
#include "ebaret/harness.hpp"
#include "ebaret/log.hpp"
#include "ebaret/nn_core.hpp"
#include "ebaret/random.hpp"
#include "ebaret/trajectory_io.hpp"

namespace fs = std::filesystem;
using namespace ebaret;
using nlohmann::json;

namespace {

struct Common {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
};

harness::ExperimentConfig resolve(const Common& c) {
  harness::ExperimentConfig cfg;
  if (!c.config_path.empty()) {
    cfg = harness::load_config(c.config_path);
  } else if (!c.out_dir.empty() && fs::exists(fs::path(c.out_dir) / "config.json")) {
    cfg = harness::load_config(fs::path(c.out_dir) / "config.json");
  } else {
    cfg = harness::ExperimentConfig::defaults();
  }
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.model.seed = derive_seed({*c.seed, 1});
    cfg.discriminator.seed = derive_seed({*c.seed, 2});
  }
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  cfg.validate();
  return cfg;
}

fs::path disc_path(const harness::ExperimentConfig& cfg, bool ce) {
  return cfg.output_dir / (ce ? "disc_ce.json" : "disc_nnpu.json");
}

std::optional<pu::DiscriminatorModel> load_disc_for(const harness::ExperimentConfig& cfg,
                                                    const harness::MethodSpec& spec) {
  if (!spec.uses_discriminator()) return std::nullopt;
  const fs::path p = disc_path(cfg, spec.ablate.no_pu);
  if (!fs::exists(p)) {
    throw InputError(p.string() + " not found; run train-disc" +
                     std::string(spec.ablate.no_pu ? " --loss ce" : "") + " first");
  }
  return pu::DiscriminatorModel::load(p);
}

void write_config(const harness::ExperimentConfig& cfg) {
  fs::create_directories(cfg.output_dir);
  io::write_file_atomic(cfg.output_dir / "config.json", harness::to_json(cfg).dump(2) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  ebaret::nn::keep_heap_resident();
  CLI::App app{"EBaReT auto-bidding pipeline"};
  app.require_subcommand(1);
  Common common;
  app.add_option("-c,--config", common.config_path, "experiment config JSON");
  app.add_option("-o,--out", common.out_dir, "output directory (overrides the config)");
  app.add_option("--seed", common.seed, "master seed (overrides the config)");
  app.add_flag("-v,--verbose", common.verbose, "progress logging");

  auto* gen_data = app.add_subcommand("gen-data", "behavior + expert datasets and manifest");
  auto* gen_expert = app.add_subcommand("gen-expert", "regenerate the expert dataset only");

  std::string loss = "nnpu";
  auto* train_disc = app.add_subcommand("train-disc", "train the expert discriminator");
  train_disc->add_option("--loss", loss, "nnpu or ce")->check(CLI::IsMember({"nnpu", "ce"}));

  std::string method = "ebaret";
  std::vector<std::string> ablate;
  auto* prep = app.add_subcommand("prep", "score, redistribute and level the training corpus");
  prep->add_option("--method", method, "method whose corpus to build");
  prep->add_option("--ablate", ablate, "no-expert, no-pu, no-expert-action, no-bag-reward")
      ->delimiter(',');

  auto* train = app.add_subcommand("train", "train a method");
  train->add_option("--method", method, "ebaret, dt, bc or an ebaret_no* variant")->required();
  train->add_option("--ablate", ablate, "no-expert, no-pu, no-expert-action, no-bag-reward")
      ->delimiter(',');

  auto* eval = app.add_subcommand("eval", "evaluate a trained method on the test grid");
  eval->add_option("--method", method, "method name (as written by train)")->required();
  eval->add_option("--ablate", ablate, "ablations, as given to train")->delimiter(',');

  auto* report = app.add_subcommand("report", "summary tables and ratio histogram");

  auto* all = app.add_subcommand("all", "run every stage for every method");

  CLI11_PARSE(app, argc, argv);
  log::set_level(common.verbose ? log::Level::kInfo : log::Level::kWarning);

  try {
    harness::ExperimentConfig cfg = resolve(common);

    if (gen_data->parsed()) {
      write_config(cfg);
      const harness::Datasets data = harness::gen_data(cfg);
      if (!harness::check_isolation(cfg, data)) throw InputError("test seeds leaked into training data");
      harness::write_datasets(cfg, data);
      std::cout << "offline " << data.offline.size() << ", expert " << data.expert.size() << " -> "
                << cfg.output_dir.string() << '\n';
    } else if (gen_expert->parsed()) {
      write_config(cfg);
      harness::Datasets data;
      if (fs::exists(cfg.output_dir / "offline.jsonl")) {
        data.offline = io::read_jsonl(cfg.output_dir / "offline.jsonl");
      }
      data.expert = harness::gen_expert(cfg);
      harness::write_datasets(cfg, data);
      std::cout << "expert " << data.expert.size() << '\n';
    } else if (train_disc->parsed()) {
      const harness::Datasets data = harness::read_datasets(cfg.output_dir);
      const bool ce = loss == "ce";
      const pu::DiscriminatorModel d = harness::train_disc(
          cfg, data, ce ? pu::LossKind::kCrossEntropy : pu::LossKind::kNonNegativePu);
      d.save(disc_path(cfg, ce));
      std::cout << "final loss " << (d.loss_curve.empty() ? 0.0 : d.loss_curve.back()) << '\n';
    } else if (prep->parsed()) {
      const harness::MethodSpec spec = harness::parse_method(method, ablate);
      const harness::Datasets data = harness::read_datasets(cfg.output_dir);
      const auto disc = load_disc_for(cfg, spec);
      const auto corpus = harness::prep(cfg, data, spec, disc ? &*disc : nullptr);
      io::write_jsonl(cfg.output_dir / ("prepared_" + spec.name + ".jsonl"), corpus);
      std::cout << "prepared " << corpus.size() << " trajectories\n";
    } else if (train->parsed()) {
      const harness::MethodSpec spec = harness::parse_method(method, ablate);
      const harness::Datasets data = harness::read_datasets(cfg.output_dir);
      if (!harness::check_isolation(cfg, data)) throw InputError("test seeds leaked into training data");
      const auto disc = load_disc_for(cfg, spec);
      const auto corpus = harness::prep(cfg, data, spec, disc ? &*disc : nullptr);
      const dt::TrainResult r = harness::train_method(cfg, spec, corpus);
      r.model.save(cfg.output_dir / ("ckpt_" + spec.name + ".json"), json{{"method", spec.name}});
      io::write_file_atomic(cfg.output_dir / ("loss_" + spec.name + ".csv"), dt::loss_log_csv(r.log));
      std::cout << spec.name << ": " << r.log.size() << " steps";
      if (!r.log.empty()) {
        std::cout << ", final rtg " << r.log.back().rtg_loss << ", action " << r.log.back().action_loss;
      }
      std::cout << '\n';
    } else if (eval->parsed()) {
      const harness::MethodSpec spec = harness::parse_method(method, ablate);
      const auto model = dt::BagDecisionTransformer::load(cfg.output_dir / ("ckpt_" + spec.name + ".json"));
      const harness::EvalReport r = harness::evaluate_model(cfg, spec.name, model);
      io::write_file_atomic(cfg.output_dir / ("metrics_" + spec.name + ".csv"), r.metrics_csv());
      io::write_file_atomic(cfg.output_dir / ("episodes_" + spec.name + ".csv"), r.episodes_csv());
      io::write_file_atomic(cfg.output_dir / ("eval_" + spec.name + ".json"),
                            harness::to_json(r).dump() + "\n");
      std::cout << spec.name << ": mean " << r.grand_mean() << " +- " << r.standard_error() << '\n';
    } else if (report->parsed() || all->parsed()) {
      std::map<std::string, harness::EvalReport> reports;
      harness::Datasets data;
      if (all->parsed()) {
        write_config(cfg);
        harness::PipelineResult res = harness::run_pipeline(cfg, harness::all_methods(), true);
        reports = std::move(res.reports);
        data = std::move(res.data);
      } else {
        data = harness::read_datasets(cfg.output_dir);
        for (const auto& e : fs::directory_iterator(cfg.output_dir)) {
          const std::string f = e.path().filename().string();
          if (f.rfind("eval_", 0) == 0 && e.path().extension() == ".json") {
            harness::EvalReport r = harness::report_from_json(json::parse(io::read_file(e.path())));
            reports[r.method] = std::move(r);
          }
        }
      }
      const harness::RatioReport ratios = harness::ratio_report(data.offline, data.expert);
      io::write_file_atomic(cfg.output_dir / "ratio_hist.csv", ratios.histogram_csv());
      io::write_file_atomic(cfg.output_dir / "ratio_summary.json", ratios.summary().dump(2) + "\n");
      std::string metrics = "period,seed,method,conversions,spend\n";
      for (const auto& [name, r] : reports) {
        const std::string csv = r.metrics_csv();
        metrics += csv.substr(csv.find('\n') + 1);
      }
      io::write_file_atomic(cfg.output_dir / "metrics.csv", metrics);
      const std::string md = harness::summary_markdown(reports, &ratios);
      io::write_file_atomic(cfg.output_dir / "summary.md", md);
      std::cout << md;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
