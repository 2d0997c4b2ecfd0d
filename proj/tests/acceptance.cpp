// Acceptance checks 1-9. One PASS/FAIL line per criterion; exit status is
// non-zero when any selected criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "ebaret/bag_dt.hpp"
#include "ebaret/bag_reward.hpp"
#include "ebaret/expert_gen.hpp"
#include "ebaret/harness.hpp"
#include "ebaret/log.hpp"
#include "ebaret/market_sim.hpp"
#include "ebaret/nn_core.hpp"
#include "ebaret/pu_disc.hpp"
#include "ebaret/trajectory_io.hpp"

using namespace ebaret;
using nn::Matrix;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double x, int precision = 6) {
  std::ostringstream o;
  o.precision(precision);
  o << x;
  return o.str();
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<const double> cspan_of(const Matrix& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
double dot(const Matrix& a, const Matrix& b) { return (a.array() * b.array()).sum(); }

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// ---- 1 ----
Outcome nnpu_golden() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<double> zeros_e(16, 0.0), zeros_o(64, 0.0);
  const double golden = pu::nnpu_risk(zeros_e, zeros_o, 0.01).loss;

  const std::vector<double> e = {3.0, 4.5, 6.0, 2.5}, o = {-5.0, -4.0, -6.5};
  const pu::RiskTerms clamp = pu::nnpu_risk(e, o, 0.5);
  double pos = 0.0;
  for (double z : e) pos += softplus(-z);
  const double expected = 0.5 * pos / static_cast<double>(e.size());
  const double secs = seconds_since(t0);

  const bool ok = std::abs(golden - std::log(2.0)) <= 1e-6 && clamp.clamped &&
                  std::abs(clamp.loss - expected) <= 1e-15 * std::max(1.0, expected) && secs < 1.0;
  return {ok, "loss(0)=" + num(golden, 9) + " clamp=" + num(clamp.loss, 12) + " vs " +
                  num(expected, 12) + " time=" + num(secs, 3) + "s"};
}

// ---- 2 ----
Outcome redistribution() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_cons = 0.0, worst_uniform = 0.0;
  int positive = 0, monotone = 0;
  for (int b = 0; b < 10000; ++b) {
    std::vector<double> r(8), s(8);
    for (int i = 0; i < 8; ++i) {
      r[i] = u(rng) < 0.5 ? 0.0 : 2.0 * u(rng);
      s[i] = u(rng);
    }
    const double total = std::accumulate(r.begin(), r.end(), 0.0);
    const auto out = reward::redistribute_bag(r, s, 0.5);
    const double got = std::accumulate(out.begin(), out.end(), 0.0);
    if (total > 0.0) worst_cons = std::max(worst_cons, std::abs(got - total) / total);
    if (total == 0.0) worst_cons = std::max(worst_cons, std::abs(got));
    if (total > 0.0) {
      ++positive;
      bool mono = true;
      for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) mono = mono && !(s[i] < s[j] && !(out[i] < out[j]));
      }
      monotone += mono;
      const auto flat = reward::redistribute_bag(r, s, 1e6);
      for (double x : flat) worst_uniform = std::max(worst_uniform, std::abs(x - total / 8) / total);
    }
  }
  const double secs = seconds_since(t0);
  const bool ok = worst_cons <= 1e-12 && monotone == positive && worst_uniform < 1e-5 && secs < 5.0;
  return {ok, "max rel conservation err=" + num(worst_cons, 3) + " monotone " + std::to_string(monotone) +
                  "/" + std::to_string(positive) + " uniform dev=" + num(worst_uniform, 3) +
                  " time=" + num(secs, 3) + "s"};
}

// ---- 3 ----
Outcome rtg_recurrence() {
  const auto t0 = std::chrono::steady_clock::now();
  market::MarketConfig mc;
  mc.reward_signal = market::RewardSignal::kExpected;
  Rng rng(303);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int exact = 0, invariant = 0;
  const int n = 1000;
  for (int i = 0; i < n; ++i) {
    mc.seed = derive_seed({303, static_cast<std::uint64_t>(i)});
    const double scale = 0.5 + 3.0 * u(rng);
    Trajectory t = market::run_episode([scale](const market::EpisodeHistory&) { return scale; }, mc,
                                       {0.5 + u(rng), 1.0});
    t.sigma_scores.resize(t.steps());
    for (double& s : t.sigma_scores) s = u(rng);
    Trajectory raw = t;
    reward::apply_raw_rtg(raw);
    reward::apply_redistribution(t, {0.5, 8});
    bool ok = true;
    for (int k = 0; k + 1 < t.steps(); ++k) ok = ok && t.rtg[k + 1] == t.rtg[k] - t.rewards_redistributed[k];
    exact += ok;
    invariant += t.rtg[0] == raw.rtg[0] && t.rtg[0] == t.total_reward();
  }
  const double secs = seconds_since(t0);
  return {exact == n && invariant == n, "recurrence exact " + std::to_string(exact) + "/" +
                                            std::to_string(n) + ", R_0 invariant " +
                                            std::to_string(invariant) + "/" + std::to_string(n) +
                                            " time=" + num(secs, 3) + "s"};
}

// ---- 4 ----
Outcome gradient_checks() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, double>> errs;
  Rng rng(404);
  {
    Matrix x = random_matrix(5, 4, rng), w = random_matrix(4, 3, rng), b = random_matrix(1, 3, rng);
    const Matrix proj = random_matrix(5, 3, rng);
    const nn::AffineGrads g = nn::affine_backward(x, w, proj);
    const nn::GradTarget t[] = {{span_of(x), cspan_of(g.dx)}, {span_of(w), cspan_of(g.dw)},
                                {span_of(b), cspan_of(g.db)}};
    errs.emplace_back("affine", nn::grad_check([&] { return dot(nn::affine_forward(x, w, b), proj); }, t));
  }
  {
    Matrix x = random_matrix(3, 8, rng), gm = random_matrix(1, 8, rng), bt = random_matrix(1, 8, rng);
    const Matrix proj = random_matrix(3, 8, rng);
    nn::LayerNormCache c;
    nn::layer_norm_forward(x, gm, bt, &c);
    const nn::LayerNormGrads g = nn::layer_norm_backward(proj, gm, c);
    const nn::GradTarget t[] = {{span_of(x), cspan_of(g.dx)}, {span_of(gm), cspan_of(g.dgamma)},
                                {span_of(bt), cspan_of(g.dbeta)}};
    errs.emplace_back("layer_norm", nn::grad_check(
                                        [&] { return dot(nn::layer_norm_forward(x, gm, bt, nullptr), proj); }, t));
  }
  {
    Matrix x = random_matrix(4, 5, rng, 2.0);
    const Matrix proj = random_matrix(4, 5, rng);
    const Matrix dx = nn::gelu_backward(x, proj);
    const nn::GradTarget t[] = {{span_of(x), cspan_of(dx)}};
    errs.emplace_back("gelu", nn::grad_check([&] { return dot(nn::gelu_forward(x), proj); }, t));
  }
  {
    Matrix table = random_matrix(4, 3, rng);
    const std::vector<int> ids = {0, 2, 2, 3};
    const Matrix proj = random_matrix(4, 3, rng);
    Matrix dt = Matrix::Zero(4, 3);
    nn::embedding_backward(dt, ids, proj);
    const nn::GradTarget t[] = {{span_of(table), cspan_of(dt)}};
    errs.emplace_back("embedding", nn::grad_check([&] { return dot(nn::embedding_forward(table, ids), proj); }, t));
  }
  {
    nn::ParameterSet params;
    nn::CausalSelfAttention attn(params, "attn", 8, 2, 6, rng, 0.5);
    nn::Linear lin(params, "lin", 8, 8, rng, 0.3);
    nn::LayerNorm ln(params, "ln", 8);
    nn::init_normal(params.at("ln.gamma"), rng, 1.0);
    Matrix x = random_matrix(6, 8, rng);
    const Matrix proj = random_matrix(6, 8, rng);
    auto forward = [&](nn::CausalSelfAttention::Cache* ac, nn::LayerNormCache* lc, Matrix* mid) {
      Matrix a = attn.forward(x, ac);
      if (mid) *mid = a;
      return ln.forward(lin.forward(a), lc);
    };
    nn::CausalSelfAttention::Cache ac;
    nn::LayerNormCache lc;
    Matrix mid;
    forward(&ac, &lc, &mid);
    params.zero_grad();
    const Matrix dx = attn.backward(lin.backward(mid, ln.backward(proj, lc)), ac);
    auto loss = [&] { return dot(forward(nullptr, nullptr, nullptr), proj); };
    errs.emplace_back("attention+linear+layer_norm params", nn::grad_check(loss, params));
    const nn::GradTarget t[] = {{span_of(x), cspan_of(dx)}};
    errs.emplace_back("attention input", nn::grad_check(loss, t));
  }
  {
    // nnPU through the discriminator, one case per clamp branch.
    pu::DiscriminatorModel model(8, 5, 0.01);
    nn::init_normal(model.params().at("disc.out.weight"), rng, 1.0);
    const Matrix pool = random_matrix(40, pu::kInputDim, rng);
    const auto logits = model.score_batch(pool);
    std::vector<int> order(40);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return logits[a] > logits[b]; });
    Matrix high(5, pu::kInputDim), low(5, pu::kInputDim);
    for (int i = 0; i < 5; ++i) {
      high.row(i) = pool.row(order[i]);
      low.row(i) = pool.row(order[39 - i]);
    }
    for (const auto& [e, o, eta] : {std::tuple{&low, &high, 0.01}, std::tuple{&high, &low, 0.9}}) {
      pu::DiscriminatorModel::Cache ec, oc;
      const auto el = model.forward(*e, &ec);
      const auto ol = model.forward(*o, &oc);
      std::vector<double> eg(el.size()), og(ol.size());
      const pu::RiskTerms r = pu::nnpu_risk(el, ol, eta, eg, og);
      model.params().zero_grad();
      model.backward(eg, ec);
      model.backward(og, oc);
      const Matrix* ep = e;
      const Matrix* op = o;
      const double err = nn::grad_check([&, eta = eta] { return pu::nnpu_loss(model, *ep, *op, eta); },
                                        model.params());
      errs.emplace_back(std::string("nnpu ") + (r.clamped ? "clamped" : "unclamped"), err);
    }
  }
  {
    dt::ModelConfig c;
    c.d_model = 8;
    c.layers = 2;
    c.heads = 2;
    c.context_steps = 8;
    c.bag_len = 4;
    dt::BagDecisionTransformer m(c);
    for (const auto& name : m.params().names()) nn::init_normal(m.params().at(name), rng, 0.3);
    Trajectory t;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 8; ++i) {
      StateVector s;
      for (double& x : s) x = u(rng);
      t.states.push_back(s);
      t.actions.push_back(2.0 * u(rng));
      t.rewards.push_back(u(rng));
    }
    reward::apply_raw_rtg(t);
    t.expert_levels = {0, 1, 1, 0, 1, 0, 0, 1};
    const dt::SequenceInput in = dt::SequenceInput::from_trajectory(t, true);
    m.params().zero_grad();
    m.accumulate_gradients(in, 1.0);
    errs.emplace_back("bag_dt loss", nn::grad_check([&] { return m.evaluate_loss(in).total(); }, m.params()));
  }
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string detail;
  for (const auto& [name, e] : errs) {
    worst = std::max(worst, e);
    detail += name + "=" + num(e, 2) + " ";
  }
  return {worst <= 1e-4 && secs < 60.0, detail + "time=" + num(secs, 3) + "s"};
}

// ---- 5 ----
Outcome expert_optimality() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(505);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double ratio_sum = 0.0, worst = 1.0;
  int counted = 0, skipped = 0;
  // Instances whose optimum is 0 have no ratio; draw until 50 are scored.
  for (int inst = 0; counted < 50; ++inst) {
    const int n = 8 + inst % 8;
    std::vector<market::Opportunity> opps;
    std::vector<double> profile = {0.5 + u(rng), 0.5 + u(rng), 0.5 + u(rng)};
    double total_cost = 0.0;
    for (int j = 0; j < n; ++j) {
      market::Opportunity o{0.05 + 0.9 * u(rng), 0.05 + u(rng), j * 3 / n};
      total_cost += o.competitor_bid;
      opps.push_back(o);
    }
    const CampaignConstraints cc{(0.2 + 0.5 * u(rng)) * total_cost, inst % 2 == 0 ? 1e9 : 0.8 + u(rng)};
    const double opt = expert::brute_force_optimal(opps, profile, cc);
    const auto sol = expert::solve_multipliers(opps, profile, cc);
    const auto rep = expert::replay(opps, profile, sol.multipliers, cc);
    if (opt <= 0.0) {
      ++skipped;
      continue;
    }
    const double r = rep.total_value / opt;
    ratio_sum += r;
    worst = std::min(worst, r);
    ++counted;
  }
  int feasible = 0;
  for (int i = 0; i < 100; ++i) {
    market::MarketConfig mc;
    mc.seed = derive_seed({505, static_cast<std::uint64_t>(i)});
    mc.cvr_profile = market::make_cvr_profile(mc.steps_per_episode, mc.seed + 1);
    const CampaignConstraints cc{0.4 + 1.6 * u(rng), i % 4 == 0 ? 0.3 + 0.5 * u(rng) : 0.5 + u(rng)};
    const Trajectory t = expert::generate_expert_trajectory(mc, cc).trajectory;
    const bool budget_ok = t.total_spend() <= cc.budget + 1e-6;
    const bool ros_ok = t.total_value() <= 0.0 || t.total_spend() <= cc.ros_bound * t.total_value() + 1e-6;
    feasible += budget_ok && ros_ok;
  }
  const double secs = seconds_since(t0);
  const double avg = counted > 0 ? ratio_sum / counted : 0.0;
  const bool ok = counted > 0 && avg >= 0.9 && worst >= 0.75 && feasible == 100 && secs < 60.0;
  return {ok, "mean ratio=" + num(avg, 4) + " min=" + num(worst, 4) + " over " + std::to_string(counted) +
                  " instances (" + std::to_string(skipped) + " with zero optimum skipped), feasible " + std::to_string(feasible) + "/100 time=" + num(secs, 3) + "s"};
}

// ---- 6 ----
Outcome discriminator_auc() {
  const auto t0 = std::chrono::steady_clock::now();
  auto make = [](int ne, int no, std::uint64_t seed, Matrix& e, Matrix& o) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    e = random_matrix(ne, pu::kInputDim, rng);
    o = random_matrix(no, pu::kInputDim, rng);
    for (int i = 0; i < ne; ++i) e(i, kStateDim) = 1.0 + 0.05 * g(rng);
    for (int i = 0; i < no; ++i) o(i, kStateDim) = u(rng) < 0.3 ? 0.8 * u(rng) : 1.2 + 1.8 * u(rng);
  };
  Matrix te, to, he, ho;
  make(400, 1600, 606, te, to);
  make(200, 400, 607, he, ho);
  pu::DiscriminatorConfig cfg;
  cfg.hidden = 32;
  cfg.epochs = 40;
  cfg.batch_size = 64;
  cfg.lr = 3e-3;
  const pu::DiscriminatorModel m = pu::train_discriminator(te, to, cfg);
  const auto pe = m.score_batch(he);
  const auto po = m.score_batch(ho);
  double wins = 0.0;
  for (double p : pe) {
    for (double q : po) wins += p > q ? 1.0 : (p == q ? 0.5 : 0.0);
  }
  const double auc = wins / (static_cast<double>(pe.size()) * static_cast<double>(po.size()));
  const double secs = seconds_since(t0);
  return {auc >= 0.95 && secs < 120.0, "held-out AUC=" + num(auc, 5) + " time=" + num(secs, 3) + "s"};
}

// ---- 7 ----
Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<Trajectory> data;
  for (int i = 0; i < 4; ++i) {
    market::MarketConfig mc;
    mc.reward_signal = market::RewardSignal::kExpected;
    mc.seed = derive_seed({707, static_cast<std::uint64_t>(i)});
    mc.cvr_profile = market::make_cvr_profile(mc.steps_per_episode, mc.seed);
    const double scale = 1.0 + i;
    Trajectory t = market::run_episode([scale](const market::EpisodeHistory&) { return scale; }, mc,
                                       {1.0, 1.0});
    reward::apply_raw_rtg(t);
    t.expert_levels.assign(t.steps(), i % 2);
    data.push_back(std::move(t));
  }
  dt::ModelConfig c;
  c.batch_size = 4;
  c.train_steps = 2000;
  c.seed = 7;
  auto mean_loss = [&](const dt::BagDecisionTransformer& m) {
    double sum = 0.0;
    for (const Trajectory& t : data) {
      sum += m.evaluate_loss(dt::SequenceInput::from_trajectory(t, true)).total();
    }
    return sum / static_cast<double>(data.size());
  };
  // Full-data loss every 50 steps; stop once it is under the bar.
  const dt::TrainResult r =
      dt::train(data, c, [&](const dt::BagDecisionTransformer& m, const dt::LossRecord& rec) {
        return rec.step % 50 != 0 || mean_loss(m) >= 1e-3;
      });
  const double loss = mean_loss(r.model);
  const double secs = seconds_since(t0);
  return {loss < 1e-3 && secs < 300.0,
          "final loss=" + num(loss, 4) + " after " + std::to_string(r.log.size()) + " steps time=" +
              num(secs, 4) + "s"};
}

// ---- 8 ----
Outcome ordering(const std::filesystem::path& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  harness::ExperimentConfig cfg = harness::ExperimentConfig::defaults();
  cfg.output_dir = out_dir;
  const harness::PipelineResult res = harness::run_pipeline(cfg, harness::all_methods(), true);
  const double secs = seconds_since(t0);
  const harness::RatioReport ratios = harness::ratio_report(res.data.offline, res.data.expert);
  const std::string md = harness::summary_markdown(res.reports, &ratios);
  io::write_file_atomic(out_dir / "summary.md", md);
  std::cout << md << '\n';

  auto mean = [&](const std::string& m) { return res.reports.at(m).grand_mean(); };
  const double e = mean("ebaret"), d = mean("dt"), b = mean("bc");
  bool ok = e > d && d > b;
  std::string detail = "ebaret=" + num(e) + " dt=" + num(d) + " bc=" + num(b);
  for (const char* a : {"ebaret_noE", "ebaret_noPU", "ebaret_noEA", "ebaret_noBR"}) {
    ok = ok && e > mean(a);
    detail += std::string(" ") + a + "=" + num(mean(a));
  }
  std::size_t cells = 0;
  for (const auto& [name, r] : res.reports) cells = std::max(cells, r.rows.size());
  ok = ok && cells >= 35 && cfg.test_seeds >= 5 && cfg.test_periods.size() == 7 && secs < 1800.0;
  return {ok, detail + " (" + std::to_string(cells) + " period-seed cells) time=" + num(secs, 4) + "s"};
}

// ---- 9 ----
Outcome offline_ratio() {
  const auto t0 = std::chrono::steady_clock::now();
  const harness::ExperimentConfig cfg = harness::ExperimentConfig::defaults();
  const harness::Datasets data = harness::gen_data(cfg);
  const harness::RatioReport r = harness::ratio_report(data.offline, data.expert);
  const double secs = seconds_since(t0);
  std::string hist;
  for (int h : r.histogram) hist += std::to_string(h) + " ";
  return {r.median < 0.9 && r.max <= 1.0 + 1e-9,
          "n=" + std::to_string(r.ratios.size()) + " median=" + num(r.median, 4) + " max=" +
              num(r.max, 12) + " histogram=[" + hist + "] time=" + num(secs, 3) + "s"};
}

}  // namespace

int main(int argc, char** argv) {
  ebaret::nn::keep_heap_resident();
  CLI::App app{"acceptance criteria"};
  int only = 0;
  std::string out = "acceptance_out";
  app.add_option("--criterion", only, "run a single criterion (1-9); all when omitted")
      ->check(CLI::Range(1, 9));
  app.add_option("--out", out, "output directory for the pipeline run of criterion 8");
  CLI11_PARSE(app, argc, argv);
  log::set_level(log::Level::kWarning);

  const std::vector<std::function<Outcome()>> checks = {
      nnpu_golden,       redistribution, rtg_recurrence,
      gradient_checks,   expert_optimality, discriminator_auc,
      overfit,           [&] { return ordering(out); }, offline_ratio,
  };
  bool all_ok = true;
  for (int i = 1; i <= 9; ++i) {
    if (only != 0 && i != only) continue;
    Outcome o;
    try {
      o = checks[i - 1]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "criterion " << i << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    all_ok = all_ok && o.pass;
  }
  return all_ok ? 0 : 1;
}
