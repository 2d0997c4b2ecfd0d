#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <memory>
#include <numeric>

#include "ebaret/errors.hpp"
#include "ebaret/pu_disc.hpp"

using namespace ebaret;
using namespace ebaret::pu;
using nn::Matrix;

namespace {

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// Direct transcription of the risk: -log s = softplus(-z), -log(1-s) = softplus(z).
double reference_nnpu(const std::vector<double>& e, const std::vector<double>& o, double eta) {
  double pos = 0.0, eneg = 0.0, oneg = 0.0;
  for (double z : e) {
    pos += softplus(-z);
    eneg += softplus(z);
  }
  for (double z : o) oneg += softplus(z);
  pos /= e.size();
  eneg /= e.size();
  oneg /= o.size();
  return eta * pos + std::max(0.0, oneg - eta * eneg);
}

// Exhaustive pair counting; ties count half.
double pair_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0.0;
  for (double p : pos) {
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  }
  return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

Matrix random_rows(int n, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix m(n, kInputDim);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// Expert actions sit near 1.0; offline actions avoid [0.8, 1.2].
struct ToySets {
  Matrix expert;
  Matrix offline;
};

ToySets toy_sets(int n_expert, int n_offline, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ToySets s{random_rows(n_expert, rng), random_rows(n_offline, rng)};
  for (int i = 0; i < n_expert; ++i) s.expert(i, kStateDim) = 1.0 + 0.05 * g(rng);
  for (int i = 0; i < n_offline; ++i) {
    s.offline(i, kStateDim) = u(rng) < 0.3 ? 0.8 * u(rng) : 1.2 + 1.8 * u(rng);
  }
  return s;
}

std::span<double> span_of(std::vector<double>& v) { return {v.data(), v.size()}; }

}  // namespace

TEST(Score, FreshModelIsNeutralAndDeterministic) {
  const DiscriminatorModel m(16, 3);
  StateVector s{};
  s.fill(0.3);
  EXPECT_DOUBLE_EQ(m.score(s, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(sigmoid(m.score(s, 1.0)), 0.5);
  EXPECT_THROW(m.score_batch(Matrix::Zero(2, 8)), ShapeError);
  EXPECT_THROW(DiscriminatorModel(8, 1, 1.0), InputError);
  EXPECT_THROW(DiscriminatorModel(8, 1, 0.0), InputError);
}

TEST(NnpuRisk, AllZeroLogitsGiveLn2) {
  const std::vector<double> e(4, 0.0), o(7, 0.0);
  const RiskTerms r = nnpu_risk(e, o, 0.01);
  EXPECT_NEAR(r.loss, std::log(2.0), 1e-15);
  EXPECT_FALSE(r.clamped);
}

TEST(NnpuRisk, ClampBranchKeepsOnlyPositiveTerm) {
  std::vector<double> e = {4.0, 5.0, 6.0}, o = {-6.0, -5.0};
  std::vector<double> eg(3), og(2);
  const RiskTerms r = nnpu_risk(e, o, 0.5, span_of(eg), span_of(og));
  ASSERT_TRUE(r.clamped);
  double pos = 0.0;
  for (double z : e) pos += softplus(-z);
  EXPECT_DOUBLE_EQ(r.loss, 0.5 * pos / 3.0);
  for (double g : og) EXPECT_EQ(g, 0.0);
  for (double g : eg) EXPECT_LT(g, 0.0);
}

TEST(NnpuRisk, SmallEtaApproachesOfflineCrossEntropy) {
  const std::vector<double> e = {0.3, -1.0}, o = {0.7, -0.2, 1.5};
  double oneg = 0.0;
  for (double z : o) oneg += softplus(z);
  EXPECT_NEAR(nnpu_risk(e, o, 1e-9).loss, oneg / 3.0, 1e-8);
}

TEST(NnpuRisk, RejectsBadInput) {
  const std::vector<double> one = {0.0}, none;
  EXPECT_THROW(nnpu_risk(none, one, 0.01), InputError);
  EXPECT_THROW(nnpu_risk(one, none, 0.01), InputError);
  EXPECT_THROW(nnpu_risk(one, one, 0.0), InputError);
  EXPECT_THROW(nnpu_risk(one, one, 1.0), InputError);
}

// Property: matches the reference, is non-negative, and equals the unclamped
// sum whenever the clamp is inactive.
TEST(NnpuRiskProperty, ReferenceAndNonNegativity) {
  Rng rng(31);
  std::normal_distribution<double> g(0.0, 3.0);
  std::uniform_real_distribution<double> eta_d(0.001, 0.999);
  int clamped = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> e(1 + trial % 5), o(1 + trial % 7);
    const double shift = g(rng);
    for (double& z : e) z = g(rng) + shift;
    for (double& z : o) z = g(rng) - shift;
    const double eta = eta_d(rng);
    const RiskTerms r = nnpu_risk(e, o, eta);
    EXPECT_GE(r.loss, 0.0);
    EXPECT_GE(r.loss, eta * r.positive_risk - 1e-15);
    EXPECT_NEAR(r.loss, reference_nnpu(e, o, eta), 1e-12);
    if (r.clamped) {
      ++clamped;
    } else {
      EXPECT_DOUBLE_EQ(r.loss, eta * r.positive_risk + r.offline_negative - eta * r.expert_negative);
    }
  }
  EXPECT_GT(clamped, 50);
}

TEST(NnpuRisk, LogitGradientsMatchFiniteDifferences) {
  for (const double eta : {0.01, 0.6}) {
    std::vector<double> e = {0.4, 2.5, 3.0}, o = {-2.0, 0.1, -3.0, -1.5};
    if (eta < 0.5) o = {0.5, 0.1, 1.0, -0.3};
    std::vector<double> eg(e.size()), og(o.size());
    const RiskTerms r = nnpu_risk(e, o, eta, span_of(eg), span_of(og));
    const double h = 1e-6;
    auto check = [&](std::vector<double>& v, const std::vector<double>& grad) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double keep = v[i];
        v[i] = keep + h;
        const double up = nnpu_risk(e, o, eta).loss;
        v[i] = keep - h;
        const double down = nnpu_risk(e, o, eta).loss;
        v[i] = keep;
        EXPECT_LE(nn::relative_error((up - down) / (2 * h), grad[i]), 1e-4);
      }
    };
    check(e, eg);
    check(o, og);
    EXPECT_EQ(r.clamped, eta > 0.5);
  }
}

TEST(CrossEntropyRisk, IsPlainBinaryCrossEntropy) {
  const std::vector<double> e = {0.0, 1.0}, o = {0.0};
  const RiskTerms r = cross_entropy_risk(e, o);
  const double expected = (softplus(0.0) + softplus(-1.0)) / 2.0 + softplus(0.0);
  EXPECT_NEAR(r.loss, expected, 1e-15);
}

// Full model gradient check through backward(), both clamp branches.
TEST(GradCheck, ModelThroughNnpuLoss) {
  Rng rng(41);
  DiscriminatorModel model(8, 5, 0.01);
  nn::init_normal(model.params().at("disc.out.weight"), rng, 1.0);
  const Matrix pool = random_rows(40, rng);
  const auto pool_logits = model.score_batch(pool);
  std::vector<int> order(40);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) { return pool_logits[a] > pool_logits[b]; });
  Matrix high(5, kInputDim), low(5, kInputDim);
  for (int i = 0; i < 5; ++i) {
    high.row(i) = pool.row(order[i]);
    low.row(i) = pool.row(order[39 - i]);
  }

  struct Case {
    const Matrix* expert;
    const Matrix* offline;
    double eta;
    bool clamped;
  };
  const Case cases[] = {{&low, &high, 0.01, false}, {&high, &low, 0.9, true}};
  for (const Case& c : cases) {
    DiscriminatorModel::Cache ec, oc;
    const auto el = model.forward(*c.expert, &ec);
    const auto ol = model.forward(*c.offline, &oc);
    std::vector<double> eg(el.size()), og(ol.size());
    const RiskTerms r = nnpu_risk(el, ol, c.eta, span_of(eg), span_of(og));
    ASSERT_EQ(r.clamped, c.clamped);
    model.params().zero_grad();
    model.backward(eg, ec);
    model.backward(og, oc);
    auto loss = [&] { return nnpu_loss(model, *c.expert, *c.offline, c.eta); };
    EXPECT_LE(nn::grad_check(loss, model.params()), 1e-4) << "clamped=" << c.clamped;
  }
}

TEST(Training, ZeroEpochsReturnsNeutralModel) {
  const ToySets s = toy_sets(20, 40, 1);
  DiscriminatorConfig cfg;
  cfg.epochs = 0;
  const DiscriminatorModel m = train_discriminator(s.expert, s.offline, cfg);
  for (double z : m.score_batch(s.offline)) EXPECT_DOUBLE_EQ(sigmoid(z), 0.5);
  EXPECT_TRUE(m.loss_curve.empty());
}

TEST(Training, RejectsBadDatasets) {
  DiscriminatorConfig cfg;
  EXPECT_THROW(train_discriminator(Matrix::Zero(3, 8), Matrix::Zero(3, 8), cfg), SchemaError);
  EXPECT_THROW(train_discriminator(Matrix::Zero(0, 9), Matrix::Zero(3, 9), cfg), InputError);
}

TEST(Training, SeparatesToySetsWithHighHeldOutAuc) {
  const ToySets train = toy_sets(400, 1600, 11);
  const ToySets held = toy_sets(200, 400, 12);
  DiscriminatorConfig cfg;
  cfg.hidden = 32;
  cfg.epochs = 40;
  cfg.batch_size = 64;
  cfg.lr = 3e-3;
  const DiscriminatorModel m = train_discriminator(train.expert, train.offline, cfg);
  const auto pe = m.score_batch(held.expert);
  const auto po = m.score_batch(held.offline);
  EXPECT_GE(pair_auc(pe, po), 0.95);

  double se = 0.0, so = 0.0;
  for (double z : pe) se += sigmoid(z);
  for (double z : po) so += sigmoid(z);
  EXPECT_GT(se / pe.size(), so / po.size());

  // Loss audit: 10-epoch window means do not rise beyond optimizer noise.
  ASSERT_EQ(m.loss_curve.size(), 40u);
  std::vector<double> windows;
  for (int w = 0; w + 10 <= 40; w += 10) {
    windows.push_back(std::accumulate(m.loss_curve.begin() + w, m.loss_curve.begin() + w + 10, 0.0) / 10);
  }
  for (std::size_t i = 1; i < windows.size(); ++i) EXPECT_LE(windows[i], windows[i - 1] * 1.02 + 1e-6);
}

TEST(Training, DeterministicPerSeed) {
  const ToySets s = toy_sets(50, 100, 3);
  DiscriminatorConfig cfg;
  cfg.hidden = 8;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  const DiscriminatorModel a = train_discriminator(s.expert, s.offline, cfg);
  const DiscriminatorModel b = train_discriminator(s.expert, s.offline, cfg);
  EXPECT_EQ(a.score_batch(s.offline), b.score_batch(s.offline));
  cfg.seed = 8;
  const DiscriminatorModel c = train_discriminator(s.expert, s.offline, cfg);
  EXPECT_NE(a.score_batch(s.offline), c.score_batch(s.offline));
}

TEST(Checkpoint, SaveLoadPreservesScores) {
  const ToySets s = toy_sets(30, 60, 4);
  DiscriminatorConfig cfg;
  cfg.hidden = 8;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  const DiscriminatorModel a = train_discriminator(s.expert, s.offline, cfg);
  const auto path = std::filesystem::temp_directory_path() / "ebaret_disc_test.json";
  a.save(path);
  const DiscriminatorModel b = DiscriminatorModel::load(path);
  EXPECT_EQ(a.score_batch(s.offline), b.score_batch(s.offline));
  EXPECT_EQ(a.loss_curve, b.loss_curve);
  std::filesystem::remove(path);
}

TEST(Levels, MedianSplit) {
  const std::vector<double> scores = {0.1, 0.2, 0.8, 0.9};
  const bool flags[] = {false, false, false, false};
  EXPECT_EQ(assign_levels(scores, 2, flags), (std::vector<int>{0, 0, 1, 1}));
}

TEST(Levels, ExpertsForcedToTop) {
  const std::vector<double> scores = {0.1, 0.1, 0.1};
  const bool all[] = {true, true, true};
  EXPECT_EQ(assign_levels(scores, 3, all), (std::vector<int>{2, 2, 2}));
  const std::vector<double> mixed = {0.05, 0.9, 0.2, 0.7};
  const bool some[] = {true, false, false, false};
  EXPECT_EQ(assign_levels(mixed, 2, some)[0], 1);
}

TEST(Levels, Errors) {
  const std::vector<double> flat = {0.4, 0.4, 0.4};
  const bool none[] = {false, false, false};
  EXPECT_THROW(assign_levels(flat, 2, none), DegenerateBinning);
  const std::vector<double> ok = {0.1, 0.5, 0.9};
  EXPECT_THROW(assign_levels(ok, 1, none), InputError);
  EXPECT_THROW(assign_levels(ok, 4, none), DegenerateBinning);
}

// Property: offline levels are non-decreasing in score and roughly equal-sized.
TEST(LevelsProperty, MonotoneAndBalanced) {
  Rng rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 2; k <= 5; ++k) {
    std::vector<double> scores(1000);
    for (double& s : scores) s = u(rng);
    std::unique_ptr<bool[]> flags(new bool[1000]());
    const auto levels = assign_levels(scores, k, std::span<const bool>(flags.get(), 1000));
    std::vector<int> idx(1000);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] < scores[b]; });
    std::vector<int> counts(k, 0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (i > 0) EXPECT_GE(levels[idx[i]], levels[idx[i - 1]]);
      ASSERT_GE(levels[idx[i]], 0);
      ASSERT_LT(levels[idx[i]], k);
      ++counts[levels[idx[i]]];
    }
    for (int c : counts) EXPECT_NEAR(c, 1000.0 / k, 1.0);
  }
}
