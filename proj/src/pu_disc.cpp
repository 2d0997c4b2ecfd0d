#include "ebaret/pu_disc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ebaret/errors.hpp"
#include "ebaret/trajectory_io.hpp"

namespace ebaret::pu {

using nn::Matrix;
using nlohmann::json;

namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double mean_of(std::span<const double> xs, double (*f)(double)) {
  double s = 0.0;
  for (double x : xs) s += f(x);
  return s / static_cast<double>(xs.size());
}

double neg_log_sigmoid(double z) { return softplus(-z); }
double neg_log_one_minus_sigmoid(double z) { return softplus(z); }

}  // namespace

double sigmoid(double logit) {
  if (logit >= 0.0) return 1.0 / (1.0 + std::exp(-logit));
  const double e = std::exp(logit);
  return e / (1.0 + e);
}

InputNormalizer InputNormalizer::fit(const Matrix& inputs) {
  InputNormalizer n;
  if (inputs.rows() == 0) return n;
  for (int c = 0; c < kInputDim; ++c) {
    const double mean = inputs.col(c).mean();
    const double var = (inputs.col(c).array() - mean).square().mean();
    n.mean[c] = mean;
    n.stddev[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return n;
}

Matrix InputNormalizer::apply(const Matrix& inputs) const {
  if (inputs.cols() != kInputDim) throw ShapeError("discriminator input must have 9 columns");
  Matrix out = inputs;
  for (int c = 0; c < kInputDim; ++c) {
    out.col(c) = (out.col(c).array() - mean[c]) / stddev[c];
  }
  return out;
}

DiscriminatorModel::DiscriminatorModel(int hidden, std::uint64_t seed, double class_prior)
    : hidden_(hidden), class_prior_(class_prior) {
  if (!(class_prior > 0.0 && class_prior < 1.0)) throw InputError("class_prior must lie in (0,1)");
  Rng rng(seed);
  l1_ = nn::Linear(params_, "disc.l1", kInputDim, hidden, rng, 1.0 / std::sqrt(kInputDim));
  l2_ = nn::Linear(params_, "disc.l2", hidden, hidden, rng, 1.0 / std::sqrt(hidden));
  out_ = nn::Linear(params_, "disc.out", hidden, 1, rng, 0.0);
}

std::vector<double> DiscriminatorModel::forward(const Matrix& inputs, Cache* cache) const {
  Matrix x = normalizer_.apply(inputs);
  Matrix pre1 = l1_.forward(x);
  Matrix h1 = nn::gelu_forward(pre1);
  Matrix pre2 = l2_.forward(h1);
  Matrix h2 = nn::gelu_forward(pre2);
  const Matrix logits = out_.forward(h2);
  std::vector<double> out(logits.data(), logits.data() + logits.size());
  if (cache != nullptr) {
    cache->x = std::move(x);
    cache->pre1 = std::move(pre1);
    cache->h1 = std::move(h1);
    cache->pre2 = std::move(pre2);
    cache->h2 = std::move(h2);
  }
  return out;
}

void DiscriminatorModel::backward(std::span<const double> dlogits, const Cache& cache) const {
  Matrix dout(static_cast<Eigen::Index>(dlogits.size()), 1);
  std::copy(dlogits.begin(), dlogits.end(), dout.data());
  const Matrix dh2 = out_.backward(cache.h2, dout);
  const Matrix dpre2 = nn::gelu_backward(cache.pre2, dh2);
  const Matrix dh1 = l2_.backward(cache.h1, dpre2);
  const Matrix dpre1 = nn::gelu_backward(cache.pre1, dh1);
  l1_.backward(cache.x, dpre1);
}

double DiscriminatorModel::score(const StateVector& state, double action) const {
  Matrix row(1, kInputDim);
  for (int i = 0; i < kStateDim; ++i) row(0, i) = state[i];
  row(0, kStateDim) = action;
  return forward(row, nullptr).front();
}

std::vector<double> DiscriminatorModel::score_batch(const Matrix& inputs) const {
  return forward(inputs, nullptr);
}

void DiscriminatorModel::save(const std::filesystem::path& path) const {
  json meta = {{"kind", "discriminator"},
               {"hidden", hidden_},
               {"class_prior", class_prior_},
               {"input_mean", normalizer_.mean},
               {"input_std", normalizer_.stddev},
               {"loss_curve", loss_curve}};
  nn::save_checkpoint(path, params_, meta);
}

DiscriminatorModel DiscriminatorModel::load(const std::filesystem::path& path) {
  const json doc = nn::read_checkpoint(path);
  const json& meta = doc.at("meta");
  if (meta.value("kind", std::string()) != "discriminator") {
    throw SchemaError("checkpoint is not a discriminator");
  }
  DiscriminatorModel m(meta.at("hidden").get<int>(), 0, meta.at("class_prior").get<double>());
  nn::load_values(doc, m.params_);
  m.normalizer_.mean = meta.at("input_mean").get<std::vector<double>>();
  m.normalizer_.stddev = meta.at("input_std").get<std::vector<double>>();
  m.loss_curve = meta.value("loss_curve", std::vector<double>{});
  return m;
}

RiskTerms nnpu_risk(std::span<const double> expert_logits, std::span<const double> offline_logits,
                    double eta, std::span<double> expert_grad, std::span<double> offline_grad) {
  if (expert_logits.empty() || offline_logits.empty()) throw InputError("empty PU batch");
  if (!(eta > 0.0 && eta < 1.0)) throw InputError("eta must lie in (0,1)");
  RiskTerms r;
  r.positive_risk = mean_of(expert_logits, neg_log_sigmoid);
  r.offline_negative = mean_of(offline_logits, neg_log_one_minus_sigmoid);
  r.expert_negative = mean_of(expert_logits, neg_log_one_minus_sigmoid);
  const double negative_risk = r.offline_negative - eta * r.expert_negative;
  r.clamped = negative_risk < 0.0;
  r.loss = eta * r.positive_risk + std::max(0.0, negative_risk);

  if (!expert_grad.empty() || !offline_grad.empty()) {
    if (expert_grad.size() != expert_logits.size() || offline_grad.size() != offline_logits.size()) {
      throw ShapeError("nnpu_risk: gradient buffer size mismatch");
    }
    const double ne = static_cast<double>(expert_logits.size());
    const double no = static_cast<double>(offline_logits.size());
    for (std::size_t i = 0; i < expert_logits.size(); ++i) {
      const double s = sigmoid(expert_logits[i]);
      double g = eta * (s - 1.0) / ne;       // d/dz softplus(-z) = sigma(z) - 1
      if (!r.clamped) g -= eta * s / ne;     // d/dz softplus(z) = sigma(z)
      expert_grad[i] = g;
    }
    for (std::size_t i = 0; i < offline_logits.size(); ++i) {
      offline_grad[i] = r.clamped ? 0.0 : sigmoid(offline_logits[i]) / no;
    }
  }
  return r;
}

RiskTerms cross_entropy_risk(std::span<const double> expert_logits,
                             std::span<const double> offline_logits, std::span<double> expert_grad,
                             std::span<double> offline_grad) {
  if (expert_logits.empty() || offline_logits.empty()) throw InputError("empty batch");
  RiskTerms r;
  r.positive_risk = mean_of(expert_logits, neg_log_sigmoid);
  r.offline_negative = mean_of(offline_logits, neg_log_one_minus_sigmoid);
  r.expert_negative = mean_of(expert_logits, neg_log_one_minus_sigmoid);
  r.loss = r.positive_risk + r.offline_negative;
  if (!expert_grad.empty() || !offline_grad.empty()) {
    if (expert_grad.size() != expert_logits.size() || offline_grad.size() != offline_logits.size()) {
      throw ShapeError("cross_entropy_risk: gradient buffer size mismatch");
    }
    const double ne = static_cast<double>(expert_logits.size());
    const double no = static_cast<double>(offline_logits.size());
    for (std::size_t i = 0; i < expert_logits.size(); ++i) {
      expert_grad[i] = (sigmoid(expert_logits[i]) - 1.0) / ne;
    }
    for (std::size_t i = 0; i < offline_logits.size(); ++i) {
      offline_grad[i] = sigmoid(offline_logits[i]) / no;
    }
  }
  return r;
}

double nnpu_loss(const DiscriminatorModel& model, const Matrix& expert_batch,
                 const Matrix& offline_batch, double eta) {
  if (expert_batch.rows() == 0 || offline_batch.rows() == 0) throw InputError("empty PU batch");
  const auto e = model.score_batch(expert_batch);
  const auto o = model.score_batch(offline_batch);
  return nnpu_risk(e, o, eta).loss;
}

Matrix transition_inputs(std::span<const Trajectory> trajectories) {
  Eigen::Index rows = 0;
  for (const Trajectory& t : trajectories) rows += t.steps();
  Matrix out(rows, kInputDim);
  Eigen::Index r = 0;
  for (const Trajectory& t : trajectories) {
    if (static_cast<int>(t.states.size()) != t.steps()) throw SchemaError("states/actions length");
    for (int s = 0; s < t.steps(); ++s, ++r) {
      for (int i = 0; i < kStateDim; ++i) out(r, i) = t.states[s][i];
      out(r, kStateDim) = t.actions[s];
    }
  }
  return out;
}

namespace {

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  }
  return out;
}

}  // namespace

DiscriminatorModel train_discriminator(const Matrix& expert_set, const Matrix& offline_set,
                                       const DiscriminatorConfig& config) {
  if (expert_set.cols() != kInputDim || offline_set.cols() != kInputDim) {
    throw SchemaError("discriminator datasets must have 9 columns (state ++ action)");
  }
  if (expert_set.rows() == 0 || offline_set.rows() == 0) throw InputError("empty dataset");
  DiscriminatorModel model(config.hidden, config.seed, config.class_prior);
  Matrix both(expert_set.rows() + offline_set.rows(), kInputDim);
  both << expert_set, offline_set;
  model.normalizer() = InputNormalizer::fit(both);
  if (config.epochs <= 0) return model;

  Rng rng(derive_seed({config.seed, 0xd15c}));
  nn::Adam adam(nn::AdamConfig{config.lr});
  const std::size_t ne = static_cast<std::size_t>(expert_set.rows());
  const std::size_t no = static_cast<std::size_t>(offline_set.rows());
  const std::size_t batch = static_cast<std::size_t>(std::max(1, config.batch_size));
  const std::size_t batches = std::max<std::size_t>(1, std::max(ne, no) / batch);

  std::vector<std::size_t> e_order(ne), o_order(no);
  std::iota(e_order.begin(), e_order.end(), 0);
  std::iota(o_order.begin(), o_order.end(), 0);
  std::size_t e_pos = ne, o_pos = no;
  auto draw = [&](std::vector<std::size_t>& order, std::size_t& pos) {
    std::vector<std::size_t> idx;
    idx.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      if (pos >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        pos = 0;
      }
      idx.push_back(order[pos++]);
    }
    return idx;
  };

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const Matrix eb = gather_rows(expert_set, draw(e_order, e_pos));
      const Matrix ob = gather_rows(offline_set, draw(o_order, o_pos));
      DiscriminatorModel::Cache ec, oc;
      const auto el = model.forward(eb, &ec);
      const auto ol = model.forward(ob, &oc);
      std::vector<double> eg(el.size()), og(ol.size());
      const RiskTerms r = config.loss == LossKind::kNonNegativePu
                              ? nnpu_risk(el, ol, config.class_prior, eg, og)
                              : cross_entropy_risk(el, ol, eg, og);
      model.params().zero_grad();
      model.backward(eg, ec);
      model.backward(og, oc);
      adam.step(model.params());
      epoch_loss += r.loss;
    }
    model.loss_curve.push_back(epoch_loss / static_cast<double>(batches));
  }
  return model;
}

DiscriminatorModel train_discriminator(std::span<const Trajectory> expert_set,
                                       std::span<const Trajectory> offline_set,
                                       const DiscriminatorConfig& config) {
  return train_discriminator(transition_inputs(expert_set), transition_inputs(offline_set), config);
}

std::vector<int> assign_levels(std::span<const double> scores, int k,
                               std::span<const bool> expert_flags) {
  if (k < 2) throw InputError("k must be at least 2");
  if (scores.empty()) throw InputError("no scores to bin");
  if (expert_flags.size() != scores.size()) throw ShapeError("scores/expert_flags length mismatch");

  std::vector<double> offline;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!expert_flags[i]) offline.push_back(scores[i]);
  }
  std::vector<int> levels(scores.size(), k - 1);
  if (offline.empty()) return levels;

  std::sort(offline.begin(), offline.end());
  std::vector<double> uniq = offline;
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (static_cast<int>(uniq.size()) < k) {
    throw DegenerateBinning("fewer distinct offline scores than expert levels");
  }

  // Cut i sits at the i/k quantile; a score at or above a cut moves up a level.
  std::vector<double> cuts;
  const std::size_t n = offline.size();
  for (int i = 1; i < k; ++i) cuts.push_back(offline[(static_cast<std::size_t>(i) * n) / k]);

  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (expert_flags[i]) continue;
    int level = 0;
    for (double c : cuts) {
      if (scores[i] >= c) ++level;
    }
    levels[i] = level;
  }
  return levels;
}

void score_trajectory(const DiscriminatorModel& model, Trajectory& traj) {
  const Trajectory* one = &traj;
  const auto logits = model.score_batch(transition_inputs(std::span<const Trajectory>(one, 1)));
  traj.sigma_scores.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) traj.sigma_scores[i] = sigmoid(logits[i]);
}

void score_and_level(const DiscriminatorModel& model, std::span<Trajectory> trajectories, int k) {
  std::vector<double> scores;
  std::vector<char> flags;
  for (Trajectory& t : trajectories) {
    score_trajectory(model, t);
    for (double s : t.sigma_scores) {
      scores.push_back(s);
      flags.push_back(t.is_expert() ? 1 : 0);
    }
  }
  const std::unique_ptr<bool[]> flag_buf(new bool[flags.size()]);
  for (std::size_t i = 0; i < flags.size(); ++i) flag_buf[i] = flags[i] != 0;
  const auto levels = assign_levels(scores, k, std::span<const bool>(flag_buf.get(), flags.size()));
  std::size_t pos = 0;
  for (Trajectory& t : trajectories) {
    t.expert_levels.assign(levels.begin() + static_cast<std::ptrdiff_t>(pos),
                           levels.begin() + static_cast<std::ptrdiff_t>(pos + t.sigma_scores.size()));
    pos += t.sigma_scores.size();
  }
}

}  // namespace ebaret::pu
