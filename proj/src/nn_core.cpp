#include "ebaret/nn_core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "ebaret/errors.hpp"
#include "ebaret/trajectory_io.hpp"

namespace ebaret::nn {

using nlohmann::json;

TensorView view(const Parameter& p) {
  TensorView v;
  v.shape = {static_cast<std::size_t>(p.value.rows()), static_cast<std::size_t>(p.value.cols())};
  v.data = std::span<const double>(p.value.data(), static_cast<std::size_t>(p.value.size()));
  return v;
}

Parameter& ParameterSet::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  if (contains(name)) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->value = Matrix::Zero(rows, cols);
  p->grad = Matrix::Zero(rows, cols);
  p->adam_m = Matrix::Zero(rows, cols);
  p->adam_v = Matrix::Zero(rows, cols);
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterSet::at(std::string_view name) {
  for (auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

const Parameter& ParameterSet::at(std::string_view name) const {
  for (const auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw std::out_of_range("no parameter named " + std::string(name));
}

bool ParameterSet::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const auto& p) { return p->name == name; });
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  for (const auto& p : params_) out.push_back(p->name);
  return out;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

void ParameterSet::scale_grad(double factor) {
  for (auto& p : params_) p->grad *= factor;
}

bool ParameterSet::all_finite() const {
  return std::all_of(params_.begin(), params_.end(),
                     [](const auto& p) { return p->value.allFinite(); });
}

double ParameterSet::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) s += p->grad.squaredNorm();
  return std::sqrt(s);
}

void ParameterSet::copy_values_from(const ParameterSet& other) {
  for (auto& p : params_) {
    const Parameter& q = other.at(p->name);
    if (q.value.rows() != p->value.rows() || q.value.cols() != p->value.cols()) {
      throw ShapeError("shape mismatch copying " + p->name);
    }
    p->value = q.value;
  }
}

void init_normal(Parameter& p, Rng& rng, double stddev) {
  if (stddev == 0.0) {
    p.value.setZero();
    return;
  }
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
}

// ---- ops -----------------------------------------------------------------

Matrix affine_forward(const Matrix& x, const Matrix& w, const Matrix& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw ShapeError("affine_forward: inner dimensions disagree");
  }
  Matrix y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

AffineGrads affine_backward(const Matrix& x, const Matrix& w, const Matrix& dy) {
  if (dy.rows() != x.rows() || dy.cols() != w.cols() || x.cols() != w.rows()) {
    throw ShapeError("affine_backward: shape mismatch");
  }
  AffineGrads g;
  g.dx = dy * w.transpose();
  g.dw = x.transpose() * dy;
  g.db = dy.colwise().sum();
  return g;
}

Matrix layer_norm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                          LayerNormCache* cache) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  if (gamma.cols() != d || beta.cols() != d) throw ShapeError("layer_norm: width mismatch");
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).mean();
    const auto centered = x.row(i).array() - mean;
    const double var = centered.square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(i) = centered * inv_std(i);
  }
  Matrix y = xhat.array().rowwise() * gamma.row(0).array();
  y.rowwise() += beta.row(0);
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

LayerNormGrads layer_norm_backward(const Matrix& dy, const Matrix& gamma,
                                   const LayerNormCache& cache) {
  const Eigen::Index n = dy.rows();
  const double d = static_cast<double>(dy.cols());
  LayerNormGrads g;
  g.dgamma = (dy.array() * cache.xhat.array()).colwise().sum();
  g.dbeta = dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gamma.row(0).array();
  g.dx.resize(n, dy.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean_dxhat = dxhat.row(i).sum() / d;
    const double mean_dxhat_xhat = dxhat.row(i).dot(cache.xhat.row(i)) / d;
    g.dx.row(i) = cache.inv_std(i) * (dxhat.row(i).array() - mean_dxhat -
                                      cache.xhat.row(i).array() * mean_dxhat_xhat);
  }
  return g;
}

Matrix gelu_forward(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); });
}

Matrix gelu_backward(const Matrix& x, const Matrix& dy) {
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  const Matrix deriv = x.unaryExpr([&](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
    return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
  });
  return dy.cwiseProduct(deriv);
}

Matrix embedding_forward(const Matrix& table, std::span<const int> ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) throw InputError("embedding id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.row(ids[i]);
  }
  return out;
}

void embedding_backward(Matrix& dtable, std::span<const int> ids, const Matrix& dy) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    dtable.row(ids[i]) += dy.row(static_cast<Eigen::Index>(i));
  }
}

// ---- layers --------------------------------------------------------------

Linear::Linear(ParameterSet& params, const std::string& name, int in, int out, Rng& rng,
               double init_std)
    : w_(&params.add(name + ".weight", in, out)), b_(&params.add(name + ".bias", 1, out)) {
  init_normal(*w_, rng, init_std);
}

Matrix Linear::forward(const Matrix& x) const { return affine_forward(x, w_->value, b_->value); }

Matrix Linear::backward(const Matrix& x, const Matrix& dy) const {
  AffineGrads g = affine_backward(x, w_->value, dy);
  w_->grad += g.dw;
  b_->grad += g.db;
  return std::move(g.dx);
}

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, int dim)
    : gamma_(&params.add(name + ".gamma", 1, dim)), beta_(&params.add(name + ".beta", 1, dim)) {
  gamma_->value.setOnes();
}

Matrix LayerNorm::forward(const Matrix& x, LayerNormCache* cache) const {
  return layer_norm_forward(x, gamma_->value, beta_->value, cache);
}

Matrix LayerNorm::backward(const Matrix& dy, const LayerNormCache& cache) const {
  LayerNormGrads g = layer_norm_backward(dy, gamma_->value, cache);
  gamma_->grad += g.dgamma;
  beta_->grad += g.dbeta;
  return std::move(g.dx);
}

Embedding::Embedding(ParameterSet& params, const std::string& name, int count, int dim, Rng& rng,
                     double init_std)
    : table_(&params.add(name, count, dim)) {
  init_normal(*table_, rng, init_std);
}

Matrix Embedding::forward(std::span<const int> ids) const {
  return embedding_forward(table_->value, ids);
}

void Embedding::backward(std::span<const int> ids, const Matrix& dy) const {
  embedding_backward(table_->grad, ids, dy);
}

CausalSelfAttention::CausalSelfAttention(ParameterSet& params, const std::string& name,
                                         int d_model, int heads, int max_len, Rng& rng,
                                         double init_std)
    : qkv_(params, name + ".qkv", d_model, 3 * d_model, rng, init_std),
      proj_(params, name + ".proj", d_model, d_model, rng, init_std),
      d_model_(d_model),
      heads_(heads),
      max_len_(max_len) {
  if (heads <= 0 || d_model % heads != 0) {
    throw ConfigError("d_model must be divisible by the head count");
  }
}

Matrix CausalSelfAttention::forward(const Matrix& x, Cache* cache) const {
  const Eigen::Index len = x.rows();
  if (len > max_len_) throw ContextOverflow("sequence longer than the attention context");
  if (x.cols() != d_model_) throw ShapeError("attention input width mismatch");
  const int dh = d_model_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix qkv = qkv_.forward(x);
  Matrix mixed(len, d_model_);
  std::vector<Matrix> probs;
  if (cache != nullptr) probs.reserve(heads_);
  for (int h = 0; h < heads_; ++h) {
    const auto q = qkv.middleCols(h * dh, dh);
    const auto k = qkv.middleCols(d_model_ + h * dh, dh);
    const auto v = qkv.middleCols(2 * d_model_ + h * dh, dh);
    Matrix p = (q * k.transpose()) * scale;
    for (Eigen::Index i = 0; i < len; ++i) {
      const double row_max = p.row(i).head(i + 1).maxCoeff();
      double denom = 0.0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        p(i, j) = std::exp(p(i, j) - row_max);
        denom += p(i, j);
      }
      p.row(i).head(i + 1) /= denom;
      p.row(i).tail(len - i - 1).setZero();
    }
    mixed.middleCols(h * dh, dh) = p * v;
    if (cache != nullptr) probs.push_back(std::move(p));
  }
  Matrix y = proj_.forward(mixed);
  if (cache != nullptr) {
    cache->x = x;
    cache->qkv = std::move(qkv);
    cache->probs = std::move(probs);
    cache->mixed = std::move(mixed);
  }
  return y;
}

Matrix CausalSelfAttention::backward(const Matrix& dy, const Cache& cache) const {
  const Eigen::Index len = dy.rows();
  const int dh = d_model_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const Matrix dmixed = proj_.backward(cache.mixed, dy);
  Matrix dqkv = Matrix::Zero(len, 3 * d_model_);
  for (int h = 0; h < heads_; ++h) {
    const auto q = cache.qkv.middleCols(h * dh, dh);
    const auto k = cache.qkv.middleCols(d_model_ + h * dh, dh);
    const auto v = cache.qkv.middleCols(2 * d_model_ + h * dh, dh);
    const Matrix& p = cache.probs[h];
    const auto dout = dmixed.middleCols(h * dh, dh);

    const Matrix dp = dout * v.transpose();
    dqkv.middleCols(2 * d_model_ + h * dh, dh) = p.transpose() * dout;
    // softmax backward; masked entries have p == 0 and drop out.
    const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
    Matrix ds = p.array() * (dp.array().colwise() - row_dot.array());
    ds *= scale;
    dqkv.middleCols(h * dh, dh) = ds * k;
    dqkv.middleCols(d_model_ + h * dh, dh) = ds.transpose() * q;
  }
  return qkv_.backward(cache.x, dqkv);
}

Matrix CausalSelfAttention::forward_step(const Matrix& x_row, KvCache& kv) const {
  if (kv.length + 1 > max_len_) throw ContextOverflow("incremental decode past the context");
  const int dh = d_model_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix qkv = qkv_.forward(x_row);
  if (kv.keys.rows() < max_len_) {
    kv.keys.conservativeResize(max_len_, d_model_);
    kv.values.conservativeResize(max_len_, d_model_);
  }
  kv.keys.row(kv.length) = qkv.block(0, d_model_, 1, d_model_);
  kv.values.row(kv.length) = qkv.block(0, 2 * d_model_, 1, d_model_);
  const int n = ++kv.length;

  Matrix mixed(1, d_model_);
  for (int h = 0; h < heads_; ++h) {
    const auto q = qkv.block(0, h * dh, 1, dh);
    const auto k = kv.keys.block(0, h * dh, n, dh);
    const auto v = kv.values.block(0, h * dh, n, dh);
    Eigen::RowVectorXd s = (q * k.transpose()) * scale;
    s = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    mixed.middleCols(h * dh, dh) = s * v;
  }
  return proj_.forward(mixed);
}

// ---- optimizer -----------------------------------------------------------

void adam_step(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, double lr, double beta1,
               double beta2, double eps, long t) {
  if (t < 1) throw InputError("adam_step requires t >= 1");
  if (!grad.allFinite()) throw NonFiniteGradient("non-finite gradient");
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

void Adam::step(ParameterSet& params, double lr) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].grad.allFinite()) {
      throw NonFiniteGradient("non-finite gradient in " + params[i].name);
    }
  }
  ++t_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    adam_step(p.value, p.grad, p.adam_m, p.adam_v, lr, config_.beta1, config_.beta2, config_.eps,
              t_);
  }
}

// ---- gradient checking ---------------------------------------------------

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

double grad_check(const std::function<double()>& loss, std::span<const GradTarget> targets,
                  double h) {
  double worst = 0.0;
  const double floor = 1e-6 * std::max(1.0, std::abs(loss()));
  for (const GradTarget& target : targets) {
    if (target.values.size() != target.analytic.size()) {
      throw ShapeError("grad_check: analytic gradient size mismatch");
    }
    for (std::size_t i = 0; i < target.values.size(); ++i) {
      const double saved = target.values[i];
      target.values[i] = saved + h;
      const double plus = loss();
      target.values[i] = saved - h;
      const double minus = loss();
      target.values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      worst = std::max(worst, relative_error(target.analytic[i], numeric, floor));
    }
  }
  return worst;
}

double grad_check(const std::function<double()>& loss, ParameterSet& params, double h) {
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(params[i].grad);
  std::vector<GradTarget> targets;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    targets.push_back({std::span<double>(p.value.data(), static_cast<std::size_t>(p.value.size())),
                       std::span<const double>(analytic[i].data(),
                                               static_cast<std::size_t>(analytic[i].size()))});
  }
  return grad_check(loss, targets, h);
}

// ---- checkpoints ---------------------------------------------------------

json checkpoint_json(const ParameterSet& params, const json& meta) {
  json tensors = json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const TensorView v = view(params[i]);
    tensors.push_back({{"name", params[i].name},
                       {"shape", v.shape},
                       {"data", std::vector<double>(v.data.begin(), v.data.end())}});
  }
  return {{"format", "ebaret.checkpoint"},
          {"version", kCheckpointVersion},
          {"meta", meta},
          {"tensors", tensors}};
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const json& meta) {
  io::write_file_atomic(path, checkpoint_json(params, meta).dump() + "\n");
}

json read_checkpoint(const std::filesystem::path& path) {
  const json j = json::parse(io::read_file(path));
  if (j.value("format", std::string()) != "ebaret.checkpoint") {
    throw SchemaError("not an ebaret checkpoint: " + path.string());
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw SchemaError("unsupported checkpoint version in " + path.string());
  }
  return j;
}

void load_values(const json& checkpoint, ParameterSet& params) {
  const json& tensors = checkpoint.at("tensors");
  if (tensors.size() != params.size()) {
    throw SchemaError("checkpoint tensor count does not match the model");
  }
  for (const json& t : tensors) {
    Parameter& p = params.at(t.at("name").get<std::string>());
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2 || static_cast<Eigen::Index>(shape[0]) != p.value.rows() ||
        static_cast<Eigen::Index>(shape[1]) != p.value.cols()) {
      throw ShapeError("checkpoint shape mismatch for " + p.name);
    }
    const auto data = t.at("data").get<std::vector<double>>();
    if (data.size() != static_cast<std::size_t>(p.value.size())) {
      throw SchemaError("checkpoint data length mismatch for " + p.name);
    }
    std::copy(data.begin(), data.end(), p.value.data());
  }
}

void keep_heap_resident() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
}

}  // namespace ebaret::nn
