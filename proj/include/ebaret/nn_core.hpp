#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "ebaret/random.hpp"

// Small double-precision neural-network toolkit: explicit forward/backward
// for the handful of ops a decision transformer needs, Adam, a central
// difference gradient checker and a JSON checkpoint format.
namespace ebaret::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  Matrix adam_m;
  Matrix adam_v;
};

// Row-major view over a parameter's storage.
struct TensorView {
  std::vector<std::size_t> shape;
  std::span<const double> data;
};

TensorView view(const Parameter& p);

// Named parameters in insertion order. Addresses are stable for the lifetime
// of the set (including across moves), so layers keep raw pointers.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  Parameter& add(std::string name, Eigen::Index rows, Eigen::Index cols);
  Parameter& at(std::string_view name);
  const Parameter& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  std::vector<std::string> names() const;

  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  void scale_grad(double factor);
  bool all_finite() const;
  double grad_norm() const;

  // Copies parameter values (not grads or moments) from another set with the
  // same names and shapes.
  void copy_values_from(const ParameterSet& other);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

void init_normal(Parameter& p, Rng& rng, double stddev);

// ---- stateless ops -------------------------------------------------------

// y = x W + b, with x (n, in), W (in, out), b (1, out).
Matrix affine_forward(const Matrix& x, const Matrix& w, const Matrix& b);

struct AffineGrads {
  Matrix dx;
  Matrix dw;
  Matrix db;
};

AffineGrads affine_backward(const Matrix& x, const Matrix& w, const Matrix& dy);

struct LayerNormCache {
  Matrix xhat;
  Eigen::VectorXd inv_std;
};

inline constexpr double kLayerNormEps = 1e-5;

// Per-row normalization followed by gamma * xhat + beta.
Matrix layer_norm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                          LayerNormCache* cache);

struct LayerNormGrads {
  Matrix dx;
  Matrix dgamma;
  Matrix dbeta;
};

LayerNormGrads layer_norm_backward(const Matrix& dy, const Matrix& gamma,
                                   const LayerNormCache& cache);

// Exact (erf) GELU.
Matrix gelu_forward(const Matrix& x);
Matrix gelu_backward(const Matrix& x, const Matrix& dy);

Matrix embedding_forward(const Matrix& table, std::span<const int> ids);
void embedding_backward(Matrix& dtable, std::span<const int> ids, const Matrix& dy);

// ---- layers --------------------------------------------------------------

class Linear {
 public:
  Linear() = default;
  // init_std == 0 gives an all-zero weight.
  Linear(ParameterSet& params, const std::string& name, int in, int out, Rng& rng,
         double init_std);

  Matrix forward(const Matrix& x) const;
  // Accumulates dW, db into the parameter grads and returns dx.
  Matrix backward(const Matrix& x, const Matrix& dy) const;

  int in() const { return static_cast<int>(w_->value.rows()); }
  int out() const { return static_cast<int>(w_->value.cols()); }

 private:
  Parameter* w_ = nullptr;
  Parameter* b_ = nullptr;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet& params, const std::string& name, int dim);

  Matrix forward(const Matrix& x, LayerNormCache* cache) const;
  Matrix backward(const Matrix& dy, const LayerNormCache& cache) const;

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(ParameterSet& params, const std::string& name, int count, int dim, Rng& rng,
            double init_std);

  Matrix forward(std::span<const int> ids) const;
  void backward(std::span<const int> ids, const Matrix& dy) const;
  int count() const { return static_cast<int>(table_->value.rows()); }

 private:
  Parameter* table_ = nullptr;
};

// Multi-head self-attention with a strict causal mask.
class CausalSelfAttention {
 public:
  struct Cache {
    Matrix x;
    Matrix qkv;
    std::vector<Matrix> probs;  // per head, (L, L), zero above the diagonal
    Matrix mixed;               // concatenated head outputs before the projection
  };

  // Keys and values of already-processed positions, for incremental decoding.
  struct KvCache {
    Matrix keys;
    Matrix values;
    int length = 0;
  };

  CausalSelfAttention() = default;
  CausalSelfAttention(ParameterSet& params, const std::string& name, int d_model, int heads,
                      int max_len, Rng& rng, double init_std);

  Matrix forward(const Matrix& x, Cache* cache) const;
  Matrix backward(const Matrix& dy, const Cache& cache) const;

  // Processes one new row given the cached prefix; appends to the cache.
  Matrix forward_step(const Matrix& x_row, KvCache& kv) const;

  int d_model() const { return d_model_; }
  int heads() const { return heads_; }
  int max_len() const { return max_len_; }

 private:
  Linear qkv_;
  Linear proj_;
  int d_model_ = 0;
  int heads_ = 1;
  int max_len_ = 0;
};

// ---- optimizer -----------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update of a single tensor; t >= 1.
void adam_step(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, double lr, double beta1,
               double beta2, double eps, long t);

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // Applies one update to every parameter. Throws NonFiniteGradient (and
  // leaves all parameters untouched) when any gradient is not finite.
  void step(ParameterSet& params, double lr);
  void step(ParameterSet& params) { step(params, config_.lr); }

  long t() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  long t_ = 0;
};

// ---- gradient checking ---------------------------------------------------

struct GradTarget {
  std::span<double> values;
  std::span<const double> analytic;
};

// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Central differences of `loss` over every entry of every target, compared
// against the supplied analytic gradient. Returns the max relative error.
// The denominator floor is 1e-6 * max(1, |loss|): central-difference round-off
// grows with the loss value, so entries far below that scale are compared in
// absolute terms.
double grad_check(const std::function<double()>& loss, std::span<const GradTarget> targets,
                  double h = 1e-5);

// Same, over all parameters of a set; analytic gradients are read from the
// parameters' grad buffers, which the caller must have filled.
double grad_check(const std::function<double()>& loss, ParameterSet& params, double h = 1e-5);

// ---- checkpoints ---------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

nlohmann::json checkpoint_json(const ParameterSet& params, const nlohmann::json& meta);
void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params,
                     const nlohmann::json& meta);

// Reads and validates a checkpoint document (format tag and version).
nlohmann::json read_checkpoint(const std::filesystem::path& path);
// Loads values into an already-constructed set; names and shapes must match.
void load_values(const nlohmann::json& checkpoint, ParameterSet& params);

// Training allocates and frees the same large temporaries every step; keeps
// glibc from mapping and unmapping them each time. No-op elsewhere.
void keep_heap_resident();

}  // namespace ebaret::nn
