#include "ebaret/bag_dt.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <sstream>

#include "ebaret/bag_reward.hpp"
#include "ebaret/errors.hpp"
#include "ebaret/trajectory_io.hpp"

namespace ebaret::dt {

using nlohmann::json;
using nn::Matrix;

namespace {

constexpr double kInitStd = 0.02;

const char* mode_name(ReturnMode m) {
  switch (m) {
    case ReturnMode::kPredicted:
      return "predicted";
    case ReturnMode::kManual:
      return "manual";
    case ReturnMode::kNone:
      return "none";
  }
  return "predicted";
}

ReturnMode mode_from(const std::string& s) {
  if (s == "predicted") return ReturnMode::kPredicted;
  if (s == "manual") return ReturnMode::kManual;
  if (s == "none") return ReturnMode::kNone;
  throw SchemaError("unknown return mode: " + s);
}

}  // namespace

void ModelConfig::validate() const {
  if (d_model <= 0 || layers <= 0 || heads <= 0) throw ConfigError("model sizes must be positive");
  if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (bag_len <= 0 || context_steps <= 0 || context_steps % bag_len != 0) {
    throw ConfigError("context_steps must be divisible by bag_len");
  }
  if (k_levels < 2) throw ConfigError("k_levels must be at least 2");
  if (batch_size <= 0 || train_steps < 0) throw ConfigError("invalid training schedule");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
}

void AblationFlags::validate() const {
  if (no_expert && (no_pu || no_expert_action || no_bag_reward)) {
    throw ConfigError("the no-expert ablation already removes the discriminator and expert tokens");
  }
}

int token_index(int step, Modality modality, int tokens_per_step) {
  if (tokens_per_step == 2 && modality == Modality::kReturn) {
    throw InputError("sequence has no return tokens");
  }
  int offset = 0;
  switch (modality) {
    case Modality::kState:
      offset = 0;
      break;
    case Modality::kReturn:
      offset = 1;
      break;
    case Modality::kAction:
      offset = tokens_per_step - 1;
      break;
  }
  return step * tokens_per_step + offset;
}

Scaling Scaling::fit(std::span<const Trajectory> dataset) {
  Scaling s;
  std::size_t n = 0;
  StateVector sum{}, sq{};
  double action_sum = 0.0;
  std::vector<double> r0;
  for (const Trajectory& t : dataset) {
    for (int i = 0; i < t.steps(); ++i) {
      for (int f = 0; f < kStateDim; ++f) {
        sum[f] += t.states[i][f];
        sq[f] += t.states[i][f] * t.states[i][f];
      }
      action_sum += t.actions[i];
      ++n;
    }
    r0.push_back(t.rtg.empty() ? t.total_reward() : t.rtg.front());
  }
  if (n == 0) return s;
  for (int f = 0; f < kStateDim; ++f) {
    const double mean = sum[f] / n;
    const double var = std::max(0.0, sq[f] / n - mean * mean);
    s.state_mean[f] = mean;
    s.state_std[f] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  const double mean_action = action_sum / n;
  s.action_scale = mean_action > 1e-9 ? mean_action : 1.0;
  double r0_sum = 0.0;
  for (double r : r0) r0_sum += r;
  const double mean_r0 = r0_sum / r0.size();
  s.rtg_scale = mean_r0 > 1e-9 ? mean_r0 : 1.0;
  std::sort(r0.begin(), r0.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.9 * r0.size()));
  s.manual_target = r0[std::clamp<std::size_t>(rank, 1, r0.size()) - 1];
  return s;
}

SequenceInput SequenceInput::from_trajectory(const Trajectory& traj, bool with_levels) {
  SequenceInput in;
  in.states = traj.states;
  in.actions = traj.actions;
  in.rtg = traj.rtg;
  if (with_levels) {
    if (traj.expert_levels.size() != traj.actions.size()) {
      throw SchemaError("trajectory is missing expert levels");
    }
    in.levels = traj.expert_levels;
  }
  return in;
}

// ---- transformer block ---------------------------------------------------

namespace detail {

Block::Block(nn::ParameterSet& params, const std::string& name, int d_model, int heads,
             int max_len, Rng& rng, double init_std)
    : ln1_(params, name + ".ln1", d_model),
      attn_(params, name + ".attn", d_model, heads, max_len, rng, init_std),
      ln2_(params, name + ".ln2", d_model),
      fc1_(params, name + ".mlp.fc1", d_model, 4 * d_model, rng, init_std),
      fc2_(params, name + ".mlp.fc2", 4 * d_model, d_model, rng, init_std) {}

Matrix Block::forward(const Matrix& x, BlockCache* cache) const {
  BlockCache local;
  BlockCache& c = cache != nullptr ? *cache : local;
  c.h1 = ln1_.forward(x, &c.ln1);
  c.mid = x + attn_.forward(c.h1, cache != nullptr ? &c.attn : nullptr);
  c.h2 = ln2_.forward(c.mid, &c.ln2);
  c.pre = fc1_.forward(c.h2);
  c.act = nn::gelu_forward(c.pre);
  return c.mid + fc2_.forward(c.act);
}

Matrix Block::backward(const Matrix& dy, const BlockCache& c) const {
  const Matrix dact = fc2_.backward(c.act, dy);
  const Matrix dpre = nn::gelu_backward(c.pre, dact);
  const Matrix dh2 = fc1_.backward(c.h2, dpre);
  const Matrix dmid = dy + ln2_.backward(dh2, c.ln2);
  const Matrix dh1 = attn_.backward(dmid, c.attn);
  return dmid + ln1_.backward(dh1, c.ln1);
}

Matrix Block::forward_step(const Matrix& x_row, nn::CausalSelfAttention::KvCache& kv) const {
  const Matrix h1 = ln1_.forward(x_row, nullptr);
  const Matrix mid = x_row + attn_.forward_step(h1, kv);
  const Matrix h2 = ln2_.forward(mid, nullptr);
  return mid + fc2_.forward(nn::gelu_forward(fc1_.forward(h2)));
}

}  // namespace detail

// ---- model ---------------------------------------------------------------

struct BagDecisionTransformer::ForwardCache {
  TokenSequence tokens;
  Matrix state_x;
  Matrix rtg_x;
  Matrix action_x;
  std::vector<int> state_rows;
  std::vector<int> rtg_rows;
  std::vector<int> action_rows;
  std::vector<detail::BlockCache> blocks;
  nn::LayerNormCache final_ln;
  Matrix hidden;
  std::vector<int> rtg_slots;     // token rows read by the RTG head
  std::vector<int> action_slots;  // token rows read by the action head
};

BagDecisionTransformer::BagDecisionTransformer(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(derive_seed({config_.seed, 0xb46d7}));
  const int d = config_.d_model;
  state_in_ = nn::Linear(params_, "emb.state", kStateDim, d, rng, kInitStd);
  if (config_.has_return_tokens()) rtg_in_ = nn::Linear(params_, "emb.rtg", 1, d, rng, kInitStd);
  action_in_ = nn::Linear(params_, "emb.action", 1, d, rng, kInitStd);
  modality_emb_ = nn::Embedding(params_, "emb.modality", 3, d, rng, kInitStd);
  time_emb_ = nn::Embedding(params_, "emb.time", config_.context_steps, d, rng, kInitStd);
  if (config_.bag_position) {
    bag_pos_emb_ = nn::Embedding(params_, "emb.bag_position", config_.bag_len, d, rng, kInitStd);
  }
  if (config_.level_embedding) {
    level_emb_ = nn::Embedding(params_, "emb.expert_level", config_.k_levels, d, rng, kInitStd);
  }
  for (int l = 0; l < config_.layers; ++l) {
    blocks_.emplace_back(params_, "block" + std::to_string(l), d, config_.heads,
                         config_.max_tokens(), rng, kInitStd);
  }
  final_ln_ = nn::LayerNorm(params_, "final_ln", d);
  if (config_.has_rtg_head()) rtg_head_ = nn::Linear(params_, "head.rtg", d, 1, rng, kInitStd);
  action_head_ = nn::Linear(params_, "head.action", d, 1, rng, kInitStd);
}

Matrix BagDecisionTransformer::embed(const SequenceInput& input, int num_tokens,
                                     TokenSequence* tokens) const {
  const int tps = config_.tokens_per_step();
  const int n = num_tokens < 0 ? input.steps() * tps : num_tokens;
  if (n > config_.max_tokens()) throw ContextOverflow("sequence longer than the model context");
  if (n > input.steps() * tps) throw InputError("more tokens requested than states supplied");

  TokenSequence& ts = *tokens;
  ts.modality.clear();
  ts.step.clear();
  ts.bag_position.clear();
  ts.level.clear();
  for (int i = 0; i < n; ++i) {
    const int t = i / tps;
    const int slot = i % tps;
    Modality m = Modality::kState;
    if (slot == tps - 1 && slot > 0) m = Modality::kAction;
    if (tps == 3 && slot == 1) m = Modality::kReturn;
    ts.modality.push_back(m);
    ts.step.push_back(t);
    ts.bag_position.push_back(t % config_.bag_len);
    int level = 0;
    if (config_.level_embedding) {
      if (static_cast<int>(input.levels.size()) <= t) {
        throw SchemaError("expert level missing for step " + std::to_string(t));
      }
      level = input.levels[t];
      if (level < 0 || level >= config_.k_levels) throw InputError("expert level out of range");
    }
    ts.level.push_back(level);
    if (m == Modality::kReturn && static_cast<int>(input.rtg.size()) <= t) {
      throw SchemaError("return-to-go missing for step " + std::to_string(t));
    }
    if (m == Modality::kAction && static_cast<int>(input.actions.size()) <= t) {
      throw SchemaError("action missing for step " + std::to_string(t));
    }
  }
  return Matrix();
}

Prediction BagDecisionTransformer::run(const SequenceInput& input, int num_tokens,
                                       ForwardCache* cache) const {
  ForwardCache local;
  ForwardCache& c = cache != nullptr ? *cache : local;
  embed(input, num_tokens, &c.tokens);
  TokenSequence& ts = c.tokens;
  const int n = ts.size();
  const int d = config_.d_model;

  c.state_rows.clear();
  c.rtg_rows.clear();
  c.action_rows.clear();
  for (int i = 0; i < n; ++i) {
    switch (ts.modality[i]) {
      case Modality::kState:
        c.state_rows.push_back(i);
        break;
      case Modality::kReturn:
        c.rtg_rows.push_back(i);
        break;
      case Modality::kAction:
        c.action_rows.push_back(i);
        break;
    }
  }
  c.state_x.resize(static_cast<Eigen::Index>(c.state_rows.size()), kStateDim);
  for (std::size_t r = 0; r < c.state_rows.size(); ++r) {
    const StateVector& s = input.states[ts.step[c.state_rows[r]]];
    for (int f = 0; f < kStateDim; ++f) {
      c.state_x(static_cast<Eigen::Index>(r), f) =
          (s[f] - scaling_.state_mean[f]) / scaling_.state_std[f];
    }
  }
  c.rtg_x.resize(static_cast<Eigen::Index>(c.rtg_rows.size()), 1);
  for (std::size_t r = 0; r < c.rtg_rows.size(); ++r) {
    c.rtg_x(static_cast<Eigen::Index>(r), 0) = input.rtg[ts.step[c.rtg_rows[r]]] / scaling_.rtg_scale;
  }
  c.action_x.resize(static_cast<Eigen::Index>(c.action_rows.size()), 1);
  for (std::size_t r = 0; r < c.action_rows.size(); ++r) {
    c.action_x(static_cast<Eigen::Index>(r), 0) =
        input.actions[ts.step[c.action_rows[r]]] / scaling_.action_scale;
  }

  Matrix x(n, d);
  const Matrix se = state_in_.forward(c.state_x);
  for (std::size_t r = 0; r < c.state_rows.size(); ++r) x.row(c.state_rows[r]) = se.row(r);
  if (!c.rtg_rows.empty()) {
    const Matrix re = rtg_in_.forward(c.rtg_x);
    for (std::size_t r = 0; r < c.rtg_rows.size(); ++r) x.row(c.rtg_rows[r]) = re.row(r);
  }
  if (!c.action_rows.empty()) {
    const Matrix ae = action_in_.forward(c.action_x);
    for (std::size_t r = 0; r < c.action_rows.size(); ++r) x.row(c.action_rows[r]) = ae.row(r);
  }
  std::vector<int> mod_ids(n);
  for (int i = 0; i < n; ++i) mod_ids[i] = static_cast<int>(ts.modality[i]);
  x += modality_emb_.forward(mod_ids);
  x += time_emb_.forward(ts.step);
  if (config_.bag_position) x += bag_pos_emb_.forward(ts.bag_position);
  if (config_.level_embedding) x += level_emb_.forward(ts.level);
  ts.embeddings = x;

  c.blocks.resize(blocks_.size());
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    x = blocks_[l].forward(x, cache != nullptr ? &c.blocks[l] : nullptr);
  }
  c.hidden = final_ln_.forward(x, &c.final_ln);

  const int tps = config_.tokens_per_step();
  const int steps = (n + tps - 1) / tps;
  c.rtg_slots.clear();
  c.action_slots.clear();
  for (int t = 0; t < steps; ++t) {
    const int s_idx = token_index(t, Modality::kState, tps);
    const int a_src = config_.has_return_tokens() ? token_index(t, Modality::kReturn, tps) : s_idx;
    if (config_.has_rtg_head() && s_idx < n) c.rtg_slots.push_back(s_idx);
    if (a_src < n) c.action_slots.push_back(a_src);
  }

  auto gather = [&](const std::vector<int>& rows) {
    Matrix g(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t r = 0; r < rows.size(); ++r) g.row(r) = c.hidden.row(rows[r]);
    return g;
  };
  Prediction p;
  if (!c.rtg_slots.empty()) {
    const Matrix out = rtg_head_.forward(gather(c.rtg_slots));
    p.rtg.assign(out.data(), out.data() + out.size());
  }
  if (!c.action_slots.empty()) {
    const Matrix out = action_head_.forward(gather(c.action_slots));
    p.action.assign(out.data(), out.data() + out.size());
  }
  return p;
}

TokenSequence BagDecisionTransformer::tokenize(const SequenceInput& input, int num_tokens) const {
  ForwardCache c;
  run(input, num_tokens, &c);
  return c.tokens;
}

Prediction BagDecisionTransformer::forward(const SequenceInput& input, int num_tokens) const {
  return run(input, num_tokens, nullptr);
}

LossTerms sequence_loss(std::span<const double> rtg_pred, std::span<const double> action_pred,
                        std::span<const double> rtg_target, std::span<const double> action_target) {
  if (rtg_pred.size() != rtg_target.size() || action_pred.size() != action_target.size()) {
    throw ShapeError("prediction/target length mismatch");
  }
  LossTerms l;
  for (std::size_t i = 0; i < rtg_pred.size(); ++i) {
    const double e = rtg_pred[i] - rtg_target[i];
    l.rtg += e * e;
  }
  for (std::size_t i = 0; i < action_pred.size(); ++i) {
    const double e = action_pred[i] - action_target[i];
    l.action += e * e;
  }
  return l;
}

namespace {

struct Targets {
  std::vector<double> rtg;
  std::vector<double> action;
};

Targets model_targets(const SequenceInput& input, const Scaling& s, bool with_rtg) {
  Targets t;
  const int steps = input.steps();
  if (static_cast<int>(input.actions.size()) < steps) throw SchemaError("actions missing");
  if (with_rtg && static_cast<int>(input.rtg.size()) < steps) throw SchemaError("rtg missing");
  for (int i = 0; i < steps; ++i) {
    if (with_rtg) t.rtg.push_back(input.rtg[i] / s.rtg_scale);
    t.action.push_back(input.actions[i] / s.action_scale);
  }
  return t;
}

}  // namespace

LossTerms BagDecisionTransformer::evaluate_loss(const SequenceInput& input) const {
  const Prediction p = forward(input);
  const Targets t = model_targets(input, scaling_, config_.has_rtg_head());
  return sequence_loss(p.rtg, p.action, t.rtg, t.action);
}

LossTerms BagDecisionTransformer::accumulate_gradients(const SequenceInput& input, double weight) {
  ForwardCache c;
  const Prediction p = run(input, -1, &c);
  const Targets t = model_targets(input, scaling_, config_.has_rtg_head());
  const LossTerms loss = sequence_loss(p.rtg, p.action, t.rtg, t.action);

  const int d = config_.d_model;
  Matrix dhidden = Matrix::Zero(c.hidden.rows(), d);
  auto head_backward = [&](const nn::Linear& head, const std::vector<int>& slots,
                           const std::vector<double>& pred, const std::vector<double>& target) {
    Matrix in(static_cast<Eigen::Index>(slots.size()), d);
    Matrix dout(static_cast<Eigen::Index>(slots.size()), 1);
    for (std::size_t r = 0; r < slots.size(); ++r) {
      in.row(r) = c.hidden.row(slots[r]);
      dout(r, 0) = 2.0 * weight * (pred[r] - target[r]);
    }
    const Matrix din = head.backward(in, dout);
    for (std::size_t r = 0; r < slots.size(); ++r) dhidden.row(slots[r]) += din.row(r);
  };
  if (config_.has_rtg_head()) head_backward(rtg_head_, c.rtg_slots, p.rtg, t.rtg);
  head_backward(action_head_, c.action_slots, p.action, t.action);

  Matrix dx = final_ln_.backward(dhidden, c.final_ln);
  for (std::size_t l = blocks_.size(); l-- > 0;) dx = blocks_[l].backward(dx, c.blocks[l]);

  const TokenSequence& ts = c.tokens;
  std::vector<int> mod_ids(ts.size());
  for (int i = 0; i < ts.size(); ++i) mod_ids[i] = static_cast<int>(ts.modality[i]);
  modality_emb_.backward(mod_ids, dx);
  time_emb_.backward(ts.step, dx);
  if (config_.bag_position) bag_pos_emb_.backward(ts.bag_position, dx);
  if (config_.level_embedding) level_emb_.backward(ts.level, dx);

  auto rows_of = [&](const std::vector<int>& rows) {
    Matrix g(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t r = 0; r < rows.size(); ++r) g.row(r) = dx.row(rows[r]);
    return g;
  };
  state_in_.backward(c.state_x, rows_of(c.state_rows));
  if (!c.rtg_rows.empty()) rtg_in_.backward(c.rtg_x, rows_of(c.rtg_rows));
  if (!c.action_rows.empty()) action_in_.backward(c.action_x, rows_of(c.action_rows));
  return loss;
}

Matrix BagDecisionTransformer::embed_token(Modality modality, int step, int level,
                                           std::span<const double> input) const {
  Matrix x;
  switch (modality) {
    case Modality::kState: {
      if (input.size() != kStateDim) throw ShapeError("state token needs 8 values");
      Matrix s(1, kStateDim);
      for (int f = 0; f < kStateDim; ++f) {
        s(0, f) = (input[f] - scaling_.state_mean[f]) / scaling_.state_std[f];
      }
      x = state_in_.forward(s);
      break;
    }
    case Modality::kReturn: {
      if (!config_.has_return_tokens()) throw InputError("model has no return tokens");
      Matrix r(1, 1);
      r(0, 0) = input[0] / scaling_.rtg_scale;
      x = rtg_in_.forward(r);
      break;
    }
    case Modality::kAction: {
      Matrix a(1, 1);
      a(0, 0) = input[0] / scaling_.action_scale;
      x = action_in_.forward(a);
      break;
    }
  }
  const int mod = static_cast<int>(modality);
  x += modality_emb_.forward(std::span<const int>(&mod, 1));
  x += time_emb_.forward(std::span<const int>(&step, 1));
  if (config_.bag_position) {
    const int pos = step % config_.bag_len;
    x += bag_pos_emb_.forward(std::span<const int>(&pos, 1));
  }
  if (config_.level_embedding) x += level_emb_.forward(std::span<const int>(&level, 1));
  return x;
}

BagDecisionTransformer::Decoder::Decoder(const BagDecisionTransformer& model)
    : model_(&model), kv_(model.blocks_.size()) {}

Matrix BagDecisionTransformer::Decoder::push(Modality modality, int step, int level,
                                             std::span<const double> input) {
  if (length_ >= model_->config_.max_tokens()) throw ContextOverflow("decoder context is full");
  if (step >= model_->config_.context_steps) throw ContextOverflow("step beyond the context");
  Matrix x = model_->embed_token(modality, step, level, input);
  for (std::size_t l = 0; l < model_->blocks_.size(); ++l) {
    x = model_->blocks_[l].forward_step(x, kv_[l]);
  }
  ++length_;
  return model_->final_ln_.forward(x, nullptr);
}

double BagDecisionTransformer::Decoder::rtg_from(const Matrix& hidden) const {
  if (!model_->config_.has_rtg_head()) throw InputError("model has no RTG head");
  return model_->rtg_head_.forward(hidden)(0, 0) * model_->scaling_.rtg_scale;
}

double BagDecisionTransformer::Decoder::action_from(const Matrix& hidden) const {
  return model_->action_head_.forward(hidden)(0, 0) * model_->scaling_.action_scale;
}

json BagDecisionTransformer::checkpoint() const {
  json meta = {
      {"kind", "bag_dt"},
      {"config",
       {{"d_model", config_.d_model},
        {"layers", config_.layers},
        {"heads", config_.heads},
        {"context_steps", config_.context_steps},
        {"bag_len", config_.bag_len},
        {"k_levels", config_.k_levels},
        {"return_mode", mode_name(config_.return_mode)},
        {"level_embedding", config_.level_embedding},
        {"bag_position", config_.bag_position},
        {"lr", config_.lr},
        {"batch_size", config_.batch_size},
        {"train_steps", config_.train_steps},
        {"seed", config_.seed},
        {"max_action", config_.max_action}}},
      {"scaling",
       {{"state_mean", scaling_.state_mean},
        {"state_std", scaling_.state_std},
        {"rtg_scale", scaling_.rtg_scale},
        {"action_scale", scaling_.action_scale},
        {"manual_target", scaling_.manual_target}}}};
  return nn::checkpoint_json(params_, meta);
}

void BagDecisionTransformer::save(const std::filesystem::path& path, const json& extra) const {
  json doc = checkpoint();
  if (!extra.is_null()) doc["meta"]["extra"] = extra;
  io::write_file_atomic(path, doc.dump() + "\n");
}

BagDecisionTransformer BagDecisionTransformer::load(const std::filesystem::path& path) {
  const json doc = nn::read_checkpoint(path);
  const json& meta = doc.at("meta");
  if (meta.value("kind", std::string()) != "bag_dt") throw SchemaError("not a bag_dt checkpoint");
  const json& c = meta.at("config");
  ModelConfig cfg;
  cfg.d_model = c.at("d_model");
  cfg.layers = c.at("layers");
  cfg.heads = c.at("heads");
  cfg.context_steps = c.at("context_steps");
  cfg.bag_len = c.at("bag_len");
  cfg.k_levels = c.at("k_levels");
  cfg.return_mode = mode_from(c.at("return_mode").get<std::string>());
  cfg.level_embedding = c.at("level_embedding");
  cfg.bag_position = c.at("bag_position");
  cfg.lr = c.at("lr");
  cfg.batch_size = c.at("batch_size");
  cfg.train_steps = c.at("train_steps");
  cfg.seed = c.at("seed");
  cfg.max_action = c.at("max_action");
  BagDecisionTransformer model(cfg);
  nn::load_values(doc, model.params_);
  const json& s = meta.at("scaling");
  model.scaling_.state_mean = s.at("state_mean").get<StateVector>();
  model.scaling_.state_std = s.at("state_std").get<StateVector>();
  model.scaling_.rtg_scale = s.at("rtg_scale");
  model.scaling_.action_scale = s.at("action_scale");
  model.scaling_.manual_target = s.at("manual_target");
  return model;
}

// ---- training --------------------------------------------------------------

TrainResult train(std::span<const Trajectory> dataset, const ModelConfig& config,
                  const StepCallback& on_step) {
  if (dataset.empty()) throw InputError("empty training set");
  TrainResult result{BagDecisionTransformer(config), {}};
  BagDecisionTransformer& model = result.model;
  model.scaling() = Scaling::fit(dataset);

  std::vector<SequenceInput> inputs;
  inputs.reserve(dataset.size());
  for (const Trajectory& t : dataset) {
    if (t.steps() > config.context_steps) throw ContextOverflow("trajectory longer than context");
    if (config.has_return_tokens() && t.rtg.size() != t.actions.size()) {
      throw SchemaError("trajectory has no rtg labels");
    }
    inputs.push_back(SequenceInput::from_trajectory(t, config.level_embedding));
  }

  Rng rng(derive_seed({config.seed, 0x7a1e}));
  std::uniform_int_distribution<std::size_t> pick(0, inputs.size() - 1);
  nn::Adam adam;
  const double weight = 1.0 / config.batch_size;
  for (int step = 1; step <= config.train_steps; ++step) {
    double lr = config.lr;
    if (step <= config.warmup_steps) {
      lr *= static_cast<double>(step) / config.warmup_steps;
    } else if (config.train_steps > config.warmup_steps) {
      const double progress = static_cast<double>(step - config.warmup_steps) /
                              (config.train_steps - config.warmup_steps);
      const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      lr *= config.min_lr_ratio + (1.0 - config.min_lr_ratio) * cosine;
    }

    model.params().zero_grad();
    LossRecord rec;
    rec.step = step;
    for (int b = 0; b < config.batch_size; ++b) {
      const LossTerms l = model.accumulate_gradients(inputs[pick(rng)], weight);
      rec.rtg_loss += l.rtg * weight;
      rec.action_loss += l.action * weight;
    }
    if (config.grad_clip > 0.0) {
      const double norm = model.params().grad_norm();
      if (norm > config.grad_clip) model.params().scale_grad(config.grad_clip / norm);
    }
    adam.step(model.params(), lr);
    result.log.push_back(rec);
    if (on_step && !on_step(model, rec)) break;
  }
  return result;
}

std::string loss_log_csv(std::span<const LossRecord> log) {
  std::ostringstream out;
  out.precision(10);
  out << "step,rtg_loss,action_loss\n";
  for (const LossRecord& r : log) out << r.step << ',' << r.rtg_loss << ',' << r.action_loss << '\n';
  return out.str();
}

// ---- inference -------------------------------------------------------------

InferencePolicy::InferencePolicy(const BagDecisionTransformer& model, InferenceOptions options)
    : model_(&model), options_(options), decoder_(model) {
  if (options_.live_bag_decrement && options_.discriminator == nullptr) {
    throw ConfigError("live bag decrement needs a discriminator");
  }
}

double InferencePolicy::act(const market::EpisodeHistory& history) {
  const ModelConfig& cfg = model_->config();
  const int t = history.step();
  if (t != next_step_) throw std::logic_error("InferencePolicy must be driven one step at a time");

  if (t > 0) {
    const double prev = history.actions[t - 1];
    decoder_.push(Modality::kAction, t - 1, level_inputs_[t - 1], std::span<const double>(&prev, 1));
    if (options_.live_bag_decrement) {
      const double sigma = pu::sigmoid(options_.discriminator->score(history.states[t - 1], prev));
      bag_phi_.push_back(std::exp(sigma / options_.beta));
    }
  }
  const int level = cfg.level_embedding ? cfg.k_levels - 1 : 0;
  level_inputs_.push_back(level);

  const StateVector& s = history.states[t];
  const nn::Matrix hs = decoder_.push(Modality::kState, t, level, s);

  double action = 0.0;
  if (cfg.return_mode == ReturnMode::kNone) {
    action = decoder_.action_from(hs);
  } else {
    double ret = 0.0;
    if (cfg.return_mode == ReturnMode::kManual) {
      ret = t == 0 ? model_->scaling().manual_target
                   : return_inputs_[t - 1] - history.rewards[t - 1];
    } else if (options_.live_bag_decrement && t % cfg.bag_len != 0) {
      // Share the bag's realized reward so far by phi, as in redistribution.
      const int bag_start = t - t % cfg.bag_len;
      double phi_sum = 0.0, reward_sum = 0.0;
      for (int j = bag_start; j < t; ++j) {
        phi_sum += bag_phi_[j];
        reward_sum += history.rewards[j];
      }
      const double r_hat = reward_sum > 0.0 ? bag_phi_[t - 1] / phi_sum * reward_sum : 0.0;
      ret = std::max(0.0, return_inputs_[t - 1] - r_hat);
    } else {
      ret = std::max(0.0, decoder_.rtg_from(hs));
    }
    return_inputs_.push_back(ret);
    const nn::Matrix hr = decoder_.push(Modality::kReturn, t, level, std::span<const double>(&ret, 1));
    action = decoder_.action_from(hr);
  }
  ++next_step_;
  if (!std::isfinite(action)) action = 0.0;
  return std::clamp(action, 0.0, cfg.max_action);
}

market::Policy make_policy(const BagDecisionTransformer& model, InferenceOptions options) {
  auto state = std::make_shared<InferencePolicy>(model, options);
  return [state](const market::EpisodeHistory& h) { return state->act(h); };
}

}  // namespace ebaret::dt
