#include "treelm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <sstream>

namespace treelm {

using nlohmann::json;

json TrainConfig::to_json() const {
  return json{{"learning_rate", learning_rate},
              {"batch_size", batch_size},
              {"max_epochs", max_epochs},
              {"seed", seed},
              {"grad_clip", grad_clip},
              {"checkpoint_every_epochs", checkpoint_every_epochs},
              {"adam_beta1", adam_beta1},
              {"adam_beta2", adam_beta2},
              {"adam_eps", adam_eps}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.seed = j.value("seed", c.seed);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.checkpoint_every_epochs =
      j.value("checkpoint_every_epochs", c.checkpoint_every_epochs);
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  if (c.learning_rate < 0)
    fail(Error::Kind::Config, "learning_rate must be non-negative");
  if (c.batch_size < 1) fail(Error::Kind::Config, "batch_size must be positive");
  return c;
}

void adam_update(std::vector<Parameter<float>>& params, AdamState& state,
                 float lr, float beta1, float beta2, float eps) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    fail(Error::Kind::Shape, "adam state does not match parameter list");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1),
                                    static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2),
                                    static_cast<double>(state.t));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<float>& t = *params[pi].tensor;
    if (!t.has_grad())
      fail(Error::Kind::Shape, "parameter " + params[pi].name + " has no grads");
    if (!t.grad_finite())
      fail(Error::Kind::Numeric,
           "non-finite gradient in parameter " + params[pi].name);
    float* m = state.m[pi].data();
    float* v = state.v[pi].data();
    float* w = t.data();
    const float* g = t.grad();
    const std::int64_t n = t.size();
    for (std::int64_t i = 0; i < n; ++i) {
      m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
      const float mhat = static_cast<float>(m[i] / bc1);
      const float vhat = static_cast<float>(v[i] / bc2);
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

double clip_gradients(std::vector<Parameter<float>>& params, float max_norm) {
  double sq = 0.0;
  for (auto& p : params) {
    const float* g = p.tensor->grad();
    for (std::int64_t i = 0; i < p.tensor->size(); ++i)
      sq += static_cast<double>(g[i]) * static_cast<double>(g[i]);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for (auto& p : params) {
      float* g = p.tensor->grad();
      for (std::int64_t i = 0; i < p.tensor->size(); ++i) g[i] *= scale;
    }
  }
  return norm;
}

namespace {

std::string rng_to_string(const std::mt19937& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

std::mt19937 rng_from_string(const std::string& s) {
  std::istringstream in(s);
  std::mt19937 rng;
  in >> rng;
  if (!in) fail(Error::Kind::Parse, "bad RNG state in checkpoint");
  return rng;
}

}  // namespace

Trainer::Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg)
    : params_(init_model_params<float>(model_cfg, train_cfg.seed)),
      cfg_(train_cfg),
      rng_(static_cast<std::mt19937::result_type>(
          mix_seed(train_cfg.seed ^ 0x7261696e65722eull))) {
  params_.ensure_grads();
  adam_.init_like(params_);
}

Trainer Trainer::from_checkpoint(const std::string& path,
                                 const TrainConfig& train_cfg) {
  Checkpoint ck = load_checkpoint(path);
  Trainer t(ck.config, train_cfg);
  t.params_ = ck.build_params();
  t.params_.ensure_grads();
  t.adam_ = std::move(ck.adam);
  t.counters_ = ck.counters;
  t.rng_ = rng_from_string(ck.rng_state);
  return t;
}

EpochStats Trainer::train_epoch(const Dataset& dataset, std::ostream* run_log) {
  if (dataset.kind() != params_.cfg.kind)
    fail(Error::Kind::Config,
         std::string("kind mismatch: dataset is `") + dataset.header.kind +
             "` but model is `" + to_string(params_.cfg.kind) + "`");
  if (dataset.segments.empty())
    fail(Error::Kind::Config, "dataset has no segments");

  const std::int64_t epoch = counters_.epoch;
  std::vector<std::size_t> order(dataset.segments.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937 shuffle_rng(static_cast<std::mt19937::result_type>(
      mix_seed(cfg_.seed ^ mix_seed(static_cast<std::uint64_t>(epoch) + 1))));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  const bool leaves_only = kind_predicts_leaves_only(params_.cfg.kind);
  auto plist = params_.parameters();

  double epoch_nll = 0.0;
  std::int64_t epoch_count = 0;
  std::int64_t epoch_tokens = 0;
  std::int64_t steps = 0;
  const auto t0 = std::chrono::steady_clock::now();

  Activations<float> acts;
  for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg_.batch_size)) {
    const std::size_t end =
        std::min(order.size(), b + static_cast<std::size_t>(cfg_.batch_size));
    // The loss denominator is known before any forward pass: it only
    // depends on the masks.
    std::vector<LossRows> rows;
    rows.reserve(end - b);
    int total = 0;
    for (std::size_t k = b; k < end; ++k) {
      const PreparedSegment& seg = dataset.segments[order[k]];
      rows.push_back(loss_rows(seg.tokens, seg.loss_mask, seg.leaf, leaves_only));
      total += rows.back().count;
    }
    if (total == 0) continue;

    params_.zero_grads();
    double sum_nll = 0.0;
    for (std::size_t k = b; k < end; ++k) {
      const PreparedSegment& seg = dataset.segments[order[k]];
      const ModelInput input = to_model_input(seg, params_.cfg.kind);
      model_forward<float>(params_, input, acts, /*training=*/true, &rng_);
      const LossStats st = model_backward<float>(
          params_, input, acts, rows[k - b], 1.0f / static_cast<float>(total));
      sum_nll += st.sum_nll;
      epoch_tokens += static_cast<std::int64_t>(seg.tokens.size());
    }
    const double loss = sum_nll / total;
    if (!std::isfinite(loss))
      fail(Error::Kind::Numeric,
           "non-finite loss at step " + std::to_string(counters_.global_step));
    const double grad_norm = clip_gradients(plist, cfg_.grad_clip);
    adam_update(plist, adam_, cfg_.learning_rate, cfg_.adam_beta1,
                cfg_.adam_beta2, cfg_.adam_eps);
    counters_.global_step += 1;
    steps += 1;
    loss_trace_.push_back(loss);
    epoch_nll += sum_nll;
    epoch_count += total;

    if (run_log) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
              .count();
      const auto wall_ms =
          std::chrono::duration_cast<std::chrono::milliseconds>(
              std::chrono::system_clock::now().time_since_epoch())
              .count();
      json rec{{"step", counters_.global_step},
               {"epoch", epoch},
               {"loss", loss},
               {"lr", cfg_.learning_rate},
               {"grad_norm", grad_norm},
               {"tokens_per_sec", secs > 0 ? epoch_tokens / secs : 0.0},
               {"wall_ms", wall_ms}};
      (*run_log) << rec.dump() << "\n";
    }
  }
  counters_.epoch += 1;

  EpochStats stats;
  stats.steps = steps;
  stats.mean_loss = epoch_count > 0 ? epoch_nll / epoch_count : 0.0;
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  stats.tokens_per_sec = secs > 0 ? epoch_tokens / secs : 0.0;
  return stats;
}

void Trainer::save(const std::string& path, const std::string& vocab_hash,
                   const json& run_config) {
  save_checkpoint(path, params_, adam_, counters_, rng_to_string(rng_),
                  vocab_hash, run_config);
}

}  // namespace treelm
