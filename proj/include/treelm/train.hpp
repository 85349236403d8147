#pragma once

#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "treelm/checkpoint.hpp"
#include "treelm/dataset.hpp"
#include "treelm/model.hpp"

namespace treelm {

struct TrainConfig {
  float learning_rate = 1e-3f;
  int batch_size = 8;
  int max_epochs = 1;
  std::uint64_t seed = 1;
  float grad_clip = 1.0f;          // global-norm clip; <= 0 disables
  int checkpoint_every_epochs = 1;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Standard bias-corrected Adam over the registered parameters, reading each
// tensor's grad buffer. Errors (naming the parameter) on non-finite grads.
void adam_update(std::vector<Parameter<float>>& params, AdamState& state,
                 float lr, float beta1 = 0.9f, float beta2 = 0.999f,
                 float eps = 1e-8f);

// Scales all gradients so the global L2 norm is at most max_norm; returns the
// pre-clip norm.
double clip_gradients(std::vector<Parameter<float>>& params, float max_norm);

struct EpochStats {
  double mean_loss = 0.0;
  double tokens_per_sec = 0.0;
  std::int64_t steps = 0;
};

// Teacher-forced training with deterministic seeding. One epoch is one
// shuffled pass over segments; the shuffle order is derived from
// (seed, epoch) so a resumed run visits exactly what the original would.
class Trainer {
 public:
  Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg);
  static Trainer from_checkpoint(const std::string& path,
                                 const TrainConfig& train_cfg);

  EpochStats train_epoch(const Dataset& dataset, std::ostream* run_log);
  void save(const std::string& path, const std::string& vocab_hash,
            const nlohmann::json& run_config);

  ModelParams<float>& params() { return params_; }
  const ModelParams<float>& params() const { return params_; }
  const std::vector<double>& loss_trace() const { return loss_trace_; }
  const TrainCounters& counters() const { return counters_; }
  std::int64_t completed_epochs() const { return counters_.epoch; }

 private:
  ModelParams<float> params_;
  TrainConfig cfg_;
  AdamState adam_;
  TrainCounters counters_;
  std::mt19937 rng_;
  std::vector<double> loss_trace_;
};

}  // namespace treelm
