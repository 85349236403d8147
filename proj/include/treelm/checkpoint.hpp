#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "treelm/model.hpp"

namespace treelm {

// First/second Adam moments, aligned with ModelParams::parameters() order.
struct AdamState {
  std::vector<std::vector<float>> m, v;
  std::int64_t t = 0;

  void init_like(ModelParams<float>& params);
};

struct TrainCounters {
  std::int64_t epoch = 0;        // completed epochs
  std::int64_t global_step = 0;  // optimizer steps taken
};

// Binary, little-endian: magic + version, a JSON header (model config,
// effective run config, counters, RNG state, vocab hash, tensor manifest),
// then raw float32 blobs (parameters, Adam m, Adam v) in manifest order.
struct Checkpoint {
  ModelConfig config;
  nlohmann::json run_config;
  TrainCounters counters;
  std::string rng_state;
  std::string vocab_hash;
  std::vector<std::pair<std::string, std::vector<int>>> manifest;
  std::vector<std::vector<float>> tensors;
  AdamState adam;

  // Materializes parameters; manifest must match the config's layout.
  ModelParams<float> build_params() const;
};

void save_checkpoint(const std::string& path, ModelParams<float>& params,
                     const AdamState& adam, const TrainCounters& counters,
                     const std::string& rng_state, const std::string& vocab_hash,
                     const nlohmann::json& run_config);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace treelm
