#pragma once

#include <string>

#include "treelm/model.hpp"
#include "treelm/train.hpp"

namespace treelm {

// Merged view of config file + flag overrides; the effective value set is
// embedded in the run log, checkpoints, and reports. Unknown keys anywhere in
// the file are rejected.
struct RunConfig {
  std::string data;
  std::string vocab;
  ModelConfig model;
  TrainConfig train;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
};

}  // namespace treelm
