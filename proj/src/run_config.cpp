#include "treelm/run_config.hpp"

#include <fstream>
#include <set>

namespace treelm {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (auto& [key, _] : j.items())
    if (!known.contains(key))
      fail(Error::Kind::Config,
           "unknown config key `" + key + "` in " + where);
}

}  // namespace

json RunConfig::to_json() const {
  return json{{"data", data},
              {"vocab", vocab},
              {"model", model.to_json()},
              {"train", train.to_json()}};
}

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j, {"data", "vocab", "model", "train"}, "config");
  RunConfig rc;
  rc.data = j.value("data", "");
  rc.vocab = j.value("vocab", "");
  if (j.contains("model")) {
    reject_unknown(j.at("model"),
                   {"kind", "n_block", "n_head", "d_model", "context",
                    "vocab_size", "max_path_len", "up_max", "down_max",
                    "dropout", "include_target_path"},
                   "config.model");
    rc.model = ModelConfig::from_json(j.at("model"));
  }
  if (j.contains("train")) {
    reject_unknown(j.at("train"),
                   {"learning_rate", "batch_size", "max_epochs", "seed",
                    "grad_clip", "checkpoint_every_epochs", "adam_beta1",
                    "adam_beta2", "adam_eps"},
                   "config.train");
    rc.train = TrainConfig::from_json(j.at("train"));
  }
  return rc;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(Error::Kind::Io, "cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    fail(Error::Kind::Parse, "config " + path + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace treelm
