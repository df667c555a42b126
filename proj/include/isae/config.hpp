#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "isae/errors.hpp"
#include "isae/train.hpp"

// JSON surface of TrainConfig. Keys mirror the struct's field names; the four
// loss weights appear flat as lambda1..lambda4. Paths are not part of the
// file — they come from command-line flags, which also override file values.
namespace isae {

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "seed") cfg.seed = value.get<std::uint64_t>();
      else if (key == "epochs") cfg.epochs = value.get<int>();
      else if (key == "batch_size") cfg.batch_size = value.get<int>();
      else if (key == "lr") cfg.lr = value.get<double>();
      else if (key == "beta1") cfg.beta1 = value.get<double>();
      else if (key == "beta2") cfg.beta2 = value.get<double>();
      else if (key == "eps") cfg.eps = value.get<double>();
      else if (key == "lambda1") cfg.weights.lambda1 = value.get<double>();
      else if (key == "lambda2") cfg.weights.lambda2 = value.get<double>();
      else if (key == "lambda3") cfg.weights.lambda3 = value.get<double>();
      else if (key == "lambda4") cfg.weights.lambda4 = value.get<double>();
      else if (key == "enable_isa") cfg.enable_isa = value.get<bool>();
      else if (key == "checkpoint_interval") cfg.checkpoint_interval = value.get<int>();
      else throw ConfigError("config: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: '" + path + "' must hold a JSON object");
  return train_config_from_json(j);
}

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["lr"] = cfg.lr;
  j["beta1"] = cfg.beta1;
  j["beta2"] = cfg.beta2;
  j["eps"] = cfg.eps;
  j["lambda1"] = cfg.weights.lambda1;
  j["lambda2"] = cfg.weights.lambda2;
  j["lambda3"] = cfg.weights.lambda3;
  j["lambda4"] = cfg.weights.lambda4;
  j["enable_isa"] = cfg.enable_isa;
  j["checkpoint_interval"] = cfg.checkpoint_interval;
  return j;
}

}  // namespace isae
