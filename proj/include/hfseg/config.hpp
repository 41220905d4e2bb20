#pragma once

// Flat JSON configuration for sessions and experiments.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "hfseg/session.hpp"

namespace hfseg {

inline nlohmann::json to_json(const SessionConfig& c) {
  nlohmann::json j = {{"budget", c.budget},
                      {"burn_in", c.sampler.burn_in},
                      {"thin", c.sampler.thin},
                      {"n_samples", c.sampler.n_samples},
                      {"proposal_scale", c.sampler.proposal.scale},
                      {"proposal_translation", c.sampler.proposal.translation},
                      {"proposal_rotation", c.sampler.proposal.rotation},
                      {"proposal_coefficient", c.sampler.proposal.coefficient},
                      {"scale_min", c.sampler.scale_min},
                      {"scale_max", c.sampler.scale_max},
                      {"seed", c.sampler.rng_seed},
                      {"beta0", c.beta.beta0},
                      {"beta_learning_rate", c.beta.learning_rate},
                      {"beta_max", c.beta.beta_max},
                      {"beta_fixed", nullptr},
                      {"policy", c.policy == QuestionPolicy::random ? "random" : "uncertainty"},
                      {"warm_start", c.warm_start},
                      {"final_samples", c.final_samples}};
  if (c.fixed_beta) j["beta_fixed"] = *c.fixed_beta;
  return j;
}

/// Applies the keys present in `j` on top of `base`. Unknown keys are an error.
inline SessionConfig session_config_from_json(const nlohmann::json& j, SessionConfig base = {}) {
  if (!j.is_object()) throw InvalidArgument("session config must be a JSON object");
  const nlohmann::json known = to_json(SessionConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw InvalidArgument("unknown session config key: " + key);
  }
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("budget", base.budget);
    get("burn_in", base.sampler.burn_in);
    get("thin", base.sampler.thin);
    get("n_samples", base.sampler.n_samples);
    get("proposal_scale", base.sampler.proposal.scale);
    get("proposal_translation", base.sampler.proposal.translation);
    get("proposal_rotation", base.sampler.proposal.rotation);
    get("proposal_coefficient", base.sampler.proposal.coefficient);
    get("scale_min", base.sampler.scale_min);
    get("scale_max", base.sampler.scale_max);
    get("seed", base.sampler.rng_seed);
    get("beta0", base.beta.beta0);
    get("beta_learning_rate", base.beta.learning_rate);
    get("beta_max", base.beta.beta_max);
    get("warm_start", base.warm_start);
    get("final_samples", base.final_samples);
    if (j.contains("beta_fixed")) {
      const auto& b = j.at("beta_fixed");
      base.fixed_beta = b.is_null() ? std::nullopt : std::optional<double>(b.get<double>());
    }
    if (j.contains("policy")) {
      const auto p = j.at("policy").get<std::string>();
      if (p == "uncertainty") {
        base.policy = QuestionPolicy::uncertainty;
      } else if (p == "random") {
        base.policy = QuestionPolicy::random;
      } else {
        throw InvalidArgument("policy must be 'uncertainty' or 'random'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("session config: ") + e.what());
  }
  base.validate();
  return base;
}

enum class MapMode { file, blurred, translated };

/// Everything `simulate` needs besides the session parameters.
struct ExperimentConfig {
  std::filesystem::path gt;
  std::filesystem::path model_dir;
  std::filesystem::path map;  // used when map_mode == file
  MapMode map_mode = MapMode::blurred;
  double map_sigma = 1.5;
  bool random_baseline = false;
  std::filesystem::path out_dir = "out";
  SessionConfig session;

  void validate() const {
    session.validate();
    if (gt.empty()) throw InvalidArgument("experiment config: ground-truth mask path is required");
    if (model_dir.empty()) throw InvalidArgument("experiment config: shape model directory is required");
    if (map_mode == MapMode::file && map.empty()) throw InvalidArgument("experiment config: map path is required");
    if (map_mode != MapMode::file && !(map_sigma > 0)) throw InvalidArgument("experiment config: map_sigma must be > 0");
    for (const auto& p : {gt, model_dir}) {
      if (!std::filesystem::exists(p)) throw IoError("path does not exist: " + p.string());
    }
    if (map_mode == MapMode::file && !std::filesystem::exists(map)) throw IoError("path does not exist: " + map.string());
  }
};

inline const char* to_string(MapMode m) {
  switch (m) {
    case MapMode::file: return "file";
    case MapMode::blurred: return "blurred";
    case MapMode::translated: return "translated";
  }
  return "?";
}

inline MapMode map_mode_from_string(const std::string& s) {
  if (s == "file") return MapMode::file;
  if (s == "blurred") return MapMode::blurred;
  if (s == "translated") return MapMode::translated;
  throw InvalidArgument("map mode must be file, blurred or translated: " + s);
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j = to_json(c.session);
  j["gt"] = c.gt.string();
  j["model"] = c.model_dir.string();
  j["map"] = c.map.string();
  j["map_mode"] = to_string(c.map_mode);
  j["map_sigma"] = c.map_sigma;
  j["baseline_random"] = c.random_baseline;
  j["out"] = c.out_dir.string();
  return j;
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {}) {
  if (!j.is_object()) throw InvalidArgument("experiment config must be a JSON object");
  nlohmann::json session_keys = nlohmann::json::object();
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "gt") {
        base.gt = value.get<std::string>();
      } else if (key == "model") {
        base.model_dir = value.get<std::string>();
      } else if (key == "map") {
        base.map = value.get<std::string>();
      } else if (key == "map_mode") {
        base.map_mode = map_mode_from_string(value.get<std::string>());
      } else if (key == "map_sigma") {
        base.map_sigma = value.get<double>();
      } else if (key == "baseline_random") {
        base.random_baseline = value.get<bool>();
      } else if (key == "out") {
        base.out_dir = value.get<std::string>();
      } else {
        session_keys[key] = value;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("experiment config: ") + e.what());
  }
  base.session = session_config_from_json(session_keys, base.session);
  return base;
}

}  // namespace hfseg
