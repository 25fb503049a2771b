#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "niab/embedding.hpp"
#include "niab/eval.hpp"
#include "niab/ranker.hpp"
#include "niab/scene_gen.hpp"
#include "niab/trainer.hpp"

namespace niab {

// Every tunable of every subcommand, one section per module. Defaults are the
// reference configuration, so an empty config file changes nothing.
struct AppConfig {
  GenConfig gen;
  double train_fraction = 0.9;
  std::uint64_t split_seed = 42;
  std::string embedder = "hashing";  // or "table:<path>"
  std::size_t hashing_dim = 64;
  std::uint64_t hashing_seed = 0;
  RankerConfig ranker;
  TrainConfig train;
  Policy policy = Policy::model;
  std::uint64_t eval_seed = 0;

  void validate() const;
};

nlohmann::ordered_json to_json(const AppConfig& c);
// Overlays the keys present in `j` onto `base`. Unknown sections or keys and
// ill-typed values raise InvalidConfig. A top-level "meta" object is ignored,
// so the config.json echoed into an output directory loads back as a config.
AppConfig overlay(AppConfig base, const nlohmann::json& j);
AppConfig load_config(const std::filesystem::path& path, AppConfig base = {});

// Hash of the canonical JSON dump, 16 hex digits.
std::string config_hash(const AppConfig& c);

Embedder make_embedder(const AppConfig& c);
CandidatePolicy embedder_source(const AppConfig& c);

}  // namespace niab
