#include "niab/config.hpp"

#include <set>

#include "niab/error.hpp"
#include "niab/util.hpp"

namespace niab {

using nlohmann::json;
using nlohmann::ordered_json;

void AppConfig::validate() const {
  gen.validate();
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
    fail(ErrorCode::InvalidConfig, "split.train_fraction must lie in [0, 1]");
  }
  if (embedder != "hashing" && !(embedder.starts_with("table:") && embedder.size() > 6)) {
    fail(ErrorCode::InvalidConfig, "embedding.embedder must be 'hashing' or 'table:<path>'");
  }
  if (hashing_dim == 0) fail(ErrorCode::InvalidConfig, "embedding.hashing_dim must be positive");
  RankerConfig r = ranker;
  r.input_dim = std::max<std::size_t>(r.input_dim, 1);
  r.validate();
  train.validate();
}

ordered_json to_json(const AppConfig& c) {
  ordered_json j;
  j["gen"] = {{"seed", c.gen.seed},
              {"n_episodes", c.gen.n_episodes},
              {"label_mix", c.gen.label_mix},
              {"min_steps", c.gen.min_steps},
              {"max_steps", c.gen.max_steps},
              {"min_vocab", c.gen.min_vocab},
              {"max_vocab", c.gen.max_vocab},
              {"related_share", c.gen.related_share},
              {"max_attempts", c.gen.max_attempts}};
  j["split"] = {{"train_fraction", c.train_fraction}, {"seed", c.split_seed}};
  j["embedding"] = {{"embedder", c.embedder}, {"hashing_dim", c.hashing_dim}, {"hashing_seed", c.hashing_seed}};
  j["ranker"] = {{"d_model", c.ranker.d_model},
                 {"n_layers", c.ranker.n_layers},
                 {"n_heads", c.ranker.n_heads},
                 {"mlp_hidden", c.ranker.mlp_hidden},
                 {"max_steps", c.ranker.max_steps},
                 {"max_candidates", c.ranker.max_candidates}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"weight_decay", c.train.weight_decay},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"epsilon", c.train.epsilon},
                {"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"seed", c.train.seed},
                {"ablation", std::string(to_string(c.train.ablation))},
                {"zero_label", std::string(to_string(c.train.zero_label))},
                {"k_ep", c.train.k_ep},
                {"dropout", c.train.dropout}};
  j["eval"] = {{"policy", std::string(to_string(c.policy))}, {"seed", c.eval_seed}};
  return j;
}

namespace {

template <typename T>
void take(const json& sec, const std::string& section, const std::string& key, T& out) {
  if (!sec.contains(key)) return;
  try {
    out = sec.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorCode::InvalidConfig, section + "." + key + " has the wrong type");
  }
}

void check_keys(const json& sec, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!sec.is_object()) fail(ErrorCode::InvalidConfig, "section '" + section + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : sec.items()) {
    if (!ok.contains(k)) fail(ErrorCode::InvalidConfig, "unknown key " + section + "." + k);
  }
}

}  // namespace

AppConfig overlay(AppConfig c, const json& j) {
  if (!j.is_object()) fail(ErrorCode::InvalidConfig, "config must be a JSON object");
  for (const auto& [name, sec] : j.items()) {
    if (name == "meta") continue;
    if (name == "gen") {
      check_keys(sec, name, {"seed", "n_episodes", "label_mix", "min_steps", "max_steps", "min_vocab", "max_vocab",
                             "related_share", "max_attempts"});
      take(sec, name, "seed", c.gen.seed);
      take(sec, name, "n_episodes", c.gen.n_episodes);
      take(sec, name, "label_mix", c.gen.label_mix);
      take(sec, name, "min_steps", c.gen.min_steps);
      take(sec, name, "max_steps", c.gen.max_steps);
      take(sec, name, "min_vocab", c.gen.min_vocab);
      take(sec, name, "max_vocab", c.gen.max_vocab);
      take(sec, name, "related_share", c.gen.related_share);
      take(sec, name, "max_attempts", c.gen.max_attempts);
    } else if (name == "split") {
      check_keys(sec, name, {"train_fraction", "seed"});
      take(sec, name, "train_fraction", c.train_fraction);
      take(sec, name, "seed", c.split_seed);
    } else if (name == "embedding") {
      check_keys(sec, name, {"embedder", "hashing_dim", "hashing_seed"});
      take(sec, name, "embedder", c.embedder);
      take(sec, name, "hashing_dim", c.hashing_dim);
      take(sec, name, "hashing_seed", c.hashing_seed);
    } else if (name == "ranker") {
      check_keys(sec, name, {"d_model", "n_layers", "n_heads", "mlp_hidden", "max_steps", "max_candidates"});
      take(sec, name, "d_model", c.ranker.d_model);
      take(sec, name, "n_layers", c.ranker.n_layers);
      take(sec, name, "n_heads", c.ranker.n_heads);
      take(sec, name, "mlp_hidden", c.ranker.mlp_hidden);
      take(sec, name, "max_steps", c.ranker.max_steps);
      take(sec, name, "max_candidates", c.ranker.max_candidates);
    } else if (name == "train") {
      check_keys(sec, name, {"learning_rate", "weight_decay", "beta1", "beta2", "epsilon", "epochs", "batch_size",
                             "seed", "ablation", "zero_label", "k_ep", "dropout"});
      take(sec, name, "learning_rate", c.train.learning_rate);
      take(sec, name, "weight_decay", c.train.weight_decay);
      take(sec, name, "beta1", c.train.beta1);
      take(sec, name, "beta2", c.train.beta2);
      take(sec, name, "epsilon", c.train.epsilon);
      take(sec, name, "epochs", c.train.epochs);
      take(sec, name, "batch_size", c.train.batch_size);
      take(sec, name, "seed", c.train.seed);
      take(sec, name, "k_ep", c.train.k_ep);
      take(sec, name, "dropout", c.train.dropout);
      std::string s;
      if (sec.contains("ablation")) {
        take(sec, name, "ablation", s);
        c.train.ablation = parse_ablation(s);
      }
      if (sec.contains("zero_label")) {
        take(sec, name, "zero_label", s);
        c.train.zero_label = parse_zero_label_mode(s);
      }
    } else if (name == "eval") {
      check_keys(sec, name, {"policy", "seed"});
      if (sec.contains("policy")) {
        std::string s;
        take(sec, name, "policy", s);
        c.policy = parse_policy(s);
      }
      take(sec, name, "seed", c.eval_seed);
    } else {
      fail(ErrorCode::InvalidConfig, "unknown config section '" + name + "'");
    }
  }
  return c;
}

AppConfig load_config(const std::filesystem::path& path, AppConfig base) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidConfig, path.string() + ": " + e.what());
  }
  return overlay(std::move(base), j);
}

std::string config_hash(const AppConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

Embedder make_embedder(const AppConfig& c) { return Embedder::from_spec(c.embedder, c.hashing_dim, c.hashing_seed); }

CandidatePolicy embedder_source(const AppConfig& c) {
  CandidatePolicy p;
  p.embedder = c.embedder;
  p.hashing_dim = static_cast<std::uint32_t>(c.hashing_dim);
  p.hashing_seed = c.hashing_seed;
  return p;
}

}  // namespace niab
