#include "niab/episode.hpp"

#include <algorithm>
#include <set>
#include <span>
#include <unordered_set>

#include <json.hpp>

#include "niab/error.hpp"
#include "niab/util.hpp"

namespace niab {

namespace {

using nlohmann::json;

constexpr std::array<std::string_view, 5> kFields = {"episode_id", "scene", "human_task_seq",
                                                     "robot_vocab", "oracle_labels"};
constexpr std::array<std::string_view, 2> kLabelFields = {"human_step_idx", "best_robot_action"};

[[noreturn]] void reject(ErrorCode code, std::size_t line, const std::string& what) {
  throw Error(code, what, line);
}

bool has_exact_keys(const json& obj, std::span<const std::string_view> keys) {
  if (!obj.is_object() || obj.size() != keys.size()) return false;
  return std::all_of(keys.begin(), keys.end(),
                     [&](std::string_view k) { return obj.contains(std::string(k)); });
}

std::vector<ActionToken> token_list(const json& arr, std::size_t line, std::string_view field) {
  if (!arr.is_array()) reject(ErrorCode::MalformedRecord, line, std::string(field) + " is not an array");
  std::vector<ActionToken> out;
  out.reserve(arr.size());
  for (const auto& t : arr) {
    if (!t.is_string()) reject(ErrorCode::MalformedRecord, line, std::string(field) + " holds a non-string");
    out.push_back(t.get<std::string>());
  }
  return out;
}

Episode episode_from_json(const json& rec, std::size_t line) {
  if (!has_exact_keys(rec, kFields)) {
    reject(ErrorCode::MalformedRecord, line, "record must hold exactly the five episode fields");
  }
  Episode ep;
  const auto& id = rec["episode_id"];
  if (!id.is_string()) reject(ErrorCode::MalformedRecord, line, "episode_id is not a string");
  ep.episode_id = id.get<std::string>();

  const auto& scene = rec["scene"];
  if (!scene.is_string()) reject(ErrorCode::MalformedRecord, line, "scene is not a string");
  const auto parsed = parse_scene(scene.get<std::string>());
  if (!parsed) reject(ErrorCode::UnknownScene, line, "unknown scene '" + scene.get<std::string>() + "'");
  ep.scene = *parsed;

  ep.human_task_seq = token_list(rec["human_task_seq"], line, "human_task_seq");
  ep.robot_vocab = token_list(rec["robot_vocab"], line, "robot_vocab");

  const auto& labels = rec["oracle_labels"];
  if (!labels.is_array()) reject(ErrorCode::MalformedRecord, line, "oracle_labels is not an array");
  for (const auto& l : labels) {
    if (!has_exact_keys(l, kLabelFields)) {
      reject(ErrorCode::MalformedRecord, line, "oracle label must hold human_step_idx and best_robot_action");
    }
    const auto& idx = l["human_step_idx"];
    if (!idx.is_number_integer()) reject(ErrorCode::MalformedRecord, line, "human_step_idx is not an integer");
    if (idx.is_number_unsigned() == false && idx.get<std::int64_t>() < 0) {
      reject(ErrorCode::LabelOutOfRange, line, "negative human_step_idx");
    }
    const auto& act = l["best_robot_action"];
    if (!act.is_string()) reject(ErrorCode::MalformedRecord, line, "best_robot_action is not a string");
    ep.oracle_labels.push_back({idx.get<std::size_t>(), act.get<std::string>()});
  }
  return ep;
}

}  // namespace

bool is_valid_token(std::string_view token) noexcept {
  if (token.empty() || token.front() == '_' || token.back() == '_') return false;
  char prev = '_';
  for (char c : token) {
    const bool alnum = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
    if (!alnum && c != '_') return false;
    if (c == '_' && prev == '_') return false;
    prev = c;
  }
  return true;
}

std::string_view to_string(Scene scene) noexcept {
  switch (scene) {
    case Scene::kitchen: return "kitchen";
    case Scene::bedroom: return "bedroom";
    case Scene::livingroom: return "livingroom";
    case Scene::bathroom: return "bathroom";
  }
  return "?";
}

std::optional<Scene> parse_scene(std::string_view name) noexcept {
  for (Scene s : kAllScenes) {
    if (to_string(s) == name) return s;
  }
  return std::nullopt;
}

std::optional<std::size_t> Episode::vocab_index(std::string_view token) const noexcept {
  for (std::size_t i = 0; i < robot_vocab.size(); ++i) {
    if (robot_vocab[i] == token) return i;
  }
  return std::nullopt;
}

void validate_episode(const Episode& ep, std::size_t line, const SceneTokenCheck& in_scene) {
  if (ep.episode_id.empty()) reject(ErrorCode::MalformedRecord, line, "empty episode_id");
  if (ep.human_task_seq.empty()) reject(ErrorCode::MalformedRecord, line, "empty human_task_seq");

  auto check_token = [&](const ActionToken& t, bool allow_noop) {
    if (!is_valid_token(t)) reject(ErrorCode::MalformedRecord, line, "invalid token '" + t + "'");
    if (t == kNoOp) {
      if (!allow_noop) reject(ErrorCode::ActionNotInVocab, line, "no_op in human_task_seq");
      return;
    }
    if (in_scene && !in_scene(ep.scene, t)) {
      reject(ErrorCode::ActionNotInVocab, line,
             "token '" + t + "' is not in the " + std::string(to_string(ep.scene)) + " vocabulary");
    }
  };
  for (const auto& t : ep.human_task_seq) check_token(t, false);

  std::unordered_set<std::string_view> seen;
  std::size_t noops = 0;
  for (const auto& t : ep.robot_vocab) {
    check_token(t, true);
    if (!seen.insert(t).second) reject(ErrorCode::MalformedRecord, line, "duplicate robot_vocab token '" + t + "'");
    if (t == kNoOp) ++noops;
  }
  if (noops != 1) reject(ErrorCode::MalformedRecord, line, "robot_vocab must contain no_op exactly once");

  if (ep.oracle_labels.size() > kMaxOracleLabels) {
    reject(ErrorCode::MalformedRecord, line, "more than two oracle labels");
  }
  std::set<std::size_t> steps;
  for (const auto& l : ep.oracle_labels) {
    if (l.human_step_idx >= ep.human_task_seq.size()) {
      reject(ErrorCode::LabelOutOfRange, line,
             "human_step_idx " + std::to_string(l.human_step_idx) + " >= S=" +
                 std::to_string(ep.human_task_seq.size()));
    }
    if (!seen.contains(l.best_robot_action)) {
      reject(ErrorCode::ActionNotInVocab, line,
             "best_robot_action '" + l.best_robot_action + "' not in robot_vocab");
    }
    if (!steps.insert(l.human_step_idx).second) {
      reject(ErrorCode::MalformedRecord, line, "oracle labels overlap at one step");
    }
  }
}

Corpus parse_corpus(std::string_view bytes, const SceneTokenCheck& in_scene) {
  Corpus corpus;
  std::unordered_set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t nl = bytes.find('\n', pos);
    const std::size_t end = nl == std::string_view::npos ? bytes.size() : nl;
    const std::string_view line = bytes.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;

    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      reject(ErrorCode::MalformedRecord, line_no, e.what());
    }
    Episode ep = episode_from_json(rec, line_no);
    validate_episode(ep, line_no, in_scene);
    if (!ids.insert(ep.episode_id).second) {
      reject(ErrorCode::DuplicateEpisodeId, line_no, "duplicate episode_id '" + ep.episode_id + "'");
    }
    corpus.episodes.push_back(std::move(ep));
  }
  return corpus;
}

std::string serialize_episode(const Episode& ep) {
  auto str = [](std::string_view s) { return json(s).dump(); };
  auto list = [&](const std::vector<ActionToken>& v) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ',';
      out += str(v[i]);
    }
    return out + "]";
  };
  std::string out = "{\"episode_id\":" + str(ep.episode_id);
  out += ",\"scene\":" + str(to_string(ep.scene));
  out += ",\"human_task_seq\":" + list(ep.human_task_seq);
  out += ",\"robot_vocab\":" + list(ep.robot_vocab);
  out += ",\"oracle_labels\":[";
  for (std::size_t i = 0; i < ep.oracle_labels.size(); ++i) {
    if (i) out += ',';
    out += "{\"human_step_idx\":" + std::to_string(ep.oracle_labels[i].human_step_idx);
    out += ",\"best_robot_action\":" + str(ep.oracle_labels[i].best_robot_action) + "}";
  }
  out += "]}";
  return out;
}

std::string serialize_corpus(const Corpus& corpus) {
  std::string out;
  for (const auto& ep : corpus.episodes) {
    out += serialize_episode(ep);
    out += '\n';
  }
  return out;
}

Corpus read_corpus(const std::filesystem::path& path, const SceneTokenCheck& in_scene) {
  return parse_corpus(read_file(path), in_scene);
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  write_file(path, serialize_corpus(corpus));
}

}  // namespace niab
