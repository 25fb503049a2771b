#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace niab {

// Action tokens are lowercase snake-case strings: verb[_object[_preposition_target]].
using ActionToken = std::string;

inline constexpr std::string_view kNoOp = "no_op";

// [a-z0-9]+(_[a-z0-9]+)*
bool is_valid_token(std::string_view token) noexcept;

enum class Scene { kitchen, bedroom, livingroom, bathroom };

inline constexpr std::array<Scene, 4> kAllScenes = {Scene::kitchen, Scene::bedroom,
                                                    Scene::livingroom, Scene::bathroom};

std::string_view to_string(Scene scene) noexcept;
std::optional<Scene> parse_scene(std::string_view name) noexcept;

struct OracleLabel {
  std::size_t human_step_idx = 0;  // 0-based
  ActionToken best_robot_action;

  friend bool operator==(const OracleLabel&, const OracleLabel&) = default;
};

struct Episode {
  std::string episode_id;
  Scene scene = Scene::kitchen;
  std::vector<ActionToken> human_task_seq;  // S >= 1
  std::vector<ActionToken> robot_vocab;     // C + 1 entries, no_op included once
  std::vector<OracleLabel> oracle_labels;   // 0..2, distinct steps

  std::size_t num_steps() const noexcept { return human_task_seq.size(); }
  std::optional<std::size_t> vocab_index(std::string_view token) const noexcept;

  friend bool operator==(const Episode&, const Episode&) = default;
};

enum class Split { train, val, test };

struct Corpus {
  std::vector<Episode> episodes;
  Split split = Split::train;

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

inline constexpr std::size_t kMaxOracleLabels = 2;

// Optional membership check: is `token` part of `scene`'s instantiable vocabulary?
using SceneTokenCheck = std::function<bool(Scene, std::string_view)>;

// Throws niab::Error on the first invalid record. `line` is 1-based and is
// attached to every error raised for a record.
void validate_episode(const Episode& episode, std::size_t line,
                      const SceneTokenCheck& in_scene = {});

// Line-delimited records, one episode per line.
Corpus parse_corpus(std::string_view bytes, const SceneTokenCheck& in_scene = {});

// Canonical form: keys in schema order, no whitespace, '\n' after every record.
std::string serialize_corpus(const Corpus& corpus);
std::string serialize_episode(const Episode& episode);

Corpus read_corpus(const std::filesystem::path& path, const SceneTokenCheck& in_scene = {});
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);

}  // namespace niab
