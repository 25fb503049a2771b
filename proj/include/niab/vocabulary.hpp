#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "niab/episode.hpp"

namespace niab {

enum class Capability : std::uint8_t {
  pickupable = 1 << 0,
  receptacle = 1 << 1,
  sliceable = 1 << 2,
  washable = 1 << 3,
  toggleable = 1 << 4,
};

std::string_view to_string(Capability cap) noexcept;

struct ObjectSpec {
  std::string name;  // single [a-z0-9]+ word
  std::uint8_t caps = 0;

  bool has(Capability c) const noexcept { return (caps & static_cast<std::uint8_t>(c)) != 0; }
};

// One scene's object inventory and the atomic templates it instantiates.
struct SceneVocabulary {
  Scene scene = Scene::kitchen;
  std::vector<ObjectSpec> objects;
  std::vector<std::string> atomic_templates;  // e.g. "bring_X_to_Y"

  const ObjectSpec* find(std::string_view name) const noexcept;
};

SceneVocabulary parse_vocabulary(std::string_view json_text);

// Reads <dir>/<scene>.json for all four scenes, in kAllScenes order.
std::vector<SceneVocabulary> load_vocabularies(const std::filesystem::path& dir);

}  // namespace niab
