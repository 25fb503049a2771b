#include "niab/vocabulary.hpp"

#include <set>

#include <json.hpp>

#include "niab/error.hpp"
#include "niab/util.hpp"

namespace niab {

namespace {

constexpr Capability kCaps[] = {Capability::pickupable, Capability::receptacle,
                                Capability::sliceable, Capability::washable,
                                Capability::toggleable};

bool is_word(std::string_view s) {
  return is_valid_token(s) && s.find('_') == std::string_view::npos;
}

}  // namespace

std::string_view to_string(Capability cap) noexcept {
  switch (cap) {
    case Capability::pickupable: return "pickupable";
    case Capability::receptacle: return "receptacle";
    case Capability::sliceable: return "sliceable";
    case Capability::washable: return "washable";
    case Capability::toggleable: return "toggleable";
  }
  return "?";
}

const ObjectSpec* SceneVocabulary::find(std::string_view name) const noexcept {
  for (const auto& o : objects) {
    if (o.name == name) return &o;
  }
  return nullptr;
}

SceneVocabulary parse_vocabulary(std::string_view json_text) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::BadSimData, std::string("vocabulary: ") + e.what());
  }
  SceneVocabulary v;
  try {
    const auto scene = parse_scene(doc.at("scene").get<std::string>());
    if (!scene) fail(ErrorCode::UnknownScene, "vocabulary scene " + doc.at("scene").dump());
    v.scene = *scene;
    std::set<std::string> names;
    for (const auto& o : doc.at("objects")) {
      ObjectSpec spec;
      spec.name = o.at("name").get<std::string>();
      if (!is_word(spec.name)) fail(ErrorCode::BadSimData, "object name '" + spec.name + "' is not a single word");
      if (!names.insert(spec.name).second) fail(ErrorCode::BadSimData, "duplicate object '" + spec.name + "'");
      for (const auto& f : o.at("flags")) {
        const auto flag = f.get<std::string>();
        bool known = false;
        for (Capability c : kCaps) {
          if (to_string(c) == flag) {
            spec.caps |= static_cast<std::uint8_t>(c);
            known = true;
          }
        }
        if (!known) fail(ErrorCode::BadSimData, "unknown capability '" + flag + "'");
      }
      v.objects.push_back(std::move(spec));
    }
    for (const auto& t : doc.at("atomic_templates")) v.atomic_templates.push_back(t.get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorCode::BadSimData, std::string("vocabulary: ") + e.what());
  }
  return v;
}

std::vector<SceneVocabulary> load_vocabularies(const std::filesystem::path& dir) {
  std::vector<SceneVocabulary> out;
  for (Scene s : kAllScenes) {
    auto v = parse_vocabulary(read_file(dir / (std::string(to_string(s)) + ".json")));
    if (v.scene != s) fail(ErrorCode::BadSimData, "vocabulary file for " + std::string(to_string(s)) + " declares another scene");
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace niab
