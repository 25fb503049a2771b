#include "niab/simulator.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

#include "niab/error.hpp"
#include "niab/util.hpp"

namespace niab {

namespace {

using nlohmann::json;

constexpr std::string_view kFlagNames[] = {"washed", "sliced", "toasted", "on", "clean", "open"};
constexpr std::string_view kOpNames[] = {"move_to", "pickup", "put", "toggle", "apply"};
constexpr std::string_view kVerbNames[] = {"wash", "slice", "toast", "clean"};

template <typename E, std::size_t N>
std::optional<E> lookup(const std::string_view (&names)[N], std::string_view s) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return static_cast<E>(i);
  }
  return std::nullopt;
}

[[noreturn]] void bad_data(const std::string& msg) { fail(ErrorCode::BadSimData, msg); }

Flag verb_flag(Verb v) {
  switch (v) {
    case Verb::wash: return Flag::washed;
    case Verb::slice: return Flag::sliced;
    case Verb::toast: return Flag::toasted;
    case Verb::clean: return Flag::clean;
  }
  return Flag::washed;
}

Agent other(Agent a) { return a == Agent::human ? Agent::robot : Agent::human; }

struct TemplateParser {
  const ActionTemplate& t;

  Term term(std::string_view s) const {
    Term out;
    if (s.starts_with("@loc(") && s.ends_with(")")) {
      out = term(s.substr(5, s.size() - 6));
      if (out.loc) bad_data("nested @loc in " + t.name);
      out.loc = true;
      return out;
    }
    if (s.starts_with("@")) {
      const auto it = std::find(t.roles.begin(), t.roles.end(), s.substr(1));
      if (it == t.roles.end()) bad_data("undeclared role " + std::string(s) + " in " + t.name);
      out.kind = Term::Kind::role;
      out.index = static_cast<int>(it - t.roles.begin());
      return out;
    }
    const auto it = std::find(t.params.begin(), t.params.end(), s);
    if (it == t.params.end()) bad_data("unknown parameter " + std::string(s) + " in " + t.name);
    out.kind = Term::Kind::param;
    out.index = static_cast<int>(it - t.params.begin());
    return out;
  }

  Predicate predicate(const json& j) const {
    const auto parts = j.get<std::vector<std::string>>();
    if (parts.empty()) bad_data("empty predicate in " + t.name);
    static const std::map<std::string, std::pair<Predicate::Kind, std::size_t>> kinds = {
        {"near", {Predicate::Kind::near, 2}},          {"at", {Predicate::Kind::at, 3}},
        {"holds", {Predicate::Kind::holds, 2}},        {"flag", {Predicate::Kind::flag, 3}},
        {"available", {Predicate::Kind::available, 2}}, {"placed", {Predicate::Kind::placed, 2}},
        {"colocated", {Predicate::Kind::colocated, 3}},
    };
    const auto it = kinds.find(parts[0]);
    if (it == kinds.end() || parts.size() != it->second.second) {
      bad_data("bad predicate " + j.dump() + " in " + t.name);
    }
    Predicate p;
    p.kind = it->second.first;
    p.a = term(parts[1]);
    if (p.kind == Predicate::Kind::flag) {
      const auto f = lookup<Flag>(kFlagNames, parts[2]);
      if (!f) bad_data("unknown flag " + parts[2]);
      p.flag = *f;
    } else if (parts.size() == 3) {
      p.b = term(parts[2]);
    }
    return p;
  }
};

}  // namespace

std::string_view to_string(Flag f) noexcept { return kFlagNames[static_cast<std::size_t>(f)]; }
std::string_view to_string(Agent a) noexcept { return a == Agent::human ? "human" : "robot"; }
std::string_view to_string(PrimitiveOp op) noexcept { return kOpNames[static_cast<std::size_t>(op)]; }
std::string_view to_string(Verb v) noexcept { return kVerbNames[static_cast<std::size_t>(v)]; }

std::string_view to_string(RunEventKind k) noexcept {
  switch (k) {
    case RunEventKind::skipped: return "skipped";
    case RunEventKind::robot_executed: return "robot_executed";
    case RunEventKind::robot_conflict: return "robot_conflict";
    case RunEventKind::robot_failed: return "robot_failed";
  }
  return "?";
}

// ---- WorldState -------------------------------------------------------------

void WorldState::set(int object, Flag f, bool on) noexcept {
  auto& bits = flags[static_cast<std::size_t>(object)];
  const auto mask = static_cast<std::uint8_t>(1U << static_cast<int>(f));
  bits = on ? static_cast<std::uint8_t>(bits | mask) : static_cast<std::uint8_t>(bits & ~mask);
}

int WorldState::place_of(int object) const noexcept {
  const int loc = location[static_cast<std::size_t>(object)];
  if (loc == kHeldByHuman) return place_of(Agent::human);
  if (loc == kHeldByRobot) return place_of(Agent::robot);
  return loc;
}

int WorldState::held_by(Agent a) const noexcept {
  const int code = held_code(a);
  for (std::size_t i = 0; i < location.size(); ++i) {
    if (location[i] == code) return static_cast<int>(i);
  }
  return -1;
}

// ---- ExpansionTable -------------------------------------------------------

std::string ActionTemplate::signature() const {
  std::string out;
  for (const auto& w : pattern) {
    if (!out.empty()) out += '_';
    out += w;
  }
  return out;
}

ExpansionTable ExpansionTable::parse(std::string_view json_text) {
  ExpansionTable table;
  try {
    const json doc = json::parse(json_text);
    if (doc.at("format") != "niab-expansion-1") bad_data("unsupported expansion table format");
    for (const auto& jt : doc.at("templates")) {
      ActionTemplate t;
      t.name = jt.at("name").get<std::string>();
      t.pattern = jt.at("pattern").get<std::vector<std::string>>();
      const auto& req = jt.at("requires");
      for (const auto& w : t.pattern) {
        if (!req.contains(w)) continue;
        if (std::find(t.params.begin(), t.params.end(), w) != t.params.end()) {
          bad_data("parameter " + w + " repeats in " + t.name);
        }
        std::uint8_t mask = 0;
        for (const auto& c : req.at(w)) {
          bool known = false;
          for (auto cap : {Capability::pickupable, Capability::receptacle, Capability::sliceable,
                           Capability::washable, Capability::toggleable}) {
            if (to_string(cap) == c.get<std::string>()) {
              mask |= static_cast<std::uint8_t>(cap);
              known = true;
            }
          }
          if (!known) bad_data("unknown capability " + c.dump() + " in " + t.name);
        }
        t.params.push_back(w);
        t.requires_.push_back(mask);
      }
      if (t.params.size() != req.size() || t.params.empty() || t.params.size() > 2) {
        bad_data("template " + t.name + " must declare one or two parameters used in its pattern");
      }
      t.roles = jt.at("roles").get<std::vector<std::string>>();
      const TemplateParser p{t};
      for (const auto& j : jt.at("pre")) t.pre.push_back(p.predicate(j));
      for (const auto& j : jt.at("post")) t.post.push_back(p.predicate(j));
      if (t.post.empty()) bad_data("template " + t.name + " has no postcondition");
      for (const auto& js : jt.at("steps")) {
        StepTemplate st;
        const auto op = lookup<PrimitiveOp>(kOpNames, js.at("op").get<std::string>());
        if (!op) bad_data("unknown primitive " + js.at("op").dump());
        st.op = *op;
        auto args = js.at("args").get<std::vector<std::string>>();
        if (st.op == PrimitiveOp::apply) {
          const auto verb = args.empty() ? std::nullopt : lookup<Verb>(kVerbNames, args[0]);
          if (!verb) bad_data("apply needs a verb in " + t.name);
          st.verb = *verb;
          args.erase(args.begin());
        }
        const std::size_t arity = st.op == PrimitiveOp::put ? 2 : 1;
        if (args.size() != arity) bad_data("wrong arity for " + std::string(to_string(st.op)) + " in " + t.name);
        for (const auto& a : args) st.args.push_back(p.term(a));
        if (js.contains("unless")) {
          for (const auto& j : js.at("unless")) st.unless.push_back(p.predicate(j));
        }
        t.steps.push_back(std::move(st));
      }
      if (table.find(t.signature())) bad_data("duplicate template " + t.signature());
      table.templates.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    bad_data(std::string("expansion table: ") + e.what());
  }
  return table;
}

const ActionTemplate* ExpansionTable::find(std::string_view signature) const noexcept {
  for (const auto& t : templates) {
    if (t.signature() == signature) return &t;
  }
  return nullptr;
}

// ---- SceneModel -------------------------------------------------------------

SceneModel::SceneModel(SceneVocabulary vocab, const ExpansionTable& table, std::string_view layout_json)
    : vocab_(std::move(vocab)) {
  const std::string scene_name(to_string(vocab_.scene));
  for (std::size_t i = 0; i < vocab_.objects.size(); ++i) {
    object_ids_.emplace(vocab_.objects[i].name, static_cast<int>(i));
  }
  json layout;
  try {
    layout = json::parse(layout_json).at(scene_name);
    spots_ = layout.at("spots").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    bad_data("layout for " + scene_name + ": " + e.what());
  }
  for (const auto& s : spots_) {
    if (object_ids_.contains(s)) bad_data("spot " + s + " shadows an object");
  }

  const auto n = vocab_.objects.size();
  initial_.location.assign(n, kAbsent);
  initial_.flags.assign(n, 0);
  try {
    for (auto [who, key] : {std::pair{Agent::human, "human_start"}, std::pair{Agent::robot, "robot_start"}}) {
      const auto p = place_index(layout.at(key).get<std::string>());
      if (!p) bad_data(std::string(key) + " is not a place in " + scene_name);
      initial_.agent_place[static_cast<std::size_t>(who)] = *p;
    }
    for (const auto& [role_name, obj] : layout.at("roles").items()) {
      const auto id = object_index(obj.get<std::string>());
      if (!id) bad_data("role " + role_name + " names unknown object in " + scene_name);
      role_ids_.emplace(role_name, *id);
    }
    const auto& placement = layout.at("placement");
    for (const auto& [obj, where] : placement.items()) {
      if (!object_ids_.contains(obj)) bad_data("placement of unknown object " + obj);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& spec = vocab_.objects[i];
      if (spec.has(Capability::receptacle)) {
        if (placement.contains(spec.name)) bad_data("receptacle " + spec.name + " cannot be placed");
        initial_.location[i] = static_cast<int>(i);
        continue;
      }
      if (!placement.contains(spec.name)) bad_data("no placement for " + spec.name + " in " + scene_name);
      const auto home = object_index(placement.at(spec.name).get<std::string>());
      if (!home || !has(*home, Capability::receptacle)) {
        bad_data(spec.name + " must start on a receptacle");
      }
      initial_.location[i] = *home;
    }
  } catch (const json::exception& e) {
    bad_data("layout for " + scene_name + ": " + e.what());
  }

  for (const auto& sig : vocab_.atomic_templates) {
    const ActionTemplate* src = table.find(sig);
    if (!src) bad_data("no expansion entry for " + sig);
    templates_.push_back(std::make_unique<ActionTemplate>(*src));
    const ActionTemplate* t = templates_.back().get();

    std::vector<int> roles;
    for (const auto& r : t->roles) {
      const auto id = role(r);
      if (!id) break;
      roles.push_back(*id);
    }
    if (roles.size() != t->roles.size()) continue;  // scene lacks the fixture

    auto fits = [&](int obj, std::size_t param) {
      return (vocab_.objects[static_cast<std::size_t>(obj)].caps & t->requires_[param]) == t->requires_[param];
    };
    auto emit = [&](int x, int y) {
      BoundAction b{t, {x, y}, roles, {}};
      for (const auto& w : t->pattern) {
        if (!b.token.empty()) b.token += '_';
        if (w == t->params[0]) b.token += object_name(x);
        else if (t->params.size() > 1 && w == t->params[1]) b.token += object_name(y);
        else b.token += w;
      }
      if (token_ids_.contains(b.token)) bad_data("ambiguous token " + b.token);
      token_ids_.emplace(b.token, bound_.size());
      tokens_.push_back(b.token);
      bound_.push_back(std::move(b));
    };
    for (int x = 0; x < static_cast<int>(n); ++x) {
      if (!fits(x, 0)) continue;
      if (t->params.size() == 1) {
        emit(x, -1);
        continue;
      }
      for (int y = 0; y < static_cast<int>(n); ++y) {
        if (y != x && fits(y, 1)) emit(x, y);
      }
    }
  }
}

std::string_view SceneModel::object_name(int object) const {
  return vocab_.objects.at(static_cast<std::size_t>(object)).name;
}

std::string_view SceneModel::place_name(int place) const {
  if (place == kHeldByHuman) return "agent_human";
  if (place == kHeldByRobot) return "agent_robot";
  if (place == kAbsent) return "absent";
  const auto n = static_cast<int>(vocab_.objects.size());
  if (place < n) return object_name(place);
  return spots_.at(static_cast<std::size_t>(place - n));
}

std::optional<int> SceneModel::object_index(std::string_view name) const noexcept {
  const auto it = object_ids_.find(name);
  if (it == object_ids_.end()) return std::nullopt;
  return it->second;
}

std::optional<int> SceneModel::place_index(std::string_view name) const noexcept {
  if (const auto o = object_index(name); o && has(*o, Capability::receptacle)) return o;
  for (std::size_t i = 0; i < spots_.size(); ++i) {
    if (spots_[i] == name) return static_cast<int>(vocab_.objects.size() + i);
  }
  return std::nullopt;
}

bool SceneModel::has(int object, Capability c) const noexcept {
  return object >= 0 && static_cast<std::size_t>(object) < vocab_.objects.size() &&
         vocab_.objects[static_cast<std::size_t>(object)].has(c);
}

std::optional<int> SceneModel::role(std::string_view name) const noexcept {
  const auto it = role_ids_.find(name);
  if (it == role_ids_.end()) return std::nullopt;
  return it->second;
}

const BoundAction* SceneModel::bind(std::string_view token) const noexcept {
  const auto it = token_ids_.find(token);
  return it == token_ids_.end() ? nullptr : &bound_[it->second];
}

int SceneModel::object_of(const Term& t, const BoundAction& a) const {
  return t.kind == Term::Kind::param ? a.params[static_cast<std::size_t>(t.index)]
                                     : a.roles[static_cast<std::size_t>(t.index)];
}

int SceneModel::place_of(const Term& t, const BoundAction& a, const WorldState& w) const {
  const int obj = object_of(t, a);
  if (t.loc) return w.place_of(obj);
  if (!has(obj, Capability::receptacle)) {
    bad_data(std::string(object_name(obj)) + " used as a place but is not a receptacle");
  }
  return obj;
}

bool SceneModel::holds(const Predicate& p, const BoundAction& a, const WorldState& w, Agent agent) const {
  const int x = object_of(p.a, a);
  const auto loc = [&](int obj) { return w.location[static_cast<std::size_t>(obj)]; };
  switch (p.kind) {
    case Predicate::Kind::near:
      return loc(x) != kAbsent && w.place_of(x) == w.place_of(agent);
    case Predicate::Kind::at:
      return loc(x) == place_of(p.b, a, w);
    case Predicate::Kind::holds:
      return loc(x) == held_code(agent);
    case Predicate::Kind::flag:
      return w.has(x, p.flag);
    case Predicate::Kind::available:
      return loc(x) != kAbsent && loc(x) != held_code(other(agent));
    case Predicate::Kind::placed:
      return loc(x) >= 0;
    case Predicate::Kind::colocated: {
      const int y = object_of(p.b, a);
      return loc(x) >= 0 && w.place_of(x) == w.place_of(y) && loc(y) != kAbsent;
    }
  }
  return false;
}

bool SceneModel::postcondition_holds(const BoundAction& a, const WorldState& w, Agent agent) const {
  return std::all_of(a.tmpl->post.begin(), a.tmpl->post.end(),
                     [&](const Predicate& p) { return holds(p, a, w, agent); });
}

Expansion SceneModel::expand(std::string_view token, const WorldState& world, Agent agent) const {
  const BoundAction* a = bind(token);
  if (!a) {
    fail(ErrorCode::NoExpansion,
         "'" + std::string(token) + "' has no expansion in " + std::string(to_string(scene())));
  }
  return expand(*a, world, agent);
}

Expansion SceneModel::expand(const BoundAction& a, const WorldState& world, Agent agent) const {
  Expansion out;
  if (postcondition_holds(a, world, agent)) {
    out.skipped = true;
    return out;
  }
  for (const auto& p : a.tmpl->pre) {
    if (!holds(p, a, world, agent)) {
      fail(ErrorCode::PreconditionUnsatisfiable,
           a.token + ": precondition on " + std::string(object_name(object_of(p.a, a))) + " fails");
    }
  }
  WorldState scratch = world;
  for (const auto& st : a.tmpl->steps) {
    const bool guarded = std::any_of(st.unless.begin(), st.unless.end(),
                                     [&](const Predicate& p) { return holds(p, a, world, agent); });
    if (guarded) continue;
    PrimitiveStep prim{st.op, st.verb, -1, -1};
    switch (st.op) {
      case PrimitiveOp::move_to:
        prim.place = place_of(st.args[0], a, scratch);
        break;
      case PrimitiveOp::put:
        prim.object = object_of(st.args[0], a);
        prim.place = place_of(st.args[1], a, scratch);
        break;
      default:
        prim.object = object_of(st.args[0], a);
        break;
    }
    if (already_satisfied(prim, scratch, agent)) continue;
    if (const auto why = apply(prim, scratch, agent)) {
      fail(ErrorCode::PreconditionUnsatisfiable, a.token + ": " + *why);
    }
    out.steps.push_back(prim);
  }
  if (!postcondition_holds(a, scratch, agent)) {
    fail(ErrorCode::PreconditionUnsatisfiable, a.token + ": expansion does not reach its postcondition");
  }
  return out;
}

bool SceneModel::already_satisfied(const PrimitiveStep& s, const WorldState& w, Agent agent) const {
  switch (s.op) {
    case PrimitiveOp::move_to: return w.place_of(agent) == s.place;
    case PrimitiveOp::pickup: return w.location[static_cast<std::size_t>(s.object)] == held_code(agent);
    case PrimitiveOp::put: return w.location[static_cast<std::size_t>(s.object)] == s.place;
    case PrimitiveOp::toggle: return w.has(s.object, Flag::on);
    case PrimitiveOp::apply: return w.has(s.object, verb_flag(s.verb));
  }
  return false;
}

std::optional<std::string> SceneModel::apply(const PrimitiveStep& s, WorldState& w, Agent agent) const {
  const auto n = static_cast<int>(vocab_.objects.size());
  const auto here = w.place_of(agent);
  const auto name = [&](int obj) { return std::string(object_name(obj)); };
  if (s.op == PrimitiveOp::move_to) {
    if (s.place < 0 || s.place >= static_cast<int>(num_places()) ||
        (s.place < n && !has(s.place, Capability::receptacle))) {
      return "move_to an unknown place";
    }
    w.agent_place[static_cast<std::size_t>(agent)] = s.place;
    return std::nullopt;
  }
  if (s.object < 0 || s.object >= n) return "unknown object";
  auto& loc = w.location[static_cast<std::size_t>(s.object)];
  if (loc == kAbsent) return name(s.object) + " is not in the scene";
  switch (s.op) {
    case PrimitiveOp::pickup:
      if (!has(s.object, Capability::pickupable)) return name(s.object) + " cannot be picked up";
      if (loc != here) return name(s.object) + " is out of reach";
      if (w.held_by(agent) >= 0) return std::string(to_string(agent)) + " hands are full";
      loc = held_code(agent);
      return std::nullopt;
    case PrimitiveOp::put:
      if (loc != held_code(agent)) return std::string(to_string(agent)) + " is not holding " + name(s.object);
      if (!has(s.place, Capability::receptacle)) return "put target is not a receptacle";
      if (here != s.place) return "put target is out of reach";
      loc = s.place;
      return std::nullopt;
    case PrimitiveOp::toggle:
      if (!has(s.object, Capability::toggleable)) return name(s.object) + " cannot be toggled";
      if (w.place_of(s.object) != here) return name(s.object) + " is out of reach";
      w.set(s.object, Flag::on, !w.has(s.object, Flag::on));
      return std::nullopt;
    case PrimitiveOp::apply:
      if (w.place_of(s.object) != here) return name(s.object) + " is out of reach";
      if (s.verb == Verb::wash && !has(s.object, Capability::washable)) return name(s.object) + " cannot be washed";
      if (s.verb == Verb::slice && !has(s.object, Capability::sliceable)) return name(s.object) + " cannot be sliced";
      w.set(s.object, verb_flag(s.verb), true);
      return std::nullopt;
    case PrimitiveOp::move_to:
      break;
  }
  return std::nullopt;
}

std::string SceneModel::describe(const PrimitiveStep& s) const {
  std::string out(to_string(s.op));
  out += '(';
  switch (s.op) {
    case PrimitiveOp::move_to: out += place_name(s.place); break;
    case PrimitiveOp::put:
      out += object_name(s.object);
      out += ", ";
      out += place_name(s.place);
      break;
    case PrimitiveOp::apply:
      out += to_string(s.verb);
      out += ", ";
      out += object_name(s.object);
      break;
    default: out += object_name(s.object); break;
  }
  return out + ')';
}

std::map<std::string, std::string> SceneModel::object_locations(const WorldState& w) const {
  std::map<std::string, std::string> out;
  for (std::size_t i = 0; i < w.location.size(); ++i) {
    out.emplace(vocab_.objects[i].name, std::string(place_name(w.location[i])));
  }
  return out;
}

std::map<std::string, std::vector<std::string>> SceneModel::object_flags(const WorldState& w) const {
  std::map<std::string, std::vector<std::string>> out;
  for (std::size_t i = 0; i < w.flags.size(); ++i) {
    auto& v = out[vocab_.objects[i].name];
    for (std::size_t f = 0; f < std::size(kFlagNames); ++f) {
      if (w.has(static_cast<int>(i), static_cast<Flag>(f))) v.emplace_back(kFlagNames[f]);
    }
  }
  return out;
}

// ---- SimData ----------------------------------------------------------------

SimData SimData::load(const std::filesystem::path& root) {
  SimData data;
  data.table_ = ExpansionTable::parse(read_file(root / "sim" / "expansion.json"));
  const std::string layouts = read_file(root / "sim" / "layouts.json");
  auto vocabs = load_vocabularies(root / "vocab");
  for (std::size_t i = 0; i < vocabs.size(); ++i) {
    data.scenes_[i] = std::make_unique<SceneModel>(std::move(vocabs[i]), data.table_, layouts);
  }
  return data;
}

SceneTokenCheck SimData::token_check() const {
  std::array<const SceneModel*, 4> scenes{};
  for (std::size_t i = 0; i < scenes.size(); ++i) scenes[i] = scenes_[i].get();
  return [scenes](Scene s, std::string_view token) {
    return scenes[static_cast<std::size_t>(s)]->has_action(token);
  };
}

// ---- runs -------------------------------------------------------------------

namespace {

[[noreturn]] void fault(std::size_t step, const std::string& what) {
  fail(ErrorCode::ExecutionFault, "human step " + std::to_string(step) + ": " + what);
}

void human_step(const SceneModel& scene, const Episode& ep, std::size_t i, WorldState& world,
                RunReport& report) {
  const BoundAction* a = scene.bind(ep.human_task_seq[i]);
  if (!a) fault(i, "'" + ep.human_task_seq[i] + "' has no expansion");
  Expansion exp;
  try {
    exp = scene.expand(*a, world, Agent::human);
  } catch (const Error& e) {
    fault(i, e.what());
  }
  if (exp.skipped) report.events.push_back({RunEventKind::skipped, i, a->token});
  for (const auto& prim : exp.steps) {
    if (const auto why = scene.apply(prim, world, Agent::human)) fault(i, *why);
    report.human_trace.push_back({i, prim});
  }
}

// Receptacles the human's step `i` is about to use: receptacle arguments of
// the token plus every put destination of its expansion from `world`.
std::set<int> human_targets(const SceneModel& scene, const Episode& ep, std::size_t i,
                            const WorldState& world) {
  std::set<int> out;
  const BoundAction* a = scene.bind(ep.human_task_seq[i]);
  if (!a) return out;
  for (std::size_t p = 0; p < a->tmpl->params.size(); ++p) {
    if (scene.has(a->params[p], Capability::receptacle)) out.insert(a->params[p]);
  }
  try {
    for (const auto& prim : scene.expand(*a, world, Agent::human).steps) {
      if (prim.op == PrimitiveOp::put) out.insert(prim.place);
    }
  } catch (const Error&) {
  }
  return out;
}

void robot_window(const SceneModel& scene, const Episode& ep, std::size_t i, const ActionToken& action,
                  WorldState& world, RunReport& report) {
  auto abandon = [&](RunEventKind kind, const std::string& why) {
    report.robot_abandoned = true;
    report.events.push_back({kind, i, action + ": " + why});
  };
  const BoundAction* a = scene.bind(action);
  if (!a) return abandon(RunEventKind::robot_failed, "no expansion in this scene");

  const int human_held = world.held_by(Agent::human);
  if (human_held >= 0) {
    for (const auto& st : a->tmpl->steps) {
      if (st.op != PrimitiveOp::pickup) continue;
      const auto& t = st.args[0];
      const int obj = t.kind == Term::Kind::param ? a->params[static_cast<std::size_t>(t.index)]
                                                  : a->roles[static_cast<std::size_t>(t.index)];
      if (obj == human_held) {
        return abandon(RunEventKind::robot_conflict,
                       "would take " + std::string(scene.object_name(obj)) + " from the human");
      }
    }
  }

  Expansion exp;
  try {
    exp = scene.expand(*a, world, Agent::robot);
  } catch (const Error& e) {
    return abandon(RunEventKind::robot_failed, e.what());
  }
  const auto targets = human_targets(scene, ep, i, world);
  for (const auto& prim : exp.steps) {
    if (prim.op == PrimitiveOp::pickup && prim.object == human_held) {
      return abandon(RunEventKind::robot_conflict, "would take an object from the human");
    }
    if (prim.op == PrimitiveOp::put && targets.contains(prim.place)) {
      return abandon(RunEventKind::robot_conflict,
                     "would occupy " + std::string(scene.place_name(prim.place)) + " the human is about to use");
    }
  }
  WorldState next = world;
  for (const auto& prim : exp.steps) {
    if (const auto why = scene.apply(prim, next, Agent::robot)) {
      return abandon(RunEventKind::robot_failed, *why);
    }
  }
  world = std::move(next);
  for (const auto& prim : exp.steps) report.robot_trace.push_back({i, prim});
  report.events.push_back({RunEventKind::robot_executed, i, action});
}

RunReport execute(const SceneModel& scene, const Episode& ep, const WorldState& world0,
                  const Prediction* pred) {
  RunReport report;
  report.episode_id = ep.episode_id;
  if (pred) report.prediction = *pred;
  WorldState world = world0;
  for (std::size_t i = 0; i < ep.human_task_seq.size(); ++i) {
    if (pred && pred->step == i && pred->action != kNoOp) {
      robot_window(scene, ep, i, pred->action, world, report);
    }
    human_step(scene, ep, i, world, report);
  }
  report.h_assist = static_cast<long>(report.human_trace.size());
  report.h_human = report.h_assist;
  report.final_world = std::move(world);
  return report;
}

Goal goal_from(const SceneModel& scene, const Episode& ep, const WorldState& final_world) {
  Goal goal;
  if (ep.human_task_seq.empty()) return goal;
  const BoundAction* a = scene.bind(ep.human_task_seq.back());
  if (!a) fault(ep.human_task_seq.size() - 1, "'" + ep.human_task_seq.back() + "' has no expansion");
  auto add = [&](GoalConjunct c) {
    const bool dup = std::any_of(goal.conjuncts.begin(), goal.conjuncts.end(), [&](const GoalConjunct& g) {
      return g.kind == c.kind && g.object == c.object && g.place == c.place && g.flag == c.flag;
    });
    if (!dup) goal.conjuncts.push_back(c);
  };
  auto obj = [&](const Term& t) {
    return t.kind == Term::Kind::param ? a->params[static_cast<std::size_t>(t.index)]
                                       : a->roles[static_cast<std::size_t>(t.index)];
  };
  for (const auto& p : a->tmpl->post) {
    switch (p.kind) {
      case Predicate::Kind::near:
        add({GoalConjunct::Kind::near, obj(p.a), -1, Flag::washed});
        break;
      case Predicate::Kind::flag:
        add({GoalConjunct::Kind::flag, obj(p.a), -1, p.flag});
        break;
      case Predicate::Kind::at:
        add({GoalConjunct::Kind::at, obj(p.a), final_world.location[static_cast<std::size_t>(obj(p.a))],
             Flag::washed});
        break;
      default:
        break;
    }
  }
  for (std::size_t i = 0; i < a->tmpl->params.size(); ++i) {
    const int x = a->params[i];
    if (scene.has(x, Capability::receptacle)) continue;
    add({GoalConjunct::Kind::at, x, final_world.location[static_cast<std::size_t>(x)], Flag::washed});
  }
  return goal;
}

}  // namespace

bool Goal::holds(const WorldState& w) const {
  return std::all_of(conjuncts.begin(), conjuncts.end(), [&](const GoalConjunct& c) {
    switch (c.kind) {
      case GoalConjunct::Kind::at: return w.location[static_cast<std::size_t>(c.object)] == c.place;
      case GoalConjunct::Kind::flag: return w.has(c.object, c.flag);
      case GoalConjunct::Kind::near:
        return w.location[static_cast<std::size_t>(c.object)] != kAbsent &&
               w.place_of(c.object) == w.place_of(Agent::human);
    }
    return false;
  });
}

EpisodeRunner::EpisodeRunner(const SceneModel& scene, const Episode& episode)
    : EpisodeRunner(scene, episode, scene.initial_world()) {}

EpisodeRunner::EpisodeRunner(const SceneModel& scene, const Episode& episode, WorldState world0)
    : scene_(scene), episode_(episode), world0_(std::move(world0)) {
  baseline_ = execute(scene_, episode_, world0_, nullptr);
  goal_ = goal_from(scene_, episode_, baseline_.final_world);
  baseline_.success = goal_.holds(baseline_.final_world);
}

RunReport EpisodeRunner::assisted(const Prediction& prediction) const {
  RunReport r = execute(scene_, episode_, world0_, &prediction);
  r.h_human = baseline_.h_human;
  r.hss = r.h_human - r.h_assist;
  r.success = goal_.holds(r.final_world);
  return r;
}

Goal derive_goal(const SceneModel& scene, const Episode& episode, const WorldState& world0) {
  return EpisodeRunner(scene, episode, world0).goal();
}

RunReport run_unassisted(const SceneModel& scene, const Episode& episode, const WorldState& world0) {
  return EpisodeRunner(scene, episode, world0).unassisted();
}

RunReport run_assisted(const SceneModel& scene, const Episode& episode, const WorldState& world0,
                       const Prediction& prediction) {
  return EpisodeRunner(scene, episode, world0).assisted(prediction);
}

bool check_success(const SceneModel& scene, const Episode& episode, const WorldState& world) {
  return derive_goal(scene, episode, scene.initial_world()).holds(world);
}

bool is_subsequence(const std::vector<TraceEntry>& sub, const std::vector<TraceEntry>& full) {
  std::size_t j = 0;
  for (const auto& e : full) {
    if (j < sub.size() && sub[j].prim == e.prim) ++j;
  }
  return j == sub.size();
}

}  // namespace niab
