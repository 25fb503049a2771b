#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "niab/episode.hpp"
#include "niab/vocabulary.hpp"

namespace niab {

enum class Flag : std::uint8_t { washed, sliced, toasted, on, clean, open };
enum class Agent : std::uint8_t { human, robot };
enum class PrimitiveOp : std::uint8_t { move_to, pickup, put, toggle, apply };
enum class Verb : std::uint8_t { wash, slice, toast, clean };

std::string_view to_string(Flag f) noexcept;
std::string_view to_string(Agent a) noexcept;
std::string_view to_string(PrimitiveOp op) noexcept;
std::string_view to_string(Verb v) noexcept;

// Places are indexed so that a receptacle object's place index equals its
// object index; spots (doorway, dock, ...) follow after the objects.
inline constexpr int kHeldByHuman = -1;
inline constexpr int kHeldByRobot = -2;
inline constexpr int kAbsent = -3;

constexpr int held_code(Agent a) noexcept { return a == Agent::human ? kHeldByHuman : kHeldByRobot; }

struct PrimitiveStep {
  PrimitiveOp op = PrimitiveOp::move_to;
  Verb verb = Verb::wash;  // apply only
  int object = -1;         // pickup, put, toggle, apply
  int place = -1;          // move_to, put

  friend bool operator==(const PrimitiveStep&, const PrimitiveStep&) = default;
};

struct WorldState {
  std::vector<int> location;          // per object: place index, kHeldBy*, or kAbsent
  std::vector<std::uint8_t> flags;    // per object bitmask over Flag
  std::array<int, 2> agent_place{};   // indexed by Agent

  bool has(int object, Flag f) const noexcept {
    return (flags[static_cast<std::size_t>(object)] >> static_cast<int>(f)) & 1U;
  }
  void set(int object, Flag f, bool on) noexcept;
  // Place an object currently occupies; a held object is wherever its holder is.
  int place_of(int object) const noexcept;
  int place_of(Agent a) const noexcept { return agent_place[static_cast<std::size_t>(a)]; }
  // Object held by `a`, or -1.
  int held_by(Agent a) const noexcept;

  friend bool operator==(const WorldState&, const WorldState&) = default;
};

// ---- expansion table ------------------------------------------------------

// Reference to an action parameter (X, Y) or a scene role (@sink, @knife);
// `loc` wraps it as @loc(...), i.e. the place that object currently occupies.
struct Term {
  enum class Kind : std::uint8_t { param, role };
  Kind kind = Kind::param;
  int index = 0;
  bool loc = false;
};

struct Predicate {
  enum class Kind : std::uint8_t { near, at, holds, flag, available, placed, colocated };
  Kind kind = Kind::near;
  Term a, b;
  Flag flag = Flag::washed;
};

struct StepTemplate {
  PrimitiveOp op = PrimitiveOp::move_to;
  Verb verb = Verb::wash;
  std::vector<Term> args;
  std::vector<Predicate> unless;  // checked against the world the expansion starts from
};

struct ActionTemplate {
  std::string name;
  std::vector<std::string> pattern;     // literal words and parameter names
  std::vector<std::string> params;      // in order of first appearance
  std::vector<std::uint8_t> requires_;  // capability mask per parameter
  std::vector<std::string> roles;
  std::vector<Predicate> pre, post;
  std::vector<StepTemplate> steps;

  // e.g. "bring_X_to_Y"
  std::string signature() const;
};

struct ExpansionTable {
  std::vector<ActionTemplate> templates;

  static ExpansionTable parse(std::string_view json_text);
  const ActionTemplate* find(std::string_view signature) const noexcept;
};

// ---- scene model ----------------------------------------------------------

struct BoundAction {
  const ActionTemplate* tmpl = nullptr;
  std::array<int, 2> params{-1, -1};
  std::vector<int> roles;  // parallel to tmpl->roles
  ActionToken token;
};

struct Expansion {
  std::vector<PrimitiveStep> steps;
  bool skipped = false;  // postcondition already held, nothing to do
};

class SceneModel {
 public:
  SceneModel(SceneVocabulary vocab, const ExpansionTable& table, std::string_view layout_json);
  SceneModel(const SceneModel&) = delete;
  SceneModel& operator=(const SceneModel&) = delete;

  Scene scene() const noexcept { return vocab_.scene; }
  const SceneVocabulary& vocabulary() const noexcept { return vocab_; }
  std::size_t num_objects() const noexcept { return vocab_.objects.size(); }
  std::size_t num_places() const noexcept { return vocab_.objects.size() + spots_.size(); }

  std::string_view object_name(int object) const;
  std::string_view place_name(int place) const;
  std::optional<int> object_index(std::string_view name) const noexcept;
  std::optional<int> place_index(std::string_view name) const noexcept;
  bool has(int object, Capability c) const noexcept;
  std::optional<int> role(std::string_view name) const noexcept;

  // Every instantiable atomic token, in template-then-object order.
  const std::vector<ActionToken>& actions() const noexcept { return tokens_; }
  bool has_action(std::string_view token) const noexcept { return bind(token) != nullptr; }
  const BoundAction* bind(std::string_view token) const noexcept;

  const WorldState& initial_world() const noexcept { return initial_; }

  bool holds(const Predicate& p, const BoundAction& a, const WorldState& w, Agent agent) const;
  bool postcondition_holds(const BoundAction& a, const WorldState& w, Agent agent) const;

  // Throws NoExpansion for a token outside the scene, PreconditionUnsatisfiable
  // when the world cannot support the action.
  Expansion expand(std::string_view token, const WorldState& world, Agent agent) const;
  Expansion expand(const BoundAction& action, const WorldState& world, Agent agent) const;

  // Validates and applies one primitive; returns an explanation on failure.
  std::optional<std::string> apply(const PrimitiveStep& step, WorldState& world, Agent agent) const;
  // True when executing `step` would not change `world`.
  bool already_satisfied(const PrimitiveStep& step, const WorldState& world, Agent agent) const;

  std::string describe(const PrimitiveStep& step) const;
  std::map<std::string, std::string> object_locations(const WorldState& w) const;
  std::map<std::string, std::vector<std::string>> object_flags(const WorldState& w) const;

 private:
  int object_of(const Term& t, const BoundAction& a) const;
  int place_of(const Term& t, const BoundAction& a, const WorldState& w) const;

  SceneVocabulary vocab_;
  std::vector<std::string> spots_;
  std::map<std::string, int, std::less<>> object_ids_;
  std::map<std::string, int, std::less<>> role_ids_;
  std::vector<BoundAction> bound_;
  std::vector<ActionToken> tokens_;
  std::map<std::string, std::size_t, std::less<>> token_ids_;
  std::vector<std::unique_ptr<ActionTemplate>> templates_;
  WorldState initial_;
};

// All four scenes loaded from <root>/vocab and <root>/sim.
class SimData {
 public:
  static SimData load(const std::filesystem::path& root);

  const SceneModel& scene(Scene s) const { return *scenes_[static_cast<std::size_t>(s)]; }
  bool has_token(Scene s, std::string_view token) const { return scene(s).has_action(token); }
  SceneTokenCheck token_check() const;
  const ExpansionTable& table() const noexcept { return table_; }

 private:
  ExpansionTable table_;
  std::array<std::unique_ptr<SceneModel>, 4> scenes_;
};

// ---- runs -----------------------------------------------------------------

struct Prediction {
  std::size_t step = 0;
  ActionToken action;

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

struct TraceEntry {
  std::size_t step = 0;  // human atomic step the primitive belongs to
  PrimitiveStep prim;

  friend bool operator==(const TraceEntry&, const TraceEntry&) = default;
};

enum class RunEventKind : std::uint8_t { skipped, robot_executed, robot_conflict, robot_failed };
std::string_view to_string(RunEventKind k) noexcept;

struct RunEvent {
  RunEventKind kind = RunEventKind::skipped;
  std::size_t step = 0;
  std::string detail;

  friend bool operator==(const RunEvent&, const RunEvent&) = default;
};

struct RunReport {
  std::string episode_id;
  long h_human = 0;
  long h_assist = 0;
  long hss = 0;
  bool success = false;
  std::vector<TraceEntry> human_trace;
  std::vector<TraceEntry> robot_trace;
  std::optional<Prediction> prediction;
  bool robot_abandoned = false;
  std::vector<RunEvent> events;
  WorldState final_world;

  friend bool operator==(const RunReport&, const RunReport&) = default;
};

// Conjunction over object locations and flags.
struct GoalConjunct {
  enum class Kind : std::uint8_t { at, flag, near } kind = Kind::at;
  int object = -1;
  int place = -1;
  Flag flag = Flag::washed;
};

struct Goal {
  std::vector<GoalConjunct> conjuncts;
  bool holds(const WorldState& w) const;
};

// Replays one episode; the unassisted baseline and goal are computed once and
// shared by every assisted replay.
class EpisodeRunner {
 public:
  EpisodeRunner(const SceneModel& scene, const Episode& episode);
  EpisodeRunner(const SceneModel& scene, const Episode& episode, WorldState world0);

  const RunReport& unassisted() const noexcept { return baseline_; }
  const Goal& goal() const noexcept { return goal_; }
  RunReport assisted(const Prediction& prediction) const;

 private:
  const SceneModel& scene_;
  const Episode& episode_;
  WorldState world0_;
  RunReport baseline_;
  Goal goal_;
};

// The goal is built from the final atomic step: its grounded postconditions,
// plus the place every object it mentions occupies at the end of the
// unassisted run.
Goal derive_goal(const SceneModel& scene, const Episode& episode, const WorldState& world0);

RunReport run_unassisted(const SceneModel& scene, const Episode& episode, const WorldState& world0);
RunReport run_assisted(const SceneModel& scene, const Episode& episode, const WorldState& world0,
                       const Prediction& prediction);
// Goal derived from the scene's canonical start.
bool check_success(const SceneModel& scene, const Episode& episode, const WorldState& world);

// True when `sub` can be obtained from `full` by deleting primitives.
bool is_subsequence(const std::vector<TraceEntry>& sub, const std::vector<TraceEntry>& full);

}  // namespace niab
