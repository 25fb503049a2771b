#include "niab/scene_gen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "niab/error.hpp"
#include "niab/util.hpp"

namespace niab {

namespace {

enum class BlockKind { fetch, wash, toggle, clean, cut, filler };

struct Block {
  std::vector<ActionToken> steps;
  ActionToken helper;        // the single robot action that pre-satisfies the block
  std::size_t offset = 0;    // step within the block where the helper first matters
  bool planted = false;
};

std::size_t block_length(BlockKind k) {
  switch (k) {
    case BlockKind::cut: return 5;
    case BlockKind::filler: return 1;
    default: return 2;
  }
}

class EpisodeBuilder {
 public:
  EpisodeBuilder(const SceneModel& scene, Rng& rng) : scene_(scene), rng_(rng) {
    const auto n = static_cast<int>(scene.num_objects());
    for (int i = 0; i < n; ++i) {
      if (scene.has(i, Capability::receptacle)) receptacles_.push_back(i);
      if (scene.has(i, Capability::pickupable) && !scene.has(i, Capability::receptacle)) items_.push_back(i);
    }
    sink_ = scene.role("sink");
    knife_ = scene.role("knife");
    if (sink_) used_.insert(*sink_);
  }

  // Kinds that can still be built in `budget` steps; helper-bearing kinds only
  // when `helpful` is set.
  std::vector<std::pair<BlockKind, int>> options(std::size_t budget, bool helpful) const {
    std::vector<std::pair<BlockKind, int>> out;
    auto offer = [&](BlockKind k, int weight, bool feasible) {
      if (feasible && block_length(k) <= budget) out.emplace_back(k, weight);
    };
    const bool items = !item_pool({}, false).empty();
    offer(BlockKind::fetch, 3, items);
    offer(BlockKind::wash, 2, sink_ && !item_pool(Capability::washable, true).empty());
    offer(BlockKind::toggle, 2, !toggle_pool().empty());
    offer(BlockKind::clean, 2, !receptacle_pool().empty());
    offer(BlockKind::cut, 2, knife_ && !used_.contains(*knife_) && !item_pool(Capability::sliceable, false).empty());
    if (!helpful) offer(BlockKind::filler, 3, items);
    return out;
  }

  BlockKind choose(const std::vector<std::pair<BlockKind, int>>& opts) {
    int total = 0;
    for (const auto& [k, w] : opts) total += w;
    auto r = static_cast<int>(rng_.below(static_cast<std::size_t>(total)));
    for (const auto& [k, w] : opts) {
      if (r < w) return k;
      r -= w;
    }
    return opts.back().first;
  }

  Block build(BlockKind kind) {
    const auto& w0 = scene_.initial_world();
    auto name = [&](int o) { return std::string(scene_.object_name(o)); };
    auto home = [&](int o) { return w0.location[static_cast<std::size_t>(o)]; };
    Block b;
    switch (kind) {
      case BlockKind::fetch: {
        const int x = take(*pick_item({}, false));
        const int y = random_receptacle({home(x)});
        b.steps = {"find_" + name(x), "bring_" + name(x) + "_to_" + name(y)};
        b.helper = b.steps[1];
        break;
      }
      case BlockKind::wash: {
        const int x = take(*pick_item(Capability::washable, true));
        b.steps = {"find_" + name(x), "wash_" + name(x)};
        b.helper = b.steps[1];
        break;
      }
      case BlockKind::toggle: {
        const int x = take(*pick_toggle());
        b.steps = {"find_" + name(x), "toggle_" + name(x)};
        b.helper = b.steps[1];
        break;
      }
      case BlockKind::clean: {
        const int y = take(*pick_receptacle());
        b.steps = {"find_" + name(y), "clean_" + name(y)};
        b.helper = b.steps[1];
        break;
      }
      case BlockKind::cut: {
        const int x = take(*pick_item(Capability::sliceable, false));
        const int k = take(*knife_);
        const int y = random_receptacle({home(x), home(k)});
        const std::string to = "_to_" + name(y);
        b.steps = {"find_" + name(x), "bring_" + name(x) + to, "find_" + name(k), "bring_" + name(k) + to,
                   "cut_" + name(x)};
        b.helper = b.steps[3];
        b.offset = 2;
        break;
      }
      case BlockKind::filler: {
        const int x = take(*pick_item({}, false));
        b.steps = {"find_" + name(x)};
        break;
      }
    }
    return b;
  }

 private:
  std::optional<int> pick_item(std::optional<Capability> cap, bool away_from_sink) const {
    return pick(item_pool(cap, away_from_sink));
  }
  std::optional<int> pick_toggle() const { return pick(toggle_pool()); }
  std::optional<int> pick_receptacle() const { return pick(receptacle_pool()); }

  std::optional<int> pick(const std::vector<int>& pool) const {
    if (pool.empty()) return std::nullopt;
    return pool[rng_.below(pool.size())];
  }

  // Unused items with the capability; `away_from_sink` excludes items whose
  // home is the sink.
  std::vector<int> item_pool(std::optional<Capability> cap, bool away_from_sink) const {
    std::vector<int> pool;
    for (int o : items_) {
      if (used_.contains(o) || (knife_ && o == *knife_)) continue;
      if (cap && !scene_.has(o, *cap)) continue;
      if (away_from_sink && sink_ && scene_.initial_world().location[static_cast<std::size_t>(o)] == *sink_) continue;
      pool.push_back(o);
    }
    return pool;
  }

  std::vector<int> toggle_pool() const {
    std::vector<int> pool;
    for (int o = 0; o < static_cast<int>(scene_.num_objects()); ++o) {
      if (scene_.has(o, Capability::toggleable) && !used_.contains(o)) pool.push_back(o);
    }
    return pool;
  }

  std::vector<int> receptacle_pool() const {
    std::vector<int> pool;
    for (int o : receptacles_) {
      if (!used_.contains(o) && !scene_.has(o, Capability::toggleable)) pool.push_back(o);
    }
    return pool;
  }

  int random_receptacle(std::initializer_list<int> avoid) const {
    std::vector<int> pool;
    for (int o : receptacles_) {
      if (std::find(avoid.begin(), avoid.end(), o) == avoid.end()) pool.push_back(o);
    }
    return pool[rng_.below(pool.size())];
  }

  int take(int o) {
    used_.insert(o);
    return o;
  }

  const SceneModel& scene_;
  Rng& rng_;
  std::vector<int> items_, receptacles_;
  std::optional<int> sink_, knife_;
  std::set<int> used_;
};

std::set<int> objects_of(const SceneModel& scene, const std::vector<ActionToken>& tokens) {
  std::set<int> out;
  for (const auto& t : tokens) {
    if (const BoundAction* a = scene.bind(t)) {
      for (std::size_t p = 0; p < a->tmpl->params.size(); ++p) out.insert(a->params[p]);
    }
  }
  return out;
}

// A candidate is a distractor when no single-step assistance with it saves
// the human anything.
bool never_helps(const EpisodeRunner& runner, const ActionToken& token, std::size_t steps) {
  for (std::size_t s = 0; s < steps; ++s) {
    if (runner.assisted({s, token}).hss > 0) return false;
  }
  return true;
}

struct Attempt {
  Episode episode;
  bool ok = false;
};

Attempt attempt_episode(const GenConfig& cfg, const SceneModel& scene, std::size_t n_labels, Rng& rng,
                        const std::string& id) {
  Attempt out;
  Episode& ep = out.episode;
  ep.episode_id = id;
  ep.scene = scene.scene();

  EpisodeBuilder builder(scene, rng);
  std::size_t budget = std::max(rng.between(cfg.min_steps, cfg.max_steps), 2 * n_labels);
  std::vector<Block> blocks;
  for (std::size_t k = 0; k < n_labels; ++k) {
    const std::size_t reserve = 2 * (n_labels - k - 1);
    const auto opts = builder.options(budget - reserve, true);
    if (opts.empty()) return out;
    Block b = builder.build(builder.choose(opts));
    b.planted = true;
    budget -= b.steps.size();
    blocks.push_back(std::move(b));
  }
  while (budget > 0) {
    const auto opts = builder.options(budget, false);
    if (opts.empty()) break;
    Block b = builder.build(builder.choose(opts));
    budget -= b.steps.size();
    blocks.push_back(std::move(b));
  }
  rng.shuffle(blocks);

  std::vector<ActionToken> helpers;
  for (const auto& b : blocks) {
    if (b.planted) {
      ep.oracle_labels.push_back({ep.human_task_seq.size() + b.offset, b.helper});
      helpers.push_back(b.helper);
    }
    ep.human_task_seq.insert(ep.human_task_seq.end(), b.steps.begin(), b.steps.end());
  }
  if (ep.human_task_seq.size() < cfg.min_steps) return out;

  std::optional<EpisodeRunner> runner;
  try {
    runner.emplace(scene, ep);
  } catch (const Error&) {
    return out;
  }
  if (!runner->unassisted().success) return out;
  for (const auto& label : ep.oracle_labels) {
    const auto r = runner->assisted({label.human_step_idx, label.best_robot_action});
    if (r.hss < 1 || !r.success || r.robot_abandoned ||
        !is_subsequence(r.human_trace, runner->unassisted().human_trace)) {
      return out;
    }
  }

  // Distractors: a share tied to the episode's own objects, the rest drawn
  // from the whole scene vocabulary.
  const std::size_t vocab_size = rng.between(cfg.min_vocab, cfg.max_vocab);
  const std::size_t n_distractors = vocab_size - 1 - helpers.size();
  const auto mine = objects_of(scene, ep.human_task_seq);
  std::vector<ActionToken> related, unrelated;
  for (const auto& t : scene.actions()) {
    if (std::find(helpers.begin(), helpers.end(), t) != helpers.end()) continue;
    const auto objs = objects_of(scene, {t});
    const bool touches = std::any_of(objs.begin(), objs.end(), [&](int o) { return mine.contains(o); });
    (touches ? related : unrelated).push_back(t);
  }
  rng.shuffle(related);
  rng.shuffle(unrelated);

  std::vector<ActionToken> chosen;
  const auto related_quota =
      static_cast<std::size_t>(std::lround(cfg.related_share * static_cast<double>(n_distractors)));
  auto draw = [&](std::vector<ActionToken>& pool, std::size_t& cursor, std::size_t want) {
    while (want > 0 && cursor < pool.size()) {
      const auto& t = pool[cursor++];
      if (never_helps(*runner, t, ep.num_steps())) {
        chosen.push_back(t);
        --want;
      }
    }
  };
  std::size_t rc = 0, uc = 0;
  draw(related, rc, related_quota);
  draw(unrelated, uc, n_distractors - chosen.size());
  draw(related, rc, n_distractors - chosen.size());
  if (chosen.size() < n_distractors) {
    fail(ErrorCode::VocabTooSmall, std::string(to_string(scene.scene())) + " cannot supply " +
                                       std::to_string(n_distractors) + " distractors for " + id);
  }

  ep.robot_vocab = helpers;
  ep.robot_vocab.insert(ep.robot_vocab.end(), chosen.begin(), chosen.end());
  ep.robot_vocab.emplace_back(kNoOp);
  rng.shuffle(ep.robot_vocab);
  out.ok = true;
  return out;
}

}  // namespace

void GenConfig::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorCode::InvalidConfig, "gen: " + m); };
  double sum = 0.0;
  for (double f : label_mix) {
    if (!(f >= 0.0)) bad("label_mix entries must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) bad("label_mix must sum to 1");
  if (min_steps < 1 || min_steps > max_steps) bad("need 1 <= min_steps <= max_steps");
  if (label_mix[1] > 0 && max_steps < 4) bad("two-label episodes need max_steps >= 4");
  if (min_vocab < 2 || min_vocab > max_vocab) bad("need 2 <= min_vocab <= max_vocab");
  if (label_mix[1] > 0 && min_vocab < 3) bad("two-label episodes need min_vocab >= 3");
  if (!(related_share >= 0.0 && related_share <= 1.0)) bad("related_share must lie in [0, 1]");
  if (max_attempts == 0) bad("max_attempts must be positive");
}

std::array<std::size_t, 3> stratified_counts(std::size_t n, const std::array<double, 3>& mix) {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rest{};
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double exact = mix[k] * static_cast<double>(n);
    counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rest[k] = exact - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  while (assigned < n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 3; ++k) {
      if (rest[k] > rest[best]) best = k;
    }
    ++counts[best];
    rest[best] = -1.0;
    ++assigned;
  }
  return counts;
}

Episode generate_episode(const GenConfig& config, const SceneModel& scene, std::size_t n_labels,
                         std::uint64_t seed, std::string episode_id) {
  Rng rng(seed);
  for (std::size_t a = 0; a < config.max_attempts; ++a) {
    auto attempt = attempt_episode(config, scene, n_labels, rng, episode_id);
    if (attempt.ok) return std::move(attempt.episode);
  }
  fail(ErrorCode::InfeasibleTemplate, "no valid " + std::to_string(n_labels) + "-label " +
                                          std::string(to_string(scene.scene())) + " episode after " +
                                          std::to_string(config.max_attempts) + " attempts");
}

Corpus generate_corpus(const GenConfig& config, const SimData& sim) {
  config.validate();
  const auto counts = stratified_counts(config.n_episodes, config.label_mix);
  // label class k carries (k + 1) % 3 labels: one, two, zero
  std::vector<std::pair<Scene, std::size_t>> plan;
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < counts[k]; ++i) plan.emplace_back(kAllScenes[i % kAllScenes.size()], (k + 1) % 3);
  }
  Rng master(config.seed);
  master.shuffle(plan);

  Corpus corpus;
  corpus.episodes.reserve(plan.size());
  for (std::size_t i = 0; i < plan.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "ep-%05zu", i);
    const std::uint64_t sub_seed = mix64(config.seed ^ mix64(i + 1));
    corpus.episodes.push_back(generate_episode(config, sim.scene(plan[i].first), plan[i].second, sub_seed, id));
  }
  return corpus;
}

std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) {
    fail(ErrorCode::InvalidConfig, "split fractions must be non-negative and sum to 1");
  }
  if (corpus.episodes.empty()) fail(ErrorCode::EmptyStratum, "cannot stratify an empty corpus");

  std::map<std::pair<int, std::size_t>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < corpus.episodes.size(); ++i) {
    const auto& ep = corpus.episodes[i];
    cells[{static_cast<int>(ep.scene), ep.oracle_labels.size()}].push_back(i);
  }
  std::vector<bool> to_train(corpus.episodes.size(), false);
  for (auto& [key, members] : cells) {
    Rng rng(seed ^ mix64((static_cast<std::uint64_t>(key.first) << 8) | key.second));
    rng.shuffle(members);
    const auto n_train = static_cast<std::size_t>(
        std::floor(train_fraction * static_cast<double>(members.size()) + 0.5));
    for (std::size_t j = 0; j < n_train; ++j) to_train[members[j]] = true;
  }
  Corpus train, val;
  train.split = Split::train;
  val.split = Split::val;
  for (std::size_t i = 0; i < corpus.episodes.size(); ++i) {
    (to_train[i] ? train : val).episodes.push_back(corpus.episodes[i]);
  }
  return {std::move(train), std::move(val)};
}

}  // namespace niab
