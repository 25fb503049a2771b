#include <doctest.h>

#include <cmath>
#include <map>

#include "niab/error.hpp"
#include "niab/scene_gen.hpp"

using namespace niab;

namespace {

const SimData& sim() {
  static const SimData data = SimData::load(NIAB_DATA_DIR);
  return data;
}

Corpus small_corpus(std::uint64_t seed, std::size_t n) {
  GenConfig cfg;
  cfg.seed = seed;
  cfg.n_episodes = n;
  return generate_corpus(cfg, sim());
}

}  // namespace

TEST_CASE("stratified counts are exact") {
  CHECK(stratified_counts(2000, {0.75, 0.20, 0.05}) == std::array<std::size_t, 3>{1500, 400, 100});
  CHECK(stratified_counts(7, {0.75, 0.20, 0.05}) == std::array<std::size_t, 3>{5, 2, 0});
  CHECK(stratified_counts(0, {0.75, 0.20, 0.05}) == std::array<std::size_t, 3>{0, 0, 0});
  CHECK(stratified_counts(3, {1.0 / 3, 1.0 / 3, 1.0 / 3}) == std::array<std::size_t, 3>{1, 1, 1});
}

TEST_CASE("generated corpus is valid, exact in its mix, and deterministic") {
  const Corpus a = small_corpus(42, 200);
  REQUIRE(a.episodes.size() == 200);
  std::map<std::size_t, std::size_t> hist;
  for (const auto& ep : a.episodes) {
    CHECK_NOTHROW(validate_episode(ep, 0, sim().token_check()));
    ++hist[ep.oracle_labels.size()];
  }
  CHECK(hist[1] == 150);
  CHECK(hist[2] == 40);
  CHECK(hist[0] == 10);
  CHECK(serialize_corpus(a) == serialize_corpus(small_corpus(42, 200)));
  CHECK(serialize_corpus(a) != serialize_corpus(small_corpus(43, 200)));
  // parse∘serialize is the identity on generated data
  CHECK(parse_corpus(serialize_corpus(a), sim().token_check()) == a);
}

TEST_CASE("planted labels are causal and distractors never help") {
  const Corpus c = small_corpus(7, 60);
  for (const auto& ep : c.episodes) {
    const EpisodeRunner runner(sim().scene(ep.scene), ep);
    CHECK(runner.unassisted().success);
    CHECK(ep.num_steps() >= 4);
    CHECK(ep.num_steps() <= 12);
    CHECK(ep.robot_vocab.size() >= 16);
    CHECK(ep.robot_vocab.size() <= 48);
    for (const auto& l : ep.oracle_labels) {
      const auto r = runner.assisted({l.human_step_idx, l.best_robot_action});
      CHECK(r.hss >= 1);
      CHECK(r.success);
      CHECK(is_subsequence(r.human_trace, runner.unassisted().human_trace));
    }
    if (ep.oracle_labels.size() == 2) {
      const auto d = ep.oracle_labels[0].human_step_idx > ep.oracle_labels[1].human_step_idx
                         ? ep.oracle_labels[0].human_step_idx - ep.oracle_labels[1].human_step_idx
                         : ep.oracle_labels[1].human_step_idx - ep.oracle_labels[0].human_step_idx;
      CHECK(d >= 2);
    }
    for (const auto& a : ep.robot_vocab) {
      const bool planted = std::any_of(ep.oracle_labels.begin(), ep.oracle_labels.end(),
                                       [&](const OracleLabel& l) { return l.best_robot_action == a; });
      if (planted) continue;
      for (std::size_t s = 0; s < ep.num_steps(); ++s) CHECK(runner.assisted({s, a}).hss <= 0);
    }
  }
}

TEST_CASE("split is stratified, deterministic, and covers the identity case") {
  const Corpus c = small_corpus(11, 400);
  const auto [train, val] = split_corpus(c, 0.9, 5);
  CHECK(train.episodes.size() + val.episodes.size() == c.episodes.size());
  std::map<std::pair<int, std::size_t>, std::pair<std::size_t, std::size_t>> cells;
  for (const auto& ep : train.episodes) ++cells[{static_cast<int>(ep.scene), ep.oracle_labels.size()}].first;
  for (const auto& ep : val.episodes) ++cells[{static_cast<int>(ep.scene), ep.oracle_labels.size()}].second;
  for (const auto& [cell, n] : cells) {
    const double total = static_cast<double>(n.first + n.second);
    CHECK(static_cast<double>(n.first) == doctest::Approx(std::floor(0.9 * total + 0.5)));
  }
  const auto again = split_corpus(c, 0.9, 5);
  CHECK(again.first == train);
  const auto other = split_corpus(c, 0.9, 6);
  CHECK(other.first.episodes.size() == train.episodes.size());
  CHECK(other.first != train);

  const auto [all, none] = split_corpus(c, 1.0, 5);
  CHECK(all.episodes == c.episodes);
  CHECK(none.episodes.empty());
}

TEST_CASE("split and generation reject bad inputs") {
  CHECK_THROWS_AS(split_corpus(Corpus{}, 0.9, 1), Error);
  try {
    split_corpus(Corpus{}, 0.9, 1);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyStratum);
  }
  GenConfig cfg;
  cfg.label_mix = {0.5, 0.2, 0.2};
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("oversized vocabulary requests fail with VocabTooSmall") {
  GenConfig cfg;
  cfg.min_vocab = cfg.max_vocab = 500;
  try {
    generate_episode(cfg, sim().scene(Scene::bathroom), 1, 3, "ep-big");
    FAIL("expected VocabTooSmall");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::VocabTooSmall);
  }
}
