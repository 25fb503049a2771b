#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "niab/episode.hpp"
#include "niab/simulator.hpp"

namespace niab {

struct GenConfig {
  std::uint64_t seed = 42;
  std::size_t n_episodes = 2000;
  std::array<double, 3> label_mix = {0.75, 0.20, 0.05};  // one-, two-, zero-label
  std::size_t min_steps = 4;
  std::size_t max_steps = 12;
  std::size_t min_vocab = 16;  // |robot_vocab|, no_op included
  std::size_t max_vocab = 48;
  double related_share = 0.4;  // distractors drawn from the episode's own objects
  std::size_t max_attempts = 64;

  void validate() const;
};

// Exact per-class counts for `n` items: floor shares plus largest remainders,
// ties going to the lower class index.
std::array<std::size_t, 3> stratified_counts(std::size_t n, const std::array<double, 3>& mix);

Corpus generate_corpus(const GenConfig& config, const SimData& sim);

// One episode; exposed so tests can probe single draws.
Episode generate_episode(const GenConfig& config, const SceneModel& scene, std::size_t n_labels,
                         std::uint64_t seed, std::string episode_id);

// Stratified jointly on (scene, label count). Each cell of n episodes sends
// round(train_fraction * n) to the first fold; both folds keep input order.
std::pair<Corpus, Corpus> split_corpus(const Corpus& corpus, double train_fraction, std::uint64_t seed);

}  // namespace niab
