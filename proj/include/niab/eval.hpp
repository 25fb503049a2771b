#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "niab/episode.hpp"
#include "niab/ranker.hpp"
#include "niab/simulator.hpp"
#include "niab/trainer.hpp"

namespace niab {

enum class Policy : std::uint8_t { model, random, cosine_top1, oracle, no_op };
std::string_view to_string(Policy p) noexcept;
Policy parse_policy(std::string_view s);

using PredictionMap = std::map<std::string, Prediction, std::less<>>;

// Argmax over a logit block; ties go to the lowest flattened index.
std::pair<std::size_t, std::size_t> argmax_flat(const Mat& logits);

// Top-1 prediction from one forward result. Under the action-only head the
// step is the argmax of the chosen candidate's head-averaged cross-attention.
Prediction decode(const Episode& ep, const std::vector<std::size_t>& cand, const Mat& logits,
                  const Mat& cross_weights, HeadMode head);

// Retrieval without teacher forcing; episodes are scored in fixed chunks.
PredictionMap predict_model(const Checkpoint& ckpt, const Corpus& corpus, EmbeddingCache& emb);

PredictionMap predict_random(const Corpus& corpus, std::uint64_t seed);
// The (step, action) pair with the highest cosine over all steps and the
// whole vocabulary.
PredictionMap predict_cosine_top1(const Corpus& corpus, EmbeddingCache& emb);
// Replays each label and keeps the one with the highest HSS (earliest on
// ties); zero-label episodes get (0, no_op).
PredictionMap predict_oracle(const Corpus& corpus, const SimData& sim);
PredictionMap predict_noop(const Corpus& corpus);

struct Units {
  std::size_t total = 0;
  std::size_t correct = 0;
  std::size_t correct_action = 0;  // action matches, step ignored
};

// Evaluation units of one episode: one per label, or one for a zero-label
// episode, scored correct iff the action is no_op.
Units score_units(const Episode& ep, const Prediction& pred);

// Throws MissingPrediction.
double selection_acc(const PredictionMap& preds, const Corpus& corpus, bool action_only_match = false);

struct EpisodeRow {
  std::string episode_id;
  Scene scene = Scene::kitchen;
  Prediction prediction;
  Units units;
  long h_human = 0;
  long h_assist = 0;
  long hss = 0;
  bool success = false;
  bool robot_abandoned = false;
};

struct EvalSummary {
  std::string policy;
  std::string corpus_id;
  std::string config_hash;
  std::size_t n_episodes = 0;
  std::size_t n_units = 0;
  double selection_acc = 0.0;
  double selection_acc_action_only = 0.0;
  double mean_hss = 0.0;
  double success_acc = 0.0;
};

struct EvalReport {
  EvalSummary summary;
  std::vector<EpisodeRow> rows;  // sorted by episode_id
};

// Runs every episode unassisted and assisted, then aggregates.
EvalReport evaluate(const PredictionMap& preds, const Corpus& corpus, const SimData& sim, std::string policy,
                    std::string config_hash);

// Aggregates from rows alone; evaluate() uses this too.
EvalSummary summarize(const std::vector<EpisodeRow>& rows, EvalSummary base);

nlohmann::ordered_json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::ordered_json& j);
// Header plus one row of summary fields.
std::string summary_csv(const EvalSummary& s);

// Content hash of a corpus, as 16 hex digits.
std::string corpus_id(const Corpus& corpus);

}  // namespace niab
