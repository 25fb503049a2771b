#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "niab/embedding.hpp"
#include "niab/episode.hpp"
#include "niab/ranker.hpp"

namespace niab {

enum class Ablation : std::uint8_t { full, no_retrieval, action_only };
std::string_view to_string(Ablation a) noexcept;
Ablation parse_ablation(std::string_view s);

// What a zero-label episode trains towards.
enum class ZeroLabelMode : std::uint8_t { noop_target, skip };
std::string_view to_string(ZeroLabelMode m) noexcept;
ZeroLabelMode parse_zero_label_mode(std::string_view s);

struct TrainConfig {
  double learning_rate = 3e-4;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 12;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::full;
  ZeroLabelMode zero_label = ZeroLabelMode::noop_target;
  std::size_t k_ep = 20;
  double dropout = 0.0;

  void validate() const;
};

// ---- loss -----------------------------------------------------------------

struct LossResult {
  double loss = 0.0;
  std::vector<double> grad;  // shaped like LogitMatrix::values
};

// Mean over the batch of -log softmax over each example's unmasked cells.
// targets[b] is the flat index s·cands + c. Throws TargetMasked.
LossResult ce_loss(const LogitMatrix& logits, const std::vector<std::size_t>& targets);

// ---- optimizer ------------------------------------------------------------

struct OptimizerState {
  std::vector<Mat> m, v;  // in RankerParams::visit order
  std::uint64_t t = 0;
};

OptimizerState make_optimizer_state(const RankerParams& params);

// Decoupled weight decay: θ -= lr·(m̂/(sqrt(v̂)+ε) + wd·θ).
void adamw_step(RankerParams& params, const RankerParams& grads, OptimizerState& state, const TrainConfig& cfg);

// ---- examples ---------------------------------------------------------------

// Caches token vectors so each distinct token is embedded once.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(const Embedder& embedder) : embedder_(embedder) {}
  const Vec& get(const std::string& token);
  const Embedder& embedder() const noexcept { return embedder_; }

 private:
  const Embedder& embedder_;
  std::map<std::string, Vec, std::less<>> cache_;
};

// Candidates the ranker scores for one episode, as robot_vocab indices.
// Retrieval: the episode list from retrieve(). Otherwise the first C_max
// vocabulary entries, with no_op swapped into the last slot if cut off.
std::vector<std::size_t> candidate_indices(const Episode& ep, EmbeddingCache& emb, const CandidatePolicy& policy,
                                           std::size_t c_max, const std::optional<ActionToken>& force = std::nullopt);

Example make_example(const Episode& ep, const std::vector<std::size_t>& cand, EmbeddingCache& emb);

struct TrainExample {
  std::size_t episode = 0;
  Example input;
  std::size_t target_step = 0;       // 0 under the action-only head
  std::size_t target_candidate = 0;  // index into the candidate list
};

struct ExampleStats {
  std::size_t built = 0;
  std::size_t skipped_zero_label = 0;
  std::size_t skipped_truncated = 0;  // oracle cut off by truncation
};

// One example per oracle label; zero-label episodes per cfg.zero_label.
std::vector<TrainExample> build_examples(const Corpus& corpus, EmbeddingCache& emb, const RankerConfig& rcfg,
                                         const CandidatePolicy& policy, const TrainConfig& cfg,
                                         ExampleStats* stats = nullptr);

// ---- training ---------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_selection_acc = 0.0;
  long long wall_ms = 0;
};

// Without timing the line is a pure function of the inputs and seeds.
std::string to_jsonl(const EpochRecord& r, bool with_timing = false);

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> log;
  ExampleStats stats;
};

// Per-epoch hook, e.g. for streaming the metrics log.
using EpochHook = std::function<void(const EpochRecord&)>;

// Runs one optimizer step on a batch and returns its mean loss.
double train_step(RankerParams& params, const RankerConfig& rcfg, const std::vector<const TrainExample*>& batch,
                  OptimizerState& state, const TrainConfig& cfg);

// `source` names the embedder for the checkpoint; its retrieval fields are
// overwritten from cfg. rcfg.input_dim and rcfg.head follow the embedder and
// the ablation.
TrainResult train(const Corpus& train_set, const Corpus& val_set, const Embedder& embedder, CandidatePolicy source,
                  RankerConfig rcfg, const TrainConfig& cfg, const EpochHook& hook = {});

}  // namespace niab
