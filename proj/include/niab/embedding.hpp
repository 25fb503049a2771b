#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "niab/episode.hpp"

namespace niab {

using Vec = Eigen::VectorXd;

// Token vectors loaded from (or destined for) a NIAB-EMB1 file.
class EmbeddingTable {
 public:
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  // Vectors are stored as f32 on disk, so values are rounded on insert.
  void add(std::string token, const Vec& v);
  bool contains(std::string_view token) const noexcept;
  // Throws TokenMissing.
  const Vec& at(std::string_view token) const;

 private:
  std::size_t dim_;
  std::vector<std::string> tokens_;
  std::vector<Vec> vectors_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

inline constexpr std::string_view kTableMagic = "NIAB-EMB1";

// Little-endian: magic, u32 dim, u32 count, then per token u16 byte length,
// the bytes, and dim f32 values. Any deviation raises BadTableFile.
EmbeddingTable parse_table(std::string_view bytes);
std::string serialize_table(const EmbeddingTable& table);
EmbeddingTable read_table(const std::filesystem::path& path);
void write_table(const std::filesystem::path& path, const EmbeddingTable& table);

class Embedder {
 public:
  // Signed feature hashing of character trigrams and '_'-separated words,
  // L2-normalized.
  static Embedder hashing(std::size_t dim = 64, std::uint64_t seed = 0);
  static Embedder table(std::shared_ptr<const EmbeddingTable> table);
  // "hashing" or "table:<path>".
  static Embedder from_spec(std::string_view spec, std::size_t hashing_dim, std::uint64_t seed);

  std::size_t dim() const noexcept { return dim_; }
  Vec embed(std::string_view token) const;
  std::string describe() const;

 private:
  Embedder() = default;
  std::size_t dim_ = 0;
  std::uint64_t seed_ = 0;
  std::shared_ptr<const EmbeddingTable> table_;
};

// Throws ZeroVector when either input has zero norm.
double cosine(const Vec& u, const Vec& v);

struct ScoredCandidate {
  std::size_t index = 0;  // position in robot_vocab
  double similarity = 0.0;

  friend bool operator==(const ScoredCandidate&, const ScoredCandidate&) = default;
};

struct RetrievalResult {
  std::vector<std::vector<ScoredCandidate>> per_step_topk;
  std::vector<ActionToken> episode_candidates;
  std::vector<std::size_t> candidate_vocab_index;  // parallel to episode_candidates
};

// Per-step top-K plus an episode list: the K_ep best vocabulary entries by
// max-over-steps similarity, then no_op, then `force_include`, each appended
// only if absent. Ties break towards the lower vocabulary index.
RetrievalResult retrieve(const Episode& episode, const Embedder& embedder, std::size_t k, std::size_t k_ep,
                         const std::optional<ActionToken>& force_include = std::nullopt);

}  // namespace niab
