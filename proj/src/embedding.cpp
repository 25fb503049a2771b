#include "niab/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "niab/error.hpp"
#include "niab/util.hpp"

namespace niab {

namespace {

[[noreturn]] void bad_table(const std::string& msg) { fail(ErrorCode::BadTableFile, msg); }

void add_feature(Vec& v, std::string_view feature, std::uint64_t basis) {
  const std::uint64_t h = mix64(fnv1a64(feature, basis));
  const auto bucket = static_cast<Eigen::Index>(h % static_cast<std::uint64_t>(v.size()));
  v[bucket] += (h >> 63) ? -1.0 : 1.0;
}

}  // namespace

void EmbeddingTable::add(std::string token, const Vec& v) {
  if (static_cast<std::size_t>(v.size()) != dim_) {
    fail(ErrorCode::ShapeMismatch, "vector for '" + token + "' has dim " + std::to_string(v.size()));
  }
  if (token.empty() || token.size() > 0xFFFF) bad_table("token length must be 1..65535 bytes");
  if (!v.allFinite()) bad_table("non-finite vector for '" + token + "'");
  Vec stored = v.cast<float>().cast<double>();
  if (stored.squaredNorm() == 0.0) fail(ErrorCode::ZeroVector, "zero vector for '" + token + "'");
  if (!index_.emplace(token, tokens_.size()).second) bad_table("duplicate token '" + token + "'");
  tokens_.push_back(std::move(token));
  vectors_.push_back(std::move(stored));
}

bool EmbeddingTable::contains(std::string_view token) const noexcept { return index_.find(token) != index_.end(); }

const Vec& EmbeddingTable::at(std::string_view token) const {
  const auto it = index_.find(token);
  if (it == index_.end()) fail(ErrorCode::TokenMissing, "no vector for '" + std::string(token) + "'");
  return vectors_[it->second];
}

EmbeddingTable parse_table(std::string_view bytes) {
  ByteReader in(bytes);
  std::string_view magic;
  if (!in.raw(kTableMagic.size(), magic) || magic != kTableMagic) bad_table("bad magic");
  std::uint32_t dim = 0, count = 0;
  if (!in.u32(dim) || !in.u32(count)) bad_table("truncated header");
  if (dim == 0) bad_table("dim must be positive");
  // Every record needs at least 3 + 4*dim bytes; check before allocating.
  const std::uint64_t min_record = 3 + 4 * static_cast<std::uint64_t>(dim);
  if (static_cast<std::uint64_t>(count) * min_record > in.remaining()) bad_table("header promises more data than present");
  EmbeddingTable table(dim);
  Vec v(count > 0 ? dim : 0);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len = 0;
    std::string_view token;
    if (!in.u16(len) || len == 0 || !in.raw(len, token)) bad_table("truncated or empty token " + std::to_string(i));
    for (std::uint32_t d = 0; d < dim; ++d) {
      float f = 0.0F;
      if (!in.f32(f)) bad_table("truncated vector for token " + std::to_string(i));
      v[d] = f;
    }
    try {
      table.add(std::string(token), v);
    } catch (const Error& e) {
      bad_table(e.what());
    }
  }
  if (in.remaining() != 0) bad_table(std::to_string(in.remaining()) + " trailing bytes");
  return table;
}

std::string serialize_table(const EmbeddingTable& table) {
  ByteWriter out;
  out.raw(kTableMagic);
  out.u32(static_cast<std::uint32_t>(table.dim()));
  out.u32(static_cast<std::uint32_t>(table.size()));
  for (const auto& t : table.tokens()) {
    out.u16(static_cast<std::uint16_t>(t.size()));
    out.raw(t);
    for (double x : table.at(t)) out.f32(static_cast<float>(x));
  }
  return out.take();
}

EmbeddingTable read_table(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const Error& e) {
    bad_table(e.what());
  }
  return parse_table(bytes);
}

void write_table(const std::filesystem::path& path, const EmbeddingTable& table) {
  write_file(path, serialize_table(table));
}

Embedder Embedder::hashing(std::size_t dim, std::uint64_t seed) {
  if (dim == 0) fail(ErrorCode::InvalidConfig, "hashing dim must be positive");
  Embedder e;
  e.dim_ = dim;
  e.seed_ = seed;
  return e;
}

Embedder Embedder::table(std::shared_ptr<const EmbeddingTable> table) {
  Embedder e;
  e.dim_ = table->dim();
  e.table_ = std::move(table);
  return e;
}

Embedder Embedder::from_spec(std::string_view spec, std::size_t hashing_dim, std::uint64_t seed) {
  if (spec == "hashing") return hashing(hashing_dim, seed);
  if (spec.starts_with("table:") && spec.size() > 6) {
    return table(std::make_shared<const EmbeddingTable>(read_table(std::string(spec.substr(6)))));
  }
  fail(ErrorCode::InvalidConfig, "embedder must be 'hashing' or 'table:<path>', got '" + std::string(spec) + "'");
}

Vec Embedder::embed(std::string_view token) const {
  if (table_) return table_->at(token);
  Vec v = Vec::Zero(static_cast<Eigen::Index>(dim_));
  const std::uint64_t basis = fnv1a64("niab-hash", 0xcbf29ce484222325ULL ^ mix64(seed_));
  const std::string padded = "#" + std::string(token) + "#";
  for (std::size_t i = 0; i + 3 <= padded.size(); ++i) add_feature(v, "c:" + padded.substr(i, 3), basis);
  std::size_t start = 0;
  while (start <= token.size()) {
    const std::size_t end = std::min(token.find('_', start), token.size());
    add_feature(v, "w:" + std::string(token.substr(start, end - start)), basis);
    start = end + 1;
  }
  const double n = v.norm();
  if (n == 0.0) fail(ErrorCode::ZeroVector, "hashed features of '" + std::string(token) + "' cancel out");
  return v / n;
}

std::string Embedder::describe() const {
  if (table_) return "table(dim=" + std::to_string(dim_) + ")";
  return "hashing(dim=" + std::to_string(dim_) + ",seed=" + std::to_string(seed_) + ")";
}

double cosine(const Vec& u, const Vec& v) {
  if (u.size() != v.size()) fail(ErrorCode::ShapeMismatch, "cosine of vectors with different dims");
  const double nu = u.norm(), nv = v.norm();
  if (nu == 0.0 || nv == 0.0) fail(ErrorCode::ZeroVector, "cosine of a zero vector");
  return std::clamp(u.dot(v) / (nu * nv), -1.0, 1.0);
}

RetrievalResult retrieve(const Episode& ep, const Embedder& embedder, std::size_t k, std::size_t k_ep,
                         const std::optional<ActionToken>& force_include) {
  if (k < 1) fail(ErrorCode::InvalidConfig, "retrieval K must be >= 1");
  if (k_ep < 2) fail(ErrorCode::InvalidConfig, "retrieval K_ep must be >= 2");
  if (ep.robot_vocab.empty()) fail(ErrorCode::EmptyVocab, "episode " + ep.episode_id + " has no robot_vocab");

  const std::size_t n = ep.robot_vocab.size();
  std::vector<Vec> actions;
  actions.reserve(n);
  for (const auto& a : ep.robot_vocab) actions.push_back(embedder.embed(a));

  auto by_score = [](const ScoredCandidate& a, const ScoredCandidate& b) {
    return a.similarity != b.similarity ? a.similarity > b.similarity : a.index < b.index;
  };

  RetrievalResult out;
  std::vector<double> best(n, -std::numeric_limits<double>::infinity());
  for (const auto& step : ep.human_task_seq) {
    const Vec h = embedder.embed(step);
    std::vector<ScoredCandidate> row(n);
    for (std::size_t c = 0; c < n; ++c) {
      row[c] = {c, cosine(h, actions[c])};
      best[c] = std::max(best[c], row[c].similarity);
    }
    std::sort(row.begin(), row.end(), by_score);
    row.resize(std::min(k, n));
    out.per_step_topk.push_back(std::move(row));
  }

  std::vector<ScoredCandidate> pooled(n);
  for (std::size_t c = 0; c < n; ++c) pooled[c] = {c, best[c]};
  std::sort(pooled.begin(), pooled.end(), by_score);
  auto push = [&](std::size_t idx) {
    if (std::find(out.candidate_vocab_index.begin(), out.candidate_vocab_index.end(), idx) !=
        out.candidate_vocab_index.end()) {
      return;
    }
    out.candidate_vocab_index.push_back(idx);
    out.episode_candidates.push_back(ep.robot_vocab[idx]);
  };
  for (std::size_t i = 0; i < std::min(k_ep, n); ++i) push(pooled[i].index);
  if (const auto noop = ep.vocab_index(kNoOp)) push(*noop);
  if (force_include) {
    const auto idx = ep.vocab_index(*force_include);
    if (!idx) fail(ErrorCode::ActionNotInVocab, "'" + *force_include + "' is not in robot_vocab");
    push(*idx);
  }
  return out;
}

}  // namespace niab
