#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace niab {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Logit written to masked (step, candidate) cells.
inline constexpr double kMaskedLogit = -1e9;

enum class HeadMode : std::uint8_t { joint, action_only };

struct RankerConfig {
  std::size_t input_dim = 64;  // D
  std::size_t d_model = 256;   // D_m
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t mlp_hidden = 256;
  std::size_t max_steps = 64;
  std::size_t max_candidates = 32;
  HeadMode head = HeadMode::joint;

  std::size_t d_head() const noexcept { return d_model / n_heads; }
  std::size_t ff_hidden() const noexcept { return 4 * d_model; }
  void validate() const;

  friend bool operator==(const RankerConfig&, const RankerConfig&) = default;
};

// y = x·w + b with w: in × out and b: 1 × out.
struct Affine {
  Mat w, b;
};

struct Norm {
  Mat g, b;  // 1 × D_m
};

struct EncoderLayer {
  Affine q, k, v, o;
  Norm ln1;
  Affine ff1, ff2;
  Norm ln2;
};

struct RankerParams {
  Affine proj_h, proj_a;
  std::vector<EncoderLayer> layers;
  Affine cross_q, cross_k, cross_v, cross_o;
  Affine fc1;  // 2·D_m × mlp_hidden; rows [0, D_m) read the step, the rest the candidate
  Affine fc2;  // mlp_hidden × 1

  // Affine weights uniform in ±1/sqrt(fan_in), biases zero, norm gains one.
  static RankerParams init(const RankerConfig& config, std::uint64_t seed);
  static RankerParams zeros(const RankerConfig& config);

  // Calls f(name, tensor) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f);
  template <typename F>
  void visit(F&& f) const;

  std::size_t num_values() const;
};

// Rows are positions `positions[i]` (0-based); D_m must be even.
Mat positional_encoding(const std::vector<std::size_t>& positions, std::size_t d_model);
Mat positional_encoding(std::size_t steps, std::size_t d_model);

// softmax(Q·Kᵀ/sqrt(d_k))·V over keys with key_mask[j] set; d_k = Q.cols().
// Optionally returns the weight matrix. Throws AllKeysMasked.
Mat attention(const Mat& q, const Mat& k, const Mat& v, const std::vector<bool>& key_mask,
              Mat* weights = nullptr);

// One example with masked rows already removed. `positions` holds each
// step's original index (empty means 0..S-1).
struct Example {
  Mat steps;  // S × D
  Mat cands;  // C × D
  std::vector<std::size_t> positions;
};

struct ForwardCache;

struct ForwardResult {
  std::vector<Mat> logits;         // per example: S × C, or 1 × C for the action-only head
  std::vector<Mat> cross_weights;  // per example: C × S, averaged over heads
  std::shared_ptr<const ForwardCache> cache;  // set when requested
};

// Inverted dropout on the attention and feed-forward branches of every
// encoder layer, before each residual add. Masks are drawn from `seed` in
// packed row order. Rate 0 is the identity.
struct Dropout {
  double rate = 0.0;
  std::uint64_t seed = 0;
};

// All row-wise maps run on the rows of every example stacked together;
// attention runs per example, so no example sees another or any masked row.
ForwardResult forward(const RankerParams& params, const RankerConfig& config,
                      const std::vector<Example>& batch, bool keep_cache = false, const Dropout& dropout = {});

// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
void backward(const RankerParams& params, const RankerConfig& config, const ForwardResult& fwd,
              const std::vector<Mat>& d_logits, RankerParams& grads);

// Dense B × S × C view with masks, as consumed by the loss.
struct LogitMatrix {
  std::size_t batch = 0, steps = 0, cands = 0;
  std::vector<double> values;            // row-major [b][s][c]
  std::vector<std::uint8_t> step_mask;   // [b][s], 1 = real
  std::vector<std::uint8_t> cand_mask;   // [b][c]

  double at(std::size_t b, std::size_t s, std::size_t c) const { return values[(b * steps + s) * cands + c]; }
  bool valid(std::size_t b, std::size_t s, std::size_t c) const {
    return step_mask[b * steps + s] && cand_mask[b * cands + c];
  }
};

// Pads compact per-example logits to the batch maxima with kMaskedLogit.
LogitMatrix pad_logits(const std::vector<Mat>& logits);

// Padded inputs with arbitrary masks: H is B × S × D, A is B × C × D.
struct PaddedInput {
  std::size_t batch = 0, steps = 0, cands = 0, dim = 0;
  std::vector<double> h, a;
  std::vector<std::uint8_t> step_mask, cand_mask;
};

LogitMatrix forward_padded(const RankerParams& params, const RankerConfig& config, const PaddedInput& in);

// ---- checkpoints ------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "NIAB-CKPT1";

// What prediction needs besides the weights.
struct CandidatePolicy {
  bool retrieval = true;      // false: the first C_max vocabulary entries
  std::uint32_t k_ep = 20;
  std::string embedder = "hashing";
  std::uint32_t hashing_dim = 64;
  std::uint64_t hashing_seed = 0;

  friend bool operator==(const CandidatePolicy&, const CandidatePolicy&) = default;
};

struct Checkpoint {
  RankerConfig config;
  CandidatePolicy candidates;
  RankerParams params;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- template definitions -----------------------------------------------------

template <typename Self, typename F>
void visit_params(Self& p, F&& f) {
  auto aff = [&](const std::string& n, auto& a) {
    f(n + ".w", a.w);
    f(n + ".b", a.b);
  };
  auto norm = [&](const std::string& n, auto& a) {
    f(n + ".g", a.g);
    f(n + ".b", a.b);
  };
  aff("proj_h", p.proj_h);
  aff("proj_a", p.proj_a);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pre = "enc." + std::to_string(l) + ".";
    auto& layer = p.layers[l];
    aff(pre + "q", layer.q);
    aff(pre + "k", layer.k);
    aff(pre + "v", layer.v);
    aff(pre + "o", layer.o);
    norm(pre + "ln1", layer.ln1);
    aff(pre + "ff1", layer.ff1);
    aff(pre + "ff2", layer.ff2);
    norm(pre + "ln2", layer.ln2);
  }
  aff("cross.q", p.cross_q);
  aff("cross.k", p.cross_k);
  aff("cross.v", p.cross_v);
  aff("cross.o", p.cross_o);
  aff("mlp.fc1", p.fc1);
  aff("mlp.fc2", p.fc2);
}

template <typename F>
void RankerParams::visit(F&& f) {
  visit_params(*this, f);
}

template <typename F>
void RankerParams::visit(F&& f) const {
  visit_params(*this, f);
}

}  // namespace niab
