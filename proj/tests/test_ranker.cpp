#include <doctest.h>

#include <cmath>
#include <numeric>

#include "niab/error.hpp"
#include "niab/ranker.hpp"
#include "oracles.hpp"

using namespace niab;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Io;
}

Mat rows(std::initializer_list<std::initializer_list<double>> r) {
  Mat m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : r) {
    Eigen::Index j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

RankerConfig mid_config() {
  RankerConfig c;
  c.input_dim = 64;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 4;
  c.mlp_hidden = 24;
  return c;
}

}  // namespace

TEST_CASE("positional encoding") {
  const Mat pe = positional_encoding(3, 4);
  CHECK(pe(0, 0) == 0.0);
  CHECK(pe(0, 1) == 1.0);
  CHECK(pe(1, 0) == doctest::Approx(0.841471).epsilon(1e-6));
  CHECK(pe(1, 1) == doctest::Approx(0.540302).epsilon(1e-6));
  CHECK(pe(2, 2) == doctest::Approx(std::sin(0.02)).epsilon(1e-12));
  CHECK(positional_encoding(std::vector<std::size_t>{1}, 4).row(0) == pe.row(1));
  CHECK(code_of([] { positional_encoding(2, 5); }) == ErrorCode::OddDim);
  RankerConfig odd;
  odd.d_model = 30;
  odd.n_heads = 3;
  CHECK_NOTHROW(odd.validate());
  odd.d_model = 27;
  CHECK(code_of([&] { odd.validate(); }) == ErrorCode::OddDim);
}

TEST_CASE("scaled dot-product attention on a 2x2 case") {
  const Mat q = rows({{1, 0}, {0, 2}});
  const Mat k = rows({{1, 0}, {0, 1}});
  const Mat v = rows({{1, 2}, {3, 4}});
  Mat w;
  const Mat out = attention(q, k, v, {true, true}, &w);
  // row 0 scores (1/√2, 0); row 1 scores (0, 2/√2)
  const double a = 1.0 / (1.0 + std::exp(-1.0 / std::sqrt(2.0)));
  const double b = 1.0 / (1.0 + std::exp(-2.0 / std::sqrt(2.0)));
  CHECK(w(0, 0) == doctest::Approx(a).epsilon(1e-12));
  CHECK(w(1, 1) == doctest::Approx(b).epsilon(1e-12));
  CHECK(out(0, 0) == doctest::Approx(a * 1 + (1 - a) * 3).epsilon(1e-12));
  CHECK(out(1, 1) == doctest::Approx((1 - b) * 2 + b * 4).epsilon(1e-12));
  for (Eigen::Index i = 0; i < w.rows(); ++i) CHECK(std::abs(w.row(i).sum() - 1.0) < 1e-12);

  // one live key returns its value row exactly
  const Mat single = attention(q, k, v, {false, true});
  CHECK(single.row(0) == v.row(1));
  CHECK(single.row(1) == v.row(1));
  CHECK(code_of([&] { attention(q, k, v, {false, false}); }) == ErrorCode::AllKeysMasked);
}

TEST_CASE("forward matches a straight-line reference") {
  for (HeadMode head : {HeadMode::joint, HeadMode::action_only}) {
    const RankerConfig cfg = oracle::tiny_config(head);
    const auto params = RankerParams::init(cfg, 9);
    Rng rng(4);
    const std::vector<Example> batch = {oracle::random_example(rng, 3, 4, 8), oracle::random_example(rng, 2, 5, 8)};
    const auto fwd = forward(params, cfg, batch);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto ref = oracle::forward(params, cfg, batch[b]);
      REQUIRE(fwd.logits[b].rows() == static_cast<Eigen::Index>(ref.size()));
      REQUIRE(fwd.logits[b].cols() == static_cast<Eigen::Index>(ref[0].size()));
      for (std::size_t s = 0; s < ref.size(); ++s) {
        for (std::size_t c = 0; c < ref[s].size(); ++c) {
          CHECK(std::abs(fwd.logits[b](static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(c)) - ref[s][c]) < 1e-9);
        }
      }
    }
  }
}

TEST_CASE("batching does not mix examples") {
  const RankerConfig cfg = mid_config();
  const auto params = RankerParams::init(cfg, 1);
  Rng rng(2);
  std::vector<Example> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(oracle::random_example(rng, 2 + i, 7 - i, 64));
  const auto all = forward(params, cfg, batch);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto one = forward(params, cfg, {batch[b]});
    CHECK((one.logits[0] - all.logits[b]).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("candidate permutation permutes logit columns exactly") {
  for (const RankerConfig& cfg : {mid_config(), RankerConfig{}}) {
    const auto params = RankerParams::init(cfg, 3);
    Rng rng(8);
    const Example ex = oracle::random_example(rng, 9, 22, 64);
    std::vector<Eigen::Index> perm(22);
    std::iota(perm.begin(), perm.end(), 0);
    Rng prng(1);
    prng.shuffle(perm);
    Example px = ex;
    for (Eigen::Index j = 0; j < 22; ++j) px.cands.row(j) = ex.cands.row(perm[static_cast<std::size_t>(j)]);
    const auto a = forward(params, cfg, {ex}).logits[0];
    const auto b = forward(params, cfg, {px}).logits[0];
    for (Eigen::Index j = 0; j < 22; ++j) CHECK(b.col(j) == a.col(perm[static_cast<std::size_t>(j)]));
  }
}

TEST_CASE("masked rows do not influence unmasked logits") {
  const RankerConfig cfg = mid_config();
  const auto params = RankerParams::init(cfg, 5);
  Rng rng(6);
  PaddedInput in;
  in.batch = 2;
  in.steps = 5;
  in.cands = 6;
  in.dim = 64;
  in.h.resize(2 * 5 * 64);
  in.a.resize(2 * 6 * 64);
  for (auto& v : in.h) v = rng.uniform(-1, 1);
  for (auto& v : in.a) v = rng.uniform(-1, 1);
  in.step_mask = {1, 1, 0, 1, 0, 1, 1, 1, 1, 1};
  in.cand_mask = {1, 0, 1, 1, 1, 0, 1, 1, 1, 1, 1, 1};
  const LogitMatrix base = forward_padded(params, cfg, in);

  PaddedInput flipped = in;
  for (std::size_t d = 0; d < 64; ++d) {
    flipped.h[(0 * 5 + 2) * 64 + d] = 1e3;
    flipped.h[(0 * 5 + 4) * 64 + d] = -7.0;
    flipped.a[(0 * 6 + 1) * 64 + d] = 42.0;
    flipped.a[(0 * 6 + 5) * 64 + d] = std::nan("");
  }
  const LogitMatrix other = forward_padded(params, cfg, flipped);
  CHECK(other.values == base.values);
  CHECK(base.at(0, 2, 0) == kMaskedLogit);
  CHECK(base.at(0, 0, 1) == kMaskedLogit);
  CHECK(base.at(0, 0, 0) != kMaskedLogit);

  // compact equivalent: drop masked rows, keep original positions
  Example ex;
  ex.positions = {0, 1, 3};
  ex.steps.resize(3, 64);
  ex.cands.resize(4, 64);
  const std::size_t srows[] = {0, 1, 3}, crows[] = {0, 2, 3, 4};
  for (int r = 0; r < 3; ++r) {
    for (int d = 0; d < 64; ++d) ex.steps(r, d) = in.h[srows[r] * 64 + static_cast<std::size_t>(d)];
  }
  for (int r = 0; r < 4; ++r) {
    for (int d = 0; d < 64; ++d) ex.cands(r, d) = in.a[crows[r] * 64 + static_cast<std::size_t>(d)];
  }
  const auto compact = forward(params, cfg, {ex}).logits[0];
  CHECK(std::abs(compact(2, 3) - base.at(0, 3, 4)) < 1e-12);

  in.step_mask = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
  CHECK(code_of([&] { forward_padded(params, cfg, in); }) == ErrorCode::AllKeysMasked);
}

TEST_CASE("activations stay finite for inputs up to magnitude 10") {
  const RankerConfig cfg = mid_config();
  const auto params = RankerParams::init(cfg, 11);
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    const auto fwd = forward(params, cfg, {oracle::random_example(rng, 12, 22, 64, 10.0)});
    CHECK(fwd.logits[0].allFinite());
  }
}

TEST_CASE("shape errors") {
  const RankerConfig cfg = mid_config();
  const auto params = RankerParams::init(cfg, 1);
  Rng rng(1);
  CHECK(code_of([&] { forward(params, cfg, {oracle::random_example(rng, 2, 2, 63)}); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { forward(params, cfg, {oracle::random_example(rng, 65, 2, 64)}); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { forward(params, cfg, {oracle::random_example(rng, 2, 33, 64)}); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { forward(params, cfg, {oracle::random_example(rng, 0, 3, 64)}); }) == ErrorCode::AllKeysMasked);
}

TEST_CASE("checkpoint round trip and rejection") {
  RankerConfig cfg = mid_config();
  cfg.head = HeadMode::action_only;
  Checkpoint ck{cfg, {}, RankerParams::init(cfg, 2)};
  ck.candidates.retrieval = false;
  ck.candidates.k_ep = 12;
  ck.candidates.embedder = "table:/tmp/x.emb";
  ck.candidates.hashing_seed = 0x1234'5678'9abc'def0ULL;
  const std::string bytes = serialize_checkpoint(ck);
  CHECK(bytes.substr(0, 10) == "NIAB-CKPT1");
  const Checkpoint back = parse_checkpoint(bytes);
  CHECK(back.config == cfg);
  CHECK(back.candidates == ck.candidates);
  std::vector<const Mat*> a, b;
  ck.params.visit([&](const std::string&, const Mat& m) { a.push_back(&m); });
  back.params.visit([&](const std::string&, const Mat& m) { b.push_back(&m); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(b[i]->isApprox(a[i]->cast<float>().cast<double>(), 0.0));
  }
  CHECK(serialize_checkpoint(back) == bytes);

  CHECK(code_of([&] { parse_checkpoint(bytes.substr(0, bytes.size() - 3)); }) == ErrorCode::BadCheckpoint);
  CHECK(code_of([&] { parse_checkpoint(bytes + "z"); }) == ErrorCode::BadCheckpoint);
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(code_of([&] { parse_checkpoint(bad_magic); }) == ErrorCode::BadCheckpoint);
  // a different d_model changes every tensor shape
  RankerConfig other = cfg;
  other.d_model = 16;
  Checkpoint wrong{other, {}, RankerParams::init(other, 2)};
  std::string mixed = serialize_checkpoint(wrong);
  mixed.replace(10 + 4, 4, bytes.substr(10 + 4, 4));
  CHECK(code_of([&] { parse_checkpoint(mixed); }) == ErrorCode::BadCheckpoint);
}
