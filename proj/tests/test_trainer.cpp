#include <doctest.h>

#include <cmath>

#include "niab/error.hpp"
#include "niab/eval.hpp"
#include "niab/scene_gen.hpp"
#include "niab/trainer.hpp"
#include "oracles.hpp"

using namespace niab;

namespace {

LogitMatrix dense(std::size_t b, std::size_t s, std::size_t c) {
  LogitMatrix m;
  m.batch = b;
  m.steps = s;
  m.cands = c;
  m.values.assign(b * s * c, 0.0);
  m.step_mask.assign(b * s, 1);
  m.cand_mask.assign(b * c, 1);
  return m;
}

Mat scalar(double v) { return Mat::Constant(1, 1, v); }

}  // namespace

TEST_CASE("cross-entropy analytics") {
  LogitMatrix uni = dense(2, 4, 5);
  for (auto& v : uni.values) v = 0.37;
  const auto r = ce_loss(uni, {7, 19});
  CHECK(std::abs(r.loss - std::log(20.0)) < 1e-9);
  for (std::size_t b = 0; b < 2; ++b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < 20; ++i) sum += r.grad[b * 20 + i];
    CHECK(std::abs(sum) < 1e-9);
  }
  CHECK(r.grad[7] == doctest::Approx((1.0 / 20 - 1.0) / 2));

  LogitMatrix hot = dense(1, 2, 2);
  hot.values[3] = 1e9;
  CHECK(ce_loss(hot, {3}).loss == doctest::Approx(0.0));
}

TEST_CASE("cross-entropy on masked random logits matches brute force") {
  LogitMatrix m = dense(2, 3, 4);
  Rng rng(3);
  for (auto& v : m.values) v = rng.uniform(-4, 4);
  // candidate column 2 masked in example 0, step 2 masked in example 1
  m.cand_mask[2] = 0;
  m.step_mask[3 + 2] = 0;
  for (std::size_t s = 0; s < 3; ++s) m.values[s * 4 + 2] = kMaskedLogit;
  for (std::size_t c = 0; c < 4; ++c) m.values[12 + 2 * 4 + c] = kMaskedLogit;
  const std::vector<std::size_t> y = {1 * 4 + 3, 1 * 4 + 2};
  std::vector<std::vector<double>> cells(2);
  std::vector<std::size_t> local(2);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t i = 0; i < 12; ++i) {
      if (!m.valid(b, i / 4, i % 4)) continue;
      if (i == y[b]) local[b] = cells[b].size();
      cells[b].push_back(m.values[b * 12 + i]);
    }
  }
  const auto r = ce_loss(m, y);
  CHECK(std::abs(r.loss - oracle::ce_reference(cells, local)) < 1e-10);
  CHECK(r.grad[2] == 0.0);
  CHECK(r.grad[12 + 9] == 0.0);

  try {
    ce_loss(m, {2, 0});
    FAIL("expected TargetMasked");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::TargetMasked);
  }
}

TEST_CASE("adamw closed forms") {
  RankerConfig cfg = oracle::tiny_config();
  TrainConfig tc;
  // a one-value model is enough: reuse fc2.b as the scalar θ
  RankerParams p = RankerParams::zeros(cfg);
  RankerParams g = RankerParams::zeros(cfg);
  p.fc2.b = scalar(1.0);
  OptimizerState st = make_optimizer_state(p);
  adamw_step(p, g, st, tc);
  CHECK(std::abs(p.fc2.b(0, 0) - (1.0 - 3e-6)) < 1e-12);
  CHECK(st.t == 1);
  for (int i = 0; i < 9; ++i) adamw_step(p, g, st, tc);
  CHECK(std::abs(p.fc2.b(0, 0) - std::pow(1.0 - 3e-6, 10)) < 1e-12);

  RankerParams q = RankerParams::zeros(cfg);
  g.fc2.b = scalar(1.0);
  OptimizerState fresh = make_optimizer_state(q);
  adamw_step(q, g, fresh, tc);
  CHECK(std::abs(q.fc2.b(0, 0) - (-3e-4 / (1.0 + 1e-8))) < 1e-15);
}

TEST_CASE("analytic gradients match finite differences") {
  for (HeadMode head : {HeadMode::joint, HeadMode::action_only}) {
    const RankerConfig cfg = oracle::tiny_config(head);
    Rng rng(21);
    const std::vector<Example> batch = {oracle::random_example(rng, 3, 4, 8), oracle::random_example(rng, 2, 3, 8)};
    const std::vector<std::pair<std::size_t, std::size_t>> t =
        head == HeadMode::joint ? std::vector<std::pair<std::size_t, std::size_t>>{{1, 2}, {0, 1}}
                                : std::vector<std::pair<std::size_t, std::size_t>>{{0, 2}, {0, 1}};
    const auto checks = oracle::finite_difference_check(RankerParams::init(cfg, 5), cfg, batch, t);
    CHECK(checks.size() == 32);
    for (const auto& c : checks) {
      CAPTURE(c.name);
      CAPTURE(c.max_abs_err);
      CHECK(c.rel_err < 1e-4);
    }
  }
}

TEST_CASE("gradients under dropout match finite differences with the masks held fixed") {
  const RankerConfig cfg = oracle::tiny_config();
  Rng rng(23);
  const std::vector<Example> batch = {oracle::random_example(rng, 3, 4, 8), oracle::random_example(rng, 4, 2, 8)};
  const Dropout drop{0.3, 77};
  const auto checks = oracle::finite_difference_check(RankerParams::init(cfg, 6), cfg, batch, {{2, 1}, {3, 0}}, 1e-4, drop);
  for (const auto& c : checks) {
    CAPTURE(c.name);
    CHECK(c.rel_err < 1e-4);
  }
  const auto params = RankerParams::init(cfg, 6);
  const auto off = forward(params, cfg, batch).logits[0];
  CHECK(forward(params, cfg, batch, false, {0.0, 77}).logits[0] == off);
  CHECK(forward(params, cfg, batch, false, drop).logits[0] != off);
  CHECK(forward(params, cfg, batch, false, drop).logits[0] == forward(params, cfg, batch, false, drop).logits[0]);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  const RankerConfig cfg = oracle::tiny_config();
  const auto params = RankerParams::init(cfg, 1);
  Rng rng(2);
  const std::vector<Example> batch = {oracle::random_example(rng, 3, 4, 8)};
  const auto fwd = forward(params, cfg, batch, true);
  auto grads = RankerParams::zeros(cfg);
  backward(params, cfg, fwd, {Mat::Zero(3, 4)}, grads);
  grads.visit([](const std::string& n, const Mat& m) {
    CAPTURE(n);
    CHECK(m.isZero(0.0));
  });
}

TEST_CASE("training is deterministic and a no-op on an empty corpus") {
  static const SimData sim = SimData::load(NIAB_DATA_DIR);
  GenConfig gc;
  gc.seed = 5;
  gc.n_episodes = 40;
  const Corpus corpus = generate_corpus(gc, sim);
  const auto [tr, va] = split_corpus(corpus, 0.75, 1);
  const Embedder emb = Embedder::hashing(64, 0);
  RankerConfig rc;
  rc.d_model = 32;
  rc.n_layers = 1;
  rc.mlp_hidden = 32;
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.seed = 3;
  const auto a = train(tr, va, emb, {}, rc, tc);
  const auto b = train(tr, va, emb, {}, rc, tc);
  REQUIRE(a.log.size() == 2);
  CHECK(a.log[0].train_loss == b.log[0].train_loss);
  CHECK(a.log[1].train_loss == b.log[1].train_loss);
  CHECK(a.log[1].val_selection_acc == b.log[1].val_selection_acc);
  CHECK(serialize_checkpoint(a.last) == serialize_checkpoint(b.last));
  std::size_t expected = 0;
  for (const auto& ep : tr.episodes) expected += std::max<std::size_t>(1, ep.oracle_labels.size());
  CHECK(a.stats.built == expected);

  tc.epochs = 1;
  const auto empty = train(Corpus{}, va, emb, {}, rc, tc);
  const auto init = train(Corpus{}, va, emb, {}, rc, TrainConfig{.epochs = 0, .seed = 3});
  CHECK(serialize_checkpoint(empty.last) == serialize_checkpoint(init.last));

  // the saved checkpoint reproduces the logged validation accuracy
  const Checkpoint re = parse_checkpoint(serialize_checkpoint(a.last));
  EmbeddingCache cache(emb);
  CHECK(selection_acc(predict_model(re, va, cache), va) == a.log.back().val_selection_acc);
}

TEST_CASE("examples: teacher forcing and zero-label modes") {
  static const SimData sim = SimData::load(NIAB_DATA_DIR);
  GenConfig gc;
  gc.seed = 9;
  gc.n_episodes = 40;
  const Corpus corpus = generate_corpus(gc, sim);
  const Embedder emb = Embedder::hashing(64, 0);
  EmbeddingCache cache(emb);
  RankerConfig rc;
  TrainConfig tc;
  CandidatePolicy pol;
  ExampleStats st;
  const auto ex = build_examples(corpus, cache, rc, pol, tc, &st);
  std::size_t labels = 0, zero = 0;
  for (const auto& ep : corpus.episodes) {
    labels += ep.oracle_labels.size();
    zero += ep.oracle_labels.empty() ? 1 : 0;
  }
  CHECK(ex.size() == labels + zero);
  for (const auto& e : ex) {
    const Episode& ep = corpus.episodes[e.episode];
    CHECK(e.target_step < ep.num_steps());
    CHECK(e.target_candidate < static_cast<std::size_t>(e.input.cands.rows()));
    if (ep.oracle_labels.empty()) CHECK(e.target_step == 0);
  }
  tc.zero_label = ZeroLabelMode::skip;
  CHECK(build_examples(corpus, cache, rc, pol, tc, &st).size() == labels);
  CHECK(st.skipped_zero_label == zero);

  pol.retrieval = false;
  rc.max_candidates = 8;
  const auto trunc = build_examples(corpus, cache, rc, pol, tc, &st);
  CHECK(trunc.size() + st.skipped_truncated == labels);
  CHECK(st.skipped_truncated > 0);
  const auto cand = candidate_indices(corpus.episodes[0], cache, pol, 8);
  CHECK(cand.size() == 8);
  const auto noop = *corpus.episodes[0].vocab_index("no_op");
  CHECK(std::find(cand.begin(), cand.end(), noop) != cand.end());
}
