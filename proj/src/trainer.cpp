#include "niab/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

#include "niab/error.hpp"
#include "niab/eval.hpp"
#include "niab/util.hpp"

namespace niab {

std::string_view to_string(Ablation a) noexcept {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_retrieval: return "no_retrieval";
    case Ablation::action_only: return "action_only";
  }
  return "?";
}

Ablation parse_ablation(std::string_view s) {
  for (Ablation a : {Ablation::full, Ablation::no_retrieval, Ablation::action_only}) {
    if (to_string(a) == s) return a;
  }
  fail(ErrorCode::InvalidConfig, "unknown ablation '" + std::string(s) + "'");
}

std::string_view to_string(ZeroLabelMode m) noexcept {
  return m == ZeroLabelMode::noop_target ? "noop_target" : "skip";
}

ZeroLabelMode parse_zero_label_mode(std::string_view s) {
  if (s == "noop_target") return ZeroLabelMode::noop_target;
  if (s == "skip") return ZeroLabelMode::skip;
  fail(ErrorCode::InvalidConfig, "zero_label must be noop_target or skip, got '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  auto pos = [](double v) { return std::isfinite(v) && v > 0.0; };
  if (!pos(learning_rate) || !pos(epsilon)) fail(ErrorCode::InvalidConfig, "learning_rate and epsilon must be positive");
  if (!std::isfinite(weight_decay) || weight_decay < 0.0) fail(ErrorCode::InvalidConfig, "weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    fail(ErrorCode::InvalidConfig, "betas must lie in [0, 1)");
  }
  if (batch_size < 1) fail(ErrorCode::InvalidConfig, "batch_size must be >= 1");
  if (k_ep < 2) fail(ErrorCode::InvalidConfig, "k_ep must be >= 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail(ErrorCode::InvalidConfig, "dropout must lie in [0, 1)");
}

LossResult ce_loss(const LogitMatrix& m, const std::vector<std::size_t>& targets) {
  if (targets.size() != m.batch) fail(ErrorCode::ShapeMismatch, "one target per example expected");
  const std::size_t cells = m.steps * m.cands;
  LossResult out;
  out.grad.assign(m.values.size(), 0.0);
  if (m.batch == 0) return out;
  const double inv_b = 1.0 / static_cast<double>(m.batch);
  for (std::size_t b = 0; b < m.batch; ++b) {
    const std::size_t y = targets[b];
    if (y >= cells || !m.valid(b, y / m.cands, y % m.cands)) {
      fail(ErrorCode::TargetMasked, "target " + std::to_string(y) + " of example " + std::to_string(b) + " is masked");
    }
    const double* v = &m.values[b * cells];
    double* g = &out.grad[b * cells];
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cells; ++i) {
      if (m.valid(b, i / m.cands, i % m.cands)) mx = std::max(mx, v[i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < cells; ++i) {
      if (m.valid(b, i / m.cands, i % m.cands)) z += std::exp(v[i] - mx);
    }
    const double lse = mx + std::log(z);
    out.loss += (lse - v[y]) * inv_b;
    for (std::size_t i = 0; i < cells; ++i) {
      if (m.valid(b, i / m.cands, i % m.cands)) g[i] = std::exp(v[i] - lse) * inv_b;
    }
    g[y] -= inv_b;
  }
  return out;
}

OptimizerState make_optimizer_state(const RankerParams& params) {
  OptimizerState s;
  params.visit([&](const std::string&, const Mat& p) {
    s.m.push_back(Mat::Zero(p.rows(), p.cols()));
    s.v.push_back(Mat::Zero(p.rows(), p.cols()));
  });
  return s;
}

void adamw_step(RankerParams& params, const RankerParams& grads, OptimizerState& state, const TrainConfig& cfg) {
  std::vector<const Mat*> g;
  grads.visit([&](const std::string&, const Mat& m) { g.push_back(&m); });
  state.t += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  std::size_t i = 0;
  params.visit([&](const std::string& name, Mat& p) {
    if (i >= g.size() || g[i]->rows() != p.rows() || g[i]->cols() != p.cols() || state.m.size() <= i) {
      fail(ErrorCode::ShapeMismatch, "gradient or optimizer state does not match '" + name + "'");
    }
    Mat& m = state.m[i];
    Mat& v = state.v[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * *g[i];
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g[i]->cwiseAbs2();
    const auto step = (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
    p.array() -= cfg.learning_rate * (step + cfg.weight_decay * p.array());
    ++i;
  });
}

const Vec& EmbeddingCache::get(const std::string& token) {
  auto it = cache_.find(token);
  if (it == cache_.end()) it = cache_.emplace(token, embedder_.embed(token)).first;
  return it->second;
}

std::vector<std::size_t> candidate_indices(const Episode& ep, EmbeddingCache& emb, const CandidatePolicy& policy,
                                           std::size_t c_max, const std::optional<ActionToken>& force) {
  if (policy.retrieval) {
    auto idx = retrieve(ep, emb.embedder(), 1, policy.k_ep, force).candidate_vocab_index;
    if (idx.size() > c_max) fail(ErrorCode::ShapeMismatch, "retrieved candidates exceed max_candidates");
    return idx;
  }
  if (ep.robot_vocab.empty()) fail(ErrorCode::EmptyVocab, "episode " + ep.episode_id + " has no robot_vocab");
  std::vector<std::size_t> idx(std::min(c_max, ep.robot_vocab.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (const auto noop = ep.vocab_index(kNoOp); noop && *noop >= idx.size()) idx.back() = *noop;
  return idx;
}

Example make_example(const Episode& ep, const std::vector<std::size_t>& cand, EmbeddingCache& emb) {
  const auto dim = static_cast<Eigen::Index>(emb.embedder().dim());
  Example ex;
  ex.steps.resize(static_cast<Eigen::Index>(ep.num_steps()), dim);
  for (std::size_t s = 0; s < ep.num_steps(); ++s) {
    ex.steps.row(static_cast<Eigen::Index>(s)) = emb.get(ep.human_task_seq[s]).transpose();
  }
  ex.cands.resize(static_cast<Eigen::Index>(cand.size()), dim);
  for (std::size_t j = 0; j < cand.size(); ++j) {
    ex.cands.row(static_cast<Eigen::Index>(j)) = emb.get(ep.robot_vocab[cand[j]]).transpose();
  }
  return ex;
}

std::vector<TrainExample> build_examples(const Corpus& corpus, EmbeddingCache& emb, const RankerConfig& rcfg,
                                         const CandidatePolicy& policy, const TrainConfig& cfg, ExampleStats* stats) {
  ExampleStats local;
  std::vector<TrainExample> out;
  for (std::size_t e = 0; e < corpus.episodes.size(); ++e) {
    const Episode& ep = corpus.episodes[e];
    std::vector<OracleLabel> targets = ep.oracle_labels;
    if (targets.empty()) {
      if (cfg.zero_label == ZeroLabelMode::skip) {
        ++local.skipped_zero_label;
        continue;
      }
      targets.push_back({0, std::string(kNoOp)});
    }
    for (const auto& t : targets) {
      const auto cand = candidate_indices(ep, emb, policy, rcfg.max_candidates, t.best_robot_action);
      const auto vi = ep.vocab_index(t.best_robot_action);
      const auto it = vi ? std::find(cand.begin(), cand.end(), *vi) : cand.end();
      if (it == cand.end()) {
        ++local.skipped_truncated;
        continue;
      }
      TrainExample ex;
      ex.episode = e;
      ex.input = make_example(ep, cand, emb);
      ex.target_step = rcfg.head == HeadMode::joint ? t.human_step_idx : 0;
      ex.target_candidate = static_cast<std::size_t>(it - cand.begin());
      out.push_back(std::move(ex));
      ++local.built;
    }
  }
  if (stats) *stats = local;
  return out;
}

std::string to_jsonl(const EpochRecord& r, bool with_timing) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["train_loss"] = r.train_loss;
  j["val_selection_acc"] = r.val_selection_acc;
  if (with_timing) j["wall_ms"] = r.wall_ms;
  return j.dump();
}

double train_step(RankerParams& params, const RankerConfig& rcfg, const std::vector<const TrainExample*>& batch,
                  OptimizerState& state, const TrainConfig& cfg) {
  std::vector<Example> inputs;
  inputs.reserve(batch.size());
  for (const auto* ex : batch) inputs.push_back(ex->input);
  const Dropout drop{cfg.dropout, cfg.seed ^ mix64(0x44524F50ULL + state.t)};
  const ForwardResult fwd = forward(params, rcfg, inputs, true, drop);
  const LogitMatrix lm = pad_logits(fwd.logits);
  std::vector<std::size_t> targets;
  for (const auto* ex : batch) targets.push_back(ex->target_step * lm.cands + ex->target_candidate);
  const LossResult loss = ce_loss(lm, targets);

  std::vector<Mat> d_logits;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Mat& l = fwd.logits[b];
    Mat d(l.rows(), l.cols());
    for (Eigen::Index s = 0; s < l.rows(); ++s) {
      for (Eigen::Index c = 0; c < l.cols(); ++c) {
        d(s, c) = loss.grad[(b * lm.steps + static_cast<std::size_t>(s)) * lm.cands + static_cast<std::size_t>(c)];
      }
    }
    d_logits.push_back(std::move(d));
  }
  RankerParams grads = RankerParams::zeros(rcfg);
  backward(params, rcfg, fwd, d_logits, grads);
  grads.visit([](const std::string& name, const Mat& g) {
    if (!g.allFinite()) fail(ErrorCode::NonFiniteGradient, "non-finite gradient in '" + name + "'");
  });
  adamw_step(params, grads, state, cfg);
  return loss.loss;
}

namespace {

void round_to_f32(RankerParams& p) {
  p.visit([](const std::string&, Mat& m) {
    m = m.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
  });
}

}  // namespace

TrainResult train(const Corpus& train_set, const Corpus& val_set, const Embedder& embedder, CandidatePolicy source,
                  RankerConfig rcfg, const TrainConfig& cfg, const EpochHook& hook) {
  cfg.validate();
  rcfg.input_dim = embedder.dim();
  rcfg.head = cfg.ablation == Ablation::action_only ? HeadMode::action_only : HeadMode::joint;
  rcfg.validate();
  source.retrieval = cfg.ablation != Ablation::no_retrieval;
  source.k_ep = static_cast<std::uint32_t>(cfg.k_ep);
  if (source.retrieval && cfg.k_ep + 2 > rcfg.max_candidates) {
    fail(ErrorCode::InvalidConfig, "k_ep + 2 must not exceed max_candidates");
  }

  EmbeddingCache emb(embedder);
  TrainResult result;
  const auto examples = build_examples(train_set, emb, rcfg, source, cfg, &result.stats);

  RankerParams params = RankerParams::init(rcfg, cfg.seed);
  OptimizerState state = make_optimizer_state(params);
  // Snapshots are rounded to the checkpoint's f32 storage, so a reloaded
  // checkpoint scores exactly what the log reports.
  auto snapshot = [&] {
    Checkpoint ck{rcfg, source, params};
    round_to_f32(ck.params);
    return ck;
  };
  result.best = result.last = snapshot();

  double best_acc = -1.0;
  std::vector<std::size_t> order(examples.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(cfg.seed ^ mix64(0x5452'4149'4E00ULL + epoch));
    rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<const TrainExample*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i) {
        batch.push_back(&examples[order[i]]);
      }
      loss_sum += train_step(params, rcfg, batch, state, cfg) * static_cast<double>(batch.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = examples.empty() ? 0.0 : loss_sum / static_cast<double>(examples.size());
    Checkpoint ck = snapshot();
    if (!val_set.episodes.empty()) rec.val_selection_acc = selection_acc(predict_model(ck, val_set, emb), val_set);
    rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(rec);
    if (hook) hook(rec);
    if (rec.val_selection_acc > best_acc) {
      best_acc = rec.val_selection_acc;
      result.best = ck;
      result.best_epoch = epoch;
    }
    result.last = std::move(ck);
  }
  return result;
}

}  // namespace niab
