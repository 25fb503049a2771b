#include "niab/eval.hpp"

#include <algorithm>
#include <charconv>
#include <limits>

#include "niab/error.hpp"
#include "niab/util.hpp"

namespace niab {

using nlohmann::ordered_json;

std::string_view to_string(Policy p) noexcept {
  switch (p) {
    case Policy::model: return "model";
    case Policy::random: return "random";
    case Policy::cosine_top1: return "cosine_top1";
    case Policy::oracle: return "oracle";
    case Policy::no_op: return "no_op";
  }
  return "?";
}

Policy parse_policy(std::string_view s) {
  for (Policy p : {Policy::model, Policy::random, Policy::cosine_top1, Policy::oracle, Policy::no_op}) {
    if (to_string(p) == s) return p;
  }
  fail(ErrorCode::InvalidConfig, "unknown policy '" + std::string(s) + "'");
}

std::pair<std::size_t, std::size_t> argmax_flat(const Mat& logits) {
  if (logits.size() == 0) fail(ErrorCode::ShapeMismatch, "argmax of an empty logit block");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits.data()[i] > logits.data()[best]) best = i;
  }
  return {static_cast<std::size_t>(best / logits.cols()), static_cast<std::size_t>(best % logits.cols())};
}

Prediction decode(const Episode& ep, const std::vector<std::size_t>& cand, const Mat& logits,
                  const Mat& cross_weights, HeadMode head) {
  auto [s, j] = argmax_flat(logits);
  if (head == HeadMode::action_only) s = argmax_flat(cross_weights.row(static_cast<Eigen::Index>(j))).second;
  return {s, ep.robot_vocab.at(cand.at(j))};
}

PredictionMap predict_model(const Checkpoint& ckpt, const Corpus& corpus, EmbeddingCache& emb) {
  constexpr std::size_t kChunk = 64;
  PredictionMap out;
  const auto& eps = corpus.episodes;
  for (std::size_t start = 0; start < eps.size(); start += kChunk) {
    const std::size_t end = std::min(eps.size(), start + kChunk);
    std::vector<std::vector<std::size_t>> cands;
    std::vector<Example> batch;
    for (std::size_t i = start; i < end; ++i) {
      cands.push_back(candidate_indices(eps[i], emb, ckpt.candidates, ckpt.config.max_candidates));
      batch.push_back(make_example(eps[i], cands.back(), emb));
    }
    const auto fwd = forward(ckpt.params, ckpt.config, batch);
    for (std::size_t i = start; i < end; ++i) {
      const std::size_t k = i - start;
      out[eps[i].episode_id] = decode(eps[i], cands[k], fwd.logits[k], fwd.cross_weights[k], ckpt.config.head);
    }
  }
  return out;
}

PredictionMap predict_random(const Corpus& corpus, std::uint64_t seed) {
  PredictionMap out;
  for (const auto& ep : corpus.episodes) {
    Rng rng(seed ^ fnv1a64(ep.episode_id));
    const std::size_t s = rng.below(ep.num_steps());
    out[ep.episode_id] = {s, ep.robot_vocab[rng.below(ep.robot_vocab.size())]};
  }
  return out;
}

PredictionMap predict_cosine_top1(const Corpus& corpus, EmbeddingCache& emb) {
  PredictionMap out;
  for (const auto& ep : corpus.episodes) {
    double best = -std::numeric_limits<double>::infinity();
    Prediction p;
    for (std::size_t s = 0; s < ep.num_steps(); ++s) {
      const Vec& h = emb.get(ep.human_task_seq[s]);
      for (const auto& a : ep.robot_vocab) {
        const double c = cosine(h, emb.get(a));
        if (c > best) {
          best = c;
          p = {s, a};
        }
      }
    }
    out[ep.episode_id] = p;
  }
  return out;
}

PredictionMap predict_oracle(const Corpus& corpus, const SimData& sim) {
  PredictionMap out;
  for (const auto& ep : corpus.episodes) {
    Prediction p{0, std::string(kNoOp)};
    if (!ep.oracle_labels.empty()) {
      const EpisodeRunner runner(sim.scene(ep.scene), ep);
      long best = std::numeric_limits<long>::min();
      for (const auto& l : ep.oracle_labels) {
        const long h = runner.assisted({l.human_step_idx, l.best_robot_action}).hss;
        if (h > best) {
          best = h;
          p = {l.human_step_idx, l.best_robot_action};
        }
      }
    }
    out[ep.episode_id] = p;
  }
  return out;
}

PredictionMap predict_noop(const Corpus& corpus) {
  PredictionMap out;
  for (const auto& ep : corpus.episodes) out[ep.episode_id] = {0, std::string(kNoOp)};
  return out;
}

Units score_units(const Episode& ep, const Prediction& pred) {
  Units u;
  if (ep.oracle_labels.empty()) {
    u.total = 1;
    u.correct = u.correct_action = pred.action == kNoOp ? 1 : 0;
    return u;
  }
  for (const auto& l : ep.oracle_labels) {
    ++u.total;
    if (pred.action == l.best_robot_action) {
      ++u.correct_action;
      if (pred.step == l.human_step_idx) ++u.correct;
    }
  }
  return u;
}

namespace {

const Prediction& lookup(const PredictionMap& preds, const Episode& ep) {
  const auto it = preds.find(ep.episode_id);
  if (it == preds.end()) fail(ErrorCode::MissingPrediction, "no prediction for episode " + ep.episode_id);
  return it->second;
}

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

double selection_acc(const PredictionMap& preds, const Corpus& corpus, bool action_only_match) {
  std::size_t total = 0, correct = 0;
  for (const auto& ep : corpus.episodes) {
    const Units u = score_units(ep, lookup(preds, ep));
    total += u.total;
    correct += action_only_match ? u.correct_action : u.correct;
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

EvalSummary summarize(const std::vector<EpisodeRow>& rows, EvalSummary base) {
  std::size_t correct = 0, correct_action = 0, successes = 0;
  long hss = 0;
  base.n_episodes = rows.size();
  base.n_units = 0;
  for (const auto& r : rows) {
    base.n_units += r.units.total;
    correct += r.units.correct;
    correct_action += r.units.correct_action;
    hss += r.hss;
    successes += r.success ? 1 : 0;
  }
  const auto ratio = [](std::size_t a, std::size_t b) {
    return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
  };
  base.selection_acc = ratio(correct, base.n_units);
  base.selection_acc_action_only = ratio(correct_action, base.n_units);
  base.mean_hss = rows.empty() ? 0.0 : static_cast<double>(hss) / static_cast<double>(rows.size());
  base.success_acc = ratio(successes, rows.size());
  return base;
}

EvalReport evaluate(const PredictionMap& preds, const Corpus& corpus, const SimData& sim, std::string policy,
                    std::string config_hash) {
  std::vector<const Episode*> order;
  for (const auto& ep : corpus.episodes) order.push_back(&ep);
  std::sort(order.begin(), order.end(), [](const Episode* a, const Episode* b) { return a->episode_id < b->episode_id; });

  EvalReport rep;
  for (const Episode* ep : order) {
    const Prediction& p = lookup(preds, *ep);
    if (p.step >= ep->num_steps()) {
      fail(ErrorCode::LabelOutOfRange, "prediction step " + std::to_string(p.step) + " outside " + ep->episode_id);
    }
    if (!ep->vocab_index(p.action)) fail(ErrorCode::ActionNotInVocab, "'" + p.action + "' not in " + ep->episode_id);
    const EpisodeRunner runner(sim.scene(ep->scene), *ep);
    const RunReport r = runner.assisted(p);
    EpisodeRow row;
    row.episode_id = ep->episode_id;
    row.scene = ep->scene;
    row.prediction = p;
    row.units = score_units(*ep, p);
    row.h_human = r.h_human;
    row.h_assist = r.h_assist;
    row.hss = r.hss;
    row.success = r.success;
    row.robot_abandoned = r.robot_abandoned;
    rep.rows.push_back(std::move(row));
  }
  EvalSummary base;
  base.policy = std::move(policy);
  base.corpus_id = corpus_id(corpus);
  base.config_hash = std::move(config_hash);
  rep.summary = summarize(rep.rows, std::move(base));
  return rep;
}

ordered_json to_json(const EvalReport& report) {
  const EvalSummary& s = report.summary;
  ordered_json j;
  j["summary"] = {{"policy", s.policy},
                  {"corpus_id", s.corpus_id},
                  {"config_hash", s.config_hash},
                  {"n_episodes", s.n_episodes},
                  {"n_units", s.n_units},
                  {"selection_acc", s.selection_acc},
                  {"selection_acc_action_only", s.selection_acc_action_only},
                  {"mean_hss", s.mean_hss},
                  {"success_acc", s.success_acc}};
  ordered_json rows = ordered_json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"episode_id", r.episode_id},
                    {"scene", std::string(to_string(r.scene))},
                    {"pred_step", r.prediction.step},
                    {"pred_action", r.prediction.action},
                    {"units", r.units.total},
                    {"correct", r.units.correct},
                    {"correct_action", r.units.correct_action},
                    {"h_human", r.h_human},
                    {"h_assist", r.h_assist},
                    {"hss", r.hss},
                    {"success", r.success},
                    {"robot_abandoned", r.robot_abandoned}});
  }
  j["episodes"] = std::move(rows);
  return j;
}

EvalReport report_from_json(const ordered_json& j) {
  try {
    EvalReport rep;
    const auto& s = j.at("summary");
    rep.summary.policy = s.at("policy").get<std::string>();
    rep.summary.corpus_id = s.at("corpus_id").get<std::string>();
    rep.summary.config_hash = s.at("config_hash").get<std::string>();
    rep.summary.n_episodes = s.at("n_episodes").get<std::size_t>();
    rep.summary.n_units = s.at("n_units").get<std::size_t>();
    rep.summary.selection_acc = s.at("selection_acc").get<double>();
    rep.summary.selection_acc_action_only = s.at("selection_acc_action_only").get<double>();
    rep.summary.mean_hss = s.at("mean_hss").get<double>();
    rep.summary.success_acc = s.at("success_acc").get<double>();
    for (const auto& r : j.at("episodes")) {
      EpisodeRow row;
      row.episode_id = r.at("episode_id").get<std::string>();
      const auto scene = parse_scene(r.at("scene").get<std::string>());
      if (!scene) fail(ErrorCode::UnknownScene, "report row with unknown scene");
      row.scene = *scene;
      row.prediction = {r.at("pred_step").get<std::size_t>(), r.at("pred_action").get<std::string>()};
      row.units = {r.at("units").get<std::size_t>(), r.at("correct").get<std::size_t>(),
                   r.at("correct_action").get<std::size_t>()};
      row.h_human = r.at("h_human").get<long>();
      row.h_assist = r.at("h_assist").get<long>();
      row.hss = r.at("hss").get<long>();
      row.success = r.at("success").get<bool>();
      row.robot_abandoned = r.at("robot_abandoned").get<bool>();
      rep.rows.push_back(std::move(row));
    }
    return rep;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedRecord, std::string("eval report: ") + e.what());
  }
}

std::string summary_csv(const EvalSummary& s) {
  return "policy,corpus_id,config_hash,n_episodes,n_units,selection_acc,selection_acc_action_only,mean_hss,"
         "success_acc\n" +
         s.policy + "," + s.corpus_id + "," + s.config_hash + "," + std::to_string(s.n_episodes) + "," +
         std::to_string(s.n_units) + "," + fmt(s.selection_acc) + "," + fmt(s.selection_acc_action_only) + "," +
         fmt(s.mean_hss) + "," + fmt(s.success_acc) + "\n";
}

std::string corpus_id(const Corpus& corpus) { return hex64(fnv1a64(serialize_corpus(corpus))); }

}  // namespace niab
