// niab: corpus generation, training, evaluation, replay and ablation sweeps.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "niab/config.hpp"
#include "niab/error.hpp"
#include "niab/eval.hpp"
#include "niab/scene_gen.hpp"
#include "niab/simulator.hpp"
#include "niab/trainer.hpp"
#include "niab/util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace niab;

namespace {

// A flag that overrides one config key. Values are kept as text until the
// config file has been applied, then overlaid in one pass.
struct Override {
  CLI::Option* opt = nullptr;
  std::string section, key;
  enum class Kind { number, text, triple } kind = Kind::number;
  std::string value;
};

struct Common {
  std::string config_path;
  std::string out_dir;
  std::string data_dir;
  std::vector<Override> overrides;
};

void add_override(CLI::App* app, Common& c, const std::string& flag, const std::string& section,
                  const std::string& key, Override::Kind kind, const std::string& help) {
  c.overrides.push_back({nullptr, section, key, kind, {}});
  // the vector is reserved up front, so the captured address stays valid
  Override& o = c.overrides.back();
  o.opt = app->add_option(flag, o.value, help);
}

json override_json(const Common& c) {
  json j = json::object();
  for (const auto& o : c.overrides) {
    if (o.opt->count() == 0) continue;
    json v;
    try {
      switch (o.kind) {
        case Override::Kind::text:
          v = o.value;
          break;
        case Override::Kind::number:
          v = json::parse(o.value);
          if (!v.is_number()) throw json::other_error::create(501, "not a number", nullptr);
          break;
        case Override::Kind::triple:
          v = json::parse("[" + o.value + "]");
          break;
      }
    } catch (const json::exception&) {
      fail(ErrorCode::InvalidConfig, o.opt->get_name() + ": cannot parse '" + o.value + "'");
    }
    j[o.section][o.key] = v;
  }
  return j;
}

AppConfig effective_config(const Common& c) {
  AppConfig cfg = c.config_path.empty() ? AppConfig{} : load_config(c.config_path);
  cfg = overlay(std::move(cfg), override_json(c));
  cfg.validate();
  return cfg;
}

fs::path data_root(const Common& c) {
  if (!c.data_dir.empty()) return c.data_dir;
  if (const char* env = std::getenv("NIAB_DATA"); env && *env) return env;
  return NIAB_DATA_DIR;
}

fs::path out_root(const Common& c, const std::string& sub) {
  if (!c.out_dir.empty()) return c.out_dir;
  const char* env = std::getenv("NIAB_OUT");
  return fs::path(env && *env ? env : "niab_out") / sub;
}

void write_config(const fs::path& dir, const std::string& sub, const AppConfig& cfg, const ordered_json& inputs) {
  ordered_json j;
  j["meta"] = {{"tool", "niab"}, {"version", kVersion}, {"subcommand", sub}, {"inputs", inputs}};
  const ordered_json body = to_json(cfg);
  for (const auto& [k, v] : body.items()) j[k] = v;
  j["meta"]["config_hash"] = config_hash(cfg);
  write_file(dir / "config.json", j.dump(2) + "\n");
}

void copy_tree(const fs::path& from, const fs::path& to) {
  fs::create_directories(to);
  for (const auto& e : fs::directory_iterator(from)) {
    if (e.is_regular_file()) fs::copy_file(e.path(), to / e.path().filename(), fs::copy_options::overwrite_existing);
  }
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

// ---- corpus sources ------------------------------------------------------

struct CorpusArgs {
  std::string corpus, train, val;
};

void add_corpus_args(CLI::App* app, CorpusArgs& a) {
  auto* c = app->add_option("--corpus", a.corpus, "corpus JSONL, split by the split section");
  auto* t = app->add_option("--train", a.train, "training fold JSONL");
  auto* v = app->add_option("--val", a.val, "validation fold JSONL");
  c->excludes(t)->excludes(v);
  t->needs(v);
  v->needs(t);
}

// With no corpus flags the corpus is generated from the gen section.
std::pair<Corpus, Corpus> load_folds(const CorpusArgs& a, const AppConfig& cfg, const SimData& sim,
                                     ordered_json& inputs) {
  if (!a.train.empty()) {
    inputs["train"] = a.train;
    inputs["val"] = a.val;
    return {read_corpus(a.train, sim.token_check()), read_corpus(a.val, sim.token_check())};
  }
  Corpus all;
  if (!a.corpus.empty()) {
    inputs["corpus"] = a.corpus;
    all = read_corpus(a.corpus, sim.token_check());
  } else {
    inputs["corpus"] = "generated";
    all = generate_corpus(cfg.gen, sim);
  }
  return split_corpus(all, cfg.train_fraction, cfg.split_seed);
}

// ---- predictions ---------------------------------------------------------

Embedder checkpoint_embedder(const Checkpoint& ck) {
  return Embedder::from_spec(ck.candidates.embedder, ck.candidates.hashing_dim, ck.candidates.hashing_seed);
}

PredictionMap predict(Policy policy, const Corpus& corpus, const AppConfig& cfg, const SimData& sim,
                      const std::optional<Checkpoint>& ck) {
  switch (policy) {
    case Policy::model: {
      if (!ck) fail(ErrorCode::InvalidConfig, "policy 'model' needs --checkpoint");
      const Embedder emb = checkpoint_embedder(*ck);
      EmbeddingCache cache(emb);
      return predict_model(*ck, corpus, cache);
    }
    case Policy::random:
      return predict_random(corpus, cfg.eval_seed);
    case Policy::cosine_top1: {
      const Embedder emb = make_embedder(cfg);
      EmbeddingCache cache(emb);
      return predict_cosine_top1(corpus, cache);
    }
    case Policy::oracle:
      return predict_oracle(corpus, sim);
    case Policy::no_op:
      return predict_noop(corpus);
  }
  fail(ErrorCode::InvalidConfig, "unknown policy");
}

// ---- training ------------------------------------------------------------

struct TrainOutput {
  TrainResult result;
  long long wall_ms = 0;
};

TrainOutput train_into(const fs::path& dir, const Corpus& tr, const Corpus& va, const AppConfig& cfg) {
  fs::create_directories(dir);
  const Embedder emb = make_embedder(cfg);
  std::ostringstream metrics, timing;
  const auto t0 = std::chrono::steady_clock::now();
  auto hook = [&](const EpochRecord& r) {
    metrics << to_jsonl(r) << '\n';
    timing << to_jsonl(r, true) << '\n';
    log_line(to_jsonl(r, true));
    write_file(dir / "metrics.jsonl", metrics.str());
    write_file(dir / "timing.jsonl", timing.str());
  };
  TrainOutput out;
  out.result = train(tr, va, emb, embedder_source(cfg), cfg.ranker, cfg.train, hook);
  out.wall_ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
  write_file(dir / "metrics.jsonl", metrics.str());
  write_file(dir / "timing.jsonl", timing.str());
  save_checkpoint(dir / "best.ckpt", out.result.best);
  save_checkpoint(dir / "last.ckpt", out.result.last);
  ordered_json s;
  s["best_epoch"] = out.result.best_epoch;
  s["examples_built"] = out.result.stats.built;
  s["skipped_zero_label"] = out.result.stats.skipped_zero_label;
  s["skipped_truncated"] = out.result.stats.skipped_truncated;
  write_file(dir / "train_summary.json", s.dump(2) + "\n");
  return out;
}

EvalReport eval_into(const fs::path& dir, const PredictionMap& preds, const Corpus& corpus, const SimData& sim,
                     Policy policy, const AppConfig& cfg, bool csv) {
  fs::create_directories(dir);
  EvalReport r = evaluate(preds, corpus, sim, std::string(to_string(policy)), config_hash(cfg));
  write_file(dir / "report.json", to_json(r).dump(2) + "\n");
  if (csv) write_file(dir / "summary.csv", summary_csv(r.summary));
  return r;
}

// ---- subcommands -----------------------------------------------------------

int cmd_gen(const Common& c) {
  const AppConfig cfg = effective_config(c);
  const fs::path data = data_root(c), out = out_root(c, "gen");
  const SimData sim = SimData::load(data);
  const Corpus corpus = generate_corpus(cfg.gen, sim);
  fs::create_directories(out);
  write_corpus(out / "corpus.jsonl", corpus);
  copy_tree(data / "vocab", out / "vocab");
  copy_tree(data / "sim", out / "sim");
  write_config(out, "gen", cfg, {{"data", data.string()}});
  log_line("wrote " + std::to_string(corpus.episodes.size()) + " episodes to " + (out / "corpus.jsonl").string());
  return 0;
}

int cmd_split(const Common& c, const std::string& corpus_path) {
  const AppConfig cfg = effective_config(c);
  const fs::path out = out_root(c, "split");
  const SimData sim = SimData::load(data_root(c));
  const auto [tr, va] = split_corpus(read_corpus(corpus_path, sim.token_check()), cfg.train_fraction, cfg.split_seed);
  fs::create_directories(out);
  write_corpus(out / "train.jsonl", tr);
  write_corpus(out / "val.jsonl", va);
  write_config(out, "split", cfg, {{"corpus", corpus_path}});
  log_line("train " + std::to_string(tr.episodes.size()) + ", val " + std::to_string(va.episodes.size()));
  return 0;
}

int cmd_train(const Common& c, const CorpusArgs& a) {
  const AppConfig cfg = effective_config(c);
  const fs::path out = out_root(c, "train");
  const SimData sim = SimData::load(data_root(c));
  ordered_json inputs;
  const auto [tr, va] = load_folds(a, cfg, sim, inputs);
  fs::create_directories(out);
  write_config(out, "train", cfg, inputs);
  const auto r = train_into(out, tr, va, cfg);
  log_line("best epoch " + std::to_string(r.result.best_epoch) + ", " + std::to_string(r.wall_ms) + " ms");
  return 0;
}

int cmd_eval(const Common& c, const std::string& corpus_path, const std::string& ckpt_path, bool csv) {
  AppConfig cfg = effective_config(c);
  const fs::path out = out_root(c, "eval");
  const SimData sim = SimData::load(data_root(c));
  const Corpus corpus = read_corpus(corpus_path, sim.token_check());
  std::optional<Checkpoint> ck;
  ordered_json inputs = {{"corpus", corpus_path}};
  if (!ckpt_path.empty()) {
    ck = load_checkpoint(ckpt_path);
    inputs["checkpoint"] = ckpt_path;
  }
  const auto preds = predict(cfg.policy, corpus, cfg, sim, ck);
  fs::create_directories(out);
  write_config(out, "eval", cfg, inputs);
  const auto r = eval_into(out, preds, corpus, sim, cfg.policy, cfg, csv);
  std::cout << to_json(r).at("summary").dump(2) << '\n';
  return 0;
}

int cmd_run(const Common& c, const std::string& corpus_path, const std::string& episode_id,
            const std::string& ckpt_path) {
  const AppConfig cfg = effective_config(c);
  const SimData sim = SimData::load(data_root(c));
  const Corpus corpus = read_corpus(corpus_path, sim.token_check());
  const Episode* ep = nullptr;
  for (const auto& e : corpus.episodes) {
    if (e.episode_id == episode_id) ep = &e;
  }
  if (!ep) fail(ErrorCode::InvalidConfig, "no episode '" + episode_id + "' in " + corpus_path);
  Corpus one;
  one.episodes.push_back(*ep);
  std::optional<Checkpoint> ck;
  if (!ckpt_path.empty()) ck = load_checkpoint(ckpt_path);
  const Prediction pred = predict(cfg.policy, one, cfg, sim, ck).at(episode_id);

  const SceneModel& scene = sim.scene(ep->scene);
  const EpisodeRunner runner(scene, *ep);
  const RunReport& base = runner.unassisted();
  const RunReport run = runner.assisted(pred);
  auto& os = std::cout;
  os << "episode " << ep->episode_id << " (" << to_string(ep->scene) << ")\n";
  os << "policy " << to_string(cfg.policy) << ": step " << pred.step << " '" << ep->human_task_seq[pred.step]
     << "', action " << pred.action << '\n';
  for (const auto& l : ep->oracle_labels) os << "oracle label: step " << l.human_step_idx << ", action " << l.best_robot_action << '\n';
  for (std::size_t s = 0; s < ep->num_steps(); ++s) {
    os << "[" << s << "] " << ep->human_task_seq[s] << '\n';
    for (const auto& ev : run.events) {
      if (ev.step == s) os << "    " << to_string(ev.kind) << (ev.detail.empty() ? "" : ": " + ev.detail) << '\n';
    }
    for (const auto& t : run.robot_trace) {
      if (t.step == s) os << "    robot  " << scene.describe(t.prim) << '\n';
    }
    for (const auto& t : run.human_trace) {
      if (t.step == s) os << "    human  " << scene.describe(t.prim) << '\n';
    }
  }
  os << "unassisted: " << base.h_human << " human primitives, success " << (base.success ? "true" : "false") << '\n';
  os << "assisted:   " << run.h_assist << " human primitives, " << run.robot_trace.size()
     << " robot primitives, success " << (run.success ? "true" : "false")
     << (run.robot_abandoned ? ", robot abandoned" : "") << '\n';
  os << "HSS " << run.hss << '\n';
  return 0;
}

int cmd_ablate(const Common& c, const CorpusArgs& a) {
  const AppConfig base = effective_config(c);
  const fs::path out = out_root(c, "ablate");
  const SimData sim = SimData::load(data_root(c));
  ordered_json inputs;
  const auto [tr, va] = load_folds(a, base, sim, inputs);
  fs::create_directories(out);
  write_config(out, "ablate", base, inputs);

  ordered_json table = ordered_json::array();
  std::string csv = "variant,selection_acc,selection_acc_action_only,mean_hss,success_acc,best_epoch,train_ms\n";
  for (Ablation ab : {Ablation::full, Ablation::no_retrieval, Ablation::action_only}) {
    AppConfig cfg = base;
    cfg.train.ablation = ab;
    cfg.policy = Policy::model;
    const std::string name(to_string(ab));
    const fs::path dir = out / name;
    fs::create_directories(dir);
    write_config(dir, "ablate", cfg, inputs);
    log_line("== " + name);
    const auto t = train_into(dir, tr, va, cfg);
    const Embedder emb = checkpoint_embedder(t.result.best);
    EmbeddingCache cache(emb);
    const auto r = eval_into(dir, predict_model(t.result.best, va, cache), va, sim, Policy::model, cfg, true);
    const auto& s = r.summary;
    table.push_back({{"variant", name},
                     {"selection_acc", s.selection_acc},
                     {"selection_acc_action_only", s.selection_acc_action_only},
                     {"mean_hss", s.mean_hss},
                     {"success_acc", s.success_acc},
                     {"best_epoch", t.result.best_epoch}});
    std::ostringstream row;
    row.precision(17);
    row << name << ',' << s.selection_acc << ',' << s.selection_acc_action_only << ',' << s.mean_hss << ','
        << s.success_acc << ',' << t.result.best_epoch << ',' << t.wall_ms << '\n';
    csv += row.str();
  }
  write_file(out / "comparison.json", table.dump(2) + "\n");
  write_file(out / "comparison.csv", csv);

  std::printf("%-14s %10s %12s %10s %10s\n", "variant", "sel_acc", "sel_acc_act", "mean_hss", "success");
  for (const auto& r : table) {
    std::printf("%-14s %10.4f %12.4f %10.4f %10.4f\n", r["variant"].get<std::string>().c_str(),
                r["selection_acc"].get<double>(), r["selection_acc_action_only"].get<double>(),
                r["mean_hss"].get<double>(), r["success_acc"].get<double>());
  }
  return 0;
}

void report_error(std::string_view code, const std::string& message, std::optional<std::size_t> line = {}) {
  ordered_json j;
  j["error"] = code;
  j["message"] = message;
  if (line) j["line"] = *line;
  std::cerr << j.dump() << '\n';
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON config file; flags override it")->check(CLI::ExistingFile);
  app->add_option("--out", c.out_dir, "output directory (default $NIAB_OUT/<subcommand>)");
  app->add_option("--data", c.data_dir, "directory holding vocab/ and sim/ (default $NIAB_DATA)");
  add_override(app, c, "--embedder", "embedding", "embedder", Override::Kind::text, "hashing | table:<path>");
  add_override(app, c, "--hashing-dim", "embedding", "hashing_dim", Override::Kind::number, "hashing embedder width");
}

void add_gen_flags(CLI::App* app, Common& c) {
  using K = Override::Kind;
  add_override(app, c, "--seed", "gen", "seed", K::number, "generator seed");
  add_override(app, c, "--n", "gen", "n_episodes", K::number, "number of episodes");
  add_override(app, c, "--label-mix", "gen", "label_mix", K::triple, "one,two,zero label shares");
  add_override(app, c, "--min-steps", "gen", "min_steps", K::number, "");
  add_override(app, c, "--max-steps", "gen", "max_steps", K::number, "");
  add_override(app, c, "--min-vocab", "gen", "min_vocab", K::number, "");
  add_override(app, c, "--max-vocab", "gen", "max_vocab", K::number, "");
  add_override(app, c, "--related-share", "gen", "related_share", K::number, "");
}

void add_split_flags(CLI::App* app, Common& c, const std::string& seed_flag) {
  add_override(app, c, "--train-fraction", "split", "train_fraction", Override::Kind::number, "");
  add_override(app, c, seed_flag, "split", "seed", Override::Kind::number, "split seed");
}

void add_train_flags(CLI::App* app, Common& c) {
  using K = Override::Kind;
  add_override(app, c, "--seed", "train", "seed", K::number, "init and shuffle seed");
  add_override(app, c, "--epochs", "train", "epochs", K::number, "");
  add_override(app, c, "--batch-size", "train", "batch_size", K::number, "");
  add_override(app, c, "--lr", "train", "learning_rate", K::number, "");
  add_override(app, c, "--weight-decay", "train", "weight_decay", K::number, "");
  add_override(app, c, "--k-ep", "train", "k_ep", K::number, "retrieved candidates per step");
  add_override(app, c, "--dropout", "train", "dropout", K::number, "encoder dropout rate, 0 disables");
  add_override(app, c, "--zero-label", "train", "zero_label", K::text, "noop_target | skip");
  add_override(app, c, "--d-model", "ranker", "d_model", K::number, "");
  add_override(app, c, "--layers", "ranker", "n_layers", K::number, "");
  add_override(app, c, "--heads", "ranker", "n_heads", K::number, "");
  add_override(app, c, "--mlp-hidden", "ranker", "mlp_hidden", K::number, "");
  add_override(app, c, "--gen-seed", "gen", "seed", K::number, "seed of the generated corpus");
  add_override(app, c, "--n", "gen", "n_episodes", K::number, "size of the generated corpus");
  add_split_flags(app, c, "--split-seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"niab: assistance ranking benchmark"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  // each Common owns its overrides; reserve so add_override never reallocates
  Common gen_c, split_c, train_c, eval_c, run_c, ablate_c;
  for (Common* c : {&gen_c, &split_c, &train_c, &eval_c, &run_c, &ablate_c}) c->overrides.reserve(64);

  auto* gen = app.add_subcommand("gen", "generate a corpus with vocab and sim snapshots");
  add_common(gen, gen_c);
  add_gen_flags(gen, gen_c);

  std::string split_corpus_path;
  auto* split = app.add_subcommand("split", "split a corpus into train and val folds");
  add_common(split, split_c);
  split->add_option("--corpus", split_corpus_path, "corpus JSONL")->required();
  add_split_flags(split, split_c, "--seed");

  CorpusArgs train_a;
  auto* trn = app.add_subcommand("train", "train the ranker");
  add_common(trn, train_c);
  add_corpus_args(trn, train_a);
  add_train_flags(trn, train_c);
  add_override(trn, train_c, "--ablation", "train", "ablation", Override::Kind::text, "full | no_retrieval | action_only");

  std::string eval_corpus, eval_ckpt;
  bool emit_csv = false;
  auto* evl = app.add_subcommand("eval", "score a policy on a corpus");
  add_common(evl, eval_c);
  evl->add_option("--corpus", eval_corpus, "corpus JSONL")->required();
  evl->add_option("--checkpoint", eval_ckpt, "checkpoint for the model policy");
  evl->add_flag("--emit-csv", emit_csv, "also write summary.csv");
  add_override(evl, eval_c, "--policy", "eval", "policy", Override::Kind::text,
               "model | random | cosine_top1 | oracle | no_op");
  add_override(evl, eval_c, "--seed", "eval", "seed", Override::Kind::number, "seed of the random policy");

  std::string run_corpus, run_episode, run_ckpt;
  auto* run = app.add_subcommand("run", "replay one episode verbosely");
  add_common(run, run_c);
  run->add_option("--corpus", run_corpus, "corpus JSONL")->required();
  run->add_option("--episode", run_episode, "episode id")->required();
  run->add_option("--checkpoint", run_ckpt, "checkpoint for the model policy");
  add_override(run, run_c, "--policy", "eval", "policy", Override::Kind::text,
               "model | random | cosine_top1 | oracle | no_op");
  add_override(run, run_c, "--seed", "eval", "seed", Override::Kind::number, "seed of the random policy");

  CorpusArgs ablate_a;
  auto* abl = app.add_subcommand("ablate", "train and evaluate full, no_retrieval and action_only");
  add_common(abl, ablate_c);
  add_corpus_args(abl, ablate_a);
  add_train_flags(abl, ablate_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("UsageError", e.what());
    return 1;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_c);
    if (split->parsed()) return cmd_split(split_c, split_corpus_path);
    if (trn->parsed()) return cmd_train(train_c, train_a);
    if (evl->parsed()) return cmd_eval(eval_c, eval_corpus, eval_ckpt, emit_csv);
    if (run->parsed()) return cmd_run(run_c, run_corpus, run_episode, run_ckpt);
    if (abl->parsed()) return cmd_ablate(ablate_c, ablate_a);
  } catch (const Error& e) {
    report_error(to_string(e.code()), e.what(), e.line());
    return is_validation_error(e.code()) ? 1 : 2;
  } catch (const std::exception& e) {
    report_error("InternalError", e.what());
    return 2;
  }
  return 1;
}
