#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "icl/analysis.hpp"
#include "icl/circuits.hpp"
#include "icl/config.hpp"
#include "icl/model.hpp"
#include "icl/patch.hpp"
#include "icl/runner.hpp"
#include "icl/study.hpp"
#include "icl/tasks.hpp"
#include "icl/trainer.hpp"

namespace fs = std::filesystem;
using namespace icl;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "out";
  int threads = 1;
  std::string precision = "f64";
  std::vector<std::uint64_t> seeds;
};

void apply_precision(const std::string& p) {
  if (p == "f64")
    set_global_precision(Precision::f64);
  else if (p == "f32")
    set_global_precision(Precision::f32);
  else
    throw ConfigError("config field 'precision': expected f32 or f64");
}

std::vector<TaskDefinition> resolve_tasks(const std::vector<std::string>& names,
                                          std::uint64_t seed) {
  auto all = make_synthetic_tasks(seed);
  std::vector<TaskDefinition> out;
  for (const auto& name : names) {
    bool found = false;
    for (const auto& t : all)
      if (t.name == name) {
        out.push_back(t);
        found = true;
      }
    if (!found && name == "affix_copy") {
      for (const auto& t : all)
        if (t.name == "affix") {
          out.push_back(make_copy_variant(t));
          found = true;
        }
    }
    if (!found && name == "multitoken") {
      out.push_back(make_multitoken_task(seed));
      found = true;
    }
    if (!found) throw ConfigError("config field 'tasks': unknown task '" + name + "'");
  }
  return out;
}

TaskDefinition resolve_task(const std::string& name, std::uint64_t seed) {
  return resolve_tasks({name}, seed).front();
}

struct Stopwatch {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
        .count();
  }
};

void finish(const CommonArgs& args, const Config& cfg, const std::string& command,
            std::vector<std::string> files, double seconds) {
  RunManifest m;
  m.config_hash = cfg.hash();
  m.command = command;
  m.seeds = args.seeds.empty()
                ? std::vector<std::uint64_t>{static_cast<std::uint64_t>(
                      cfg.get_int("seed", 0))}
                : args.seeds;
  m.seconds = seconds;
  m.result_files = std::move(files);
  write_file_atomic(fs::path(args.out_dir) / "manifest.json", manifest_to_json(m));
}

TrainConfig train_config_from(const Config& cfg, std::uint64_t seed) {
  TrainConfig tc;
  tc.n_layers = static_cast<int>(cfg.get_int("model.layers", tc.n_layers));
  tc.n_heads = static_cast<int>(cfg.get_int("model.heads", tc.n_heads));
  tc.d_model = static_cast<int>(cfg.get_int("model.d_model", tc.d_model));
  tc.steps = static_cast<int>(cfg.get_int("train.steps", tc.steps));
  tc.batch = static_cast<int>(cfg.get_int("train.batch", tc.batch));
  tc.n_min = static_cast<int>(cfg.get_int("train.n_min", tc.n_min));
  tc.n_max = static_cast<int>(cfg.get_int("train.n_max", tc.n_max));
  tc.lr = cfg.get_double("train.lr", tc.lr);
  tc.warmup = static_cast<int>(cfg.get_int("train.warmup", tc.warmup));
  tc.seed = seed;
  return tc;
}

// Evaluation prompt pairs for circuit work: clean + fully corrupted.
std::vector<PromptPair> make_pairs(const TaskDefinition& task, int n_shots,
                                   int n_prompts, std::uint64_t seed) {
  std::vector<PromptPair> pairs(static_cast<std::size_t>(n_prompts));
  for (int i = 0; i < n_prompts; ++i) {
    RngStream rng(seed, "pairs-" + task.name, static_cast<std::uint64_t>(i));
    PromptInstance clean = build_prompt(task, n_shots, rng);
    CorruptionSpec spec;
    spec.mode = CorruptionMode::full;
    pairs[static_cast<std::size_t>(i)] = {clean, corrupt(clean, task, spec, rng)};
  }
  return pairs;
}

double circuit_accuracy(const TransformerModel& model, const Circuit& circuit,
                        const std::vector<PromptPair>& pairs, int threads) {
  std::vector<int> ok(pairs.size(), 0);
  run_parallel(pairs.size(), threads, [&](std::size_t i) {
    const auto& [clean, corrupted] = pairs[i];
    ForwardTrace donor = model.forward(corrupted);
    PatchPlan plan;
    plan.counterfactual = &donor;
    plan.circuit = &circuit;
    auto res = patched_decode(model, clean, plan, 8);
    ok[i] = !res.truncated && res.tokens == clean.target.tokens ? 1 : 0;
  });
  int total = 0;
  for (int v : ok) total += v;
  return static_cast<double>(total) / static_cast<double>(pairs.size());
}

double plain_accuracy(const TransformerModel& model,
                      const std::vector<PromptPair>& pairs, int threads) {
  std::vector<int> ok(pairs.size(), 0);
  run_parallel(pairs.size(), threads, [&](std::size_t i) {
    auto res = model.greedy_decode(pairs[i].first, {}, 8);
    ok[i] = !res.truncated && res.tokens == pairs[i].first.target.tokens ? 1 : 0;
  });
  int total = 0;
  for (int v : ok) total += v;
  return static_cast<double>(total) / static_cast<double>(pairs.size());
}

// Candidate families, simplest first.
std::vector<Circuit> candidate_circuits(int n_shots) {
  std::vector<Circuit> out;
  Circuit agg = make_aggregation_circuit(n_shots);
  out.push_back(agg);
  auto with = [&](const std::string& name, const std::vector<int>& groups,
                  bool local) {
    Circuit c = agg;
    c.name = name;
    for (int g : groups)
      for (const auto& e : make_context_edges(g, n_shots, local))
        c.edges.push_back(e);
    out.push_back(c);
  };
  with("aggregation+ys_local", {2}, true);
  with("aggregation+xs_local", {1}, true);
  with("aggregation+xs_ys_local", {1, 2}, true);
  with("aggregation+ys", {2}, false);
  with("aggregation+xs", {1}, false);
  with("aggregation+xs_ys", {1, 2}, false);
  with("aggregation+all_context", {1, 2, 3, 4, 5}, false);
  std::stable_sort(out.begin(), out.end(), [](const Circuit& a, const Circuit& b) {
    return a.edges.size() < b.edges.size();
  });
  return out;
}

int cmd_train(const CommonArgs& args, const Config& cfg) {
  Stopwatch sw;
  const std::uint64_t seed =
      args.seeds.empty() ? static_cast<std::uint64_t>(cfg.get_int("seed", 0))
                         : args.seeds.front();
  auto mixture = resolve_tasks(cfg.get_list("tasks"), seed);
  TrainConfig tc = train_config_from(cfg, seed);
  TransformerModel model = train_token_model(
      tc, mixture,
      [](int step, double loss) {
        std::cerr << "step " << step << " loss " << loss << "\n";
      });

  const int eval_shots = static_cast<int>(cfg.get_int("eval.shots", 10));
  const int eval_prompts = static_cast<int>(cfg.get_int("eval.prompts", 100));
  std::ostringstream csv;
  csv << "task,shots,accuracy\n";
  for (const auto& task : mixture) {
    double acc = evaluate_decode_accuracy(model, task, eval_shots, eval_prompts,
                                          seed + 1);
    csv << task.name << ',' << eval_shots << ',' << acc << '\n';
  }
  write_file_atomic(fs::path(args.out_dir) / "model.json", model.save_json());
  write_file_atomic(fs::path(args.out_dir) / "eval.csv", csv.str());
  finish(args, cfg, "train", {"model.json", "eval.csv"}, sw.seconds());
  return 0;
}

int cmd_discover(const CommonArgs& args, const Config& cfg) {
  Stopwatch sw;
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  TransformerModel model =
      TransformerModel::load_json(read_file(cfg.get_string("checkpoint")));
  TaskDefinition task = resolve_task(cfg.get_string("task"), seed);
  const int n_prompts = static_cast<int>(cfg.get_int("prompts", 100));
  const int big_n = static_cast<int>(cfg.get_int("shots", 10));

  auto pairs3 = make_pairs(task, 3, n_prompts, seed);
  auto pairsN = make_pairs(task, big_n, n_prompts, seed);
  const double full3 = plain_accuracy(model, pairs3, args.threads);
  const double fullN = plain_accuracy(model, pairsN, args.threads);

  auto cands3 = candidate_circuits(3);
  auto candsN = candidate_circuits(big_n);
  std::vector<CandidateAccuracy> accs(cands3.size());
  std::ostringstream summary;
  summary << "circuit,edges_n3,acc_n3,acc_n" << big_n << "\n";
  summary << "full,," << full3 << ',' << fullN << '\n';
  for (std::size_t i = 0; i < cands3.size(); ++i) {
    accs[i].at_n3 = circuit_accuracy(model, cands3[i], pairs3, args.threads);
    accs[i].at_n10 = circuit_accuracy(model, candsN[i], pairsN, args.threads);
    summary << cands3[i].name << ',' << cands3[i].edges.size() << ','
            << accs[i].at_n3 << ',' << accs[i].at_n10 << '\n';
  }
  std::size_t chosen = select_circuit(cands3, accs, full3, fullN);
  const Circuit& position_circuit = candsN[chosen];

  PruneSchedule hs;
  PruneResult heads = prune_heads(model, pairsN, hs);
  EdgePruneSchedule es;
  EdgePruneResult edges =
      edge_attribution_prune(model, position_circuit, heads.kept, pairsN, es);

  std::vector<std::pair<PromptInstance, PromptInstance>> fv_pairs;
  for (int i = 0; i < n_prompts; ++i) {
    RngStream rng(seed, "fv", static_cast<std::uint64_t>(i));
    PromptInstance clean = build_prompt(task, big_n, rng);
    fv_pairs.push_back({clean, shuffle_labels(clean, rng)});
  }
  auto fv = function_vector_scores(
      model, fv_pairs,
      std::min<std::size_t>(10, static_cast<std::size_t>(model.config().n_layers *
                                                         model.config().n_heads)));

  write_file_atomic(fs::path(args.out_dir) / "summary.csv", summary.str());
  write_file_atomic(fs::path(args.out_dir) / "circuit.json",
                    circuit_to_json(position_circuit));
  write_file_atomic(fs::path(args.out_dir) / "importance.csv",
                    importance_to_csv(heads.history));
  write_file_atomic(fs::path(args.out_dir) / "circuit.dot",
                    circuit_to_dot_with_fv(edges.circuit, fv));
  write_file_atomic(fs::path(args.out_dir) / "activation_circuit.json",
                    circuit_to_json(edges.circuit));
  finish(args, cfg, "discover",
         {"summary.csv", "circuit.json", "importance.csv", "circuit.dot",
          "activation_circuit.json"},
         sw.seconds());
  return 0;
}

int cmd_patch(const CommonArgs& args, const Config& cfg) {
  Stopwatch sw;
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  TransformerModel model =
      TransformerModel::load_json(read_file(cfg.get_string("checkpoint")));
  TaskDefinition task = resolve_task(cfg.get_string("task"), seed);
  const int n_shots = static_cast<int>(cfg.get_int("shots", 10));
  const int n_prompts = static_cast<int>(cfg.get_int("prompts", 100));
  const std::string circuit_name = cfg.get_string("circuit", "aggregation");

  Circuit circuit;
  if (circuit_name == "aggregation") {
    circuit = make_aggregation_circuit(n_shots);
  } else if (circuit_name == "all") {
    circuit.name = "all";
    circuit.level = CircuitLevel::position;
    RngStream rng(seed, "probe", 0);
    PromptInstance probe = build_prompt(task, n_shots, rng);
    for (const auto& e : all_position_edges(probe))
      if (e.src.kind != RoleKind::bos) circuit.edges.push_back(e);
  } else {
    circuit = circuit_from_json(read_file(circuit_name));
  }

  CorruptionSpec spec;
  const std::string mode = cfg.get_string("corruption", "full");
  for (CorruptionMode m :
       {CorruptionMode::full, CorruptionMode::x_out_of_space,
        CorruptionMode::x_in_space, CorruptionMode::y_out_of_space,
        CorruptionMode::y_in_space, CorruptionMode::functional_preserving})
    if (corruption_mode_name(m) == mode) spec.mode = m;

  std::vector<std::string> rows(static_cast<std::size_t>(n_prompts));
  run_parallel(static_cast<std::size_t>(n_prompts), args.threads, [&](std::size_t i) {
    RngStream rng(seed, "patch", static_cast<std::uint64_t>(i));
    PromptInstance clean = build_prompt(task, n_shots, rng);
    PromptInstance corrupted = corrupt(clean, task, spec, rng);
    ForwardTrace donor = model.forward(corrupted);
    PatchPlan plan;
    plan.counterfactual = &donor;
    plan.circuit = &circuit;
    auto res = patched_decode(model, clean, plan, 8);
    AnswerClass cls = classify_answer(res.tokens, clean, task, &corrupted);
    std::ostringstream os;
    os << i << ',' << (res.tokens == clean.target.tokens ? 1 : 0) << ','
       << answer_class_name(cls) << '\n';
    rows[i] = os.str();
  });

  std::ostringstream csv;
  csv << "prompt,correct,answer_class\n";
  for (const auto& r : rows) csv << r;
  write_file_atomic(fs::path(args.out_dir) / "patch.csv", csv.str());
  finish(args, cfg, "patch", {"patch.csv"}, sw.seconds());
  return 0;
}

int cmd_fvheads(const CommonArgs& args, const Config& cfg) {
  Stopwatch sw;
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  TransformerModel model =
      TransformerModel::load_json(read_file(cfg.get_string("checkpoint")));
  TaskDefinition task = resolve_task(cfg.get_string("task"), seed);
  const int n_shots = static_cast<int>(cfg.get_int("shots", 10));
  const int n_prompts = static_cast<int>(cfg.get_int("prompts", 50));
  const std::size_t top_k = static_cast<std::size_t>(cfg.get_int("top_k", 10));

  std::vector<std::pair<PromptInstance, PromptInstance>> pairs;
  for (int i = 0; i < n_prompts; ++i) {
    RngStream rng(seed, "fv", static_cast<std::uint64_t>(i));
    PromptInstance clean = build_prompt(task, n_shots, rng);
    pairs.push_back({clean, shuffle_labels(clean, rng)});
  }
  auto scores = function_vector_scores(model, pairs, top_k);
  std::ostringstream csv;
  csv << "layer,head,score\n";
  for (const auto& s : scores)
    csv << s.layer << ',' << s.head << ',' << s.score << '\n';
  write_file_atomic(fs::path(args.out_dir) / "fvheads.csv", csv.str());
  finish(args, cfg, "fvheads", {"fvheads.csv"}, sw.seconds());
  return 0;
}

int cmd_ambiguity(const CommonArgs& args, const Config& cfg) {
  Stopwatch sw;
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  TransformerModel model =
      TransformerModel::load_json(read_file(cfg.get_string("checkpoint")));
  TaskDefinition task = resolve_task(cfg.get_string("task", "affix"), seed);
  AmbiguityTable table = run_ambiguity_h1_h2(
      model, task, static_cast<int>(cfg.get_int("shots", 10)),
      static_cast<int>(cfg.get_int("ambiguous", 7)),
      static_cast<int>(cfg.get_int("prompts", 100)), seed,
      cfg.get_double("alpha", 0.05));
  write_file_atomic(fs::path(args.out_dir) / "ambiguity.csv",
                    ambiguity_table_to_csv(table));
  finish(args, cfg, "ambiguity", {"ambiguity.csv"}, sw.seconds());
  return 0;
}

int cmd_regression_study(const CommonArgs& args, const Config& cfg) {
  Stopwatch sw;
  StudyConfig sc;
  sc.d = static_cast<int>(cfg.get_int("study.d", sc.d));
  if (cfg.has("study.depths")) {
    sc.depths.clear();
    for (auto v : cfg.get_int_list("study.depths"))
      sc.depths.push_back(static_cast<int>(v));
  }
  if (cfg.has("study.subcircuits")) {
    sc.subcircuits.clear();
    for (const auto& s : cfg.get_list("study.subcircuits"))
      sc.subcircuits.push_back(subcircuit_from_name(s));
  }
  sc.steps = static_cast<int>(cfg.get_int("study.steps", sc.steps));
  sc.batch = static_cast<int>(cfg.get_int("study.batch", sc.batch));
  sc.n_min = static_cast<int>(cfg.get_int("study.n_min", sc.n_min));
  sc.n_max = static_cast<int>(cfg.get_int("study.n_max", sc.n_max));
  sc.n_seeds = static_cast<int>(cfg.get_int("study.seeds", sc.n_seeds));
  sc.seed = static_cast<std::uint64_t>(cfg.get_int("seed", 0));
  sc.d_model = static_cast<int>(cfg.get_int("study.d_model", sc.d_model));
  sc.n_heads = static_cast<int>(cfg.get_int("study.heads", sc.n_heads));
  sc.lr = cfg.get_double("study.lr", sc.lr);
  sc.warmup = static_cast<int>(cfg.get_int("study.warmup", sc.warmup));
  sc.eval_prompts = static_cast<int>(cfg.get_int("study.eval_prompts", sc.eval_prompts));
  sc.dim_ramp = static_cast<int>(cfg.get_int("study.dim_ramp", sc.dim_ramp));
  sc.len_ramp = static_cast<int>(cfg.get_int("study.len_ramp", sc.len_ramp));
  sc.decay_start = static_cast<int>(cfg.get_int("study.decay_start", sc.decay_start));

  StudyResult res = run_study(sc);
  write_file_atomic(fs::path(args.out_dir) / "study.csv", study_to_csv(res));
  write_file_atomic(fs::path(args.out_dir) / "study.json", study_to_json(res));
  finish(args, cfg, "regression-study", {"study.csv", "study.json"}, sw.seconds());
  return 0;
}

int cmd_report(const CommonArgs& args, const Config& cfg) {
  Stopwatch sw;
  const std::string results = cfg.get_string("results");
  std::vector<fs::path> manifests;
  if (fs::exists(results))
    for (const auto& entry : fs::recursive_directory_iterator(results))
      if (entry.is_regular_file() && entry.path().filename() == "manifest.json")
        manifests.push_back(entry.path());
  std::sort(manifests.begin(), manifests.end());

  std::optional<std::uint64_t> hash;
  std::ostringstream table;
  table << "source,file\n";
  std::ostringstream text;
  for (const auto& mp : manifests) {
    const std::string body = read_file(mp);
    // minimal parse: reuse the json vendor header via runner? keep it simple
    auto pos = body.find("\"config_hash\"");
    if (pos == std::string::npos) continue;
    std::uint64_t h = std::stoull(body.substr(body.find(':', pos) + 1));
    if (hash && *hash != h)
      throw std::runtime_error("report: mixed config hashes in " + results);
    hash = h;
    for (const auto& entry : fs::directory_iterator(mp.parent_path()))
      if (entry.path().extension() == ".csv") {
        table << mp.parent_path().filename().string() << ','
              << entry.path().filename().string() << '\n';
        text << "== " << entry.path().string() << "\n"
             << read_file(entry.path()) << "\n";
      }
  }
  write_file_atomic(fs::path(args.out_dir) / "report_index.csv", table.str());
  write_file_atomic(fs::path(args.out_dir) / "report.txt", text.str());
  finish(args, cfg, "report", {"report_index.csv", "report.txt"}, sw.seconds());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"in-context learning circuit experiments"};
  app.require_subcommand(1);

  CommonArgs args;
  std::map<std::string, std::function<int(const CommonArgs&, const Config&)>> handlers{
      {"train", cmd_train},
      {"discover", cmd_discover},
      {"patch", cmd_patch},
      {"fvheads", cmd_fvheads},
      {"ambiguity", cmd_ambiguity},
      {"regression-study", cmd_regression_study},
      {"report", cmd_report},
  };
  for (auto& [name, fn] : handlers) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", args.config_path, "config file")->required();
    sub->add_option("--out", args.out_dir, "output directory");
    sub->add_option("--threads", args.threads, "worker threads");
    sub->add_option("--precision", args.precision, "f32 or f64");
    sub->add_option("--seeds", args.seeds, "seed overrides");
  }

  try {
    app.parse(argc, argv);
    apply_precision(args.precision);
    Config cfg = Config::load(args.config_path);
    const std::string sub = app.get_subcommands().front()->get_name();
    return handlers.at(sub)(args, cfg);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
