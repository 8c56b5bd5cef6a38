#pragma once

// Experiment configuration and the verify / train / probe / bounds / sweep commands.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ccl/bounds.hpp"
#include "ccl/continual.hpp"
#include "ccl/core.hpp"
#include "ccl/data.hpp"
#include "ccl/fixtures.hpp"
#include "ccl/losses.hpp"
#include "ccl/trainer.hpp"

namespace ccl {

inline constexpr const char* kVersion = "1.0.0";

enum ExitCode : int { kExitOk = 0, kExitViolation = 1, kExitConfig = 2, kExitIo = 3 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using nlohmann::json;

inline json default_config() {
  return json::parse(R"({
    "scenario": {"kind": "blobs", "tasks": 5, "classes_per_task": 2, "points_per_class": 40,
                 "input_dim": 2, "spread": 0.15, "margin_deg": 10.0, "test_fraction": 0.2,
                 "images": "", "labels": "", "train_per_class": 100, "test_per_class": 25,
                 "rho": 1.0, "loss_rule": "equal", "base_loss": 1.0, "measured": [], "weights": []},
    "encoder": {"hidden": [32], "output_dim": 8, "activation": "tanh"},
    "trainer": {"learning_rate": 0.05, "epochs": 200, "batch_size": 32, "momentum": 0.9,
                "divide_by_views": true},
    "schedule": {"mode": "max", "lambda0": 1.0, "kappa": 1.0, "threshold": null, "delta": 0.1},
    "temperatures": {"contrastive": 0.5, "current": 0.2, "past": 0.01},
    "buffer": 50,
    "augment": {"jitter": 0.05, "rotate_deg": 15.0, "pixel_shift": 1},
    "probe": {"enabled": true, "epochs": 100, "learning_rate": 0.1, "batch_size": 32,
              "checkpoint": "", "state": ""},
    "bounds": {"evaluate": false, "negatives": 1, "weights": "uniform", "grid": "0.01:20:400",
               "trace": "", "surrogate": "analytic"},
    "verify": {"lemma_trials": 1000, "negatives": [1, 2, 5], "decomposition_trials": 200,
               "decomposition_negatives": [1, 2, 4], "gradient_seeds": 20, "alpha_offset": 0.0},
    "sweep": {"seeds": [], "vary": {}},
    "resume": {"dir": "", "task": 0},
    "seed": 0,
    "output": "ccl_out"
  })");
}

namespace detail {

inline bool same_kind(const json& a, const json& b) {
  if (a.is_null()) return b.is_null() || b.is_number();
  if (a.is_number()) return b.is_number();
  return a.type() == b.type();
}

inline void merge_checked(json& into, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!into.contains(key)) throw ConfigError("config: unknown key '" + here + "'");
    json& slot = into[key];
    if (here == "sweep.vary") {
      if (!value.is_object()) throw ConfigError("config: 'sweep.vary' must be an object");
      slot = value;
    } else if (slot.is_object()) {
      merge_checked(slot, value, here);
    } else {
      if (!same_kind(slot, value)) throw ConfigError("config: wrong type for '" + here + "'");
      slot = value;
    }
  }
}

}  // namespace detail

/// Defaults overlaid with the user document; unknown keys and type changes are rejected.
inline json resolve_config(const json& user) {
  json cfg = default_config();
  detail::merge_checked(cfg, user, "");
  return cfg;
}

inline json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write " + p.string());
  os << text;
  if (!os) throw IoError("write failed for " + p.string());
}

inline void write_json(const std::filesystem::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

/// Sets a dotted key such as "schedule.mode" inside a resolved config.
inline void set_path(json& cfg, const std::string& dotted, const json& value) {
  json* node = &cfg;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) throw ConfigError("config: unknown key '" + dotted + "'");
    node = &(*node)[parts[i]];
  }
  if (!node->contains(parts.back())) throw ConfigError("config: unknown key '" + dotted + "'");
  (*node)[parts.back()] = value;
}

/// Short sweep names for the commonly varied knobs.
inline std::string sweep_key(const std::string& name) {
  if (name == "lambda0" || name == "λ_0") return "schedule.lambda0";
  if (name == "kappa" || name == "κ") return "schedule.kappa";
  if (name == "mode") return "schedule.mode";
  return name;
}

inline ContinualConfig continual_config(const json& c) {
  ContinualConfig r;
  const auto& enc = c.at("encoder");
  r.hidden = enc.at("hidden").get<std::vector<std::size_t>>();
  r.output_dim = enc.at("output_dim").get<std::size_t>();
  r.activation = activation_from_string(enc.at("activation").get<std::string>());
  const auto& tr = c.at("trainer");
  r.sgd.learning_rate = tr.at("learning_rate").get<double>();
  r.sgd.epochs = tr.at("epochs").get<int>();
  r.sgd.batch_size = tr.at("batch_size").get<std::size_t>();
  r.sgd.momentum = tr.at("momentum").get<double>();
  r.divide_by_views = tr.at("divide_by_views").get<bool>();
  r.seed = c.at("seed").get<std::uint64_t>();
  r.sgd.seed = 0;
  const auto& sc = c.at("schedule");
  r.schedule.mode = lambda_mode_from_string(sc.at("mode").get<std::string>());
  r.schedule.lambda0 = sc.at("lambda0").get<double>();
  r.schedule.kappa = sc.at("kappa").get<double>();
  if (!sc.at("threshold").is_null()) r.threshold = sc.at("threshold").get<double>();
  r.delta = sc.at("delta").get<double>();
  const auto& tp = c.at("temperatures");
  r.temperatures = {tp.at("contrastive").get<double>(), tp.at("current").get<double>(), tp.at("past").get<double>()};
  r.buffer = c.at("buffer").get<std::size_t>();
  const auto& au = c.at("augment");
  r.augment.jitter = au.at("jitter").get<double>();
  r.augment.rotate_deg = au.at("rotate_deg").get<double>();
  r.augment.pixel_shift = au.at("pixel_shift").get<int>();
  const auto& pr = c.at("probe");
  r.run_probe = pr.at("enabled").get<bool>();
  r.probe.epochs = pr.at("epochs").get<int>();
  r.probe.learning_rate = pr.at("learning_rate").get<double>();
  r.probe.batch_size = pr.at("batch_size").get<std::size_t>();
  const auto& bo = c.at("bounds");
  r.bounds.evaluate = bo.at("evaluate").get<bool>();
  r.bounds.negatives = bo.at("negatives").get<int>();
  r.bounds.weights = bo.at("weights").get<std::string>();

  if (r.sgd.learning_rate <= 0.0) throw ConfigError("config: trainer.learning_rate must be > 0");
  if (r.sgd.epochs < 1) throw ConfigError("config: trainer.epochs must be >= 1");
  if (r.sgd.batch_size < 1) throw ConfigError("config: trainer.batch_size must be >= 1");
  if (r.sgd.momentum < 0.0 || r.sgd.momentum >= 1.0) throw ConfigError("config: trainer.momentum must be in [0,1)");
  if (r.schedule.lambda0 < 0.0) throw ConfigError("config: schedule.lambda0 must be >= 0");
  if (r.schedule.kappa < 0.0) throw ConfigError("config: schedule.kappa must be >= 0");
  if (r.threshold && *r.threshold <= 0.0) throw ConfigError("config: schedule.threshold must be > 0");
  if (r.delta < 0.0) throw ConfigError("config: schedule.delta must be >= 0");
  if (r.temperatures.contrastive <= 0.0 || r.temperatures.current <= 0.0 || r.temperatures.past <= 0.0)
    throw ConfigError("config: temperatures must be > 0");
  if (r.output_dim < 2) throw ConfigError("config: encoder.output_dim must be >= 2");
  if (r.bounds.negatives < 1) throw ConfigError("config: bounds.negatives must be >= 1");
  if (r.bounds.weights != "uniform" && r.bounds.weights != "buffer")
    throw ConfigError("config: bounds.weights must be 'uniform' or 'buffer'");
  return r;
}

inline bool is_example_scenario(const json& c) {
  const auto kind = c.at("scenario").at("kind").get<std::string>();
  return kind == "example1" || kind == "example2" || kind == "example3" || kind == "custom";
}

inline ScenarioSpec scenario_spec(const json& c) {
  const auto& s = c.at("scenario");
  const auto kind = s.at("kind").get<std::string>();
  ScenarioSpec spec;
  spec.tasks = s.at("tasks").get<int>();
  spec.rho = s.at("rho").get<double>();
  if (kind == "example1") spec.weights = WeightRule::example1;
  else if (kind == "example2") spec.weights = WeightRule::example2;
  else if (kind == "example3") spec.weights = WeightRule::example3;
  else if (kind == "custom") {
    spec.weights = WeightRule::custom;
    spec.custom = s.at("weights").get<std::vector<std::vector<double>>>();
  } else throw ConfigError("config: scenario '" + kind + "' is not a bound scenario");
  const auto rule = s.at("loss_rule").get<std::string>();
  if (rule == "equal") spec.losses = LossRule::equal;
  else if (rule == "geometric") spec.losses = LossRule::geometric;
  else if (rule == "measured") spec.losses = LossRule::measured;
  else throw ConfigError("config: unknown loss_rule '" + rule + "'");
  spec.base_loss = s.at("base_loss").get<double>();
  spec.measured = s.at("measured").get<std::vector<double>>();
  if (spec.tasks < 2) throw ConfigError("config: bound scenarios need at least 2 tasks");
  if (spec.rho <= 0.0) throw ConfigError("config: scenario.rho must be > 0");
  return spec;
}

/// Builds the task sequence named by the scenario block.
inline std::vector<TaskSplit> build_tasks(const json& c, ContinualConfig* run = nullptr) {
  const auto& s = c.at("scenario");
  const auto kind = s.at("kind").get<std::string>();
  const auto seed = c.at("seed").get<std::uint64_t>();
  BlobConfig blob;
  blob.tasks = s.at("tasks").get<int>();
  blob.classes_per_task = s.at("classes_per_task").get<int>();
  blob.points_per_class = s.at("points_per_class").get<int>();
  blob.input_dim = s.at("input_dim").get<std::size_t>();
  blob.spread = s.at("spread").get<double>();
  blob.margin_deg = s.at("margin_deg").get<double>();
  blob.test_fraction = s.at("test_fraction").get<double>();
  if (kind == "blobs") {
    if (blob.tasks < 1 || blob.classes_per_task < 1 || blob.points_per_class < 1)
      throw ConfigError("config: scenario sizes must be positive");
    return make_blob_sequence(blob, seed);
  }
  if (kind == "rotated") {
    BlobConfig base = blob;
    base.tasks = 1;
    base.input_dim = 2;
    const auto b = make_blob_sequence(base, seed);
    return make_rotated_sequence(blob.tasks, b.front(), seed);
  }
  if (kind == "idx") {
    const auto set = idx_read(s.at("images").get<std::string>(), s.at("labels").get<std::string>());
    IdxSplitConfig split{blob.classes_per_task, s.at("train_per_class").get<int>(), s.at("test_per_class").get<int>()};
    if (run) run->augment.image_side = set.rows == set.cols ? set.rows : 0;
    auto tasks = idx_tasks(set, split, seed);
    if (blob.tasks > 0 && static_cast<int>(tasks.size()) > blob.tasks) tasks.resize(blob.tasks);
    if (tasks.empty()) throw ConfigError("config: IDX files produced no tasks");
    return tasks;
  }
  throw ConfigError("config: scenario '" + kind + "' cannot be trained");
}

inline json manifest(const std::string& command, const json& cfg) {
  return {{"command", command},
          {"version", kVersion},
          {"config", cfg},
          {"seed", cfg.at("seed")},
          {"substreams", {"centers", "data", "init", "batch", "augment", "buffer", "probe", "rotation", "idx"}}};
}

inline std::filesystem::path prepare_output(const json& cfg) {
  std::filesystem::path out = cfg.at("output").get<std::string>();
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  return out;
}

// ---------------------------------------------------------------------------
// verify

struct PropertyResult {
  std::string name;
  bool passed = true;
  double worst = 0.0;
  double threshold = 0.0;
  std::string detail;
};

inline json to_json(const PropertyResult& p) {
  return {{"name", p.name}, {"passed", p.passed}, {"worst", p.worst}, {"threshold", p.threshold}, {"detail", p.detail}};
}

// 40-digit evaluations of the closed forms at k = 1.
inline constexpr double kAlpha1 = 1.7615941559557648881;
inline constexpr double kBeta1 = 0.014810201563845972046;
inline constexpr double kBetaPrime1 = -5.5083781103476838042;

inline std::vector<PropertyResult> verify_properties(const json& cfg, std::ostream& log) {
  const auto& v = cfg.at("verify");
  const double alpha_offset = v.at("alpha_offset").get<double>();
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  std::vector<PropertyResult> out;
  auto corrupt = [&](BoundConstants c) {
    c.alpha += alpha_offset;
    return c;
  };

  {
    const auto c = corrupt(constants(1));
    PropertyResult p{"constants", true, 0.0, 1e-6, ""};
    const double errs[] = {std::abs(c.alpha - kAlpha1), std::abs(c.alpha - (1.0 + std::tanh(1.0))),
                           std::abs(c.beta - kBeta1), std::abs(c.beta_prime - kBetaPrime1),
                           std::abs(c.beta_prime - beta_prime_single(c.alpha))};
    for (double e : errs) p.worst = std::max(p.worst, e);
    p.passed = p.worst <= 1e-6 && std::abs(c.beta_prime - beta_prime_single(c.alpha)) <= 1e-12 && c.alpha > 1.0 &&
               c.beta > 0.0 && c.beta_prime < 0.0;
    std::ostringstream d;
    d << std::setprecision(12) << "alpha=" << c.alpha << " beta=" << c.beta << " beta'=" << c.beta_prime;
    p.detail = d.str();
    out.push_back(p);
  }

  for (int k : v.at("negatives").get<std::vector<int>>()) {
    const auto c = corrupt(constants(k));
    std::mt19937_64 rng(substream(seed, "verify-lemma", static_cast<std::uint64_t>(k)));
    PropertyResult up{"lemma_upper_k" + std::to_string(k), true, std::numeric_limits<double>::infinity(), -1e-10, ""};
    PropertyResult lo{"lemma_lower_k" + std::to_string(k), true, std::numeric_limits<double>::infinity(), -1e-10, ""};
    const int trials = v.at("lemma_trials").get<int>();
    for (int i = 0; i < trials; ++i) {
      const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 4)(rng);
      const auto dist = random_distribution(n, 3, rng);
      const std::size_t dim = std::uniform_int_distribution<std::size_t>(2, 6)(rng);
      const auto ft = random_table_model(dist, dim, rng);
      const auto fp = random_table_model(dist, dim, rng);
      const auto s = lemma1_slack(ft, fp, dist, k, c);
      up.worst = std::min(up.worst, s.upper);
      lo.worst = std::min(lo.worst, s.lower);
    }
    up.passed = up.worst >= -1e-10;
    lo.passed = lo.worst >= -1e-10;
    out.push_back(up);
    out.push_back(lo);
    log << "lemma k=" << k << ": worst upper slack " << up.worst << ", worst lower slack " << lo.worst << "\n";
  }

  {
    PropertyResult p{"decomposition_identity", true, 0.0, 1e-10, ""};
    std::mt19937_64 rng(substream(seed, "verify-decomposition"));
    const auto ks = v.at("decomposition_negatives").get<std::vector<int>>();
    const int trials = v.at("decomposition_trials").get<int>();
    for (int i = 0; i < trials; ++i) {
      const int k = ks[static_cast<std::size_t>(i) % ks.size()];
      const std::size_t n = std::uniform_int_distribution<std::size_t>(2, k >= 4 ? 3 : 4)(rng);
      const auto dist = random_distribution(n, 3, rng);
      const auto ft = random_table_model(dist, 4, rng);
      const auto fp = random_table_model(dist, 4, rng);
      p.worst = std::max(p.worst, std::abs(decomposition_residual(ft, fp, dist, k)));
    }
    p.passed = p.worst <= 1e-10;
    out.push_back(p);
  }

  {
    PropertyResult p{"gradient_check", true, 0.0, 1e-4, ""};
    const int seeds = v.at("gradient_seeds").get<int>();
    for (int s = 0; s < seeds; ++s) {
      std::mt19937_64 rng(substream(seed, "verify-gradient", static_cast<std::uint64_t>(s)));
      const auto enc = Encoder::initialized({2, 16, 8}, Activation::tanh, rng());
      const auto prev = Encoder::initialized({2, 16, 8}, Activation::tanh, rng());
      const auto batch = random_view_batch(4, 2, 2, rng);
      p.worst = std::max(p.worst, finite_diff_check(enc, &prev, batch, 1.0, Temperatures{}, 1e-5));
    }
    p.passed = p.worst < 1e-4;
    out.push_back(p);
  }
  return out;
}

inline int cmd_verify(const json& cfg, std::ostream& log) {
  const auto out = prepare_output(cfg);
  const auto props = verify_properties(cfg, log);
  bool ok = true;
  json report;
  report["properties"] = json::array();
  for (const auto& p : props) {
    report["properties"].push_back(to_json(p));
    log << (p.passed ? "PASS " : "FAIL ") << p.name << " worst=" << p.worst << "\n";
    ok = ok && p.passed;
  }
  report["passed"] = ok;
  write_json(out / "verify.json", report);
  write_json(out / "manifest.json", manifest("verify", cfg));
  if (!ok)
    for (const auto& p : props)
      if (!p.passed) log << "violated property: " << p.name << "\n";
  return ok ? kExitOk : kExitViolation;
}

// ---------------------------------------------------------------------------
// train

inline json task_record_json(const TaskRecord& r) {
  json comp = json::object();
  for (const auto& [k, v] : r.buffer_composition) comp[std::to_string(k)] = v;
  return {{"task", r.task},
          {"l_con", r.l_con},
          {"l_dis", r.l_dis},
          {"lambda", r.lambda ? json(*r.lambda) : json(nullptr)},
          {"buffer_composition", comp},
          {"mixture_estimate", r.mixture_estimate},
          {"U", r.U ? json(*r.U) : json(nullptr)},
          {"checkpoint", r.checkpoint}};
}

inline TaskRecord task_record_from_json(const json& j) {
  TaskRecord r;
  r.task = j.at("task").get<int>();
  r.l_con = j.at("l_con").get<double>();
  r.l_dis = j.at("l_dis").get<double>();
  if (!j.at("lambda").is_null()) r.lambda = j.at("lambda").get<double>();
  for (const auto& [k, v] : j.at("buffer_composition").items()) r.buffer_composition[std::stoi(k)] = v.get<std::size_t>();
  r.mixture_estimate = j.at("mixture_estimate").get<std::vector<double>>();
  if (!j.at("U").is_null()) r.U = j.at("U").get<double>();
  r.checkpoint = j.at("checkpoint").get<std::string>();
  return r;
}

inline json state_json(const RunState& st) {
  json tasks = json::array();
  for (const auto& r : st.trace.tasks) tasks.push_back(task_record_json(r));
  return {{"completed", st.completed},
          {"buffer", st.buffer.to_json()},
          {"schedule", st.schedule.to_json()},
          {"tasks", tasks}};
}

/// Rebuilds the state at the end of task `task` from a train output directory.
inline RunState load_state(const std::filesystem::path& dir, int task) {
  const auto j = read_json_file((dir / ("state_" + std::to_string(task) + ".json")).string());
  RunState st;
  st.completed = j.at("completed").get<int>();
  st.buffer = ReplayBuffer::from_json(j.at("buffer"));
  st.schedule = LambdaSchedule::from_json(j.at("schedule"));
  for (const auto& r : j.at("tasks")) st.trace.tasks.push_back(task_record_from_json(r));
  for (int t = 1; t <= st.completed; ++t)
    st.snapshots.push_back(load_checkpoint((dir / ("task_" + std::to_string(t) + ".ccl")).string()).encoder());
  st.encoder = st.snapshots.back();
  return st;
}

inline int cmd_train(json cfg, std::ostream& log) {
  const auto out = prepare_output(cfg);
  ContinualConfig run = continual_config(cfg);
  const auto tasks = build_tasks(cfg, &run);
  if (run.schedule.mode == LambdaMode::theorem2 && !run.threshold) {
    run.threshold = calibrate_threshold(tasks, run);
    cfg["schedule"]["threshold"] = *run.threshold;
    log << "calibrated threshold u = " << *run.threshold << "\n";
  }

  std::ofstream csv(out / "epochs.csv");
  if (!csv) throw IoError("cannot write " + (out / "epochs.csv").string());
  csv << "task,epoch,l_con,l_dis,lambda\n" << std::setprecision(17);
  auto sink = [&](const EpochRecord& e) {
    csv << e.task << ',' << e.epoch << ',' << e.l_con << ',' << e.l_dis << ',' << e.lambda << '\n';
  };
  auto on_task_end = [&](const RunState& st) {
    const int t = st.completed;
    const std::string name = "task_" + std::to_string(t) + ".ccl";
    const double lam = st.trace.tasks.back().lambda.value_or(0.0);
    save_checkpoint((out / name).string(), make_checkpoint(st.encoder, run.seed, t, lam, run.temperatures));
    const_cast<RunState&>(st).trace.tasks.back().checkpoint = name;
    write_json(out / ("state_" + std::to_string(t) + ".json"), state_json(st));
    log << "task " << t << ": l_con=" << st.trace.tasks.back().l_con << " l_dis=" << st.trace.tasks.back().l_dis
        << " lambda=" << lam << "\n";
  };

  RunState st;
  const auto resume_dir = cfg.at("resume").at("dir").get<std::string>();
  const int resume_task = cfg.at("resume").at("task").get<int>();
  if (!resume_dir.empty() && resume_task > 0) {
    st = load_state(resume_dir, resume_task);
    // rewrite the prefix so the output directory is self-contained
    for (int t = 1; t <= st.completed; ++t) {
      const std::string name = "task_" + std::to_string(t) + ".ccl";
      std::filesystem::copy_file(std::filesystem::path(resume_dir) / name, out / name,
                                 std::filesystem::copy_options::overwrite_existing);
      std::filesystem::copy_file(std::filesystem::path(resume_dir) / (name + ".json"), out / (name + ".json"),
                                 std::filesystem::copy_options::overwrite_existing);
    }
    std::ifstream prior(std::filesystem::path(resume_dir) / "epochs.csv");
    std::string line;
    std::getline(prior, line);
    while (std::getline(prior, line))
      if (std::stoi(line.substr(0, line.find(','))) <= st.completed) csv << line << '\n';
    continue_sequence(st, tasks, run, sink, on_task_end);
  } else {
    st = initial_state(run, tasks.front().train.dimension());
    continue_sequence(st, tasks, run, sink, on_task_end);
  }
  if (const auto dev = lambda_ratio_deviation(st.trace.tasks))
    log << "lambda ratio deviation (t >= 3): " << 100.0 * *dev << "% (soft target < 25%)\n";
  st.trace.config = cfg;
  st.trace.config["resume"] = default_config()["resume"];
  st.trace.config["output"] = "";
  write_json(out / "trace.json", st.trace.to_json());
  write_json(out / "manifest.json", manifest("train", cfg));
  if (st.trace.probe) log << "average probe accuracy: " << st.trace.probe->average << "\n";
  if (st.trace.bounds)
    log << "bounds: lower=" << *st.trace.bounds->lower << " test=" << *st.trace.bounds->realized_test_loss
        << " upper=" << *st.trace.bounds->upper << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// probe

inline int cmd_probe(const json& cfg, std::ostream& log) {
  const auto out = prepare_output(cfg);
  ContinualConfig run = continual_config(cfg);
  const auto tasks = build_tasks(cfg, &run);
  const auto ckpt_path = cfg.at("probe").at("checkpoint").get<std::string>();
  if (ckpt_path.empty()) throw ConfigError("probe: probe.checkpoint is required");
  const auto ckpt = load_checkpoint(ckpt_path);
  RunState st;
  st.encoder = ckpt.encoder();
  st.completed = ckpt.task > 0 ? std::min<int>(ckpt.task, static_cast<int>(tasks.size())) : static_cast<int>(tasks.size());
  const auto state_path = cfg.at("probe").at("state").get<std::string>();
  if (!state_path.empty()) st.buffer = ReplayBuffer::from_json(read_json_file(state_path).at("buffer"));
  if (st.encoder.input_dim() != tasks.front().train.dimension())
    throw ConfigError("probe: checkpoint input dimension does not match the scenario");
  const auto r = probe_state(st, tasks, run);
  json j = r.to_json();
  j["checkpoint"] = ckpt_path;
  j["tasks"] = st.completed;
  write_json(out / "probe.json", j);
  std::ostringstream csv;
  csv << "task,accuracy\n" << std::fixed << std::setprecision(2);
  for (std::size_t t = 0; t < r.task_accuracy.size(); ++t) csv << t + 1 << ',' << r.task_accuracy[t] << '\n';
  csv << "average," << r.average << '\n';
  write_text(out / "probe.csv", csv.str());
  write_json(out / "manifest.json", manifest("probe", cfg));
  for (int c : r.untrainable_classes) log << "warning: class " << c << " absent from probe training data\n";
  log << "average accuracy: " << r.average << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bounds

/// "lo:hi:n" -> n evenly spaced points.
inline std::vector<double> parse_grid(const std::string& spec) {
  double lo = 0, hi = 0;
  int n = 0;
  char c1 = 0, c2 = 0;
  std::istringstream is(spec);
  if (!(is >> lo >> c1 >> hi >> c2 >> n) || c1 != ':' || c2 != ':' || n < 2 || !(hi > lo))
    throw ConfigError("grid: expected 'lo:hi:n' with n >= 2 and hi > lo, got '" + spec + "'");
  return linear_grid(lo, hi, n);
}

struct CurveSummary {
  std::vector<CurvePoint> curve;
  std::vector<double> skipped;
  double turning_point = 0.0;
  double sweep_turning_point = 0.0;
  bool non_increasing = true;
  bool flat_beyond = true;
};

inline CurveSummary analyze_curve(const BoundInputs& in, std::span<const double> grid, int k) {
  CurveSummary s;
  s.curve = bound_curve(in, grid, k, &s.skipped);
  s.turning_point = turning_point(in.weights);
  if (s.curve.empty()) return s;
  s.sweep_turning_point = turning_point_sweep(s.curve);
  const double flat = s.curve.back().upper;
  for (std::size_t i = 0; i < s.curve.size(); ++i) {
    const double tol = 1e-12 * std::max(1.0, std::abs(s.curve[i].upper));
    if (i > 0 && s.curve[i].upper > s.curve[i - 1].upper + tol) s.non_increasing = false;
    if (s.curve[i].lambda >= s.turning_point && std::abs(s.curve[i].upper - flat) > tol) s.flat_beyond = false;
  }
  return s;
}

inline BoundInputs inputs_from_trace(const json& trace) {
  const auto& b = trace.at("bounds");
  if (b.is_null()) throw ConfigError("bounds: trace has no bound report (train with bounds.evaluate = true)");
  BoundInputs in;
  in.train_losses = b.at("train_losses").get<std::vector<double>>();
  in.lambdas = b.at("lambdas").get<std::vector<double>>();
  const auto w = b.at("weights").get<std::vector<std::vector<double>>>();
  for (std::size_t i = 0; i < w.size(); ++i) in.weights.emplace_back(static_cast<int>(i) + 2, w[i]);
  in.min_con = b.at("min_con").get<std::vector<double>>();
  return in;
}

inline int cmd_bounds(const json& cfg, std::ostream& log) {
  const auto out = prepare_output(cfg);
  const auto& b = cfg.at("bounds");
  const auto grid = parse_grid(b.at("grid").get<std::string>());
  const int k = b.at("negatives").get<int>();
  BoundInputs in;
  const auto trace_path = b.at("trace").get<std::string>();
  if (!trace_path.empty()) {
    in = inputs_from_trace(read_json_file(trace_path));
  } else if (is_example_scenario(cfg)) {
    const auto spec = scenario_spec(cfg);
    in.train_losses = scenario_losses(spec);
    in.weights = scenario_weights(spec);
    in.lambdas = {1.0};
  } else {
    throw ConfigError("bounds: need bounds.trace or an example scenario");
  }
  const auto s = analyze_curve(in, grid, k);
  for (double lam : s.skipped) log << "warning: skipped lambda=" << lam << " (gamma = 0)\n";
  std::ostringstream csv;
  csv << "lambda,upper,lower\n" << std::setprecision(17);
  for (const auto& p : s.curve) csv << p.lambda << ',' << p.upper << ',' << p.lower << '\n';
  write_text(out / "bounds.csv", csv.str());
  json j = {{"turning_point", s.turning_point},
            {"sweep_turning_point", s.sweep_turning_point},
            {"non_increasing", s.non_increasing},
            {"flat_beyond_turning_point", s.flat_beyond},
            {"skipped", s.skipped},
            {"grid_points", s.curve.size()}};
  write_json(out / "bounds.json", j);
  write_json(out / "manifest.json", manifest("bounds", cfg));
  log << "turning point lambda* = " << s.turning_point << " (sweep: " << s.sweep_turning_point << ")\n";
  return s.non_increasing && s.flat_beyond ? kExitOk : kExitViolation;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepCell {
  std::vector<std::pair<std::string, json>> settings;
};

struct RunOutcome {
  bool ok = false;
  std::string error;
  double accuracy = 0.0;
  std::vector<double> task_accuracy;
  std::vector<double> lambdas;
};

/// Trains and probes one resolved config in-process.
inline RunOutcome run_config(const json& cfg) {
  RunOutcome r;
  try {
    ContinualConfig run = continual_config(cfg);
    const auto tasks = build_tasks(cfg, &run);
    run.run_probe = true;
    const auto st = run_sequence(tasks, run);
    r.accuracy = st.trace.probe->average;
    r.task_accuracy = st.trace.probe->task_accuracy;
    for (const auto& t : st.trace.tasks)
      if (t.lambda) r.lambdas.push_back(*t.lambda);
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

/// Cartesian product of the vary block ("a=1,2;b=x,y" on the command line).
inline std::vector<SweepCell> expand_grid(const json& vary) {
  std::vector<SweepCell> cells{SweepCell{}};
  for (const auto& [key, values] : vary.items()) {
    if (!values.is_array() || values.empty()) throw ConfigError("sweep: values for '" + key + "' must be a non-empty array");
    std::vector<SweepCell> next;
    for (const auto& cell : cells)
      for (const auto& v : values) {
        SweepCell c = cell;
        c.settings.emplace_back(key, v);
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  return cells;
}

inline json parse_vary_spec(const std::string& spec) {
  json vary = json::object();
  std::stringstream ss(spec);
  std::string part;
  while (std::getline(ss, part, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("sweep grid: expected key=v1,v2 in '" + part + "'");
    const std::string key = part.substr(0, eq);
    json values = json::array();
    std::stringstream vs(part.substr(eq + 1));
    std::string v;
    while (std::getline(vs, v, ',')) {
      try {
        values.push_back(json::parse(v));
      } catch (const json::parse_error&) {
        values.push_back(v);
      }
    }
    vary[key] = values;
  }
  return vary;
}

inline std::string mean_std(double mean, double sd) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << mean << "±" << sd;
  return os.str();
}

struct CellSummary {
  SweepCell cell;
  std::vector<std::uint64_t> seeds;
  std::vector<RunOutcome> runs;
  double mean = 0.0, sd = 0.0;
  int failures = 0;
};

inline std::vector<CellSummary> run_sweep(const json& cfg, const json& vary, unsigned workers) {
  const auto cells = expand_grid(vary);
  bool seed_varied = false;
  for (const auto& [k, _] : vary.items())
    if (k == "seed") seed_varied = true;
  auto seeds = cfg.at("sweep").at("seeds").get<std::vector<std::uint64_t>>();
  if (seeds.empty() || seed_varied) seeds = {cfg.at("seed").get<std::uint64_t>()};

  std::vector<CellSummary> out(cells.size());
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  std::vector<json> configs;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    out[c].cell = cells[c];
    out[c].runs.resize(seeds.size());
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      json run = cfg;
      run["seed"] = seeds[s];
      for (const auto& [key, value] : cells[c].settings) set_path(run, sweep_key(key), value);
      continual_config(run);  // validate before any work starts
      out[c].seeds.push_back(run["seed"].get<std::uint64_t>());
      jobs.emplace_back(c, s);
      configs.push_back(std::move(run));
    }
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
      const auto [c, s] = jobs[j];
      out[c].runs[s] = run_config(configs[j]);
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < std::max(1u, workers); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  for (auto& cell : out) {
    std::vector<double> acc;
    for (const auto& r : cell.runs) {
      if (r.ok) acc.push_back(r.accuracy);
      else ++cell.failures;
    }
    if (!acc.empty()) {
      double m = 0.0;
      for (double a : acc) m += a;
      m /= acc.size();
      double v = 0.0;
      for (double a : acc) v += (a - m) * (a - m);
      cell.mean = m;
      cell.sd = acc.size() > 1 ? std::sqrt(v / (acc.size() - 1)) : 0.0;
    }
  }
  return out;
}

inline std::string sweep_csv(const std::vector<CellSummary>& cells) {
  std::ostringstream os;
  if (cells.empty()) return "";
  for (const auto& [k, _] : cells.front().cell.settings) os << k << ',';
  os << "runs,failures,accuracy_mean,accuracy_std,accuracy\n";
  for (const auto& c : cells) {
    for (const auto& [_, v] : c.cell.settings) os << (v.is_string() ? v.get<std::string>() : v.dump()) << ',';
    os << c.runs.size() << ',' << c.failures << ',' << std::fixed << std::setprecision(2) << c.mean << ',' << c.sd
       << ',' << mean_std(c.mean, c.sd) << '\n';
    os.unsetf(std::ios::fixed);
  }
  return os.str();
}

inline std::string sweep_runs_csv(const std::vector<CellSummary>& cells) {
  std::ostringstream os;
  if (cells.empty()) return "";
  for (const auto& [k, _] : cells.front().cell.settings) os << k << ',';
  os << "seed,status,accuracy,lambdas\n" << std::setprecision(17);
  for (const auto& c : cells)
    for (std::size_t s = 0; s < c.runs.size(); ++s) {
      for (const auto& [_, v] : c.cell.settings) os << (v.is_string() ? v.get<std::string>() : v.dump()) << ',';
      const auto& r = c.runs[s];
      os << c.seeds[s] << ',' << (r.ok ? "ok" : "error: " + r.error) << ',' << r.accuracy << ',';
      for (std::size_t i = 0; i < r.lambdas.size(); ++i) os << (i ? ";" : "") << r.lambdas[i];
      os << '\n';
    }
  return os.str();
}

inline int cmd_sweep(const json& cfg, std::ostream& log) {
  const auto out = prepare_output(cfg);
  const auto& vary = cfg.at("sweep").at("vary");
  if (vary.empty()) throw ConfigError("sweep: nothing to vary (set sweep.vary or --grid)");
  const auto cells = run_sweep(cfg, vary, worker_count());
  write_text(out / "sweep.csv", sweep_csv(cells));
  write_text(out / "runs.csv", sweep_runs_csv(cells));
  write_json(out / "manifest.json", manifest("sweep", cfg));
  int failures = 0;
  for (const auto& c : cells) {
    failures += c.failures;
    for (const auto& [k, v] : c.cell.settings) log << k << '=' << v.dump() << ' ';
    log << "accuracy " << mean_std(c.mean, c.sd) << "\n";
  }
  return failures ? kExitViolation : kExitOk;
}

/// Dispatches one subcommand and maps exceptions onto exit codes.
inline int run_command(const std::string& command, const json& cfg, std::ostream& log) {
  try {
    if (command == "verify") return cmd_verify(cfg, log);
    if (command == "train") return cmd_train(cfg, log);
    if (command == "probe") return cmd_probe(cfg, log);
    if (command == "bounds") return cmd_bounds(cfg, log);
    if (command == "sweep") return cmd_sweep(cfg, log);
    log << "unknown command '" << command << "'\n";
    return kExitConfig;
  } catch (const ConfigError& e) {
    log << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    log << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const IdxError& e) {
    log << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CheckpointError& e) {
    log << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    log << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitViolation;
  }
}

}  // namespace ccl
