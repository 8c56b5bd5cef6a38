// Acceptance checks 1-11. One PASS/FAIL line each; exit status is the number of failures.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>

#include "ccl/bounds.hpp"
#include "ccl/cli.hpp"
#include "ccl/continual.hpp"
#include "ccl/data.hpp"
#include "ccl/fixtures.hpp"
#include "ccl/losses.hpp"
#include "ccl/trainer.hpp"

using namespace ccl;
namespace fs = std::filesystem;

namespace {

// tolerances
constexpr double kSlackTol = 1e-10;
constexpr double kResidualTol = 1e-10;
constexpr double kConstTol = 1e-6;
constexpr double kBetaPrimeTol = 1e-12;
constexpr double kSandwichTol = 1e-9;
constexpr double kRhoTol = 1e-12;
constexpr double kMonoTol = 1e-12;
constexpr double kGradTol = 1e-4;
constexpr double kOracleTol = 1e-10;
constexpr double kAblationMargin = 1.0;  // accuracy points
constexpr double kChanceTol = 5.0;

// runtime limits, seconds
constexpr double kLemmaSeconds = 30.0;
constexpr double kDecompSeconds = 10.0;
constexpr double kSandwichSeconds = 120.0;
constexpr double kAblationSeconds = 900.0;

// displayed values, rounded, and mpmath evaluations of the closed forms at k = 1
constexpr double kAlphaShown = 1.761594, kBetaShown = 0.014807, kBetaPrimeShown = -5.508376;
constexpr double kAlphaHP = 1.7615941559557648881;
constexpr double kBetaHP = 0.014810201563845972046;
constexpr double kBetaPrimeHP = -5.5083781103476838042;

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

Outcome lemma_sandwich() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1001);
  double worst_upper = 1e300, worst_lower = 1e300;
  int trials = 0;
  for (int k : {1, 2, 5})
    for (int i = 0; i < 1000; ++i, ++trials) {
      const auto d = random_distribution(2 + i % 4, 1 + i % 3, rng);
      const auto ft = random_table_model(d, 2 + i % 4, rng);
      const auto fp = random_table_model(d, 2 + i % 4, rng);
      const auto s = lemma1_slack(ft, fp, d, k);
      worst_upper = std::min(worst_upper, s.upper);
      worst_lower = std::min(worst_lower, s.lower);
    }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst_upper >= -kSlackTol && worst_lower >= -kSlackTol && secs < kLemmaSeconds;
  o.detail = std::to_string(trials) + " trials, min upper slack " + fmt("%.3e", worst_upper) + ", min lower slack " +
             fmt("%.3e", worst_lower) + ", " + fmt("%.1f s", secs);
  return o;
}

Outcome decomposition() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1002);
  const int ks[] = {1, 2, 4};
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const auto d = random_distribution(2 + i % 3, 1 + i % 3, rng);
    const auto ft = random_table_model(d, 3, rng);
    const auto fp = random_table_model(d, 3, rng);
    worst = std::max(worst, std::abs(decomposition_residual(ft, fp, d, ks[i % 3])));
  }
  const double secs = seconds_since(t0);
  return {worst <= kResidualTol && secs < kDecompSeconds,
          "200 trials, max |residual| " + fmt("%.3e", worst) + ", " + fmt("%.1f s", secs)};
}

Outcome constants_check() {
  const auto c = constants(1);
  const double e_shown = std::max({std::abs(kAlphaShown - c.alpha), std::abs(kBetaShown - c.beta),
                                   std::abs(kBetaPrimeShown - c.beta_prime)});
  const double e_hp = std::max({std::abs(kAlphaHP - c.alpha), std::abs(kBetaHP - c.beta),
                                std::abs(kBetaPrimeHP - c.beta_prime)});
  const double e_bp = std::abs(beta_prime_single(c.alpha) - c.beta_prime);
  Outcome o;
  o.pass = e_hp <= kConstTol && e_bp <= kBetaPrimeTol;
  o.detail = "alpha " + fmt("%.9f", c.alpha) + " beta " + fmt("%.9f", c.beta) + " beta' " +
             fmt("%.9f", c.beta_prime) + ", max err vs high precision " + fmt("%.2e", e_hp) +
             ", vs displayed digits " + fmt("%.2e", e_shown) + ", beta' forms differ by " + fmt("%.2e", e_bp);
  return o;
}

Outcome end_to_end_sandwich() {
  const auto t0 = Clock::now();
  BlobConfig b;
  b.tasks = 3;
  const auto tasks = make_blob_sequence(b, 11);
  ContinualConfig cfg;
  cfg.schedule.mode = LambdaMode::fixed;
  cfg.schedule.lambda0 = 1.0;
  cfg.sgd.epochs = 60;
  cfg.run_probe = false;
  cfg.seed = 11;
  const auto st = run_sequence(tasks, cfg);

  // exact losses on frozen lookup tables of each snapshot
  std::vector<TaskDistribution> dists;
  for (const auto& t : tasks) dists.push_back(t.train);
  std::vector<TableModel> snaps;
  for (const auto& e : st.snapshots) snaps.push_back(snapshot(e, dists));
  const int k = 1;
  BoundInputs in;
  in.train_losses.push_back(population_contrastive(snaps[0], dists[0], k));
  for (int t = 2; t <= 3; ++t) {
    const auto w = MixtureWeights::uniform(t);
    const auto seen = mixture(std::span(dists).first(t - 1), w);
    in.train_losses.push_back(population_train_loss(snaps[t - 1], snaps[t - 2], dists[t - 1], seen, 1.0, k));
    in.weights.push_back(w);
    in.lambdas.push_back(1.0);
  }
  const double test = population_test_loss(snaps[2], dists, k);
  in.realized_test_loss = test;
  const auto r = theorem1_bounds(in, k);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = *r.lower - kSandwichTol <= test && test <= *r.upper + kSandwichTol && secs < kSandwichSeconds;
  o.detail = "lower " + fmt("%.4f", *r.lower) + " <= test " + fmt("%.4f", test) + " <= upper " +
             fmt("%.4f", *r.upper) + ", " + fmt("%.1f s", secs);
  return o;
}

std::vector<MixtureWeights> example(WeightRule rule, double rho = 1.0) {
  ScenarioSpec s;
  s.tasks = 5;
  s.weights = rule;
  s.rho = rho;
  return scenario_weights(s);
}

Outcome turning_points() {
  Outcome o;
  const double e1 = turning_point(example(WeightRule::example1));
  const double e3 = turning_point(example(WeightRule::example3));
  o.pass = e1 == 1.0 && e3 == 10.0;
  std::string d = "ex1 " + fmt("%.17g", e1) + ", ex3 " + fmt("%.17g", e3);
  for (double rho : {0.95, 1.05}) {
    const double e2 = turning_point(example(WeightRule::example2, rho));
    o.pass = o.pass && std::abs(e2 - rho) <= kRhoTol;
    d += ", ex2(" + fmt("%.2f", rho) + ") " + fmt("%.17g", e2);
  }
  bool shape = true;
  const auto grid = linear_grid(0.01, 20.0, 2000);
  for (auto rule : {WeightRule::example1, WeightRule::example2, WeightRule::example3})
    for (double rho : {0.95, 1.05}) {
      BoundInputs in;
      in.train_losses.assign(5, 1.0);
      in.weights = example(rule, rho);
      in.lambdas = {1.0};
      const auto curve = bound_curve(in, grid, 1);
      const double star = turning_point(in.weights);
      for (std::size_t i = 1; i < curve.size(); ++i) shape = shape && curve[i].upper <= curve[i - 1].upper + kMonoTol;
      for (const auto& p : curve)
        if (p.lambda >= star) shape = shape && std::abs(p.upper - curve.back().upper) <= kMonoTol;
      shape = shape && std::abs(turning_point_sweep(curve) - star) <= grid[1] - grid[0];
    }
  o.pass = o.pass && shape;
  o.detail = d + (shape ? ", curves non-increasing and flat past the turning point" : ", curve shape violated");
  return o;
}

Outcome theorem2_monotone() {
  std::mt19937_64 rng(1006);
  std::uniform_real_distribution<double> u(0.05, 3.0);
  int bad_u = 0, bad_step = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int t = 2 + trial % 6;
    std::vector<double> losses;
    std::vector<MixtureWeights> w;
    for (int j = 1; j <= t; ++j) losses.push_back(u(rng));
    for (int j = 2; j <= t; ++j) {
      std::vector<double> row;
      double s = 0.0;
      for (int i = 1; i < j; ++i) s += row.emplace_back(u(rng));
      for (double& x : row) x /= s;
      w.emplace_back(j, row);
    }
    const double lam = u(rng);
    const double U = compute_U(losses, lam, w, 1);
    if (compute_U(losses, lam + u(rng), w, 1) > U + kMonoTol) ++bad_u;

    ScheduleState s;
    s.t = t;
    s.lambda = lam;
    s.thresholds = {u(rng)};
    s.deltas = {u(rng)};
    const auto next = theorem2_step(s, U);
    BoundInputs before, after;
    before.train_losses = after.train_losses = losses;
    before.weights = after.weights = w;
    before.lambdas = {lam};
    after.lambdas = {next.lambda};
    const double ub = *theorem1_upper(before, 1).upper, ua = *theorem1_upper(after, 1).upper;
    if (compute_U(losses, next.lambda, w, 1) > U + kMonoTol || ua > ub + kMonoTol) ++bad_step;
  }
  return {bad_u == 0 && bad_step == 0,
          "100 traces, U violations " + std::to_string(bad_u) + ", step violations " + std::to_string(bad_step)};
}

Outcome gradients() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(2000 + seed);
    const auto e = Encoder::initialized({2, 16, 8}, Activation::tanh, rng());
    const auto prev = Encoder::initialized({2, 16, 8}, Activation::tanh, rng());
    const auto b = random_view_batch(4, 2, 2, rng);
    worst = std::max(worst, finite_diff_check(e, &prev, b, 1.0, Temperatures{}, 1e-5));
  }
  return {worst < kGradTol, "20 seeds, max relative error " + fmt("%.3e", worst)};
}

// from-scratch batch losses: direct softmax ratios in long double, no shared helpers
long double oracle_supcon(const BatchEmbeddings& b) {
  const std::size_t m = b.size();
  long double total = 0.0L;
  for (std::size_t i = 0; i < m; ++i) {
    long double denom = 0.0L;
    for (std::size_t a = 0; a < m; ++a)
      if (a != i) denom += std::exp(static_cast<long double>(b.z[i].dot(b.z[a])) / b.temperature);
    long double acc = 0.0L;
    int np = 0;
    for (std::size_t p = 0; p < m; ++p)
      if (p != i && b.labels[p] == b.labels[i]) {
        acc += std::log(std::exp(static_cast<long double>(b.z[i].dot(b.z[p])) / b.temperature) / denom);
        ++np;
      }
    if (np) total -= acc / np;
  }
  return total;
}

long double oracle_ird(const BatchEmbeddings& cur, const BatchEmbeddings& past) {
  const std::size_t m = cur.size();
  long double total = 0.0L;
  for (std::size_t i = 0; i < m; ++i) {
    long double dc = 0.0L, dp = 0.0L;
    for (std::size_t a = 0; a < m; ++a)
      if (a != i) {
        dc += std::exp(static_cast<long double>(cur.z[i].dot(cur.z[a])) / cur.temperature);
        dp += std::exp(static_cast<long double>(past.z[i].dot(past.z[a])) / past.temperature);
      }
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) {
        const long double p = std::exp(static_cast<long double>(past.z[i].dot(past.z[j])) / past.temperature) / dp;
        const long double q = std::exp(static_cast<long double>(cur.z[i].dot(cur.z[j])) / cur.temperature) / dc;
        total -= p * std::log(q);
      }
  }
  return total;
}

Outcome oracles() {
  std::mt19937_64 rng(1008);
  double worst = 0.0;
  const Temperatures temps;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t N = 2 + trial % 7, dim = 3 + trial % 6;
    std::uniform_int_distribution<int> cls(0, 1 + trial % 3);
    BatchEmbeddings cur, past;
    cur.temperature = trial % 2 ? temps.contrastive : temps.current;
    past.temperature = temps.past;
    for (std::size_t i = 0; i < N; ++i) {
      const int c = cls(rng);
      for (int v = 0; v < 2; ++v) {
        cur.z.push_back(random_unit(dim, rng));
        past.z.push_back(random_unit(dim, rng));
        cur.labels.push_back(c);
        past.labels.push_back(c);
      }
    }
    const double s = empirical_contrastive(cur), so = static_cast<double>(oracle_supcon(cur));
    const double d = empirical_distillation(cur, past), dor = static_cast<double>(oracle_ird(cur, past));
    worst = std::max({worst, std::abs(s - so) / std::max(1.0, std::abs(so)),
                      std::abs(d - dor) / std::max(1.0, std::abs(dor))});
  }
  std::mt19937_64 r1(5);
  BatchEmbeddings one, onep;
  one.z = {random_unit(4, r1)};
  one.labels = {0};
  onep = one;
  onep.temperature = temps.past;
  const bool single = empirical_contrastive(one) == 0.0 && empirical_distillation(one, onep) == 0.0;
  return {worst <= kOracleTol && single,
          "50 batches, max error " + fmt("%.3e", worst) + (single ? ", N=1 gives 0" : ", N=1 nonzero")};
}

Outcome ablation(const fs::path& out) {
  const auto t0 = Clock::now();
  json cfg = resolve_config(json::object());
  cfg["buffer"] = 50;
  cfg["sweep"]["seeds"] = json::array();
  for (int s = 0; s < 10; ++s) cfg["sweep"]["seeds"].push_back(s);
  const json vary = {{"mode", {"fixed", "pure", "min", "max"}}};
  const auto cells = run_sweep(cfg, vary, worker_count());
  const double secs = seconds_since(t0);
  fs::create_directories(out);
  std::ofstream(out / "ablation.csv") << sweep_csv(cells);
  std::ofstream(out / "ablation_runs.csv") << sweep_runs_csv(cells);

  double fixed = 0.0, max = 0.0;
  int failures = 0;
  bool lambda_ok = true;
  std::string d;
  const double lambda0 = cfg["schedule"]["lambda0"].get<double>();
  for (const auto& c : cells) {
    const auto mode = c.cell.settings.front().second.get<std::string>();
    failures += c.failures;
    if (mode == "fixed") fixed = c.mean;
    if (mode == "max") {
      max = c.mean;
      for (const auto& r : c.runs)
        for (double l : r.lambdas) lambda_ok = lambda_ok && l >= lambda0;
    }
    d += mode + " " + mean_std(c.mean, c.sd) + ", ";
  }
  Outcome o;
  o.pass = failures == 0 && max >= fixed - kAblationMargin && lambda_ok && secs < kAblationSeconds;
  o.detail = d + (lambda_ok ? "lambda(max) >= lambda0" : "lambda(max) < lambda0 in some run") + ", " +
             fmt("%.1f s", secs) + ", table " + (out / "ablation.csv").string();
  return o;
}

Outcome probe_structure() {
  std::vector<Vector> x;
  std::vector<int> y;
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 10; ++i) {
      Vector e(4, 0.0);
      e[c] = 1.0 + 0.01 * i;
      x.push_back(e);
      y.push_back(c);
    }
  const double sep = linear_probe_features(x, y, {LabeledSet{x, y}}, 4, ProbeConfig{}, 1).average;

  const int C = 4;
  double chance = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed + 500);
    std::normal_distribution<double> g;
    std::uniform_int_distribution<int> c(0, C - 1);
    auto make = [&](int n) {
      LabeledSet s;
      for (int i = 0; i < n; ++i) {
        s.points.push_back({g(rng), g(rng), g(rng), g(rng)});
        s.labels.push_back(c(rng));
      }
      return s;
    };
    const auto train = make(200);
    chance += linear_probe_features(train.points, train.labels, {make(2000)}, C, ProbeConfig{}, seed).average / 5.0;
  }
  return {sep == 100.0 && std::abs(chance - 100.0 / C) <= kChanceTol,
          "separable " + fmt("%.1f%%", sep) + ", random features " + fmt("%.1f%%", chance) + " (chance 25%)"};
}

Outcome determinism(const fs::path& out) {
  json user = {{"scenario", {{"tasks", 3}}}, {"trainer", {{"epochs", 30}}}, {"seed", 17}};
  std::ostringstream log;
  std::vector<fs::path> dirs{out / "det_a", out / "det_b"};
  for (const auto& dir : dirs) {
    fs::remove_all(dir);
    json cfg = resolve_config(user);
    cfg["output"] = dir.string();
    if (run_command("train", cfg, log) != 0) return {false, "train failed: " + log.str()};
  }
  int compared = 0, differ = 0;
  for (const auto& entry : fs::directory_iterator(dirs[0])) {
    const auto name = entry.path().filename();
    if (name == "manifest.json") continue;  // carries the output path
    ++compared;
    if (slurp(entry.path()) != slurp(dirs[1] / name)) ++differ;
  }
  return {differ == 0 && compared > 0,
          std::to_string(compared) + " files compared (trace, checkpoints, states), " + std::to_string(differ) +
              " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path out = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  fs::create_directories(out);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"single-step sandwich", lemma_sandwich},
      {"decomposition identity", decomposition},
      {"constants", constants_check},
      {"end-to-end sandwich", end_to_end_sandwich},
      {"turning points", turning_points},
      {"U monotonicity", theorem2_monotone},
      {"gradient check", gradients},
      {"batch loss oracles", oracles},
      {"adaptive lambda ablation", [&] { return ablation(out); }},
      {"probe protocol", probe_structure},
      {"determinism", [&] { return determinism(out); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed;
}
