#pragma once

// The continual task loop: replay buffer, adaptive distillation coefficient, per-task
// training, optional bound evaluation on parameter snapshots, and linear probing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccl/bounds.hpp"
#include "ccl/core.hpp"
#include "ccl/data.hpp"
#include "ccl/losses.hpp"
#include "ccl/trainer.hpp"

namespace ccl {

struct Sample {
  Vector point;
  int label = 0;
  int source_task = 0;  // 1-based
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return items_.size(); }
  const std::vector<Sample>& items() const { return items_; }
  std::uint64_t seen() const { return seen_; }

  /// Reservoir rule for the stream item with 0-based `stream_index`: append while
  /// not full, otherwise replace slot r ~ U{0..stream_index} when r < capacity.
  void insert(Sample s, std::uint64_t stream_index, std::mt19937_64& rng) {
    if (stream_index < seen_) throw std::invalid_argument("ReplayBuffer: stream index must increase");
    seen_ = stream_index + 1;
    if (capacity_ == 0) return;
    if (items_.size() < capacity_) {
      items_.push_back(std::move(s));
      return;
    }
    std::uniform_int_distribution<std::uint64_t> u(0, stream_index);
    const std::uint64_t r = u(rng);
    if (r < capacity_) items_[r] = std::move(s);
  }

  /// Sample count per source task.
  std::map<int, std::size_t> composition() const {
    std::map<int, std::size_t> c;
    for (const auto& s : items_) ++c[s.source_task];
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& s : items_) items.push_back({{"point", s.point}, {"label", s.label}, {"task", s.source_task}});
    return {{"capacity", capacity_}, {"seen", seen_}, {"items", items}};
  }

  static ReplayBuffer from_json(const nlohmann::json& j) {
    ReplayBuffer b(j.at("capacity").get<std::size_t>());
    b.seen_ = j.at("seen").get<std::uint64_t>();
    for (const auto& it : j.at("items"))
      b.items_.push_back({it.at("point").get<Vector>(), it.at("label").get<int>(), it.at("task").get<int>()});
    return b;
  }

 private:
  std::size_t capacity_;
  std::vector<Sample> items_;
  std::uint64_t seen_ = 0;
};

inline void reservoir_insert(ReplayBuffer& buffer, Sample s, std::uint64_t stream_index, std::mt19937_64& rng) {
  buffer.insert(std::move(s), stream_index, rng);
}

enum class LambdaMode { fixed, pure, min, max, theorem2 };

inline std::string to_string(LambdaMode m) {
  switch (m) {
    case LambdaMode::fixed: return "fixed";
    case LambdaMode::pure: return "pure";
    case LambdaMode::min: return "min";
    case LambdaMode::max: return "max";
    case LambdaMode::theorem2: return "theorem2";
  }
  return "?";
}

inline LambdaMode lambda_mode_from_string(const std::string& s) {
  if (s == "fixed") return LambdaMode::fixed;
  if (s == "pure") return LambdaMode::pure;
  if (s == "min") return LambdaMode::min;
  if (s == "max") return LambdaMode::max;
  if (s == "theorem2") return LambdaMode::theorem2;
  throw std::invalid_argument("unknown lambda mode '" + s + "'");
}

struct LambdaSchedule {
  LambdaMode mode = LambdaMode::max;
  double lambda0 = 1.0;
  double kappa = 1.0;
  double sum_dis = 0.0;  // over completed tasks j >= 2
  double sum_con = 0.0;
  int recorded = 0;
  ScheduleState threshold_state;  // theorem2 mode only; lambda starts at lambda0

  void record(double l_con, double l_dis) {
    sum_con += l_con;
    sum_dis += l_dis;
    ++recorded;
  }

  nlohmann::json to_json() const {
    return {{"mode", to_string(mode)},
            {"lambda0", lambda0},
            {"kappa", kappa},
            {"sum_dis", sum_dis},
            {"sum_con", sum_con},
            {"recorded", recorded},
            {"theorem2",
             {{"t", threshold_state.t},
              {"lambda", threshold_state.lambda},
              {"thresholds", threshold_state.thresholds},
              {"deltas", threshold_state.deltas},
              {"U", threshold_state.U}}}};
  }

  static LambdaSchedule from_json(const nlohmann::json& j) {
    LambdaSchedule s;
    s.mode = lambda_mode_from_string(j.at("mode").get<std::string>());
    s.lambda0 = j.at("lambda0").get<double>();
    s.kappa = j.at("kappa").get<double>();
    s.sum_dis = j.at("sum_dis").get<double>();
    s.sum_con = j.at("sum_con").get<double>();
    s.recorded = j.at("recorded").get<int>();
    const auto& t = j.at("theorem2");
    s.threshold_state.t = t.at("t").get<int>();
    s.threshold_state.lambda = t.at("lambda").get<double>();
    s.threshold_state.thresholds = t.at("thresholds").get<std::vector<double>>();
    s.threshold_state.deltas = t.at("deltas").get<std::vector<double>>();
    s.threshold_state.U = t.at("U").get<double>();
    return s;
  }
};

/// lambda_2 = lambda0; for t >= 3 the ratio r = sum L_dis / sum L_con over tasks 2..t-1
/// gives pure: kappa r, min: min(1, kappa r), max: max(lambda0, kappa r).
inline double adaptive_lambda(const LambdaSchedule& s, int t) {
  if (t < 2) throw std::invalid_argument("adaptive_lambda: t must be >= 2");
  if (s.mode == LambdaMode::fixed) return s.lambda0;
  if (s.mode == LambdaMode::theorem2) return t == 2 ? s.lambda0 : s.threshold_state.lambda;
  if (t == 2) return s.lambda0;
  if (!(s.sum_con != 0.0))
    throw std::runtime_error("adaptive_lambda: accumulated contrastive loss is zero at task " + std::to_string(t));
  const double r = s.kappa * s.sum_dis / s.sum_con;
  switch (s.mode) {
    case LambdaMode::pure: return r;
    case LambdaMode::min: return std::min(1.0, r);
    case LambdaMode::max: return std::max(s.lambda0, r);
    default: return s.lambda0;
  }
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double jitter = 0.05;        // Gaussian sigma
  double rotate_deg = 15.0;    // 2-D inputs only
  std::size_t image_side = 0;  // > 0: inputs are side x side images, shifted by up to pixel_shift
  int pixel_shift = 1;
};

inline Vector augment(std::span<const double> x, const AugmentConfig& cfg, std::mt19937_64& rng) {
  Vector v(x.begin(), x.end());
  if (cfg.image_side > 0) {
    const int side = static_cast<int>(cfg.image_side);
    std::uniform_int_distribution<int> sh(-cfg.pixel_shift, cfg.pixel_shift);
    const int dx = sh(rng), dy = sh(rng);
    Vector out(v.size(), 0.0);
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c) {
        const int sr = r - dy, sc = c - dx;
        if (sr >= 0 && sr < side && sc >= 0 && sc < side) out[r * side + c] = v[sr * side + sc];
      }
    v = std::move(out);
  } else if (v.size() == 2 && cfg.rotate_deg > 0.0) {
    const double lim = cfg.rotate_deg * std::numbers::pi / 180.0;
    std::uniform_real_distribution<double> ang(-lim, lim);
    v = rotate2d(v, ang(rng));
  }
  if (cfg.jitter > 0.0) {
    std::normal_distribution<double> g(0.0, cfg.jitter);
    for (double& e : v) e += g(rng);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Probe

/// Two-step draw: class uniform over the classes present, then an instance uniform within it.
class ClassBalancedSampler {
 public:
  explicit ClassBalancedSampler(std::span<const int> labels) {
    std::map<int, std::vector<std::size_t>> by;
    for (std::size_t i = 0; i < labels.size(); ++i) by[labels[i]].push_back(i);
    for (auto& [c, idx] : by) {
      classes_.push_back(c);
      members_.push_back(std::move(idx));
    }
    if (classes_.empty()) throw std::invalid_argument("ClassBalancedSampler: no samples");
  }

  std::size_t draw(std::mt19937_64& rng) const {
    std::uniform_int_distribution<std::size_t> c(0, classes_.size() - 1);
    const auto& m = members_[c(rng)];
    std::uniform_int_distribution<std::size_t> i(0, m.size() - 1);
    return m[i(rng)];
  }

  const std::vector<int>& classes() const { return classes_; }

 private:
  std::vector<int> classes_;
  std::vector<std::vector<std::size_t>> members_;
};

struct ProbeConfig {
  int epochs = 100;
  double learning_rate = 0.1;
  std::size_t batch_size = 32;
};

struct LabeledSet {
  std::vector<Vector> points;
  std::vector<int> labels;
};

struct ProbeResult {
  std::vector<double> task_accuracy;  // percent, one per test set
  double average = 0.0;
  std::vector<int> untrainable_classes;

  nlohmann::json to_json() const {
    return {{"task_accuracy", task_accuracy}, {"average", average}, {"untrainable_classes", untrainable_classes}};
  }
};

/// Linear softmax classifier trained on fixed features; returns accuracy per test set.
inline ProbeResult linear_probe_features(const std::vector<Vector>& train_x, const std::vector<int>& train_y,
                                         const std::vector<LabeledSet>& tests, int num_classes,
                                         const ProbeConfig& cfg, std::uint64_t seed) {
  if (train_x.empty()) throw std::invalid_argument("linear_probe: no training data");
  const std::size_t d = train_x.front().size();
  const std::size_t C = static_cast<std::size_t>(num_classes);
  std::vector<double> W(C * d, 0.0), b(C, 0.0), gW(C * d), gb(C);
  ClassBalancedSampler sampler(train_y);
  std::mt19937_64 rng(seed);
  const std::size_t steps = (train_x.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<double> logits(C);
  auto score = [&](const Vector& x) {
    for (std::size_t c = 0; c < C; ++c) logits[c] = b[c] + dot(std::span(W).subspan(c * d, d), x);
  };
  for (int e = 0; e < cfg.epochs; ++e) {
    for (std::size_t s = 0; s < steps; ++s) {
      std::fill(gW.begin(), gW.end(), 0.0);
      std::fill(gb.begin(), gb.end(), 0.0);
      for (std::size_t n = 0; n < cfg.batch_size; ++n) {
        const std::size_t i = sampler.draw(rng);
        score(train_x[i]);
        const auto p = softmax(logits);
        for (std::size_t c = 0; c < C; ++c) {
          const double g = (p[c] - (static_cast<int>(c) == train_y[i] ? 1.0 : 0.0)) / cfg.batch_size;
          gb[c] += g;
          for (std::size_t k = 0; k < d; ++k) gW[c * d + k] += g * train_x[i][k];
        }
      }
      for (std::size_t i = 0; i < W.size(); ++i) W[i] -= cfg.learning_rate * gW[i];
      for (std::size_t c = 0; c < C; ++c) b[c] -= cfg.learning_rate * gb[c];
    }
  }
  ProbeResult r;
  for (int c = 0; c < num_classes; ++c)
    if (std::find(sampler.classes().begin(), sampler.classes().end(), c) == sampler.classes().end())
      r.untrainable_classes.push_back(c);
  for (const auto& t : tests) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < t.points.size(); ++i) {
      score(t.points[i]);
      const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
      if (static_cast<int>(best) == t.labels[i]) ++correct;
    }
    r.task_accuracy.push_back(t.points.empty() ? 0.0 : 100.0 * correct / t.points.size());
  }
  double s = 0.0;
  for (double a : r.task_accuracy) s += a;
  r.average = r.task_accuracy.empty() ? 0.0 : s / r.task_accuracy.size();
  return r;
}

inline ProbeResult linear_probe(const EmbeddingModel& frozen, const LabeledSet& train,
                                const std::vector<LabeledSet>& tests, int num_classes, const ProbeConfig& cfg,
                                std::uint64_t seed) {
  auto embed_set = [&](const std::vector<Vector>& pts) {
    std::vector<Vector> out;
    for (const auto& p : pts) {
      const auto z = frozen.embed(p);
      out.emplace_back(z.coords().begin(), z.coords().end());
    }
    return out;
  };
  std::vector<LabeledSet> emb_tests;
  for (const auto& t : tests) emb_tests.push_back({embed_set(t.points), t.labels});
  return linear_probe_features(embed_set(train.points), train.labels, emb_tests, num_classes, cfg, seed);
}

// ---------------------------------------------------------------------------
// Training loop

struct BoundEvalConfig {
  bool evaluate = false;
  int negatives = 1;
  std::string weights = "uniform";  // uniform | buffer
};

struct ContinualConfig {
  std::vector<std::size_t> hidden{32};
  std::size_t output_dim = 8;
  Activation activation = Activation::tanh;
  SgdConfig sgd;
  Temperatures temperatures;
  bool divide_by_views = true;
  LambdaSchedule schedule;
  std::optional<double> threshold;  // theorem2 u_t; calibrated when absent
  double delta = 0.1;               // theorem2 Delta_t
  std::size_t buffer = 50;
  AugmentConfig augment;
  ProbeConfig probe;
  bool run_probe = true;
  BoundEvalConfig bounds;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int task = 0;
  int epoch = 0;
  double l_con = 0.0;
  double l_dis = 0.0;
  double lambda = 0.0;
};

struct TaskRecord {
  int task = 0;
  double l_con = 0.0;  // final-epoch average of the summed batch loss
  double l_dis = 0.0;
  std::optional<double> lambda;
  std::map<int, std::size_t> buffer_composition;
  std::vector<double> mixture_estimate;  // buffer share of tasks 1..t-1 at task start
  std::optional<double> U;
  std::string checkpoint;
};

/// Largest relative deviation from their mean of the running ratios
/// sum L_dis / sum L_con (tasks 2..t-1) that set lambda for t >= 3. Needs T >= 4.
inline std::optional<double> lambda_ratio_deviation(const std::vector<TaskRecord>& tasks) {
  std::vector<double> r;
  double con = 0.0, dis = 0.0;
  for (std::size_t i = 1; i + 1 < tasks.size(); ++i) {
    con += tasks[i].l_con;
    dis += tasks[i].l_dis;
    if (con > 0.0) r.push_back(dis / con);
  }
  if (r.size() < 2) return std::nullopt;
  double mean = 0.0;
  for (double x : r) mean += x / r.size();
  if (!(mean > 0.0)) return std::nullopt;
  double dev = 0.0;
  for (double x : r) dev = std::max(dev, std::abs(x - mean) / mean);
  return dev;
}

struct ExperimentTrace {
  std::vector<TaskRecord> tasks;
  std::optional<ProbeResult> probe;
  std::optional<BoundReport> bounds;
  std::vector<double> population_test_per_task;
  nlohmann::json config;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["config"] = config;
    auto& arr = j["tasks"] = nlohmann::json::array();
    for (const auto& r : tasks) {
      nlohmann::json comp = nlohmann::json::object();
      for (const auto& [k, v] : r.buffer_composition) comp[std::to_string(k)] = v;
      arr.push_back({{"task", r.task},
                     {"l_con", r.l_con},
                     {"l_dis", r.l_dis},
                     {"lambda", r.lambda ? nlohmann::json(*r.lambda) : nlohmann::json(nullptr)},
                     {"buffer_composition", comp},
                     {"mixture_estimate", r.mixture_estimate},
                     {"U", r.U ? nlohmann::json(*r.U) : nlohmann::json(nullptr)},
                     {"checkpoint", r.checkpoint}});
    }
    j["probe"] = probe ? probe->to_json() : nlohmann::json(nullptr);
    j["bounds"] = bounds ? ccl::to_json(*bounds) : nlohmann::json(nullptr);
    j["population_test_per_task"] = population_test_per_task;
    const auto dev = lambda_ratio_deviation(tasks);
    j["lambda_ratio_deviation"] = dev ? nlohmann::json(*dev) : nlohmann::json(nullptr);
    return j;
  }
};

/// Everything threaded from one task to the next.
struct RunState {
  Encoder encoder;
  ReplayBuffer buffer;
  LambdaSchedule schedule;
  int completed = 0;
  std::vector<Encoder> snapshots;  // f_1..f_completed
  ExperimentTrace trace;
};

inline RunState initial_state(const ContinualConfig& cfg, std::size_t input_dim) {
  std::vector<std::size_t> dims{input_dim};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(cfg.output_dim);
  RunState s;
  s.encoder = Encoder::initialized(dims, cfg.activation, substream(cfg.seed, "init"));
  s.buffer = ReplayBuffer(cfg.buffer);
  s.schedule = cfg.schedule;
  s.schedule.threshold_state.lambda = cfg.schedule.lambda0;
  s.schedule.threshold_state.thresholds = {cfg.threshold.value_or(1.0)};
  s.schedule.threshold_state.deltas = {cfg.delta};
  return s;
}

/// Buffer share of each past task, add-one smoothed so every weight stays positive.
inline MixtureWeights buffer_mixture(const ReplayBuffer& buffer, int t) {
  const auto comp = buffer.composition();
  std::vector<double> w;
  double total = 0.0;
  for (int j = 1; j < t; ++j) {
    auto it = comp.find(j);
    w.push_back((it == comp.end() ? 0.0 : static_cast<double>(it->second)) + 1.0);
    total += w.back();
  }
  for (double& x : w) x /= total;
  return MixtureWeights(t, std::move(w));
}

using EpochSink = std::function<void(const EpochRecord&)>;

/// One pass of the task loop: D = D_t U M, f_t starts from f_{t-1}, SupCon plus
/// lambda_t IRD against the frozen previous encoder, then reservoir buffer update.
inline void run_task(RunState& st, const TaskDistribution& task, const ContinualConfig& cfg,
                     const EpochSink& sink = {}) {
  if (task.size() == 0) throw std::invalid_argument("run_task: empty task");
  const int t = st.completed + 1;
  std::vector<Sample> data;
  for (std::size_t i = 0; i < task.size(); ++i) data.push_back({task.points()[i], task.label(i), t});
  for (const auto& s : st.buffer.items()) data.push_back(s);

  TaskRecord rec;
  rec.task = t;
  std::optional<Encoder> prev;
  double lambda = 0.0;
  if (t >= 2) {
    prev = st.encoder;
    lambda = adaptive_lambda(st.schedule, t);
    rec.lambda = lambda;
    rec.mixture_estimate = buffer_mixture(st.buffer, t).weights();
  }

  std::mt19937_64 batch_rng(substream(cfg.sgd.seed ^ cfg.seed, "batch", static_cast<std::uint64_t>(t)));
  std::mt19937_64 aug_rng(substream(cfg.seed, "augment", static_cast<std::uint64_t>(t)));
  SgdState opt;
  std::vector<std::size_t> order(data.size());
  std::vector<double> grad;
  const std::size_t N = std::max<std::size_t>(1, cfg.sgd.batch_size);
  for (int epoch = 0; epoch < cfg.sgd.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), batch_rng);
    double sum_con = 0.0, sum_dis = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += N) {
      const std::size_t end = std::min(order.size(), start + N);
      if (end - start < 2 && order.size() >= 2) continue;
      ViewBatch vb;
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = data[order[i]];
        vb.views.push_back(augment(s.point, cfg.augment, aug_rng));
        vb.views.push_back(augment(s.point, cfg.augment, aug_rng));
        vb.labels.push_back(s.label);
        vb.labels.push_back(s.label);
      }
      const auto loss = grad_total(st.encoder, prev ? &*prev : nullptr, vb, lambda, cfg.temperatures,
                                   cfg.divide_by_views, &grad);
      try {
        sgd_step(st.encoder, grad, cfg.sgd, opt);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error(std::string(e.what()) + " (task " + std::to_string(t) + ", epoch " +
                                 std::to_string(epoch) + ")");
      }
      sum_con += loss.contrastive;
      sum_dis += loss.distillation;
      ++batches;
    }
    const double avg_con = batches ? sum_con / batches : 0.0;
    const double avg_dis = batches ? sum_dis / batches : 0.0;
    if (sink) sink({t, epoch, avg_con, avg_dis, lambda});
    rec.l_con = avg_con;
    rec.l_dis = avg_dis;
  }

  if (t >= 2) {
    st.schedule.record(rec.l_con, rec.l_dis);
    if (st.schedule.mode == LambdaMode::theorem2) {
      // U_t from empirical training losses and buffer-estimated weights
      std::vector<double> losses{0.0};
      std::vector<MixtureWeights> weights;
      for (const auto& r : st.trace.tasks)
        if (r.task >= 2) {
          losses.push_back(r.l_con + *r.lambda * r.l_dis);
          weights.emplace_back(r.task, r.mixture_estimate);
        }
      losses.push_back(rec.l_con + lambda * rec.l_dis);
      weights.emplace_back(t, rec.mixture_estimate);
      const double U = compute_U(losses, lambda, weights, 1);
      rec.U = U;
      st.schedule.threshold_state.t = t;
      st.schedule.threshold_state.lambda = lambda;
      st.schedule.threshold_state = theorem2_step(st.schedule.threshold_state, U);
    }
  }

  std::mt19937_64 buf_rng(substream(cfg.seed, "buffer", static_cast<std::uint64_t>(t)));
  std::vector<std::size_t> stream(task.size());
  std::iota(stream.begin(), stream.end(), 0);
  std::shuffle(stream.begin(), stream.end(), buf_rng);
  for (std::size_t i : stream)
    st.buffer.insert({task.points()[i], task.label(i), t}, st.buffer.seen(), buf_rng);
  rec.buffer_composition = st.buffer.composition();

  st.snapshots.push_back(st.encoder);
  st.completed = t;
  st.trace.tasks.push_back(std::move(rec));
}

inline int class_count(std::span<const TaskSplit> tasks) {
  int mx = -1;
  for (const auto& t : tasks)
    for (int c : t.classes) mx = std::max(mx, c);
  return mx + 1;
}

/// Exact population losses on the parameter snapshots and the resulting bound report.
inline BoundReport evaluate_bounds(const RunState& st, std::span<const TaskSplit> tasks, const ContinualConfig& cfg) {
  const int T = st.completed;
  const int k = cfg.bounds.negatives;
  std::vector<TaskDistribution> dists;
  for (int t = 0; t < T; ++t) dists.push_back(tasks[t].train);
  BoundInputs in;
  in.train_losses.push_back(population_contrastive(st.snapshots[0], dists[0], k, Execution::parallel));
  for (int t = 2; t <= T; ++t) {
    const auto& rec = st.trace.tasks[t - 1];
    MixtureWeights w = cfg.bounds.weights == "buffer" ? MixtureWeights(t, rec.mixture_estimate)
                                                      : MixtureWeights::uniform(t);
    const auto seen = mixture(std::span(dists).first(t - 1), w);
    const double lam = rec.lambda.value_or(cfg.schedule.lambda0);
    in.train_losses.push_back(population_train_loss(st.snapshots[t - 1], st.snapshots[t - 2], dists[t - 1], seen,
                                                    lam, k, Execution::parallel));
    in.weights.push_back(std::move(w));
    in.lambdas.push_back(lam);
  }
  in.realized_test_loss = population_test_loss(st.snapshots.back(), dists, k, Execution::parallel);
  return theorem1_bounds(in, k);
}

/// Probe the current encoder on last task + buffer, test on every task's held-out split.
inline ProbeResult probe_state(const RunState& st, std::span<const TaskSplit> tasks, const ContinualConfig& cfg) {
  const int T = st.completed;
  LabeledSet train;
  const auto& last = tasks[T - 1].train;
  for (std::size_t i = 0; i < last.size(); ++i) {
    train.points.push_back(last.points()[i]);
    train.labels.push_back(last.label(i));
  }
  for (const auto& s : st.buffer.items()) {
    train.points.push_back(s.point);
    train.labels.push_back(s.label);
  }
  std::vector<LabeledSet> tests;
  for (int t = 0; t < T; ++t) tests.push_back({tasks[t].test_points, tasks[t].test_labels});
  return linear_probe(st.encoder, train, tests, class_count(tasks), cfg.probe, substream(cfg.seed, "probe"));
}

/// Runs tasks [st.completed, tasks.size()) and finalizes the trace.
inline void continue_sequence(RunState& st, std::span<const TaskSplit> tasks, const ContinualConfig& cfg,
                              const EpochSink& sink = {},
                              const std::function<void(const RunState&)>& on_task_end = {}) {
  while (st.completed < static_cast<int>(tasks.size())) {
    run_task(st, tasks[st.completed].train, cfg, sink);
    if (on_task_end) on_task_end(st);
  }
  if (cfg.run_probe) st.trace.probe = probe_state(st, tasks, cfg);
  if (cfg.bounds.evaluate && st.completed >= 2) st.trace.bounds = evaluate_bounds(st, tasks, cfg);
}

/// Median of the U_t values of a fixed-lambda calibration run (theorem2 threshold).
inline double calibrate_threshold(std::span<const TaskSplit> tasks, ContinualConfig cfg) {
  cfg.schedule.mode = LambdaMode::theorem2;
  cfg.threshold = std::numeric_limits<double>::max();
  cfg.run_probe = false;
  cfg.bounds.evaluate = false;
  RunState st = initial_state(cfg, tasks.front().train.dimension());
  continue_sequence(st, tasks, cfg);
  std::vector<double> us;
  for (const auto& r : st.trace.tasks)
    if (r.U) us.push_back(*r.U);
  if (us.empty()) return 1.0;
  std::sort(us.begin(), us.end());
  const std::size_t n = us.size();
  return n % 2 ? us[n / 2] : 0.5 * (us[n / 2 - 1] + us[n / 2]);
}

inline RunState run_sequence(std::span<const TaskSplit> tasks, ContinualConfig cfg, const EpochSink& sink = {},
                             const std::function<void(const RunState&)>& on_task_end = {}) {
  if (tasks.empty()) throw std::invalid_argument("run_sequence: no tasks");
  if (cfg.schedule.mode == LambdaMode::theorem2 && !cfg.threshold) cfg.threshold = calibrate_threshold(tasks, cfg);
  RunState st = initial_state(cfg, tasks.front().train.dimension());
  continue_sequence(st, tasks, cfg, sink, on_task_end);
  return st;
}

}  // namespace ccl
