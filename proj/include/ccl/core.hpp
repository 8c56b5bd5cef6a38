#pragma once

// Finite labeled distributions, unit-sphere embeddings, mixtures and the
// (anchor, positive, negatives...) outcome space used by every population loss.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

namespace ccl {

using Vector = std::vector<double>;

inline constexpr double kMassTolerance = 1e-12;
inline constexpr double kZeroNorm = 1e-12;

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

class UnitVector {
 public:
  UnitVector() = default;

  /// Normalizes `v`. Vectors with norm below 1e-12 map to the first basis vector.
  explicit UnitVector(std::span<const double> v) : coords_(v.begin(), v.end()) {
    if (coords_.empty()) throw std::invalid_argument("UnitVector: dimension 0");
    const double n = norm(coords_);
    if (n < kZeroNorm) {
      std::fill(coords_.begin(), coords_.end(), 0.0);
      coords_[0] = 1.0;
    } else if (std::abs(n - 1.0) > 4.0 * std::numeric_limits<double>::epsilon()) {
      for (double& c : coords_) c /= n;
    }
  }

  std::span<const double> coords() const { return coords_; }
  std::size_t dim() const { return coords_.size(); }
  double operator[](std::size_t i) const { return coords_[i]; }
  double dot(const UnitVector& o) const { return ccl::dot(coords_, o.coords_); }

  bool operator==(const UnitVector&) const = default;

 private:
  std::vector<double> coords_;
};

inline UnitVector normalize(std::span<const double> v) { return UnitVector(v); }

class TaskDistribution {
 public:
  TaskDistribution() = default;

  TaskDistribution(std::size_t dimension, std::vector<Vector> points, std::vector<int> labels,
                   std::vector<double> mass)
      : dimension_(dimension),
        points_(std::move(points)),
        labels_(std::move(labels)),
        mass_(std::move(mass)) {
    validate();
  }

  static TaskDistribution uniform(std::vector<Vector> points, std::vector<int> labels) {
    if (points.empty()) throw std::invalid_argument("TaskDistribution: empty support");
    const std::size_t d = points.front().size();
    std::vector<double> mass(points.size(), 1.0 / static_cast<double>(points.size()));
    return TaskDistribution(d, std::move(points), std::move(labels), std::move(mass));
  }

  std::size_t size() const { return points_.size(); }
  std::size_t dimension() const { return dimension_; }
  std::span<const double> point(std::size_t i) const { return points_[i]; }
  const std::vector<Vector>& points() const { return points_; }
  int label(std::size_t i) const { return labels_[i]; }
  const std::vector<int>& labels() const { return labels_; }
  double mass(std::size_t i) const { return mass_[i]; }
  const std::vector<double>& masses() const { return mass_; }

  /// Sorted distinct class ids.
  const std::vector<int>& classes() const { return classes_; }

  double class_prob(int c) const {
    auto it = class_mass_.find(c);
    return it == class_mass_.end() ? 0.0 : it->second;
  }

  /// Indices of the points labeled `c`.
  const std::vector<std::size_t>& members(int c) const {
    static const std::vector<std::size_t> none;
    auto it = members_.find(c);
    return it == members_.end() ? none : it->second;
  }

  /// Conditional probability of point i given its class.
  double within_class(std::size_t i) const { return mass_[i] / class_prob(labels_[i]); }

 private:
  void validate() {
    if (points_.empty()) throw std::invalid_argument("TaskDistribution: empty support");
    if (dimension_ == 0) throw std::invalid_argument("TaskDistribution: dimension 0");
    if (labels_.size() != points_.size() || mass_.size() != points_.size())
      throw std::invalid_argument("TaskDistribution: points/labels/mass length mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < points_.size(); ++i) {
      if (points_[i].size() != dimension_)
        throw std::invalid_argument("TaskDistribution: point " + std::to_string(i) +
                                    " has wrong dimension");
      if (!(mass_[i] >= 0.0)) throw std::invalid_argument("TaskDistribution: negative mass");
      total += mass_[i];
      class_mass_[labels_[i]] += mass_[i];
      members_[labels_[i]].push_back(i);
    }
    if (std::abs(total - 1.0) > kMassTolerance)
      throw std::invalid_argument("TaskDistribution: mass sums to " + std::to_string(total));
    for (const auto& [c, m] : class_mass_) {
      if (!(m > 0.0))
        throw std::invalid_argument("TaskDistribution: class " + std::to_string(c) +
                                    " has zero mass");
      classes_.push_back(c);
    }
  }

  std::size_t dimension_ = 0;
  std::vector<Vector> points_;
  std::vector<int> labels_;
  std::vector<double> mass_;
  std::vector<int> classes_;
  std::map<int, double> class_mass_;
  std::map<int, std::vector<std::size_t>> members_;
};

inline nlohmann::json to_json(const TaskDistribution& d) {
  return {{"dimension", d.dimension()},
          {"points", d.points()},
          {"labels", d.labels()},
          {"mass", d.masses()}};
}

inline TaskDistribution distribution_from_json(const nlohmann::json& j) {
  for (const auto& [key, _] : j.items()) {
    if (key != "dimension" && key != "points" && key != "labels" && key != "mass")
      throw std::invalid_argument("distribution JSON: unknown key '" + key + "'");
  }
  return TaskDistribution(j.at("dimension").get<std::size_t>(),
                          j.at("points").get<std::vector<Vector>>(),
                          j.at("labels").get<std::vector<int>>(),
                          j.at("mass").get<std::vector<double>>());
}

/// Convex weights k_{t1..t,t-1} of the previous tasks inside the seen-data mixture.
class MixtureWeights {
 public:
  MixtureWeights(int task, std::vector<double> weights) : task_(task), weights_(std::move(weights)) {
    if (task_ < 2) throw std::invalid_argument("MixtureWeights: task index must be >= 2");
    if (weights_.size() != static_cast<std::size_t>(task_ - 1))
      throw std::invalid_argument("MixtureWeights: expected " + std::to_string(task_ - 1) +
                                  " weights, got " + std::to_string(weights_.size()));
    double total = 0.0;
    for (double w : weights_) {
      if (!(w > 0.0)) throw std::invalid_argument("MixtureWeights: weights must be positive");
      total += w;
    }
    if (std::abs(total - 1.0) > kMassTolerance)
      throw std::invalid_argument("MixtureWeights: weights sum to " + std::to_string(total));
  }

  static MixtureWeights uniform(int task) {
    return MixtureWeights(task, std::vector<double>(task - 1, 1.0 / (task - 1)));
  }

  int task() const { return task_; }
  const std::vector<double>& weights() const { return weights_; }
  double operator[](std::size_t j) const { return weights_[j]; }
  std::size_t size() const { return weights_.size(); }

 private:
  int task_;
  std::vector<double> weights_;
};

/// D_{1:t-1}: each task's point masses scaled by its weight; class ids are kept.
inline TaskDistribution mixture(std::span<const TaskDistribution> dists, const MixtureWeights& w) {
  if (dists.size() != w.size())
    throw std::invalid_argument("mixture: " + std::to_string(dists.size()) + " tasks but " +
                                std::to_string(w.size()) + " weights");
  const std::size_t d = dists.front().dimension();
  std::vector<Vector> points;
  std::vector<int> labels;
  std::vector<double> mass;
  for (std::size_t j = 0; j < dists.size(); ++j) {
    if (dists[j].dimension() != d) throw std::invalid_argument("mixture: dimension mismatch");
    for (std::size_t i = 0; i < dists[j].size(); ++i) {
      points.push_back(dists[j].points()[i]);
      labels.push_back(dists[j].label(i));
      mass.push_back(w[j] * dists[j].mass(i));
    }
  }
  return TaskDistribution(d, std::move(points), std::move(labels), std::move(mass));
}

class EmbeddingModel {
 public:
  virtual ~EmbeddingModel() = default;
  virtual UnitVector embed(std::span<const double> point) const = 0;
  virtual std::size_t dimension() const = 0;
  virtual std::vector<double> parameters() const { return {}; }
};

class ConstantModel final : public EmbeddingModel {
 public:
  explicit ConstantModel(UnitVector v) : v_(std::move(v)) {}
  UnitVector embed(std::span<const double>) const override { return v_; }
  std::size_t dimension() const override { return v_.dim(); }

 private:
  UnitVector v_;
};

/// Lookup model over an explicit point -> embedding table (exact coordinate match).
class TableModel final : public EmbeddingModel {
 public:
  TableModel(std::size_t dim) : dim_(dim) {}

  void set(const Vector& point, UnitVector e) {
    if (e.dim() != dim_) throw std::invalid_argument("TableModel: embedding dimension mismatch");
    table_[point] = std::move(e);
  }

  UnitVector embed(std::span<const double> point) const override {
    auto it = table_.find(Vector(point.begin(), point.end()));
    if (it == table_.end()) throw std::out_of_range("TableModel: point not in table");
    return it->second;
  }
  std::size_t dimension() const override { return dim_; }

 private:
  std::size_t dim_;
  std::map<Vector, UnitVector> table_;
};

inline TableModel snapshot(const EmbeddingModel& f, std::span<const TaskDistribution> dists) {
  TableModel t(f.dimension());
  for (const auto& d : dists)
    for (const auto& p : d.points()) t.set(p, f.embed(p));
  return t;
}

inline std::vector<UnitVector> embed_all(const EmbeddingModel& f, const TaskDistribution& d) {
  std::vector<UnitVector> out;
  out.reserve(d.size());
  for (const auto& p : d.points()) out.push_back(f.embed(p));
  return out;
}

/// One joint draw (x, x+, x1-, ..., xk-) expressed as indices into the distribution.
struct TupleOutcome {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::vector<std::size_t> negatives;
  double weight = 0.0;
};

enum class Execution { sequential, parallel };

inline unsigned worker_count() {
  if (const char* env = std::getenv("CCL_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

namespace detail {

// Visits every positive-weight outcome whose anchor lies in [anchor_begin, anchor_end).
// weight = mu(c+) D_{c+}(x) D_{c+}(x+) prod_i mu(c_i) D_{c_i}(x_i) = p(x) p(x+) / mu(c+) prod_i p(x_i).
template <class Fn>
void visit_tuples(const TaskDistribution& dist, int k, std::size_t anchor_begin,
                  std::size_t anchor_end, Fn&& fn) {
  const std::size_t n = dist.size();
  TupleOutcome out;
  out.negatives.assign(static_cast<std::size_t>(k), 0);
  std::vector<double> neg_weight(static_cast<std::size_t>(k) + 1, 1.0);
  for (std::size_t a = anchor_begin; a < anchor_end; ++a) {
    if (dist.mass(a) == 0.0) continue;
    const int c = dist.label(a);
    const double pc = dist.class_prob(c);
    for (std::size_t p : dist.members(c)) {
      if (dist.mass(p) == 0.0) continue;
      const double pair_w = dist.mass(a) * dist.mass(p) / pc;
      out.anchor = a;
      out.positive = p;
      // odometer over the k negatives; neg_weight[i+1] = prod of the first i+1 masses
      std::fill(out.negatives.begin(), out.negatives.end(), 0);
      neg_weight[0] = pair_w;
      for (int i = 0; i < k; ++i) neg_weight[i + 1] = neg_weight[i] * dist.mass(0);
      while (true) {
        if (neg_weight[k] > 0.0) {
          out.weight = neg_weight[k];
          fn(static_cast<const TupleOutcome&>(out));
        }
        int pos = k - 1;
        while (pos >= 0 && out.negatives[pos] + 1 == n) {
          out.negatives[pos] = 0;
          --pos;
        }
        if (pos < 0) break;
        ++out.negatives[pos];
        for (int i = pos; i < k; ++i)
          neg_weight[i + 1] = neg_weight[i] * dist.mass(out.negatives[i]);
      }
    }
  }
}

}  // namespace detail

/// Calls fn(const TupleOutcome&) for every positive-weight outcome of the k-negative draw.
template <class Fn>
void for_each_tuple(const TaskDistribution& dist, int k, Fn&& fn) {
  if (k < 1) throw std::invalid_argument("for_each_tuple: k must be >= 1");
  detail::visit_tuples(dist, k, 0, dist.size(), std::forward<Fn>(fn));
}

inline std::vector<TupleOutcome> enumerate_tuples(const TaskDistribution& dist, int k) {
  std::vector<TupleOutcome> out;
  for_each_tuple(dist, k, [&](const TupleOutcome& t) { out.push_back(t); });
  return out;
}

/// Sum of per-outcome values weighted by outcome probability. The parallel mode
/// splits anchors into contiguous blocks and adds block sums in block order.
template <class Fn>
double expectation(const TaskDistribution& dist, int k, Fn&& value, Execution exec) {
  if (k < 1) throw std::invalid_argument("expectation: k must be >= 1");
  const std::size_t n = dist.size();
  const unsigned workers = exec == Execution::parallel
                               ? static_cast<unsigned>(std::min<std::size_t>(worker_count(), n))
                               : 1u;
  if (workers <= 1) {
    double total = 0.0;
    detail::visit_tuples(dist, k, 0, n,
                         [&](const TupleOutcome& t) { total += t.weight * value(t); });
    return total;
  }
  std::vector<double> partial(workers, 0.0);
  std::vector<std::thread> pool;
  const std::size_t block = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      const std::size_t lo = std::min(n, w * block);
      const std::size_t hi = std::min(n, lo + block);
      double s = 0.0;
      detail::visit_tuples(dist, k, lo, hi, [&](const TupleOutcome& t) { s += t.weight * value(t); });
      partial[w] = s;
    });
  }
  for (auto& th : pool) th.join();
  return std::accumulate(partial.begin(), partial.end(), 0.0);
}

}  // namespace ccl
