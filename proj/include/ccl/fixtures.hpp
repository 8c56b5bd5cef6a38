#pragma once

// Seeded random distributions, table models and view batches for property checks.

#include <cstdint>
#include <random>
#include <vector>

#include "ccl/core.hpp"
#include "ccl/trainer.hpp"

namespace ccl {

inline UnitVector random_unit(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Vector v(dim);
  for (double& x : v) x = g(rng);
  return UnitVector(v);
}

/// n points in R^2 spread over up to `max_classes` classes (each class non-empty) with random masses.
inline TaskDistribution random_distribution(std::size_t n, int max_classes, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), m(0.05, 1.0);
  const int classes = std::min<int>(max_classes, static_cast<int>(n));
  std::uniform_int_distribution<int> pick(1, classes);
  const int c_count = pick(rng);
  std::vector<Vector> pts;
  std::vector<int> labels;
  std::vector<double> mass;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pts.push_back({u(rng), u(rng)});
    labels.push_back(i < static_cast<std::size_t>(c_count) ? static_cast<int>(i)
                                                           : std::uniform_int_distribution<int>(0, c_count - 1)(rng));
    mass.push_back(m(rng));
    total += mass.back();
  }
  for (double& x : mass) x /= total;
  // fold rounding into the largest entry so the sum is 1 to within an ulp or two
  double s = 0.0;
  for (double x : mass) s += x;
  *std::max_element(mass.begin(), mass.end()) += 1.0 - s;
  return TaskDistribution(2, std::move(pts), std::move(labels), std::move(mass));
}

inline TableModel random_table_model(const TaskDistribution& d, std::size_t dim, std::mt19937_64& rng) {
  TableModel t(dim);
  for (const auto& p : d.points()) t.set(p, random_unit(dim, rng));
  return t;
}

/// N samples with two jittered views each, labels drawn from `classes`.
inline ViewBatch random_view_batch(std::size_t N, std::size_t input_dim, int classes, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::uniform_int_distribution<int> c(0, classes - 1);
  ViewBatch b;
  for (std::size_t i = 0; i < N; ++i) {
    Vector base(input_dim);
    for (double& x : base) x = g(rng);
    const int label = c(rng);
    for (int v = 0; v < 2; ++v) {
      Vector view = base;
      for (double& x : view) x += 0.1 * g(rng);
      b.views.push_back(std::move(view));
      b.labels.push_back(label);
    }
  }
  return b;
}

}  // namespace ccl
