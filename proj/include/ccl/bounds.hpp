#pragma once

// Closed-form constants and executable evaluators for the distillation lemma,
// the test-loss sandwich over T tasks, the threshold scheduler on U_t, and the
// turning point of the upper bound in lambda.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccl/core.hpp"
#include "ccl/losses.hpp"

namespace ccl {

struct BoundConstants {
  int k = 1;
  double alpha = 0.0;
  double beta = 0.0;
  double beta_prime = 0.0;
};

/// alpha = 2e^2/(k+e^2), beta = 2 - alpha + alpha log(alpha/2),
/// beta' = -alpha log(1+k e^2) - 2k e^2/(1+k e^2).
inline BoundConstants constants(int k) {
  if (k < 1) throw std::invalid_argument("constants: k must be >= 1");
  const double e2 = std::exp(2.0);
  const double kd = static_cast<double>(k);
  BoundConstants c;
  c.k = k;
  c.alpha = 2.0 * e2 / (kd + e2);
  c.beta = 2.0 - c.alpha + c.alpha * std::log(c.alpha / 2.0);
  c.beta_prime = -c.alpha * std::log1p(kd * e2) - 2.0 * kd * e2 / (1.0 + kd * e2);
  return c;
}

/// The single-negative lower constant as written for the main lemma: -alpha log(1+e^2) - alpha.
inline double beta_prime_single(double alpha) { return -alpha * std::log1p(std::exp(2.0)) - alpha; }

/// Sum_{t=2}^T (t-1) alpha^{T-t} = (T - 1 - T alpha + alpha^T) / (1 - alpha)^2.
inline double accumulation_factor(int T, double alpha) {
  return (T - 1 - T * alpha + std::pow(alpha, T)) / ((1.0 - alpha) * (1.0 - alpha));
}

struct LemmaSlack {
  double upper = 0.0;  // alpha L_con(f_prev) + L_dis + beta - L_con(f_t)
  double lower = 0.0;  // L_con(f_t) - alpha L_con(f_prev) - L_dis - beta'
};

inline LemmaSlack lemma1_slack(const EmbeddingModel& f_t, const EmbeddingModel& f_prev,
                               const TaskDistribution& dist, int k, const BoundConstants& c) {
  const double con_t = population_contrastive(f_t, dist, k);
  const double con_prev = population_contrastive(f_prev, dist, k);
  const double dis = population_distillation(f_t, f_prev, dist, k);
  return {c.alpha * con_prev + dis + c.beta - con_t, con_t - c.alpha * con_prev - dis - c.beta_prime};
}

inline LemmaSlack lemma1_slack(const EmbeddingModel& f_t, const EmbeddingModel& f_prev,
                               const TaskDistribution& dist, int k) {
  return lemma1_slack(f_t, f_prev, dist, k, constants(k));
}

struct GammaProfile {
  int t = 0;
  double lambda = 0.0;
  double gamma = 0.0;        // min({1/t} U {lambda k_tj})
  double gamma_prime = 0.0;  // max({1} U {lambda k_tj})
};

inline GammaProfile gamma(int t, double lambda, const MixtureWeights& w) {
  if (t < 2) throw std::invalid_argument("gamma: t must be >= 2");
  if (w.task() != t) throw std::invalid_argument("gamma: weights belong to task " + std::to_string(w.task()));
  if (lambda < 0.0) throw std::invalid_argument("gamma: lambda must be >= 0");
  GammaProfile g{t, lambda, 1.0 / t, 1.0};
  for (double k : w.weights()) {
    g.gamma = std::min(g.gamma, lambda * k);
    g.gamma_prime = std::max(g.gamma_prime, lambda * k);
  }
  return g;
}

enum class SurrogateMode { analytic, optimized };

inline const char* to_string(SurrogateMode m) { return m == SurrogateMode::analytic ? "analytic" : "optimized"; }

/// Population contrastive loss achieved by a free per-point embedding table
/// trained with projected gradient descent on the exact loss.
inline double optimized_min_contrastive(const TaskDistribution& dist, int k, std::size_t dim = 8,
                                        int iterations = 300, double step = 0.5, std::uint64_t seed = 7) {
  const std::size_t n = dist.size();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  std::vector<Vector> e(n, Vector(dim));
  for (auto& v : e) {
    for (double& x : v) x = gauss(rng);
    const double nv = norm(v);
    for (double& x : v) x /= nv;
  }
  auto loss_and_grad = [&](std::vector<Vector>* grad) {
    if (grad) grad->assign(n, Vector(dim, 0.0));
    double total = 0.0;
    std::vector<double> v(static_cast<std::size_t>(k));
    for_each_tuple(dist, k, [&](const TupleOutcome& t) {
      const double pos = dot(e[t.anchor], e[t.positive]);
      for (int i = 0; i < k; ++i) v[i] = pos - dot(e[t.anchor], e[t.negatives[i]]);
      total += t.weight * logistic_link(v);
      if (!grad) return;
      const auto s = similarity_triple(v);
      for (int i = 0; i < k; ++i) {
        const double c = -t.weight * s.q_neg[i];  // d loss / d v_i
        const auto& ea = e[t.anchor];
        const auto& ep = e[t.positive];
        const auto& en = e[t.negatives[i]];
        for (std::size_t d = 0; d < dim; ++d) {
          (*grad)[t.anchor][d] += c * (ep[d] - en[d]);
          (*grad)[t.positive][d] += c * ea[d];
          (*grad)[t.negatives[i]][d] -= c * ea[d];
        }
      }
    });
    return total;
  };
  std::vector<Vector> g;
  // a constant embedding achieves log(1 + k) on any distribution
  double best = std::min(std::log1p(static_cast<double>(k)), loss_and_grad(nullptr));
  for (int it = 0; it < iterations; ++it) {
    loss_and_grad(&g);
    for (std::size_t i = 0; i < n; ++i) {
      const double radial = dot(g[i], e[i]);
      for (std::size_t d = 0; d < dim; ++d) e[i][d] -= step * (g[i][d] - radial * e[i][d]) / dist.mass(i);
      const double nv = norm(e[i]);
      for (double& x : e[i]) x /= nv;
    }
    best = std::min(best, loss_and_grad(nullptr));
  }
  return best;
}

/// Plug-in for min_f L_con(f; D). The analytic value log(1 + k e^-2) is a certified
/// lower bound; the optimized value is an achieved loss (upper estimate of the min).
inline double min_con_surrogate(const TaskDistribution& dist, int k, SurrogateMode mode) {
  if (mode == SurrogateMode::analytic) return std::log1p(k * std::exp(-2.0));
  return optimized_min_contrastive(dist, k);
}

/// Training losses of a T-task sequence plus everything the theorem evaluators need.
struct BoundInputs {
  std::vector<double> train_losses;    // L_train(f_t), t = 1..T
  std::vector<MixtureWeights> weights; // tasks 2..T
  std::vector<double> lambdas;         // lambda_t for tasks 2..T (a single value is broadcast)
  std::vector<double> min_con;         // min_f L_con(f; D_t), t = 2..T; empty -> analytic
  SurrogateMode surrogate = SurrogateMode::analytic;
  std::optional<double> realized_test_loss;

  int tasks() const { return static_cast<int>(train_losses.size()); }
  double lambda_at(int t) const {
    if (lambdas.empty()) throw std::invalid_argument("BoundInputs: no lambda given");
    return lambdas.size() == 1 ? lambdas.front() : lambdas.at(static_cast<std::size_t>(t - 2));
  }
};

struct BoundReport {
  int tasks = 0;
  BoundConstants constants;
  std::vector<double> train_losses;
  std::vector<double> lambdas;
  std::vector<std::vector<double>> weights;           // tasks 2..T
  std::vector<double> gammas, gamma_primes;           // tasks 2..T
  std::vector<double> upper_coefficients;             // tasks 1..T
  std::vector<double> lower_coefficients;             // tasks 1..T
  std::vector<double> min_con;
  std::string surrogate = "analytic";
  std::optional<double> eta, eta_prime;
  std::optional<double> upper, lower;
  std::optional<double> realized_test_loss;
};

namespace detail {

inline void check_inputs(const BoundInputs& in) {
  const int T = in.tasks();
  if (T < 2) throw std::invalid_argument("theorem1: need at least 2 tasks");
  if (in.weights.size() != static_cast<std::size_t>(T - 1))
    throw std::invalid_argument("theorem1: expected " + std::to_string(T - 1) + " weight vectors");
  if (in.lambdas.size() != 1 && in.lambdas.size() != static_cast<std::size_t>(T - 1))
    throw std::invalid_argument("theorem1: expected 1 or T-1 lambda values");
  if (!in.min_con.empty() && in.min_con.size() != static_cast<std::size_t>(T - 1))
    throw std::invalid_argument("theorem1: expected T-1 min_f surrogates");
}

inline BoundReport report_skeleton(const BoundInputs& in, const BoundConstants& c) {
  BoundReport r;
  r.tasks = in.tasks();
  r.constants = c;
  r.train_losses = in.train_losses;
  for (int t = 2; t <= r.tasks; ++t) r.lambdas.push_back(in.lambda_at(t));
  for (const auto& w : in.weights) r.weights.push_back(w.weights());
  r.realized_test_loss = in.realized_test_loss;
  return r;
}

}  // namespace detail

inline BoundReport theorem1_upper(const BoundInputs& in, const BoundConstants& c) {
  detail::check_inputs(in);
  auto r = detail::report_skeleton(in, c);
  const int T = r.tasks;
  const double a = c.alpha;
  r.surrogate = to_string(in.surrogate);
  r.upper_coefficients.push_back(std::pow(a, T - 1));
  double upper = r.upper_coefficients.back() * in.train_losses[0];
  double eta = c.beta * accumulation_factor(T, a);
  for (int t = 2; t <= T; ++t) {
    const auto g = gamma(t, in.lambda_at(t), in.weights[t - 2]);
    if (!(g.gamma > 0.0))
      throw std::invalid_argument("theorem1_upper: gamma_" + std::to_string(t) +
                                  "(lambda) = 0 for task " + std::to_string(t));
    const double m = in.min_con.empty() ? std::log1p(c.k * std::exp(-2.0)) : in.min_con[t - 2];
    r.gammas.push_back(g.gamma);
    r.min_con.push_back(m);
    const double coef = std::pow(a, T - t) / g.gamma;
    r.upper_coefficients.push_back(coef);
    upper += coef * in.train_losses[t - 1];
    eta += std::pow(a, T - t) * (1.0 - 1.0 / g.gamma) * m;
  }
  r.eta = eta;
  r.upper = upper + eta;
  return r;
}

inline BoundReport theorem1_upper(const BoundInputs& in, int k) { return theorem1_upper(in, constants(k)); }

inline BoundReport theorem1_lower(const BoundInputs& in, const BoundConstants& c) {
  detail::check_inputs(in);
  auto r = detail::report_skeleton(in, c);
  const int T = r.tasks;
  const double a = c.alpha;
  r.lower_coefficients.push_back(std::pow(a, T - 1));
  double lower = r.lower_coefficients.back() * in.train_losses[0];
  for (int t = 2; t <= T; ++t) {
    const auto g = gamma(t, in.lambda_at(t), in.weights[t - 2]);
    r.gamma_primes.push_back(g.gamma_prime);
    const double coef = std::pow(a, T - t) / g.gamma_prime;
    r.lower_coefficients.push_back(coef);
    lower += coef * in.train_losses[t - 1];
  }
  r.eta_prime = c.beta_prime * accumulation_factor(T, a);
  r.lower = lower + *r.eta_prime;
  return r;
}

inline BoundReport theorem1_lower(const BoundInputs& in, int k) { return theorem1_lower(in, constants(k)); }

/// Upper and lower evaluated together.
inline BoundReport theorem1_bounds(const BoundInputs& in, int k) {
  auto r = theorem1_upper(in, k);
  const auto lo = theorem1_lower(in, k);
  r.gamma_primes = lo.gamma_primes;
  r.lower_coefficients = lo.lower_coefficients;
  r.eta_prime = lo.eta_prime;
  r.lower = lo.lower;
  return r;
}

inline nlohmann::json to_json(const BoundReport& r) {
  nlohmann::json j;
  j["tasks"] = r.tasks;
  j["constants"] = {{"k", r.constants.k},
                    {"alpha", r.constants.alpha},
                    {"beta", r.constants.beta},
                    {"beta_prime", r.constants.beta_prime}};
  j["train_losses"] = r.train_losses;
  j["lambdas"] = r.lambdas;
  j["weights"] = r.weights;
  j["gammas"] = r.gammas;
  j["gamma_primes"] = r.gamma_primes;
  j["upper_coefficients"] = r.upper_coefficients;
  j["lower_coefficients"] = r.lower_coefficients;
  j["min_con"] = r.min_con;
  j["surrogate"] = r.surrogate;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j["eta"] = opt(r.eta);
  j["eta_prime"] = opt(r.eta_prime);
  j["upper"] = opt(r.upper);
  j["lower"] = opt(r.lower);
  j["realized_test_loss"] = opt(r.realized_test_loss);
  return j;
}

/// U_t = sum_{j=2}^t alpha^{t-j} / gamma_j(lambda_t) * L_train(f_j), with the current
/// lambda_t inside every gamma_j. `train_losses` holds tasks 1..t, `weights` tasks 2..t.
inline double compute_U(std::span<const double> train_losses, double lambda_t,
                        std::span<const MixtureWeights> weights, int k) {
  const int t = static_cast<int>(train_losses.size());
  if (t < 2) throw std::invalid_argument("compute_U: t must be >= 2");
  if (weights.size() < static_cast<std::size_t>(t - 1))
    throw std::invalid_argument("compute_U: missing weights");
  const double a = constants(k).alpha;
  double u = 0.0;
  for (int j = 2; j <= t; ++j) {
    const auto g = gamma(j, lambda_t, weights[j - 2]);
    if (!(g.gamma > 0.0)) throw std::invalid_argument("compute_U: gamma_" + std::to_string(j) + " = 0");
    u += std::pow(a, t - j) / g.gamma * train_losses[j - 1];
  }
  return u;
}

struct ScheduleState {
  int t = 2;
  double lambda = 1.0;
  std::vector<double> thresholds{1.0};  // u_t; the last entry repeats for later tasks
  std::vector<double> deltas{0.1};      // Delta_t; same convention
  double U = 0.0;

  double threshold() const { return at(thresholds); }
  double delta() const { return at(deltas); }

 private:
  double at(const std::vector<double>& v) const {
    const std::size_t i = static_cast<std::size_t>(std::max(0, t - 2));
    return i < v.size() ? v[i] : v.back();
  }
};

/// lambda_{t+1} = lambda_t + Delta_t if U_t > u_t, else lambda_t.
inline ScheduleState theorem2_step(ScheduleState s, double U) {
  if (!(s.threshold() > 0.0)) throw std::invalid_argument("theorem2_step: threshold must be > 0");
  if (s.delta() < 0.0) throw std::invalid_argument("theorem2_step: delta must be >= 0");
  s.U = U;
  if (U > s.threshold()) s.lambda += s.delta();
  ++s.t;
  return s;
}

/// Smallest lambda with lambda k_tj >= 1/t for all t, j: max_t 1/(t min_j k_tj).
inline double turning_point(std::span<const MixtureWeights> weights) {
  if (weights.empty()) throw std::invalid_argument("turning_point: no tasks");
  double lam = 0.0;
  for (const auto& w : weights) {
    const double kmin = *std::min_element(w.weights().begin(), w.weights().end());
    lam = std::max(lam, (1.0 / w.task()) / kmin);
  }
  return lam;
}

struct CurvePoint {
  double lambda = 0.0;
  double upper = 0.0;
  double lower = 0.0;
};

/// Bounds on a lambda grid with fixed training losses; grid points with gamma = 0 are skipped.
inline std::vector<CurvePoint> bound_curve(const BoundInputs& base, std::span<const double> grid, int k,
                                           std::vector<double>* skipped = nullptr) {
  std::vector<CurvePoint> out;
  for (double lam : grid) {
    BoundInputs in = base;
    in.lambdas = {lam};
    bool ok = lam > 0.0;
    if (ok) {
      for (int t = 2; t <= in.tasks(); ++t)
        if (!(gamma(t, lam, in.weights[t - 2]).gamma > 0.0)) ok = false;
    }
    if (!ok) {
      if (skipped) skipped->push_back(lam);
      continue;
    }
    const auto r = theorem1_bounds(in, k);
    out.push_back({lam, *r.upper, *r.lower});
  }
  return out;
}

inline std::vector<double> linear_grid(double lo, double hi, int points) {
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) g[i] = lo + (hi - lo) * i / (points - 1);
  return g;
}

/// Sweep-based turning point: the first grid lambda after which the upper bound
/// stays within `tol` of its final value.
inline double turning_point_sweep(const std::vector<CurvePoint>& curve, double tol = 1e-12) {
  if (curve.empty()) throw std::invalid_argument("turning_point_sweep: empty curve");
  const double flat = curve.back().upper;
  std::size_t i = curve.size() - 1;
  while (i > 0 && std::abs(curve[i - 1].upper - flat) <= tol * std::max(1.0, std::abs(flat))) --i;
  return curve[i].lambda;
}

}  // namespace ccl
