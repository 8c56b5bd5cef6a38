#pragma once

// Population contrastive/distillation losses (exact enumeration) and the
// batch-level SupCon and instance-relation distillation (IRD) losses.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "ccl/core.hpp"

namespace ccl {

/// log(1 + sum_i exp(-v_i)), shifted by max(0, max_i(-v_i)).
inline double logistic_link(std::span<const double> v) {
  double shift = 0.0;
  for (double x : v) shift = std::max(shift, -x);
  double s = std::exp(-shift);
  for (double x : v) s += std::exp(-x - shift);
  return shift + std::log(s);
}

/// Softmax with max-shift.
inline std::vector<double> softmax(std::span<const double> logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : logits) m = std::max(m, x);
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += (p[i] = std::exp(logits[i] - m));
  for (double& x : p) x /= s;
  return p;
}

inline std::vector<double> log_softmax(std::span<const double> logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : logits) m = std::max(m, x);
  double s = 0.0;
  for (double x : logits) s += std::exp(x - m);
  const double lse = m + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

/// Margins v_i = f(x)^T (f(x+) - f(x_i-)), positive-pair probability q and
/// per-negative probabilities q_i of one tuple.
struct SimilarityTriple {
  std::vector<double> v;
  double q = 0.0;
  std::vector<double> q_neg;
};

namespace detail {

// Pairwise inner products of a support's embeddings.
class Gram {
 public:
  Gram(const EmbeddingModel& f, const TaskDistribution& d) : n_(d.size()), g_(n_ * n_) {
    const auto e = embed_all(f, d);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = i; j < n_; ++j) g_[i * n_ + j] = g_[j * n_ + i] = e[i].dot(e[j]);
  }
  double operator()(std::size_t i, std::size_t j) const { return g_[i * n_ + j]; }

  // logits (s+, s1-, ..., sk-) of a tuple
  void logits(const TupleOutcome& t, std::vector<double>& out) const {
    out.resize(t.negatives.size() + 1);
    out[0] = (*this)(t.anchor, t.positive);
    for (std::size_t i = 0; i < t.negatives.size(); ++i) out[i + 1] = (*this)(t.anchor, t.negatives[i]);
  }

  void margins(const TupleOutcome& t, std::vector<double>& out) const {
    out.resize(t.negatives.size());
    const double pos = (*this)(t.anchor, t.positive);
    for (std::size_t i = 0; i < t.negatives.size(); ++i) out[i] = pos - (*this)(t.anchor, t.negatives[i]);
  }

 private:
  std::size_t n_;
  std::vector<double> g_;
};

inline thread_local std::vector<double> scratch_a, scratch_b;

}  // namespace detail

inline SimilarityTriple similarity_triple(std::span<const double> margins) {
  SimilarityTriple s;
  s.v.assign(margins.begin(), margins.end());
  std::vector<double> logits(margins.size() + 1, 0.0);
  for (std::size_t i = 0; i < margins.size(); ++i) logits[i + 1] = -margins[i];
  const auto p = softmax(logits);
  s.q = p[0];
  s.q_neg.assign(p.begin() + 1, p.end());
  return s;
}

/// softmax(f(x)^T f(x+), f(x)^T f(x1-), ...); first entry is the positive pair.
inline std::vector<double> similarity_prob(const EmbeddingModel& f, const TaskDistribution& dist,
                                           const TupleOutcome& t) {
  const UnitVector a = f.embed(dist.point(t.anchor));
  std::vector<double> logits{a.dot(f.embed(dist.point(t.positive)))};
  for (std::size_t n : t.negatives) logits.push_back(a.dot(f.embed(dist.point(n))));
  return softmax(logits);
}

inline double population_contrastive(const EmbeddingModel& f, const TaskDistribution& dist, int k,
                                     Execution exec = Execution::sequential) {
  const detail::Gram g(f, dist);
  return expectation(dist, k, [&](const TupleOutcome& t) {
    auto& v = detail::scratch_a;
    g.margins(t, v);
    return logistic_link(v);
  }, exec);
}

/// E[-p(f_prev) . log p(f_t)] over the k-negative tuple draw.
inline double population_distillation(const EmbeddingModel& f_t, const EmbeddingModel& f_prev,
                                      const TaskDistribution& dist, int k,
                                      Execution exec = Execution::sequential) {
  const detail::Gram gt(f_t, dist), gp(f_prev, dist);
  return expectation(dist, k, [&](const TupleOutcome& t) {
    auto& lt = detail::scratch_a;
    auto& lp = detail::scratch_b;
    gt.logits(t, lt);
    gp.logits(t, lp);
    const auto target = softmax(lp);
    const auto logp = log_softmax(lt);
    double ce = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) ce -= target[i] * logp[i];
    return ce;
  }, exec);
}

/// E[H(p(f; tuple))], the floor of population_distillation(., f, ...).
inline double population_entropy(const EmbeddingModel& f, const TaskDistribution& dist, int k) {
  return population_distillation(f, f, dist, k);
}

/// L_dis - L_con(f_t) - E[sum_i q_i(f_prev) v_i(f_t)]; identically zero.
inline double decomposition_residual(const EmbeddingModel& f_t, const EmbeddingModel& f_prev,
                                     const TaskDistribution& dist, int k) {
  const detail::Gram gt(f_t, dist), gp(f_prev, dist);
  const double cross = expectation(dist, k, [&](const TupleOutcome& t) {
    std::vector<double> vt, vp;
    gt.margins(t, vt);
    gp.margins(t, vp);
    const auto s = similarity_triple(vp);
    double acc = 0.0;
    for (std::size_t i = 0; i < vt.size(); ++i) acc += s.q_neg[i] * vt[i];
    return acc;
  }, Execution::sequential);
  return population_distillation(f_t, f_prev, dist, k) - population_contrastive(f_t, dist, k) - cross;
}

/// L_con(f_1; D_1) for the first task.
inline double population_train_loss(const EmbeddingModel& f_1, const TaskDistribution& task, int k) {
  return population_contrastive(f_1, task, k);
}

/// L_con(f_t; D_t) + lambda * L_dis(f_t; f_prev, D_{1:t-1}).
inline double population_train_loss(const EmbeddingModel& f_t, const EmbeddingModel& f_prev,
                                    const TaskDistribution& task, const TaskDistribution& seen,
                                    double lambda, int k, Execution exec = Execution::sequential) {
  if (lambda < 0.0) throw std::invalid_argument("population_train_loss: lambda must be >= 0");
  const double con = population_contrastive(f_t, task, k, exec);
  if (lambda == 0.0) return con;
  return con + lambda * population_distillation(f_t, f_prev, seen, k, exec);
}

inline double population_test_loss(const EmbeddingModel& f_final, std::span<const TaskDistribution> tasks,
                                   int k, Execution exec = Execution::sequential) {
  if (tasks.empty()) throw std::invalid_argument("population_test_loss: no tasks");
  double s = 0.0;
  for (const auto& d : tasks) s += population_contrastive(f_final, d, k, exec);
  return s;
}

// ---------------------------------------------------------------------------
// Batch losses

/// Two augmented views per sample, z[2i] and z[2i+1] share a label.
struct BatchEmbeddings {
  std::vector<UnitVector> z;
  std::vector<int> labels;
  double temperature = 0.5;

  std::size_t size() const { return z.size(); }
};

namespace detail {

inline std::vector<double> scaled_gram(const BatchEmbeddings& b) {
  const std::size_t m = b.size();
  std::vector<double> s(m * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i; j < m; ++j) s[i * m + j] = s[j * m + i] = b.z[i].dot(b.z[j]) / b.temperature;
  return s;
}

// log-softmax over row i excluding column i; entry i of the result is unused.
inline void row_log_softmax(const std::vector<double>& s, std::size_t m, std::size_t i,
                            std::vector<double>& out) {
  out.assign(m, 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < m; ++k)
    if (k != i) mx = std::max(mx, s[i * m + k]);
  double acc = 0.0;
  for (std::size_t k = 0; k < m; ++k)
    if (k != i) acc += std::exp(s[i * m + k] - mx);
  const double lse = mx + std::log(acc);
  for (std::size_t k = 0; k < m; ++k)
    if (k != i) out[k] = s[i * m + k] - lse;
}

}  // namespace detail

/// Loss value plus d(loss)/d(s_ij) where s_ij = z_i^T z_j (unscaled).
struct BatchLossGrad {
  double value = 0.0;
  std::vector<double> dsim;  // m x m, row = anchor
};

/// SupCon summed over the 2N anchors.
inline BatchLossGrad supcon_with_grad(const BatchEmbeddings& b) {
  const std::size_t m = b.size();
  if (b.labels.size() != m) throw std::invalid_argument("supcon: label count mismatch");
  if (!(b.temperature > 0.0)) throw std::invalid_argument("supcon: temperature must be > 0");
  BatchLossGrad r;
  r.dsim.assign(m * m, 0.0);
  if (m < 2) return r;
  const auto s = detail::scaled_gram(b);
  std::vector<double> lsm;
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t npos = 0;
    for (std::size_t j = 0; j < m; ++j)
      if (j != i && b.labels[j] == b.labels[i]) ++npos;
    if (npos == 0) throw std::invalid_argument("supcon: anchor " + std::to_string(i) + " has no positive");
    detail::row_log_softmax(s, m, i, lsm);
    const double inv = 1.0 / static_cast<double>(npos);
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const bool pos = b.labels[j] == b.labels[i];
      if (pos) r.value -= inv * lsm[j];
      r.dsim[i * m + j] = (std::exp(lsm[j]) - (pos ? inv : 0.0)) / b.temperature;
    }
  }
  return r;
}

inline double empirical_contrastive(const BatchEmbeddings& b) { return supcon_with_grad(b).value; }

/// IRD: sum_i -p(past, tau*; i) . log p(current, tau; i); gradient w.r.t. current similarities.
inline BatchLossGrad ird_with_grad(const BatchEmbeddings& current, const BatchEmbeddings& past) {
  const std::size_t m = current.size();
  if (past.size() != m) throw std::invalid_argument("ird: batch size mismatch");
  if (!(current.temperature > 0.0) || !(past.temperature > 0.0))
    throw std::invalid_argument("ird: temperatures must be > 0");
  BatchLossGrad r;
  r.dsim.assign(m * m, 0.0);
  if (m < 2) return r;
  const auto sc = detail::scaled_gram(current);
  const auto sp = detail::scaled_gram(past);
  std::vector<double> lc, lp;
  for (std::size_t i = 0; i < m; ++i) {
    detail::row_log_softmax(sc, m, i, lc);
    detail::row_log_softmax(sp, m, i, lp);
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const double target = std::exp(lp[j]);
      r.value -= target * lc[j];
      r.dsim[i * m + j] = (std::exp(lc[j]) - target) / current.temperature;
    }
  }
  return r;
}

inline double empirical_distillation(const BatchEmbeddings& current, const BatchEmbeddings& past) {
  return ird_with_grad(current, past).value;
}

}  // namespace ccl
