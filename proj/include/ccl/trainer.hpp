#pragma once

// Small perceptron encoder with unit-sphere output, reverse-mode gradients of the
// batch losses, momentum SGD, finite-difference checking and checkpoint files.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ccl/core.hpp"
#include "ccl/losses.hpp"

namespace ccl {

enum class Activation { tanh, relu };

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

class Encoder final : public EmbeddingModel {
 public:
  Encoder() = default;

  /// Zero-initialized network with the given layer sizes (input first).
  Encoder(std::vector<std::size_t> dims, Activation act) : dims_(std::move(dims)), act_(act) {
    if (dims_.size() < 2) throw std::invalid_argument("Encoder: need at least input and output sizes");
    for (std::size_t d : dims_)
      if (d == 0) throw std::invalid_argument("Encoder: zero layer size");
    std::size_t count = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) count += dims_[l + 1] * (dims_[l] + 1);
    params_.assign(count, 0.0);
  }

  /// Weights and biases uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
  static Encoder initialized(std::vector<std::size_t> dims, Activation act, std::uint64_t seed) {
    Encoder e(std::move(dims), act);
    std::mt19937_64 rng(seed);
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < e.dims_.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(e.dims_[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      const std::size_t n = e.dims_[l + 1] * (e.dims_[l] + 1);
      for (std::size_t i = 0; i < n; ++i) e.params_[off + i] = u(rng);
      off += n;
    }
    return e;
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  Activation activation() const { return act_; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t dimension() const override { return dims_.back(); }
  std::vector<double> parameters() const override { return params_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  UnitVector embed(std::span<const double> x) const override { return UnitVector(raw(x)); }

  std::vector<UnitVector> forward(const std::vector<Vector>& points) const {
    std::vector<UnitVector> out;
    out.reserve(points.size());
    for (const auto& p : points) out.push_back(embed(p));
    return out;
  }

  /// Activations of one input, kept for the backward pass.
  struct Tape {
    std::vector<Vector> layers;  // layers[0] = input, layers.back() = pre-normalization output
  };

  Tape record(std::span<const double> x) const {
    if (x.size() != dims_.front())
      throw std::invalid_argument("Encoder: input dimension " + std::to_string(x.size()) + ", expected " +
                                  std::to_string(dims_.front()));
    Tape tape;
    tape.layers.emplace_back(x.begin(), x.end());
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      const std::size_t in = dims_[l], out = dims_[l + 1];
      const Vector& h = tape.layers.back();
      Vector y(out);
      const double* w = params_.data() + off;
      const double* b = w + out * in;
      for (std::size_t o = 0; o < out; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < in; ++i) s += w[o * in + i] * h[i];
        y[o] = s;
      }
      if (l + 2 < dims_.size()) {
        for (double& v : y) v = act_ == Activation::tanh ? std::tanh(v) : std::max(0.0, v);
      }
      off += out * (in + 1);
      tape.layers.push_back(std::move(y));
    }
    return tape;
  }

  /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(z) at the normalized output.
  void backward(const Tape& tape, std::span<const double> dz, std::vector<double>& grad) const {
    const Vector& h_out = tape.layers.back();
    const double nh = norm(h_out);
    Vector delta(h_out.size(), 0.0);
    if (nh >= kZeroNorm) {
      // dz/dh = (I - z z^T) / |h|
      double zdot = 0.0;
      for (std::size_t i = 0; i < h_out.size(); ++i) zdot += h_out[i] / nh * dz[i];
      for (std::size_t i = 0; i < h_out.size(); ++i) delta[i] = (dz[i] - zdot * h_out[i] / nh) / nh;
    }
    std::size_t off = params_.size();
    for (std::size_t l = dims_.size() - 1; l-- > 0;) {
      const std::size_t in = dims_[l], out = dims_[l + 1];
      off -= out * (in + 1);
      const Vector& h = tape.layers[l];
      const double* w = params_.data() + off;
      double* gw = grad.data() + off;
      double* gb = gw + out * in;
      for (std::size_t o = 0; o < out; ++o) {
        gb[o] += delta[o];
        for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += delta[o] * h[i];
      }
      if (l == 0) break;
      Vector prev(in, 0.0);
      for (std::size_t o = 0; o < out; ++o)
        for (std::size_t i = 0; i < in; ++i) prev[i] += w[o * in + i] * delta[o];
      for (std::size_t i = 0; i < in; ++i) {
        const double a = h[i];
        prev[i] *= act_ == Activation::tanh ? 1.0 - a * a : (a > 0.0 ? 1.0 : 0.0);
      }
      delta = std::move(prev);
    }
  }

 private:
  Vector raw(std::span<const double> x) const { return record(x).layers.back(); }

  std::vector<std::size_t> dims_;
  Activation act_ = Activation::tanh;
  std::vector<double> params_;
};

struct Temperatures {
  double contrastive = 0.5;
  double current = 0.2;
  double past = 0.01;
};

/// Augmented views of one minibatch; views[2i], views[2i+1] come from sample i.
struct ViewBatch {
  std::vector<Vector> views;
  std::vector<int> labels;
};

struct LossBreakdown {
  double contrastive = 0.0;    // summed SupCon
  double distillation = 0.0;   // summed IRD (0 without a previous model)
  double total = 0.0;          // objective actually differentiated
};

/// Objective L_con + lambda L_dis (optionally divided by the 2N views) and its gradient
/// with respect to the current encoder; the previous encoder only supplies IRD targets.
inline LossBreakdown grad_total(const Encoder& enc, const Encoder* prev, const ViewBatch& batch, double lambda,
                                const Temperatures& temps, bool divide_by_views, std::vector<double>* grad) {
  const std::size_t m = batch.views.size();
  std::vector<Encoder::Tape> tapes;
  tapes.reserve(m);
  BatchEmbeddings cur_con{{}, batch.labels, temps.contrastive};
  for (const auto& v : batch.views) {
    tapes.push_back(enc.record(v));
    cur_con.z.emplace_back(tapes.back().layers.back());
  }
  LossBreakdown out;
  const auto con = supcon_with_grad(cur_con);
  out.contrastive = con.value;
  std::vector<double> dsim = con.dsim;
  if (prev && lambda != 0.0) {
    BatchEmbeddings cur_ird{cur_con.z, batch.labels, temps.current};
    BatchEmbeddings past{prev->forward(batch.views), batch.labels, temps.past};
    const auto ird = ird_with_grad(cur_ird, past);
    out.distillation = ird.value;
    for (std::size_t i = 0; i < dsim.size(); ++i) dsim[i] += lambda * ird.dsim[i];
  } else if (prev) {
    BatchEmbeddings cur_ird{cur_con.z, batch.labels, temps.current};
    BatchEmbeddings past{prev->forward(batch.views), batch.labels, temps.past};
    out.distillation = empirical_distillation(cur_ird, past);
  }
  const double scale = divide_by_views && m > 0 ? 1.0 / static_cast<double>(m) : 1.0;
  out.total = scale * (out.contrastive + lambda * (prev ? out.distillation : 0.0));
  if (!grad) return out;
  grad->assign(enc.params().size(), 0.0);
  if (m < 2) return out;
  const std::size_t d = enc.dimension();
  Vector dz(d);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(dz.begin(), dz.end(), 0.0);
    // s_ij = z_i . z_j appears in row i and row j
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      const double c = scale * (dsim[i * m + j] + dsim[j * m + i]);
      const auto zj = cur_con.z[j].coords();
      for (std::size_t k = 0; k < d; ++k) dz[k] += c * zj[k];
    }
    enc.backward(tapes[i], dz, *grad);
  }
  return out;
}

struct SgdConfig {
  double learning_rate = 0.05;
  int epochs = 200;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  std::uint64_t seed = 0;
};

struct SgdState {
  std::vector<double> velocity;
};

/// v <- momentum v + g; theta <- theta - lr v.
inline void sgd_step(std::vector<double>& params, std::span<const double> grad, const SgdConfig& cfg,
                     SgdState& state) {
  if (grad.size() != params.size()) throw std::invalid_argument("sgd_step: gradient size mismatch");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw std::runtime_error("sgd_step: non-finite gradient component " + std::to_string(i));
  if (state.velocity.size() != params.size()) state.velocity.assign(params.size(), 0.0);
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.velocity[i] = cfg.momentum * state.velocity[i] + grad[i];
    params[i] -= cfg.learning_rate * state.velocity[i];
  }
}

inline void sgd_step(Encoder& enc, std::span<const double> grad, const SgdConfig& cfg, SgdState& state) {
  sgd_step(enc.params(), grad, cfg, state);
}

/// max_i |a_i - f_i| / max(1e-8, |a_i| + |f_i|) between analytic and central-difference gradients.
inline double finite_diff_check(const Encoder& enc, const Encoder* prev, const ViewBatch& batch, double lambda,
                                const Temperatures& temps, double h, bool divide_by_views = true) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: h must be > 0");
  std::vector<double> analytic;
  grad_total(enc, prev, batch, lambda, temps, divide_by_views, &analytic);
  Encoder probe = enc;
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double keep = probe.params()[i];
    probe.params()[i] = keep + h;
    const double up = grad_total(probe, prev, batch, lambda, temps, divide_by_views, nullptr).total;
    probe.params()[i] = keep - h;
    const double down = grad_total(probe, prev, batch, lambda, temps, divide_by_views, nullptr).total;
    probe.params()[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - fd) / std::max(1e-8, std::abs(analytic[i]) + std::abs(fd));
    worst = std::max(worst, err);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CCL1", u32 layer count, u32 layer sizes, f64 parameters (little-endian),
// plus a JSON sidecar manifest at <path>.json.

struct Checkpoint {
  std::uint32_t version = 1;
  std::vector<std::size_t> dims;
  std::vector<double> params;
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;
  int task = 0;
  double lambda = 0.0;
  Temperatures temperatures;

  bool operator==(const Checkpoint& o) const {
    return version == o.version && dims == o.dims && activation == o.activation && seed == o.seed &&
           task == o.task && lambda == o.lambda && temperatures.contrastive == o.temperatures.contrastive &&
           temperatures.current == o.temperatures.current && temperatures.past == o.temperatures.past &&
           params.size() == o.params.size() &&
           (params.empty() || std::memcmp(params.data(), o.params.data(), params.size() * sizeof(double)) == 0);
  }

  Encoder encoder() const {
    Encoder e(dims, activation);
    if (e.params().size() != params.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
    e.params() = params;
    return e;
  }
};

inline Checkpoint make_checkpoint(const Encoder& e, std::uint64_t seed, int task, double lambda,
                                  const Temperatures& temps) {
  return {1, e.dims(), e.params(), e.activation(), seed, task, lambda, temps};
}

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("checkpoint: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw CheckpointError("checkpoint: truncated parameters");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

inline nlohmann::json manifest_json(const Checkpoint& c) {
  return {{"version", c.version},
          {"dims", c.dims},
          {"activation", to_string(c.activation)},
          {"seed", c.seed},
          {"task", c.task},
          {"lambda", c.lambda},
          {"temperatures",
           {{"contrastive", c.temperatures.contrastive},
            {"current", c.temperatures.current},
            {"past", c.temperatures.past}}}};
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
  os.write("CCL1", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(c.dims.size()));
  for (std::size_t d : c.dims) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (double p : c.params) detail::put_f64(os, p);
  if (!os) throw CheckpointError("checkpoint: write failed for " + path);
  std::ofstream js(path + ".json");
  js << manifest_json(c).dump(2) << '\n';
  if (!js) throw CheckpointError("checkpoint: cannot write manifest for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CCL1", 4) != 0) throw CheckpointError("checkpoint: bad magic");
  Checkpoint c;
  const std::uint32_t layers = detail::get_u32(is);
  if (layers < 2 || layers > 64) throw CheckpointError("checkpoint: implausible layer count");
  std::size_t count = 0;
  for (std::uint32_t i = 0; i < layers; ++i) c.dims.push_back(detail::get_u32(is));
  for (std::size_t l = 0; l + 1 < c.dims.size(); ++l) count += c.dims[l + 1] * (c.dims[l] + 1);
  c.params.reserve(count);
  for (std::size_t i = 0; i < count; ++i) c.params.push_back(detail::get_f64(is));
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes");

  std::ifstream js(path + ".json");
  if (js) {
    const auto j = nlohmann::json::parse(js);
    c.version = j.value("version", 1u);
    c.activation = activation_from_string(j.value("activation", std::string("tanh")));
    c.seed = j.value("seed", std::uint64_t{0});
    c.task = j.value("task", 0);
    c.lambda = j.value("lambda", 0.0);
    if (j.contains("temperatures")) {
      const auto& t = j["temperatures"];
      c.temperatures = {t.value("contrastive", 0.5), t.value("current", 0.2), t.value("past", 0.01)};
    }
    if (j.contains("dims") && j["dims"].get<std::vector<std::size_t>>() != c.dims)
      throw CheckpointError("checkpoint: manifest dims disagree with binary");
  }
  return c;
}

}  // namespace ccl
