#pragma once

// Synthetic task sequences, the worked-example weight/loss scenarios, Monte Carlo
// loss estimation and IDX (MNIST-style) file ingestion.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ccl/core.hpp"
#include "ccl/losses.hpp"

namespace ccl {

/// Named sub-stream seed derived from the experiment seed (splitmix64 mixing).
inline std::uint64_t substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (h ^ (index + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// A labeled sample set with a held-out test part.
struct TaskSplit {
  TaskDistribution train;
  std::vector<Vector> test_points;
  std::vector<int> test_labels;
  std::vector<int> classes;
};

struct BlobConfig {
  int tasks = 5;
  int classes_per_task = 2;
  int points_per_class = 40;
  std::size_t input_dim = 2;
  double spread = 0.15;
  double margin_deg = 10.0;  // minimum angle between class centers (d_in > 2)
  double test_fraction = 0.2;
};

namespace detail {

inline TaskSplit split_task(std::vector<Vector> pts, std::vector<int> labels, std::vector<int> classes,
                            double test_fraction, std::mt19937_64& rng) {
  // per-class 80/20 split so every class keeps training support
  std::vector<Vector> tr, te;
  std::vector<int> trl, tel;
  for (int c : classes) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == c) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n_test = static_cast<std::size_t>(std::floor(test_fraction * idx.size()));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (r < n_test && idx.size() - n_test >= 1) {
        te.push_back(pts[idx[r]]);
        tel.push_back(c);
      } else {
        tr.push_back(pts[idx[r]]);
        trl.push_back(c);
      }
    }
  }
  return {TaskDistribution::uniform(std::move(tr), std::move(trl)), std::move(te), std::move(tel), std::move(classes)};
}

}  // namespace detail

/// Class centers on the unit circle (d_in = 2) or seeded directions on the sphere
/// with a minimum pairwise angle.
inline std::vector<Vector> class_centers(int count, std::size_t d_in, double margin_deg, std::uint64_t seed) {
  std::vector<Vector> centers;
  if (d_in == 2) {
    for (int c = 0; c < count; ++c) {
      const double a = 2.0 * std::numbers::pi * c / count;
      centers.push_back({std::cos(a), std::sin(a)});
    }
    return centers;
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  const double min_cos = std::cos(margin_deg * std::numbers::pi / 180.0);
  int attempts = 0;
  while (static_cast<int>(centers.size()) < count) {
    if (++attempts > 100000) throw std::runtime_error("class_centers: cannot satisfy angular margin");
    Vector v(d_in);
    for (double& x : v) x = g(rng);
    const double n = norm(v);
    for (double& x : v) x /= n;
    bool ok = true;
    for (const auto& c : centers)
      if (dot(c, v) > min_cos) ok = false;
    if (ok) centers.push_back(std::move(v));
  }
  return centers;
}

/// T tasks of Gaussian blobs; task t owns global classes [t*C, (t+1)*C).
inline std::vector<TaskSplit> make_blob_sequence(const BlobConfig& cfg, std::uint64_t seed) {
  if (cfg.tasks < 1 || cfg.classes_per_task < 1 || cfg.points_per_class < 1 || cfg.input_dim < 1)
    throw std::invalid_argument("make_blob_sequence: sizes must be positive");
  const int total = cfg.tasks * cfg.classes_per_task;
  // interleave so consecutive tasks are not neighbours on the circle
  const auto centers = class_centers(total, cfg.input_dim, cfg.margin_deg, substream(seed, "centers"));
  std::mt19937_64 rng(substream(seed, "data"));
  std::normal_distribution<double> g(0.0, cfg.spread);
  std::vector<TaskSplit> tasks;
  for (int t = 0; t < cfg.tasks; ++t) {
    std::vector<Vector> pts;
    std::vector<int> labels, classes;
    for (int c = 0; c < cfg.classes_per_task; ++c) {
      const int id = t * cfg.classes_per_task + c;
      const int slot = (c * cfg.tasks + t) % total;
      classes.push_back(id);
      for (int i = 0; i < cfg.points_per_class; ++i) {
        Vector p = centers[slot];
        for (double& x : p) x += g(rng);
        pts.push_back(std::move(p));
        labels.push_back(id);
      }
    }
    tasks.push_back(detail::split_task(std::move(pts), std::move(labels), std::move(classes), cfg.test_fraction, rng));
  }
  return tasks;
}

inline Vector rotate2d(std::span<const double> p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * p[0] - s * p[1], s * p[0] + c * p[1]};
}

/// Task t is the base task rotated by angles[t], with class ids shifted by t * (max base id + 1).
inline std::vector<TaskSplit> make_rotated_sequence(const TaskSplit& base, std::span<const double> angles) {
  if (base.train.dimension() != 2) throw std::invalid_argument("make_rotated_sequence: input dimension must be 2");
  const int block = *std::max_element(base.classes.begin(), base.classes.end()) + 1;
  std::vector<TaskSplit> out;
  for (std::size_t t = 0; t < angles.size(); ++t) {
    const int shift = static_cast<int>(t) * block;
    std::vector<Vector> pts;
    std::vector<int> labels;
    for (std::size_t i = 0; i < base.train.size(); ++i) {
      pts.push_back(rotate2d(base.train.point(i), angles[t]));
      labels.push_back(base.train.label(i) + shift);
    }
    TaskSplit s{TaskDistribution(2, std::move(pts), std::move(labels), base.train.masses()), {}, {}, {}};
    for (std::size_t i = 0; i < base.test_points.size(); ++i) {
      s.test_points.push_back(rotate2d(base.test_points[i], angles[t]));
      s.test_labels.push_back(base.test_labels[i] + shift);
    }
    for (int c : base.classes) s.classes.push_back(c + shift);
    out.push_back(std::move(s));
  }
  return out;
}

/// Seeded angles uniform in [0, pi).
inline std::vector<TaskSplit> make_rotated_sequence(int T, const TaskSplit& base, std::uint64_t seed) {
  std::mt19937_64 rng(substream(seed, "rotation"));
  std::uniform_real_distribution<double> u(0.0, std::numbers::pi);
  std::vector<double> angles(static_cast<std::size_t>(T));
  for (double& a : angles) a = u(rng);
  return make_rotated_sequence(base, angles);
}

// ---------------------------------------------------------------------------
// Worked-example scenarios

enum class WeightRule { example1, example2, example3, custom };
enum class LossRule { equal, geometric, measured };

struct ScenarioSpec {
  int tasks = 5;
  WeightRule weights = WeightRule::example1;
  double rho = 1.0;
  std::vector<std::vector<double>> custom;  // weight rows for tasks 2..T
  LossRule losses = LossRule::equal;
  double base_loss = 1.0;                   // L for equal, L_1 for geometric
  std::vector<double> measured;             // training losses for LossRule::measured
};

inline MixtureWeights example_weights(const ScenarioSpec& spec, int t) {
  if (t < 2 || t > spec.tasks) throw std::invalid_argument("example_weights: task index out of range");
  const double td = t;
  std::vector<double> w(static_cast<std::size_t>(t - 1));
  switch (spec.weights) {
    case WeightRule::example1:
      for (int j = 1; j < t; ++j) w[j - 1] = (j == 1 ? 2.0 : 1.0) / td;
      break;
    case WeightRule::example2:
      if (!(spec.rho > 0.0)) throw std::invalid_argument("example_weights: rho must be > 0");
      for (int j = 1; j < t; ++j) w[j - 1] = j == 1 ? 1.0 - (td - 2.0) / (spec.rho * td) : 1.0 / (spec.rho * td);
      break;
    case WeightRule::example3:
      if (t == 2) {
        w[0] = 1.0;
      } else {
        for (int j = 1; j < t; ++j) w[j - 1] = (j == 1 ? 2.9 : j == 2 ? 0.1 : 1.0) / td;
      }
      break;
    case WeightRule::custom:
      w = spec.custom.at(static_cast<std::size_t>(t - 2));
      break;
  }
  return MixtureWeights(t, std::move(w));
}

inline std::vector<MixtureWeights> scenario_weights(const ScenarioSpec& spec) {
  std::vector<MixtureWeights> out;
  for (int t = 2; t <= spec.tasks; ++t) out.push_back(example_weights(spec, t));
  return out;
}

/// Declared training losses: equal(L) or geometric L_t = rho^{t-1} L_1.
inline std::vector<double> scenario_losses(const ScenarioSpec& spec) {
  if (spec.losses == LossRule::measured) {
    if (spec.measured.size() != static_cast<std::size_t>(spec.tasks))
      throw std::invalid_argument("scenario_losses: measured losses must cover every task");
    return spec.measured;
  }
  std::vector<double> out;
  for (int t = 1; t <= spec.tasks; ++t)
    out.push_back(spec.losses == LossRule::equal ? spec.base_loss : std::pow(spec.rho, t - 1) * spec.base_loss);
  return out;
}

// ---------------------------------------------------------------------------
// Monte Carlo

struct Estimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

inline Estimate monte_carlo_contrastive(const EmbeddingModel& f, const TaskDistribution& dist, int k,
                                        std::size_t draws, std::uint64_t seed) {
  if (draws < 1) throw std::invalid_argument("monte_carlo_contrastive: draws must be >= 1");
  if (k < 1) throw std::invalid_argument("monte_carlo_contrastive: k must be >= 1");
  const auto emb = embed_all(f, dist);
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> point(dist.masses().begin(), dist.masses().end());
  std::vector<std::discrete_distribution<std::size_t>> within;
  std::vector<const std::vector<std::size_t>*> members;
  std::vector<int> class_slot(dist.size());
  for (std::size_t ci = 0; ci < dist.classes().size(); ++ci) {
    const auto& m = dist.members(dist.classes()[ci]);
    std::vector<double> w;
    for (std::size_t i : m) {
      w.push_back(dist.mass(i));
      class_slot[i] = static_cast<int>(ci);
    }
    within.emplace_back(w.begin(), w.end());
    members.push_back(&m);
  }
  std::vector<double> v(static_cast<std::size_t>(k));
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t n = 0; n < draws; ++n) {
    // anchor ~ p, then positive ~ D_{c(anchor)}; negatives ~ p
    const std::size_t a = point(rng);
    const int slot = class_slot[a];
    const std::size_t p = (*members[slot])[within[slot](rng)];
    const double pos = emb[a].dot(emb[p]);
    for (int i = 0; i < k; ++i) v[i] = pos - emb[a].dot(emb[point(rng)]);
    const double l = logistic_link(v);
    sum += l;
    sum_sq += l * l;
  }
  const double dn = static_cast<double>(draws);
  const double mean = sum / dn;
  const double var = draws > 1 ? std::max(0.0, (sum_sq - dn * mean * mean) / (dn - 1.0)) : 0.0;
  return {mean, std::sqrt(var / dn)};
}

// ---------------------------------------------------------------------------
// IDX files

class IdxError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, truncated, count_mismatch };
  IdxError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

struct IdxImageSet {
  std::uint32_t rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // row-major, count * rows * cols
  std::vector<std::uint8_t> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t image_size() const { return static_cast<std::size_t>(rows) * cols; }

  Vector image(std::size_t i) const {
    Vector v(image_size());
    for (std::size_t p = 0; p < v.size(); ++p) v[p] = pixels[i * image_size() + p] / 255.0;
    return v;
  }
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IdxError(IdxError::Kind::io, "idx: cannot open " + path);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw IdxError(IdxError::Kind::truncated, "idx: truncated header in " + path);
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put_be32(std::ofstream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  os.write(b, 4);
}

}  // namespace detail

inline IdxImageSet idx_read(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::slurp(images_path);
  const auto lab = detail::slurp(labels_path);
  if (detail::be32(img, 0, images_path) != kIdxImageMagic)
    throw IdxError(IdxError::Kind::bad_magic, "idx: bad image magic in " + images_path);
  if (detail::be32(lab, 0, labels_path) != kIdxLabelMagic)
    throw IdxError(IdxError::Kind::bad_magic, "idx: bad label magic in " + labels_path);
  const std::uint32_t n_img = detail::be32(img, 4, images_path);
  IdxImageSet s;
  s.rows = detail::be32(img, 8, images_path);
  s.cols = detail::be32(img, 12, images_path);
  const std::uint32_t n_lab = detail::be32(lab, 4, labels_path);
  if (n_img != n_lab)
    throw IdxError(IdxError::Kind::count_mismatch, "idx: " + std::to_string(n_img) + " images but " +
                                                       std::to_string(n_lab) + " labels");
  const std::size_t need = 16 + static_cast<std::size_t>(n_img) * s.rows * s.cols;
  if (img.size() < need) throw IdxError(IdxError::Kind::truncated, "idx: truncated pixel stream in " + images_path);
  if (lab.size() < 8 + static_cast<std::size_t>(n_lab))
    throw IdxError(IdxError::Kind::truncated, "idx: truncated label stream in " + labels_path);
  s.pixels.assign(img.begin() + 16, img.begin() + static_cast<std::ptrdiff_t>(need));
  s.labels.assign(lab.begin() + 8, lab.begin() + 8 + n_lab);
  return s;
}

inline void idx_write(const std::string& images_path, const std::string& labels_path, const IdxImageSet& s) {
  std::ofstream img(images_path, std::ios::binary), lab(labels_path, std::ios::binary);
  if (!img || !lab) throw IdxError(IdxError::Kind::io, "idx: cannot open output files");
  detail::put_be32(img, kIdxImageMagic);
  detail::put_be32(img, static_cast<std::uint32_t>(s.count()));
  detail::put_be32(img, s.rows);
  detail::put_be32(img, s.cols);
  img.write(reinterpret_cast<const char*>(s.pixels.data()), static_cast<std::streamsize>(s.pixels.size()));
  detail::put_be32(lab, kIdxLabelMagic);
  detail::put_be32(lab, static_cast<std::uint32_t>(s.count()));
  lab.write(reinterpret_cast<const char*>(s.labels.data()), static_cast<std::streamsize>(s.labels.size()));
}

struct IdxSplitConfig {
  int classes_per_task = 2;
  int train_per_class = 100;
  int test_per_class = 25;
};

/// Class-IL split of an image set: consecutive digit pairs become tasks.
inline std::vector<TaskSplit> idx_tasks(const IdxImageSet& s, const IdxSplitConfig& cfg, std::uint64_t seed) {
  std::vector<int> present;
  for (auto l : s.labels)
    if (std::find(present.begin(), present.end(), l) == present.end()) present.push_back(l);
  std::sort(present.begin(), present.end());
  std::mt19937_64 rng(substream(seed, "idx"));
  std::vector<TaskSplit> out;
  for (std::size_t start = 0; start + cfg.classes_per_task <= present.size(); start += cfg.classes_per_task) {
    std::vector<Vector> tr, te;
    std::vector<int> trl, tel, classes;
    for (int c = 0; c < cfg.classes_per_task; ++c) {
      const int label = present[start + c];
      classes.push_back(label);
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < s.count(); ++i)
        if (s.labels[i] == label) idx.push_back(i);
      std::shuffle(idx.begin(), idx.end(), rng);
      const std::size_t n_tr = std::min<std::size_t>(cfg.train_per_class, idx.size());
      const std::size_t n_te = std::min<std::size_t>(cfg.test_per_class, idx.size() - n_tr);
      for (std::size_t r = 0; r < n_tr; ++r) {
        tr.push_back(s.image(idx[r]));
        trl.push_back(label);
      }
      for (std::size_t r = n_tr; r < n_tr + n_te; ++r) {
        te.push_back(s.image(idx[r]));
        tel.push_back(label);
      }
    }
    out.push_back({TaskDistribution::uniform(std::move(tr), std::move(trl)), std::move(te), std::move(tel),
                   std::move(classes)});
  }
  return out;
}

}  // namespace ccl
