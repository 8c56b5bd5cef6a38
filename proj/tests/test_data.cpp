#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "ccl/data.hpp"
#include "ccl/fixtures.hpp"
#include "ccl/losses.hpp"

using namespace ccl;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("ccl_data_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

IdxImageSet fixture_set() {
  IdxImageSet s;
  s.rows = 3;
  s.cols = 2;
  for (int i = 0; i < 12; ++i) {
    s.labels.push_back(static_cast<std::uint8_t>(i % 4));
    for (int p = 0; p < 6; ++p) s.pixels.push_back(static_cast<std::uint8_t>((i * 37 + p * 11) % 256));
  }
  return s;
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

IdxError::Kind read_error(const std::filesystem::path& img, const std::filesystem::path& lab) {
  try {
    idx_read(img.string(), lab.string());
  } catch (const IdxError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an IdxError";
  return IdxError::Kind::io;
}

}  // namespace

TEST(Substream, DistinctAndStable) {
  EXPECT_EQ(substream(1, "batch", 2), substream(1, "batch", 2));
  EXPECT_NE(substream(1, "batch", 2), substream(1, "batch", 3));
  EXPECT_NE(substream(1, "batch", 2), substream(1, "buffer", 2));
  EXPECT_NE(substream(1, "batch", 2), substream(2, "batch", 2));
}

TEST(Blobs, CountsAndDeterminism) {
  BlobConfig cfg;
  const auto a = make_blob_sequence(cfg, 3);
  const auto b = make_blob_sequence(cfg, 3);
  ASSERT_EQ(a.size(), 5u);
  std::set<int> classes;
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_EQ(a[t].classes.size(), 2u);
    for (int c : a[t].classes) classes.insert(c);
    EXPECT_EQ(a[t].train.points(), b[t].train.points());
    EXPECT_EQ(a[t].test_points, b[t].test_points);
    EXPECT_EQ(a[t].train.size() + a[t].test_points.size(), 80u);
    double s = 0.0;
    for (double m : a[t].train.masses()) s += m;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_EQ(classes.size(), 10u);
  EXPECT_NE(make_blob_sequence(cfg, 4)[0].train.points(), a[0].train.points());
}

TEST(Blobs, HigherDimensionalCenters) {
  BlobConfig cfg;
  cfg.input_dim = 5;
  cfg.tasks = 3;
  const auto t = make_blob_sequence(cfg, 1);
  EXPECT_EQ(t[0].train.dimension(), 5u);
  const auto c = class_centers(6, 5, 10.0, 9);
  for (std::size_t i = 0; i < c.size(); ++i)
    for (std::size_t j = i + 1; j < c.size(); ++j) {
      const double cosang = dot(c[i], c[j]) / (norm(c[i]) * norm(c[j]));
      EXPECT_LE(cosang, std::cos(10.0 * std::numbers::pi / 180.0) + 1e-12);
    }
}

TEST(Rotated, ZeroRotationAndRelabeling) {
  BlobConfig cfg;
  cfg.tasks = 1;
  const auto base = make_blob_sequence(cfg, 2).front();
  const std::vector<double> angles{0.0, 0.5, 1.0, 2.0};
  const auto seq = make_rotated_sequence(base, angles);
  ASSERT_EQ(seq.size(), 4u);
  EXPECT_EQ(seq[0].train.points(), base.train.points());
  std::set<int> seen;
  for (const auto& t : seq) {
    std::set<int> here(t.train.labels().begin(), t.train.labels().end());
    for (int c : here) EXPECT_TRUE(seen.insert(c).second) << "class " << c << " reused";
  }
  const auto r = rotate2d(Vector{1.0, 0.0}, std::numbers::pi / 2);
  EXPECT_NEAR(r[0], 0.0, 1e-15);
  EXPECT_NEAR(r[1], 1.0, 1e-15);
}

TEST(ExampleWeights, GoldenVectors) {
  ScenarioSpec s;
  s.tasks = 5;
  s.weights = WeightRule::example1;
  EXPECT_EQ(example_weights(s, 5).weights(), (std::vector<double>{0.4, 0.2, 0.2, 0.2}));
  s.weights = WeightRule::example3;
  const auto w3 = example_weights(s, 5).weights();
  const std::vector<double> g3{0.58, 0.02, 0.2, 0.2};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w3[i], g3[i], 1e-15);
  EXPECT_EQ(example_weights(s, 2).weights(), std::vector<double>{1.0});
  s.weights = WeightRule::example2;
  s.rho = 1.0;
  EXPECT_EQ(example_weights(s, 4).weights(), (std::vector<double>{0.5, 0.25, 0.25}));
  s.rho = 0.0;
  EXPECT_THROW(example_weights(s, 3), std::invalid_argument);
  s.rho = -1.0;
  EXPECT_THROW(example_weights(s, 3), std::invalid_argument);
}

TEST(ScenarioLosses, Rules) {
  ScenarioSpec s;
  s.tasks = 3;
  s.base_loss = 2.0;
  EXPECT_EQ(scenario_losses(s), (std::vector<double>{2.0, 2.0, 2.0}));
  s.losses = LossRule::geometric;
  s.rho = 0.5;
  EXPECT_EQ(scenario_losses(s), (std::vector<double>{2.0, 1.0, 0.5}));
  s.losses = LossRule::measured;
  s.measured = {1.0};
  EXPECT_THROW(scenario_losses(s), std::invalid_argument);
}

TEST(MonteCarlo, WithinFiveStandardErrors) {
  std::mt19937_64 rng(40);
  const auto d = random_distribution(4, 2, rng);
  const auto f = random_table_model(d, 3, rng);
  for (int k : {1, 2}) {
    const double exact = population_contrastive(f, d, k);
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const auto e = monte_carlo_contrastive(f, d, k, 1000000, seed);
      EXPECT_LT(std::abs(e.mean - exact), 5.0 * e.standard_error) << "k=" << k << " seed=" << seed;
    }
  }
}

TEST(Idx, RoundTripBytes) {
  const auto dir = temp_dir("roundtrip");
  const auto s = fixture_set();
  idx_write((dir / "img").string(), (dir / "lab").string(), s);
  const auto back = idx_read((dir / "img").string(), (dir / "lab").string());
  EXPECT_EQ(back.rows, 3u);
  EXPECT_EQ(back.cols, 2u);
  EXPECT_EQ(back.pixels, s.pixels);
  EXPECT_EQ(back.labels, s.labels);
  const auto img = read_bytes(dir / "img");
  EXPECT_EQ(img[2], 0x08);
  EXPECT_EQ(img[3], 0x03);
  EXPECT_EQ(img[7], 12);
  EXPECT_NEAR(back.image(0)[1], s.pixels[1] / 255.0, 1e-15);
}

TEST(Idx, ErrorKinds) {
  const auto dir = temp_dir("errors");
  const auto s = fixture_set();
  idx_write((dir / "img").string(), (dir / "lab").string(), s);
  EXPECT_EQ(read_error(dir / "nope", dir / "lab"), IdxError::Kind::io);

  auto bad = read_bytes(dir / "img");
  bad[3] = 0x01;
  write_bytes(dir / "badmagic", bad);
  EXPECT_EQ(read_error(dir / "badmagic", dir / "lab"), IdxError::Kind::bad_magic);

  auto cut = read_bytes(dir / "img");
  cut.resize(cut.size() - 5);
  write_bytes(dir / "cut", cut);
  EXPECT_EQ(read_error(dir / "cut", dir / "lab"), IdxError::Kind::truncated);

  IdxImageSet fewer = s;
  fewer.labels.pop_back();
  fewer.pixels.resize(fewer.pixels.size() - 6);
  idx_write((dir / "img2").string(), (dir / "lab2").string(), fewer);
  EXPECT_EQ(read_error(dir / "img", dir / "lab2"), IdxError::Kind::count_mismatch);
}

TEST(Idx, TaskSplits) {
  const auto s = fixture_set();
  const auto tasks = idx_tasks(s, IdxSplitConfig{2, 2, 1}, 1);
  ASSERT_EQ(tasks.size(), 2u);
  EXPECT_EQ(tasks[0].classes, (std::vector<int>{0, 1}));
  EXPECT_EQ(tasks[1].classes, (std::vector<int>{2, 3}));
  EXPECT_EQ(tasks[0].train.size(), 4u);
  EXPECT_EQ(tasks[0].test_points.size(), 2u);
  EXPECT_EQ(tasks[0].train.dimension(), 6u);
}
