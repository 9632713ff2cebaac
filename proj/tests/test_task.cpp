#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gw/task.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

using namespace gw;
using namespace gw::task;

TEST_CASE("one_hot basis vectors") {
  Eigen::VectorXd v3 = one_hot(3);
  CHECK(v3[3] == 1.0);
  CHECK(v3.sum() == 1.0);
  CHECK(one_hot(0)[0] == 1.0);
  CHECK(one_hot(9)[9] == 1.0);
  CHECK_THROWS_AS(one_hot(10), ValueError);
  CHECK_THROWS_AS(one_hot(-1), ValueError);
}

TEST_CASE("target_sum known values and domain") {
  CHECK(target_sum(3, 2) == 5);
  CHECK(target_sum(9, 0) == 9);
  CHECK(target_sum(7, 5) == 2);
  CHECK_THROWS_AS(target_sum(0, 3), ValueError);
  CHECK_THROWS_AS(target_sum(3, 10), ValueError);
}

TEST_CASE("target_sum agrees with a brute-force oracle on all 90 pairs") {
  for (int a = 1; a <= 9; ++a)
    for (int r = 0; r <= 9; ++r) {
      int s = a + r;
      while (s >= 10) s -= 10;  // independent modulo
      CHECK(target_sum(a, r) == s);
    }
}

TEST_CASE("idx fixture round-trip") {
  MnistDataset fixture;
  fixture.split = "test";
  fixture.images.resize(2, 784);
  Rng rng(5);
  for (Index i = 0; i < 2; ++i)
    for (int p = 0; p < 784; ++p)
      fixture.images(i, p) = static_cast<double>(rng.below(256)) / 255.0;
  fixture.labels = {7, 2};
  write_idx(fixture, "fixture-images-idx3", "fixture-labels-idx1");

  MnistDataset loaded = load_idx("fixture-images-idx3", "fixture-labels-idx1", "test");
  CHECK(loaded.size() == 2);
  CHECK(loaded.labels[0] == 7);
  CHECK(loaded.labels[1] == 2);
  for (Index i = 0; i < 2; ++i)
    for (int p = 0; p < 784; ++p)
      CHECK(loaded.images(i, p) == fixture.images(i, p));  // byte-exact source
  std::remove("fixture-images-idx3");
  std::remove("fixture-labels-idx1");
}

TEST_CASE("idx loader rejects malformed files") {
  {
    std::ofstream f("bad-images-idx3", std::ios::binary);
    // magic 9999 big-endian
    unsigned char b[16] = {0, 0, 0x27, 0x0f, 0, 0, 0, 1, 0, 0, 0, 28, 0, 0, 0, 28};
    f.write(reinterpret_cast<char*>(b), 16);
  }
  {
    std::ofstream f("bad-labels-idx1", std::ios::binary);
    unsigned char b[8] = {0, 0, 0x08, 0x01, 0, 0, 0, 1};
    f.write(reinterpret_cast<char*>(b), 8);
    f.put(3);
  }
  try {
    load_idx("bad-images-idx3", "bad-labels-idx1", "test");
    CHECK(false);
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
  }

  // truncated image payload
  {
    std::ofstream f("trunc-images-idx3", std::ios::binary);
    unsigned char b[16] = {0, 0, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28};
    f.write(reinterpret_cast<char*>(b), 16);
    for (int i = 0; i < 100; ++i) f.put(0);
  }
  CHECK_THROWS_AS(load_idx("trunc-images-idx3", "bad-labels-idx1", "test"), IoError);

  // image/label count mismatch
  MnistDataset two;
  two.images.setZero(2, 784);
  two.labels = {1, 2};
  write_idx(two, "two-images-idx3", "two-labels-idx1");
  MnistDataset one;
  one.images.setZero(1, 784);
  one.labels = {1};
  write_idx(one, "one-images-idx3", "one-labels-idx1");
  CHECK_THROWS_AS(load_idx("two-images-idx3", "one-labels-idx1", "t"), IoError);

  for (const char* p : {"bad-images-idx3", "bad-labels-idx1", "trunc-images-idx3",
                        "two-images-idx3", "two-labels-idx1", "one-images-idx3",
                        "one-labels-idx1"})
    std::remove(p);
}

TEST_CASE("generalization splits") {
  GeneralizationSplit s = make_split("1-7to9");
  CHECK(s.train_a_left == std::vector<int>{1, 2, 3, 4, 5, 6, 7});
  CHECK(s.test_a_left == std::vector<int>{9});
  CHECK(s.train_pairs.size() == 70);
  CHECK(s.test_pairs.size() == 10);

  GeneralizationSplit s8 = make_split("1-7to8");
  CHECK(s8.test_a_left == std::vector<int>{8});

  GeneralizationSplit si = make_split("1-3,5-9to4");
  CHECK(si.train_a_left == std::vector<int>{1, 2, 3, 5, 6, 7, 8, 9});
  CHECK(si.test_a_left == std::vector<int>{4});

  CHECK_THROWS_AS(make_split("nonsense"), ValueError);
  CHECK_THROWS_AS(make_split("1-7to7"), ValueError);  // leaky split
  CHECK_THROWS_AS(make_split("1-12to9"), ValueError);
}

TEST_CASE("in-distribution condition draws a seeded 80 percent task split") {
  GeneralizationSplit s = make_split("1-9to1-9", 3);
  CHECK(s.train_pairs.size() == 72);
  CHECK(s.test_pairs.size() == 18);
  std::set<std::pair<int, int>> train(s.train_pairs.begin(), s.train_pairs.end());
  for (auto& p : s.test_pairs) CHECK(train.count(p) == 0);
  std::set<std::pair<int, int>> all(s.train_pairs.begin(), s.train_pairs.end());
  all.insert(s.test_pairs.begin(), s.test_pairs.end());
  CHECK(all.size() == 90);

  // seeded determinism
  GeneralizationSplit s2 = make_split("1-9to1-9", 3);
  CHECK(s2.train_pairs == s.train_pairs);
  GeneralizationSplit s3 = make_split("1-9to1-9", 4);
  CHECK(s3.train_pairs != s.train_pairs);
}

TEST_CASE("generalization conditions never leak instruction values") {
  for (const std::string& cond : default_conditions()) {
    GeneralizationSplit s = make_split(cond);
    if (cond == "1-9to1-9") continue;
    std::set<int> train(s.train_a_left.begin(), s.train_a_left.end());
    for (int v : s.test_a_left) CHECK(train.count(v) == 0);
  }
  CHECK(default_conditions().size() == 18);
  auto conds = default_conditions();
  CHECK(std::find(conds.begin(), conds.end(), "1-7to9") != conds.end());
  CHECK(std::find(conds.begin(), conds.end(), "1,3-9to2") != conds.end());
  CHECK(std::find(conds.begin(), conds.end(), "1-7,9to8") != conds.end());
}

TEST_CASE("samples carry the mod-10 target and the first-step encoding") {
  AdditionSample s = make_onehot_sample(9, 4);
  CHECK(s.target == 3);
  CHECK(s.right_encoding.size() == 10);
  CHECK(s.right_encoding[4] == 1.0);
  CHECK_FALSE(s.is_image());

  auto batch = samples_from_pairs({{1, 0}, {2, 3}});
  CHECK(batch.size() == 2);
  CHECK(batch[1].target == 5);
}

TEST_CASE("synthetic digits: deterministic, balanced, classifiable") {
  MnistDataset a = synthesize_digits(200, 9, "train");
  MnistDataset b = synthesize_digits(200, 9, "train");
  CHECK(a.images.isApprox(b.images));
  CHECK(a.labels == b.labels);

  std::vector<int> counts(10, 0);
  for (int l : a.labels) counts[static_cast<std::size_t>(l)]++;
  for (int c : counts) CHECK(c == 20);

  for (Index i = 0; i < a.size(); ++i)
    for (int p = 0; p < 784; ++p) {
      CHECK(a.images(i, p) >= 0.0);
      CHECK(a.images(i, p) <= 1.0);
    }

  // distinct seeds give distinct renderings
  MnistDataset c = synthesize_digits(200, 10, "train");
  CHECK_FALSE(a.images.isApprox(c.images));

  // classes are separable enough for a nearest-centroid rule
  MnistDataset big = synthesize_digits(1000, 11, "train");
  Eigen::MatrixXd centroids = Eigen::MatrixXd::Zero(10, 784);
  std::vector<int> n(10, 0);
  for (Index i = 0; i < 500; ++i) {
    centroids.row(big.labels[static_cast<std::size_t>(i)]) += big.images.row(i);
    n[static_cast<std::size_t>(big.labels[static_cast<std::size_t>(i)])]++;
  }
  for (int d = 0; d < 10; ++d) centroids.row(d) /= n[static_cast<std::size_t>(d)];
  int correct = 0;
  for (Index i = 500; i < 1000; ++i) {
    int best = 0;
    double best_d = 1e30;
    for (int d = 0; d < 10; ++d) {
      double dist = (big.images.row(i) - centroids.row(d)).squaredNorm();
      if (dist < best_d) {
        best_d = dist;
        best = d;
      }
    }
    correct += best == big.labels[static_cast<std::size_t>(i)];
  }
  CHECK(correct >= 350);  // 70%+ under heavy augmentation
}

TEST_CASE("image task sampling uses the requested digit class") {
  MnistDataset data = synthesize_digits(100, 13, "train");
  auto by_class = data.by_class();
  Rng rng(17);
  AdditionSample s = make_image_sample(4, 7, data, by_class, rng);
  CHECK(s.a_right == 7);
  CHECK(s.target == 1);
  CHECK(s.is_image());

  auto tasks = sample_image_tasks(data, 50, rng);
  CHECK(tasks.size() == 50);
  for (auto& t : tasks) {
    CHECK(t.a_left >= 1);
    CHECK(t.a_left <= 9);
    CHECK(t.target == (t.a_left + t.a_right) % 10);
  }
}
