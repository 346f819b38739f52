#include <cmath>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "pcfold/geometry.hpp"

using namespace pcfold;
using geometry::PointCloud;

namespace {

PointCloud pc(std::vector<geometry::Vec3> pts) {
  PointCloud c;
  c.points = std::move(pts);
  return c;
}

}  // namespace

TEST_CASE("chamfer hand values and properties") {
  const PointCloud x = pc({{0, 0, 0}, {2, 0, 0}}), y = pc({{1, 0, 0}});
  CHECK(geometry::chamfer(x, y) == 2.0);
  CHECK(geometry::directed_chamfer(x, y) == 1.0);
  CHECK(geometry::chamfer(x, x) == 0.0);
  CHECK_THROWS_AS(geometry::chamfer(x, PointCloud{}), geometry::GeometryError);

  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto a = oracle::cloud(rng, 30 + t), b = oracle::cloud(rng, 50 - t);
    const double ab = geometry::chamfer(oracle::to_cloud(a), oracle::to_cloud(b));
    CHECK(ab == geometry::chamfer(oracle::to_cloud(b), oracle::to_cloud(a)));
    CHECK(ab > 0.0);
    auto a2 = a, b2 = b;
    for (std::size_t i = 0; i < a2.size(); ++i) a2[i] += 0.37 * static_cast<double>(i % 3 + 1);
    for (std::size_t i = 0; i < b2.size(); ++i) b2[i] += 0.37 * static_cast<double>(i % 3 + 1);
    CHECK(std::abs(geometry::chamfer(oracle::to_cloud(a2), oracle::to_cloud(b2)) - ab) <= 1e-10);
  }
}

TEST_CASE("chamfer, knn and fps equal exhaustive search") {
  Rng rng(99);
  for (int t = 0; t < 200; ++t) {
    const bool lattice = t % 4 == 0;
    const std::size_t n = 1 + rng.below(200), m = 1 + rng.below(200);
    const auto x = oracle::cloud(rng, n, lattice), y = oracle::cloud(rng, m, lattice);

    const auto fast = geometry::chamfer<double>(x, y);
    const auto slow = oracle::chamfer(x, y);
    CHECK(fast.nearest_in_y == slow.nearest_in_y);
    CHECK(fast.nearest_in_x == slow.nearest_in_x);
    CHECK(std::abs(fast.total() - (slow.x_to_y + slow.y_to_x)) <= 1e-12 * std::max(1.0, slow.x_to_y + slow.y_to_x));

    const std::size_t k = 1 + rng.below(std::min<std::size_t>(m, 12));
    CHECK(geometry::knn<double>(x, y, k) == oracle::knn(x, y, k));

    const std::size_t count = 1 + rng.below(n), start = rng.below(n);
    CHECK(geometry::farthest_point_sampling<double>(x, count, start) == oracle::fps(x, count, start));
  }
}

TEST_CASE("fps examples") {
  const std::vector<double> line = {0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 0, 0, 4, 0, 0};
  CHECK(geometry::farthest_point_sampling<double>(line, 2, 0) == std::vector<std::size_t>{0, 4});
  const auto all = geometry::farthest_point_sampling<double>(line, 5, 2);
  CHECK(std::set<std::size_t>(all.begin(), all.end()).size() == 5);
  CHECK(geometry::farthest_point_sampling<double>(line, 1, 3) == std::vector<std::size_t>{3});
  CHECK_THROWS_AS(geometry::farthest_point_sampling<double>(line, 6, 0), geometry::GeometryError);

  // Exhaustive replay on small sets.
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 2 + rng.below(9);
    const auto pts = oracle::cloud(rng, n, t % 2 == 0);
    CHECK(geometry::farthest_point_sampling<double>(pts, n, 0) == oracle::fps(pts, n, 0));
  }
}

TEST_CASE("fps covers at least as well as random selection") {
  Rng rng(12);
  int wins = 0;
  for (int t = 0; t < 20; ++t) {
    const auto pts = oracle::cloud(rng, 300);
    const auto coverage = [&](const std::vector<std::size_t>& sel) {
      std::vector<double> chosen;
      for (std::size_t i : sel) chosen.insert(chosen.end(), &pts[3 * i], &pts[3 * i] + 3);
      double worst = 0.0;
      for (std::size_t i = 0; i < 300; ++i) worst = std::max(worst, oracle::nearest(&pts[3 * i], chosen).second);
      return worst;
    };
    std::vector<std::size_t> random(300);
    std::iota(random.begin(), random.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(random));
    random.resize(32);
    if (coverage(geometry::farthest_point_sampling<double>(pts, 32, 0)) <= coverage(random)) ++wins;
  }
  CHECK(wins == 20);
}

TEST_CASE("knn examples and errors") {
  Rng rng(6);
  const auto base = oracle::cloud(rng, 20);
  const std::vector<double> q(base.begin() + 9, base.begin() + 12);
  CHECK(geometry::knn<double>(q, base, 1) == std::vector<std::size_t>{3});
  CHECK(geometry::knn<double>(q, base, 20) == oracle::knn(q, base, 20));
  CHECK_THROWS_AS(geometry::knn<double>(q, base, 21), geometry::GeometryError);

  // feature-space neighbors among rows
  const auto feats = oracle::cloud(rng, 40);  // 40 rows of width 3
  CHECK(geometry::knn_rows<double>(feats, 40, 3, 5) == oracle::knn(feats, feats, 5));
}

TEST_CASE("kd-tree nearest matches exhaustive search") {
  Rng rng(7);
  for (int t = 0; t < 30; ++t) {
    const auto base = oracle::cloud(rng, 1 + rng.below(500), t % 3 == 0);
    const geometry::KdTree<double> tree(base);
    const auto queries = oracle::cloud(rng, 50, t % 3 == 0);
    for (std::size_t i = 0; i < 50; ++i) {
      const auto [idx, d] = oracle::nearest(&queries[3 * i], base);
      const auto nb = tree.nearest(&queries[3 * i]);
      CHECK(nb.index == idx);
      CHECK(nb.sq_distance == d);
    }
  }
}

TEST_CASE("fscore") {
  const PointCloud a = pc({{0, 0, 0}, {1, 0, 0}}), b = pc({{0, 0, 0}});
  const auto f = geometry::fscore(a, b, 0.1);
  CHECK(std::abs(f.precision - 0.5) <= 1e-12);
  CHECK(std::abs(f.recall - 1.0) <= 1e-12);
  CHECK(std::abs(f.f - 2.0 / 3.0) <= 1e-12);
  const auto same = geometry::fscore(a, a, 0.01);
  CHECK(same.f == 1.0);
  const auto none = geometry::fscore(pc({{0, 0, 0}}), pc({{1, 0, 0}}), 0.5);
  CHECK(none.precision == 0.0);
  CHECK(none.recall == 0.0);
  CHECK(none.f == 0.0);
  CHECK_THROWS_AS(geometry::fscore(a, b, 0.0), geometry::GeometryError);
  CHECK_THROWS_AS(geometry::fscore(a, PointCloud{}, 0.1), geometry::GeometryError);
}

TEST_CASE("chamfer_loss gradient matches finite differences") {
  Rng rng(13);
  ad::Tensor<double> x = oracle::random_tensor({25, 3}, rng), y = oracle::random_tensor({31, 3}, rng);
  ad::Graph<double> g;
  auto l = geometry::chamfer_loss(g, x, y);
  CHECK(l.item() == doctest::Approx(oracle::chamfer(x.data(), y.data()).x_to_y + oracle::chamfer(x.data(), y.data()).y_to_x));
  g.backward(l);
  for (ad::Tensor<double> t : {x, y}) {
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    const auto numeric = oracle::finite_difference(t, [&] {
      ad::Graph<double> e(false);
      return geometry::chamfer_loss(e, x, y).item();
    });
    CHECK(oracle::max_relative_error(analytic, numeric) < 1e-5);
  }
}

TEST_CASE("normalization") {
  Rng rng(14);
  PointCloud c = oracle::to_cloud(oracle::cloud(rng, 100));
  for (auto& p : c.points) p = {p[0] * 7 + 3, p[1] * 2 - 1, p[2] * 0.5 + 10};
  const PointCloud n = geometry::normalized(c);
  double lo[3] = {1e9, 1e9, 1e9}, hi[3] = {-1e9, -1e9, -1e9};
  for (const auto& p : n.points)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  for (int a = 0; a < 3; ++a) CHECK(hi[a] - lo[a] <= 1.0 + 1e-6);
  for (std::size_t i = 0; i < c.size(); ++i)
    for (int a = 0; a < 3; ++a)
      CHECK(n.points[i][a] * n.normalization_factor + n.source_center[a] == doctest::Approx(c.points[i][a]));
  CHECK_THROWS_AS(geometry::normalized(PointCloud{}), geometry::GeometryError);
}
