#include <cmath>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "oracles.hpp"
#include "pcfold/cloud_io.hpp"
#include "pcfold/synthetic.hpp"
#include "pcfold/train.hpp"

using namespace pcfold;
using geometry::PointCloud;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "pcfold_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

PointCloud random_cloud(Rng& rng, std::size_t n) {
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) c.points.push_back({rng.normal() * 10, rng.normal() * 1e-3, rng.uniform(-1, 1)});
  return c;
}

bool f32_equal(const PointCloud& a, const PointCloud& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (int k = 0; k < 3; ++k)
      if (static_cast<float>(a.points[i][k]) != b.points[i][k]) return false;
  return true;
}

}  // namespace

TEST_CASE("z-buffer keeps the front hemisphere of a sphere") {
  synthetic::ShapeSpec spec;
  spec.kind = synthetic::ShapeKind::kSphere;
  spec.sizes = {1.0};
  Rng rng(1);
  const std::size_t grid = 128;
  const auto dense = synthetic::sample_surface(spec, 64 * grid * grid, rng);
  const auto kept = synthetic::zbuffer_cull(dense, {0, 0, 1}, grid);
  REQUIRE(!kept.empty());
  double lowest = 1.0;
  for (const auto& p : kept) {
    CHECK(p[2] <= 1.0 + 1e-12);
    lowest = std::min(lowest, p[2]);
  }
  CHECK(lowest >= -2.0 / static_cast<double>(grid));
  // roughly one point per cell inside the silhouette disk
  const double disk_cells = M_PI * grid * grid / 4.0;
  CHECK(std::abs(static_cast<double>(kept.size()) - disk_cells) <= 0.05 * disk_cells);
}

TEST_CASE("synthetic pairs") {
  Rng rng(2);
  for (auto kind : synthetic::kAllKinds) {
    const auto spec = synthetic::random_spec(kind, rng, 500, 120);
    const auto a = synthetic::gen_synthetic(spec, 77), b = synthetic::gen_synthetic(spec, 77);
    CHECK(a.complete.size() == 500);
    CHECK(a.partial.size() == 120);
    CHECK(a.complete.points == b.complete.points);
    CHECK(a.partial.points == b.partial.points);
    CHECK(synthetic::parse_kind(synthetic::to_string(kind)) == kind);
    const auto round = synthetic::ShapeSpec::from_json(spec.to_json());
    CHECK(round.to_json() == spec.to_json());
    // normalized with the complete cloud's transform
    double lo = 1e9, hi = -1e9;
    for (const auto& p : a.complete.points) {
      lo = std::min({lo, p[0], p[1], p[2]});
      hi = std::max({hi, p[0], p[1], p[2]});
    }
    CHECK(hi <= 0.5 + 1e-9);
    CHECK(lo >= -0.5 - 1e-9);
  }
  auto bad = synthetic::random_spec(synthetic::ShapeKind::kTorus, rng);
  bad.sizes = {0.1, 0.5};
  CHECK_THROWS_AS(synthetic::gen_synthetic(bad, 1), synthetic::SpecError);
  bad = synthetic::random_spec(synthetic::ShapeKind::kBox, rng);
  bad.complete_points = 10;
  CHECK_THROWS_AS(bad.validate(), synthetic::SpecError);
  bad = synthetic::random_spec(synthetic::ShapeKind::kBox, rng);
  bad.rotation = {1, 1, 0, 0};
  CHECK_THROWS_AS(bad.validate(), synthetic::SpecError);
  CHECK_THROWS_AS(synthetic::parse_kind("pyramid"), synthetic::SpecError);
}

TEST_CASE("dataset entries") {
  const auto e = synthetic::dataset_entries(9, 5);
  REQUIRE(e.size() == 9);
  CHECK(e[0].id == "s0000_sphere");
  CHECK(e[7].id == "s0007_sphere");
  CHECK(e[5].id == "s0005_composite-table");
  const auto views = synthetic::dataset_entries(2, 5, 3);
  REQUIRE(views.size() == 6);
  CHECK(views[1].id == "s0000_sphere_f1");
  CHECK(views[0].seed == views[2].seed);
  const auto ds = train::synthetic_dataset(3, 5, 100, 300);
  CHECK(ds[2].category == "cylinder");
  CHECK(ds[1].partial.size() == 100);
}

TEST_CASE("cloud files round trip at float32 precision") {
  Rng rng(3);
  const PointCloud c = random_cloud(rng, 257);
  for (const char* name : {"c.xyz", "c.ply"}) {
    const auto path = scratch(name);
    io::write_cloud(path, c);
    const PointCloud back = io::read_cloud(path);
    CHECK(f32_equal(c, back));
    // a second write of the read-back cloud is byte-identical
    const auto path2 = scratch(std::string("again_") + name);
    io::write_cloud(path2, back);
    CHECK(io::read_file(path) == io::read_file(path2));
  }
  const std::string ply = io::read_file(scratch("c.ply"));
  CHECK(ply.find("format binary_little_endian 1.0\n") != std::string::npos);
  CHECK(ply.find("element vertex 257\n") != std::string::npos);
  float x0;
  std::memcpy(&x0, ply.data() + ply.find("end_header\n") + 11, 4);
  CHECK(x0 == static_cast<float>(c.points[0][0]));
}

TEST_CASE("cloud file errors") {
  const auto message = [](const std::string& text) -> std::string {
    try {
      io::parse_xyz(text, "in.xyz");
    } catch (const io::IoError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message("1 2 3\n4 5\n") == "in.xyz:2: expected three coordinates");
  CHECK(message("1 2 3\nnan 0 0\n") == "in.xyz:2: non-finite coordinate");
  CHECK(io::parse_xyz("1 2 3\n\n4 5 6").size() == 2);
  CHECK_THROWS_AS(io::read_cloud(scratch("missing.xyz")), io::IoError);
  io::write_file(scratch("bad.ply"), "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n");
  CHECK_THROWS_AS(io::read_cloud(scratch("bad.ply")), io::IoError);
  io::write_file(scratch("empty.xyz"), "");
  CHECK_THROWS_AS(io::read_cloud(scratch("empty.xyz")), io::IoError);
}
