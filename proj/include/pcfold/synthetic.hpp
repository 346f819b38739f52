#pragma once

// Synthetic occluded shapes: area-weighted surface samples of posed
// primitives, and single-view partial scans obtained by z-buffer culling.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "pcfold/geometry.hpp"
#include "pcfold/rng.hpp"

namespace pcfold::synthetic {

enum class ShapeKind { kSphere, kBox, kCylinder, kCone, kTorus, kTable, kLamp };

inline constexpr std::array<ShapeKind, 7> kAllKinds = {ShapeKind::kSphere, ShapeKind::kBox,   ShapeKind::kCylinder,
                                                       ShapeKind::kCone,   ShapeKind::kTorus, ShapeKind::kTable,
                                                       ShapeKind::kLamp};

std::string_view to_string(ShapeKind kind);
ShapeKind parse_kind(std::string_view text);

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ShapeSpec {
  ShapeKind kind = ShapeKind::kSphere;
  // Kind-specific sizes:
  //   sphere   {radius}
  //   box      {x, y, z} edge lengths
  //   cylinder {radius, height}
  //   cone     {radius, height}
  //   torus    {major radius, minor radius}
  //   table    {top width, top depth, top thickness, leg height, leg radius}
  //   lamp     {base radius, pole height, shade radius, shade height}
  std::vector<double> sizes;
  std::array<double, 4> rotation{1.0, 0.0, 0.0, 0.0};  // unit quaternion (w, x, y, z)
  geometry::Vec3 view{0.0, 0.0, 1.0};  // the camera looks from +view towards the shape
  std::size_t complete_points = 1024;
  std::size_t partial_points = 256;
  std::size_t grid = 64;  // z-buffer resolution G

  // Throws SpecError.
  void validate() const;
  nlohmann::json to_json() const;
  static ShapeSpec from_json(const nlohmann::json& j);
};

// Random sizes, pose and view for `kind`.
ShapeSpec random_spec(ShapeKind kind, Rng& rng, std::size_t complete_points = 1024, std::size_t partial_points = 256);

struct ShapePair {
  geometry::PointCloud partial;
  geometry::PointCloud complete;
};

// Posed surface samples, before normalization.
std::vector<geometry::Vec3> sample_surface(const ShapeSpec& spec, std::size_t count, Rng& rng);

// Points of `dense` that are nearest to the camera within their cell of a
// G x G grid spanning the projection of `dense` onto the view plane.
std::vector<geometry::Vec3> zbuffer_cull(const std::vector<geometry::Vec3>& dense, const geometry::Vec3& view,
                                         std::size_t grid);

// Both clouds are normalized with the transform of the complete cloud.
ShapePair gen_synthetic(const ShapeSpec& spec, std::uint64_t seed);

struct DatasetEntry {
  std::string id;
  ShapeSpec spec;
  std::uint64_t seed = 0;
  std::size_t object = 0;
  std::size_t view = 0;
};

// Shape i has kind kAllKinds[i % 7]; its spec and sampling seed derive from
// the "shape" stream at index i, each view from the "view" stream.
std::vector<DatasetEntry> dataset_entries(std::size_t count, std::uint64_t seed, std::size_t views = 1,
                                          std::size_t complete_points = 1024, std::size_t partial_points = 256);

}  // namespace pcfold::synthetic
