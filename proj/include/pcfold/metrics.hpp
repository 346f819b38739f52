#pragma once

// Completion metrics and report serialization.
//
// Chamfer values are means of squared nearest-neighbor distances summed over
// both directions; reports scale them by 1e4. Uniformity is computed in
// coordinates divided by the cloud's bounding-sphere radius R (centroid to
// farthest point), so the disk area for fraction p is p * 4 * pi and the
// score does not depend on the cloud's scale.

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcfold/geometry.hpp"

namespace pcfold::metrics {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr double kFScoreTau = 0.01;
inline constexpr std::array<double, 3> kUniformityFractions = {0.004, 0.008, 0.012};
inline constexpr std::size_t kUniformitySeeds = 100;

// Mean over input points of the squared distance to the nearest output point.
double fidelity(const geometry::PointCloud& input, const geometry::PointCloud& output);
// Smallest Chamfer distance to any reference.
double mmd(const geometry::PointCloud& output, std::span<const geometry::PointCloud> references);
// Mean Chamfer distance between consecutive completions.
double consistency(std::span<const geometry::PointCloud> completions);

// Mean over min(seeds, |P|) FPS centers of
//   (n - n_hat)^2 / n_hat + mean_{ball} (d_nn - d_hat)^2 / d_hat
// with ball radius sqrt(4p) in R-normalized units, n_hat = p * |P| and
// d_hat = sqrt(4p / n). The spacing term is omitted for balls with n < 2.
double uniformity(const geometry::PointCloud& cloud, double fraction, std::size_t seeds = kUniformitySeeds);

struct ShapeMetrics {
  std::string id;
  std::string category;
  std::optional<double> cd_x1e4, fscore, precision, recall;
  std::optional<double> fidelity, mmd, consistency;
  std::array<std::optional<double>, 3> uniformity;
  bool operator==(const ShapeMetrics&) const = default;
};

ShapeMetrics with_ground_truth(const std::string& id, const std::string& category, const geometry::PointCloud& pred,
                               const geometry::PointCloud& gt, double tau = kFScoreTau);

// Column values in CSV order, after id and category.
std::vector<std::optional<double>> metric_values(const ShapeMetrics& m);
const std::vector<std::string>& csv_columns();

struct Aggregate {
  std::size_t shapes = 0;
  std::vector<std::optional<double>> means;  // per metric column; absent when no shape has the value
};

struct Report {
  std::vector<ShapeMetrics> shapes;
  Aggregate overall;
  std::map<std::string, Aggregate> by_category;
};

// Aggregates are arithmetic means over the shapes that carry each value.
Report build_report(std::vector<ShapeMetrics> shapes);

std::string to_csv(const Report& report);
std::vector<ShapeMetrics> parse_csv(const std::string& text);
nlohmann::json aggregate_json(const Report& report);
nlohmann::json conventions();

// "car_f3" -> "car"; ids without an "_f<digits>" suffix map to themselves.
std::string sequence_key(const std::string& id);
// "s0003_torus" -> "torus"; ids without an underscore map to "all".
std::string category_of(const std::string& id);

}  // namespace pcfold::metrics
