#include "pcfold/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace pcfold::metrics {

double fidelity(const geometry::PointCloud& input, const geometry::PointCloud& output) {
  if (input.empty() || output.empty()) throw MetricError("fidelity: empty cloud");
  return geometry::directed_chamfer(input, output);
}

double mmd(const geometry::PointCloud& output, std::span<const geometry::PointCloud> references) {
  if (references.empty()) throw MetricError("mmd: empty reference set");
  double best = std::numeric_limits<double>::infinity();
  for (const auto& ref : references) best = std::min(best, geometry::chamfer(output, ref));
  return best;
}

double consistency(std::span<const geometry::PointCloud> completions) {
  if (completions.size() < 2) throw MetricError("consistency: needs at least two completions");
  double sum = 0.0;
  for (std::size_t i = 1; i < completions.size(); ++i) sum += geometry::chamfer(completions[i - 1], completions[i]);
  return sum / static_cast<double>(completions.size() - 1);
}

double uniformity(const geometry::PointCloud& cloud, double fraction, std::size_t seeds) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw MetricError("uniformity: fraction must be in (0, 1)");
  const std::size_t n = cloud.size();
  const double expected = fraction * static_cast<double>(n);
  if (expected < 2.0)
    throw MetricError("uniformity: expected disk count " + std::to_string(expected) + " is below 2 for " +
                      std::to_string(n) + " points");
  geometry::Vec3 c{0, 0, 0};
  for (const auto& p : cloud.points)
    for (int a = 0; a < 3; ++a) c[a] += p[a];
  for (double& v : c) v /= static_cast<double>(n);
  double radius = 0.0;
  for (const auto& p : cloud.points)
    radius = std::max(radius, std::sqrt(geometry::squared_distance(p.data(), c.data())));
  if (!(radius > 0.0)) throw MetricError("uniformity: degenerate cloud (zero bounding radius)");

  std::vector<double> xyz(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) xyz[3 * i + a] = (cloud.points[i][a] - c[a]) / radius;
  const double area = 4.0 * 3.14159265358979323846;
  const double ball_sq = fraction * area / 3.14159265358979323846;  // squared ball radius
  const std::vector<std::size_t> centers =
      geometry::farthest_point_sampling<double>(xyz, std::min(seeds, n), 0);

  double total = 0.0;
  std::vector<std::size_t> ball;
  for (std::size_t s : centers) {
    ball.clear();
    for (std::size_t i = 0; i < n; ++i)
      if (geometry::squared_distance(&xyz[3 * i], &xyz[3 * s]) <= ball_sq) ball.push_back(i);
    const double count = static_cast<double>(ball.size());
    double score = (count - expected) * (count - expected) / expected;
    if (ball.size() >= 2) {
      const double spacing = std::sqrt(ball_sq / count);
      double acc = 0.0;
      for (std::size_t a : ball) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t b : ball)
          if (a != b) best = std::min(best, geometry::squared_distance(&xyz[3 * a], &xyz[3 * b]));
        const double d = std::sqrt(best) - spacing;
        acc += d * d / spacing;
      }
      score += acc / count;
    }
    total += score;
  }
  return total / static_cast<double>(centers.size());
}

ShapeMetrics with_ground_truth(const std::string& id, const std::string& category, const geometry::PointCloud& pred,
                               const geometry::PointCloud& gt, double tau) {
  ShapeMetrics m;
  m.id = id;
  m.category = category;
  m.cd_x1e4 = geometry::chamfer(pred, gt) * 1e4;
  const geometry::FScore f = geometry::fscore(pred, gt, tau);
  m.fscore = f.f;
  m.precision = f.precision;
  m.recall = f.recall;
  return m;
}

const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {
      "shape_id", "category",    "cd_x1e4",         "fscore",          "precision",      "recall",
      "fidelity", "mmd",         "consistency",     "uniformity_0.4", "uniformity_0.8", "uniformity_1.2"};
  return cols;
}

std::vector<std::optional<double>> metric_values(const ShapeMetrics& m) {
  return {m.cd_x1e4,  m.fscore, m.precision,      m.recall,         m.fidelity,
          m.mmd,      m.consistency, m.uniformity[0], m.uniformity[1], m.uniformity[2]};
}

namespace {

void set_metric(ShapeMetrics& m, std::size_t column, std::optional<double> v) {
  std::optional<double>* slots[] = {&m.cd_x1e4, &m.fscore,      &m.precision,     &m.recall,
                                    &m.fidelity, &m.mmd,         &m.consistency,   &m.uniformity[0],
                                    &m.uniformity[1], &m.uniformity[2]};
  *slots[column] = v;
}

Aggregate aggregate(const std::vector<const ShapeMetrics*>& rows) {
  const std::size_t columns = csv_columns().size() - 2;
  Aggregate a;
  a.shapes = rows.size();
  std::vector<double> sum(columns, 0.0);
  std::vector<std::size_t> count(columns, 0);
  for (const ShapeMetrics* r : rows) {
    const auto v = metric_values(*r);
    for (std::size_t c = 0; c < columns; ++c)
      if (v[c]) {
        sum[c] += *v[c];
        ++count[c];
      }
  }
  for (std::size_t c = 0; c < columns; ++c)
    a.means.push_back(count[c] ? std::optional<double>(sum[c] / static_cast<double>(count[c])) : std::nullopt);
  return a;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json aggregate_to_json(const Aggregate& a) {
  nlohmann::json j;
  j["shapes"] = a.shapes;
  const auto& cols = csv_columns();
  for (std::size_t c = 0; c < a.means.size(); ++c)
    j[cols[c + 2]] = a.means[c] ? nlohmann::json(*a.means[c]) : nlohmann::json(nullptr);
  return j;
}

}  // namespace

Report build_report(std::vector<ShapeMetrics> shapes) {
  Report r;
  r.shapes = std::move(shapes);
  std::vector<const ShapeMetrics*> all;
  std::map<std::string, std::vector<const ShapeMetrics*>> groups;
  for (const ShapeMetrics& m : r.shapes) {
    all.push_back(&m);
    groups[m.category].push_back(&m);
  }
  r.overall = aggregate(all);
  for (const auto& [cat, rows] : groups) r.by_category[cat] = aggregate(rows);
  return r;
}

std::string to_csv(const Report& report) {
  std::string out;
  const auto& cols = csv_columns();
  for (std::size_t c = 0; c < cols.size(); ++c) out += (c ? "," : "") + cols[c];
  out += '\n';
  for (const ShapeMetrics& m : report.shapes) {
    if (m.id.find_first_of(",\n") != std::string::npos || m.category.find_first_of(",\n") != std::string::npos)
      throw MetricError("shape id or category contains a comma or newline: " + m.id);
    out += m.id + "," + m.category;
    for (const auto& v : metric_values(m)) out += "," + (v ? format_double(*v) : std::string());
    out += '\n';
  }
  return out;
}

std::vector<ShapeMetrics> parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  const auto& cols = csv_columns();
  std::string header;
  for (std::size_t c = 0; c < cols.size(); ++c) header += (c ? "," : "") + cols[c];
  if (!std::getline(in, line) || line != header) throw MetricError("report CSV header does not match");
  std::vector<ShapeMetrics> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != cols.size())
      throw MetricError("report CSV line " + std::to_string(line_no) + ": expected " + std::to_string(cols.size()) +
                        " fields");
    ShapeMetrics m;
    m.id = fields[0];
    m.category = fields[1];
    for (std::size_t c = 2; c < fields.size(); ++c) {
      if (fields[c].empty()) continue;
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(fields[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != fields[c].size())
        throw MetricError("report CSV line " + std::to_string(line_no) + ": bad number '" + fields[c] + "'");
      set_metric(m, c - 2, v);
    }
    out.push_back(std::move(m));
  }
  return out;
}

nlohmann::json conventions() {
  return {{"chamfer", "squared distances; mean per direction; directions summed"},
          {"cd_scale", 1e4},
          {"fscore_tau", kFScoreTau},
          {"fscore_distance", "euclidean"},
          {"fidelity", "mean squared distance from each input point to the nearest output point"},
          {"mmd", "minimum chamfer distance to the reference set"},
          {"consistency", "mean chamfer distance between consecutive frames of one sequence"},
          {"uniformity",
           {{"coordinates", "divided by the bounding-sphere radius about the centroid"},
            {"disk_area", "p * 4 * pi"},
            {"neighborhood", "euclidean ball (geodesic proxy)"},
            {"seeds", kUniformitySeeds},
            {"fractions", kUniformityFractions}}}};
}

nlohmann::json aggregate_json(const Report& report) {
  nlohmann::json j;
  j["conventions"] = conventions();
  j["overall"] = aggregate_to_json(report.overall);
  nlohmann::json cats = nlohmann::json::object();
  for (const auto& [cat, a] : report.by_category) cats[cat] = aggregate_to_json(a);
  j["by_category"] = cats;
  return j;
}

std::string sequence_key(const std::string& id) {
  const std::size_t pos = id.rfind("_f");
  if (pos == std::string::npos || pos + 2 == id.size()) return id;
  for (std::size_t i = pos + 2; i < id.size(); ++i)
    if (id[i] < '0' || id[i] > '9') return id;
  return id.substr(0, pos);
}

std::string category_of(const std::string& id) {
  const std::size_t first = id.find('_');
  if (first == std::string::npos) return "all";
  const std::size_t second = id.find('_', first + 1);
  return id.substr(first + 1, second == std::string::npos ? std::string::npos : second - first - 1);
}

}  // namespace pcfold::metrics
