#include "pcfold/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace pcfold::synthetic {

using geometry::Vec3;

namespace {

constexpr double kPi = 3.14159265358979323846;

Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
Vec3 unit(const Vec3& a) {
  const double n = std::sqrt(dot(a, a));
  return {a[0] / n, a[1] / n, a[2] / n};
}

// Surface patches in the shape's local frame (z up).
struct Part {
  enum Type { kSphere, kRect, kTube, kDisk, kConeSide, kTorus } type;
  Vec3 center{0, 0, 0};
  double a = 0, b = 0;  // type-specific sizes
  int normal_axis = 2;  // kRect: axis the rectangle is perpendicular to
  double area = 0;
};

Part sphere(Vec3 c, double r) { return {Part::kSphere, c, r, 0, 2, 4 * kPi * r * r}; }
Part rect(Vec3 c, int axis, double half_u, double half_v) {
  return {Part::kRect, c, half_u, half_v, axis, 4 * half_u * half_v};
}
Part tube(Vec3 c, double r, double h) { return {Part::kTube, c, r, h, 2, 2 * kPi * r * h}; }
Part disk(Vec3 c, double r) { return {Part::kDisk, c, r, 0, 2, kPi * r * r}; }
// Open cone side with base circle centered at c and apex at c + (0, 0, h).
Part cone_side(Vec3 c, double r, double h) { return {Part::kConeSide, c, r, h, 2, kPi * r * std::hypot(r, h)}; }
Part torus(Vec3 c, double major, double minor) {
  return {Part::kTorus, c, major, minor, 2, 4 * kPi * kPi * major * minor};
}

void add_box(std::vector<Part>& parts, Vec3 c, double x, double y, double z) {
  for (int s : {-1, 1}) {
    parts.push_back(rect(c + Vec3{s * x / 2, 0, 0}, 0, y / 2, z / 2));
    parts.push_back(rect(c + Vec3{0, s * y / 2, 0}, 1, x / 2, z / 2));
    parts.push_back(rect(c + Vec3{0, 0, s * z / 2}, 2, x / 2, y / 2));
  }
}

void add_cylinder(std::vector<Part>& parts, Vec3 base, double r, double h) {
  parts.push_back(tube(base + Vec3{0, 0, h / 2}, r, h));
  parts.push_back(disk(base, r));
  parts.push_back(disk(base + Vec3{0, 0, h}, r));
}

std::vector<Part> build_parts(const ShapeSpec& spec) {
  const auto& s = spec.sizes;
  std::vector<Part> parts;
  switch (spec.kind) {
    case ShapeKind::kSphere: parts.push_back(sphere({0, 0, 0}, s[0])); break;
    case ShapeKind::kBox: add_box(parts, {0, 0, 0}, s[0], s[1], s[2]); break;
    case ShapeKind::kCylinder: add_cylinder(parts, {0, 0, -s[1] / 2}, s[0], s[1]); break;
    case ShapeKind::kCone:
      parts.push_back(cone_side({0, 0, -s[1] / 2}, s[0], s[1]));
      parts.push_back(disk({0, 0, -s[1] / 2}, s[0]));
      break;
    case ShapeKind::kTorus: parts.push_back(torus({0, 0, 0}, s[0], s[1])); break;
    case ShapeKind::kTable: {
      const double w = s[0], d = s[1], t = s[2], leg = s[3], lr = s[4];
      add_box(parts, {0, 0, leg + t / 2}, w, d, t);
      for (int sx : {-1, 1})
        for (int sy : {-1, 1}) {
          parts.push_back(tube({sx * (w / 2 - 1.5 * lr), sy * (d / 2 - 1.5 * lr), leg / 2}, lr, leg));
          parts.push_back(disk({sx * (w / 2 - 1.5 * lr), sy * (d / 2 - 1.5 * lr), 0}, lr));
        }
      break;
    }
    case ShapeKind::kLamp: {
      const double br = s[0], pole = s[1], sr = s[2], sh = s[3];
      const double bh = 0.2 * br, pr = 0.08 * br;
      add_cylinder(parts, {0, 0, 0}, br, bh);
      parts.push_back(tube({0, 0, bh + pole / 2}, pr, pole));
      parts.push_back(cone_side({0, 0, bh + pole - 0.3 * sh}, sr, sh));
      break;
    }
  }
  return parts;
}

Vec3 sample_part(const Part& p, Rng& rng) {
  switch (p.type) {
    case Part::kSphere: {
      Vec3 d{rng.normal(), rng.normal(), rng.normal()};
      while (dot(d, d) == 0.0) d = {rng.normal(), rng.normal(), rng.normal()};
      return p.center + p.a * unit(d);
    }
    case Part::kRect: {
      const double u = rng.uniform(-p.a, p.a), v = rng.uniform(-p.b, p.b);
      Vec3 o{0, 0, 0};
      const int ua = p.normal_axis == 0 ? 1 : 0;
      const int va = p.normal_axis == 2 ? 1 : 2;
      o[ua] = u;
      o[va] = v;
      return p.center + o;
    }
    case Part::kTube: {
      const double th = rng.uniform(0, 2 * kPi), z = rng.uniform(-p.b / 2, p.b / 2);
      return p.center + Vec3{p.a * std::cos(th), p.a * std::sin(th), z};
    }
    case Part::kDisk: {
      const double th = rng.uniform(0, 2 * kPi), rho = p.a * std::sqrt(rng.uniform());
      return p.center + Vec3{rho * std::cos(th), rho * std::sin(th), 0};
    }
    case Part::kConeSide: {
      // t is the fraction of the way from apex to base; density grows linearly with t.
      const double t = std::sqrt(rng.uniform()), th = rng.uniform(0, 2 * kPi);
      return p.center + Vec3{p.a * t * std::cos(th), p.a * t * std::sin(th), p.b * (1 - t)};
    }
    case Part::kTorus: {
      double v;
      do {
        v = rng.uniform(0, 2 * kPi);
      } while (rng.uniform() * (p.a + p.b) > p.a + p.b * std::cos(v));
      const double u = rng.uniform(0, 2 * kPi), rr = p.a + p.b * std::cos(v);
      return p.center + Vec3{rr * std::cos(u), rr * std::sin(u), p.b * std::sin(v)};
    }
  }
  return p.center;
}

Vec3 rotate(const std::array<double, 4>& q, const Vec3& v) {
  const Vec3 u{q[1], q[2], q[3]};
  const double w = q[0];
  const Vec3 t = 2.0 * cross(u, v);
  return v + (w * t + cross(u, t));
}

std::size_t size_count(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kSphere: return 1;
    case ShapeKind::kBox: return 3;
    case ShapeKind::kCylinder:
    case ShapeKind::kCone:
    case ShapeKind::kTorus: return 2;
    case ShapeKind::kTable: return 5;
    case ShapeKind::kLamp: return 4;
  }
  return 0;
}

std::array<double, 4> random_rotation(Rng& rng) {
  std::array<double, 4> q{};
  double n = 0;
  do {
    for (double& x : q) x = rng.normal();
    n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  } while (n < 1e-9);
  for (double& x : q) x /= n;
  return q;
}

Vec3 random_direction(Rng& rng) {
  Vec3 d{};
  do {
    d = {rng.normal(), rng.normal(), rng.normal()};
  } while (dot(d, d) < 1e-18);
  return unit(d);
}

}  // namespace

std::string_view to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kSphere: return "sphere";
    case ShapeKind::kBox: return "box";
    case ShapeKind::kCylinder: return "cylinder";
    case ShapeKind::kCone: return "cone";
    case ShapeKind::kTorus: return "torus";
    case ShapeKind::kTable: return "composite-table";
    case ShapeKind::kLamp: return "composite-lamp";
  }
  return "unknown";
}

ShapeKind parse_kind(std::string_view text) {
  for (ShapeKind k : kAllKinds)
    if (to_string(k) == text) return k;
  throw SpecError("unknown shape kind '" + std::string(text) + "'");
}

void ShapeSpec::validate() const {
  if (sizes.size() != size_count(kind))
    throw SpecError(std::string(to_string(kind)) + " needs " + std::to_string(size_count(kind)) + " sizes, got " +
                    std::to_string(sizes.size()));
  for (double s : sizes)
    if (!(s > 0.0) || !std::isfinite(s)) throw SpecError("shape sizes must be positive and finite");
  if (kind == ShapeKind::kTorus && !(sizes[1] < sizes[0])) throw SpecError("torus minor radius must be below major");
  if (kind == ShapeKind::kTable && !(3 * sizes[4] < std::min(sizes[0], sizes[1])))
    throw SpecError("table legs do not fit under the top");
  const double qn = std::sqrt(rotation[0] * rotation[0] + rotation[1] * rotation[1] + rotation[2] * rotation[2] +
                              rotation[3] * rotation[3]);
  if (std::abs(qn - 1.0) > 1e-9) throw SpecError("rotation must be a unit quaternion");
  if (!(dot(view, view) > 0.0)) throw SpecError("view direction must be nonzero");
  if (complete_points < 64) throw SpecError("complete point budget must be at least 64");
  if (partial_points == 0) throw SpecError("partial point budget must be positive");
  if (grid < 2) throw SpecError("cull grid must be at least 2x2");
}

nlohmann::json ShapeSpec::to_json() const {
  return {{"kind", std::string(to_string(kind))}, {"sizes", sizes},
          {"rotation", rotation},                 {"view", view},
          {"complete_points", complete_points},   {"partial_points", partial_points},
          {"grid", grid}};
}

ShapeSpec ShapeSpec::from_json(const nlohmann::json& j) {
  ShapeSpec s;
  try {
    s.kind = parse_kind(j.at("kind").get<std::string>());
    s.sizes = j.at("sizes").get<std::vector<double>>();
    s.rotation = j.at("rotation").get<std::array<double, 4>>();
    s.view = j.at("view").get<Vec3>();
    s.complete_points = j.at("complete_points").get<std::size_t>();
    s.partial_points = j.at("partial_points").get<std::size_t>();
    s.grid = j.at("grid").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("malformed shape spec: ") + e.what());
  }
  return s;
}

ShapeSpec random_spec(ShapeKind kind, Rng& rng, std::size_t complete_points, std::size_t partial_points) {
  ShapeSpec s;
  s.kind = kind;
  s.complete_points = complete_points;
  s.partial_points = partial_points;
  switch (kind) {
    case ShapeKind::kSphere: s.sizes = {rng.uniform(0.5, 1.5)}; break;
    case ShapeKind::kBox: s.sizes = {rng.uniform(0.4, 1.6), rng.uniform(0.4, 1.6), rng.uniform(0.4, 1.6)}; break;
    case ShapeKind::kCylinder:
    case ShapeKind::kCone: s.sizes = {rng.uniform(0.3, 0.8), rng.uniform(0.6, 2.0)}; break;
    case ShapeKind::kTorus: {
      const double major = rng.uniform(0.6, 1.0);
      s.sizes = {major, major * rng.uniform(0.2, 0.45)};
      break;
    }
    case ShapeKind::kTable: {
      const double w = rng.uniform(1.0, 1.8), d = rng.uniform(0.7, 1.2);
      s.sizes = {w, d, rng.uniform(0.05, 0.12), rng.uniform(0.6, 1.0), rng.uniform(0.03, 0.07)};
      break;
    }
    case ShapeKind::kLamp:
      s.sizes = {rng.uniform(0.25, 0.4), rng.uniform(0.8, 1.4), rng.uniform(0.3, 0.5), rng.uniform(0.25, 0.45)};
      break;
  }
  s.rotation = random_rotation(rng);
  s.view = random_direction(rng);
  return s;
}

std::vector<Vec3> sample_surface(const ShapeSpec& spec, std::size_t count, Rng& rng) {
  spec.validate();
  const std::vector<Part> parts = build_parts(spec);
  std::vector<double> cumulative(parts.size());
  double total = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) cumulative[i] = total += parts[i].area;
  std::vector<Vec3> out(count);
  for (Vec3& p : out) {
    const double pick = rng.uniform() * total;
    std::size_t part = std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin();
    part = std::min(part, parts.size() - 1);
    p = rotate(spec.rotation, sample_part(parts[part], rng));
  }
  return out;
}

std::vector<Vec3> zbuffer_cull(const std::vector<Vec3>& dense, const Vec3& view, std::size_t grid) {
  if (dense.empty()) return {};
  const Vec3 w = unit(view);
  const Vec3 helper = std::abs(w[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  const Vec3 u = unit(cross(helper, w));
  const Vec3 v = cross(w, u);
  double umin = std::numeric_limits<double>::infinity(), vmin = umin;
  double umax = -umin, vmax = -umin;
  for (const Vec3& p : dense) {
    umin = std::min(umin, dot(p, u));
    umax = std::max(umax, dot(p, u));
    vmin = std::min(vmin, dot(p, v));
    vmax = std::max(vmax, dot(p, v));
  }
  const double cell = std::max({umax - umin, vmax - vmin, 1e-12}) / static_cast<double>(grid);
  constexpr std::size_t kEmpty = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> best(grid * grid, kEmpty);
  std::vector<double> depth(grid * grid, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < dense.size(); ++i) {
    const auto bin = [&](double x, double lo) {
      return std::min(grid - 1, static_cast<std::size_t>(std::max(0.0, (x - lo) / cell)));
    };
    const std::size_t c = bin(dot(dense[i], v), vmin) * grid + bin(dot(dense[i], u), umin);
    const double z = dot(dense[i], w);
    if (z > depth[c]) {
      depth[c] = z;
      best[c] = i;
    }
  }
  std::vector<Vec3> kept;
  for (std::size_t i : best)
    if (i != kEmpty) kept.push_back(dense[i]);
  return kept;
}

ShapePair gen_synthetic(const ShapeSpec& spec, std::uint64_t seed) {
  spec.validate();
  ShapePair pair;
  Rng complete_rng = Rng::stream(seed, "complete");
  pair.complete.points = sample_surface(spec, spec.complete_points, complete_rng);

  Rng view_rng = Rng::stream(seed, "partial");
  std::vector<Vec3> kept;
  std::size_t grid = spec.grid;
  for (int attempt = 0; attempt < 3; ++attempt, grid *= 2) {
    const std::size_t dense_count = std::max<std::size_t>(64 * grid * grid, 8 * spec.partial_points);
    kept = zbuffer_cull(sample_surface(spec, dense_count, view_rng), spec.view, grid);
    if (kept.size() >= spec.partial_points) break;
  }
  std::vector<std::size_t> pick(kept.size());
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  view_rng.shuffle(std::span<std::size_t>(pick));
  if (pick.size() > spec.partial_points) pick.resize(spec.partial_points);
  std::sort(pick.begin(), pick.end());
  // A view that sees fewer cells than the budget repeats its points.
  for (std::size_t i = 0; pick.size() < spec.partial_points; ++i) pick.push_back(pick[i]);
  for (std::size_t i : pick) pair.partial.points.push_back(kept[i]);

  geometry::PointCloud reference = pair.complete;
  std::array<geometry::PointCloud*, 2> both{&pair.partial, &pair.complete};
  geometry::normalize_jointly(reference, both);
  return pair;
}

std::vector<DatasetEntry> dataset_entries(std::size_t count, std::uint64_t seed, std::size_t views,
                                          std::size_t complete_points, std::size_t partial_points) {
  if (views == 0) throw SpecError("views per object must be positive");
  std::vector<DatasetEntry> entries;
  for (std::size_t i = 0; i < count; ++i) {
    const ShapeKind kind = kAllKinds[i % kAllKinds.size()];
    Rng shape_rng = Rng::stream(seed, "shape", i);
    const ShapeSpec base = random_spec(kind, shape_rng, complete_points, partial_points);
    const std::uint64_t sample_seed = shape_rng.next_u64();
    for (std::size_t v = 0; v < views; ++v) {
      DatasetEntry e;
      e.spec = base;
      e.object = i;
      e.view = v;
      // Consecutive views orbit the shape in 30 degree steps about the world z axis.
      const double angle = static_cast<double>(v) * kPi / 6.0;
      const Vec3& b = base.view;
      e.spec.view = {b[0] * std::cos(angle) - b[1] * std::sin(angle), b[0] * std::sin(angle) + b[1] * std::cos(angle),
                     b[2]};
      e.seed = sample_seed;
      char id[96];
      if (views == 1)
        std::snprintf(id, sizeof id, "s%04zu_%s", i, std::string(to_string(kind)).c_str());
      else
        std::snprintf(id, sizeof id, "s%04zu_%s_f%zu", i, std::string(to_string(kind)).c_str(), v);
      e.id = id;
      entries.push_back(std::move(e));
    }
  }
  return entries;
}

}  // namespace pcfold::synthetic
