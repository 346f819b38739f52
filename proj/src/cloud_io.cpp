#include "pcfold/cloud_io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pcfold::io {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

CloudFormat format_for(const fs::path& path) { return path.extension() == ".ply" ? CloudFormat::kPly : CloudFormat::kXyz; }

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string xyz_text(const geometry::PointCloud& cloud) {
  std::string out;
  out.reserve(cloud.size() * 40);
  char line[96];
  for (const auto& p : cloud.points) {
    const int n = std::snprintf(line, sizeof line, "%.9g %.9g %.9g\n", static_cast<double>(static_cast<float>(p[0])),
                                static_cast<double>(static_cast<float>(p[1])),
                                static_cast<double>(static_cast<float>(p[2])));
    out.append(line, static_cast<std::size_t>(n));
  }
  return out;
}

geometry::PointCloud parse_xyz(const std::string& text, const std::string& origin) {
  geometry::PointCloud cloud;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    geometry::Vec3 p{};
    const char* cur = line.data();
    const char* const end = line.data() + line.size();
    const auto skip = [&] {
      while (cur != end && (*cur == ' ' || *cur == '\t')) ++cur;
    };
    for (double& v : p) {
      skip();
      float f = 0.0f;
      const auto [ptr, ec] = std::from_chars(cur, end, f);
      if (ec == std::errc::result_out_of_range)
        throw IoError(origin + ":" + std::to_string(line_no) + ": coordinate out of float32 range");
      if (ec != std::errc() || (ptr != end && *ptr != ' ' && *ptr != '\t'))
        throw IoError(origin + ":" + std::to_string(line_no) + ": expected three coordinates");
      cur = ptr;
      v = f;
    }
    skip();
    if (cur != end) throw IoError(origin + ":" + std::to_string(line_no) + ": expected three coordinates");
    if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || !std::isfinite(p[2]))
      throw IoError(origin + ":" + std::to_string(line_no) + ": non-finite coordinate");
    cloud.points.push_back(p);
  }
  return cloud;
}

namespace {

std::string ply_bytes(const geometry::PointCloud& cloud) {
  std::string out = "ply\nformat binary_little_endian 1.0\nelement vertex " + std::to_string(cloud.size()) +
                    "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  const std::size_t header = out.size();
  out.resize(header + cloud.size() * 12);
  char* dst = out.data() + header;
  for (const auto& p : cloud.points)
    for (int a = 0; a < 3; ++a) {
      const float f = static_cast<float>(p[a]);
      std::memcpy(dst, &f, 4);
      dst += 4;
    }
  return out;
}

geometry::PointCloud parse_ply(const std::string& bytes, const std::string& origin) {
  const std::string marker = "end_header\n";
  const std::size_t end = bytes.find(marker);
  if (bytes.rfind("ply\n", 0) != 0 || end == std::string::npos) throw IoError(origin + ": not a PLY file");
  std::istringstream header(bytes.substr(0, end));
  std::string line;
  std::size_t count = 0;
  bool binary = false, in_vertex = false, counted = false;
  std::vector<std::string> props;
  while (std::getline(header, line)) {
    std::istringstream f(line);
    std::string key;
    f >> key;
    if (key == "format") {
      std::string fmt;
      f >> fmt;
      binary = fmt == "binary_little_endian";
    } else if (key == "element") {
      std::string name;
      f >> name;
      in_vertex = name == "vertex";
      if (in_vertex) {
        f >> count;
        counted = true;
      } else if (counted) {
        throw IoError(origin + ": only a single vertex element is supported");
      }
    } else if (key == "property" && in_vertex) {
      std::string type, name;
      f >> type >> name;
      if (type != "float" && type != "float32") throw IoError(origin + ": vertex property '" + name + "' is not float");
      props.push_back(name);
    }
  }
  if (!binary) throw IoError(origin + ": only binary_little_endian PLY is supported");
  if (props != std::vector<std::string>{"x", "y", "z"}) throw IoError(origin + ": vertex must have exactly x, y, z");
  const std::size_t body = end + marker.size();
  if (bytes.size() - body < count * 12) throw IoError(origin + ": truncated vertex data");
  geometry::PointCloud cloud;
  cloud.points.resize(count);
  const char* src = bytes.data() + body;
  for (auto& p : cloud.points)
    for (int a = 0; a < 3; ++a) {
      float f;
      std::memcpy(&f, src, 4);
      src += 4;
      p[a] = f;
    }
  return cloud;
}

}  // namespace

void write_cloud(const fs::path& path, const geometry::PointCloud& cloud, CloudFormat format) {
  write_file(path, format == CloudFormat::kPly ? ply_bytes(cloud) : xyz_text(cloud));
}

void write_cloud(const fs::path& path, const geometry::PointCloud& cloud) { write_cloud(path, cloud, format_for(path)); }

geometry::PointCloud read_cloud(const fs::path& path) {
  const std::string bytes = read_file(path);
  geometry::PointCloud c =
      format_for(path) == CloudFormat::kPly ? parse_ply(bytes, path.string()) : parse_xyz(bytes, path.string());
  if (c.empty()) throw IoError("'" + path.string() + "' contains no points");
  return c;
}

}  // namespace pcfold::io
