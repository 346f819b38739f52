#pragma once

// Point cloud files.
//
//   .xyz  one "x y z" line per point, LF newlines, written with enough
//         digits (%.9g) to restore every float32 coordinate exactly
//   .ply  binary_little_endian 1.0, one vertex element with float x, y, z

#include <filesystem>
#include <stdexcept>
#include <string>

#include "pcfold/geometry.hpp"

namespace pcfold::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CloudFormat { kXyz, kPly };

// By extension: ".ply" is PLY, everything else xyz.
CloudFormat format_for(const std::filesystem::path& path);

// Coordinates are stored as float32 in both formats.
void write_cloud(const std::filesystem::path& path, const geometry::PointCloud& cloud);
void write_cloud(const std::filesystem::path& path, const geometry::PointCloud& cloud, CloudFormat format);
geometry::PointCloud read_cloud(const std::filesystem::path& path);

std::string xyz_text(const geometry::PointCloud& cloud);
geometry::PointCloud parse_xyz(const std::string& text, const std::string& origin = "<memory>");

// Whole-file helpers; throw IoError naming the path.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace pcfold::io
