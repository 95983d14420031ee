#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "partforge/rng.hpp"

namespace partforge {

using Vec3 = Eigen::Vector3d;

// Z is up throughout; XY is the ground plane.
enum Axis : int { kAxisX = 0, kAxisY = 1, kAxisZ = 2 };

struct PointCloud {
  std::vector<Vec3> points;
  // Empty, or one part label per point.
  std::vector<int> labels;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_labels() const { return !labels.empty(); }

  // Throws std::invalid_argument on non-finite coordinates or a label/point
  // count mismatch.
  void validate() const;
};

struct Aabb {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  Vec3 extent() const { return max - min; }
  Vec3 center() const { return 0.5 * (min + max); }
};

Vec3 centroid(const PointCloud& cloud);
Aabb aabb(const PointCloud& cloud);

// Signed separation of two boxes along one axis; negative means the
// projections overlap by that amount.
double axis_gap(const Aabb& a, const Aabb& b, int axis);

// Fraction of base points whose XY projection falls inside the closed XY
// rectangle of `cover`.
double containment_fraction(const PointCloud& base, const Aabb& cover);

// Uniform without replacement when the cloud has at least n_target points,
// with replacement otherwise. Labels travel with their points.
PointCloud downsample(const PointCloud& cloud, std::size_t n_target, Rng& rng);

PointCloud translate(const PointCloud& cloud, const Vec3& t);
PointCloud scale_xy_about_origin(const PointCloud& cloud, double s);

// ASCII "x y z [label]" per line, '#' starts a comment. Coordinates are
// written as the shortest decimal that round-trips a 32-bit float.
PointCloud parse_xyz(std::string_view text);
std::string format_xyz(const PointCloud& cloud);
PointCloud read_xyz(const std::filesystem::path& path);
void write_xyz(const std::filesystem::path& path, const PointCloud& cloud);

}  // namespace partforge
