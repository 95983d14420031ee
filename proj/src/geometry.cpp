#include "partforge/geometry.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace partforge {

namespace {

void require_non_empty(const PointCloud& cloud, const char* what) {
  if (cloud.empty()) {
    throw std::invalid_argument(std::string(what) + ": empty point cloud");
  }
}

}  // namespace

void PointCloud::validate() const {
  for (const auto& p : points) {
    if (!p.allFinite()) {
      throw std::invalid_argument("point cloud contains a non-finite coordinate");
    }
  }
  if (has_labels() && labels.size() != points.size()) {
    throw std::invalid_argument("label count does not match point count");
  }
}

Vec3 centroid(const PointCloud& cloud) {
  require_non_empty(cloud, "centroid");
  Vec3 sum = Vec3::Zero();
  for (const auto& p : cloud.points) sum += p;
  return sum / static_cast<double>(cloud.size());
}

Aabb aabb(const PointCloud& cloud) {
  require_non_empty(cloud, "aabb");
  Aabb box{cloud.points.front(), cloud.points.front()};
  for (const auto& p : cloud.points) {
    box.min = box.min.cwiseMin(p);
    box.max = box.max.cwiseMax(p);
  }
  return box;
}

double axis_gap(const Aabb& a, const Aabb& b, int axis) {
  return std::max(a.min[axis] - b.max[axis], b.min[axis] - a.max[axis]);
}

double containment_fraction(const PointCloud& base, const Aabb& cover) {
  require_non_empty(base, "containment_fraction");
  std::size_t inside = 0;
  for (const auto& p : base.points) {
    if (p.x() >= cover.min.x() && p.x() <= cover.max.x() && p.y() >= cover.min.y() &&
        p.y() <= cover.max.y()) {
      ++inside;
    }
  }
  return static_cast<double>(inside) / static_cast<double>(base.size());
}

PointCloud downsample(const PointCloud& cloud, std::size_t n_target, Rng& rng) {
  require_non_empty(cloud, "downsample");
  if (n_target == 0) throw std::invalid_argument("downsample: n_target must be >= 1");

  std::vector<std::size_t> picks(n_target);
  const std::size_t n = cloud.size();
  if (n >= n_target) {
    // Partial Fisher-Yates.
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < n_target; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    std::copy_n(idx.begin(), n_target, picks.begin());
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (auto& i : picks) i = pick(rng);
  }

  PointCloud out;
  out.points.reserve(n_target);
  for (auto i : picks) out.points.push_back(cloud.points[i]);
  if (cloud.has_labels()) {
    out.labels.reserve(n_target);
    for (auto i : picks) out.labels.push_back(cloud.labels[i]);
  }
  return out;
}

PointCloud translate(const PointCloud& cloud, const Vec3& t) {
  PointCloud out = cloud;
  for (auto& p : out.points) p += t;
  return out;
}

PointCloud scale_xy_about_origin(const PointCloud& cloud, double s) {
  PointCloud out = cloud;
  if (s == 1.0) return out;
  for (auto& p : out.points) {
    p.x() *= s;
    p.y() *= s;
  }
  return out;
}

PointCloud parse_xyz(std::string_view text) {
  PointCloud cloud;
  std::size_t line_no = 0;
  bool any_label = false;
  bool any_unlabeled = false;
  while (!text.empty()) {
    ++line_no;
    auto eol = text.find('\n');
    std::string_view line = text.substr(0, eol);
    text = eol == std::string_view::npos ? std::string_view{} : text.substr(eol + 1);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);

    std::vector<std::string_view> fields;
    std::size_t pos = 0;
    while (pos < line.size()) {
      while (pos < line.size() && std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
      std::size_t start = pos;
      while (pos < line.size() && !std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
      if (pos > start) fields.push_back(line.substr(start, pos - start));
    }
    if (fields.empty()) continue;
    if (fields.size() != 3 && fields.size() != 4) {
      throw std::runtime_error("xyz line " + std::to_string(line_no) + ": expected 3 or 4 fields");
    }
    Vec3 p;
    for (int k = 0; k < 3; ++k) {
      float v = 0.0f;
      auto f = fields[k];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size()) {
        throw std::runtime_error("xyz line " + std::to_string(line_no) + ": bad coordinate");
      }
      p[k] = static_cast<double>(v);
    }
    cloud.points.push_back(p);
    if (fields.size() == 4) {
      int label = 0;
      auto f = fields[3];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), label);
      if (ec != std::errc() || ptr != f.data() + f.size() || label < 0) {
        throw std::runtime_error("xyz line " + std::to_string(line_no) + ": bad label");
      }
      cloud.labels.push_back(label);
      any_label = true;
    } else {
      any_unlabeled = true;
    }
  }
  if (any_label && any_unlabeled) {
    throw std::runtime_error("xyz: labels present on some lines but not others");
  }
  cloud.validate();
  return cloud;
}

std::string format_xyz(const PointCloud& cloud) {
  std::string out;
  out.reserve(cloud.size() * 32);
  char buf[32];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, static_cast<float>(cloud.points[i][k]));
      out.append(buf, ptr);
      out.push_back(k < 2 ? ' ' : (cloud.has_labels() ? ' ' : '\n'));
    }
    if (cloud.has_labels()) {
      out += std::to_string(cloud.labels[i]);
      out.push_back('\n');
    }
  }
  return out;
}

PointCloud read_xyz(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_xyz(ss.str());
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_xyz(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << format_xyz(cloud);
}

}  // namespace partforge
