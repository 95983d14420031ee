#include "doctest.h"

#include <cmath>
#include <set>

#include "partforge/geometry.hpp"

using namespace partforge;

namespace {

PointCloud cloud_of(std::initializer_list<Vec3> pts) {
  PointCloud c;
  c.points.assign(pts.begin(), pts.end());
  return c;
}

}  // namespace

TEST_CASE("aabb and centroid of a small cloud") {
  const auto c = cloud_of({{0, 0, 0}, {2, -1, 4}, {1, 3, -2}});
  const Aabb b = aabb(c);
  CHECK(b.min == Vec3(0, -1, -2));
  CHECK(b.max == Vec3(2, 3, 4));
  CHECK(b.extent() == Vec3(2, 4, 6));
  CHECK(centroid(c).isApprox(Vec3(1, 2.0 / 3.0, 2.0 / 3.0)));
  CHECK_THROWS_AS(aabb(PointCloud{}), std::invalid_argument);
  CHECK_THROWS_AS(centroid(PointCloud{}), std::invalid_argument);
}

TEST_CASE("axis_gap is positive when separated and negative when overlapping") {
  const Aabb a{{0, 0, 0}, {1, 1, 1}};
  const Aabb b{{0, 0, 1.5}, {1, 1, 2}};
  CHECK(axis_gap(a, b, kAxisZ) == doctest::Approx(0.5));
  CHECK(axis_gap(b, a, kAxisZ) == doctest::Approx(0.5));
  const Aabb c{{0.25, 0, 0}, {2, 1, 1}};
  CHECK(axis_gap(a, c, kAxisX) == doctest::Approx(-0.75));
}

TEST_CASE("containment uses the closed XY rectangle and ignores Z") {
  const Aabb cover{{-1, -1, 5}, {1, 1, 6}};
  const auto base = cloud_of({{1, 1, 0}, {-1, 0.5, -3}, {1.0000001, 0, 0}, {0, 0, 100}});
  CHECK(containment_fraction(base, cover) == doctest::Approx(0.75));
}

TEST_CASE("downsample without replacement picks distinct points and carries labels") {
  PointCloud c;
  for (int i = 0; i < 50; ++i) {
    c.points.emplace_back(i, 0, 0);
    c.labels.push_back(i % 3);
  }
  Rng rng = make_rng(4);
  const auto d = downsample(c, 20, rng);
  REQUIRE(d.size() == 20);
  REQUIRE(d.labels.size() == 20);
  std::set<int> seen;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const int idx = static_cast<int>(d.points[i].x());
    seen.insert(idx);
    CHECK(d.labels[i] == idx % 3);
  }
  CHECK(seen.size() == 20);

  Rng again = make_rng(4);
  const auto d2 = downsample(c, 20, again);
  CHECK(d2.points == d.points);
}

TEST_CASE("downsample to more points than available samples with replacement") {
  const auto c = cloud_of({{0, 0, 0}, {1, 0, 0}});
  Rng rng = make_rng(1);
  const auto d = downsample(c, 9, rng);
  CHECK(d.size() == 9);
  for (const auto& p : d.points) CHECK((p.x() == 0.0 || p.x() == 1.0));
  CHECK_THROWS(downsample(c, 0, rng));
}

TEST_CASE("scale_xy_about_origin leaves z alone") {
  const auto c = cloud_of({{2, -4, 7}});
  const auto s = scale_xy_about_origin(c, 0.5);
  CHECK(s.points[0] == Vec3(1, -2, 7));
  CHECK(translate(c, Vec3(1, 1, 1)).points[0] == Vec3(3, -3, 8));
}

TEST_CASE("xyz text round-trips float32 values and labels") {
  PointCloud c;
  c.points = {{0.1, -2.5, 3.14159265358979}, {1e-7, 12345.678, -0.0}};
  c.labels = {0, 3};
  const auto text = format_xyz(c);
  const auto back = parse_xyz(text);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    for (int k = 0; k < 3; ++k) {
      CHECK(back.points[i][k] == static_cast<double>(static_cast<float>(c.points[i][k])));
    }
  }
  CHECK(back.labels == c.labels);
  CHECK(format_xyz(back) == text);
}

TEST_CASE("xyz parser handles comments and rejects malformed input") {
  const auto c = parse_xyz("# header\n1 2 3\n\n  4 5 6  # trailing\n");
  CHECK(c.size() == 2);
  CHECK_FALSE(c.has_labels());
  CHECK_THROWS(parse_xyz("1 2\n"));
  CHECK_THROWS(parse_xyz("1 2 x\n"));
  CHECK_THROWS(parse_xyz("1 2 3 0\n4 5 6\n"));
  CHECK_THROWS(parse_xyz("1 2 3 -1\n"));
  CHECK_THROWS(parse_xyz("nan 0 0\n"));
}
