#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "kpred/geometry.hpp"
#include "kpred/rng.hpp"

using namespace kpred;

namespace {

PointCloud random_cloud(std::size_t n, uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  PointCloud pc;
  for (std::size_t i = 0; i < n; ++i)
    pc.points.push_back({rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)});
  return pc;
}

// brute-force references, independent of the library implementations
double ref_ucd(const PointCloud& a, const PointCloud& b) {
  double total = 0.0;
  for (const Vec3& p : a.points) {
    double best = 1e300;
    for (const Vec3& q : b.points) {
      const double d = (p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y) +
                       (p.z - q.z) * (p.z - q.z);
      best = std::min(best, d);
    }
    total += best;
  }
  return total / static_cast<double>(a.size());
}

std::vector<int> ref_fps(const PointCloud& pc, std::size_t k) {
  std::vector<int> picks;
  std::size_t start = 0;
  for (std::size_t i = 1; i < pc.size(); ++i) {
    const Vec3 &a = pc.points[i], &b = pc.points[start];
    if (a.x < b.x || (a.x == b.x && (a.y < b.y || (a.y == b.y && a.z < b.z)))) start = i;
  }
  picks.push_back(static_cast<int>(start));
  while (picks.size() < k) {
    double best_d = -1.0;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < pc.size(); ++i) {
      double min_d = 1e300;
      for (int p : picks) min_d = std::min(min_d, dist2(pc.points[i], pc.points[p]));
      if (min_d > best_d) {
        best_d = min_d;
        best_i = i;
      }
    }
    picks.push_back(static_cast<int>(best_i));
  }
  return picks;
}

}  // namespace

TEST_CASE("normalize_unit_cube basic example") {
  PointCloud pc;
  pc.points = {{0, 0, 0}, {2, 0, 0}};
  UnitCubeTransform tf;
  PointCloud out = normalize_unit_cube(pc, &tf);
  CHECK(out.points[0].x == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(out.points[1].x == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(out.points[0].y == 0.0);
  CHECK(tf.scale == doctest::Approx(0.5));
}

TEST_CASE("normalize_unit_cube idempotence and bounds") {
  PointCloud pc = random_cloud(100, 7);
  PointCloud once = normalize_unit_cube(pc);
  PointCloud twice = normalize_unit_cube(once);
  Vec3 lo, hi;
  bounding_box(once.points, &lo, &hi);
  const double max_ext = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z});
  CHECK(max_ext == doctest::Approx(1.0).epsilon(1e-6));
  for (const Vec3& p : once.points) {
    CHECK(p.x >= -0.5 - 1e-9);
    CHECK(p.x <= 0.5 + 1e-9);
  }
  for (std::size_t i = 0; i < once.size(); ++i) {
    CHECK(norm(once.points[i] - twice.points[i]) < 1e-9);
  }
}

TEST_CASE("normalize_unit_cube inverse round trip") {
  PointCloud pc = random_cloud(100, 13, -3.0, 9.0);
  UnitCubeTransform tf;
  PointCloud out = normalize_unit_cube(pc, &tf);
  for (std::size_t i = 0; i < pc.size(); ++i)
    CHECK(norm(tf.inverse(out.points[i]) - pc.points[i]) < 1e-9);
}

TEST_CASE("normalize_unit_cube rejects zero extent") {
  PointCloud pc;
  pc.points = {{1, 1, 1}, {1, 1, 1}, {1, 1, 1}};
  CHECK_THROWS_WITH_AS(normalize_unit_cube(pc), doctest::Contains("zero extent"),
                       std::runtime_error);
  PointCloud single;
  single.points = {{1, 2, 3}};
  CHECK_THROWS_AS(normalize_unit_cube(single), std::runtime_error);
}

TEST_CASE("sample_mesh_surface uniform square") {
  TriMesh square;
  square.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};
  square.faces = {{0, 1, 2}, {0, 2, 3}};
  PointCloud pts = sample_mesh_surface(square, 100000, 3);
  Vec3 mean{};
  for (const Vec3& p : pts.points) mean += p;
  mean = mean / static_cast<double>(pts.size());
  CHECK(std::abs(mean.x - 0.5) < 0.01);
  CHECK(std::abs(mean.y - 0.5) < 0.01);
  CHECK(mean.z == 0.0);
}

TEST_CASE("sample_mesh_surface single point stays inside triangle") {
  TriMesh tri;
  tri.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  tri.faces = {{0, 1, 2}};
  PointCloud pts = sample_mesh_surface(tri, 1, 42);
  REQUIRE(pts.size() == 1);
  const Vec3 p = pts.points[0];
  CHECK(p.x >= 0.0);
  CHECK(p.y >= 0.0);
  CHECK(p.x + p.y <= 1.0 + 1e-12);
}

TEST_CASE("sample_mesh_surface area weighting 9:1") {
  TriMesh m;
  m.vertices = {{0, 0, 0}, {9, 0, 0}, {0, 2, 0},      // area 9
                {10, 0, 0}, {11, 0, 0}, {10, 2, 0}};  // area 1
  m.faces = {{0, 1, 2}, {3, 4, 5}};
  PointCloud pts = sample_mesh_surface(m, 100000, 5);
  std::size_t big = 0;
  for (const Vec3& p : pts.points)
    if (p.x < 9.5) ++big;
  const double ratio = static_cast<double>(big) / static_cast<double>(pts.size() - big);
  CHECK(ratio > 9.0 * 0.95);
  CHECK(ratio < 9.0 * 1.05);
}

TEST_CASE("sample_mesh_surface deterministic, zero area rejected") {
  TriMesh tri;
  tri.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  tri.faces = {{0, 1, 2}};
  PointCloud a = sample_mesh_surface(tri, 50, 9);
  PointCloud b = sample_mesh_surface(tri, 50, 9);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(norm(a.points[i] - b.points[i]) == 0.0);

  TriMesh degenerate;
  degenerate.vertices = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  degenerate.faces = {{0, 1, 2}};
  CHECK_THROWS_AS(sample_mesh_surface(degenerate, 5, 1), std::runtime_error);
}

TEST_CASE("fps cube corners") {
  PointCloud pc;
  for (int i = 0; i < 8; ++i)
    pc.points.push_back({double(i & 1), double((i >> 1) & 1), double((i >> 2) & 1)});
  std::vector<int> picks = farthest_point_sampling(pc, 2);
  CHECK(pc.points[picks[0]].x == 0.0);
  CHECK(pc.points[picks[0]].y == 0.0);
  CHECK(pc.points[picks[0]].z == 0.0);
  CHECK(pc.points[picks[1]].x == 1.0);
  CHECK(pc.points[picks[1]].y == 1.0);
  CHECK(pc.points[picks[1]].z == 1.0);
}

TEST_CASE("fps k equals n returns every index") {
  PointCloud pc = random_cloud(12, 5);
  std::vector<int> picks = farthest_point_sampling(pc, 12);
  std::set<int> unique(picks.begin(), picks.end());
  CHECK(unique.size() == 12);
}

TEST_CASE("fps matches brute-force reference") {
  for (uint64_t seed : {1, 2, 3, 4, 5}) {
    PointCloud pc = random_cloud(50, seed);
    CHECK(farthest_point_sampling(pc, 5) == ref_fps(pc, 5));
  }
}

TEST_CASE("fps rejects k greater than n") {
  PointCloud pc = random_cloud(4, 1);
  CHECK_THROWS_AS(farthest_point_sampling(pc, 5), std::runtime_error);
}

TEST_CASE("fps spreads better than random picks") {
  auto min_pairwise = [](const PointCloud& pc, const std::vector<int>& picks) {
    double best = 1e300;
    for (std::size_t i = 0; i < picks.size(); ++i)
      for (std::size_t j = i + 1; j < picks.size(); ++j)
        best = std::min(best, dist2(pc.points[picks[i]], pc.points[picks[j]]));
    return best;
  };
  int fps_wins = 0;
  for (uint64_t trial = 0; trial < 100; ++trial) {
    PointCloud pc = random_cloud(200, 1000 + trial);
    std::vector<int> fps = farthest_point_sampling(pc, 8);
    Rng rng(55 + trial);
    std::vector<int> all(200);
    for (int i = 0; i < 200; ++i) all[i] = i;
    rng.shuffle(all);
    std::vector<int> random_picks(all.begin(), all.begin() + 8);
    if (min_pairwise(pc, fps) >= min_pairwise(pc, random_picks)) ++fps_wins;
  }
  CHECK(fps_wins >= 99);
}

TEST_CASE("chamfer basic identities") {
  PointCloud x = random_cloud(30, 11);
  CHECK(chamfer_distance(x, x) == 0.0);

  PointCloud a, b;
  a.points = {{0, 0, 0}};
  b.points = {{1, 0, 0}};
  CHECK(chamfer_distance(a, b) == doctest::Approx(2.0).epsilon(1e-15));

  PointCloud c;
  c.points = {{0, 0, 0}, {1, 0, 0}};
  CHECK(unilateral_chamfer(c, b) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("chamfer matches brute force and symmetry") {
  for (uint64_t seed : {21, 22, 23}) {
    PointCloud a = random_cloud(20, seed);
    PointCloud b = random_cloud(20, seed + 100);
    const double cd = chamfer_distance(a, b);
    CHECK(std::abs(cd - (ref_ucd(a, b) + ref_ucd(b, a))) < 1e-12);
    CHECK(cd == chamfer_distance(b, a));
    CHECK(std::abs(cd - (unilateral_chamfer(a, b) + unilateral_chamfer(b, a))) == 0.0);
  }
}

TEST_CASE("chamfer rejects empty clouds") {
  PointCloud a = random_cloud(3, 1), empty;
  CHECK_THROWS_AS(chamfer_distance(a, empty), std::runtime_error);
  CHECK_THROWS_AS(unilateral_chamfer(empty, a), std::runtime_error);
}

TEST_CASE("ucd of subset is zero") {
  PointCloud pc = random_cloud(64, 77);
  for (double gamma : {0.25, 0.5, 0.75}) {
    PointCloud sliced = random_slice(pc, gamma, 5);
    CHECK(unilateral_chamfer(sliced, pc) == 0.0);
  }
}

TEST_CASE("random_slice counts and membership") {
  PointCloud pc = random_cloud(2048, 4);
  PointCloud out = random_slice(pc, 0.5, 9);
  CHECK(out.size() == 1024);
  std::set<std::array<double, 3>> originals;
  for (const Vec3& p : pc.points) originals.insert({p.x, p.y, p.z});
  for (const Vec3& p : out.points) CHECK(originals.count({p.x, p.y, p.z}) == 1);

  PointCloud same = random_slice(pc, 0.0, 123);
  CHECK(same.size() == pc.size());
  CHECK_THROWS_AS(random_slice(pc, 1.0, 1), std::runtime_error);

  PointCloud a = random_slice(pc, 0.3, 42);
  PointCloud b = random_slice(pc, 0.3, 42);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(norm(a.points[i] - b.points[i]) == 0.0);
}

TEST_CASE("region_query membership") {
  PointCloud pc;
  pc.points = {{0, 0, 0}, {0.1, 0, 0}, {5, 5, 5}};
  Keypoints centers = {{0, 0, 0}, {-3, -3, -3}};
  RegionAssignment regions = region_query(pc, centers, 0.3, 10.0);
  CHECK(regions.members[0] == std::vector<int>{0, 1});
  CHECK(regions.members[1].empty());
  CHECK(regions.density[1] == 0.0);
  CHECK(regions.density[0] == doctest::Approx(0.2));
  CHECK(regions.nearest[1] == 0);
}

TEST_CASE("region_query equals brute force and permutation invariance") {
  PointCloud pc = random_cloud(30, 31, -0.5, 0.5);
  Keypoints centers;
  Rng rng(8);
  for (int i = 0; i < 4; ++i)
    centers.push_back({rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)});
  const double r = 0.3;
  RegionAssignment regions = region_query(pc, centers, r, 5.0);
  for (std::size_t c = 0; c < centers.size(); ++c) {
    std::vector<int> expect;
    for (std::size_t i = 0; i < pc.size(); ++i)
      if (dist2(pc.points[i], centers[c]) <= r * r) expect.push_back(static_cast<int>(i));
    CHECK(regions.members[c] == expect);
  }

  // permute input points; membership must map through the permutation
  std::vector<int> perm(pc.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  Rng prng(99);
  prng.shuffle(perm);
  PointCloud shuffled;
  shuffled.points.resize(pc.size());
  for (std::size_t i = 0; i < pc.size(); ++i) shuffled.points[perm[i]] = pc.points[i];
  RegionAssignment shuffled_regions = region_query(shuffled, centers, r, 5.0);
  for (std::size_t c = 0; c < centers.size(); ++c) {
    std::set<int> mapped;
    for (int idx : regions.members[c]) mapped.insert(perm[idx]);
    std::set<int> got(shuffled_regions.members[c].begin(), shuffled_regions.members[c].end());
    CHECK(mapped == got);
  }
}

TEST_CASE("region_density clipping") {
  CHECK(region_density(10, 10.0) == 1.0);
  CHECK(region_density(0, 10.0) == 0.0);
  CHECK(region_density(5, 10.0) == 0.5);
  CHECK(region_density(25, 10.0) == 1.0);
  CHECK_THROWS_AS(region_density(1, 0.0), std::runtime_error);
}

TEST_CASE("watertight and mesh validation") {
  TriMesh box;
  box.vertices = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                  {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
  box.faces = {{0, 2, 1}, {0, 3, 2}, {4, 5, 6}, {4, 6, 7}, {0, 1, 5}, {0, 5, 4},
               {2, 3, 7}, {2, 7, 6}, {0, 4, 7}, {0, 7, 3}, {1, 2, 6}, {1, 6, 5}};
  CHECK(is_watertight(box));
  validate_mesh(box);

  TriMesh open = box;
  open.faces.pop_back();
  CHECK_FALSE(is_watertight(open));

  TriMesh bad = box;
  bad.faces.push_back({0, 1, 99});
  CHECK_THROWS_AS(validate_mesh(bad), std::runtime_error);
}
