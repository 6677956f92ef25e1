#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "kpred/cage.hpp"
#include "kpred/geometry.hpp"
#include "kpred/rng.hpp"

using namespace kpred;

namespace {

PointCloud random_interior(const Cage& cage, std::size_t n, uint64_t seed) {
  // rejection sample inside the cage via the half-space test
  Vec3 lo, hi;
  bounding_box(cage.mesh.vertices, &lo, &hi);
  Rng rng(seed);
  PointCloud out;
  PointCloud one;
  one.points.resize(1);
  while (out.size() < n) {
    one.points[0] = {rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y), rng.uniform(lo.z, hi.z)};
    if (encloses(cage.mesh, one, 1e-4)) out.points.push_back(one.points[0]);
  }
  return out;
}

PointCloud random_cloud(std::size_t n, uint64_t seed) {
  Rng rng(seed);
  PointCloud pc;
  for (std::size_t i = 0; i < n; ++i)
    pc.points.push_back({rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3)});
  return pc;
}

}  // namespace

TEST_CASE("cage templates have the advertised sizes and orientation") {
  for (auto t : {CageTemplate::Icosphere0, CageTemplate::Icosphere1, CageTemplate::Box2}) {
    TriMesh m = make_cage_template(t);
    CHECK(static_cast<int>(m.vertices.size()) == cage_template_vertex_count(t));
    CHECK(is_watertight(m));
    CHECK(is_convex(m));
    validate_mesh(m);
    // outward orientation: the centroid lies strictly inside every face plane
    Vec3 centroid{};
    for (const Vec3& v : m.vertices) centroid += v;
    centroid = centroid / static_cast<double>(m.vertices.size());
    for (const auto& f : m.faces) {
      const Vec3 a = m.vertices[f[0]];
      Vec3 n = cross(m.vertices[f[1]] - a, m.vertices[f[2]] - a);
      CHECK(dot(n, centroid - a) < 0.0);
    }
  }
  CHECK(make_cage_template(CageTemplate::Icosphere1).faces.size() == 80);
  CHECK(make_cage_template(CageTemplate::Box2).faces.size() == 48);
}

TEST_CASE("build_cage encloses the unit cube corners") {
  PointCloud pc;
  for (int i = 0; i < 8; ++i)
    pc.points.push_back({(i & 1) - 0.5, ((i >> 1) & 1) - 0.5, ((i >> 2) & 1) - 0.5});
  Cage cage = build_cage(pc, CageTemplate::Icosphere1, 1.2);
  CHECK(encloses(cage.mesh, pc));
  CHECK(is_convex(cage.mesh));

  Cage again = build_cage(pc, CageTemplate::Icosphere1, 1.2);
  REQUIRE(again.mesh.vertices.size() == cage.mesh.vertices.size());
  for (std::size_t i = 0; i < cage.mesh.vertices.size(); ++i)
    CHECK(norm(cage.mesh.vertices[i] - again.mesh.vertices[i]) == 0.0);
}

TEST_CASE("build_cage passes the half-space oracle on a synthetic cloud") {
  PointCloud pc = random_cloud(500, 17);
  for (auto tpl : {CageTemplate::Icosphere1, CageTemplate::Box2}) {
    Cage cage = build_cage(pc, tpl, 1.2);
    // oracle: explicit per-face half-space check
    for (const auto& f : cage.mesh.faces) {
      const Vec3 a = cage.mesh.vertices[f[0]];
      Vec3 n = cross(cage.mesh.vertices[f[1]] - a, cage.mesh.vertices[f[2]] - a);
      n = n / norm(n);
      for (const Vec3& p : pc.points) CHECK(dot(n, p - a) < -1e-6);
    }
  }
}

TEST_CASE("build_cage rejects non-finite input") {
  PointCloud pc = random_cloud(10, 3);
  pc.points[4].y = std::nan("");
  CHECK_THROWS_AS(build_cage(pc), std::runtime_error);
}

TEST_CASE("build_cage gives up after 20 inflation steps") {
  PointCloud pc = random_cloud(30, 6);
  // a margin this small cannot reach enclosure even after 1.05^20 inflation
  CHECK_THROWS_WITH_AS(build_cage(pc, CageTemplate::Icosphere1, 0.01),
                       doctest::Contains("20 inflation steps"), std::runtime_error);
}

TEST_CASE("mvc vertex snap and tetrahedron centroid") {
  TriMesh tet;
  tet.vertices = {{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}};
  tet.faces = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
  CHECK(is_watertight(tet));

  std::vector<double> snap = mean_value_coordinates(tet.vertices[2], tet);
  CHECK(snap[2] == 1.0);
  CHECK(snap[0] == 0.0);

  std::vector<double> centroid = mean_value_coordinates({0, 0, 0}, tet);
  for (double w : centroid) CHECK(std::abs(w - 0.25) < 1e-9);
}

TEST_CASE("mvc face fallback uses barycentric weights") {
  TriMesh tet;
  tet.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  tet.faces = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
  // point on the z = 0 face, inside triangle (0, 2, 1)
  std::vector<double> w = mean_value_coordinates({0.25, 0.25, 0.0}, tet);
  CHECK(w[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(w[1] == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(w[2] == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(w[3] == 0.0);
}

TEST_CASE("mvc partition of unity and linear precision on random cages") {
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    PointCloud pc = random_cloud(60, 300 + trial);
    Cage cage = build_cage(pc, trial % 2 ? CageTemplate::Icosphere1 : CageTemplate::Box2, 1.25);
    PointCloud queries = random_interior(cage, 50, 900 + trial);
    for (const Vec3& x : queries.points) {
      std::vector<double> w = mean_value_coordinates(x, cage.mesh);
      double sum = 0.0;
      Vec3 recon{};
      for (std::size_t j = 0; j < w.size(); ++j) {
        sum += w[j];
        recon += cage.mesh.vertices[j] * w[j];
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
      CHECK(norm(recon - x) < 1e-5);
      for (double v : w) CHECK(v >= -1e-9);  // non-negative inside a convex cage
    }
  }
}

TEST_CASE("mvc_matrix reproduces the cloud and respects cage translation/scale") {
  PointCloud pc = random_cloud(50, 5);
  Cage cage = build_cage(pc, CageTemplate::Icosphere1, 1.2);
  MvcWeights w = mvc_matrix(pc, cage);

  // reproduction
  std::vector<Vec3> same = apply_cage(w, cage.mesh.vertices);
  for (std::size_t i = 0; i < pc.size(); ++i) CHECK(norm(same[i] - pc.points[i]) < 1e-5);

  // translation: moving every cage vertex by t moves every point by t
  const Vec3 t{0.3, -0.2, 0.15};
  std::vector<Vec3> moved = cage.mesh.vertices;
  for (Vec3& v : moved) v += t;
  std::vector<Vec3> out = apply_cage(w, moved);
  for (std::size_t i = 0; i < pc.size(); ++i)
    CHECK(norm(out[i] - (pc.points[i] + t)) < 1e-6);

  // uniform scale about the origin scales reconstructed points
  std::vector<Vec3> scaled = cage.mesh.vertices;
  for (Vec3& v : scaled) v = v * 1.7;
  std::vector<Vec3> out2 = apply_cage(w, scaled);
  for (std::size_t i = 0; i < pc.size(); ++i)
    CHECK(norm(out2[i] - pc.points[i] * 1.7) < 1e-6);
}

TEST_CASE("influence mask covers every cage vertex") {
  PointCloud pc = random_cloud(100, 8);
  Cage cage = build_cage(pc, CageTemplate::Icosphere1, 1.2);
  Keypoints kp = {{0.1, 0, 0}, {-0.1, 0, 0}, {0, 0.2, 0}};
  std::vector<uint8_t> mask = build_influence_mask(cage.mesh.vertices, kp, 0.3);
  const std::size_t nc = cage.vertex_count();
  for (std::size_t j = 0; j < nc; ++j) {
    bool covered = false;
    for (std::size_t i = 0; i < kp.size(); ++i) covered = covered || mask[i * nc + j];
    CHECK(covered);
  }
  // vertices within the radius are assigned to the keypoint's region
  for (std::size_t j = 0; j < nc; ++j)
    for (std::size_t i = 0; i < kp.size(); ++i)
      if (norm(cage.mesh.vertices[j] - kp[i]) <= 0.3) CHECK(mask[i * nc + j] == 1);
}

TEST_CASE("deform_cage identity, translation and brute-force oracle") {
  PointCloud pc = random_cloud(80, 21);
  Cage cage = build_cage(pc, CageTemplate::Icosphere1, 1.2);
  const std::size_t nc = cage.vertex_count();
  Keypoints k_src = {{0.2, 0, 0}, {-0.2, 0.1, 0}, {0, -0.1, 0.2}};
  const std::size_t nk = k_src.size();

  InfluenceField inf;
  inf.n_keypoints = nk;
  inf.n_cage_vertices = nc;
  inf.mask = build_influence_mask(cage.mesh.vertices, k_src, 0.3);
  inf.values.assign(nk * nc, 0.0);
  Rng rng(77);
  for (std::size_t i = 0; i < nk * nc; ++i)
    if (inf.mask[i]) inf.values[i] = rng.uniform(-0.5, 0.5);

  // identity: zero keypoint displacement leaves the cage untouched
  std::vector<Vec3> same = deform_cage(cage, k_src, k_src, inf);
  for (std::size_t j = 0; j < nc; ++j) CHECK(norm(same[j] - cage.mesh.vertices[j]) == 0.0);

  // single keypoint with unit influence everywhere translates the cage
  InfluenceField ones;
  ones.n_keypoints = 1;
  ones.n_cage_vertices = nc;
  ones.values.assign(nc, 1.0);
  ones.mask.assign(nc, 1);
  const Vec3 delta{0.05, -0.03, 0.08};
  std::vector<Vec3> moved =
      deform_cage(cage, {Vec3{0, 0, 0}}, {delta}, ones);
  for (std::size_t j = 0; j < nc; ++j)
    CHECK(norm(moved[j] - (cage.mesh.vertices[j] + delta)) < 1e-12);

  // brute-force double loop over (keypoint, vertex)
  Keypoints k_tgt = k_src;
  k_tgt[0] += Vec3{0.07, 0.02, -0.04};
  k_tgt[2] += Vec3{-0.01, 0.06, 0.05};
  std::vector<Vec3> deformed = deform_cage(cage, k_src, k_tgt, inf);
  for (std::size_t j = 0; j < nc; ++j) {
    Vec3 expected = cage.mesh.vertices[j];
    for (std::size_t i = 0; i < nk; ++i)
      expected += (k_tgt[i] - k_src[i]) * inf.values[i * nc + j];
    CHECK(norm(deformed[j] - expected) < 1e-12);
  }

  // mask enforcement: perturbing a keypoint leaves unmasked vertices untouched
  Keypoints k_tgt2 = k_src;
  k_tgt2[1] += Vec3{0.3, 0.3, 0.3};
  std::vector<Vec3> d2 = deform_cage(cage, k_src, k_tgt2, inf);
  for (std::size_t j = 0; j < nc; ++j)
    if (!inf.mask[1 * nc + j]) CHECK(norm(d2[j] - cage.mesh.vertices[j]) == 0.0);
}

TEST_CASE("apply_cage matches the direct weighted sum") {
  PointCloud pc = random_cloud(60, 33);
  Cage cage = build_cage(pc, CageTemplate::Icosphere1, 1.2);
  MvcWeights w = mvc_matrix(pc, cage);
  Rng rng(3);
  std::vector<Vec3> deformed = cage.mesh.vertices;
  for (Vec3& v : deformed) v += Vec3{rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)};
  PointCloud out = apply_cage(pc, w, deformed);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    Vec3 expected{};
    for (std::size_t j = 0; j < w.cols; ++j) expected += deformed[j] * w.at(i, j);
    CHECK(norm(out.points[i] - expected) < 1e-12);
  }
}

TEST_CASE("end-to-end identity and midpoint linearity") {
  PointCloud pc = random_cloud(120, 44);
  Cage cage = build_cage(pc, CageTemplate::Icosphere1, 1.2);
  MvcWeights w = mvc_matrix(pc, cage);
  Keypoints k_src = {{0.2, 0.1, 0}, {-0.2, 0, 0.1}, {0, -0.15, -0.1}, {0.1, 0.2, 0.15}};
  InfluenceField inf;
  inf.n_keypoints = k_src.size();
  inf.n_cage_vertices = cage.vertex_count();
  inf.mask = build_influence_mask(cage.mesh.vertices, k_src, 0.3);
  inf.values.assign(inf.mask.size(), 0.0);
  Rng rng(9);
  for (std::size_t i = 0; i < inf.values.size(); ++i)
    if (inf.mask[i]) inf.values[i] = rng.uniform(-0.4, 0.4);

  // K_tgt = K_src reproduces the shape
  PointCloud same = apply_cage(pc, w, deform_cage(cage, k_src, k_src, inf));
  for (std::size_t i = 0; i < pc.size(); ++i) {
    CHECK(std::abs(same.points[i].x - pc.points[i].x) < 1e-5);
    CHECK(std::abs(same.points[i].y - pc.points[i].y) < 1e-5);
    CHECK(std::abs(same.points[i].z - pc.points[i].z) < 1e-5);
  }

  // midpoint consistency: result(alpha=0.5) = average of endpoints
  Keypoints k_delta = k_src;
  k_delta[0] += Vec3{0.2, -0.1, 0.05};
  k_delta[2] += Vec3{-0.05, 0.08, 0.1};
  Keypoints k_mid = k_src;
  for (std::size_t i = 0; i < k_src.size(); ++i)
    k_mid[i] = (k_src[i] + k_delta[i]) * 0.5;

  PointCloud at0 = apply_cage(pc, w, deform_cage(cage, k_src, k_src, inf));
  PointCloud at1 = apply_cage(pc, w, deform_cage(cage, k_src, k_delta, inf));
  PointCloud at_half = apply_cage(pc, w, deform_cage(cage, k_src, k_mid, inf));
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const Vec3 expect = (at0.points[i] + at1.points[i]) * 0.5;
    CHECK(norm(at_half.points[i] - expect) < 1e-9);
  }
}

TEST_CASE("deform_cage dimension mismatch") {
  PointCloud pc = random_cloud(20, 2);
  Cage cage = build_cage(pc, CageTemplate::Icosphere0, 1.2);
  InfluenceField inf;
  inf.n_keypoints = 2;
  inf.n_cage_vertices = 5;  // wrong
  inf.values.assign(10, 0.0);
  inf.mask.assign(10, 1);
  CHECK_THROWS_AS(deform_cage(cage, {{0, 0, 0}, {1, 1, 1}}, {{0, 0, 0}, {1, 1, 1}}, inf),
                  std::runtime_error);
}

TEST_CASE("self-intersection diagnostic") {
  TriMesh tet;
  tet.vertices = {{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}};
  tet.faces = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
  CHECK_FALSE(cage_self_intersects(tet, tet.vertices));
}
