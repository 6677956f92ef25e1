#include "kpred/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

#include "kpred/rng.hpp"

namespace kpred {

PointCloud normalize_unit_cube(const PointCloud& pc, UnitCubeTransform* tf) {
  if (pc.size() < 2) throw std::runtime_error("normalize_unit_cube: zero extent");
  Vec3 lo, hi;
  bounding_box(pc.points, &lo, &hi);
  const Vec3 ext = hi - lo;
  const double max_ext = std::max({ext.x, ext.y, ext.z});
  if (!(max_ext > 1e-12)) throw std::runtime_error("normalize_unit_cube: zero extent");

  UnitCubeTransform t;
  t.center = (lo + hi) * 0.5;
  t.scale = 1.0 / max_ext;
  PointCloud out;
  out.points.reserve(pc.size());
  for (const Vec3& p : pc.points) out.points.push_back(t.forward(p));
  if (tf) *tf = t;
  return out;
}

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * norm(cross(b - a, c - a));
}

double mesh_area(const TriMesh& mesh) {
  double total = 0.0;
  for (const auto& f : mesh.faces)
    total += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
  return total;
}

PointCloud sample_mesh_surface(const TriMesh& mesh, std::size_t n, uint64_t seed) {
  validate_mesh(mesh);
  std::vector<double> cum(mesh.faces.size());
  double total = 0.0;
  for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
    const auto& f = mesh.faces[i];
    total += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    cum[i] = total;
  }
  if (!(total > 0.0)) throw std::runtime_error("sample_mesh_surface: zero total area");

  Rng rng(seed);
  PointCloud out;
  out.points.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double u = rng.uniform() * total;
    const std::size_t t =
        std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
    const auto& f = mesh.faces[std::min(t, mesh.faces.size() - 1)];
    double r1 = rng.uniform(), r2 = rng.uniform();
    if (r1 + r2 > 1.0) {
      r1 = 1.0 - r1;
      r2 = 1.0 - r2;
    }
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    out.points.push_back(a + (b - a) * r1 + (c - a) * r2);
  }
  return out;
}

namespace {

bool lex_less(const Vec3& a, const Vec3& b) {
  if (a.x != b.x) return a.x < b.x;
  if (a.y != b.y) return a.y < b.y;
  return a.z < b.z;
}

}  // namespace

std::vector<int> farthest_point_sampling(const PointCloud& pc, std::size_t k,
                                         uint64_t seed, bool random_start) {
  const std::size_t n = pc.size();
  if (k > n) throw std::runtime_error("farthest_point_sampling: k exceeds point count");
  std::vector<int> picks;
  if (k == 0) return picks;
  picks.reserve(k);

  std::size_t start = 0;
  if (random_start) {
    start = Rng(seed).index(n);
  } else {
    for (std::size_t i = 1; i < n; ++i)
      if (lex_less(pc.points[i], pc.points[start])) start = i;
  }
  picks.push_back(static_cast<int>(start));

  std::vector<double> min_d2(n);
  for (std::size_t i = 0; i < n; ++i) min_d2[i] = dist2(pc.points[i], pc.points[start]);

  while (picks.size() < k) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d2[i] > best_d) {
        best_d = min_d2[i];
        best = i;
      }
    }
    picks.push_back(static_cast<int>(best));
    for (std::size_t i = 0; i < n; ++i)
      min_d2[i] = std::min(min_d2[i], dist2(pc.points[i], pc.points[best]));
  }
  return picks;
}

double unilateral_chamfer(const PointCloud& from, const PointCloud& to) {
  if (from.empty() || to.empty())
    throw std::runtime_error("unilateral_chamfer: empty point cloud");
  double acc = 0.0;
  for (const Vec3& p : from.points) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& q : to.points) {
      const double d = dist2(p, q);
      if (d < best) best = d;
    }
    acc += best;
  }
  return acc / static_cast<double>(from.size());
}

double chamfer_distance(const PointCloud& a, const PointCloud& b) {
  return unilateral_chamfer(a, b) + unilateral_chamfer(b, a);
}

PointCloud random_slice(const PointCloud& pc, double gamma, uint64_t seed) {
  if (!(gamma >= 0.0) || gamma >= 1.0)
    throw std::runtime_error("random_slice: occlusion ratio must lie in [0,1)");
  const std::size_t n = pc.size();
  const std::size_t m =
      static_cast<std::size_t>(std::ceil(gamma * static_cast<double>(n)));
  if (m >= n && m > 0) throw std::runtime_error("random_slice: slice would remove every point");
  if (m == 0) return pc;

  Rng rng(seed);
  const double z = rng.uniform(-1.0, 1.0);
  const double phi = rng.uniform(0.0, 2.0 * M_PI);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  const Vec3 normal{r * std::cos(phi), r * std::sin(phi), z};

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<double> proj(n);
  for (std::size_t i = 0; i < n; ++i) proj[i] = dot(pc.points[i], normal);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (proj[a] != proj[b]) return proj[a] > proj[b];
    return a < b;
  });

  std::vector<char> removed(n, 0);
  for (std::size_t i = 0; i < m; ++i) removed[order[i]] = 1;
  PointCloud out;
  out.points.reserve(n - m);
  for (std::size_t i = 0; i < n; ++i)
    if (!removed[i]) out.points.push_back(pc.points[i]);
  return out;
}

double region_density(std::size_t count, double n_ref) {
  if (!(n_ref > 0.0)) throw std::runtime_error("region_density: reference count must be positive");
  return std::min(static_cast<double>(count) / n_ref, 1.0);
}

RegionAssignment region_query(const PointCloud& pc, const Keypoints& centers,
                              double radius, double n_ref) {
  if (!(radius > 0.0)) throw std::runtime_error("region_query: radius must be positive");
  const double r2 = radius * radius;
  RegionAssignment out;
  out.members.resize(centers.size());
  out.nearest.resize(centers.size(), -1);
  out.density.resize(centers.size(), 0.0);
  for (std::size_t c = 0; c < centers.size(); ++c) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < pc.size(); ++i) {
      const double d = dist2(pc.points[i], centers[c]);
      if (d <= r2) out.members[c].push_back(static_cast<int>(i));
      if (d < best) {
        best = d;
        out.nearest[c] = static_cast<int>(i);
      }
    }
    out.density[c] = region_density(out.members[c].size(), n_ref);
  }
  return out;
}

bool is_watertight(const TriMesh& mesh) {
  std::map<std::pair<int, int>, int> edge_count;
  for (const auto& f : mesh.faces) {
    for (int e = 0; e < 3; ++e) {
      int a = f[e], b = f[(e + 1) % 3];
      if (a > b) std::swap(a, b);
      ++edge_count[{a, b}];
    }
  }
  for (const auto& [edge, count] : edge_count)
    if (count != 2) return false;
  return !mesh.faces.empty();
}

void validate_mesh(const TriMesh& mesh) {
  const int nv = static_cast<int>(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.faces.size(); ++i) {
    const auto& f = mesh.faces[i];
    for (int e = 0; e < 3; ++e)
      if (f[e] < 0 || f[e] >= nv)
        throw std::runtime_error("mesh face " + std::to_string(i) + ": vertex index out of range");
    if (triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]) <= 1e-12)
      throw std::runtime_error("mesh face " + std::to_string(i) + ": degenerate triangle");
  }
}

void bounding_box(const std::vector<Vec3>& pts, Vec3* lo, Vec3* hi) {
  if (pts.empty()) throw std::runtime_error("bounding_box: empty point set");
  Vec3 l = pts[0], h = pts[0];
  for (const Vec3& p : pts) {
    l.x = std::min(l.x, p.x);
    l.y = std::min(l.y, p.y);
    l.z = std::min(l.z, p.z);
    h.x = std::max(h.x, p.x);
    h.y = std::max(h.y, p.y);
    h.z = std::max(h.z, p.z);
  }
  *lo = l;
  *hi = h;
}

}  // namespace kpred
