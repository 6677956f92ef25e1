#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace kpred {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  double operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
  double& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm2(const Vec3& a) { return dot(a, a); }
inline double norm(const Vec3& a) { return std::sqrt(norm2(a)); }

// Squared distance, fixed evaluation order so independent implementations can
// be compared bit-for-bit.
inline double dist2(const Vec3& a, const Vec3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return (dx * dx + dy * dy) + dz * dz;
}

struct PointCloud {
  std::vector<Vec3> points;
  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
};

// N_K semantic control points.
using Keypoints = std::vector<Vec3>;

// Affine record of normalize_unit_cube; forward(p) is the normalization,
// inverse(forward(p)) == p up to rounding.
struct UnitCubeTransform {
  Vec3 center;
  double scale = 1.0;  // 1 / longest extent
  Vec3 forward(const Vec3& p) const { return (p - center) * scale; }
  Vec3 inverse(const Vec3& q) const { return q * (1.0 / scale) + center; }
};

// Centers the bounding box at the origin and scales the longest extent to 1.
// Throws on degenerate input ("zero extent").
PointCloud normalize_unit_cube(const PointCloud& pc, UnitCubeTransform* tf = nullptr);

// Area-weighted uniform surface sampling, deterministic per seed.
PointCloud sample_mesh_surface(const TriMesh& mesh, std::size_t n, uint64_t seed);

// Farthest point sampling. The start point is the lexicographically smallest
// point unless random_start is set, so results are reproducible without a
// seed. Ties on distance break toward the lowest index.
std::vector<int> farthest_point_sampling(const PointCloud& pc, std::size_t k,
                                         uint64_t seed = 0, bool random_start = false);

// Bilateral Chamfer distance: mean squared nearest-neighbor distance in both
// directions. Unilateral takes only the from->to direction, so
// chamfer(a,b) == ucd(a,b) + ucd(b,a) exactly.
double chamfer_distance(const PointCloud& a, const PointCloud& b);
double unilateral_chamfer(const PointCloud& from, const PointCloud& to);

// Removes the ceil(gamma*N) points with the largest projection onto a random
// plane normal; survivors keep their input order.
PointCloud random_slice(const PointCloud& pc, double gamma, uint64_t seed);

struct RegionAssignment {
  std::vector<std::vector<int>> members;  // per center, ascending point indices with dist <= r
  std::vector<int> nearest;               // nearest point per center (empty-region fallback)
  std::vector<double> density;            // D_i = min(count / n_ref, 1)
};

RegionAssignment region_query(const PointCloud& pc, const Keypoints& centers,
                              double radius, double n_ref);
double region_density(std::size_t count, double n_ref);

// ---- mesh helpers ----

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c);
double mesh_area(const TriMesh& mesh);
// Every undirected edge shared by exactly two faces.
bool is_watertight(const TriMesh& mesh);
// Index bounds and per-face area checks; throws naming the violation.
void validate_mesh(const TriMesh& mesh);
void bounding_box(const std::vector<Vec3>& pts, Vec3* lo, Vec3* hi);

}  // namespace kpred
