#include "kpred/cage.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

namespace kpred {

namespace {

TriMesh make_icosahedron() {
  const double p = (1.0 + std::sqrt(5.0)) / 2.0;
  TriMesh m;
  m.vertices = {{-1, p, 0}, {1, p, 0},   {-1, -p, 0}, {1, -p, 0},
                {0, -1, p}, {0, 1, p},   {0, -1, -p}, {0, 1, -p},
                {p, 0, -1}, {p, 0, 1},   {-p, 0, -1}, {-p, 0, 1}};
  for (Vec3& v : m.vertices) v = v / norm(v);
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
             {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
             {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
             {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  return m;
}

TriMesh subdivide_on_sphere(const TriMesh& in) {
  TriMesh out;
  out.vertices = in.vertices;
  std::map<std::pair<int, int>, int> midpoint;
  auto mid = [&](int a, int b) {
    auto key = std::minmax(a, b);
    auto it = midpoint.find(key);
    if (it != midpoint.end()) return it->second;
    Vec3 v = (out.vertices[a] + out.vertices[b]) * 0.5;
    v = v / norm(v);
    out.vertices.push_back(v);
    int idx = static_cast<int>(out.vertices.size()) - 1;
    midpoint[key] = idx;
    return idx;
  };
  for (const auto& f : in.faces) {
    int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
    out.faces.push_back({f[0], ab, ca});
    out.faces.push_back({f[1], bc, ab});
    out.faces.push_back({f[2], ca, bc});
    out.faces.push_back({ab, bc, ca});
  }
  return out;
}

// 3x3 grid on each cube face; 26 vertices, 48 triangles, half-extent 1.
TriMesh make_box2() {
  TriMesh m;
  std::map<std::array<int, 3>, int> index;
  auto vertex = [&](int i, int j, int k) {
    std::array<int, 3> key{i, j, k};
    auto it = index.find(key);
    if (it != index.end()) return it->second;
    m.vertices.push_back({i - 1.0, j - 1.0, k - 1.0});
    int idx = static_cast<int>(m.vertices.size()) - 1;
    index[key] = idx;
    return idx;
  };
  // axis = coordinate held fixed at side (0 or 2); (u, v) sweep the face.
  auto emit_face = [&](int axis, int side) {
    auto grid_vertex = [&](int u, int v) {
      int c[3];
      c[axis] = side;
      c[(axis + 1) % 3] = u;
      c[(axis + 2) % 3] = v;
      return vertex(c[0], c[1], c[2]);
    };
    const bool flip = (side == 0);
    for (int u = 0; u < 2; ++u) {
      for (int v = 0; v < 2; ++v) {
        int a = grid_vertex(u, v), b = grid_vertex(u + 1, v);
        int c = grid_vertex(u + 1, v + 1), d = grid_vertex(u, v + 1);
        if (flip) {
          m.faces.push_back({a, c, b});
          m.faces.push_back({a, d, c});
        } else {
          m.faces.push_back({a, b, c});
          m.faces.push_back({a, c, d});
        }
      }
    }
  };
  for (int axis = 0; axis < 3; ++axis) {
    emit_face(axis, 2);
    emit_face(axis, 0);
  }
  return m;
}

void orient_outward(TriMesh& m) {
  Vec3 centroid{};
  for (const Vec3& v : m.vertices) centroid += v;
  centroid = centroid / static_cast<double>(m.vertices.size());
  for (auto& f : m.faces) {
    const Vec3 a = m.vertices[f[0]], b = m.vertices[f[1]], c = m.vertices[f[2]];
    const Vec3 n = cross(b - a, c - a);
    const Vec3 face_center = (a + b + c) / 3.0;
    if (dot(n, face_center - centroid) < 0.0) std::swap(f[1], f[2]);
  }
}

}  // namespace

CageTemplate cage_template_from_string(const std::string& name) {
  if (name == "icosphere0") return CageTemplate::Icosphere0;
  if (name == "icosphere1") return CageTemplate::Icosphere1;
  if (name == "box2") return CageTemplate::Box2;
  throw std::runtime_error("unknown cage template '" + name + "'");
}

std::string cage_template_name(CageTemplate t) {
  switch (t) {
    case CageTemplate::Icosphere0: return "icosphere0";
    case CageTemplate::Icosphere1: return "icosphere1";
    case CageTemplate::Box2: return "box2";
  }
  throw std::runtime_error("bad cage template");
}

int cage_template_vertex_count(CageTemplate t) {
  switch (t) {
    case CageTemplate::Icosphere0: return 12;
    case CageTemplate::Icosphere1: return 42;
    case CageTemplate::Box2: return 26;
  }
  throw std::runtime_error("bad cage template");
}

TriMesh make_cage_template(CageTemplate t) {
  TriMesh m;
  switch (t) {
    case CageTemplate::Icosphere0: m = make_icosahedron(); break;
    case CageTemplate::Icosphere1: m = subdivide_on_sphere(make_icosahedron()); break;
    case CageTemplate::Box2: m = make_box2(); break;
  }
  orient_outward(m);
  return m;
}

bool is_convex(const TriMesh& mesh, double tol) {
  for (const auto& f : mesh.faces) {
    const Vec3 a = mesh.vertices[f[0]];
    Vec3 n = cross(mesh.vertices[f[1]] - a, mesh.vertices[f[2]] - a);
    const double len = norm(n);
    if (len <= 0.0) return false;
    n = n / len;
    for (const Vec3& v : mesh.vertices)
      if (dot(n, v - a) > tol) return false;
  }
  return true;
}

bool encloses(const TriMesh& cage, const PointCloud& pc, double clearance) {
  for (const auto& f : cage.faces) {
    const Vec3 a = cage.vertices[f[0]];
    Vec3 n = cross(cage.vertices[f[1]] - a, cage.vertices[f[2]] - a);
    n = n / norm(n);
    for (const Vec3& p : pc.points)
      if (dot(n, p - a) >= -clearance) return false;
  }
  return true;
}

Cage build_cage(const PointCloud& pc, CageTemplate tpl, double margin) {
  if (pc.empty()) throw std::runtime_error("build_cage: empty point cloud");
  for (const Vec3& p : pc.points)
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw std::runtime_error("build_cage: non-finite input point");

  Vec3 lo, hi;
  bounding_box(pc.points, &lo, &hi);
  const Vec3 center = (lo + hi) * 0.5;
  Vec3 half = (hi - lo) * 0.5;
  const double max_half = std::max({half.x, half.y, half.z, 1e-3});
  // Flat shapes would collapse the cage on an axis; keep a minimum thickness.
  half.x = std::max(half.x, 0.025 * max_half);
  half.y = std::max(half.y, 0.025 * max_half);
  half.z = std::max(half.z, 0.025 * max_half);

  const TriMesh tpl_mesh = make_cage_template(tpl);
  double inflate = margin;
  for (int step = 0; step < 20; ++step) {
    Cage cage;
    cage.mesh.faces = tpl_mesh.faces;
    cage.mesh.vertices.reserve(tpl_mesh.vertices.size());
    for (const Vec3& v : tpl_mesh.vertices)
      cage.mesh.vertices.push_back(
          {center.x + v.x * half.x * inflate, center.y + v.y * half.y * inflate,
           center.z + v.z * half.z * inflate});
    if (encloses(cage.mesh, pc)) return cage;
    inflate *= 1.05;
  }
  throw std::runtime_error("build_cage: enclosure unreachable in 20 inflation steps");
}

std::vector<double> mean_value_coordinates(const Vec3& x, const TriMesh& cage) {
  const std::size_t nv = cage.vertices.size();
  constexpr double kSnapEps = 1e-8;
  constexpr double kPlaneEps = 1e-8;
  constexpr double kSinEps = 1e-10;

  std::vector<double> w(nv, 0.0);
  std::vector<double> d(nv);
  std::vector<Vec3> u(nv);
  for (std::size_t j = 0; j < nv; ++j) {
    const Vec3 diff = cage.vertices[j] - x;
    d[j] = norm(diff);
    if (d[j] < kSnapEps) {
      w[j] = 1.0;
      return w;
    }
    u[j] = diff / d[j];
  }

  auto clamp1 = [](double v) { return std::clamp(v, -1.0, 1.0); };

  for (const auto& f : cage.faces) {
    const int idx[3] = {f[0], f[1], f[2]};
    const Vec3 ut[3] = {u[idx[0]], u[idx[1]], u[idx[2]]};
    double theta[3], half_sum = 0.0;
    for (int k = 0; k < 3; ++k) {
      const double l = norm(ut[(k + 1) % 3] - ut[(k + 2) % 3]);
      theta[k] = 2.0 * std::asin(clamp1(l / 2.0));
      half_sum += theta[k];
    }
    const double h = half_sum / 2.0;

    if (M_PI - h < kPlaneEps) {
      // x lies on this triangle: 2D barycentric weights on its vertices only.
      std::fill(w.begin(), w.end(), 0.0);
      double total = 0.0;
      double bw[3];
      for (int k = 0; k < 3; ++k) {
        bw[k] = std::sin(theta[k]) * d[idx[(k + 1) % 3]] * d[idx[(k + 2) % 3]];
        total += bw[k];
      }
      for (int k = 0; k < 3; ++k) w[idx[k]] = bw[k] / total;
      return w;
    }

    double c[3], s[3];
    const double det = dot(ut[0], cross(ut[1], ut[2]));
    const double sign = det >= 0.0 ? 1.0 : -1.0;
    bool coplanar_outside = false;
    for (int k = 0; k < 3; ++k) {
      c[k] = clamp1(2.0 * std::sin(h) * std::sin(h - theta[k]) /
                        (std::sin(theta[(k + 1) % 3]) * std::sin(theta[(k + 2) % 3])) -
                    1.0);
      s[k] = sign * std::sqrt(std::max(0.0, 1.0 - c[k] * c[k]));
      if (std::abs(s[k]) <= kSinEps) coplanar_outside = true;
    }
    if (coplanar_outside) continue;  // x lies in the triangle's plane but outside it

    for (int k = 0; k < 3; ++k) {
      const int kp = (k + 1) % 3, km = (k + 2) % 3;
      w[idx[k]] += (theta[k] - c[kp] * theta[km] - c[km] * theta[kp]) /
                   (d[idx[k]] * std::sin(theta[kp]) * s[km]);
    }
  }

  double total = 0.0;
  for (double v : w) total += v;
  if (!(std::abs(total) > 1e-12))
    throw std::runtime_error("mean_value_coordinates: degenerate weight sum (point outside cage?)");
  for (double& v : w) v /= total;
  return w;
}

MvcWeights mvc_matrix(const PointCloud& pc, const Cage& cage) {
  MvcWeights out;
  out.rows = pc.size();
  out.cols = cage.vertex_count();
  out.w.resize(out.rows * out.cols);
  for (std::size_t i = 0; i < out.rows; ++i) {
    const std::vector<double> row = mean_value_coordinates(pc.points[i], cage.mesh);
    std::copy(row.begin(), row.end(), out.w.begin() + i * out.cols);
  }
  return out;
}

std::vector<uint8_t> build_influence_mask(const std::vector<Vec3>& cage_vertices,
                                          const Keypoints& keypoints, double radius) {
  const std::size_t nk = keypoints.size(), nc = cage_vertices.size();
  if (nk == 0 || nc == 0) throw std::runtime_error("build_influence_mask: empty inputs");
  std::vector<uint8_t> mask(nk * nc, 0);
  const double r2 = radius * radius;
  for (std::size_t j = 0; j < nc; ++j) {
    bool covered = false;
    std::size_t nearest = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < nk; ++i) {
      const double d = dist2(cage_vertices[j], keypoints[i]);
      if (d <= r2) {
        mask[i * nc + j] = 1;
        covered = true;
      }
      if (d < best) {
        best = d;
        nearest = i;
      }
    }
    if (!covered) mask[nearest * nc + j] = 1;
  }
  return mask;
}

std::vector<Vec3> deform_cage(const Cage& cage, const Keypoints& k_src,
                              const Keypoints& k_tgt, const InfluenceField& inf) {
  const std::size_t nk = k_src.size(), nc = cage.vertex_count();
  if (k_tgt.size() != nk || inf.n_keypoints != nk || inf.n_cage_vertices != nc)
    throw std::runtime_error("deform_cage: dimension mismatch");
  std::vector<Vec3> out = cage.mesh.vertices;
  for (std::size_t i = 0; i < nk; ++i) {
    const Vec3 delta = k_tgt[i] - k_src[i];
    for (std::size_t j = 0; j < nc; ++j) out[j] += delta * inf.at(i, j);
  }
  return out;
}

std::vector<Vec3> apply_cage(const MvcWeights& w, const std::vector<Vec3>& deformed_vertices) {
  if (deformed_vertices.size() != w.cols)
    throw std::runtime_error("apply_cage: cage vertex count mismatch");
  std::vector<Vec3> out(w.rows);
  for (std::size_t i = 0; i < w.rows; ++i) {
    Vec3 p{};
    for (std::size_t j = 0; j < w.cols; ++j) p += deformed_vertices[j] * w.at(i, j);
    out[i] = p;
  }
  return out;
}

PointCloud apply_cage(const PointCloud& shape, const MvcWeights& w,
                      const std::vector<Vec3>& deformed_vertices) {
  if (shape.size() != w.rows) throw std::runtime_error("apply_cage: point count mismatch");
  PointCloud out;
  out.points = apply_cage(w, deformed_vertices);
  return out;
}

TriMesh apply_cage(const TriMesh& shape, const Cage& cage,
                   const std::vector<Vec3>& deformed_vertices) {
  PointCloud verts;
  verts.points = shape.vertices;
  const MvcWeights w = mvc_matrix(verts, cage);
  TriMesh out;
  out.faces = shape.faces;
  out.vertices = apply_cage(w, deformed_vertices);
  return out;
}

namespace {

// Segment-triangle intersection, used only by the self-intersection diagnostic.
bool segment_hits_triangle(const Vec3& p, const Vec3& q, const Vec3& a, const Vec3& b,
                           const Vec3& c) {
  const Vec3 dir = q - p;
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 h = cross(dir, e2);
  const double det = dot(e1, h);
  if (std::abs(det) < 1e-14) return false;
  const double inv = 1.0 / det;
  const Vec3 s = p - a;
  const double u = inv * dot(s, h);
  if (u < 1e-9 || u > 1.0 - 1e-9) return false;
  const Vec3 qv = cross(s, e1);
  const double v = inv * dot(dir, qv);
  if (v < 1e-9 || u + v > 1.0 - 1e-9) return false;
  const double t = inv * dot(e2, qv);
  return t > 1e-9 && t < 1.0 - 1e-9;
}

}  // namespace

bool cage_self_intersects(const TriMesh& cage_mesh, const std::vector<Vec3>& deformed_vertices) {
  const auto& faces = cage_mesh.faces;
  for (std::size_t fi = 0; fi < faces.size(); ++fi) {
    const auto& f = faces[fi];
    for (int e = 0; e < 3; ++e) {
      const int va = f[e], vb = f[(e + 1) % 3];
      const Vec3 p = deformed_vertices[va], q = deformed_vertices[vb];
      for (std::size_t fj = 0; fj < faces.size(); ++fj) {
        const auto& g = faces[fj];
        if (g[0] == va || g[1] == va || g[2] == va || g[0] == vb || g[1] == vb || g[2] == vb)
          continue;
        if (segment_hits_triangle(p, q, deformed_vertices[g[0]], deformed_vertices[g[1]],
                                  deformed_vertices[g[2]]))
          return true;
      }
    }
  }
  return false;
}

}  // namespace kpred
