#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kpred/geometry.hpp"

namespace kpred {

// Coarse convex control mesh enclosing a shape.
struct Cage {
  TriMesh mesh;
  std::string source_id;
  std::size_t vertex_count() const { return mesh.vertices.size(); }
};

enum class CageTemplate { Icosphere0, Icosphere1, Box2 };

CageTemplate cage_template_from_string(const std::string& name);
std::string cage_template_name(CageTemplate t);
int cage_template_vertex_count(CageTemplate t);

// Unit-sized template mesh centered at the origin (sphere radius 1 or box
// half-extent 1), outward-oriented faces.
TriMesh make_cage_template(CageTemplate t);

// Anisotropically scales the template to margin * half-extent per axis around
// the bounding-box center, inflating in 5% steps until every point is strictly
// inside. Throws if enclosure is unreachable in 20 steps.
Cage build_cage(const PointCloud& pc, CageTemplate tpl = CageTemplate::Icosphere1,
                double margin = 1.2);

// Every mesh vertex on or inside every face's outward half-space.
bool is_convex(const TriMesh& mesh, double tol = 1e-9);
// Signed distance of every point to every face plane < -clearance.
bool encloses(const TriMesh& cage, const PointCloud& pc, double clearance = 1e-6);

// Mean value coordinates of x with respect to the cage: one weight per cage
// vertex, summing to 1, reproducing x as the weighted vertex combination.
// Points within 1e-8 of a vertex snap to the indicator row; points on a face
// fall back to 2D barycentric weights.
std::vector<double> mean_value_coordinates(const Vec3& x, const TriMesh& cage);

// Row-major N_P x N_C weight matrix.
struct MvcWeights {
  std::size_t rows = 0, cols = 0;
  std::vector<double> w;
  double at(std::size_t i, std::size_t j) const { return w[i * cols + j]; }
};

MvcWeights mvc_matrix(const PointCloud& pc, const Cage& cage);

// Per-keypoint scalar weights over cage vertices plus the support mask.
// I[i][j] must be zero wherever mask[i][j] is false.
struct InfluenceField {
  std::size_t n_keypoints = 0, n_cage_vertices = 0;
  std::vector<double> values;  // row-major N_K x N_C
  std::vector<uint8_t> mask;   // same layout
  double at(std::size_t i, std::size_t j) const { return values[i * n_cage_vertices + j]; }
};

// mask[i][j] = cage vertex j within radius r of keypoint i; a vertex covered
// by no keypoint is assigned to its nearest one so no cage vertex is ever
// frozen out of the deformation.
std::vector<uint8_t> build_influence_mask(const std::vector<Vec3>& cage_vertices,
                                          const Keypoints& keypoints, double radius);

// Deformed cage vertices: c_j + sum_i I[i][j] * (k_tgt[i] - k_src[i]).
std::vector<Vec3> deform_cage(const Cage& cage, const Keypoints& k_src,
                              const Keypoints& k_tgt, const InfluenceField& inf);

// Interpolates deformed cage vertices back onto the shape via the weights.
std::vector<Vec3> apply_cage(const MvcWeights& w, const std::vector<Vec3>& deformed_vertices);
PointCloud apply_cage(const PointCloud& shape, const MvcWeights& w,
                      const std::vector<Vec3>& deformed_vertices);
TriMesh apply_cage(const TriMesh& shape, const Cage& cage,
                   const std::vector<Vec3>& deformed_vertices);

// Diagnostic only; deformed cages are not validated for self-intersection.
bool cage_self_intersects(const TriMesh& cage_mesh, const std::vector<Vec3>& deformed_vertices);

}  // namespace kpred
