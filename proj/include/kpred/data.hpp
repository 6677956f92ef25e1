#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kpred/geometry.hpp"

namespace kpred::data {

enum class Family { Table, Chair, Cabinet };

Family family_from_string(const std::string& name);
std::string family_name(Family f);

struct ParamRange {
  std::string name;
  double lo = 0.0, hi = 1.0;
  bool integer = false;
};

const std::vector<ParamRange>& family_param_ranges(Family f);

struct ShapeSpec {
  Family family = Family::Table;
  std::map<std::string, double> params;
};

// Watertight union-of-boxes mesh; same spec always yields identical bytes.
// Throws on out-of-range parameters.
TriMesh generate_shape(const ShapeSpec& spec);

struct DatasetSplit {
  std::vector<std::string> db_ids, train_ids, test_ids;
};

struct DatasetShape {
  std::string id;
  std::string split;  // "db" | "train" | "test"
  ShapeSpec spec;
  TriMesh mesh;
};

struct Dataset {
  Family family = Family::Table;
  uint64_t seed = 0;
  std::vector<DatasetShape> shapes;
  DatasetSplit split;
};

// Latin-hypercube parameter sampling over the family ranges, split into
// pairwise-disjoint database / train / test id sets.
Dataset generate_dataset(Family family, std::size_t db_count, std::size_t train_count,
                         std::size_t test_count, uint64_t seed);

// Writes meshes/<id>.obj plus manifest.json; loads the same layout back.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// ---- mesh / point-cloud file formats ----

// ASCII OBJ: v/f records, 1-based indices; polygon faces fan-triangulated on
// load. Unknown record types are skipped.
void save_obj(const TriMesh& mesh, const std::string& path);
TriMesh load_obj(const std::string& path);

// PLY vertex element with float x/y/z, "binary_little_endian" or "ascii".
void save_ply(const PointCloud& pc, const std::string& path, bool binary = true);
PointCloud load_ply(const std::string& path);

}  // namespace kpred::data
