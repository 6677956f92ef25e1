#include "kpred/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "kpred/rng.hpp"
#include "kpred/storage.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace kpred::data {

Family family_from_string(const std::string& name) {
  if (name == "table") return Family::Table;
  if (name == "chair") return Family::Chair;
  if (name == "cabinet") return Family::Cabinet;
  throw std::runtime_error("unknown shape family '" + name + "'");
}

std::string family_name(Family f) {
  switch (f) {
    case Family::Table: return "table";
    case Family::Chair: return "chair";
    case Family::Cabinet: return "cabinet";
  }
  throw std::runtime_error("bad family");
}

const std::vector<ParamRange>& family_param_ranges(Family f) {
  static const std::vector<ParamRange> table = {
      {"top_w", 0.6, 1.4},   {"top_d", 0.5, 1.2},    {"top_t", 0.04, 0.12},
      {"leg_h", 0.35, 0.9},  {"leg_t", 0.04, 0.12},  {"leg_inset", 0.0, 0.15}};
  static const std::vector<ParamRange> chair = {
      {"seat_w", 0.4, 0.7},  {"seat_d", 0.4, 0.7},   {"seat_t", 0.05, 0.12},
      {"leg_h", 0.3, 0.6},   {"leg_t", 0.04, 0.09},  {"leg_inset", 0.0, 0.1},
      {"back_h", 0.3, 0.8},  {"back_t", 0.04, 0.09}, {"back_tilt", 0.0, 0.25}};
  static const std::vector<ParamRange> cabinet = {
      {"w", 0.5, 1.2},       {"d", 0.3, 0.6},        {"h", 0.8, 1.8},
      {"panel_t", 0.02, 0.06}, {"shelf_count", 0, 3, true}, {"door_split", 0, 1, true}};
  switch (f) {
    case Family::Table: return table;
    case Family::Chair: return chair;
    case Family::Cabinet: return cabinet;
  }
  throw std::runtime_error("bad family");
}

namespace {

double get_param(const ShapeSpec& spec, const std::string& name) {
  auto it = spec.params.find(name);
  if (it == spec.params.end())
    throw std::runtime_error("shape spec missing parameter '" + name + "'");
  return it->second;
}

void validate_spec(const ShapeSpec& spec) {
  for (const ParamRange& r : family_param_ranges(spec.family)) {
    const double v = get_param(spec, r.name);
    if (!(v >= r.lo && v <= r.hi))
      throw std::runtime_error("parameter '" + r.name + "' out of range [" +
                               std::to_string(r.lo) + ", " + std::to_string(r.hi) + "]");
    if (r.integer && v != std::floor(v))
      throw std::runtime_error("parameter '" + r.name + "' must be an integer");
  }
  if (spec.params.size() != family_param_ranges(spec.family).size())
    throw std::runtime_error("shape spec has unexpected parameters");
}

// Closed axis-aligned box [lo, hi], outward faces.
void emit_box(TriMesh& m, const Vec3& lo, const Vec3& hi) {
  const int base = static_cast<int>(m.vertices.size());
  for (int i = 0; i < 8; ++i)
    m.vertices.push_back({(i & 1) ? hi.x : lo.x, (i & 2) ? hi.y : lo.y, (i & 4) ? hi.z : lo.z});
  static const int quads[6][4] = {
      {0, 2, 3, 1},  // z = lo
      {4, 5, 7, 6},  // z = hi
      {0, 1, 5, 4},  // y = lo
      {2, 6, 7, 3},  // y = hi
      {0, 4, 6, 2},  // x = lo
      {1, 3, 7, 5},  // x = hi
  };
  for (const auto& q : quads) {
    m.faces.push_back({base + q[0], base + q[1], base + q[2]});
    m.faces.push_back({base + q[0], base + q[2], base + q[3]});
  }
}

// Rotates vertices added after `first` about the x axis at pivot (py, pz).
void tilt_about_x(TriMesh& m, std::size_t first, double angle, double py, double pz) {
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t i = first; i < m.vertices.size(); ++i) {
    Vec3& v = m.vertices[i];
    const double dy = v.y - py, dz = v.z - pz;
    v.y = py + dy * c - dz * s;
    v.z = pz + dy * s + dz * c;
  }
}

void emit_legs(TriMesh& m, double w, double d, double leg_h, double leg_t, double inset_frac) {
  const double ix = inset_frac * w / 2.0, iz = inset_frac * d / 2.0;
  const double cx = w / 2.0 - leg_t / 2.0 - ix;
  const double cz = d / 2.0 - leg_t / 2.0 - iz;
  for (int sx : {-1, 1}) {
    for (int sz : {-1, 1}) {
      const double x = sx * cx, z = sz * cz;
      emit_box(m, {x - leg_t / 2.0, 0.0, z - leg_t / 2.0},
               {x + leg_t / 2.0, leg_h, z + leg_t / 2.0});
    }
  }
}

TriMesh make_table(const ShapeSpec& spec) {
  const double top_w = get_param(spec, "top_w"), top_d = get_param(spec, "top_d");
  const double top_t = get_param(spec, "top_t"), leg_h = get_param(spec, "leg_h");
  const double leg_t = get_param(spec, "leg_t"), inset = get_param(spec, "leg_inset");
  TriMesh m;
  emit_box(m, {-top_w / 2.0, leg_h, -top_d / 2.0}, {top_w / 2.0, leg_h + top_t, top_d / 2.0});
  emit_legs(m, top_w, top_d, leg_h, leg_t, inset);
  return m;
}

TriMesh make_chair(const ShapeSpec& spec) {
  const double sw = get_param(spec, "seat_w"), sd = get_param(spec, "seat_d");
  const double st = get_param(spec, "seat_t"), leg_h = get_param(spec, "leg_h");
  const double leg_t = get_param(spec, "leg_t"), inset = get_param(spec, "leg_inset");
  const double bh = get_param(spec, "back_h"), bt = get_param(spec, "back_t");
  const double tilt = get_param(spec, "back_tilt");
  TriMesh m;
  emit_box(m, {-sw / 2.0, leg_h, -sd / 2.0}, {sw / 2.0, leg_h + st, sd / 2.0});
  emit_legs(m, sw, sd, leg_h, leg_t, inset);
  const double seat_top = leg_h + st;
  const std::size_t first = m.vertices.size();
  emit_box(m, {-sw / 2.0, seat_top, sd / 2.0 - bt}, {sw / 2.0, seat_top + bh, sd / 2.0});
  tilt_about_x(m, first, tilt, seat_top, sd / 2.0 - bt / 2.0);
  return m;
}

TriMesh make_cabinet(const ShapeSpec& spec) {
  const double w = get_param(spec, "w"), d = get_param(spec, "d"), h = get_param(spec, "h");
  const double t = get_param(spec, "panel_t");
  const int shelves = static_cast<int>(get_param(spec, "shelf_count"));
  const bool split = get_param(spec, "door_split") != 0.0;
  TriMesh m;
  emit_box(m, {-w / 2, 0, -d / 2}, {w / 2, t, d / 2});          // bottom
  emit_box(m, {-w / 2, h - t, -d / 2}, {w / 2, h, d / 2});      // top
  emit_box(m, {-w / 2, t, -d / 2}, {-w / 2 + t, h - t, d / 2}); // left
  emit_box(m, {w / 2 - t, t, -d / 2}, {w / 2, h - t, d / 2});   // right
  emit_box(m, {-w / 2 + t, t, d / 2 - t}, {w / 2 - t, h - t, d / 2});  // back
  for (int i = 0; i < shelves; ++i) {
    const double y = t + (i + 1) * (h - 2 * t) / (shelves + 1);
    emit_box(m, {-w / 2 + t, y - t / 2, -d / 2 + t}, {w / 2 - t, y + t / 2, d / 2 - t});
  }
  if (split) {
    const double gap = 0.02 * w;
    emit_box(m, {-w / 2 + t, t, -d / 2}, {-gap / 2, h - t, -d / 2 + t});
    emit_box(m, {gap / 2, t, -d / 2}, {w / 2 - t, h - t, -d / 2 + t});
  } else {
    emit_box(m, {-w / 2 + t, t, -d / 2}, {w / 2 - t, h - t, -d / 2 + t});
  }
  return m;
}

}  // namespace

TriMesh generate_shape(const ShapeSpec& spec) {
  validate_spec(spec);
  switch (spec.family) {
    case Family::Table: return make_table(spec);
    case Family::Chair: return make_chair(spec);
    case Family::Cabinet: return make_cabinet(spec);
  }
  throw std::runtime_error("bad family");
}

Dataset generate_dataset(Family family, std::size_t db_count, std::size_t train_count,
                         std::size_t test_count, uint64_t seed) {
  const std::size_t n = db_count + train_count + test_count;
  if (n == 0) throw std::runtime_error("generate_dataset: empty dataset requested");
  const auto& ranges = family_param_ranges(family);

  // Latin hypercube: one stratified, shuffled column per parameter.
  Rng rng(seed);
  std::vector<std::vector<double>> columns(ranges.size(), std::vector<double>(n));
  for (std::size_t d = 0; d < ranges.size(); ++d) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    for (std::size_t i = 0; i < n; ++i) {
      const double u01 = (static_cast<double>(perm[i]) + rng.uniform()) / static_cast<double>(n);
      const ParamRange& r = ranges[d];
      if (r.integer) {
        const double span = r.hi - r.lo + 1.0;
        columns[d][i] = std::min(r.hi, r.lo + std::floor(u01 * span));
      } else {
        columns[d][i] = r.lo + u01 * (r.hi - r.lo);
      }
    }
  }

  Dataset ds;
  ds.family = family;
  ds.seed = seed;
  char id_buf[64];
  for (std::size_t i = 0; i < n; ++i) {
    DatasetShape s;
    std::snprintf(id_buf, sizeof(id_buf), "%s_%04zu", family_name(family).c_str(), i);
    s.id = id_buf;
    s.split = i < db_count ? "db" : (i < db_count + train_count ? "train" : "test");
    s.spec.family = family;
    for (std::size_t d = 0; d < ranges.size(); ++d) s.spec.params[ranges[d].name] = columns[d][i];
    s.mesh = generate_shape(s.spec);
    if (s.split == "db") ds.split.db_ids.push_back(s.id);
    else if (s.split == "train") ds.split.train_ids.push_back(s.id);
    else ds.split.test_ids.push_back(s.id);
    ds.shapes.push_back(std::move(s));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "meshes");
  json manifest;
  manifest["family"] = family_name(ds.family);
  manifest["seed"] = ds.seed;
  manifest["counts"] = {{"db", ds.split.db_ids.size()},
                        {"train", ds.split.train_ids.size()},
                        {"test", ds.split.test_ids.size()}};
  json shapes = json::array();
  for (const DatasetShape& s : ds.shapes) {
    const std::string rel = "meshes/" + s.id + ".obj";
    save_obj(s.mesh, (fs::path(dir) / rel).string());
    json entry;
    entry["id"] = s.id;
    entry["split"] = s.split;
    entry["obj"] = rel;
    entry["params"] = s.spec.params;
    shapes.push_back(entry);
  }
  manifest["shapes"] = shapes;
  store::write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

Dataset load_dataset(const std::string& dir) {
  const json manifest = json::parse(store::read_text_file((fs::path(dir) / "manifest.json").string()));
  Dataset ds;
  ds.family = family_from_string(manifest.at("family").get<std::string>());
  ds.seed = manifest.at("seed").get<uint64_t>();
  for (const json& entry : manifest.at("shapes")) {
    DatasetShape s;
    s.id = entry.at("id").get<std::string>();
    s.split = entry.at("split").get<std::string>();
    s.spec.family = ds.family;
    for (auto it = entry.at("params").begin(); it != entry.at("params").end(); ++it)
      s.spec.params[it.key()] = it.value().get<double>();
    s.mesh = load_obj((fs::path(dir) / entry.at("obj").get<std::string>()).string());
    if (s.split == "db") ds.split.db_ids.push_back(s.id);
    else if (s.split == "train") ds.split.train_ids.push_back(s.id);
    else if (s.split == "test") ds.split.test_ids.push_back(s.id);
    else throw std::runtime_error("dataset manifest: unknown split '" + s.split + "'");
    ds.shapes.push_back(std::move(s));
  }
  return ds;
}

// ---- OBJ ----

void save_obj(const TriMesh& mesh, const std::string& path) {
  std::string out;
  out.reserve(mesh.vertices.size() * 40 + mesh.faces.size() * 20);
  char line[128];
  for (const Vec3& v : mesh.vertices) {
    std::snprintf(line, sizeof(line), "v %.9g %.9g %.9g\n", v.x, v.y, v.z);
    out += line;
  }
  for (const auto& f : mesh.faces) {
    std::snprintf(line, sizeof(line), "f %d %d %d\n", f[0] + 1, f[1] + 1, f[2] + 1);
    out += line;
  }
  store::write_text_file(path, out);
}

namespace {

int parse_obj_index(const std::string& token, std::size_t n_vertices, std::size_t line_no) {
  std::size_t end = token.find('/');
  const std::string head = token.substr(0, end);
  int idx = 0;
  try {
    idx = std::stoi(head);
  } catch (const std::exception&) {
    throw std::runtime_error("obj line " + std::to_string(line_no) + ": bad face index '" +
                             token + "'");
  }
  if (idx < 1 || static_cast<std::size_t>(idx) > n_vertices)
    throw std::runtime_error("obj line " + std::to_string(line_no) +
                             ": face index out of range");
  return idx - 1;
}

}  // namespace

TriMesh load_obj(const std::string& path) {
  std::istringstream in(store::read_text_file(path));
  TriMesh mesh;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x >> v.y >> v.z))
        throw std::runtime_error("obj line " + std::to_string(line_no) + ": bad vertex record");
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<int> poly;
      std::string token;
      while (ls >> token) poly.push_back(parse_obj_index(token, mesh.vertices.size(), line_no));
      if (poly.size() < 3)
        throw std::runtime_error("obj line " + std::to_string(line_no) +
                                 ": face needs at least 3 vertices");
      for (std::size_t i = 1; i + 1 < poly.size(); ++i)
        mesh.faces.push_back({poly[0], poly[i], poly[i + 1]});
    }
    // all other record types ignored
  }
  return mesh;
}

// ---- PLY ----

void save_ply(const PointCloud& pc, const std::string& path, bool binary) {
  std::string out;
  out += "ply\n";
  out += binary ? "format binary_little_endian 1.0\n" : "format ascii 1.0\n";
  out += "element vertex " + std::to_string(pc.size()) + "\n";
  out += "property float x\nproperty float y\nproperty float z\n";
  out += "end_header\n";
  if (binary) {
    for (const Vec3& p : pc.points) {
      const float f[3] = {static_cast<float>(p.x), static_cast<float>(p.y),
                          static_cast<float>(p.z)};
      for (float v : f) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        for (int b = 0; b < 4; ++b) out += static_cast<char>((bits >> (8 * b)) & 0xff);
      }
    }
  } else {
    char line[96];
    for (const Vec3& p : pc.points) {
      std::snprintf(line, sizeof(line), "%.9g %.9g %.9g\n", p.x, p.y, p.z);
      out += line;
    }
  }
  store::write_text_file(path, out);
}

PointCloud load_ply(const std::string& path) {
  const std::string content = store::read_text_file(path);
  std::size_t pos = 0;
  auto next_line = [&]() {
    const std::size_t nl = content.find('\n', pos);
    if (nl == std::string::npos) throw std::runtime_error("ply: truncated header");
    std::string line = content.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    pos = nl + 1;
    return line;
  };

  if (next_line() != "ply") throw std::runtime_error("ply: bad magic");
  bool binary = false;
  std::size_t n_vertices = 0;
  std::vector<std::string> properties;
  bool in_vertex_element = false;
  for (;;) {
    const std::string line = next_line();
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt == "binary_little_endian") binary = true;
      else if (fmt == "ascii") binary = false;
      else throw std::runtime_error("ply: unsupported format '" + fmt + "'");
    } else if (tag == "comment") {
      continue;
    } else if (tag == "element") {
      std::string name;
      std::size_t count = 0;
      ls >> name >> count;
      if (name != "vertex") throw std::runtime_error("ply: unsupported element '" + name + "'");
      n_vertices = count;
      in_vertex_element = true;
    } else if (tag == "property") {
      if (!in_vertex_element) throw std::runtime_error("ply: property outside vertex element");
      std::string type, name;
      ls >> type >> name;
      if (type != "float" && type != "float32")
        throw std::runtime_error("ply: unsupported property type '" + type + "'");
      properties.push_back(name);
    } else if (tag == "end_header") {
      break;
    } else {
      throw std::runtime_error("ply: unexpected header line '" + line + "'");
    }
  }
  if (properties != std::vector<std::string>{"x", "y", "z"})
    throw std::runtime_error("ply: vertex element must have float x/y/z properties");

  PointCloud pc;
  pc.points.reserve(n_vertices);
  if (binary) {
    if (content.size() - pos < n_vertices * 12) throw std::runtime_error("ply: truncated payload");
    for (std::size_t i = 0; i < n_vertices; ++i) {
      float f[3];
      for (int k = 0; k < 3; ++k) {
        uint32_t bits = 0;
        for (int b = 3; b >= 0; --b)
          bits = (bits << 8) | static_cast<unsigned char>(content[pos + i * 12 + k * 4 + b]);
        std::memcpy(&f[k], &bits, 4);
      }
      pc.points.push_back({f[0], f[1], f[2]});
    }
  } else {
    std::istringstream body(content.substr(pos));
    for (std::size_t i = 0; i < n_vertices; ++i) {
      Vec3 p;
      if (!(body >> p.x >> p.y >> p.z))
        throw std::runtime_error("ply: bad vertex record at index " + std::to_string(i));
      pc.points.push_back(p);
    }
  }
  return pc;
}

}  // namespace kpred::data
