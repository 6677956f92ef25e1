#include "kpred/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "kpred/storage.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace kpred::ret {

namespace {

double l1(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(a[i] - b[i]);
  return acc;
}

// Per-region partial sums added in region order; makes the global distance
// bit-identical to the unit-weight per-region sum (concatenation identity).
double l1_chunked(const double* a, const double* b, std::size_t rows, std::size_t chunk) {
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) acc += l1(a + r * chunk, b + r * chunk, chunk);
  return acc;
}

std::vector<RankedHit> rank_and_trim(std::vector<RankedHit> hits, std::size_t k) {
  std::sort(hits.begin(), hits.end(), [](const RankedHit& a, const RankedHit& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.id < b.id;
  });
  if (hits.size() > k) hits.resize(k);
  return hits;
}

}  // namespace

std::vector<RankedHit> retrieve_full(const std::vector<double>& global_token,
                                     const TokenDatabase& db, std::size_t k) {
  const std::size_t len = static_cast<std::size_t>(db.token_rows) * db.token_dim;
  if (global_token.size() != len)
    throw std::runtime_error("retrieve_full: query token length does not match the database");
  std::vector<RankedHit> hits;
  hits.reserve(db.records.size());
  for (std::size_t i = 0; i < db.records.size(); ++i) {
    hits.push_back({db.records[i].id, i,
                    l1_chunked(global_token.data(), db.records[i].global_token.data(),
                               db.token_rows, db.token_dim)});
  }
  return rank_and_trim(std::move(hits), k);
}

std::vector<RankedHit> retrieve_partial(const std::vector<double>& region_tokens,
                                        const std::vector<double>& densities,
                                        const TokenDatabase& db, std::size_t k) {
  const std::size_t rows = static_cast<std::size_t>(db.token_rows);
  const std::size_t dt = static_cast<std::size_t>(db.token_dim);
  if (region_tokens.size() != rows * dt)
    throw std::runtime_error("retrieve_partial: query token length does not match the database");
  if (densities.size() != rows)
    throw std::runtime_error("retrieve_partial: density count does not match token rows");
  std::vector<RankedHit> hits;
  hits.reserve(db.records.size());
  for (std::size_t i = 0; i < db.records.size(); ++i) {
    double score = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
      score += densities[r] *
               l1(region_tokens.data() + r * dt, db.records[i].region_tokens.data() + r * dt, dt);
    hits.push_back({db.records[i].id, i, score});
  }
  return rank_and_trim(std::move(hits), k);
}

namespace {

store::RawTensor points_blob(const std::vector<Vec3>& pts) {
  std::vector<double> v;
  v.reserve(pts.size() * 3);
  for (const Vec3& p : pts) {
    v.push_back(p.x);
    v.push_back(p.y);
    v.push_back(p.z);
  }
  return store::RawTensor::from_f64({static_cast<uint32_t>(pts.size()), 3}, v);
}

std::vector<Vec3> points_from_blob(const store::RawTensor& t) {
  if (t.dims.size() != 2 || t.dims[1] != 3)
    throw std::runtime_error("database blob: expected an N x 3 tensor");
  const std::vector<double> v = t.to_f64();
  std::vector<Vec3> pts(t.dims[0]);
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {v[i * 3], v[i * 3 + 1], v[i * 3 + 2]};
  return pts;
}

}  // namespace

void save_database(const TokenDatabase& db, const std::string& dir) {
  if (db.records.empty()) throw std::runtime_error("save_database: empty database");
  fs::create_directories(fs::path(dir) / "records");

  json manifest;
  char fp[20];
  std::snprintf(fp, sizeof(fp), "%016llx", static_cast<unsigned long long>(db.fingerprint));
  manifest["fingerprint"] = fp;
  manifest["n_keypoints"] = db.n_keypoints;
  manifest["token_dim"] = db.token_dim;
  manifest["token_rows"] = db.token_rows;
  json ids = json::array();
  json recmap = json::object();

  for (const ShapeRecord& r : db.records) {
    ids.push_back(r.id);
    const std::string rel = "records/" + r.id;
    recmap[r.id] = rel;
    fs::create_directories(fs::path(dir) / rel);
    const fs::path base = fs::path(dir) / rel;

    store::write_blob(points_blob(r.points.points), (base / "points.kprd").string());
    store::write_blob(points_blob(r.keypoints), (base / "keypoints.kprd").string());
    store::write_blob(points_blob(r.cage.mesh.vertices), (base / "cage_v.kprd").string());
    std::vector<uint32_t> faces;
    faces.reserve(r.cage.mesh.faces.size() * 3);
    for (const auto& f : r.cage.mesh.faces)
      for (int e = 0; e < 3; ++e) faces.push_back(static_cast<uint32_t>(f[e]));
    store::write_blob(store::RawTensor::from_u32(
                          {static_cast<uint32_t>(r.cage.mesh.faces.size()), 3}, faces),
                      (base / "cage_f.kprd").string());
    store::write_blob(store::RawTensor::from_f64({static_cast<uint32_t>(r.mvc.rows),
                                                  static_cast<uint32_t>(r.mvc.cols)},
                                                 r.mvc.w),
                      (base / "mvc.kprd").string());
    store::write_blob(store::RawTensor::from_f64({static_cast<uint32_t>(db.token_rows),
                                                  static_cast<uint32_t>(db.token_dim)},
                                                 r.region_tokens),
                      (base / "tokens.kprd").string());
  }
  manifest["ids"] = ids;
  manifest["records"] = recmap;
  manifest["skipped"] = db.skipped;
  store::write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

TokenDatabase load_database(const std::string& dir) {
  const json manifest =
      json::parse(store::read_text_file((fs::path(dir) / "manifest.json").string()));
  TokenDatabase db;
  db.fingerprint = std::stoull(manifest.at("fingerprint").get<std::string>(), nullptr, 16);
  db.n_keypoints = manifest.at("n_keypoints").get<int>();
  db.token_dim = manifest.at("token_dim").get<int>();
  db.token_rows = manifest.at("token_rows").get<int>();
  if (manifest.contains("skipped"))
    db.skipped = manifest.at("skipped").get<std::vector<std::string>>();

  std::set<std::string> seen;
  for (const json& idj : manifest.at("ids")) {
    const std::string id = idj.get<std::string>();
    if (!seen.insert(id).second)
      throw std::runtime_error("database manifest: duplicate id '" + id + "'");
    const std::string rel = manifest.at("records").at(id).get<std::string>();
    const fs::path base = fs::path(dir) / rel;

    ShapeRecord r;
    r.id = id;
    r.points.points = points_from_blob(store::read_blob((base / "points.kprd").string()));
    r.keypoints = points_from_blob(store::read_blob((base / "keypoints.kprd").string()));
    r.cage.source_id = id;
    r.cage.mesh.vertices = points_from_blob(store::read_blob((base / "cage_v.kprd").string()));
    const store::RawTensor faces = store::read_blob((base / "cage_f.kprd").string());
    if (faces.dims.size() != 2 || faces.dims[1] != 3)
      throw std::runtime_error("database blob: cage_f must be F x 3");
    const std::vector<uint32_t> fv = faces.to_u32();
    for (std::size_t i = 0; i < faces.dims[0]; ++i)
      r.cage.mesh.faces.push_back({static_cast<int>(fv[i * 3]), static_cast<int>(fv[i * 3 + 1]),
                                   static_cast<int>(fv[i * 3 + 2])});

    const store::RawTensor mvc = store::read_blob((base / "mvc.kprd").string());
    if (mvc.dims.size() != 2 || mvc.dims[0] != r.points.size() ||
        mvc.dims[1] != r.cage.mesh.vertices.size())
      throw std::runtime_error("database record '" + id + "': MVC dims do not match points/cage");
    r.mvc.rows = mvc.dims[0];
    r.mvc.cols = mvc.dims[1];
    r.mvc.w = mvc.to_f64();
    for (std::size_t i = 0; i < r.mvc.rows; ++i) {
      double sum = 0.0;
      for (std::size_t j = 0; j < r.mvc.cols; ++j) sum += r.mvc.at(i, j);
      if (std::abs(sum - 1.0) > 1e-6)
        throw std::runtime_error("database record '" + id + "': MVC row " + std::to_string(i) +
                                 " does not sum to 1");
    }

    const store::RawTensor tokens = store::read_blob((base / "tokens.kprd").string());
    if (tokens.dims.size() != 2 || tokens.dims[0] != static_cast<uint32_t>(db.token_rows) ||
        tokens.dims[1] != static_cast<uint32_t>(db.token_dim))
      throw std::runtime_error("database record '" + id + "': token dims do not match manifest");
    r.region_tokens = tokens.to_f64();
    r.global_token = r.region_tokens;
    db.records.push_back(std::move(r));
  }
  if (db.records.empty()) throw std::runtime_error("load_database: empty database");
  return db;
}

}  // namespace kpred::ret
