#include <cstdio>
#include <filesystem>
#include <set>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "kpred/checkpoint.hpp"
#include "kpred/data.hpp"
#include "kpred/parallel.hpp"
#include "kpred/pipeline.hpp"
#include "kpred/retrieval.hpp"
#include "kpred/rng.hpp"
#include "kpred/storage.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kpred;

namespace {

// exit 2: usage / configuration problems; exit 1: runtime failures
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string dataset_dir;
  std::string out_dir;
  std::string init_checkpoint;

  int epochs = 10;
  int batch = 16;
  uint64_t seed = 1;
  double lambda_kpt = 2.0;
  double lambda_wkpt = 20.0;
  double lr_deform = 1e-3;
  double lr_retrieval = 1e-2;
  double lr_partial = 1e-3;
  double gamma_min = 0.25;
  double gamma_max = 0.90;
  double grad_clip = 5.0;
  bool kpt_reg_both = true;
  bool fps_random_start = false;
  bool dar_track_regions = false;
  int workers = 1;

  int n_points = 2048;
  int n_keypoints = 12;
  int feat_dim = 128;
  int token_dim = 32;
  int decode_points = 128;
  int attn_layers = 2;
  int attn_heads = 4;
  int ffn_hidden = 256;
  std::string cage_template = "icosphere1";
  double cage_margin = 1.2;
  double region_radius = 0.3;
  double n_ref = 0.0;
  bool gsa = true;
  bool lgf = true;
  bool dar = true;
  bool cb = true;
  std::string dtype = "f32";

  json raw;  // parsed file, echoed as config.lock.json
};

RunConfig load_config(const std::string& path) {
  json j;
  try {
    j = json::parse(store::read_text_file(path));
  } catch (const std::exception& e) {
    throw ConfigError("cannot parse config '" + path + "': " + e.what());
  }
  RunConfig c;
  c.raw = j;
  auto s = [&](const char* key, std::string& out) { if (j.contains(key)) out = j.at(key).get<std::string>(); };
  auto i = [&](const char* key, int& out) { if (j.contains(key)) out = j.at(key).get<int>(); };
  auto u = [&](const char* key, uint64_t& out) { if (j.contains(key)) out = j.at(key).get<uint64_t>(); };
  auto d = [&](const char* key, double& out) { if (j.contains(key)) out = j.at(key).get<double>(); };
  auto b = [&](const char* key, bool& out) { if (j.contains(key)) out = j.at(key).get<bool>(); };

  static const std::set<std::string> known = {
      "dataset_dir", "out_dir", "init_checkpoint", "epochs", "batch", "seed",
      "lambda_kpt", "lambda_wkpt", "lr_deform", "lr_retrieval", "lr_partial",
      "gamma_min", "gamma_max", "grad_clip", "kpt_reg_both", "fps_random_start",
      "dar_track_regions", "workers", "n_points", "n_keypoints", "feat_dim", "token_dim",
      "decode_points", "attn_layers", "attn_heads", "ffn_hidden",
      "cage_template", "cage_margin", "region_radius", "n_ref", "gsa", "lgf",
      "dar", "cb", "dtype"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");

  try {
    s("dataset_dir", c.dataset_dir);
    s("out_dir", c.out_dir);
    s("init_checkpoint", c.init_checkpoint);
    i("epochs", c.epochs);
    i("batch", c.batch);
    u("seed", c.seed);
    d("lambda_kpt", c.lambda_kpt);
    d("lambda_wkpt", c.lambda_wkpt);
    d("lr_deform", c.lr_deform);
    d("lr_retrieval", c.lr_retrieval);
    d("lr_partial", c.lr_partial);
    d("gamma_min", c.gamma_min);
    d("gamma_max", c.gamma_max);
    d("grad_clip", c.grad_clip);
    b("kpt_reg_both", c.kpt_reg_both);
    b("fps_random_start", c.fps_random_start);
    b("dar_track_regions", c.dar_track_regions);
    i("workers", c.workers);
    i("n_points", c.n_points);
    i("n_keypoints", c.n_keypoints);
    i("feat_dim", c.feat_dim);
    i("token_dim", c.token_dim);
    i("decode_points", c.decode_points);
    i("attn_layers", c.attn_layers);
    i("attn_heads", c.attn_heads);
    i("ffn_hidden", c.ffn_hidden);
    s("cage_template", c.cage_template);
    d("cage_margin", c.cage_margin);
    d("region_radius", c.region_radius);
    d("n_ref", c.n_ref);
    b("gsa", c.gsa);
    b("lgf", c.lgf);
    b("dar", c.dar);
    b("cb", c.cb);
    s("dtype", c.dtype);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  if (c.dtype != "f32" && c.dtype != "f64")
    throw ConfigError("dtype must be \"f32\" or \"f64\"");
  if (c.dataset_dir.empty()) throw ConfigError("config needs \"dataset_dir\"");
  if (c.out_dir.empty()) throw ConfigError("config needs \"out_dir\"");
  return c;
}

nets::NetArch arch_from_config(const RunConfig& c) {
  nets::NetArch a;
  a.n_points = c.n_points;
  a.n_keypoints = c.n_keypoints;
  a.feat_dim = c.feat_dim;
  a.token_dim = c.token_dim;
  a.decode_points = c.decode_points;
  a.attn_layers = c.attn_layers;
  a.attn_heads = c.attn_heads;
  a.ffn_hidden = c.ffn_hidden;
  a.cage_template = c.cage_template;
  a.region_radius = c.region_radius;
  a.n_ref = c.n_ref;
  a.gsa = c.gsa;
  a.lgf = c.lgf;
  a.dar = c.dar;
  a.cb = c.cb;
  a.dtype = c.dtype;
  return a;
}

// Commands that resume from a checkpoint take the architecture from its
// arch.json; config keys that contradict it are configuration errors.
void check_arch_conflicts(const json& raw, const nets::NetArch& arch) {
  const json aj = arch.to_json();
  for (const auto& [key, value] : aj.items())
    if (raw.contains(key) && raw.at(key) != value)
      throw ConfigError("config key '" + key + "' conflicts with the checkpoint arch.json (" +
                        raw.at(key).dump() + " vs " + value.dump() + ")");
}

pipe::TrainConfig train_config_from(const RunConfig& c) {
  pipe::TrainConfig t;
  t.lambda_kpt = c.lambda_kpt;
  t.lambda_wkpt = c.lambda_wkpt;
  t.batch = c.batch;
  t.epochs = c.epochs;
  t.lr_deform = c.lr_deform;
  t.lr_retrieval = c.lr_retrieval;
  t.lr_partial = c.lr_partial;
  t.gamma_min = c.gamma_min;
  t.gamma_max = c.gamma_max;
  t.seed = c.seed;
  t.kpt_reg_both = c.kpt_reg_both;
  t.dar_track_regions = c.dar_track_regions;
  t.grad_clip = c.grad_clip;
  t.workers = c.workers;
  t.validate();
  return t;
}

void write_lock(const std::string& out_dir, const std::string& command, const json& raw) {
  fs::create_directories(out_dir);
  json lock;
  lock["command"] = command;
  lock["config"] = raw;
  store::write_text_file((fs::path(out_dir) / "config.lock.json").string(), lock.dump(2) + "\n");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_history_csv(const pipe::TrainHistory& h, const std::string& path, const char* col_a,
                       const char* col_b, const char* col_total) {
  std::string csv = std::string("epoch,step,") + col_a + "," + col_b + "," + col_total + "\n";
  for (const pipe::HistoryRow& r : h.rows)
    csv += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + fmt(r.a) + "," +
           fmt(r.b) + "," + fmt(r.total) + "\n";
  store::write_text_file(path, csv);
}

PointCloud load_target(const std::string& path, int n_points, uint64_t seed) {
  const std::string ext = fs::path(path).extension().string();
  if (ext == ".ply") return data::load_ply(path);
  if (ext == ".obj")
    return sample_mesh_surface(data::load_obj(path), n_points, Rng::derive(seed, 0x7a46));
  throw ConfigError("target file must be .ply or .obj, got '" + path + "'");
}

// ---- subcommand bodies ----

int cmd_gen_data(const std::string& family, int db_n, int train_n, int test_n, uint64_t seed,
                 const std::string& out) {
  data::Family fam;
  try {
    fam = data::family_from_string(family);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (db_n < 0 || train_n < 0 || test_n < 0) throw ConfigError("split counts must be >= 0");
  data::Dataset ds = data::generate_dataset(fam, db_n, train_n, test_n, seed);
  data::save_dataset(ds, out);
  json lock;
  lock["family"] = family;
  lock["db"] = db_n;
  lock["train"] = train_n;
  lock["test"] = test_n;
  lock["seed"] = seed;
  write_lock(out, "gen-data", lock);
  std::printf("gen-data: %zu shapes -> %s\n", ds.shapes.size(), out.c_str());
  return 0;
}

template <class T>
int cmd_train_deform(const RunConfig& cfg) {
  write_lock(cfg.out_dir, "train-deform", cfg.raw);
  const data::Dataset raw = data::load_dataset(cfg.dataset_dir);
  const nets::NetArch arch = arch_from_config(cfg);
  const pipe::PreparedDataset ds =
      pipe::prepare_dataset(raw, arch, cfg.cage_margin, cfg.workers, cfg.fps_random_start);
  for (const std::string& id : ds.skipped)
    std::fprintf(stderr, "warning: cage construction failed for '%s'; shape skipped\n", id.c_str());

  nets::NetBundle<T> bundle = nets::NetBundle<T>::init(arch, cfg.seed);
  const pipe::TrainConfig tc = train_config_from(cfg);
  pipe::TrainHistory history;
  try {
    history = pipe::train_deform(bundle, ds, tc, [](int epoch, double mean) {
      std::printf("epoch %d: mean L_def %.6f\n", epoch, mean);
    });
  } catch (const pipe::TrainingAborted& e) {
    store::save_checkpoint(bundle, (fs::path(cfg.out_dir) / "checkpoint").string());
    std::fprintf(stderr, "training aborted: %s (last good checkpoint written)\n", e.what());
    return 1;
  }
  store::save_checkpoint(bundle, (fs::path(cfg.out_dir) / "checkpoint").string());
  write_history_csv(history, (fs::path(cfg.out_dir) / "loss_deform.csv").string(), "l_sim",
                    "l_kpt", "l_def");
  std::printf("train-deform: %d epochs, checkpoint in %s\n", cfg.epochs, cfg.out_dir.c_str());
  return 0;
}

template <class T>
int cmd_train_retrieval(const RunConfig& cfg) {
  if (cfg.init_checkpoint.empty())
    throw ConfigError("train-retrieval needs \"init_checkpoint\" (a trained deformation checkpoint)");
  write_lock(cfg.out_dir, "train-retrieval", cfg.raw);
  nets::NetBundle<T> bundle = store::load_checkpoint<T>(cfg.init_checkpoint);
  check_arch_conflicts(cfg.raw, bundle.arch);
  const data::Dataset raw = data::load_dataset(cfg.dataset_dir);
  const pipe::PreparedDataset ds =
      pipe::prepare_dataset(raw, bundle.arch, cfg.cage_margin, cfg.workers, cfg.fps_random_start);

  const pipe::TrainConfig tc = train_config_from(cfg);
  pipe::TrainHistory history;
  try {
    history = ret::train_retrieval(bundle, ds, tc, [](int epoch, double mean) {
      std::printf("epoch %d: mean L_ret %.6f\n", epoch, mean);
    });
  } catch (const pipe::TrainingAborted& e) {
    store::save_checkpoint(bundle, (fs::path(cfg.out_dir) / "checkpoint").string());
    std::fprintf(stderr, "training aborted: %s (last good checkpoint written)\n", e.what());
    return 1;
  }
  store::save_checkpoint(bundle, (fs::path(cfg.out_dir) / "checkpoint").string());
  write_history_csv(history, (fs::path(cfg.out_dir) / "loss_retrieval.csv").string(), "l_ret",
                    "included_terms", "l_ret_total");
  std::printf("train-retrieval: %d epochs, checkpoint in %s\n", cfg.epochs, cfg.out_dir.c_str());
  return 0;
}

template <class T>
int cmd_train_partial(const RunConfig& cfg) {
  if (cfg.init_checkpoint.empty())
    throw ConfigError("train-partial needs \"init_checkpoint\" (a trained full-shape checkpoint)");
  write_lock(cfg.out_dir, "train-partial", cfg.raw);
  nets::NetBundle<T> bundle = store::load_checkpoint<T>(cfg.init_checkpoint);
  check_arch_conflicts(cfg.raw, bundle.arch);
  const data::Dataset raw = data::load_dataset(cfg.dataset_dir);
  const pipe::PreparedDataset ds =
      pipe::prepare_dataset(raw, bundle.arch, cfg.cage_margin, cfg.workers, cfg.fps_random_start);

  const pipe::TrainConfig tc = train_config_from(cfg);
  pipe::TrainHistory history;
  try {
    history = pipe::train_partial(bundle, ds, tc, [](int epoch, double mean) {
      std::printf("epoch %d: mean L_pdef %.6f\n", epoch, mean);
    });
  } catch (const pipe::TrainingAborted& e) {
    store::save_checkpoint(bundle, (fs::path(cfg.out_dir) / "checkpoint").string());
    std::fprintf(stderr, "training aborted: %s (last good checkpoint written)\n", e.what());
    return 1;
  }
  store::save_checkpoint(bundle, (fs::path(cfg.out_dir) / "checkpoint").string());
  write_history_csv(history, (fs::path(cfg.out_dir) / "loss_partial.csv").string(), "l_usim",
                    "l_wkpt", "l_pdef");
  std::printf("train-partial: %d epochs, checkpoint in %s\n", cfg.epochs, cfg.out_dir.c_str());
  return 0;
}

template <class T>
int cmd_build_db(const std::string& shapes_dir, const std::string& bundle_dir,
                 const std::string& out, bool verify, int workers) {
  nets::NetBundle<T> bundle = store::load_checkpoint<T>(bundle_dir);
  const data::Dataset raw = data::load_dataset(shapes_dir);
  const pipe::PreparedDataset ds = pipe::prepare_dataset(raw, bundle.arch, 1.2, workers);
  for (const std::string& id : ds.skipped)
    std::fprintf(stderr, "warning: cage construction failed for '%s'; record skipped\n",
                 id.c_str());
  ret::TokenDatabase db = ret::build_database(ds.db, bundle, workers);
  db.skipped = ds.skipped;
  ret::save_database(db, out);
  json lock;
  lock["shapes"] = shapes_dir;
  lock["bundle"] = bundle_dir;
  lock["verify"] = verify;
  write_lock(out, "build-db", lock);
  if (verify) {
    ret::TokenDatabase reloaded = ret::load_database(out);
    const std::vector<std::string> bad = ret::verify_database(reloaded, bundle, workers);
    if (!bad.empty()) {
      for (const std::string& id : bad)
        std::fprintf(stderr, "verify: token mismatch for record '%s'\n", id.c_str());
      return 1;
    }
    std::printf("build-db: verified %zu records\n", reloaded.records.size());
  }
  std::printf("build-db: %zu records -> %s\n", db.records.size(), out.c_str());
  return 0;
}

template <class T>
int cmd_red(const std::string& target_path, const std::string& db_dir,
            const std::string& bundle_dir, bool partial, int topk, uint64_t seed,
            const std::string& out_dir) {
  nets::NetBundle<T> bundle = store::load_checkpoint<T>(bundle_dir);
  ret::TokenDatabase db = ret::load_database(db_dir);
  ret::check_fingerprint(db, bundle);

  PointCloud target = normalize_unit_cube(load_target(target_path, bundle.arch.n_points, seed));
  fs::create_directories(out_dir);
  {
    json lock;
    lock["target"] = target_path;
    lock["db"] = db_dir;
    lock["bundle"] = bundle_dir;
    lock["partial"] = partial;
    lock["topk"] = topk;
    lock["seed"] = seed;
    write_lock(out_dir, "red", lock);
  }

  std::vector<std::pair<std::string, PointCloud>> one = {{"target", target}};
  ret::EvalSummary summary = ret::evaluate_topk(one, db, bundle, static_cast<std::size_t>(topk),
                                                partial, bundle.arch.cb);
  const ret::EvalInstance& inst = summary.instances[0];

  json result;
  result["target"] = target_path;
  result["partial"] = partial;
  result["metric_kind"] = partial ? "ucd" : "cd";
  result["best_id"] = inst.best_candidate;
  result["best_metric"] = inst.best_metric;
  json ranked = json::array();
  const std::vector<std::string> frozen = {"\x01"};
  for (const ret::EvalRow& row : inst.rows) {
    // deform this candidate again to write the output cloud
    const ret::ShapeRecord* rec = nullptr;
    for (const ret::ShapeRecord& r : db.records)
      if (r.id == row.candidate_id) rec = &r;
    ad::Graph<T> g;
    nets::NetCtx<T> ctx{g, bundle, frozen};
    pipe::SourceShape src;
    src.id = rec->id;
    src.points = rec->points;
    src.cage = rec->cage;
    src.mvc = rec->mvc;
    pipe::DeformForward<T> fwd =
        pipe::deform_forward(ctx, src, target, partial && bundle.has_partial());
    TriMesh cloud;
    const auto& v = fwd.deformed.values();
    for (std::size_t i = 0; i < rec->points.size(); ++i)
      cloud.vertices.push_back({static_cast<double>(v[i * 3]), static_cast<double>(v[i * 3 + 1]),
                                static_cast<double>(v[i * 3 + 2])});
    char name[64];
    std::snprintf(name, sizeof(name), "candidate_%02d_%s.obj", row.rank, rec->id.c_str());
    data::save_obj(cloud, (fs::path(out_dir) / name).string());

    json entry;
    entry["rank"] = row.rank;
    entry["id"] = row.candidate_id;
    entry["token_distance"] = row.token_distance;
    entry["metric"] = row.metric;
    entry["obj"] = name;
    ranked.push_back(entry);
  }
  result["ranked"] = ranked;
  store::write_text_file((fs::path(out_dir) / "result.json").string(), result.dump(2) + "\n");
  std::printf("red: best candidate %s (%s %.6f) -> %s\n", inst.best_candidate.c_str(),
              partial ? "ucd" : "cd", inst.best_metric, out_dir.c_str());
  return 0;
}

template <class T>
int cmd_eval(const std::string& shapes_dir, const std::string& split, const std::string& db_dir,
             const std::string& bundle_dir, double occlusion, int topk, bool no_cb, uint64_t seed,
             const std::string& out_csv, int workers) {
  if (split != "db" && split != "train" && split != "test")
    throw ConfigError("--split must be db, train or test");
  if (occlusion < 0.0 || occlusion >= 1.0) throw ConfigError("--occlusion must lie in [0, 1)");
  nets::NetBundle<T> bundle = store::load_checkpoint<T>(bundle_dir);
  ret::TokenDatabase db = ret::load_database(db_dir);
  ret::check_fingerprint(db, bundle);

  const data::Dataset raw = data::load_dataset(shapes_dir);
  const bool partial = occlusion > 0.0;
  std::vector<std::pair<std::string, PointCloud>> targets;
  for (const data::DatasetShape& s : raw.shapes) {
    if (s.split != split) continue;
    PointCloud pts = normalize_unit_cube(sample_mesh_surface(
        s.mesh, bundle.arch.n_points, pipe::shape_sampling_seed(raw.seed, s.id)));
    if (partial) pts = random_slice(pts, occlusion, pipe::shape_sampling_seed(seed ^ 0x517c, s.id));
    targets.push_back({s.id, pts});
  }
  if (targets.empty()) throw ConfigError("split '" + split + "' has no shapes");

  const bool cb = bundle.arch.cb && !no_cb;
  ret::EvalSummary summary =
      ret::evaluate_topk(targets, db, bundle, static_cast<std::size_t>(topk), partial, cb, workers);

  std::string csv = "target_id,rank,candidate_id,token_distance,metric,best\n";
  for (const ret::EvalInstance& inst : summary.instances)
    for (const ret::EvalRow& row : inst.rows)
      csv += row.target_id + "," + std::to_string(row.rank) + "," + row.candidate_id + "," +
             fmt(row.token_distance) + "," + fmt(row.metric) + "," + (row.best ? "1" : "0") + "\n";
  csv += "summary,,,," + fmt(summary.mean_best) + ",\n";
  const fs::path parent = fs::path(out_csv).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  store::write_text_file(out_csv, csv);
  std::printf("eval: %zu instances, mean %s %.6f -> %s\n", summary.instances.size(),
              partial ? "ucd" : "cd", summary.mean_best, out_csv.c_str());
  return 0;
}

template <class F32, class F64>
int dispatch_dtype(const std::string& dtype, F32&& f32, F64&& f64) {
  if (dtype == "f64") return f64();
  return f32();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"keypoint-driven shape retrieval and cage deformation"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic shape dataset");
  std::string gen_family = "table", gen_out;
  int gen_db = 50, gen_train = 200, gen_test = 50;
  uint64_t gen_seed = 1;
  gen->add_option("--family", gen_family, "table | chair | cabinet");
  gen->add_option("--db", gen_db, "database shape count");
  gen->add_option("--train", gen_train, "training shape count");
  gen->add_option("--test", gen_test, "test shape count");
  gen->add_option("--seed", gen_seed, "sampling seed");
  gen->add_option("--out", gen_out, "output dataset directory")->required();

  std::string cfg_path_deform, cfg_path_retrieval, cfg_path_partial;
  auto* td = app.add_subcommand("train-deform", "train the deformation module from scratch");
  td->add_option("--config", cfg_path_deform, "JSON run config")->required();
  auto* tr = app.add_subcommand("train-retrieval",
                                "train the retrieval heads on a frozen deformation module");
  tr->add_option("--config", cfg_path_retrieval, "JSON run config")->required();
  auto* tp = app.add_subcommand("train-partial",
                                "train the partial keypoint predictor (teacher-student)");
  tp->add_option("--config", cfg_path_partial, "JSON run config")->required();

  auto* bd = app.add_subcommand("build-db", "tokenize database shapes into a searchable directory");
  std::string bd_shapes, bd_bundle, bd_out;
  bool bd_verify = false;
  int bd_workers = 1;
  bd->add_option("--shapes", bd_shapes, "dataset directory")->required();
  bd->add_option("--bundle", bd_bundle, "checkpoint directory")->required();
  bd->add_option("--out", bd_out, "output database directory")->required();
  bd->add_flag("--verify", bd_verify, "re-load and regenerate tokens to verify");
  bd->add_option("--workers", bd_workers, "parallel workers");

  auto* rd = app.add_subcommand("red",
                                "retrieve and deform the best database candidates for a target");
  std::string rd_target, rd_db, rd_bundle, rd_out;
  bool rd_partial = false;
  int rd_topk = 10;
  uint64_t rd_seed = 1;
  rd->add_option("--target", rd_target, "target point cloud (.ply) or mesh (.obj)")->required();
  rd->add_option("--db", rd_db, "token database directory")->required();
  rd->add_option("--bundle", rd_bundle, "checkpoint directory")->required();
  rd->add_flag("--partial", rd_partial, "treat the target as a partial scan");
  rd->add_option("--topk", rd_topk, "number of candidates");
  rd->add_option("--seed", rd_seed, "sampling seed for .obj targets");
  rd->add_option("--out", rd_out, "output directory")->required();

  auto* ev = app.add_subcommand("eval", "retrieve-and-deform a dataset split and report metrics");
  std::string ev_shapes, ev_split = "test", ev_db, ev_bundle, ev_out;
  double ev_occlusion = 0.0;
  int ev_topk = 10, ev_workers = 1;
  bool ev_no_cb = false;
  uint64_t ev_seed = 1;
  ev->add_option("--shapes", ev_shapes, "dataset directory")->required();
  ev->add_option("--split", ev_split, "db | train | test");
  ev->add_option("--db", ev_db, "token database directory")->required();
  ev->add_option("--bundle", ev_bundle, "checkpoint directory")->required();
  ev->add_option("--occlusion", ev_occlusion, "slicing ratio in [0,1); 0 evaluates full shapes");
  ev->add_option("--topk", ev_topk, "candidates per target");
  ev->add_flag("--no-cb", ev_no_cb, "disable density-weighted retrieval for partial targets");
  ev->add_option("--seed", ev_seed, "slicing seed");
  ev->add_option("--out", ev_out, "output CSV path")->required();
  ev->add_option("--workers", ev_workers, "parallel workers");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_family, gen_db, gen_train, gen_test, gen_seed, gen_out);
    if (td->parsed()) {
      RunConfig cfg = load_config(cfg_path_deform);
      return dispatch_dtype(cfg.dtype, [&] { return cmd_train_deform<float>(cfg); },
                            [&] { return cmd_train_deform<double>(cfg); });
    }
    if (tr->parsed()) {
      RunConfig cfg = load_config(cfg_path_retrieval);
      if (cfg.init_checkpoint.empty())
        throw ConfigError("train-retrieval needs \"init_checkpoint\"");
      const std::string dtype = store::load_checkpoint_arch(cfg.init_checkpoint).dtype;
      return dispatch_dtype(dtype, [&] { return cmd_train_retrieval<float>(cfg); },
                            [&] { return cmd_train_retrieval<double>(cfg); });
    }
    if (tp->parsed()) {
      RunConfig cfg = load_config(cfg_path_partial);
      if (cfg.init_checkpoint.empty())
        throw ConfigError("train-partial needs \"init_checkpoint\"");
      const std::string dtype = store::load_checkpoint_arch(cfg.init_checkpoint).dtype;
      return dispatch_dtype(dtype, [&] { return cmd_train_partial<float>(cfg); },
                            [&] { return cmd_train_partial<double>(cfg); });
    }
    if (bd->parsed()) {
      const std::string dtype = store::load_checkpoint_arch(bd_bundle).dtype;
      return dispatch_dtype(
          dtype,
          [&] { return cmd_build_db<float>(bd_shapes, bd_bundle, bd_out, bd_verify, bd_workers); },
          [&] { return cmd_build_db<double>(bd_shapes, bd_bundle, bd_out, bd_verify, bd_workers); });
    }
    if (rd->parsed()) {
      const std::string dtype = store::load_checkpoint_arch(rd_bundle).dtype;
      return dispatch_dtype(
          dtype,
          [&] {
            return cmd_red<float>(rd_target, rd_db, rd_bundle, rd_partial, rd_topk, rd_seed, rd_out);
          },
          [&] {
            return cmd_red<double>(rd_target, rd_db, rd_bundle, rd_partial, rd_topk, rd_seed, rd_out);
          });
    }
    if (ev->parsed()) {
      const std::string dtype = store::load_checkpoint_arch(ev_bundle).dtype;
      return dispatch_dtype(
          dtype,
          [&] {
            return cmd_eval<float>(ev_shapes, ev_split, ev_db, ev_bundle, ev_occlusion, ev_topk,
                                   ev_no_cb, ev_seed, ev_out, ev_workers);
          },
          [&] {
            return cmd_eval<double>(ev_shapes, ev_split, ev_db, ev_bundle, ev_occlusion, ev_topk,
                                    ev_no_cb, ev_seed, ev_out, ev_workers);
          });
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
