#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "kpred/data.hpp"
#include "kpred/pipeline.hpp"
#include "kpred/rng.hpp"

using namespace kpred;
using namespace kpred::pipe;

namespace {

nets::NetArch toy_arch() {
  nets::NetArch a;
  a.n_points = 64;
  a.n_keypoints = 3;
  a.feat_dim = 16;
  a.token_dim = 8;
  a.decode_points = 16;
  a.attn_layers = 1;
  a.attn_heads = 4;
  a.ffn_hidden = 32;
  a.cage_template = "icosphere0";  // N_C = 12
  a.dtype = "f64";
  return a;
}

PreparedDataset toy_dataset(const nets::NetArch& arch, std::size_t db_n = 2,
                            std::size_t train_n = 4, std::size_t test_n = 1,
                            uint64_t seed = 5) {
  data::Dataset ds = data::generate_dataset(data::Family::Table, db_n, train_n, test_n, seed);
  return prepare_dataset(ds, arch);
}

PointCloud tensor_cloud(const ad::Tensor<double>& t) {
  PointCloud pc;
  const auto& v = t.values();
  pc.points.reserve(t.rows());
  for (int i = 0; i < t.rows(); ++i)
    pc.points.push_back({v[i * 3], v[i * 3 + 1], v[i * 3 + 2]});
  return pc;
}

}  // namespace

TEST_CASE("prepare_dataset builds cages, weights and fps caches") {
  nets::NetArch arch = toy_arch();
  PreparedDataset ds = toy_dataset(arch);
  REQUIRE(ds.db.size() == 2);
  REQUIRE(ds.train.size() == 4);
  REQUIRE(ds.test.size() == 1);
  CHECK(ds.skipped.empty());
  for (const SourceShape& s : ds.db) {
    CHECK(s.points.size() == 64);
    CHECK(s.mvc.rows == 64);
    CHECK(s.mvc.cols == 12);
    CHECK(s.fps_targets.size() == 3);
    CHECK(encloses(s.cage.mesh, s.points));
  }
}

TEST_CASE("deform_forward with tgt = src is the identity within 1e-5") {
  nets::NetArch arch = toy_arch();
  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 7);
  PreparedDataset ds = toy_dataset(arch);
  const SourceShape& src = ds.db[0];

  ad::Graph<double> g;
  nets::NetCtx<double> ctx{g, bundle, {}};
  DeformForward<double> fwd = deform_forward(ctx, src, src.points, false);

  const Keypoints ks = nets::keypoints_from_tensor(fwd.k_src);
  const Keypoints kt = nets::keypoints_from_tensor(fwd.k_tgt);
  for (std::size_t i = 0; i < ks.size(); ++i) CHECK(norm(ks[i] - kt[i]) == 0.0);

  PointCloud deformed = tensor_cloud(fwd.deformed);
  for (std::size_t i = 0; i < src.points.size(); ++i) {
    CHECK(std::abs(deformed.points[i].x - src.points.points[i].x) < 1e-5);
    CHECK(std::abs(deformed.points[i].y - src.points.points[i].y) < 1e-5);
    CHECK(std::abs(deformed.points[i].z - src.points.points[i].z) < 1e-5);
  }
}

TEST_CASE("zero influence head gives the identity for any target") {
  nets::NetArch arch = toy_arch();
  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 11);  // inf.l1 zero-init
  PreparedDataset ds = toy_dataset(arch);

  ad::Graph<double> g;
  nets::NetCtx<double> ctx{g, bundle, {}};
  DeformForward<double> fwd = deform_forward(ctx, ds.db[1], ds.train[2].points, false);
  for (double v : fwd.influence.values()) CHECK(v == 0.0);
  PointCloud deformed = tensor_cloud(fwd.deformed);
  for (std::size_t i = 0; i < ds.db[1].points.size(); ++i)
    CHECK(norm(deformed.points[i] - ds.db[1].points.points[i]) < 1e-5);
}

TEST_CASE("deform_forward equals manual cage composition") {
  nets::NetArch arch = toy_arch();
  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 13);
  // give the influence head real weights so the deformation is nontrivial
  Rng rng(3);
  for (double& v : bundle.params.at("inf.l1.w").value) v = rng.uniform(-0.3, 0.3);
  PreparedDataset ds = toy_dataset(arch);
  const SourceShape& src = ds.db[0];

  ad::Graph<double> g;
  nets::NetCtx<double> ctx{g, bundle, {}};
  DeformForward<double> fwd = deform_forward(ctx, src, ds.train[0].points, false);

  // recompute through the plain geometry path from the recorded pieces
  InfluenceField inf;
  inf.n_keypoints = arch.n_keypoints;
  inf.n_cage_vertices = src.cage.vertex_count();
  inf.mask = fwd.mask;
  const auto& iv = fwd.influence.values();
  inf.values.assign(iv.begin(), iv.end());
  const std::vector<Vec3> cage_def =
      deform_cage(src.cage, nets::keypoints_from_tensor(fwd.k_src),
                  nets::keypoints_from_tensor(fwd.k_tgt), inf);
  PointCloud manual = apply_cage(src.points, src.mvc, cage_def);

  PointCloud deformed = tensor_cloud(fwd.deformed);
  bool moved = false;
  for (std::size_t i = 0; i < manual.size(); ++i) {
    CHECK(norm(deformed.points[i] - manual.points[i]) < 1e-12);
    moved = moved || norm(deformed.points[i] - src.points.points[i]) > 1e-6;
  }
  CHECK(moved);  // the oracle only means something if the deformation is nontrivial
}

TEST_CASE("loss_sim equals the geometry chamfer exactly in 64-bit") {
  nets::NetArch arch = toy_arch();
  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 17);
  PreparedDataset ds = toy_dataset(arch);

  ad::Graph<double> g;
  nets::NetCtx<double> ctx{g, bundle, {}};
  DeformForward<double> fwd = deform_forward(ctx, ds.db[0], ds.train[1].points, false);
  const double lsim = loss_sim(g, fwd.deformed, fwd.tgt_points).values()[0];
  CHECK(lsim == chamfer_distance(tensor_cloud(fwd.deformed), ds.train[1].points));

  // identity stability: with the zero-init influence head the similarity loss
  // is the chamfer distance between source and target up to MVC reproduction
  CHECK(lsim == doctest::Approx(chamfer_distance(ds.db[0].points, ds.train[1].points))
                    .epsilon(1e-9));
}

TEST_CASE("loss_kpt basic cases and brute-force equality") {
  ad::Graph<double> g;
  Keypoints fps = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  std::vector<double> kv = {0, 0, 0, 1, 0, 0, 0, 1, 0};
  ad::Tensor<double> k = g.constant({3, 3}, kv);
  CHECK(loss_kpt(g, k, fps).values()[0] == 0.0);

  ad::Graph<double> g2;
  ad::Tensor<double> single = g2.constant({1, 3}, {0, 0, 0});
  CHECK(loss_kpt(g2, single, {{1, 0, 0}}).values()[0] == doctest::Approx(2.0).epsilon(1e-15));

  Rng rng(9);
  ad::Graph<double> g3;
  std::vector<double> rv(9);
  for (double& v : rv) v = rng.uniform(-1, 1);
  Keypoints anchors;
  PointCloud kp_cloud;
  for (int i = 0; i < 3; ++i) {
    anchors.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    kp_cloud.points.push_back({rv[i * 3], rv[i * 3 + 1], rv[i * 3 + 2]});
  }
  PointCloud anchor_cloud;
  anchor_cloud.points = anchors;
  CHECK(loss_kpt(g3, g3.constant({3, 3}, rv), anchors).values()[0] ==
        doctest::Approx(chamfer_distance(kp_cloud, anchor_cloud)).epsilon(1e-12));
}

TEST_CASE("loss_def composition and breakdown") {
  nets::NetArch arch = toy_arch();
  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 19);
  PreparedDataset ds = toy_dataset(arch);
  TrainConfig cfg;
  cfg.lambda_kpt = 0.0;

  ad::Graph<double> g;
  nets::NetCtx<double> ctx{g, bundle, {}};
  DeformForward<double> fwd = deform_forward(ctx, ds.db[0], ds.train[0].points, false);
  DeformLoss<double> zero_lambda = loss_def(ctx, fwd, ds.db[0], ds.train[0], cfg);
  CHECK(zero_lambda.total.values()[0] == doctest::Approx(zero_lambda.sim).epsilon(1e-15));

  cfg.lambda_kpt = 2.0;
  DeformLoss<double> full = loss_def(ctx, fwd, ds.db[0], ds.train[0], cfg);
  CHECK(full.total.values()[0] ==
        doctest::Approx(full.sim + 2.0 * full.kpt).epsilon(1e-12));
}

TEST_CASE("loss_wkpt cases") {
  ad::Graph<double> g;
  Keypoints full = {{0.1, 0.2, 0.3}, {0, 0, 0}};
  std::vector<double> same = {0.1, 0.2, 0.3, 0, 0, 0};
  CHECK(loss_wkpt(g, g.constant({2, 3}, same), full, {1.0, 1.0}).values()[0] == 0.0);

  std::vector<double> moved = {0.2, 0.2, 0.3, 0.4, -0.5, 0.6};
  CHECK(loss_wkpt(g, g.constant({2, 3}, moved), full, {0.0, 0.0}).values()[0] == 0.0);

  ad::Graph<double> g2;
  CHECK(loss_wkpt(g2, g2.constant({1, 3}, {0.1, 0.0, 0.0}), {{0, 0, 0}}, {1.0}).values()[0] ==
        doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("zero densities zero the weighted keypoint gradient exactly") {
  ad::Graph<double> g;
  ad::Tensor<double> k_part = g.leaf({2, 3}, {0.3, -0.1, 0.2, 0.0, 0.5, -0.4});
  Keypoints teacher = {{0, 0, 0}, {0.1, 0.1, 0.1}};
  ad::Tensor<double> loss = loss_wkpt(g, k_part, teacher, {0.0, 0.0});
  g.backward(loss);
  for (double gv : g.grad_of(k_part.id)) CHECK(gv == 0.0);

  ad::Graph<double> g2;
  ad::Tensor<double> k2 = g2.leaf({2, 3}, {0.3, -0.1, 0.2, 0.0, 0.5, -0.4});
  ad::Tensor<double> loss2 = loss_wkpt(g2, k2, teacher, {0.0, 1.0});
  g2.backward(loss2);
  const auto& grad = g2.grad_of(k2.id);
  for (int j = 0; j < 3; ++j) CHECK(grad[j] == 0.0);       // weighted out
  CHECK((grad[3] != 0.0 || grad[4] != 0.0 || grad[5] != 0.0));
}

TEST_CASE("loss_pdef composition on a toy instance") {
  nets::NetArch arch = toy_arch();
  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 23);
  bundle.add_partial_predictor();
  PreparedDataset ds = toy_dataset(arch);
  TrainConfig cfg;

  const PointCloud partial = random_slice(ds.train[0].points, 0.4, 77);
  ad::Graph<double> g;
  nets::NetCtx<double> ctx{g, bundle, {}};
  DeformForward<double> fwd = deform_forward(ctx, ds.db[0], partial, true);

  ad::Graph<double> tg;
  nets::NetCtx<double> tctx{tg, bundle, {}};
  ad::Tensor<double> full_pts = nets::points_tensor(tg, ds.train[0].points);
  const Keypoints teacher = nets::keypoints_from_tensor(
      nets::predict_keypoints(tctx, full_pts, nets::encode_points(tctx, full_pts), false));

  const Keypoints k_part = nets::keypoints_from_tensor(fwd.k_tgt);
  const RegionAssignment regions =
      region_query(partial, k_part, arch.region_radius, arch.resolved_n_ref());

  PartialLoss<double> loss = loss_pdef(ctx, fwd, teacher, regions.density, cfg);
  // hand-composed: UCD(partial -> deformed) + lambda * sum_i D_i L1
  const double ucd = unilateral_chamfer(partial, tensor_cloud(fwd.deformed));
  double wk = 0.0;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    const Vec3 d = teacher[i] - k_part[i];
    wk += regions.density[i] * (std::abs(d.x) + std::abs(d.y) + std::abs(d.z));
  }
  CHECK(loss.usim == doctest::Approx(ucd).epsilon(1e-12));
  CHECK(loss.wkpt == doctest::Approx(wk).epsilon(1e-12));
  CHECK(loss.total.values()[0] ==
        doctest::Approx(ucd + cfg.lambda_wkpt * wk).epsilon(1e-10));
  CHECK(loss.usim >= 0.0);
}

TEST_CASE("usim is exactly zero when the target is a subset of the deformed cloud") {
  nets::NetArch arch = toy_arch();
  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 29);
  PreparedDataset ds = toy_dataset(arch);
  const SourceShape& src = ds.db[0];
  const PointCloud partial = random_slice(src.points, 0.5, 3);

  ad::Graph<double> g;
  nets::NetCtx<double> ctx{g, bundle, {}};
  // with the zero influence head the deformed cloud reproduces the source
  DeformForward<double> fwd = deform_forward(ctx, src, partial, false);
  const double usim = ad::ucd_loss(g, nets::points_tensor(g, partial), fwd.deformed).values()[0];
  CHECK(usim < 1e-9);
}

TEST_CASE("full L_def gradient passes grad_check on the toy instance") {
  nets::NetArch arch = toy_arch();
  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 31);
  Rng rng(14);
  for (double& v : bundle.params.at("inf.l1.w").value) v = rng.uniform(-0.2, 0.2);
  PreparedDataset ds = toy_dataset(arch);
  TrainConfig cfg;

  auto eval = [&](ad::ParamStore<double>& store, bool with_grad) {
    (void)store;
    ad::Graph<double> g;
    nets::NetCtx<double> ctx{g, bundle, bundle.deform_prefixes()};
    DeformForward<double> fwd = deform_forward(ctx, ds.db[0], ds.train[0].points, false);
    DeformLoss<double> loss = loss_def(ctx, fwd, ds.db[0], ds.train[0], cfg);
    if (with_grad) {
      g.backward(loss.total);
      g.accumulate_param_grads(bundle.params);
    }
    return loss.total.values()[0];
  };
  bundle.params.set_trainable_prefixes(bundle.deform_prefixes());
  CHECK(ad::grad_check(eval, bundle.params, 1e-5, 64, 99) < 1e-4);
}

TEST_CASE("stop-gradient contract: cached constants do not change gradients") {
  nets::NetArch arch = toy_arch();
  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 37);
  PreparedDataset ds = toy_dataset(arch);

  // L_sim never touches the FPS anchors; its analytic gradients must be
  // bit-identical no matter what the anchors hold
  auto sim_grads = [&](const SourceShape& src) {
    bundle.params.zero_grad();
    ad::Graph<double> g;
    nets::NetCtx<double> ctx{g, bundle, bundle.deform_prefixes()};
    DeformForward<double> fwd = deform_forward(ctx, src, ds.train[0].points, false);
    g.backward(loss_sim(g, fwd.deformed, fwd.tgt_points));
    g.accumulate_param_grads(bundle.params);
    return bundle.params.at("enc.l0.w").grad;
  };
  const auto base = sim_grads(ds.db[0]);
  SourceShape tweaked = ds.db[0];
  for (Vec3& anchor : tweaked.fps_targets) anchor += Vec3{0.3, -0.2, 0.1};
  CHECK(sim_grads(tweaked) == base);

  // teacher keypoints never receive gradient: the weighted keypoint loss
  // treats them as constants
  ad::Graph<double> g;
  ad::Tensor<double> k_part = g.leaf({2, 3}, {0.1, 0.2, 0.3, -0.1, 0.0, 0.2});
  ad::Tensor<double> loss = loss_wkpt(g, k_part, {{0, 0, 0}, {1, 1, 1}}, {1.0, 1.0});
  g.backward(loss);
  CHECK(g.grad_of(k_part.id).size() == 6);  // gradient reaches the student only
}

TEST_CASE("train_deform runs, records history and is deterministic") {
  nets::NetArch arch = toy_arch();
  PreparedDataset ds = toy_dataset(arch, 2, 4, 1, 9);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 4;
  cfg.seed = 5;
  cfg.lr_deform = 1e-3;

  nets::NetBundle<double> a = nets::NetBundle<double>::init(arch, 55);
  nets::NetBundle<double> b = nets::NetBundle<double>::init(arch, 55);
  TrainHistory ha = train_deform(a, ds, cfg);
  TrainHistory hb = train_deform(b, ds, cfg);
  CHECK(ha.epoch_mean.size() == 1);
  CHECK(ha.rows.size() == 1);
  for (const std::string& name : a.params.names())
    CHECK(a.params.at(name).value == b.params.at(name).value);

  // zero learning rate leaves parameters bit-identical
  nets::NetBundle<double> c = nets::NetBundle<double>::init(arch, 55);
  nets::NetBundle<double> untouched = nets::NetBundle<double>::init(arch, 55);
  TrainConfig zero = cfg;
  zero.lr_deform = 0.0;
  train_deform(c, ds, zero);
  for (const std::string& name : c.params.names())
    CHECK(c.params.at(name).value == untouched.params.at(name).value);
}

TEST_CASE("train_partial freezes everything but the partial predictor") {
  nets::NetArch arch = toy_arch();
  PreparedDataset ds = toy_dataset(arch, 2, 2, 1, 12);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 2;
  cfg.gamma_min = 0.25;
  cfg.gamma_max = 0.6;
  cfg.lr_partial = 1e-3;

  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 71);
  nets::NetBundle<double> reference = nets::NetBundle<double>::init(arch, 71);
  TrainHistory h = train_partial(bundle, ds, cfg);
  CHECK(h.epoch_mean.size() == 2);
  CHECK(bundle.has_partial());
  for (const std::string& name : bundle.params.names()) {
    if (name.rfind("kp_part.", 0) == 0) continue;
    CHECK(bundle.params.at(name).value == reference.params.at(name).value);
  }
  bool part_changed = false;
  for (const std::string& name : bundle.params.names())
    if (name.rfind("kp_part.", 0) == 0 &&
        bundle.params.at(name).value != bundle.params.at("kp." + name.substr(8)).value)
      part_changed = true;
  CHECK(part_changed);
}

TEST_CASE("partial training in gamma=0 debug mode reduces the loss") {
  nets::NetArch arch = toy_arch();
  PreparedDataset ds = toy_dataset(arch, 2, 2, 1, 31);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch = 2;
  cfg.gamma_min = 0.0;
  cfg.gamma_max = 0.0;  // debug: "partial" equals the full shape
  cfg.lr_partial = 3e-3;

  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 83);
  // perturb the student so the teacher-student loss starts positive
  Rng rng(4);
  for (double& v : bundle.params.at("kp.q").value) v += 0.0;  // teacher untouched
  bundle.add_partial_predictor();
  for (double& v : bundle.params.at("kp_part.q").value) v += rng.uniform(-0.5, 0.5);

  TrainHistory h = train_partial(bundle, ds, cfg);
  const double first = h.epoch_mean.front();
  const double last = h.epoch_mean.back();
  CHECK(last < first);
}

TEST_CASE("training aborts on non-finite loss with parameters restored") {
  nets::NetArch arch = toy_arch();
  PreparedDataset ds = toy_dataset(arch, 2, 2, 1, 17);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 2;

  nets::NetBundle<double> bundle = nets::NetBundle<double>::init(arch, 91);
  // poison a spot no relu can mask: the keypoint scorer's final bias
  bundle.params.at("kp.h1.b").value[0] = std::nan("");
  CHECK_THROWS_AS(train_deform(bundle, ds, cfg), TrainingAborted);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.gamma_max = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
  TrainConfig ok;
  ok.validate();
  TrainConfig negative;
  negative.lambda_kpt = -1;
  CHECK_THROWS_AS(negative.validate(), std::runtime_error);
}
