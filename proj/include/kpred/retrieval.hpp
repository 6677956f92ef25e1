#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "kpred/cage.hpp"
#include "kpred/geometry.hpp"
#include "kpred/nets.hpp"
#include "kpred/pipeline.hpp"

namespace kpred::ret {

// One database entry: geometry carriers plus the retrieval tokens. The global
// token is always the row-major concatenation of the region tokens.
struct ShapeRecord {
  std::string id;
  PointCloud points;
  Keypoints keypoints;
  Cage cage;
  MvcWeights mvc;
  std::vector<double> region_tokens;  // token_rows x token_dim
  std::vector<double> global_token;

  pipe::SourceShape as_source(int n_keypoints) const {
    pipe::SourceShape s;
    s.id = id;
    s.points = points;
    s.cage = cage;
    s.mvc = mvc;
    for (int idx : farthest_point_sampling(points, n_keypoints))
      s.fps_targets.push_back(points.points[idx]);
    return s;
  }
};

struct TokenDatabase {
  uint64_t fingerprint = 0;
  int n_keypoints = 0;
  int token_dim = 0;
  int token_rows = 0;  // n_keypoints with per-region tokens, 1 with a single global token
  std::vector<ShapeRecord> records;
  std::vector<std::string> skipped;  // shapes dropped because cage construction failed
};

struct TokenQuery {
  std::vector<double> region_tokens;
  std::vector<double> global_token;
  std::vector<double> densities;  // one per keypoint region
  Keypoints keypoints;
};

struct RankedHit {
  std::string id;
  std::size_t index = 0;
  double distance = 0.0;
};

// Ascending L1 distance over global tokens; ties break toward the smaller id.
std::vector<RankedHit> retrieve_full(const std::vector<double>& global_token,
                                     const TokenDatabase& db, std::size_t k);

// Ascending density-weighted sum of per-region L1 distances. With unit weights
// the ranking equals retrieve_full by the concatenation identity.
std::vector<RankedHit> retrieve_partial(const std::vector<double>& region_tokens,
                                        const std::vector<double>& densities,
                                        const TokenDatabase& db, std::size_t k);

// Database directory layout: manifest.json plus records/<id>/{points,
// keypoints, cage_v, cage_f, mvc, tokens}.kprd.
void save_database(const TokenDatabase& db, const std::string& dir);
TokenDatabase load_database(const std::string& dir);

// ---- token computation ----

template <class T>
TokenQuery compute_tokens(nets::NetBundle<T>& bundle, const PointCloud& pc,
                          bool partial_predictor = false) {
  const nets::NetArch& arch = bundle.arch;
  ad::Graph<T> g;
  const std::vector<std::string> frozen = {"\x01"};
  nets::NetCtx<T> ctx{g, bundle, frozen};

  ad::Tensor<T> pts = nets::points_tensor(g, pc);
  ad::Tensor<T> features = nets::encode_points(ctx, pts);
  ad::Tensor<T> kp = nets::predict_keypoints(ctx, pts, features, partial_predictor);

  TokenQuery q;
  q.keypoints = nets::keypoints_from_tensor(kp);
  const RegionAssignment regions =
      region_query(pc, q.keypoints, arch.region_radius, arch.resolved_n_ref());
  q.densities = regions.density;

  ad::Tensor<T> tokens;
  if (arch.lgf) {
    ad::Tensor<T> local = nets::aggregate_local(ctx, features, regions);
    tokens = nets::token_head(ctx, nets::self_attention(ctx, local, "attn_r"));
  } else {
    tokens = nets::token_head(ctx, nets::global_feature(ctx, features));
  }
  const auto& v = tokens.values();
  q.region_tokens.assign(v.begin(), v.end());
  q.global_token = q.region_tokens;  // concatenation in keypoint order
  return q;
}

// Builds one record per shape: keypoints, cage, MVC weights and tokens.
// Shapes whose cage construction fails are skipped and reported.
template <class T>
TokenDatabase build_database(const std::vector<pipe::SourceShape>& shapes,
                             nets::NetBundle<T>& bundle, int workers = 1) {
  const nets::NetArch& arch = bundle.arch;
  TokenDatabase db;
  db.fingerprint = bundle.fingerprint();
  db.n_keypoints = arch.n_keypoints;
  db.token_dim = arch.token_dim;
  db.token_rows = arch.lgf ? arch.n_keypoints : 1;

  std::vector<ShapeRecord> records(shapes.size());
  parallel_for(shapes.size(), workers, [&](std::size_t i) {
    const pipe::SourceShape& s = shapes[i];
    ShapeRecord r;
    r.id = s.id;
    r.points = s.points;
    r.cage = s.cage;
    r.mvc = s.mvc;
    TokenQuery q = compute_tokens(bundle, s.points, false);
    r.keypoints = q.keypoints;
    r.region_tokens = q.region_tokens;
    r.global_token = q.global_token;
    records[i] = std::move(r);
  });
  for (auto& r : records) db.records.push_back(std::move(r));
  return db;
}

template <class T>
void check_fingerprint(const TokenDatabase& db, nets::NetBundle<T>& bundle) {
  if (db.fingerprint != bundle.fingerprint())
    throw std::runtime_error("token database fingerprint does not match the bundle (stale database)");
}

// Regenerates every record's tokens from its stored points and reports ids
// whose stored tokens differ (bit-compare after the same cast path).
template <class T>
std::vector<std::string> verify_database(const TokenDatabase& db, nets::NetBundle<T>& bundle,
                                         int workers = 1) {
  check_fingerprint(db, bundle);
  std::vector<uint8_t> bad(db.records.size(), 0);
  parallel_for(db.records.size(), workers, [&](std::size_t i) {
    TokenQuery q = compute_tokens(bundle, db.records[i].points, false);
    if (q.region_tokens != db.records[i].region_tokens) bad[i] = 1;
  });
  std::vector<std::string> mismatched;
  for (std::size_t i = 0; i < db.records.size(); ++i)
    if (bad[i]) mismatched.push_back(db.records[i].id);
  return mismatched;
}

// ---- retrieval training ----

// Reconstruction loss over region tokens: the decoder rebuilds each source
// region from (token, source keypoints) and, when DAR is on, each region of
// the frozen-module deformation result from (token, target keypoints). The
// returned value is the mean over the included reconstruction terms; terms
// with an empty ground-truth region are skipped and the divisor shrinks.
template <class T>
struct RetLoss {
  ad::Tensor<T> total;
  int included_terms = 0;
};

template <class T>
RetLoss<T> loss_ret(nets::NetCtx<T>& ctx, const pipe::SourceShape& sx, const PointCloud& sy,
                    bool track_deformed_regions = false) {
  const nets::NetArch& arch = ctx.bundle.arch;
  ad::Graph<T>& g = ctx.g;

  // Deformation side runs frozen; its outputs are constants of this loss.
  ad::Graph<T> dg;
  const std::vector<std::string> frozen = {"\x01"};
  nets::NetCtx<T> dctx{dg, ctx.bundle, frozen};
  pipe::DeformForward<T> fwd = pipe::deform_forward(dctx, sx, sy, false);
  const Keypoints k_x = nets::keypoints_from_tensor(fwd.k_src);
  const Keypoints k_y = nets::keypoints_from_tensor(fwd.k_tgt);
  PointCloud deformed;
  {
    const auto& v = fwd.deformed.values();
    deformed.points.reserve(sx.points.size());
    for (std::size_t i = 0; i < sx.points.size(); ++i)
      deformed.points.push_back(Vec3{static_cast<double>(v[i * 3]),
                                     static_cast<double>(v[i * 3 + 1]),
                                     static_cast<double>(v[i * 3 + 2])});
  }

  // Trainable side: tokens of the source shape.
  ad::Tensor<T> pts = nets::points_tensor(g, sx.points);
  ad::Tensor<T> features = nets::encode_points(ctx, pts);
  const RegionAssignment regions_x =
      region_query(sx.points, k_x, arch.region_radius, arch.resolved_n_ref());
  ad::Tensor<T> tokens;
  if (arch.lgf) {
    ad::Tensor<T> local = nets::aggregate_local(ctx, features, regions_x);
    tokens = nets::token_head(ctx, nets::self_attention(ctx, local, "attn_r"));
  } else {
    tokens = nets::token_head(ctx, nets::global_feature(ctx, features));
  }

  auto flat_keypoints = [&](const Keypoints& k) {
    const int len = static_cast<int>(k.size()) * 3;
    std::vector<T> v;
    v.reserve(len);
    for (const Vec3& p : k) {
      v.push_back(static_cast<T>(p.x));
      v.push_back(static_cast<T>(p.y));
      v.push_back(static_cast<T>(p.z));
    }
    return g.constant(ad::Shape{len}, std::move(v));
  };
  ad::Tensor<T> kx_flat = flat_keypoints(k_x);
  ad::Tensor<T> ky_flat = flat_keypoints(k_y);

  auto region_constant = [&](const PointCloud& cloud, const std::vector<int>& members) {
    std::vector<T> v;
    v.reserve(members.size() * 3);
    for (int idx : members) {
      const Vec3& p = cloud.points[idx];
      v.push_back(static_cast<T>(p.x));
      v.push_back(static_cast<T>(p.y));
      v.push_back(static_cast<T>(p.z));
    }
    return g.constant(ad::Shape{static_cast<int>(members.size()), 3}, std::move(v));
  };

  // deformed-shape regions: re-queried around the target keypoints by
  // default, or (study switch) the deformed images of the source members
  const RegionAssignment regions_x2y =
      track_deformed_regions
          ? regions_x
          : region_query(deformed, k_y, arch.region_radius, arch.resolved_n_ref());

  std::vector<ad::Tensor<T>> terms;
  const int rows = arch.lgf ? arch.n_keypoints : 1;
  std::vector<int> all(sx.points.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);

  for (int i = 0; i < rows; ++i) {
    const std::vector<int>& mx = arch.lgf ? regions_x.members[i] : all;
    if (!mx.empty()) {
      ad::Tensor<T> rec = nets::decode_region(ctx, g.row(tokens, i), kx_flat);
      terms.push_back(ad::chamfer_loss(g, rec, region_constant(sx.points, mx)));
    }
    if (arch.dar) {
      const std::vector<int>& my = arch.lgf ? regions_x2y.members[i] : all;
      if (!my.empty()) {
        ad::Tensor<T> rec = nets::decode_region(ctx, g.row(tokens, i), ky_flat);
        terms.push_back(ad::chamfer_loss(g, rec, region_constant(deformed, my)));
      }
    }
  }
  if (terms.empty())
    throw std::runtime_error("loss_ret: every ground-truth region is empty (degenerate shape)");

  ad::Tensor<T> sum = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) sum = g.add(sum, terms[i]);
  RetLoss<T> out;
  out.total = g.scale(sum, T(1) / static_cast<T>(terms.size()));
  out.included_terms = static_cast<int>(terms.size());
  return out;
}

// Adam on loss_ret over random (database, train) pairs; only the retrieval
// head groups update, the deformation side stays frozen throughout.
template <class T>
pipe::TrainHistory train_retrieval(nets::NetBundle<T>& bundle, const pipe::PreparedDataset& ds,
                                   const pipe::TrainConfig& cfg,
                                   const std::function<void(int, double)>& epoch_cb = {}) {
  cfg.validate();
  if (ds.db.empty() || ds.train.empty())
    throw std::runtime_error("train_retrieval: dataset has no database or training shapes");
  bundle.params.set_trainable_prefixes(bundle.retrieval_prefixes());

  pipe::TrainHistory history;
  Rng rng(Rng::derive(cfg.seed, 0x4e7a));
  auto names = bundle.params.names();
  auto last_good = pipe::detail::Snapshot<T>::take(bundle.params, names);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const std::size_t batch = std::min<std::size_t>(cfg.batch, order.size());
    const std::size_t steps = std::max<std::size_t>(1, order.size() / batch);

    double epoch_total = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      const std::size_t base = step * batch;
      const std::size_t batch_n = std::min(batch, order.size() - base);
      std::vector<std::size_t> srcs(batch_n);
      for (std::size_t i = 0; i < batch_n; ++i) srcs[i] = rng.index(ds.db.size());

      try {
        pipe::HistoryRow row = pipe::detail::run_batch(
            bundle, bundle.retrieval_prefixes(), batch_n, cfg.workers, cfg.lr_retrieval,
            cfg.grad_clip,
            [&](nets::NetCtx<T>& ctx, std::size_t i, double& a, double& b, double& total) {
              RetLoss<T> loss = loss_ret(ctx, ds.db[srcs[i]], ds.train[order[base + i]].points,
                                         cfg.dar_track_regions);
              a = static_cast<double>(loss.total.values()[0]);
              b = static_cast<double>(loss.included_terms);
              total = a;
              return loss.total;
            });
        row.epoch = epoch;
        row.step = static_cast<int>(step);
        epoch_total += row.total;
        history.rows.push_back(row);
        last_good = pipe::detail::Snapshot<T>::take(bundle.params, names);
      } catch (const pipe::TrainingAborted& e) {
        last_good.restore(bundle.params, names);
        throw pipe::TrainingAborted(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                    ", step " + std::to_string(step) + "); parameters restored");
      }
    }
    history.epoch_mean.push_back(epoch_total / static_cast<double>(steps));
    if (epoch_cb) epoch_cb(epoch, history.epoch_mean.back());
  }
  return history;
}

// ---- evaluation ----

struct EvalRow {
  std::string target_id;
  int rank = 0;
  std::string candidate_id;
  double token_distance = 0.0;
  double metric = 0.0;  // CD for full targets, UCD(target -> deformed) for partial
  bool best = false;
};

struct EvalInstance {
  std::string target_id;
  std::vector<EvalRow> rows;
  double best_metric = 0.0;
  double best_undeformed_metric = 0.0;
  std::string best_candidate;
};

struct EvalSummary {
  std::vector<EvalInstance> instances;
  double mean_best = 0.0;
  double mean_best_undeformed = 0.0;
  double improved_fraction = 0.0;  // instances where deformation beats retrieval-only
};

// Retrieve top-k candidates per target, deform every candidate, report the
// best metric. Partial targets use the partial predictor (when trained), the
// UCD metric and, with cb_weighting, density-weighted retrieval.
template <class T>
EvalSummary evaluate_topk(const std::vector<std::pair<std::string, PointCloud>>& targets,
                          const TokenDatabase& db, nets::NetBundle<T>& bundle, std::size_t k,
                          bool partial, bool cb_weighting, int workers = 1) {
  check_fingerprint(db, bundle);
  EvalSummary summary;
  summary.instances.resize(targets.size());
  const std::vector<std::string> frozen = {"\x01"};

  parallel_for(targets.size(), workers, [&](std::size_t ti) {
    const auto& [id, cloud] = targets[ti];
    EvalInstance inst;
    inst.target_id = id;
    const bool use_partial_predictor = partial && bundle.has_partial();
    TokenQuery q = compute_tokens(bundle, cloud, use_partial_predictor);
    std::vector<RankedHit> hits;
    if (partial && cb_weighting && db.token_rows > 1)
      hits = retrieve_partial(q.region_tokens, q.densities, db, k);
    else
      hits = retrieve_full(q.global_token, db, k);

    double best = 0.0, best_undeformed = 0.0;
    for (std::size_t r = 0; r < hits.size(); ++r) {
      const ShapeRecord& rec = db.records[hits[r].index];
      ad::Graph<T> g;
      nets::NetCtx<T> ctx{g, bundle, frozen};
      pipe::SourceShape src;
      src.id = rec.id;
      src.points = rec.points;
      src.cage = rec.cage;
      src.mvc = rec.mvc;
      pipe::DeformForward<T> fwd = pipe::deform_forward(ctx, src, cloud, use_partial_predictor);
      PointCloud deformed;
      deformed.points.reserve(rec.points.size());
      const auto& v = fwd.deformed.values();
      for (std::size_t i = 0; i < rec.points.size(); ++i)
        deformed.points.push_back(Vec3{static_cast<double>(v[i * 3]),
                                       static_cast<double>(v[i * 3 + 1]),
                                       static_cast<double>(v[i * 3 + 2])});
      const double metric =
          partial ? unilateral_chamfer(cloud, deformed) : chamfer_distance(deformed, cloud);
      const double metric_undeformed =
          partial ? unilateral_chamfer(cloud, rec.points) : chamfer_distance(rec.points, cloud);

      EvalRow row;
      row.target_id = id;
      row.rank = static_cast<int>(r) + 1;
      row.candidate_id = rec.id;
      row.token_distance = hits[r].distance;
      row.metric = metric;
      inst.rows.push_back(row);
      if (r == 0 || metric < best) {
        best = metric;
        inst.best_candidate = rec.id;
      }
      if (r == 0 || metric_undeformed < best_undeformed) best_undeformed = metric_undeformed;
    }
    for (EvalRow& row : inst.rows) row.best = row.candidate_id == inst.best_candidate;
    inst.best_metric = best;
    inst.best_undeformed_metric = best_undeformed;
    summary.instances[ti] = std::move(inst);
  });

  double total = 0.0, total_undeformed = 0.0, improved = 0.0;
  for (const EvalInstance& inst : summary.instances) {
    total += inst.best_metric;
    total_undeformed += inst.best_undeformed_metric;
    if (inst.best_metric <= inst.best_undeformed_metric) improved += 1.0;
  }
  const double n = static_cast<double>(summary.instances.size());
  if (n > 0) {
    summary.mean_best = total / n;
    summary.mean_best_undeformed = total_undeformed / n;
    summary.improved_fraction = improved / n;
  }
  return summary;
}

}  // namespace kpred::ret
