#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpred/autodiff.hpp"
#include "kpred/cage.hpp"
#include "kpred/data.hpp"
#include "kpred/geometry.hpp"
#include "kpred/nets.hpp"
#include "kpred/parallel.hpp"
#include "kpred/rng.hpp"

namespace kpred::pipe {

// Database-side shape with its precomputed deformation carriers.
struct SourceShape {
  std::string id;
  PointCloud points;  // normalized, N_P points
  Cage cage;
  MvcWeights mvc;
  Keypoints fps_targets;  // cached FPS(points, N_K), regularizer anchors
};

struct TargetShape {
  std::string id;
  PointCloud points;
  Keypoints fps_targets;
};

struct PreparedDataset {
  std::vector<SourceShape> db;
  std::vector<TargetShape> train, test;
  std::vector<std::string> skipped;  // shapes whose cage construction failed
};

struct TrainConfig {
  double lambda_kpt = 2.0;
  double lambda_wkpt = 20.0;
  int batch = 16;
  int epochs = 10;
  double lr_deform = 1e-3;
  double lr_retrieval = 1e-2;
  double lr_partial = 1e-3;
  double gamma_min = 0.25;
  double gamma_max = 0.90;
  uint64_t seed = 1;
  bool kpt_reg_both = true;
  // study switch: define deformed-shape regions by the deformed images of the
  // source region members instead of re-querying around the target keypoints
  bool dar_track_regions = false;
  double grad_clip = 5.0;
  int workers = 1;

  void validate() const {
    if (lambda_kpt < 0 || lambda_wkpt < 0) throw std::runtime_error("loss weights must be >= 0");
    if (batch < 1) throw std::runtime_error("batch must be >= 1");
    if (epochs < 0) throw std::runtime_error("epochs must be >= 0");
    if (!(gamma_min >= 0 && gamma_max < 1 && gamma_min <= gamma_max))
      throw std::runtime_error("slicing range must satisfy 0 <= min <= max < 1");
  }
};

// Thrown when training hits a non-finite loss; carries the last good step so
// the caller can persist it.
struct TrainingAborted : std::runtime_error {
  explicit TrainingAborted(const std::string& what) : std::runtime_error(what) {}
};

inline uint64_t shape_sampling_seed(uint64_t dataset_seed, const std::string& id) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : id) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return Rng::derive(dataset_seed, h);
}

// Samples, normalizes and caches every dataset shape; builds cage + MVC
// weights for database shapes. Sampling seeds derive from the dataset seed and
// the shape id, so independent commands reproduce identical clouds.
inline PreparedDataset prepare_dataset(const data::Dataset& ds, const nets::NetArch& arch,
                                       double cage_margin = 1.2, int workers = 1,
                                       bool fps_random_start = false) {
  const CageTemplate tpl = cage_template_from_string(arch.cage_template);

  struct Slot {
    TargetShape t;
    SourceShape s;
    bool is_db = false;
    bool skipped = false;
  };
  std::vector<Slot> slots(ds.shapes.size());
  parallel_for(ds.shapes.size(), workers, [&](std::size_t i) {
    const data::DatasetShape& shape = ds.shapes[i];
    Slot& slot = slots[i];
    const uint64_t shape_seed = shape_sampling_seed(ds.seed, shape.id);
    const PointCloud pts =
        normalize_unit_cube(sample_mesh_surface(shape.mesh, arch.n_points, shape_seed));
    Keypoints fps;
    for (int idx : farthest_point_sampling(pts, arch.n_keypoints, shape_seed ^ 0x5f9a,
                                           fps_random_start))
      fps.push_back(pts.points[idx]);
    if (shape.split == "db") {
      slot.is_db = true;
      slot.s.id = shape.id;
      slot.s.points = pts;
      slot.s.fps_targets = fps;
      try {
        slot.s.cage = build_cage(pts, tpl, cage_margin);
        slot.s.cage.source_id = shape.id;
        slot.s.mvc = mvc_matrix(pts, slot.s.cage);
      } catch (const std::exception&) {
        slot.skipped = true;
      }
    } else {
      slot.t.id = shape.id;
      slot.t.points = pts;
      slot.t.fps_targets = fps;
    }
  });

  PreparedDataset out;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].skipped) {
      out.skipped.push_back(ds.shapes[i].id);
    } else if (slots[i].is_db) {
      out.db.push_back(std::move(slots[i].s));
    } else if (ds.shapes[i].split == "train") {
      out.train.push_back(std::move(slots[i].t));
    } else {
      out.test.push_back(std::move(slots[i].t));
    }
  }
  return out;
}

template <class T>
struct DeformForward {
  ad::Tensor<T> deformed;       // N_P x 3
  ad::Tensor<T> k_src, k_tgt;   // N_K x 3
  ad::Tensor<T> influence;      // N_K x N_C, masked
  ad::Tensor<T> cage_deformed;  // N_C x 3
  ad::Tensor<T> tgt_points;     // constant
  RegionAssignment src_regions;
  std::vector<uint8_t> mask;
};

// Full deformation pass: keypoints on both shapes, source-side influence
// field, deformed cage vertices and the interpolated shape. Cage geometry,
// MVC weights, region membership and the influence mask are constants of the
// pass; gradients flow only through the networks and the keypoint difference.
template <class T>
DeformForward<T> deform_forward(nets::NetCtx<T>& ctx, const SourceShape& src,
                                const PointCloud& tgt, bool partial) {
  const nets::NetArch& arch = ctx.bundle.arch;
  const int nk = arch.n_keypoints;
  const int nc = static_cast<int>(src.cage.vertex_count());
  if (src.mvc.rows != src.points.size() || src.mvc.cols != static_cast<std::size_t>(nc))
    throw std::runtime_error("deform_forward: MVC matrix does not match shape/cage");

  DeformForward<T> out;
  ad::Tensor<T> src_pts = nets::points_tensor(ctx.g, src.points);
  out.tgt_points = nets::points_tensor(ctx.g, tgt);

  ad::Tensor<T> f_src = nets::encode_points(ctx, src_pts);
  out.k_src = nets::predict_keypoints(ctx, src_pts, f_src, false);
  ad::Tensor<T> f_tgt = nets::encode_points(ctx, out.tgt_points);
  out.k_tgt = nets::predict_keypoints(ctx, out.tgt_points, f_tgt, partial);

  const Keypoints k_src_val = nets::keypoints_from_tensor(out.k_src);
  out.src_regions = region_query(src.points, k_src_val, arch.region_radius, arch.resolved_n_ref());
  out.mask = build_influence_mask(src.cage.mesh.vertices, k_src_val, arch.region_radius);

  ad::Tensor<T> head_in;
  if (arch.gsa) {
    ad::Tensor<T> local = nets::aggregate_local(ctx, f_src, out.src_regions);
    head_in = nets::self_attention(ctx, local, "attn_d");
  } else {
    head_in = nets::global_feature(ctx, f_src);
  }
  out.influence = nets::influence_field(ctx, head_in, nets::mask_tensor(ctx.g, out.mask, nk, nc));

  ad::Tensor<T> delta_k = ctx.g.sub(out.k_tgt, out.k_src);
  ad::Tensor<T> delta_c = ctx.g.matmul(ctx.g.transpose(out.influence), delta_k);

  std::vector<T> cage_v;
  cage_v.reserve(static_cast<std::size_t>(nc) * 3);
  for (const Vec3& v : src.cage.mesh.vertices) {
    cage_v.push_back(static_cast<T>(v.x));
    cage_v.push_back(static_cast<T>(v.y));
    cage_v.push_back(static_cast<T>(v.z));
  }
  out.cage_deformed = ctx.g.add(ctx.g.constant(ad::Shape{nc, 3}, std::move(cage_v)), delta_c);

  std::vector<T> mvc_v(src.mvc.w.size());
  for (std::size_t i = 0; i < mvc_v.size(); ++i) mvc_v[i] = static_cast<T>(src.mvc.w[i]);
  ad::Tensor<T> mvc =
      ctx.g.constant(ad::Shape{static_cast<int>(src.mvc.rows), nc}, std::move(mvc_v));
  out.deformed = ctx.g.matmul(mvc, out.cage_deformed);
  return out;
}

// ---- losses ----

template <class T>
ad::Tensor<T> loss_sim(ad::Graph<T>& g, ad::Tensor<T> deformed, ad::Tensor<T> tgt) {
  return ad::chamfer_loss(g, deformed, tgt);
}

// Chamfer distance between predicted keypoints and the cached FPS anchors;
// the anchors are constants, so only the keypoints receive gradient.
template <class T>
ad::Tensor<T> loss_kpt(ad::Graph<T>& g, ad::Tensor<T> keypoints, const Keypoints& fps_targets) {
  std::vector<T> v;
  v.reserve(fps_targets.size() * 3);
  for (const Vec3& p : fps_targets) {
    v.push_back(static_cast<T>(p.x));
    v.push_back(static_cast<T>(p.y));
    v.push_back(static_cast<T>(p.z));
  }
  ad::Tensor<T> anchors =
      g.constant(ad::Shape{static_cast<int>(fps_targets.size()), 3}, std::move(v));
  return ad::chamfer_loss(g, keypoints, anchors);
}

template <class T>
struct DeformLoss {
  ad::Tensor<T> total;
  double sim = 0, kpt = 0;
};

template <class T>
DeformLoss<T> loss_def(nets::NetCtx<T>& ctx, const DeformForward<T>& fwd, const SourceShape& src,
                       const TargetShape& tgt, const TrainConfig& cfg) {
  DeformLoss<T> out;
  ad::Tensor<T> sim = loss_sim(ctx.g, fwd.deformed, fwd.tgt_points);
  ad::Tensor<T> kpt = loss_kpt(ctx.g, fwd.k_src, src.fps_targets);
  if (cfg.kpt_reg_both) {
    kpt = ctx.g.scale(ctx.g.add(kpt, loss_kpt(ctx.g, fwd.k_tgt, tgt.fps_targets)), T(0.5));
  }
  out.total = ctx.g.add(sim, ctx.g.scale(kpt, static_cast<T>(cfg.lambda_kpt)));
  out.sim = static_cast<double>(sim.values()[0]);
  out.kpt = static_cast<double>(kpt.values()[0]);
  return out;
}

// Density-weighted L1 between teacher (full-shape, stop-gradient) and student
// keypoints: sum_i D_i * sum_coord |k_full - k_part|.
template <class T>
ad::Tensor<T> loss_wkpt(ad::Graph<T>& g, ad::Tensor<T> k_part, const Keypoints& k_full,
                        const std::vector<double>& densities) {
  std::vector<T> v;
  v.reserve(k_full.size() * 3);
  for (const Vec3& p : k_full) {
    v.push_back(static_cast<T>(p.x));
    v.push_back(static_cast<T>(p.y));
    v.push_back(static_cast<T>(p.z));
  }
  ad::Tensor<T> teacher = g.constant(ad::Shape{static_cast<int>(k_full.size()), 3}, std::move(v));
  const int nk = static_cast<int>(densities.size());
  std::vector<T> d(densities.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(densities[i]);
  ad::Tensor<T> weights = g.constant(ad::Shape{nk}, std::move(d));
  ad::Tensor<T> per_keypoint = g.row_sum(g.abs_val(g.sub(k_part, teacher)));
  return g.sum_all(g.mul(per_keypoint, weights));
}

template <class T>
struct PartialLoss {
  ad::Tensor<T> total;
  double usim = 0, wkpt = 0;
};

template <class T>
PartialLoss<T> loss_pdef(nets::NetCtx<T>& ctx, const DeformForward<T>& fwd,
                         const Keypoints& k_full_teacher, const std::vector<double>& densities,
                         const TrainConfig& cfg) {
  PartialLoss<T> out;
  ad::Tensor<T> usim = ad::ucd_loss(ctx.g, fwd.tgt_points, fwd.deformed);
  ad::Tensor<T> wkpt = loss_wkpt(ctx.g, fwd.k_tgt, k_full_teacher, densities);
  out.total = ctx.g.add(usim, ctx.g.scale(wkpt, static_cast<T>(cfg.lambda_wkpt)));
  out.usim = static_cast<double>(usim.values()[0]);
  out.wkpt = static_cast<double>(wkpt.values()[0]);
  return out;
}

// ---- training ----

struct HistoryRow {
  int epoch = 0, step = 0;
  double a = 0, b = 0, total = 0;  // meaning depends on the procedure
};

struct TrainHistory {
  std::vector<HistoryRow> rows;
  std::vector<double> epoch_mean;  // mean total loss per epoch
};

namespace detail {

// One gradient accumulation step over a batch of items; forwards run in
// parallel when workers > 1, gradients reduce in item order so the result is
// identical for any worker count.
template <class T, class ItemFn>
HistoryRow run_batch(nets::NetBundle<T>& bundle, const std::vector<std::string>& prefixes,
                     std::size_t batch_n, int workers, double lr, double grad_clip,
                     const ItemFn& item) {
  struct ItemOut {
    std::unique_ptr<ad::Graph<T>> graph;
    double a = 0, b = 0, total = 0;
  };
  std::vector<ItemOut> outs(batch_n);
  try {
    parallel_for(batch_n, workers, [&](std::size_t i) {
      outs[i].graph = std::make_unique<ad::Graph<T>>();
      nets::NetCtx<T> ctx{*outs[i].graph, bundle, prefixes};
      ad::Tensor<T> loss = item(ctx, i, outs[i].a, outs[i].b, outs[i].total);
      outs[i].graph->backward(loss);
    });
  } catch (const TrainingAborted&) {
    throw;
  } catch (const std::exception& e) {
    // non-finite intermediates surface as assorted errors mid-graph; every
    // step failure aborts training the same way
    throw TrainingAborted(e.what());
  }

  HistoryRow row;
  for (std::size_t i = 0; i < batch_n; ++i) {
    if (!std::isfinite(outs[i].total))
      throw TrainingAborted("non-finite loss in batch item " + std::to_string(i));
    outs[i].graph->accumulate_param_grads(bundle.params, T(1.0 / static_cast<double>(batch_n)));
    row.a += outs[i].a / static_cast<double>(batch_n);
    row.b += outs[i].b / static_cast<double>(batch_n);
    row.total += outs[i].total / static_cast<double>(batch_n);
  }
  if (grad_clip > 0) bundle.params.clip_grad_norm(grad_clip);
  bundle.params.adam_step(lr);
  return row;
}

template <class T>
struct Snapshot {
  std::vector<std::vector<T>> values;
  static Snapshot take(const ad::ParamStore<T>& ps, const std::vector<std::string>& names) {
    Snapshot s;
    for (const auto& n : names) s.values.push_back(ps.at(n).value);
    return s;
  }
  void restore(ad::ParamStore<T>& ps, const std::vector<std::string>& names) const {
    for (std::size_t i = 0; i < names.size(); ++i) ps.at(names[i]).value = values[i];
  }
};

}  // namespace detail

// Minibatch Adam on L_def over random (database shape, training shape) pairs,
// reshuffled per epoch. Aborts on non-finite loss after restoring the last
// good parameters.
template <class T>
TrainHistory train_deform(nets::NetBundle<T>& bundle, const PreparedDataset& ds,
                          const TrainConfig& cfg,
                          const std::function<void(int, double)>& epoch_cb = {}) {
  cfg.validate();
  if (ds.db.empty() || ds.train.empty())
    throw std::runtime_error("train_deform: dataset has no database or training shapes");
  bundle.params.set_trainable_prefixes(bundle.deform_prefixes());

  TrainHistory history;
  Rng rng(Rng::derive(cfg.seed, 0x7de0));
  auto names = bundle.params.names();
  auto last_good = detail::Snapshot<T>::take(bundle.params, names);

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
        HistoryRow row = detail::run_batch(
            bundle, bundle.deform_prefixes(), batch_n, cfg.workers, cfg.lr_deform, cfg.grad_clip,
            [&](nets::NetCtx<T>& ctx, std::size_t i, double& a, double& b, double& total) {
              const SourceShape& src = ds.db[srcs[i]];
              const TargetShape& tgt = ds.train[order[base + i]];
              DeformForward<T> fwd = deform_forward(ctx, src, tgt.points, false);
              DeformLoss<T> loss = loss_def(ctx, fwd, src, tgt, cfg);
              a = loss.sim;
              b = loss.kpt;
              total = static_cast<double>(loss.total.values()[0]);
              return loss.total;
            });
        row.epoch = epoch;
        row.step = static_cast<int>(step);
        epoch_total += row.total;
        history.rows.push_back(row);
        last_good = detail::Snapshot<T>::take(bundle.params, names);
      } catch (const TrainingAborted& e) {
        last_good.restore(bundle.params, names);
        throw TrainingAborted(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(step) + "); parameters restored");
      }
    }
    history.epoch_mean.push_back(epoch_total / static_cast<double>(steps));
    if (epoch_cb) epoch_cb(epoch, history.epoch_mean.back());
  }
  return history;
}

// Teacher-student training of the partial keypoint predictor: full shapes are
// sliced with gamma ~ U(gamma_min, gamma_max); only kp_part.* updates.
template <class T>
TrainHistory train_partial(nets::NetBundle<T>& bundle, const PreparedDataset& ds,
                           const TrainConfig& cfg,
                           const std::function<void(int, double)>& epoch_cb = {}) {
  cfg.validate();
  if (ds.db.empty() || ds.train.empty())
    throw std::runtime_error("train_partial: dataset has no database or training shapes");
  if (!bundle.has_partial()) bundle.add_partial_predictor();
  bundle.params.set_trainable_prefixes(bundle.partial_prefixes());

  TrainHistory history;
  Rng rng(Rng::derive(cfg.seed, 0x9a27));
  auto names = bundle.params.names();
  auto last_good = detail::Snapshot<T>::take(bundle.params, names);
  const std::vector<std::string> frozen = {"\x01"};  // matches nothing: all frozen

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
      struct Item {
        std::size_t src;
        double gamma;
        uint64_t slice_seed;
      };
      std::vector<Item> items(batch_n);
      for (std::size_t i = 0; i < batch_n; ++i)
        items[i] = {rng.index(ds.db.size()), rng.uniform(cfg.gamma_min, cfg.gamma_max),
                    rng.next_u64()};

      try {
        HistoryRow row = detail::run_batch(
            bundle, bundle.partial_prefixes(), batch_n, cfg.workers, cfg.lr_partial,
            cfg.grad_clip,
            [&](nets::NetCtx<T>& ctx, std::size_t i, double& a, double& b, double& total) {
              const SourceShape& src = ds.db[items[i].src];
              const TargetShape& full = ds.train[order[base + i]];
              const PointCloud partial =
                  random_slice(full.points, items[i].gamma, items[i].slice_seed);

              // teacher keypoints from the frozen full-shape predictor
              ad::Graph<T> teacher_graph;
              nets::NetCtx<T> tctx{teacher_graph, ctx.bundle, frozen};
              ad::Tensor<T> full_pts = nets::points_tensor(teacher_graph, full.points);
              ad::Tensor<T> k_full = nets::predict_keypoints(
                  tctx, full_pts, nets::encode_points(tctx, full_pts), false);
              const Keypoints teacher = nets::keypoints_from_tensor(k_full);

              DeformForward<T> fwd = deform_forward(ctx, src, partial, true);
              const Keypoints k_part = nets::keypoints_from_tensor(fwd.k_tgt);
              const RegionAssignment regions =
                  region_query(partial, k_part, ctx.bundle.arch.region_radius,
                               ctx.bundle.arch.resolved_n_ref());
              PartialLoss<T> loss = loss_pdef(ctx, fwd, teacher, regions.density, cfg);
              a = loss.usim;
              b = loss.wkpt;
              total = static_cast<double>(loss.total.values()[0]);
              return loss.total;
            });
        row.epoch = epoch;
        row.step = static_cast<int>(step);
        epoch_total += row.total;
        history.rows.push_back(row);
        last_good = detail::Snapshot<T>::take(bundle.params, names);
      } catch (const TrainingAborted& e) {
        last_good.restore(bundle.params, names);
        throw TrainingAborted(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(step) + "); parameters restored");
      }
    }
    history.epoch_mean.push_back(epoch_total / static_cast<double>(steps));
    if (epoch_cb) epoch_cb(epoch, history.epoch_mean.back());
  }
  return history;
}

}  // namespace kpred::pipe
