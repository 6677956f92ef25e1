#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "kpred/autodiff.hpp"
#include "kpred/cage.hpp"
#include "kpred/geometry.hpp"
#include "kpred/rng.hpp"

namespace kpred::nets {

// Architecture + ablation flags; serialized as arch.json so checkpoints are
// self-describing.
struct NetArch {
  int n_points = 2048;
  int n_keypoints = 12;
  int feat_dim = 128;
  int token_dim = 32;
  int decode_points = 128;
  int attn_layers = 2;
  int attn_heads = 4;
  int ffn_hidden = 256;
  std::string cage_template = "icosphere1";
  double region_radius = 0.3;
  double n_ref = 0.0;  // 0 resolves to 0.5 * n_points / n_keypoints
  bool gsa = true;     // geometric self-attention on the deformation path
  bool lgf = true;     // per-region local-global tokens (vs one global token)
  bool dar = true;     // second reconstruction task in the retrieval loss
  bool cb = true;      // density-weighted retrieval for partial inputs
  std::string dtype = "f32";

  int cage_vertices() const { return cage_template_vertex_count(cage_template_from_string(cage_template)); }
  double resolved_n_ref() const {
    return n_ref > 0.0 ? n_ref : 0.5 * static_cast<double>(n_points) / n_keypoints;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["n_points"] = n_points;
    j["n_keypoints"] = n_keypoints;
    j["feat_dim"] = feat_dim;
    j["token_dim"] = token_dim;
    j["decode_points"] = decode_points;
    j["attn_layers"] = attn_layers;
    j["attn_heads"] = attn_heads;
    j["ffn_hidden"] = ffn_hidden;
    j["cage_template"] = cage_template;
    j["region_radius"] = region_radius;
    j["n_ref"] = n_ref;
    j["gsa"] = gsa;
    j["lgf"] = lgf;
    j["dar"] = dar;
    j["cb"] = cb;
    j["dtype"] = dtype;
    return j;
  }

  static NetArch from_json(const nlohmann::json& j) {
    NetArch a;
    a.n_points = j.at("n_points").get<int>();
    a.n_keypoints = j.at("n_keypoints").get<int>();
    a.feat_dim = j.at("feat_dim").get<int>();
    a.token_dim = j.at("token_dim").get<int>();
    a.decode_points = j.at("decode_points").get<int>();
    a.attn_layers = j.at("attn_layers").get<int>();
    a.attn_heads = j.at("attn_heads").get<int>();
    a.ffn_hidden = j.at("ffn_hidden").get<int>();
    a.cage_template = j.at("cage_template").get<std::string>();
    a.region_radius = j.at("region_radius").get<double>();
    a.n_ref = j.at("n_ref").get<double>();
    a.gsa = j.at("gsa").get<bool>();
    a.lgf = j.at("lgf").get<bool>();
    a.dar = j.at("dar").get<bool>();
    a.cb = j.at("cb").get<bool>();
    a.dtype = j.at("dtype").get<std::string>();
    return a;
  }

  bool operator==(const NetArch& o) const { return to_json() == o.to_json(); }
};

namespace detail {

template <class T>
void add_linear(ad::ParamStore<T>& ps, Rng& rng, const std::string& prefix, int fan_in,
                int fan_out, bool zero = false) {
  std::vector<T> w(static_cast<std::size_t>(fan_in) * fan_out, T(0));
  if (!zero) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (T& v : w) v = static_cast<T>(rng.uniform(-a, a));
  }
  ps.add(prefix + ".w", ad::Shape{fan_in, fan_out}, std::move(w));
  ps.add(prefix + ".b", ad::Shape{fan_out}, std::vector<T>(fan_out, T(0)));
}

template <class T>
void add_attention(ad::ParamStore<T>& ps, Rng& rng, const std::string& side, const NetArch& arch) {
  const int d = arch.feat_dim;
  const int dh = d / arch.attn_heads;
  const double a = std::sqrt(6.0 / (d + dh));
  for (int l = 0; l < arch.attn_layers; ++l) {
    const std::string lp = side + "." + std::to_string(l) + ".";
    for (int h = 0; h < arch.attn_heads; ++h) {
      for (const char* proj : {"wq", "wk", "wv"}) {
        std::vector<T> w(static_cast<std::size_t>(d) * dh);
        for (T& v : w) v = static_cast<T>(rng.uniform(-a, a));
        ps.add(lp + proj + std::to_string(h), ad::Shape{d, dh}, std::move(w));
      }
    }
    add_linear(ps, rng, lp + "wo", d, d);
    ps.add(lp + "ln1.g", ad::Shape{d}, std::vector<T>(d, T(1)));
    ps.add(lp + "ln1.b", ad::Shape{d}, std::vector<T>(d, T(0)));
    add_linear(ps, rng, lp + "f1", d, arch.ffn_hidden);
    add_linear(ps, rng, lp + "f2", arch.ffn_hidden, d);
    ps.add(lp + "ln2.g", ad::Shape{d}, std::vector<T>(d, T(1)));
    ps.add(lp + "ln2.b", ad::Shape{d}, std::vector<T>(d, T(0)));
  }
}

}  // namespace detail

template <class T>
struct NetBundle {
  NetArch arch;
  ad::ParamStore<T> params;

  bool has_partial() const { return params.has("kp_part.h0.w"); }

  // The partial-shape keypoint predictor starts from the trained full one.
  void add_partial_predictor() {
    if (has_partial()) throw std::runtime_error("partial predictor already present");
    for (const char* name : {"h0.w", "h0.b", "h1.w", "h1.b", "q"}) {
      const auto& src = params.at(std::string("kp.") + name);
      params.add(std::string("kp_part.") + name, src.shape, src.value);
    }
  }

  static NetBundle init(const NetArch& arch, uint64_t seed) {
    NetBundle b;
    b.arch = arch;
    if (arch.feat_dim % arch.attn_heads != 0)
      throw std::runtime_error("feat_dim must be divisible by attn_heads");
    Rng rng(Rng::derive(seed, 0xb0d1));
    auto& ps = b.params;
    const int d = arch.feat_dim, nk = arch.n_keypoints, nc = arch.cage_vertices();

    detail::add_linear(ps, rng, "enc.l0", 3, 64);
    detail::add_linear(ps, rng, "enc.l1", 64, 128);
    detail::add_linear(ps, rng, "enc.l2", 128, d);

    detail::add_linear(ps, rng, "kp.h0", d, 64);
    detail::add_linear(ps, rng, "kp.h1", 64, 64);
    {
      std::vector<T> q(static_cast<std::size_t>(nk) * 64);
      const double a = std::sqrt(6.0 / (64 + nk));
      for (T& v : q) v = static_cast<T>(rng.uniform(-a, a));
      ps.add("kp.q", ad::Shape{nk, 64}, std::move(q));
    }

    if (arch.gsa) {
      detail::add_attention(ps, rng, "attn_d", arch);
      detail::add_linear(ps, rng, "inf.l0", d, 128);
      // zero-initialized so training starts from the identity deformation
      detail::add_linear(ps, rng, "inf.l1", 128, nc, /*zero=*/true);
    } else {
      detail::add_linear(ps, rng, "infg.l0", d, 128);
      detail::add_linear(ps, rng, "infg.l1", 128, nk * nc, /*zero=*/true);
    }

    if (arch.lgf) {
      detail::add_attention(ps, rng, "attn_r", arch);
      detail::add_linear(ps, rng, "tok.l0", d, 64);
      detail::add_linear(ps, rng, "tok.l1", 64, arch.token_dim);
    } else {
      detail::add_linear(ps, rng, "tokg.l0", d, 64);
      detail::add_linear(ps, rng, "tokg.l1", 64, arch.token_dim);
    }

    detail::add_linear(ps, rng, "psi.l0", arch.token_dim + 3 * nk, 256);
    detail::add_linear(ps, rng, "psi.l1", 256, 256);
    detail::add_linear(ps, rng, "psi.l2", 256, 3 * arch.decode_points);
    return b;
  }

  std::vector<std::string> deform_prefixes() const {
    if (arch.gsa) return {"enc.", "kp.", "attn_d.", "inf."};
    return {"enc.", "kp.", "infg."};
  }
  std::vector<std::string> retrieval_prefixes() const {
    if (arch.lgf) return {"attn_r.", "tok.", "psi."};
    return {"tokg.", "psi."};
  }
  std::vector<std::string> partial_prefixes() const { return {"kp_part."}; }

  // FNV-1a over the architecture and every parameter buffer; identifies the
  // bundle a token database was built with.
  uint64_t fingerprint() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix_bytes = [&h](const void* data, std::size_t n) {
      const unsigned char* p = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
      }
    };
    const std::string a = arch.to_json().dump();
    mix_bytes(a.data(), a.size());
    for (const std::string& name : params.names()) {
      mix_bytes(name.data(), name.size());
      const auto& p = params.at(name);
      mix_bytes(p.value.data(), p.value.size() * sizeof(T));
    }
    return h;
  }
};

// Binds a graph, a bundle, and the set of trainable parameter groups for one
// forward pass; everything outside the trainable prefixes enters the graph as
// a constant so frozen parameters receive no gradient at all.
template <class T>
struct NetCtx {
  ad::Graph<T>& g;
  NetBundle<T>& bundle;
  std::vector<std::string> trainable_prefixes;  // empty = everything trainable

  bool trainable(const std::string& name) const {
    if (trainable_prefixes.empty()) return true;
    for (const std::string& pre : trainable_prefixes)
      if (name.rfind(pre, 0) == 0) return true;
    return false;
  }

  ad::Tensor<T> p(const std::string& name) {
    return trainable(name) ? g.param(bundle.params, name) : g.frozen(bundle.params, name);
  }

  ad::Tensor<T> linear(ad::Tensor<T> x, const std::string& prefix) {
    return g.add_rowvec(g.matmul(x, p(prefix + ".w")), p(prefix + ".b"));
  }
};

template <class T>
ad::Tensor<T> points_tensor(ad::Graph<T>& g, const PointCloud& pc) {
  std::vector<T> v;
  v.reserve(pc.size() * 3);
  for (const Vec3& p : pc.points) {
    v.push_back(static_cast<T>(p.x));
    v.push_back(static_cast<T>(p.y));
    v.push_back(static_cast<T>(p.z));
  }
  return g.constant(ad::Shape{static_cast<int>(pc.size()), 3}, std::move(v));
}

template <class T>
Keypoints keypoints_from_tensor(ad::Tensor<T> t) {
  Keypoints k(t.rows());
  const auto& v = t.values();
  for (int i = 0; i < t.rows(); ++i)
    k[i] = Vec3{static_cast<double>(v[i * 3]), static_cast<double>(v[i * 3 + 1]),
                static_cast<double>(v[i * 3 + 2])};
  return k;
}

// Shared per-point MLP 3 -> 64 -> 128 -> d; rows depend on single points only,
// so the map is permutation-equivariant by construction.
template <class T>
ad::Tensor<T> encode_points(NetCtx<T>& ctx, ad::Tensor<T> points) {
  ad::Tensor<T> h = ctx.g.relu(ctx.linear(points, "enc.l0"));
  h = ctx.g.relu(ctx.linear(h, "enc.l1"));
  return ctx.linear(h, "enc.l2");
}

// Attention pooling: each keypoint is a softmax-weighted convex combination of
// the input points, so keypoints always lie inside the input's convex hull.
template <class T>
ad::Tensor<T> predict_keypoints(NetCtx<T>& ctx, ad::Tensor<T> points, ad::Tensor<T> features,
                                bool partial = false) {
  const std::string kp = partial ? "kp_part" : "kp";
  if (partial && !ctx.bundle.has_partial())
    throw std::runtime_error("bundle has no partial keypoint predictor");
  ad::Tensor<T> h = ctx.g.relu(ctx.linear(features, kp + ".h0"));
  h = ctx.linear(h, kp + ".h1");
  ad::Tensor<T> scores = ctx.g.matmul(h, ctx.g.transpose(ctx.p(kp + ".q")));
  ad::Tensor<T> attn = ctx.g.softmax_rows(ctx.g.transpose(scores));
  return ctx.g.matmul(attn, points);
}

// PointNet-style global feature: column-wise max over all per-point features.
template <class T>
ad::Tensor<T> global_feature(NetCtx<T>& ctx, ad::Tensor<T> features) {
  return ctx.g.max_rows(features);
}

// Max-pooled per-region features; an empty region falls back to the feature of
// the point nearest its keypoint (its zero density drives the downstream
// weighting).
template <class T>
ad::Tensor<T> aggregate_local(NetCtx<T>& ctx, ad::Tensor<T> features,
                              const RegionAssignment& regions) {
  std::vector<ad::Tensor<T>> rows;
  rows.reserve(regions.members.size());
  for (std::size_t i = 0; i < regions.members.size(); ++i) {
    const std::vector<int>& m = regions.members[i];
    if (m.empty()) {
      rows.push_back(ctx.g.max_rows(ctx.g.gather_rows(features, {regions.nearest[i]})));
    } else {
      rows.push_back(ctx.g.max_rows(ctx.g.gather_rows(features, m)));
    }
  }
  return ctx.g.stack_rows(rows);
}

// Multi-head attention output before residual/normalization; kept separate so
// small hand-computed configurations can probe it directly.
template <class T>
ad::Tensor<T> multi_head_attention(NetCtx<T>& ctx, ad::Tensor<T> x, const std::string& layer_prefix,
                                   int heads) {
  const int dh = x.cols() / heads;
  std::vector<ad::Tensor<T>> head_outputs;
  head_outputs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    ad::Tensor<T> q = ctx.g.matmul(x, ctx.p(layer_prefix + "wq" + std::to_string(h)));
    ad::Tensor<T> k = ctx.g.matmul(x, ctx.p(layer_prefix + "wk" + std::to_string(h)));
    ad::Tensor<T> v = ctx.g.matmul(x, ctx.p(layer_prefix + "wv" + std::to_string(h)));
    ad::Tensor<T> logits =
        ctx.g.scale(ctx.g.matmul(q, ctx.g.transpose(k)), T(1) / static_cast<T>(std::sqrt(double(dh))));
    ad::Tensor<T> attn = ctx.g.softmax_rows(logits);
    head_outputs.push_back(ctx.g.matmul(attn, v));
  }
  ad::Tensor<T> concat = heads == 1 ? head_outputs[0] : ctx.g.concat_cols(head_outputs);
  return ctx.linear(concat, layer_prefix + "wo");
}

template <class T>
ad::Tensor<T> layer_norm_affine(NetCtx<T>& ctx, ad::Tensor<T> x, const std::string& prefix) {
  ad::Tensor<T> n = ctx.g.layer_norm_rows(x);
  return ctx.g.add_rowvec(ctx.g.mul_rowvec(n, ctx.p(prefix + ".g")), ctx.p(prefix + ".b"));
}

// Standard post-norm transformer stack over the N_K region rows. No positional
// encoding: region order carries no information beyond the keypoint identity.
template <class T>
ad::Tensor<T> self_attention(NetCtx<T>& ctx, ad::Tensor<T> local_features,
                             const std::string& side) {
  const NetArch& arch = ctx.bundle.arch;
  ad::Tensor<T> x = local_features;
  for (int l = 0; l < arch.attn_layers; ++l) {
    const std::string lp = side + "." + std::to_string(l) + ".";
    ad::Tensor<T> ao = multi_head_attention(ctx, x, lp, arch.attn_heads);
    x = layer_norm_affine(ctx, ctx.g.add(x, ao), lp + "ln1");
    ad::Tensor<T> f = ctx.linear(ctx.g.relu(ctx.linear(x, lp + "f1")), lp + "f2");
    x = layer_norm_affine(ctx, ctx.g.add(x, f), lp + "ln2");
  }
  return x;
}

template <class T>
ad::Tensor<T> mask_tensor(ad::Graph<T>& g, const std::vector<uint8_t>& mask, int nk, int nc) {
  for (int j = 0; j < nc; ++j) {
    bool covered = false;
    for (int i = 0; i < nk && !covered; ++i) covered = mask[i * nc + j] != 0;
    if (!covered)
      throw std::runtime_error("influence mask leaves cage vertex " + std::to_string(j) +
                               " uncovered");
  }
  std::vector<T> v(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) v[i] = mask[i] ? T(1) : T(0);
  return g.constant(ad::Shape{nk, nc}, std::move(v));
}

// Influence of every keypoint on every cage vertex, masked to the keypoint
// support regions. With GSA off the head runs on the global feature instead
// and emits the whole N_K x N_C block at once.
template <class T>
ad::Tensor<T> influence_field(NetCtx<T>& ctx, ad::Tensor<T> attended_or_global,
                              ad::Tensor<T> mask) {
  const NetArch& arch = ctx.bundle.arch;
  ad::Tensor<T> raw;
  if (arch.gsa) {
    ad::Tensor<T> h = ctx.g.relu(ctx.linear(attended_or_global, "inf.l0"));
    raw = ctx.linear(h, "inf.l1");
  } else {
    ad::Tensor<T> gf = ctx.g.reshape(attended_or_global, ad::Shape{1, arch.feat_dim});
    ad::Tensor<T> h = ctx.g.relu(ctx.linear(gf, "infg.l0"));
    raw = ctx.g.reshape(ctx.linear(h, "infg.l1"),
                        ad::Shape{arch.n_keypoints, arch.cage_vertices()});
  }
  return ctx.g.mul(raw, mask);
}

// Per-region retrieval tokens (N_K x d_T); with LGF off, a single token row
// derived from the global feature.
template <class T>
ad::Tensor<T> token_head(NetCtx<T>& ctx, ad::Tensor<T> attended_or_global) {
  const NetArch& arch = ctx.bundle.arch;
  if (arch.lgf) {
    ad::Tensor<T> h = ctx.g.relu(ctx.linear(attended_or_global, "tok.l0"));
    return ctx.linear(h, "tok.l1");
  }
  ad::Tensor<T> gf = ctx.g.reshape(attended_or_global, ad::Shape{1, arch.feat_dim});
  ad::Tensor<T> h = ctx.g.relu(ctx.linear(gf, "tokg.l0"));
  return ctx.linear(h, "tokg.l1");
}

// Reconstruction decoder: one region token + the flattened keypoints -> M x 3.
template <class T>
ad::Tensor<T> decode_region(NetCtx<T>& ctx, ad::Tensor<T> token_1d, ad::Tensor<T> keypoints_flat) {
  const NetArch& arch = ctx.bundle.arch;
  ad::Tensor<T> in =
      ctx.g.reshape(ctx.g.concat_vec({token_1d, keypoints_flat}),
                    ad::Shape{1, arch.token_dim + 3 * arch.n_keypoints});
  ad::Tensor<T> h = ctx.g.relu(ctx.linear(in, "psi.l0"));
  h = ctx.g.relu(ctx.linear(h, "psi.l1"));
  ad::Tensor<T> out = ctx.linear(h, "psi.l2");
  return ctx.g.reshape(out, ad::Shape{arch.decode_points, 3});
}

}  // namespace kpred::nets
