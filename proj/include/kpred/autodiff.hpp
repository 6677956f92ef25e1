#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kpred/rng.hpp"

namespace kpred::ad {

// Dense tensor shapes; {} is a scalar, {n} a vector, {r, c} a matrix.
struct Shape {
  std::vector<int> dims;

  Shape() = default;
  Shape(std::initializer_list<int> d) : dims(d) {}
  explicit Shape(std::vector<int> d) : dims(std::move(d)) {}

  std::size_t numel() const {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    return n;
  }
  int rank() const { return static_cast<int>(dims.size()); }
  int rows() const { return dims.at(0); }
  int cols() const { return dims.at(1); }
  bool operator==(const Shape& o) const { return dims == o.dims; }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(dims[i]);
    }
    return s + ")";
  }
};

template <class T>
class ParamStore;

template <class T>
class Graph;

// Lightweight handle into a graph node.
template <class T>
struct Tensor {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Shape& shape() const;
  const std::vector<T>& values() const;
  int rows() const { return shape().rows(); }
  int cols() const { return shape().cols(); }
};

// Dynamic tape recording one forward pass; backward() replays it in strict
// reverse order, accumulating (never overwriting) gradients.
template <class T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;             // tensors hold raw graph pointers
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = delete;
  Graph& operator=(Graph&&) = delete;

  struct Node {
    Shape shape;
    std::vector<T> val;
    std::vector<T> grad;  // allocated during backward for grad-requiring nodes
    bool requires_grad = false;
    std::function<void(Graph<T>&)> backward;
  };

  // ---- leaves ----

  Tensor<T> constant(Shape shape, std::vector<T> values) {
    check_count("constant", shape, values.size());
    return make(std::move(shape), std::move(values), false, {});
  }

  Tensor<T> leaf(Shape shape, std::vector<T> values) {
    check_count("leaf", shape, values.size());
    return make(std::move(shape), std::move(values), true, {});
  }

  // Leases a parameter as a differentiable leaf; accumulate_param_grads()
  // later adds its gradient back into the store.
  Tensor<T> param(ParamStore<T>& store, const std::string& name) {
    const auto& p = store.at(name);
    Tensor<T> t = make(p.shape, p.value, true, {});
    leased_.push_back({t.id, name});
    return t;
  }

  // Frozen parameters enter as constants so no gradient flows at all.
  Tensor<T> frozen(ParamStore<T>& store, const std::string& name) {
    const auto& p = store.at(name);
    return make(p.shape, p.value, false, {});
  }

  // ---- ops ----

  Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    if (a.cols() != b.rows()) mismatch("matmul", a, b);
    const int m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<T> out(static_cast<std::size_t>(m) * n, T(0));
    const auto& av = val(a.id);
    const auto& bv = val(b.id);
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const T aip = av[i * k + p];
        if (aip == T(0)) continue;
        const T* brow = bv.data() + static_cast<std::size_t>(p) * n;
        T* orow = out.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
      }
    return make({m, n}, std::move(out), needs(a, b), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (g.wants(a.id)) {
        auto& ga = g.grad_of(a.id);
        const auto& bvv = g.val(b.id);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) {
            const T gij = go[i * n + j];
            if (gij == T(0)) continue;
            for (int p = 0; p < k; ++p) ga[i * k + p] += gij * bvv[p * n + j];
          }
      }
      if (g.wants(b.id)) {
        auto& gb = g.grad_of(b.id);
        const auto& avv = g.val(a.id);
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            const T aip = avv[i * k + p];
            if (aip == T(0)) continue;
            for (int j = 0; j < n; ++j) gb[p * n + j] += aip * go[i * n + j];
          }
      }
    });
  }

  Tensor<T> transpose(Tensor<T> a) {
    require_rank("transpose", a, 2);
    const int r = a.rows(), c = a.cols();
    std::vector<T> out(static_cast<std::size_t>(r) * c);
    const auto& av = val(a.id);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    return make({c, r}, std::move(out), needs(a), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
    });
  }

  Tensor<T> add(Tensor<T> a, Tensor<T> b) { return binary_same("add", a, b, [](T x, T y) { return x + y; }, T(1), T(1)); }
  Tensor<T> sub(Tensor<T> a, Tensor<T> b) { return binary_same("sub", a, b, [](T x, T y) { return x - y; }, T(1), T(-1)); }

  Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
    if (shape(a.id) != shape(b.id)) mismatch("mul", a, b);
    const auto& av = val(a.id);
    const auto& bv = val(b.id);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make(shape(a.id), std::move(out), needs(a, b), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (g.wants(a.id)) {
        auto& ga = g.grad_of(a.id);
        const auto& bvv = g.val(b.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bvv[i];
      }
      if (g.wants(b.id)) {
        auto& gb = g.grad_of(b.id);
        const auto& avv = g.val(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * avv[i];
      }
    });
  }

  Tensor<T> scale(Tensor<T> a, T c) {
    const auto& av = val(a.id);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return make(shape(a.id), std::move(out), needs(a), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
  }

  // matrix + row vector, broadcast over rows (bias add)
  Tensor<T> add_rowvec(Tensor<T> m, Tensor<T> b) {
    require_rank("add_rowvec", m, 2);
    require_rank("add_rowvec", b, 1);
    if (m.cols() != b.shape().dims[0]) mismatch("add_rowvec", m, b);
    const int r = m.rows(), c = m.cols();
    const auto& mv = val(m.id);
    const auto& bv = val(b.id);
    std::vector<T> out(mv.size());
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out[i * c + j] = mv[i * c + j] + bv[j];
    return make(shape(m.id), std::move(out), needs(m, b), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (g.wants(m.id)) {
        auto& gm = g.grad_of(m.id);
        for (std::size_t i = 0; i < go.size(); ++i) gm[i] += go[i];
      }
      if (g.wants(b.id)) {
        auto& gb = g.grad_of(b.id);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gb[j] += go[i * c + j];
      }
    });
  }

  // per-column gain, broadcast over rows
  Tensor<T> mul_rowvec(Tensor<T> m, Tensor<T> gvec) {
    require_rank("mul_rowvec", m, 2);
    require_rank("mul_rowvec", gvec, 1);
    if (m.cols() != gvec.shape().dims[0]) mismatch("mul_rowvec", m, gvec);
    const int r = m.rows(), c = m.cols();
    const auto& mv = val(m.id);
    const auto& gv = val(gvec.id);
    std::vector<T> out(mv.size());
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out[i * c + j] = mv[i * c + j] * gv[j];
    return make(shape(m.id), std::move(out), needs(m, gvec), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (g.wants(m.id)) {
        auto& gm = g.grad_of(m.id);
        const auto& gvv = g.val(gvec.id);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gm[i * c + j] += go[i * c + j] * gvv[j];
      }
      if (g.wants(gvec.id)) {
        auto& gg = g.grad_of(gvec.id);
        const auto& mvv = g.val(m.id);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gg[j] += go[i * c + j] * mvv[i * c + j];
      }
    });
  }

  // per-row weight, broadcast over columns
  Tensor<T> scale_rows(Tensor<T> m, Tensor<T> wvec) {
    require_rank("scale_rows", m, 2);
    require_rank("scale_rows", wvec, 1);
    if (m.rows() != wvec.shape().dims[0]) mismatch("scale_rows", m, wvec);
    const int r = m.rows(), c = m.cols();
    const auto& mv = val(m.id);
    const auto& wv = val(wvec.id);
    std::vector<T> out(mv.size());
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out[i * c + j] = mv[i * c + j] * wv[i];
    return make(shape(m.id), std::move(out), needs(m, wvec), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (g.wants(m.id)) {
        auto& gm = g.grad_of(m.id);
        const auto& wvv = g.val(wvec.id);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gm[i * c + j] += go[i * c + j] * wvv[i];
      }
      if (g.wants(wvec.id)) {
        auto& gw = g.grad_of(wvec.id);
        const auto& mvv = g.val(m.id);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gw[i] += go[i * c + j] * mvv[i * c + j];
      }
    });
  }

  Tensor<T> relu(Tensor<T> a) {
    const auto& av = val(a.id);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    return make(shape(a.id), std::move(out), needs(a), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      const auto& avv = g.val(a.id);
      for (std::size_t i = 0; i < go.size(); ++i)
        if (avv[i] > T(0)) ga[i] += go[i];
    });
  }

  Tensor<T> abs_val(Tensor<T> a) {
    const auto& av = val(a.id);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] < T(0) ? -av[i] : av[i];
    return make(shape(a.id), std::move(out), needs(a), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      const auto& avv = g.val(a.id);
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (avv[i] > T(0)) ga[i] += go[i];
        else if (avv[i] < T(0)) ga[i] -= go[i];
      }
    });
  }

  // softmax over the last axis of a 2-D tensor
  Tensor<T> softmax_rows(Tensor<T> a) {
    require_rank("softmax_rows", a, 2);
    const int r = a.rows(), c = a.cols();
    const auto& av = val(a.id);
    std::vector<T> out(av.size());
    for (int i = 0; i < r; ++i) {
      T mx = av[i * c];
      for (int j = 1; j < c; ++j) mx = std::max(mx, av[i * c + j]);
      T sum = T(0);
      for (int j = 0; j < c; ++j) {
        out[i * c + j] = std::exp(av[i * c + j] - mx);
        sum += out[i * c + j];
      }
      for (int j = 0; j < c; ++j) out[i * c + j] /= sum;
    }
    return make(shape(a.id), std::move(out), needs(a), [=](Graph<T>& g) {
      const int out_id = g.last_out_;
      const auto& go = g.grad_of(out_id);
      const auto& y = g.val(out_id);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      for (int i = 0; i < r; ++i) {
        T dotv = T(0);
        for (int j = 0; j < c; ++j) dotv += go[i * c + j] * y[i * c + j];
        for (int j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (go[i * c + j] - dotv);
      }
    });
  }

  // per-row normalization (x - mean) / sqrt(var + eps); affine handled by
  // mul_rowvec / add_rowvec around it
  Tensor<T> layer_norm_rows(Tensor<T> a, T eps = T(1e-5)) {
    require_rank("layer_norm_rows", a, 2);
    const int r = a.rows(), c = a.cols();
    const auto& av = val(a.id);
    std::vector<T> out(av.size());
    std::vector<T> inv_std(r);
    for (int i = 0; i < r; ++i) {
      T mean = T(0);
      for (int j = 0; j < c; ++j) mean += av[i * c + j];
      mean /= T(c);
      T var = T(0);
      for (int j = 0; j < c; ++j) {
        const T d = av[i * c + j] - mean;
        var += d * d;
      }
      var /= T(c);
      inv_std[i] = T(1) / std::sqrt(var + eps);
      for (int j = 0; j < c; ++j) out[i * c + j] = (av[i * c + j] - mean) * inv_std[i];
    }
    return make(shape(a.id), std::move(out), needs(a), [=, s = std::move(inv_std)](Graph<T>& g) {
      const int out_id = g.last_out_;
      const auto& go = g.grad_of(out_id);
      const auto& y = g.val(out_id);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      for (int i = 0; i < r; ++i) {
        T mean_g = T(0), mean_gy = T(0);
        for (int j = 0; j < c; ++j) {
          mean_g += go[i * c + j];
          mean_gy += go[i * c + j] * y[i * c + j];
        }
        mean_g /= T(c);
        mean_gy /= T(c);
        for (int j = 0; j < c; ++j)
          ga[i * c + j] += s[i] * (go[i * c + j] - mean_g - y[i * c + j] * mean_gy);
      }
    });
  }

  // out[i] = a[indices[i]]; duplicate indices accumulate gradient, the index
  // selection itself receives none (stop-gradient contract)
  Tensor<T> gather_rows(Tensor<T> a, std::vector<int> indices) {
    require_rank("gather_rows", a, 2);
    const int c = a.cols(), ar = a.rows();
    for (int ix : indices)
      if (ix < 0 || ix >= ar)
        throw std::runtime_error("gather_rows: index out of range on " + shape(a.id).str());
    const int r = static_cast<int>(indices.size());
    const auto& av = val(a.id);
    std::vector<T> out(static_cast<std::size_t>(r) * c);
    for (int i = 0; i < r; ++i)
      std::copy(av.begin() + static_cast<std::size_t>(indices[i]) * c,
                av.begin() + static_cast<std::size_t>(indices[i] + 1) * c,
                out.begin() + static_cast<std::size_t>(i) * c);
    return make({r, c}, std::move(out), needs(a), [=, idx = std::move(indices)](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga[idx[i] * c + j] += go[i * c + j];
    });
  }

  // column-wise max over rows -> 1-D; gradient routed to the argmax row only,
  // ties resolved toward the lowest row index
  Tensor<T> max_rows(Tensor<T> a) {
    require_rank("max_rows", a, 2);
    const int r = a.rows(), c = a.cols();
    if (r == 0) throw std::runtime_error("max_rows: empty input " + shape(a.id).str());
    const auto& av = val(a.id);
    std::vector<T> out(c);
    std::vector<int> arg(c, 0);
    for (int j = 0; j < c; ++j) {
      out[j] = av[j];
      for (int i = 1; i < r; ++i)
        if (av[i * c + j] > out[j]) {
          out[j] = av[i * c + j];
          arg[j] = i;
        }
    }
    return make({c}, std::move(out), needs(a), [=, am = std::move(arg)](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      for (int j = 0; j < c; ++j) ga[am[j] * c + j] += go[j];
    });
  }

  // row i of a 2-D tensor as a 1-D tensor
  Tensor<T> row(Tensor<T> a, int i) {
    require_rank("row", a, 2);
    const int r = a.rows(), c = a.cols();
    if (i < 0 || i >= r) throw std::runtime_error("row: index out of range on " + shape(a.id).str());
    const auto& av = val(a.id);
    std::vector<T> out(av.begin() + static_cast<std::size_t>(i) * c,
                       av.begin() + static_cast<std::size_t>(i + 1) * c);
    return make({c}, std::move(out), needs(a), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      for (int j = 0; j < c; ++j) ga[i * c + j] += go[j];
    });
  }

  // stack 1-D tensors of equal length into a matrix, one per row
  Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
    if (rows.empty()) throw std::runtime_error("stack_rows: no inputs");
    const int c = rows[0].shape().dims.at(0);
    std::vector<T> out;
    out.reserve(rows.size() * c);
    bool any_grad = false;
    std::vector<int> ids;
    for (const Tensor<T>& t : rows) {
      require_rank("stack_rows", t, 1);
      if (t.shape().dims[0] != c) mismatch("stack_rows", rows[0], t);
      const auto& v = val(t.id);
      out.insert(out.end(), v.begin(), v.end());
      any_grad = any_grad || node(t.id).requires_grad;
      ids.push_back(t.id);
    }
    const int r = static_cast<int>(rows.size());
    return make({r, c}, std::move(out), any_grad, [=, in = std::move(ids)](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      for (int i = 0; i < r; ++i) {
        if (!g.wants(in[i])) continue;
        auto& gi = g.grad_of(in[i]);
        for (int j = 0; j < c; ++j) gi[j] += go[i * c + j];
      }
    });
  }

  // concatenate 1-D tensors
  Tensor<T> concat_vec(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_vec: no inputs");
    std::vector<T> out;
    bool any_grad = false;
    std::vector<int> ids;
    std::vector<int> lens;
    for (const Tensor<T>& t : parts) {
      require_rank("concat_vec", t, 1);
      const auto& v = val(t.id);
      out.insert(out.end(), v.begin(), v.end());
      any_grad = any_grad || node(t.id).requires_grad;
      ids.push_back(t.id);
      lens.push_back(t.shape().dims[0]);
    }
    const int total = static_cast<int>(out.size());
    return make({total}, std::move(out), any_grad,
                [=, in = std::move(ids), ln = std::move(lens)](Graph<T>& g) {
                  const auto& go = g.grad_of(g.last_out_);
                  int off = 0;
                  for (std::size_t p = 0; p < in.size(); ++p) {
                    if (g.wants(in[p])) {
                      auto& gi = g.grad_of(in[p]);
                      for (int j = 0; j < ln[p]; ++j) gi[j] += go[off + j];
                    }
                    off += ln[p];
                  }
                });
  }

  // concatenate matrices with equal row counts along columns
  Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_cols: no inputs");
    const int r = parts[0].rows();
    int total_c = 0;
    bool any_grad = false;
    std::vector<int> ids, widths;
    for (const Tensor<T>& t : parts) {
      require_rank("concat_cols", t, 2);
      if (t.rows() != r) mismatch("concat_cols", parts[0], t);
      total_c += t.cols();
      any_grad = any_grad || node(t.id).requires_grad;
      ids.push_back(t.id);
      widths.push_back(t.cols());
    }
    std::vector<T> out(static_cast<std::size_t>(r) * total_c);
    int off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const auto& v = val(ids[p]);
      for (int i = 0; i < r; ++i)
        std::copy(v.begin() + static_cast<std::size_t>(i) * widths[p],
                  v.begin() + static_cast<std::size_t>(i + 1) * widths[p],
                  out.begin() + static_cast<std::size_t>(i) * total_c + off);
      off += widths[p];
    }
    return make({r, total_c}, std::move(out), any_grad,
                [=, in = std::move(ids), w = std::move(widths)](Graph<T>& g) {
                  const auto& go = g.grad_of(g.last_out_);
                  int o = 0;
                  for (std::size_t p = 0; p < in.size(); ++p) {
                    if (g.wants(in[p])) {
                      auto& gi = g.grad_of(in[p]);
                      for (int i = 0; i < r; ++i)
                        for (int j = 0; j < w[p]; ++j)
                          gi[i * w[p] + j] += go[i * total_c + o + j];
                    }
                    o += w[p];
                  }
                });
  }

  Tensor<T> reshape(Tensor<T> a, Shape s) {
    if (s.numel() != shape(a.id).numel())
      throw std::runtime_error("reshape: element count mismatch " + shape(a.id).str() + " -> " +
                               s.str());
    return make(std::move(s), val(a.id), needs(a), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }

  // per-row sums of a matrix -> 1-D of length rows
  Tensor<T> row_sum(Tensor<T> a) {
    require_rank("row_sum", a, 2);
    const int r = a.rows(), c = a.cols();
    const auto& av = val(a.id);
    std::vector<T> out(r, T(0));
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out[i] += av[i * c + j];
    return make({r}, std::move(out), needs(a), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga[i * c + j] += go[i];
    });
  }

  Tensor<T> sum_all(Tensor<T> a) {
    const auto& av = val(a.id);
    T acc = T(0);
    for (T v : av) acc += v;
    return make({}, {acc}, needs(a), [=](Graph<T>& g) {
      const T go = g.grad_of(g.last_out_)[0];
      if (!g.wants(a.id)) return;
      auto& ga = g.grad_of(a.id);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go;
    });
  }

  Tensor<T> mean_all(Tensor<T> a) {
    const std::size_t n = shape(a.id).numel();
    return scale(sum_all(a), T(1) / static_cast<T>(n));
  }

  // ---- backward ----

  void backward(Tensor<T> loss) {
    if (shape(loss.id).numel() != 1)
      throw std::runtime_error("backward: loss must be scalar, got " + shape(loss.id).str());
    for (Node& n : nodes_)
      if (n.requires_grad) n.grad.assign(n.val.size(), T(0));
    if (!nodes_[loss.id].requires_grad) return;  // constant loss: all grads stay zero
    nodes_[loss.id].grad.assign(1, T(1));
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward) continue;
      last_out_ = id;
      n.backward(*this);
    }
  }

  // Adds leased-parameter gradients into the store (unreached params keep
  // whatever the store already holds, normally zero).
  void accumulate_param_grads(ParamStore<T>& store, T weight = T(1)) {
    for (const auto& [id, name] : leased_) {
      const Node& n = nodes_[id];
      if (n.grad.empty()) continue;
      auto& p = store.at(name);
      for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += weight * n.grad[i];
    }
  }

  // ---- access ----

  const Node& node(int id) const { return nodes_.at(id); }
  const Shape& shape(int id) const { return nodes_.at(id).shape; }
  const std::vector<T>& val(int id) const { return nodes_.at(id).val; }
  std::vector<T>& grad_of(int id) { return nodes_.at(id).grad; }
  bool wants(int id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    leased_.clear();
  }

 private:
  friend struct Tensor<T>;

  std::vector<Node> nodes_;
  std::vector<std::pair<int, std::string>> leased_;
  int last_out_ = -1;

  bool needs(Tensor<T> a) const { return nodes_[a.id].requires_grad; }
  bool needs(Tensor<T> a, Tensor<T> b) const {
    return nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
  }

  static void check_count(const char* op, const Shape& shape, std::size_t n) {
    if (shape.numel() != n)
      throw std::runtime_error(std::string(op) + ": " + std::to_string(n) +
                               " values do not fill shape " + shape.str());
  }

  Tensor<T> make(Shape shape, std::vector<T> values, bool requires_grad,
                 std::function<void(Graph<T>&)> backward) {
    Node n;
    n.shape = std::move(shape);
    n.val = std::move(values);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Tensor<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  template <class F>
  Tensor<T> binary_same(const char* op, Tensor<T> a, Tensor<T> b, F f, T da, T db) {
    if (shape(a.id) != shape(b.id)) mismatch(op, a, b);
    const auto& av = val(a.id);
    const auto& bv = val(b.id);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    return make(shape(a.id), std::move(out), needs(a, b), [=](Graph<T>& g) {
      const auto& go = g.grad_of(g.last_out_);
      if (g.wants(a.id)) {
        auto& ga = g.grad_of(a.id);
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += da * go[i];
      }
      if (g.wants(b.id)) {
        auto& gb = g.grad_of(b.id);
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += db * go[i];
      }
    });
  }

  void require_rank(const char* op, Tensor<T> t, int rank) const {
    if (shape(t.id).rank() != rank)
      throw std::runtime_error(std::string(op) + ": expected rank " + std::to_string(rank) +
                               ", got " + shape(t.id).str());
  }

  [[noreturn]] void mismatch(const char* op, Tensor<T> a, Tensor<T> b) const {
    throw std::runtime_error(std::string(op) + ": shape mismatch " + shape(a.id).str() + " vs " +
                             shape(b.id).str());
  }
};

template <class T>
const Shape& Tensor<T>::shape() const {
  return graph->shape(id);
}

template <class T>
const std::vector<T>& Tensor<T>::values() const {
  return graph->val(id);
}

// ---- parameter store + Adam ----

template <class T>
struct Param {
  Shape shape;
  std::vector<T> value, grad, m, v;
  bool trainable = true;
};

template <class T>
class ParamStore {
 public:
  void add(const std::string& name, Shape shape, std::vector<T> init) {
    if (index_.count(name)) throw std::runtime_error("param '" + name + "' already exists");
    if (shape.numel() != init.size())
      throw std::runtime_error("param '" + name + "': value count does not match shape");
    Param<T> p;
    p.shape = std::move(shape);
    const std::size_t n = init.size();
    p.value = std::move(init);
    p.grad.assign(n, T(0));
    p.m.assign(n, T(0));
    p.v.assign(n, T(0));
    index_[name] = params_.size();
    order_.push_back(name);
    params_.push_back(std::move(p));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Param<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("unknown param '" + name + "'");
    return params_[it->second];
  }
  const Param<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("unknown param '" + name + "'");
    return params_[it->second];
  }

  const std::vector<std::string>& names() const { return order_; }

  void zero_grad() {
    for (Param<T>& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }

  // Restrict Adam updates to params whose name starts with one of the prefixes;
  // empty list makes everything trainable.
  void set_trainable_prefixes(const std::vector<std::string>& prefixes) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (prefixes.empty()) {
        params_[i].trainable = true;
        continue;
      }
      params_[i].trainable = false;
      for (const std::string& pre : prefixes)
        if (order_[i].rfind(pre, 0) == 0) {
          params_[i].trainable = true;
          break;
        }
    }
  }

  double grad_norm() const {
    double acc = 0.0;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!params_[i].trainable) continue;
      for (T gv : params_[i].grad) acc += static_cast<double>(gv) * static_cast<double>(gv);
    }
    return std::sqrt(acc);
  }

  void clip_grad_norm(double max_norm) {
    const double total = grad_norm();
    if (total <= max_norm || total == 0.0) return;
    const T s = static_cast<T>(max_norm / total);
    for (Param<T>& p : params_) {
      if (!p.trainable) continue;
      for (T& gv : p.grad) gv *= s;
    }
  }

  // Standard Adam with bias correction; throws on non-finite gradients and
  // zeroes all gradients afterward.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      Param<T>& p = params_[pi];
      if (!p.trainable) continue;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        if (!std::isfinite(g))
          throw std::runtime_error("adam_step: non-finite gradient in '" + order_[pi] + "'");
        const double m = beta1 * static_cast<double>(p.m[i]) + (1.0 - beta1) * g;
        const double v = beta2 * static_cast<double>(p.v[i]) + (1.0 - beta2) * g * g;
        p.m[i] = static_cast<T>(m);
        p.v[i] = static_cast<T>(v);
        const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
        p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - update);
      }
    }
    zero_grad();
  }

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }

  std::size_t total_coords(bool trainable_only = true) const {
    std::size_t n = 0;
    for (const Param<T>& p : params_)
      if (!trainable_only || p.trainable) n += p.value.size();
    return n;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::size_t> index_;
  std::vector<Param<T>> params_;
  int64_t step_ = 0;
};

// ---- gradient checking ----

// eval(store, with_grad): deterministic scalar; when with_grad, it must also
// accumulate analytic gradients into the store. Central differences on a
// random coordinate subsample; returns the max relative error with
// denominator max(|analytic|, |numeric|, 1e-8).
//
// Each coordinate is probed at several step sizes around eps and keeps its
// best agreement: losses with discrete selections (nearest neighbors, region
// membership, argmax pooling) are only piecewise smooth, so a single step
// size either straddles a selection boundary or drowns small gradients in
// rounding noise. A wrong analytic gradient still fails at every step size
// because the differences converge to the true derivative, not to the
// analytic one.
template <class T, class F>
double grad_check(F&& eval, ParamStore<T>& store, double eps, std::size_t max_coords = 64,
                  uint64_t seed = 0) {
  store.zero_grad();
  eval(store, true);

  struct Coord {
    std::string name;
    std::size_t idx;
    double analytic;
  };
  std::vector<Coord> coords;
  for (const std::string& name : store.names()) {
    const auto& p = store.at(name);
    if (!p.trainable) continue;
    for (std::size_t i = 0; i < p.value.size(); ++i)
      coords.push_back({name, i, static_cast<double>(p.grad[i])});
  }
  store.zero_grad();
  if (coords.empty()) return 0.0;

  Rng rng(seed);
  const std::size_t n_check = std::min(max_coords, coords.size());
  for (std::size_t i = 0; i < n_check; ++i) {
    const std::size_t j = i + rng.index(coords.size() - i);
    std::swap(coords[i], coords[j]);
  }

  const double ladder[] = {100.0, 10.0, 1.0, 0.1, 0.01};
  double max_rel = 0.0;
  for (std::size_t i = 0; i < n_check; ++i) {
    auto& p = store.at(coords[i].name);
    const T saved = p.value[coords[i].idx];
    double best = std::numeric_limits<double>::infinity();
    for (double factor : ladder) {
      const double h = eps * factor;
      p.value[coords[i].idx] = static_cast<T>(static_cast<double>(saved) + h);
      const double f_plus = eval(store, false);
      p.value[coords[i].idx] = static_cast<T>(static_cast<double>(saved) - h);
      const double f_minus = eval(store, false);
      p.value[coords[i].idx] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * h);
      const double denom = std::max({std::abs(coords[i].analytic), std::abs(numeric), 1e-8});
      best = std::min(best, std::abs(coords[i].analytic - numeric) / denom);
      if (best < 1e-8) break;
    }
    store.zero_grad();
    max_rel = std::max(max_rel, best);
  }
  return max_rel;
}

// ---- distance composites ----

// Nearest row of `to` for every row of `from`, both row-major (n x 3).
// Evaluation order matches geometry::dist2 so losses reproduce the plain
// geometry metrics bit-for-bit in 64-bit mode.
template <class T>
std::vector<int> nearest_rows(const std::vector<T>& from, const std::vector<T>& to) {
  const std::size_t n = from.size() / 3, m = to.size() / 3;
  if (n == 0 || m == 0) throw std::runtime_error("nearest_rows: empty point set");
  std::vector<int> idx(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    T best = std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      const T dx = from[i * 3] - to[j * 3];
      const T dy = from[i * 3 + 1] - to[j * 3 + 1];
      const T dz = from[i * 3 + 2] - to[j * 3 + 2];
      const T d = (dx * dx + dy * dy) + dz * dz;
      if (d < best) {
        best = d;
        idx[i] = static_cast<int>(j);
      }
    }
  }
  return idx;
}

// mean over rows of `from` of the squared distance to the nearest row of `to`.
// The argmin index selection is discrete and receives no gradient.
template <class T>
Tensor<T> ucd_loss(Graph<T>& g, Tensor<T> from, Tensor<T> to) {
  const std::vector<int> idx = nearest_rows(from.values(), to.values());
  Tensor<T> nn = g.gather_rows(to, idx);
  Tensor<T> d = g.sub(from, nn);
  Tensor<T> per_point = g.row_sum(g.mul(d, d));
  return g.scale(g.sum_all(per_point), T(1) / static_cast<T>(from.rows()));
}

template <class T>
Tensor<T> chamfer_loss(Graph<T>& g, Tensor<T> a, Tensor<T> b) {
  return g.add(ucd_loss(g, a, b), ucd_loss(g, b, a));
}

// sum of absolute differences over all coordinates
template <class T>
Tensor<T> l1_distance(Graph<T>& g, Tensor<T> a, Tensor<T> b) {
  return g.sum_all(g.abs_val(g.sub(a, b)));
}

}  // namespace kpred::ad
