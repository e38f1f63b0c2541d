#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tdu/prng.hpp"
#include "tdu/tape.hpp"
#include "tdu/tensor.hpp"

namespace tdu {

enum class Mode { train, infer };

// Attendable-slot mask; nonzero slots take part in attention/pooling.
using AttentionMask = std::vector<std::uint8_t>;

inline AttentionMask all_attendable(int n) {
  return AttentionMask(static_cast<std::size_t>(n), 1);
}

namespace ops {

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.val();
  const Tensor<T>& bv = b.val();
  if (!av.same_shape(bv)) {
    throw ShapeError("add: shape mismatch " + shape_str(av.shape) + " vs " +
                     shape_str(bv.shape));
  }
  Tensor<T> out = zeros_like(av);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = av.data[i] + bv.data[i];
  int ida = a.id, idb = b.id;
  int id = a.tape->push("add", {ida, idb}, std::move(out),
                        [ida, idb](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
                          Tensor<T>& ga = t.grad(ida);
                          Tensor<T>& gb = t.grad(idb);
                          for (std::size_t i = 0; i < g.numel(); ++i) {
                            ga.data[i] += g.data[i];
                            gb.data[i] += g.data[i];
                          }
                        });
  return {a.tape, id};
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.val();
  const Tensor<T>& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape) +
                     " vs " + shape_str(bv.shape));
  }
  const int n = av.rows(), k = av.cols(), m = bv.cols();
  Tensor<T> out = Tensor<T>::zeros({n, m});
  for (int i = 0; i < n; ++i) {
    for (int p = 0; p < k; ++p) {
      T x = av.at(i, p);
      const T* brow = &bv.data[static_cast<std::size_t>(p) * m];
      T* orow = &out.data[static_cast<std::size_t>(i) * m];
      for (int j = 0; j < m; ++j) orow[j] += x * brow[j];
    }
  }
  int ida = a.id, idb = b.id;
  int id = a.tape->push(
      "matmul", {ida, idb}, std::move(out),
      [ida, idb, n, k, m](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        const Tensor<T>& av2 = t.value(ida);
        const Tensor<T>& bv2 = t.value(idb);
        Tensor<T>& ga = t.grad(ida);
        Tensor<T>& gb = t.grad(idb);
        for (int i = 0; i < n; ++i) {
          const T* grow = &g.data[static_cast<std::size_t>(i) * m];
          for (int p = 0; p < k; ++p) {
            const T* brow = &bv2.data[static_cast<std::size_t>(p) * m];
            T acc = T(0);
            for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
            ga.at(i, p) += acc;
          }
          for (int p = 0; p < k; ++p) {
            T x = av2.at(i, p);
            T* gbrow = &gb.data[static_cast<std::size_t>(p) * m];
            for (int j = 0; j < m; ++j) gbrow[j] += x * grow[j];
          }
        }
      });
  return {a.tape, id};
}

// y = x W + b with b broadcast across rows.
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const Tensor<T>& xv = x.val();
  const Tensor<T>& wv = w.val();
  const Tensor<T>& bv = b.val();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.cols() != wv.rows()) {
    throw ShapeError("linear: incompatible shapes " + shape_str(xv.shape) +
                     " vs " + shape_str(wv.shape));
  }
  if (bv.numel() != static_cast<std::size_t>(wv.cols())) {
    throw ShapeError("linear: bias shape " + shape_str(bv.shape) +
                     " does not match weight " + shape_str(wv.shape));
  }
  const int n = xv.rows(), k = xv.cols(), m = wv.cols();
  Tensor<T> out = Tensor<T>::zeros({n, m});
  for (int i = 0; i < n; ++i) {
    T* orow = &out.data[static_cast<std::size_t>(i) * m];
    for (int j = 0; j < m; ++j) orow[j] = bv.data[static_cast<std::size_t>(j)];
    for (int p = 0; p < k; ++p) {
      T xval = xv.at(i, p);
      const T* wrow = &wv.data[static_cast<std::size_t>(p) * m];
      for (int j = 0; j < m; ++j) orow[j] += xval * wrow[j];
    }
  }
  int idx = x.id, idw = w.id, idb = b.id;
  int id = x.tape->push(
      "linear", {idx, idw, idb}, std::move(out),
      [idx, idw, idb, n, k, m](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        const Tensor<T>& xv2 = t.value(idx);
        const Tensor<T>& wv2 = t.value(idw);
        Tensor<T>& gx = t.grad(idx);
        Tensor<T>& gw = t.grad(idw);
        Tensor<T>& gb = t.grad(idb);
        for (int i = 0; i < n; ++i) {
          const T* grow = &g.data[static_cast<std::size_t>(i) * m];
          for (int j = 0; j < m; ++j) gb.data[static_cast<std::size_t>(j)] += grow[j];
          for (int p = 0; p < k; ++p) {
            const T* wrow = &wv2.data[static_cast<std::size_t>(p) * m];
            T acc = T(0);
            for (int j = 0; j < m; ++j) acc += grow[j] * wrow[j];
            gx.at(i, p) += acc;
          }
          for (int p = 0; p < k; ++p) {
            T xval = xv2.at(i, p);
            T* gwrow = &gw.data[static_cast<std::size_t>(p) * m];
            for (int j = 0; j < m; ++j) gwrow[j] += xval * grow[j];
          }
        }
      });
  return {x.tape, id};
}

// Row lookup: out[i,:] = x[ids[i],:]. Backward scatter-adds into the table.
template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<int> ids) {
  const Tensor<T>& xv = x.val();
  if (xv.rank() != 2) {
    throw ShapeError("gather_rows: expected matrix, got " + shape_str(xv.shape));
  }
  if (ids.empty()) throw ValueError("gather_rows: empty index list");
  const int rows = xv.rows(), cols = xv.cols();
  for (int r : ids) {
    if (r < 0 || r >= rows) {
      throw ValueError("gather_rows: index " + std::to_string(r) +
                       " out of range for " + shape_str(xv.shape));
    }
  }
  Tensor<T> out = Tensor<T>::zeros({static_cast<int>(ids.size()), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const T* src = &xv.data[static_cast<std::size_t>(ids[i]) * cols];
    std::copy(src, src + cols, &out.data[i * static_cast<std::size_t>(cols)]);
  }
  int idx = x.id;
  int id = x.tape->push(
      "gather_rows", {idx}, std::move(out),
      [idx, ids = std::move(ids), cols](Tape<T>& t, const Tensor<T>&,
                                        const Tensor<T>& g) {
        Tensor<T>& gx = t.grad(idx);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          T* dst = &gx.data[static_cast<std::size_t>(ids[i]) * cols];
          const T* src = &g.data[i * static_cast<std::size_t>(cols)];
          for (int j = 0; j < cols; ++j) dst[j] += src[j];
        }
      });
  return {x.tape, id};
}

// Stack matrices with equal column counts on top of each other.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ValueError("concat_rows: no inputs");
  Tape<T>* tape = parts[0].tape;
  const int cols = parts[0].val().cols();
  int total = 0;
  std::vector<int> input_ids;
  std::vector<int> row_counts;
  for (const Var<T>& p : parts) {
    const Tensor<T>& pv = p.val();
    if (pv.rank() != 2 || pv.cols() != cols) {
      throw ShapeError("concat_rows: column mismatch at " + shape_str(pv.shape));
    }
    input_ids.push_back(p.id);
    row_counts.push_back(pv.rows());
    total += pv.rows();
  }
  Tensor<T> out = Tensor<T>::zeros({total, cols});
  std::size_t offset = 0;
  for (const Var<T>& p : parts) {
    const Tensor<T>& pv = p.val();
    std::copy(pv.data.begin(), pv.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += pv.numel();
  }
  int id = tape->push(
      "concat_rows", input_ids, std::move(out),
      [input_ids, row_counts, cols](Tape<T>& t, const Tensor<T>&,
                                    const Tensor<T>& g) {
        std::size_t offset2 = 0;
        for (std::size_t p = 0; p < input_ids.size(); ++p) {
          Tensor<T>& gp = t.grad(input_ids[p]);
          std::size_t count = static_cast<std::size_t>(row_counts[p]) * cols;
          for (std::size_t i = 0; i < count; ++i) gp.data[i] += g.data[offset2 + i];
          offset2 += count;
        }
      });
  return {tape, id};
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.val();
  const Tensor<T>& bv = b.val();
  if (av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows()) {
    throw ShapeError("concat_cols: row mismatch " + shape_str(av.shape) +
                     " vs " + shape_str(bv.shape));
  }
  const int n = av.rows(), ca = av.cols(), cb = bv.cols();
  Tensor<T> out = Tensor<T>::zeros({n, ca + cb});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < ca; ++j) out.at(i, j) = av.at(i, j);
    for (int j = 0; j < cb; ++j) out.at(i, ca + j) = bv.at(i, j);
  }
  int ida = a.id, idb = b.id;
  int id = a.tape->push(
      "concat_cols", {ida, idb}, std::move(out),
      [ida, idb, n, ca, cb](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        Tensor<T>& ga = t.grad(ida);
        Tensor<T>& gb = t.grad(idb);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < ca; ++j) ga.at(i, j) += g.at(i, j);
          for (int j = 0; j < cb; ++j) gb.at(i, j) += g.at(i, ca + j);
        }
      });
  return {a.tape, id};
}

// Per-position normalization over the last dim, then affine gain/bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-12)) {
  const Tensor<T>& xv = x.val();
  const Tensor<T>& gv = gain.val();
  const Tensor<T>& bv = bias.val();
  if (xv.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const int h = xv.shape.back();
  if (gv.numel() != static_cast<std::size_t>(h) ||
      bv.numel() != static_cast<std::size_t>(h)) {
    throw ShapeError("layer_norm: gain/bias " + shape_str(gv.shape) + "/" +
                     shape_str(bv.shape) + " do not match last dim of " +
                     shape_str(xv.shape));
  }
  const int n = static_cast<int>(xv.numel()) / h;
  Tensor<T> out = zeros_like(xv);
  std::vector<T> xhat(xv.numel());
  std::vector<T> inv_std(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* row = &xv.data[static_cast<std::size_t>(i) * h];
    T mean = T(0);
    for (int j = 0; j < h; ++j) mean += row[j];
    mean /= T(h);
    T var = T(0);
    for (int j = 0; j < h; ++j) {
      T d = row[j] - mean;
      var += d * d;
    }
    var /= T(h);
    T inv = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(i)] = inv;
    T* orow = &out.data[static_cast<std::size_t>(i) * h];
    T* xrow = &xhat[static_cast<std::size_t>(i) * h];
    for (int j = 0; j < h; ++j) {
      xrow[j] = (row[j] - mean) * inv;
      orow[j] = gv.data[static_cast<std::size_t>(j)] * xrow[j] +
                bv.data[static_cast<std::size_t>(j)];
    }
  }
  int idx = x.id, idg = gain.id, idb = bias.id;
  int id = x.tape->push(
      "layer_norm", {idx, idg, idb}, std::move(out),
      [idx, idg, idb, n, h, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        const Tensor<T>& gv2 = t.value(idg);
        Tensor<T>& gx = t.grad(idx);
        Tensor<T>& gg = t.grad(idg);
        Tensor<T>& gb = t.grad(idb);
        for (int i = 0; i < n; ++i) {
          const T* grow = &g.data[static_cast<std::size_t>(i) * h];
          const T* xrow = &xhat[static_cast<std::size_t>(i) * h];
          T mean_dxhat = T(0);
          T mean_dxhat_x = T(0);
          for (int j = 0; j < h; ++j) {
            T dxh = grow[j] * gv2.data[static_cast<std::size_t>(j)];
            mean_dxhat += dxh;
            mean_dxhat_x += dxh * xrow[j];
            gg.data[static_cast<std::size_t>(j)] += grow[j] * xrow[j];
            gb.data[static_cast<std::size_t>(j)] += grow[j];
          }
          mean_dxhat /= T(h);
          mean_dxhat_x /= T(h);
          T inv = inv_std[static_cast<std::size_t>(i)];
          T* gxrow = &gx.data[static_cast<std::size_t>(i) * h];
          for (int j = 0; j < h; ++j) {
            T dxh = grow[j] * gv2.data[static_cast<std::size_t>(j)];
            gxrow[j] += inv * (dxh - mean_dxhat - xrow[j] * mean_dxhat_x);
          }
        }
      });
  return {x.tape, id};
}

// Exact Gaussian-CDF form: x * Phi(x).
template <typename T>
Var<T> gelu(Var<T> x) {
  const Tensor<T>& xv = x.val();
  Tensor<T> out = zeros_like(xv);
  constexpr double inv_sqrt2 = 0.7071067811865476;
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    double v = static_cast<double>(xv.data[i]);
    out.data[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
  }
  int idx = x.id;
  int id = x.tape->push(
      "gelu", {idx}, std::move(out),
      [idx](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        const Tensor<T>& xv2 = t.value(idx);
        Tensor<T>& gx = t.grad(idx);
        constexpr double inv_sqrt2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < g.numel(); ++i) {
          double v = static_cast<double>(xv2.data[i]);
          double phi = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
          gx.data[i] += g.data[i] * static_cast<T>(phi + v * pdf);
        }
      });
  return {x.tape, id};
}

// Inverted dropout; identity in inference mode (no rng draws).
template <typename T>
Var<T> dropout(Var<T> x, double p, Mode mode, Prng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ValueError("dropout: rate must be in [0,1), got " + std::to_string(p));
  }
  if (mode == Mode::infer || p == 0.0) return x;
  const Tensor<T>& xv = x.val();
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<std::uint8_t> keep(xv.numel());
  Tensor<T> out = zeros_like(xv);
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    keep[i] = rng.next_double() >= p ? 1 : 0;
    out.data[i] = keep[i] ? xv.data[i] * scale : T(0);
  }
  int idx = x.id;
  int id = x.tape->push(
      "dropout", {idx}, std::move(out),
      [idx, scale, keep = std::move(keep)](Tape<T>& t, const Tensor<T>&,
                                           const Tensor<T>& g) {
        Tensor<T>& gx = t.grad(idx);
        for (std::size_t i = 0; i < g.numel(); ++i) {
          if (keep[i]) gx.data[i] += g.data[i] * scale;
        }
      });
  return {x.tape, id};
}

// Numerically stable softmax along one axis of an arbitrary-rank tensor.
template <typename T>
Var<T> softmax(Var<T> x, int axis) {
  const Tensor<T>& xv = x.val();
  if (axis < 0 || axis >= xv.rank()) {
    throw ValueError("softmax: axis " + std::to_string(axis) +
                     " invalid for shape " + shape_str(xv.shape));
  }
  const int n = xv.dim(axis);
  std::size_t inner = 1;
  for (int i = axis + 1; i < xv.rank(); ++i) {
    inner *= static_cast<std::size_t>(xv.dim(i));
  }
  const std::size_t outer = xv.numel() / (static_cast<std::size_t>(n) * inner);
  Tensor<T> out = zeros_like(xv);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * static_cast<std::size_t>(n) * inner + in;
      T maxv = xv.data[base];
      for (int i = 1; i < n; ++i) {
        maxv = std::max(maxv, xv.data[base + static_cast<std::size_t>(i) * inner]);
      }
      T denom = T(0);
      for (int i = 0; i < n; ++i) {
        T e = std::exp(xv.data[base + static_cast<std::size_t>(i) * inner] - maxv);
        out.data[base + static_cast<std::size_t>(i) * inner] = e;
        denom += e;
      }
      for (int i = 0; i < n; ++i) {
        out.data[base + static_cast<std::size_t>(i) * inner] /= denom;
      }
    }
  }
  int idx = x.id;
  int id = x.tape->push(
      "softmax", {idx}, std::move(out),
      [idx, n, inner, outer](Tape<T>& t, const Tensor<T>& p, const Tensor<T>& g) {
        // dx = p * (g - sum_axis(g * p))
        Tensor<T>& gx = t.grad(idx);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * static_cast<std::size_t>(n) * inner + in;
            T dot = T(0);
            for (int i = 0; i < n; ++i) {
              const std::size_t at = base + static_cast<std::size_t>(i) * inner;
              dot += g.data[at] * p.data[at];
            }
            for (int i = 0; i < n; ++i) {
              const std::size_t at = base + static_cast<std::size_t>(i) * inner;
              gx.data[at] += p.data[at] * (g.data[at] - dot);
            }
          }
        }
      });
  return {x.tape, id};
}

// Fused masked multi-head self-attention over a single sequence.
// q,k,v: [S,H] with H divisible by heads; mask marks attendable slots.
// Masked-out slots get exactly zero probability: the softmax max and
// normalizer are computed over attendable slots only.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads,
                 const AttentionMask& mask) {
  const Tensor<T>& qv = q.val();
  const Tensor<T>& kv = k.val();
  const Tensor<T>& vv = v.val();
  if (qv.rank() != 2 || !qv.same_shape(kv) || !qv.same_shape(vv)) {
    throw ShapeError("attention: q/k/v shapes differ: " + shape_str(qv.shape) +
                     ", " + shape_str(kv.shape) + ", " + shape_str(vv.shape));
  }
  const int s = qv.rows(), h = qv.cols();
  if (heads <= 0 || h % heads != 0) {
    throw ValueError("attention: hidden size " + std::to_string(h) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  if (mask.size() != static_cast<std::size_t>(s)) {
    throw ShapeError("attention: mask length " + std::to_string(mask.size()) +
                     " does not match sequence length " + std::to_string(s));
  }
  std::vector<int> live;
  for (int t = 0; t < s; ++t) {
    if (mask[static_cast<std::size_t>(t)]) live.push_back(t);
  }
  if (live.empty()) throw ValueError("attention: no attendable slots in mask");

  const int dk = h / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
  // probs[a][s][t] stored dense; masked-out t stay exactly zero.
  std::vector<T> probs(static_cast<std::size_t>(heads) * s * s, T(0));
  Tensor<T> out = Tensor<T>::zeros({s, h});
  std::vector<T> scores(static_cast<std::size_t>(s));
  for (int a = 0; a < heads; ++a) {
    const int c0 = a * dk;
    for (int i = 0; i < s; ++i) {
      T maxv = T(0);
      bool first = true;
      for (int t : live) {
        T dot = T(0);
        const T* qrow = &qv.data[static_cast<std::size_t>(i) * h + c0];
        const T* krow = &kv.data[static_cast<std::size_t>(t) * h + c0];
        for (int j = 0; j < dk; ++j) dot += qrow[j] * krow[j];
        dot *= scale;
        scores[static_cast<std::size_t>(t)] = dot;
        if (first || dot > maxv) maxv = dot;
        first = false;
      }
      T denom = T(0);
      T* prow = &probs[(static_cast<std::size_t>(a) * s + i) * s];
      for (int t : live) {
        T e = std::exp(scores[static_cast<std::size_t>(t)] - maxv);
        prow[t] = e;
        denom += e;
      }
      T* orow = &out.data[static_cast<std::size_t>(i) * h + c0];
      for (int t : live) {
        prow[t] /= denom;
        const T* vrow = &vv.data[static_cast<std::size_t>(t) * h + c0];
        for (int j = 0; j < dk; ++j) orow[j] += prow[t] * vrow[j];
      }
    }
  }
  int idq = q.id, idk = k.id, idv = v.id;
  int id = q.tape->push(
      "attention", {idq, idk, idv}, std::move(out),
      [idq, idk, idv, heads, s, h, dk, scale, live = std::move(live),
       probs = std::move(probs)](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        const Tensor<T>& qv2 = t.value(idq);
        const Tensor<T>& kv2 = t.value(idk);
        const Tensor<T>& vv2 = t.value(idv);
        Tensor<T>& gq = t.grad(idq);
        Tensor<T>& gk = t.grad(idk);
        Tensor<T>& gv = t.grad(idv);
        std::vector<T> dp(static_cast<std::size_t>(s));
        for (int a = 0; a < heads; ++a) {
          const int c0 = a * dk;
          for (int i = 0; i < s; ++i) {
            const T* grow = &g.data[static_cast<std::size_t>(i) * h + c0];
            const T* prow = &probs[(static_cast<std::size_t>(a) * s + i) * s];
            // dV accumulation and dP = dO . V^T over attendable slots.
            T dot = T(0);
            for (int tt : live) {
              const T* vrow = &vv2.data[static_cast<std::size_t>(tt) * h + c0];
              T* gvrow = &gv.data[static_cast<std::size_t>(tt) * h + c0];
              T acc = T(0);
              for (int j = 0; j < dk; ++j) {
                acc += grow[j] * vrow[j];
                gvrow[j] += prow[tt] * grow[j];
              }
              dp[static_cast<std::size_t>(tt)] = acc;
              dot += acc * prow[tt];
            }
            // Softmax backward, then score gradient to q and k.
            const T* qrow = &qv2.data[static_cast<std::size_t>(i) * h + c0];
            T* gqrow = &gq.data[static_cast<std::size_t>(i) * h + c0];
            for (int tt : live) {
              T ds = prow[tt] * (dp[static_cast<std::size_t>(tt)] - dot) * scale;
              const T* krow = &kv2.data[static_cast<std::size_t>(tt) * h + c0];
              T* gkrow = &gk.data[static_cast<std::size_t>(tt) * h + c0];
              for (int j = 0; j < dk; ++j) {
                gqrow[j] += ds * krow[j];
                gkrow[j] += ds * qrow[j];
              }
            }
          }
        }
      });
  return {q.tape, id};
}

// Mean of the rows whose mask bit is set; output is [1,H].
template <typename T>
Var<T> masked_mean_rows(Var<T> x, const AttentionMask& mask) {
  const Tensor<T>& xv = x.val();
  if (xv.rank() != 2) {
    throw ShapeError("masked_mean_rows: expected matrix, got " +
                     shape_str(xv.shape));
  }
  const int s = xv.rows(), h = xv.cols();
  if (mask.size() != static_cast<std::size_t>(s)) {
    throw ShapeError("masked_mean_rows: mask length " +
                     std::to_string(mask.size()) + " does not match row count " +
                     std::to_string(s));
  }
  std::vector<int> live;
  for (int i = 0; i < s; ++i) {
    if (mask[static_cast<std::size_t>(i)]) live.push_back(i);
  }
  if (live.empty()) throw ValueError("masked_mean_rows: no rows selected");
  const T inv = T(1) / static_cast<T>(live.size());
  Tensor<T> out = Tensor<T>::zeros({1, h});
  for (int i : live) {
    const T* row = &xv.data[static_cast<std::size_t>(i) * h];
    for (int j = 0; j < h; ++j) out.data[static_cast<std::size_t>(j)] += row[j] * inv;
  }
  int idx = x.id;
  int id = x.tape->push(
      "masked_mean_rows", {idx}, std::move(out),
      [idx, h, inv, live = std::move(live)](Tape<T>& t, const Tensor<T>&,
                                            const Tensor<T>& g) {
        Tensor<T>& gx = t.grad(idx);
        for (int i : live) {
          T* grow = &gx.data[static_cast<std::size_t>(i) * h];
          for (int j = 0; j < h; ++j) {
            grow[j] += g.data[static_cast<std::size_t>(j)] * inv;
          }
        }
      });
  return {x.tape, id};
}

// Sum over rows of -log softmax(logits)[label]; scalar output.
template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels) {
  const Tensor<T>& lv = logits.val();
  if (lv.rank() != 2) {
    throw ShapeError("cross_entropy: expected matrix, got " + shape_str(lv.shape));
  }
  const int n = lv.rows(), c = lv.cols();
  if (labels.size() != static_cast<std::size_t>(n)) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= c) {
      throw ValueError("cross_entropy: label " + std::to_string(y) +
                       " out of range for " + std::to_string(c) + " classes");
    }
  }
  std::vector<T> probs(lv.numel());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const T* row = &lv.data[static_cast<std::size_t>(i) * c];
    T maxv = row[0];
    for (int j = 1; j < c; ++j) maxv = std::max(maxv, row[j]);
    double denom = 0.0;
    for (int j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j] - maxv));
    double lse = static_cast<double>(maxv) + std::log(denom);
    total += lse - static_cast<double>(row[labels[static_cast<std::size_t>(i)]]);
    T* prow = &probs[static_cast<std::size_t>(i) * c];
    for (int j = 0; j < c; ++j) {
      prow[j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
    }
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total));
  int idx = logits.id;
  int id = logits.tape->push(
      "cross_entropy", {idx}, std::move(out),
      [idx, n, c, labels, probs = std::move(probs)](Tape<T>& t, const Tensor<T>&,
                                                    const Tensor<T>& g) {
        Tensor<T>& gx = t.grad(idx);
        const T g0 = g.data[0];
        for (int i = 0; i < n; ++i) {
          const T* prow = &probs[static_cast<std::size_t>(i) * c];
          T* grow = &gx.data[static_cast<std::size_t>(i) * c];
          for (int j = 0; j < c; ++j) {
            T ind = (j == labels[static_cast<std::size_t>(i)]) ? T(1) : T(0);
            grow[j] += (prow[j] - ind) * g0;
          }
        }
      });
  return {logits.tape, id};
}

// Scalar multiple of a tensor (used for loss weighting).
template <typename T>
Var<T> scale_by(Var<T> x, T factor) {
  const Tensor<T>& xv = x.val();
  Tensor<T> out = zeros_like(xv);
  for (std::size_t i = 0; i < xv.numel(); ++i) out.data[i] = xv.data[i] * factor;
  int idx = x.id;
  int id = x.tape->push(
      "scale_by", {idx}, std::move(out),
      [idx, factor](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        Tensor<T>& gx = t.grad(idx);
        for (std::size_t i = 0; i < g.numel(); ++i) gx.data[i] += g.data[i] * factor;
      });
  return {x.tape, id};
}

}  // namespace ops
}  // namespace tdu
