#pragma once

#include <string>
#include <vector>

#include "tdu/data.hpp"
#include "tdu/ops.hpp"
#include "tdu/tokenizer.hpp"

namespace tdu {

// Parameter bundles are templated over the element type so the same structure
// holds plain tensors (storage, optimizer) or tape variables (forward pass).
template <class E>
struct LinearP {
  E w;
  E b;
};

template <class E>
struct LayerNormP {
  E gain;
  E bias;
};

template <class E>
struct TextEmbedderP {
  E w_inst;        // [V, H] token embedding table
  E w_pos;         // [P, H] position embedding table
  LinearP<E> fc;   // [2H, H]
  LayerNormP<E> norm;
};

template <class E>
struct ImageEmbedderP {
  LinearP<E> fc_feat;  // [D, H]
  LinearP<E> fc_loc;   // [7, H]
  LinearP<E> fc_out;   // [2H, H]
  LayerNormP<E> norm;
};

// Normalized box geometry: [x1/W, y1/H, x2/W, y2/H, w/W, h/H, area ratio].
template <typename T>
Tensor<T> location_features(const Box& bbox, int image_w, int image_h) {
  if (image_w <= 0 || image_h <= 0) {
    throw ValueError("location_features: non-positive image size " +
                     std::to_string(image_w) + "x" + std::to_string(image_h));
  }
  bbox.validate();
  if (bbox.x1 < 0 || bbox.y1 < 0 || bbox.x2 > image_w || bbox.y2 > image_h) {
    throw ValueError("location_features: box outside the image");
  }
  const double rw = bbox.width() / image_w;
  const double rh = bbox.height() / image_h;
  return Tensor<T>::from({7}, {static_cast<T>(bbox.x1 / image_w),
                               static_cast<T>(bbox.y1 / image_h),
                               static_cast<T>(bbox.x2 / image_w),
                               static_cast<T>(bbox.y2 / image_h),
                               static_cast<T>(rw), static_cast<T>(rh),
                               static_cast<T>(rw * rh)});
}

// Token + position lookups, fused through one FC and a layer norm: [T, H].
template <typename T>
Var<T> embed_text(const EncodedInstruction& enc, TextEmbedderP<Var<T>>& p) {
  if (enc.ids.empty()) throw ValueError("embed_text: empty instruction");
  if (enc.positions.size() != enc.ids.size()) {
    throw ValueError("embed_text: ids/positions length mismatch");
  }
  Var<T> tok = ops::gather_rows(p.w_inst, enc.ids);
  Var<T> pos = ops::gather_rows(p.w_pos, enc.positions);
  Var<T> cat = ops::concat_cols(tok, pos);
  Var<T> fc = ops::linear(cat, p.fc.w, p.fc.b);
  return ops::layer_norm(fc, p.norm.gain, p.norm.bias);
}

namespace detail {

// Batched region embedding: rows of features and location vectors are
// processed by one FC pipeline, giving [rows, H].
template <typename T>
Var<T> embed_region_rows(const std::vector<const Region*>& regions, int image_w,
                         int image_h, ImageEmbedderP<Var<T>>& p) {
  Tape<T>* tape = p.fc_feat.w.tape;
  const int d = p.fc_feat.w.val().rows();
  const int n = static_cast<int>(regions.size());
  Tensor<T> feats = Tensor<T>::zeros({n, d});
  Tensor<T> locs = Tensor<T>::zeros({n, 7});
  for (int i = 0; i < n; ++i) {
    const Region& r = *regions[static_cast<std::size_t>(i)];
    if (static_cast<int>(r.feat.size()) != d) {
      throw ShapeError("embed_region: feature dim " +
                       std::to_string(r.feat.size()) + " does not match " +
                       std::to_string(d));
    }
    for (int j = 0; j < d; ++j) {
      feats.at(i, j) = static_cast<T>(r.feat[static_cast<std::size_t>(j)]);
    }
    Tensor<T> loc = location_features<T>(r.bbox, image_w, image_h);
    for (int j = 0; j < 7; ++j) locs.at(i, j) = loc.data[static_cast<std::size_t>(j)];
  }
  Var<T> hf = ops::linear(leaf(*tape, std::move(feats)), p.fc_feat.w, p.fc_feat.b);
  Var<T> hl = ops::linear(leaf(*tape, std::move(locs)), p.fc_loc.w, p.fc_loc.b);
  Var<T> cat = ops::concat_cols(hf, hl);
  Var<T> out = ops::linear(cat, p.fc_out.w, p.fc_out.b);
  return ops::layer_norm(out, p.norm.gain, p.norm.bias);
}

}  // namespace detail

// One region to one [1, H] embedding.
template <typename T>
Var<T> embed_region(const Region& region, int image_w, int image_h,
                    ImageEmbedderP<Var<T>>& p) {
  std::vector<const Region*> rows = {&region};
  return detail::embed_region_rows(rows, image_w, image_h, p);
}

// Slot 0 holds the distinguished target, slots 1..N the contexts; the target
// is required to appear among the contexts, so it is embedded twice.
template <typename T>
Var<T> assemble_image_embedding(const Region& target,
                                const std::vector<Region>& contexts, int image_w,
                                int image_h, ImageEmbedderP<Var<T>>& p) {
  if (contexts.empty()) {
    throw ValueError("assemble_image_embedding: no context regions");
  }
  bool found = false;
  for (const Region& r : contexts) {
    if (r == target) {
      found = true;
      break;
    }
  }
  if (!found) {
    throw ValueError("assemble_image_embedding: target not among contexts");
  }
  std::vector<const Region*> rows;
  rows.reserve(contexts.size() + 1);
  rows.push_back(&target);
  for (const Region& r : contexts) rows.push_back(&r);
  return detail::embed_region_rows(rows, image_w, image_h, p);
}

}  // namespace tdu
