#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tdu/embedders.hpp"
#include "tdu/ops.hpp"

namespace tdu {

template <class E>
struct AttentionP {
  LinearP<E> q;  // [H, H]
  LinearP<E> k;  // [H, H]
  LinearP<E> v;  // [H, H]
  LinearP<E> o;  // [H, H]
};

template <class E>
struct TransformerLayerP {
  AttentionP<E> attn;
  LayerNormP<E> norm1;
  LayerNormP<E> norm2;
  LinearP<E> ffn_in;   // [H, F]
  LinearP<E> ffn_out;  // [F, H]
};

template <typename T>
Var<T> multi_head_attention(Var<T> h, AttentionP<Var<T>>& p, int heads,
                            const AttentionMask& mask) {
  Var<T> q = ops::linear(h, p.q.w, p.q.b);
  Var<T> k = ops::linear(h, p.k.w, p.k.b);
  Var<T> v = ops::linear(h, p.v.w, p.v.b);
  Var<T> mixed = ops::attention(q, k, v, heads, mask);
  return ops::linear(mixed, p.o.w, p.o.b);
}

// Post-norm residual block: attention then feed-forward, each followed by
// dropout, a residual add, and a layer norm.
template <typename T>
Var<T> transformer_layer(Var<T> h, TransformerLayerP<Var<T>>& p, int heads,
                         double dropout_p, Mode mode, Prng& rng,
                         const AttentionMask& mask) {
  Var<T> a = multi_head_attention(h, p.attn, heads, mask);
  a = ops::dropout(a, dropout_p, mode, rng);
  Var<T> u = ops::layer_norm(ops::add(h, a), p.norm1.gain, p.norm1.bias);
  Var<T> f = ops::linear(u, p.ffn_in.w, p.ffn_in.b);
  f = ops::gelu(f);
  f = ops::linear(f, p.ffn_out.w, p.ffn_out.b);
  f = ops::dropout(f, dropout_p, mode, rng);
  return ops::layer_norm(ops::add(u, f), p.norm2.gain, p.norm2.bias);
}

namespace detail {

template <typename T>
Var<T> run_layers(Var<T> seq, std::span<TransformerLayerP<Var<T>>> layers,
                  int heads, double dropout_p, Mode mode, Prng& rng,
                  const AttentionMask& mask) {
  if (mask.size() != static_cast<std::size_t>(seq.val().rows())) {
    throw ShapeError("run_layers: mask length " + std::to_string(mask.size()) +
                     " does not match sequence length " +
                     std::to_string(seq.val().rows()));
  }
  for (TransformerLayerP<Var<T>>& layer : layers) {
    seq = transformer_layer(seq, layer, heads, dropout_p, mode, rng, mask);
  }
  return seq;
}

}  // namespace detail

// Early fusion: one stack sees [text tokens, target slot, context slots].
template <typename T>
Var<T> encode(std::optional<Var<T>> h_text, Var<T> h_image,
              std::span<TransformerLayerP<Var<T>>> layers, int heads,
              double dropout_p, Mode mode, Prng& rng,
              const AttentionMask& mask) {
  Var<T> seq = h_image;
  if (h_text.has_value()) {
    seq = ops::concat_rows<T>({*h_text, h_image});
  }
  return detail::run_layers(seq, layers, heads, dropout_p, mode, rng, mask);
}

// Late fusion ablation: stack A pools over [text, contexts] while stack B sees
// only the lone target region; the two pooled vectors are fused downstream.
template <typename T>
std::pair<Var<T>, Var<T>> late_fusion_encode(
    std::optional<Var<T>> h_text, Var<T> h_contexts, Var<T> h_target,
    std::span<TransformerLayerP<Var<T>>> layers_a,
    std::span<TransformerLayerP<Var<T>>> layers_b, int heads, double dropout_p,
    Mode mode, Prng& rng, const AttentionMask& mask_a) {
  Var<T> seq_a = h_contexts;
  if (h_text.has_value()) {
    seq_a = ops::concat_rows<T>({*h_text, h_contexts});
  }
  seq_a = detail::run_layers(seq_a, layers_a, heads, dropout_p, mode, rng, mask_a);
  Var<T> pooled_a = ops::masked_mean_rows(seq_a, mask_a);

  if (h_target.val().rows() != 1) {
    throw ShapeError("late_fusion_encode: target must be a single row, got " +
                     shape_str(h_target.val().shape));
  }
  AttentionMask mask_b(1, 1);
  Var<T> pooled_b =
      detail::run_layers(h_target, layers_b, heads, dropout_p, mode, rng, mask_b);
  return {pooled_a, pooled_b};
}

}  // namespace tdu
