#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tdu/data.hpp"
#include "tdu/embedders.hpp"
#include "tdu/prng.hpp"
#include "tdu/tokenizer.hpp"
#include "tdu/transformer.hpp"

namespace tdu {

struct ModelConfig {
  int layers = 2;
  int hidden = 768;
  int heads = 12;
  double dropout = 0.1;
  int vocab_size = 0;     // set from the vocabulary
  int max_positions = 32;
  int feature_dim = 0;    // set from the data
  int max_contexts = 16;
  int ffn_mult = 4;
  bool late_fusion = false;

  int ffn_dim() const { return hidden * ffn_mult; }
  // Late fusion splits the stack: the first half (rounded up) fuses text with
  // context regions, the rest processes the lone target.
  int fusion_split() const { return (layers + 1) / 2; }

  void validate() const {
    if (layers <= 0 || hidden <= 0 || heads <= 0 || vocab_size <= 0 ||
        max_positions <= 0 || feature_dim <= 0 || max_contexts <= 0 ||
        ffn_mult <= 0) {
      throw ValueError("ModelConfig: all dimensions must be positive");
    }
    if (hidden % heads != 0) {
      throw ValueError("ModelConfig: hidden " + std::to_string(hidden) +
                       " not divisible by heads " + std::to_string(heads));
    }
    if (dropout < 0.0 || dropout >= 1.0) {
      throw ValueError("ModelConfig: dropout must be in [0, 1)");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

template <class E>
struct ModelP {
  TextEmbedderP<E> text;
  ImageEmbedderP<E> image;
  std::vector<TransformerLayerP<E>> layers;
  std::optional<LinearP<E>> fusion_fc;  // present only for late fusion
  LinearP<E> head;                      // [H, 2]
  LinearP<E> mlm;                       // [H, V]
  LinearP<E> itm;                       // [H, 2]
};

template <typename T>
using ModelParams = ModelP<Tensor<T>>;

namespace detail {

template <class A, class B, class F>
void visit_linear2(const std::string& name, LinearP<A>& a, LinearP<B>& b, F& f) {
  f(name + ".w", a.w, b.w);
  f(name + ".b", a.b, b.b);
}

template <class A, class B, class F>
void visit_norm2(const std::string& name, LayerNormP<A>& a, LayerNormP<B>& b,
                 F& f) {
  f(name + ".gain", a.gain, b.gain);
  f(name + ".bias", a.bias, b.bias);
}

}  // namespace detail

// Visits every parameter of two structurally identical models in one fixed
// order; the order defines checkpoint layout and optimizer-state indexing.
template <class A, class B, class F>
void for_each_param2(ModelP<A>& a, ModelP<B>& b, F&& f) {
  if (a.layers.size() != b.layers.size() ||
      a.fusion_fc.has_value() != b.fusion_fc.has_value()) {
    throw ShapeError("for_each_param2: model topologies differ");
  }
  f("text.w_inst", a.text.w_inst, b.text.w_inst);
  f("text.w_pos", a.text.w_pos, b.text.w_pos);
  detail::visit_linear2("text.fc", a.text.fc, b.text.fc, f);
  detail::visit_norm2("text.norm", a.text.norm, b.text.norm, f);
  detail::visit_linear2("image.fc_feat", a.image.fc_feat, b.image.fc_feat, f);
  detail::visit_linear2("image.fc_loc", a.image.fc_loc, b.image.fc_loc, f);
  detail::visit_linear2("image.fc_out", a.image.fc_out, b.image.fc_out, f);
  detail::visit_norm2("image.norm", a.image.norm, b.image.norm, f);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    const std::string base = "layer" + std::to_string(i);
    TransformerLayerP<A>& la = a.layers[i];
    TransformerLayerP<B>& lb = b.layers[i];
    detail::visit_linear2(base + ".attn.q", la.attn.q, lb.attn.q, f);
    detail::visit_linear2(base + ".attn.k", la.attn.k, lb.attn.k, f);
    detail::visit_linear2(base + ".attn.v", la.attn.v, lb.attn.v, f);
    detail::visit_linear2(base + ".attn.o", la.attn.o, lb.attn.o, f);
    detail::visit_norm2(base + ".norm1", la.norm1, lb.norm1, f);
    detail::visit_norm2(base + ".norm2", la.norm2, lb.norm2, f);
    detail::visit_linear2(base + ".ffn_in", la.ffn_in, lb.ffn_in, f);
    detail::visit_linear2(base + ".ffn_out", la.ffn_out, lb.ffn_out, f);
  }
  if (a.fusion_fc.has_value()) {
    detail::visit_linear2("fusion_fc", *a.fusion_fc, *b.fusion_fc, f);
  }
  detail::visit_linear2("head", a.head, b.head, f);
  detail::visit_linear2("mlm", a.mlm, b.mlm, f);
  detail::visit_linear2("itm", a.itm, b.itm, f);
}

template <class E, class F>
void for_each_param(ModelP<E>& p, F&& f) {
  for_each_param2(p, p, [&f](const std::string& name, E& x, E&) { f(name, x); });
}

// Empty model with the same layer count and fusion-head presence as `src`.
template <class To, class From>
ModelP<To> same_topology(const ModelP<From>& src) {
  ModelP<To> out;
  out.layers.resize(src.layers.size());
  if (src.fusion_fc.has_value()) out.fusion_fc.emplace();
  return out;
}

// All-zeros parameters with the shapes implied by the config.
template <typename T>
ModelParams<T> make_params(const ModelConfig& cfg) {
  cfg.validate();
  const int h = cfg.hidden;
  const int f = cfg.ffn_dim();
  auto lin = [](int in, int out) {
    return LinearP<Tensor<T>>{Tensor<T>::zeros({in, out}), Tensor<T>::zeros({out})};
  };
  auto norm = [&]() {
    return LayerNormP<Tensor<T>>{Tensor<T>::zeros({h}), Tensor<T>::zeros({h})};
  };
  ModelParams<T> p;
  p.text.w_inst = Tensor<T>::zeros({cfg.vocab_size, h});
  p.text.w_pos = Tensor<T>::zeros({cfg.max_positions, h});
  p.text.fc = lin(2 * h, h);
  p.text.norm = norm();
  p.image.fc_feat = lin(cfg.feature_dim, h);
  p.image.fc_loc = lin(7, h);
  p.image.fc_out = lin(2 * h, h);
  p.image.norm = norm();
  p.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (TransformerLayerP<Tensor<T>>& layer : p.layers) {
    layer.attn.q = lin(h, h);
    layer.attn.k = lin(h, h);
    layer.attn.v = lin(h, h);
    layer.attn.o = lin(h, h);
    layer.norm1 = norm();
    layer.norm2 = norm();
    layer.ffn_in = lin(h, f);
    layer.ffn_out = lin(f, h);
  }
  if (cfg.late_fusion) p.fusion_fc = lin(2 * h, h);
  p.head = lin(h, 2);
  p.mlm = lin(h, cfg.vocab_size);
  p.itm = lin(h, 2);
  return p;
}

// Weights ~ truncated normal (sigma 0.02, clipped at two sigma), biases zero,
// norm gains one. Each tensor draws from its own forked stream so the values
// do not depend on traversal history.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<T> p = make_params<T>(cfg);
  Prng root = Prng::seeded(seed);
  std::uint64_t index = 0;
  for_each_param(p, [&](const std::string& name, Tensor<T>& t) {
    Prng rng = root.fork(index++);
    const bool gain = name.size() >= 5 && name.ends_with(".gain");
    const bool bias = name.ends_with(".b") || name.ends_with(".bias");
    for (T& x : t.data) {
      if (gain) {
        x = T(1);
      } else if (!bias) {
        x = static_cast<T>(rng.truncated_normal(0.02));
      }
    }
  });
  return p;
}

template <typename T>
long long param_count(ModelP<Tensor<T>>& p) {
  long long n = 0;
  for_each_param(p, [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
  return n;
}

// Registers every parameter tensor on the tape so gradients can flow to it.
template <typename T>
ModelP<Var<T>> bind(Tape<T>& tape, const ModelParams<T>& params) {
  ModelP<Var<T>> vars = same_topology<Var<T>>(params);
  for_each_param2(const_cast<ModelParams<T>&>(params), vars,
                  [&tape](const std::string&, Tensor<T>& t, Var<T>& v) {
                    v = leaf(tape, t);
                  });
  return vars;
}

template <typename T>
struct Prediction {
  Tensor<T> p;       // [2]: probability the candidate is wrong / right
  Tensor<T> pooled;  // [H]: the vector fed to the output head
};

template <typename T>
struct ForwardVars {
  Var<T> logits;  // [1, 2]
  Var<T> pooled;  // [1, H]
  int target_slot = -1;  // early fusion: row index of the target in the sequence
};

namespace detail {

template <typename T>
struct EncodedSequence {
  Var<T> seq;           // [T + N + 1, H] final-layer outputs
  int text_len = 0;
  int target_slot = 0;  // == text_len
};

// Early-fusion encoder shared by classification and pretraining: the sequence
// is [text tokens, target slot, context slots].
template <typename T>
EncodedSequence<T> encode_sample(const EncodedInstruction& enc,
                                 const Sample& sample, ModelP<Var<T>>& vars,
                                 const ModelConfig& cfg, Mode mode,
                                 Prng& rng) {
  if (static_cast<int>(sample.contexts.size()) > cfg.max_contexts) {
    throw ShapeError("forward: " + std::to_string(sample.contexts.size()) +
                     " contexts exceed the limit of " +
                     std::to_string(cfg.max_contexts) + " (sequence cap " +
                     std::to_string(cfg.max_positions + cfg.max_contexts + 1) +
                     ")");
  }
  std::optional<Var<T>> text;
  if (!enc.ids.empty()) text = embed_text(enc, vars.text);
  Var<T> image = assemble_image_embedding(sample.target, sample.contexts,
                                          sample.width, sample.height, vars.image);
  const int t = static_cast<int>(enc.ids.size());
  const int s = t + image.val().rows();
  AttentionMask mask = all_attendable(s);
  std::span<TransformerLayerP<Var<T>>> layers{vars.layers};
  EncodedSequence<T> out;
  out.seq = encode(text, image, layers, cfg.heads, cfg.dropout, mode, rng, mask);
  out.text_len = t;
  out.target_slot = t;
  return out;
}

}  // namespace detail

// Builds the tape graph up to the 2-class logits for one sample.
template <typename T>
ForwardVars<T> forward_vars(const Sample& sample, const Vocab& vocab,
                            ModelP<Var<T>>& vars, const ModelConfig& cfg,
                            Mode mode, Prng& rng) {
  EncodedInstruction enc = encode(sample.instruction, vocab, cfg.max_positions);
  ForwardVars<T> out;
  if (!cfg.late_fusion) {
    detail::EncodedSequence<T> es =
        detail::encode_sample(enc, sample, vars, cfg, mode, rng);
    out.pooled = ops::gather_rows(es.seq, {es.target_slot});
    out.target_slot = es.target_slot;
  } else {
    if (!vars.fusion_fc.has_value()) {
      throw ShapeError("forward: late-fusion config but no fusion parameters");
    }
    if (static_cast<int>(sample.contexts.size()) > cfg.max_contexts) {
      throw ShapeError("forward: " + std::to_string(sample.contexts.size()) +
                       " contexts exceed the limit of " +
                       std::to_string(cfg.max_contexts));
    }
    std::optional<Var<T>> text;
    if (!enc.ids.empty()) text = embed_text(enc, vars.text);
    Var<T> image = assemble_image_embedding(sample.target, sample.contexts,
                                            sample.width, sample.height,
                                            vars.image);
    const int n = image.val().rows() - 1;
    std::vector<int> ctx_rows(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) ctx_rows[static_cast<std::size_t>(i)] = i + 1;
    Var<T> contexts = ops::gather_rows(image, ctx_rows);
    Var<T> target = ops::gather_rows(image, {0});
    const int split = cfg.fusion_split();
    std::span<TransformerLayerP<Var<T>>> all{vars.layers};
    AttentionMask mask_a =
        all_attendable(static_cast<int>(enc.ids.size()) + n);
    auto [pooled_a, pooled_b] = late_fusion_encode(
        text, contexts, target, all.subspan(0, static_cast<std::size_t>(split)),
        all.subspan(static_cast<std::size_t>(split)), cfg.heads, cfg.dropout,
        mode, rng, mask_a);
    Var<T> fused = ops::concat_cols(pooled_a, pooled_b);
    fused = ops::linear(fused, vars.fusion_fc->w, vars.fusion_fc->b);
    out.pooled = ops::gelu(fused);
  }
  out.logits = ops::linear(out.pooled, vars.head.w, vars.head.b);
  return out;
}

// Whole-sample inference: builds a private tape and returns probabilities.
template <typename T>
Prediction<T> forward(const Sample& sample, const Vocab& vocab,
                      const ModelParams<T>& params, const ModelConfig& cfg,
                      Mode mode, Prng& rng) {
  Tape<T> tape;
  ModelP<Var<T>> vars = bind(tape, params);
  ForwardVars<T> fv = forward_vars(sample, vocab, vars, cfg, mode, rng);
  Var<T> probs = ops::softmax(fv.logits, 1);
  const Tensor<T>& pr = probs.val();
  const Tensor<T>& pooled = fv.pooled.val();
  Prediction<T> out;
  out.p = Tensor<T>::from({2}, {pr.data[0], pr.data[1]});
  out.pooled = Tensor<T>::zeros({pooled.cols()});
  out.pooled.data = pooled.data;
  return out;
}

// Batch-summed cross entropy over per-sample logit rows.
template <typename T>
Var<T> classification_loss(const std::vector<Var<T>>& logit_rows,
                           const std::vector<int>& labels) {
  if (logit_rows.empty()) throw ValueError("classification_loss: empty batch");
  if (logit_rows.size() != labels.size()) {
    throw ShapeError("classification_loss: " + std::to_string(logit_rows.size()) +
                     " predictions vs " + std::to_string(labels.size()) +
                     " labels");
  }
  Var<T> all = ops::concat_rows<T>(logit_rows);
  return ops::cross_entropy(all, labels);
}

struct MlmMasked {
  std::vector<int> ids;        // corrupted token ids
  std::vector<int> positions;  // indices that carry a label
  std::vector<int> labels;     // original ids at those indices
};

// Independent per-token corruption: of the selected positions, 80% become
// [MASK], 10% a random non-special token, 10% stay unchanged.
inline MlmMasked mlm_mask(const std::vector<int>& ids, Prng& rng, int vocab_size,
                          double rate = 0.15) {
  if (ids.empty()) throw ValueError("mlm_mask: empty id list");
  if (rate < 0.0 || rate > 1.0) {
    throw ValueError("mlm_mask: rate must be in [0, 1]");
  }
  MlmMasked out;
  out.ids = ids;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!rng.bernoulli(rate)) continue;
    out.positions.push_back(static_cast<int>(i));
    out.labels.push_back(ids[i]);
    const double r = rng.next_double();
    if (r < 0.8) {
      out.ids[i] = Vocab::kMaskId;
    } else if (r < 0.9 && vocab_size > Vocab::kNumSpecials) {
      out.ids[i] = Vocab::kNumSpecials +
                   static_cast<int>(rng.next_below(
                       static_cast<std::uint64_t>(vocab_size - Vocab::kNumSpecials)));
    }
  }
  return out;
}

// One pretraining example: the instruction may have been swapped for one from
// a different scene, in which case itm_label is 1 (mismatched).
struct PretrainItem {
  const Sample* sample = nullptr;
  std::string instruction;
  int itm_label = 0;
};

// Masked-token prediction plus instruction/scene matching, batch-summed.
template <typename T>
Var<T> pretrain_loss(const std::vector<PretrainItem>& batch, const Vocab& vocab,
                     ModelP<Var<T>>& vars, const ModelConfig& cfg,
                     Mode mode, Prng& rng, double mlm_rate = 0.15) {
  if (batch.empty()) throw ValueError("pretrain_loss: empty batch");
  if (cfg.late_fusion) {
    throw ValueError("pretrain_loss: pretraining requires the early-fusion model");
  }
  std::vector<Var<T>> mlm_rows;
  std::vector<int> mlm_labels;
  std::vector<Var<T>> itm_rows;
  std::vector<int> itm_labels;
  for (const PretrainItem& item : batch) {
    if (item.sample == nullptr) throw ValueError("pretrain_loss: null sample");
    EncodedInstruction enc = encode(item.instruction, vocab, cfg.max_positions);
    MlmMasked masked;
    if (!enc.ids.empty()) {
      masked = mlm_mask(enc.ids, rng, cfg.vocab_size, mlm_rate);
      enc.ids = masked.ids;
    }
    detail::EncodedSequence<T> es =
        detail::encode_sample(enc, *item.sample, vars, cfg, mode, rng);
    if (!masked.positions.empty()) {
      mlm_rows.push_back(ops::gather_rows(es.seq, masked.positions));
      mlm_labels.insert(mlm_labels.end(), masked.labels.begin(),
                        masked.labels.end());
    }
    itm_rows.push_back(ops::gather_rows(es.seq, {es.target_slot}));
    itm_labels.push_back(item.itm_label);
  }
  Var<T> itm_logits =
      ops::linear(ops::concat_rows<T>(itm_rows), vars.itm.w, vars.itm.b);
  Var<T> loss = ops::cross_entropy(itm_logits, itm_labels);
  if (!mlm_rows.empty()) {
    Var<T> mlm_logits =
        ops::linear(ops::concat_rows<T>(mlm_rows), vars.mlm.w, vars.mlm.b);
    loss = ops::add(loss, ops::cross_entropy(mlm_logits, mlm_labels));
  }
  return loss;
}

}  // namespace tdu
