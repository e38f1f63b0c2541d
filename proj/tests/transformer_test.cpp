#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "tdu/prng.hpp"
#include "tdu/transformer.hpp"

using namespace tdu;

namespace {

Tensor<double> randt(Shape s, Prng& g, double scale = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(s));
  for (double& v : t.data) v = g.uniform(-scale, scale);
  return t;
}

LinearP<Var<double>> leaf_linear(Tape<double>& tape, Tensor<double> w,
                                 Tensor<double> b) {
  return LinearP<Var<double>>{leaf(tape, std::move(w)), leaf(tape, std::move(b))};
}

AttentionP<Var<double>> random_attention(Tape<double>& tape, int h, Prng& g) {
  AttentionP<Var<double>> p;
  p.q = leaf_linear(tape, randt({h, h}, g), randt({h}, g));
  p.k = leaf_linear(tape, randt({h, h}, g), randt({h}, g));
  p.v = leaf_linear(tape, randt({h, h}, g), randt({h}, g));
  p.o = leaf_linear(tape, randt({h, h}, g), randt({h}, g));
  return p;
}

TransformerLayerP<Var<double>> random_layer(Tape<double>& tape, int h, int f,
                                            Prng& g) {
  TransformerLayerP<Var<double>> p;
  p.attn = random_attention(tape, h, g);
  p.norm1 = {leaf(tape, Tensor<double>::full({h}, 1.0)),
             leaf(tape, Tensor<double>::zeros({h}))};
  p.norm2 = {leaf(tape, Tensor<double>::full({h}, 1.0)),
             leaf(tape, Tensor<double>::zeros({h}))};
  p.ffn_in = leaf_linear(tape, randt({h, f}, g), randt({f}, g));
  p.ffn_out = leaf_linear(tape, randt({f, h}, g), randt({h}, g));
  return p;
}

// Brute-force multi-head attention with projections: per head, per position,
// explicit score/softmax/mix loops over the raw tensors.
Tensor<double> naive_mha(const Tensor<double>& h, const Tensor<double>& wq,
                         const Tensor<double>& bq, const Tensor<double>& wk,
                         const Tensor<double>& bk, const Tensor<double>& wv,
                         const Tensor<double>& bv, const Tensor<double>& wo,
                         const Tensor<double>& bo, int heads,
                         const AttentionMask& mask) {
  const int s = h.rows(), width = h.cols();
  const int dk = width / heads;
  auto project = [&](const Tensor<double>& w, const Tensor<double>& b) {
    Tensor<double> out = Tensor<double>::zeros({s, width});
    for (int i = 0; i < s; ++i) {
      for (int j = 0; j < width; ++j) {
        double acc = b.data[static_cast<std::size_t>(j)];
        for (int k = 0; k < width; ++k) acc += h.at(i, k) * w.at(k, j);
        out.at(i, j) = acc;
      }
    }
    return out;
  };
  Tensor<double> q = project(wq, bq), k = project(wk, bk), v = project(wv, bv);
  Tensor<double> mixed = Tensor<double>::zeros({s, width});
  for (int a = 0; a < heads; ++a) {
    for (int i = 0; i < s; ++i) {
      std::vector<double> score(static_cast<std::size_t>(s), 0.0);
      double mx = -1e300;
      for (int j = 0; j < s; ++j) {
        if (!mask[static_cast<std::size_t>(j)]) continue;
        double dot = 0;
        for (int d = 0; d < dk; ++d) {
          dot += q.at(i, a * dk + d) * k.at(j, a * dk + d);
        }
        score[static_cast<std::size_t>(j)] = dot / std::sqrt(double(dk));
        mx = std::max(mx, score[static_cast<std::size_t>(j)]);
      }
      double denom = 0;
      for (int j = 0; j < s; ++j) {
        if (mask[static_cast<std::size_t>(j)]) {
          denom += std::exp(score[static_cast<std::size_t>(j)] - mx);
        }
      }
      for (int d = 0; d < dk; ++d) {
        double acc = 0;
        for (int j = 0; j < s; ++j) {
          if (!mask[static_cast<std::size_t>(j)]) continue;
          const double p = std::exp(score[static_cast<std::size_t>(j)] - mx) / denom;
          acc += p * v.at(j, a * dk + d);
        }
        mixed.at(i, a * dk + d) = acc;
      }
    }
  }
  Tensor<double> out = Tensor<double>::zeros({s, width});
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < width; ++j) {
      double acc = bo.data[static_cast<std::size_t>(j)];
      for (int kk = 0; kk < width; ++kk) acc += mixed.at(i, kk) * wo.at(kk, j);
      out.at(i, j) = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("multi-head attention: single slot reduces to W_o(v-projection)") {
  Prng g = Prng::seeded(41);
  Tape<double> tape;
  const int h = 6;
  AttentionP<Var<double>> p = random_attention(tape, h, g);
  Var<double> x = leaf(tape, randt({1, h}, g));
  Var<double> out = multi_head_attention(x, p, 3, all_attendable(1));
  Var<double> expect = ops::linear(ops::linear(x, p.v.w, p.v.b), p.o.w, p.o.b);
  for (int j = 0; j < h; ++j) {
    CHECK(out.val().at(0, j) == doctest::Approx(expect.val().at(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("multi-head attention: matches the brute-force loop oracle") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Prng g = Prng::seeded(100 + seed);
    Tape<double> tape;
    const int h = 4, heads = 2, s = 3;
    AttentionP<Var<double>> p = random_attention(tape, h, g);
    Var<double> x = leaf(tape, randt({s, h}, g));
    AttentionMask mask = all_attendable(s);
    if (seed % 2 == 1) mask[1] = 0;  // alternate cases exercise masking
    Var<double> out = multi_head_attention(x, p, heads, mask);
    Tensor<double> expect =
        naive_mha(x.val(), p.q.w.val(), p.q.b.val(), p.k.w.val(), p.k.b.val(),
                  p.v.w.val(), p.v.b.val(), p.o.w.val(), p.o.b.val(), heads,
                  mask);
    for (std::size_t i = 0; i < expect.data.size(); ++i) {
      CHECK(std::abs(out.val().data[i] - expect.data[i]) < 1e-12);
    }
  }
}

TEST_CASE("transformer layer: keeps shape, deterministic in infer mode") {
  Prng g = Prng::seeded(43);
  Tape<double> tape;
  const int h = 8, s = 4;
  TransformerLayerP<Var<double>> p = random_layer(tape, h, 4 * h, g);
  Tensor<double> x = randt({s, h}, g);
  Prng r1 = Prng::seeded(1), r2 = Prng::seeded(2);
  Var<double> a = transformer_layer(leaf(tape, x), p, 2, 0.3, Mode::infer, r1,
                                    all_attendable(s));
  Var<double> b = transformer_layer(leaf(tape, x), p, 2, 0.3, Mode::infer, r2,
                                    all_attendable(s));
  REQUIRE(a.val().shape == Shape{s, h});
  for (std::size_t i = 0; i < a.val().data.size(); ++i) {
    CHECK(a.val().data[i] == b.val().data[i]);  // bitwise: no dropout drawn
  }
}

TEST_CASE("transformer layer: train-mode dropout is seed-reproducible") {
  Prng g = Prng::seeded(47);
  Tape<double> tape;
  const int h = 8, s = 3;
  TransformerLayerP<Var<double>> p = random_layer(tape, h, 2 * h, g);
  Tensor<double> x = randt({s, h}, g);
  Prng r1 = Prng::seeded(9), r2 = Prng::seeded(9), r3 = Prng::seeded(10);
  Var<double> a = transformer_layer(leaf(tape, x), p, 2, 0.5, Mode::train, r1,
                                    all_attendable(s));
  Var<double> b = transformer_layer(leaf(tape, x), p, 2, 0.5, Mode::train, r2,
                                    all_attendable(s));
  Var<double> c = transformer_layer(leaf(tape, x), p, 2, 0.5, Mode::train, r3,
                                    all_attendable(s));
  double same = 0, diff = 0;
  for (std::size_t i = 0; i < a.val().data.size(); ++i) {
    same += std::abs(a.val().data[i] - b.val().data[i]);
    diff += std::abs(a.val().data[i] - c.val().data[i]);
  }
  CHECK(same == 0.0);
  CHECK(diff > 1e-9);
}

TEST_CASE("encode: sequence is text then target then contexts") {
  Prng g = Prng::seeded(53);
  Tape<double> tape;
  const int h = 6, t = 2, n = 3;
  std::vector<TransformerLayerP<Var<double>>> layers;
  layers.push_back(random_layer(tape, h, 2 * h, g));
  layers.push_back(random_layer(tape, h, 2 * h, g));
  Var<double> text = leaf(tape, randt({t, h}, g));
  Var<double> image = leaf(tape, randt({n + 1, h}, g));
  Var<double> out = encode<double>(text, image, layers, 2, 0.0, Mode::infer, g,
                                   all_attendable(t + n + 1));
  CHECK(out.val().shape == Shape{t + n + 1, h});
  Var<double> img_only = encode<double>(std::nullopt, image, layers, 2, 0.0,
                                        Mode::infer, g, all_attendable(n + 1));
  CHECK(img_only.val().shape == Shape{n + 1, h});
}

TEST_CASE("encode: appending masked pad slots never moves real outputs") {
  Prng g = Prng::seeded(59);
  Tape<double> tape;
  const int h = 8, s = 4, pad = 3;
  std::vector<TransformerLayerP<Var<double>>> layers;
  layers.push_back(random_layer(tape, h, 4 * h, g));
  layers.push_back(random_layer(tape, h, 4 * h, g));
  Tensor<double> base = randt({s, h}, g);
  Tensor<double> padded = Tensor<double>::zeros({s + pad, h});
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < h; ++j) padded.at(i, j) = base.at(i, j);
  }
  for (int i = s; i < s + pad; ++i) {
    for (int j = 0; j < h; ++j) padded.at(i, j) = g.uniform(-9, 9);  // garbage
  }
  AttentionMask mask(static_cast<std::size_t>(s + pad), 1);
  for (int i = s; i < s + pad; ++i) mask[static_cast<std::size_t>(i)] = 0;

  Var<double> plain = encode<double>(std::nullopt, leaf(tape, base), layers, 2,
                                     0.0, Mode::infer, g, all_attendable(s));
  Var<double> wide = encode<double>(std::nullopt, leaf(tape, padded), layers, 2,
                                    0.0, Mode::infer, g, mask);
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < h; ++j) {
      CHECK(std::abs(plain.val().at(i, j) - wide.val().at(i, j)) < 1e-12);
    }
  }
}

TEST_CASE("encode: permuting context slots permutes outputs equivariantly") {
  Prng g = Prng::seeded(61);
  Tape<double> tape;
  const int h = 8, t = 3, n = 4;  // rows: text 0..2, target 3, contexts 4..7
  std::vector<TransformerLayerP<Var<double>>> layers;
  layers.push_back(random_layer(tape, h, 2 * h, g));
  layers.push_back(random_layer(tape, h, 2 * h, g));
  Var<double> text = leaf(tape, randt({t, h}, g));
  Tensor<double> image = randt({n + 1, h}, g);
  Tensor<double> perm_image = image;
  for (int j = 0; j < h; ++j) {  // swap context rows 1 and 3 (slots 5 and 7)
    std::swap(perm_image.at(2, j), perm_image.at(4, j));
  }
  const int s = t + n + 1;
  Var<double> a = encode<double>(text, leaf(tape, image), layers, 2, 0.0,
                                 Mode::infer, g, all_attendable(s));
  Var<double> b = encode<double>(text, leaf(tape, perm_image), layers, 2, 0.0,
                                 Mode::infer, g, all_attendable(s));
  auto close = [&](int ra, int rb) {
    for (int j = 0; j < h; ++j) {
      CHECK(std::abs(a.val().at(ra, j) - b.val().at(rb, j)) < 1e-9);
    }
  };
  close(0, 0);
  close(1, 1);
  close(2, 2);
  close(3, 3);  // target slot untouched
  close(4, 4);
  close(5, 7);  // swapped pair crosses over
  close(6, 6);
  close(7, 5);
}

TEST_CASE("late fusion: pooled shapes and target-blindness of stack A") {
  Prng g = Prng::seeded(67);
  Tape<double> tape;
  const int h = 8, t = 2, n = 3;
  std::vector<TransformerLayerP<Var<double>>> layers;
  layers.push_back(random_layer(tape, h, 2 * h, g));
  layers.push_back(random_layer(tape, h, 2 * h, g));
  std::span<TransformerLayerP<Var<double>>> all{layers};
  Var<double> text = leaf(tape, randt({t, h}, g));
  Var<double> ctx = leaf(tape, randt({n, h}, g));
  Var<double> targ1 = leaf(tape, randt({1, h}, g));
  Var<double> targ2 = leaf(tape, randt({1, h}, g));
  AttentionMask mask = all_attendable(t + n);
  auto [a1, b1] = late_fusion_encode<double>(text, ctx, targ1, all.subspan(0, 1),
                                             all.subspan(1), 2, 0.0, Mode::infer,
                                             g, mask);
  auto [a2, b2] = late_fusion_encode<double>(text, ctx, targ2, all.subspan(0, 1),
                                             all.subspan(1), 2, 0.0, Mode::infer,
                                             g, mask);
  REQUIRE(a1.val().shape == Shape{1, h});
  REQUIRE(b1.val().shape == Shape{1, h});
  for (int j = 0; j < h; ++j) {
    CHECK(a1.val().at(0, j) == a2.val().at(0, j));  // stack A ignores target
  }
  double moved = 0;
  for (int j = 0; j < h; ++j) moved += std::abs(b1.val().at(0, j) - b2.val().at(0, j));
  CHECK(moved > 1e-9);
}

TEST_CASE("transformer layer: gradients match finite differences") {
  const int h = 4, f = 8, s = 3, heads = 2;
  Prng g0 = Prng::seeded(71);
  std::vector<Tensor<double>> inputs;
  inputs.push_back(randt({s, h}, g0));   // activations
  inputs.push_back(randt({h, h}, g0));   // wq
  inputs.push_back(randt({h}, g0));
  inputs.push_back(randt({h, h}, g0));   // wk
  inputs.push_back(randt({h}, g0));
  inputs.push_back(randt({h, h}, g0));   // wv
  inputs.push_back(randt({h}, g0));
  inputs.push_back(randt({h, h}, g0));   // wo
  inputs.push_back(randt({h}, g0));
  inputs.push_back(randt({h}, g0, 0.2)); // norm1 gain offset from 1
  inputs.push_back(randt({h}, g0, 0.2)); // norm1 bias
  inputs.push_back(randt({h, f}, g0));   // ffn_in
  inputs.push_back(randt({f}, g0));
  inputs.push_back(randt({f, h}, g0));   // ffn_out
  inputs.push_back(randt({h}, g0));
  inputs.push_back(randt({h}, g0, 0.2)); // norm2 gain offset
  inputs.push_back(randt({h}, g0, 0.2)); // norm2 bias

  AttentionMask mask = all_attendable(s);
  mask[2] = 0;

  auto build = [&](Tape<double>& tape, std::vector<Var<double>>& v) {
    TransformerLayerP<Var<double>> p;
    p.attn.q = {v[1], v[2]};
    p.attn.k = {v[3], v[4]};
    p.attn.v = {v[5], v[6]};
    p.attn.o = {v[7], v[8]};
    Var<double> one = leaf(tape, Tensor<double>::full({h}, 1.0));
    p.norm1 = {ops::add(one, v[9]), v[10]};
    p.ffn_in = {v[11], v[12]};
    p.ffn_out = {v[13], v[14]};
    p.norm2 = {ops::add(one, v[15]), v[16]};
    Prng unused = Prng::seeded(0);
    Var<double> out =
        transformer_layer(v[0], p, heads, 0.0, Mode::infer, unused, mask);
    Prng mix = Prng::seeded(73);
    Var<double> row = leaf(tape, randt({1, s}, mix));
    Var<double> col = leaf(tape, randt({h, 1}, mix));
    return ops::matmul(ops::matmul(row, out), col);
  };

  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (Tensor<double>& t : inputs) vars.push_back(leaf(tape, t));
  Var<double> loss = build(tape, vars);
  tape.backward(loss.id);
  std::vector<Tensor<double>> grads;
  for (Var<double>& vr : vars) grads.push_back(tape.grad(vr.id));

  const double hstep = 1e-5;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    for (std::size_t i = 0; i < inputs[which].data.size(); ++i) {
      const double saved = inputs[which].data[i];
      auto eval = [&](double x) {
        inputs[which].data[i] = x;
        Tape<double> t2;
        std::vector<Var<double>> v2;
        for (Tensor<double>& t : inputs) v2.push_back(leaf(t2, t));
        return build(t2, v2).val().data[0];
      };
      const double up = eval(saved + hstep);
      const double down = eval(saved - hstep);
      inputs[which].data[i] = saved;
      const double fd = (up - down) / (2 * hstep);
      const double an = grads[which].data.empty() ? 0.0 : grads[which].data[i];
      const double rel =
          std::abs(an - fd) / std::max({1e-3, std::abs(an), std::abs(fd)});
      CHECK(rel < 1e-7);
    }
  }
}
