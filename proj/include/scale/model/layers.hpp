// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "scale/numerics/ops.hpp"

namespace scale {

inline Tensor random_normal(Shape shape, real stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<real> normal(0.0, stddev);
  for (real& v : t.storage()) v = normal(rng);
  return t;
}

struct Linear {
  Parameter* weight = nullptr;  // [in x out]
  Parameter* bias = nullptr;    // [out], absent when built without bias

  Linear() = default;
  Linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::mt19937_64& rng,
         bool with_bias = true) {
    weight = &ps.add(name + ".weight", random_normal({in, out}, 1.0 / std::sqrt(static_cast<real>(in)), rng));
    if (with_bias) bias = &ps.add(name + ".bias", Tensor({out}));
  }

  Var operator()(const Var& x) const {
    if (!bias) return ops::matmul(x, Var::param(*weight));
    return ops::linear(x, Var::param(*weight), Var::param(*bias));
  }
};

struct LayerNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamSet& ps, const std::string& name, std::size_t dim) {
    gamma = &ps.add(name + ".gamma", Tensor({dim}, 1.0));
    beta = &ps.add(name + ".beta", Tensor({dim}));
  }

  Var operator()(const Var& x) const { return ops::layer_norm(x, Var::param(*gamma), Var::param(*beta)); }
};

// Pre-LN transformer block: x + Attn(LN(x)), then + FFN(LN(x)).
struct TransformerBlock {
  LayerNorm ln_attn, ln_ffn;
  Linear query, key, value, out, ffn_in, ffn_out;
  std::size_t heads = 1;

  TransformerBlock() = default;
  TransformerBlock(ParamSet& ps, const std::string& name, std::size_t hidden, std::size_t heads_, std::size_t ffn,
                   std::mt19937_64& rng)
      : ln_attn(ps, name + ".ln_attn", hidden),
        ln_ffn(ps, name + ".ln_ffn", hidden),
        query(ps, name + ".attn.query", hidden, hidden, rng),
        key(ps, name + ".attn.key", hidden, hidden, rng, false),  // a key bias shifts every score of a query equally
        value(ps, name + ".attn.value", hidden, hidden, rng),
        out(ps, name + ".attn.out", hidden, hidden, rng),
        ffn_in(ps, name + ".ffn.in", hidden, ffn, rng),
        ffn_out(ps, name + ".ffn.out", ffn, hidden, rng),
        heads(heads_) {}

  Var operator()(const Var& x, const ops::SeqLayout& layout, real dropout, std::mt19937_64* rng) const {
    Var a = ln_attn(x);
    Var att = ops::attention(query(a), key(a), value(a), layout, heads);
    Var h = out(att);
    if (rng) h = ops::dropout(h, dropout, *rng);
    Var y = ops::add(x, h);
    Var f = ffn_out(ops::gelu(ffn_in(ln_ffn(y))));
    if (rng) f = ops::dropout(f, dropout, *rng);
    return ops::add(y, f);
  }
};

struct TransformerStack {
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;

  TransformerStack() = default;
  TransformerStack(ParamSet& ps, const std::string& name, std::size_t layers, std::size_t hidden, std::size_t heads,
                   std::size_t ffn, std::mt19937_64& rng) {
    for (std::size_t l = 0; l < layers; ++l) {
      blocks.emplace_back(ps, name + ".layer" + std::to_string(l), hidden, heads, ffn, rng);
    }
    final_ln = LayerNorm(ps, name + ".final_ln", hidden);
  }

  Var operator()(Var x, const ops::SeqLayout& layout, real dropout, std::mt19937_64* rng) const {
    for (const auto& b : blocks) x = b(x, layout, dropout, rng);
    return final_ln(x);
  }
};

}  // namespace scale
