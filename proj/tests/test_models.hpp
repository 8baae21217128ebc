#pragma once

// Random model builders shared by the unit tests and the acceptance runner.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "jetx/model.hpp"

namespace jetx::testing {

inline Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(r * c);
  for (auto& x : v) x = n(rng);
  return Tensor::matrix(r, c, std::move(v));
}

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n, double mean, double sd) {
  std::normal_distribution<double> dist(mean, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline void fill_vocab(ModelSpec& m) {
  m.vocab.clear();
  for (std::size_t i = 0; i < m.vocab_size; ++i) m.vocab.push_back("t" + std::to_string(i));
}

struct RandomModelConfig {
  std::vector<BlockKind> kinds{BlockKind::attention, BlockKind::mlp};
  std::size_t d = 8;
  std::size_t vocab = 12;
  std::size_t heads = 2;
  std::size_t hidden = 16;
  std::size_t max_positions = 16;
  NormKind norm = NormKind::layernorm;
  Activation activation = Activation::gelu;
  bool biases = true;
  double scale = 1.0;
  unsigned seed = 1;
};

/// A small pre-norm transformer with Gaussian weights.
inline ModelSpec random_model(const RandomModelConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  const double s = cfg.scale / std::sqrt(static_cast<double>(cfg.d));
  ModelSpec m;
  m.model_id = "random-" + std::to_string(cfg.seed);
  m.vocab_size = cfg.vocab;
  m.hidden_dim = cfg.d;
  m.embed = random_tensor(rng, cfg.vocab, cfg.d, 1.0);
  m.unembed = random_tensor(rng, cfg.vocab, cfg.d, s);
  if (cfg.max_positions) m.positions = random_tensor(rng, cfg.max_positions, cfg.d, 0.3);
  auto norm = [&] {
    NormParams p;
    p.kind = cfg.norm;
    if (cfg.norm != NormKind::none) p.scale = random_vector(rng, cfg.d, 1.0, 0.1);
    if (cfg.norm == NormKind::layernorm && cfg.biases) p.bias = random_vector(rng, cfg.d, 0.0, 0.1);
    return p;
  };
  auto bias = [&](std::size_t n) { return cfg.biases ? random_vector(rng, n, 0.0, 0.1) : std::vector<double>{}; };
  for (BlockKind kind : cfg.kinds) {
    Block b;
    b.kind = kind;
    b.norm = norm();
    if (kind == BlockKind::attention) {
      const std::size_t hd = cfg.d / cfg.heads, w = hd * cfg.heads;
      b.attn.num_heads = cfg.heads;
      b.attn.head_dim = hd;
      b.attn.wq = random_tensor(rng, cfg.d, w, s);
      b.attn.wk = random_tensor(rng, cfg.d, w, s);
      b.attn.wv = random_tensor(rng, cfg.d, w, s);
      b.attn.wo = random_tensor(rng, w, cfg.d, s);
      b.attn.bq = bias(w);
      b.attn.bk = bias(w);
      b.attn.bv = bias(w);
      b.attn.bo = bias(cfg.d);
    } else {
      b.mlp.hidden_dim = cfg.hidden;
      b.mlp.activation = cfg.activation;
      b.mlp.win = random_tensor(rng, cfg.d, cfg.hidden, s);
      b.mlp.wout = random_tensor(rng, cfg.hidden, cfg.d, cfg.scale / std::sqrt(static_cast<double>(cfg.hidden)));
      b.mlp.bin = bias(cfg.hidden);
      b.mlp.bout = bias(cfg.d);
    }
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = norm();
  fill_vocab(m);
  m.validate();
  return m;
}

/// Bias-free identity-activation MLP blocks with no norms: every block is x -> x Win Wout.
inline ModelSpec random_linear_model(std::size_t L, std::size_t d, std::size_t c, unsigned seed) {
  std::mt19937_64 rng(seed);
  ModelSpec m;
  m.model_id = "linear-" + std::to_string(seed);
  m.vocab_size = c;
  m.hidden_dim = d;
  m.embed = random_tensor(rng, c, d, 1.0);
  m.unembed = random_tensor(rng, c, d, 1.0 / std::sqrt(static_cast<double>(d)));
  for (std::size_t l = 0; l < L; ++l) {
    Block b;
    b.kind = BlockKind::mlp;
    b.mlp.hidden_dim = d;
    b.mlp.activation = Activation::identity;
    b.mlp.win = random_tensor(rng, d, d, 1.0 / std::sqrt(static_cast<double>(d)));
    b.mlp.wout = random_tensor(rng, d, d, 0.7 / std::sqrt(static_cast<double>(d)));
    m.blocks.push_back(std::move(b));
  }
  fill_vocab(m);
  m.validate();
  return m;
}

}  // namespace jetx::testing
