#include "jetx/forward.hpp"

#include <algorithm>
#include <cmath>

#include "jetx/errors.hpp"

namespace jetx {

namespace {

double activate(Activation a, double x) {
  switch (a) {
    case Activation::gelu: return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    case Activation::gelu_tanh: {
      const double c = std::sqrt(2.0 / M_PI);
      return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
    }
    case Activation::silu: return x / (1.0 + std::exp(-x));
    case Activation::identity: return x;
  }
  return x;
}

Tensor mlp_plain(const MlpParams& p, const Tensor& x) {
  Tensor hidden = add_row_vector(matmul(x, p.win), p.bin);
  for (double& v : hidden.values()) v = activate(p.activation, v);
  return add_row_vector(matmul(hidden, p.wout), p.bout);
}

Tensor head_slice(const Tensor& w, std::span<const double> bias, const Tensor& x, std::size_t h, std::size_t hd) {
  Tensor out = matmul(x, slice_cols(w, h * hd, hd));
  if (!bias.empty()) out = add_row_vector(std::move(out), bias.subspan(h * hd, hd));
  return out;
}

Tensor causal_softmax_rows(Tensor s) {
  for (std::size_t r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    double m = row[0];
    for (std::size_t c = 1; c <= r; ++c) m = std::max(m, row[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      row[c] = c <= r ? std::exp(row[c] - m) : 0.0;
      total += row[c];
    }
    for (double& v : row) v /= total;
  }
  return s;
}

Tensor head_pattern(const AttentionParams& a, const Tensor& x, std::size_t h) {
  const Tensor q = head_slice(a.wq, a.bq, x, h, a.head_dim);
  const Tensor k = head_slice(a.wk, a.bk, x, h, a.head_dim);
  Tensor s = matmul_transposed(q, k);
  s *= 1.0 / std::sqrt(static_cast<double>(a.head_dim));
  return causal_softmax_rows(std::move(s));
}

Tensor attention_plain(const AttentionParams& a, const Tensor& x, std::optional<std::size_t> zero_head) {
  const std::size_t t = x.rows(), hd = a.head_dim;
  Tensor concat({t, a.num_heads * hd});
  for (std::size_t h = 0; h < a.num_heads; ++h) {
    if (zero_head && *zero_head == h) continue;
    const Tensor v = head_slice(a.wv, a.bv, x, h, hd);
    const Tensor o = matmul(head_pattern(a, x, h), v);
    for (std::size_t r = 0; r < t; ++r)
      std::copy(o.row(r).begin(), o.row(r).end(), concat.row(r).begin() + static_cast<std::ptrdiff_t>(h * hd));
  }
  return add_row_vector(matmul(concat, a.wo), a.bo);
}

}  // namespace

void check_tokens(const ModelSpec& model, const TokenSequence& z) {
  if (z.empty()) throw ConfigError("token sequence is empty");
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (z[i] < 0 || static_cast<std::size_t>(z[i]) >= model.vocab_size) {
      throw ConfigError("token id " + std::to_string(z[i]) + " at position " + std::to_string(i) +
                        " outside vocabulary of size " + std::to_string(model.vocab_size));
    }
  }
}

Tensor embed(const ModelSpec& model, const TokenSequence& z, bool use_positions) {
  check_tokens(model, z);
  const std::size_t d = model.hidden_dim;
  const bool pos = use_positions && model.positions;
  if (pos && z.size() > model.positions->rows()) {
    throw ConfigError("sequence length " + std::to_string(z.size()) + " exceeds positional table of " +
                      std::to_string(model.positions->rows()));
  }
  Tensor out({z.size(), d});
  for (std::size_t t = 0; t < z.size(); ++t) {
    auto src = model.embed.row(static_cast<std::size_t>(z[t]));
    auto dst = out.row(t);
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[j] + (pos ? model.positions->at(t, j) : 0.0);
  }
  return out;
}

Tensor apply_norm(const NormParams& norm, const Tensor& x) {
  if (norm.kind == NormKind::none) return x;
  Tensor out = x;
  const std::size_t d = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    double mean = 0.0;
    if (norm.kind == NormKind::layernorm) {
      for (double v : row) mean += v;
      mean /= static_cast<double>(d);
    }
    double sq = 0.0;
    for (double v : row) sq += (v - mean) * (v - mean);
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(d) + norm.eps);
    for (std::size_t j = 0; j < d; ++j) {
      double v = (row[j] - mean) * inv;
      if (!norm.scale.empty()) v *= norm.scale[j];
      if (!norm.bias.empty()) v += norm.bias[j];
      row[j] = v;
    }
  }
  return out;
}

Tensor apply_nonlin(const ModelSpec& model, std::size_t l, const Tensor& x, const Ablation& ablation) {
  const std::size_t L = model.num_blocks();
  if (l == 0) return x;
  if (l == L + 1) return apply_norm(model.final_norm, x);
  const Block& b = model.block(l);
  if (ablation.mlp_block && *ablation.mlp_block == l) {
    if (b.kind != BlockKind::mlp) throw ConfigError("block " + std::to_string(l) + " is not an MLP");
    return Tensor(x.shape());
  }
  const Tensor normed = apply_norm(b.norm, x);
  if (b.kind == BlockKind::mlp) return mlp_plain(b.mlp, normed);
  std::optional<std::size_t> zero_head;
  if (ablation.head && ablation.head->first == l) zero_head = ablation.head->second;
  return attention_plain(b.attn, normed, zero_head);
}

std::vector<Tensor> attention_patterns(const ModelSpec& model, std::size_t a, const Tensor& normed) {
  const Block& b = model.block(a);
  if (b.kind != BlockKind::attention) throw ConfigError("block " + std::to_string(a) + " is not attention");
  std::vector<Tensor> out;
  for (std::size_t h = 0; h < b.attn.num_heads; ++h) out.push_back(head_pattern(b.attn, normed, h));
  return out;
}

Tensor unembed(const ModelSpec& model, const Tensor& x) { return matmul_transposed(x, model.unembed); }

Tensor readout(const ModelSpec& model, const Tensor& x) {
  return unembed(model, apply_norm(model.final_norm, x));
}

std::vector<Tensor> residual_streams(const ModelSpec& model, const TokenSequence& z, const ForwardOptions& opts) {
  const auto& ab = opts.ablation;
  if (ab.mlp_block && model.block(*ab.mlp_block).kind != BlockKind::mlp) {
    throw ConfigError("block " + std::to_string(*ab.mlp_block) + " is not an MLP");
  }
  if (ab.head) {
    const Block& b = model.block(ab.head->first);
    if (b.kind != BlockKind::attention || ab.head->second >= b.attn.num_heads) {
      throw ConfigError("no head " + std::to_string(ab.head->second) + " in block " +
                        std::to_string(ab.head->first));
    }
  }
  std::vector<Tensor> h{embed(model, z, opts.use_positions)};
  for (std::size_t l = 1; l <= model.num_blocks(); ++l) h.push_back(h.back() + apply_nonlin(model, l, h.back(), ab));
  return h;
}

Tensor residual_stream(const ModelSpec& model, const TokenSequence& z, std::size_t l, const ForwardOptions& opts) {
  if (l > model.num_blocks()) {
    throw ConfigError("stream index " + std::to_string(l) + " out of range 0.." + std::to_string(model.num_blocks()));
  }
  auto h = residual_streams(model, z, opts);
  return std::move(h[l]);
}

Tensor forward(const ModelSpec& model, const TokenSequence& z, const ForwardOptions& opts) {
  return readout(model, residual_streams(model, z, opts).back());
}

}  // namespace jetx
