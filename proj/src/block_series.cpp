#include <cmath>

#include "jetx/errors.hpp"
#include "jetx/forward.hpp"

namespace jetx {

namespace {

Series norm_series(const NormParams& norm, const Series& x) {
  switch (norm.kind) {
    case NormKind::none: return x;
    case NormKind::layernorm: return series_layernorm(x, norm.scale, norm.bias, norm.eps);
    case NormKind::rmsnorm: return series_rmsnorm(x, norm.scale, norm.eps);
  }
  return x;
}

Series activate_series(Activation a, const Series& x) {
  switch (a) {
    case Activation::gelu: return series_gelu(x);
    case Activation::gelu_tanh: return series_gelu_tanh(x);
    case Activation::silu: return series_silu(x);
    case Activation::identity: return x;
  }
  return x;
}

Series linear(const Series& x, const Tensor& w, std::span<const double> bias) {
  Series y = series_matmul_constant(x, w);
  return bias.empty() ? y : series_add_row_vector(y, bias);
}

Series head_linear(const Series& x, const Tensor& w, std::span<const double> bias, std::size_t h, std::size_t hd) {
  return linear(x, slice_cols(w, h * hd, hd), bias.empty() ? bias : bias.subspan(h * hd, hd));
}

Series attention_series(const AttentionParams& a, const Series& x) {
  const std::size_t hd = a.head_dim;
  std::vector<Series> heads;
  for (std::size_t h = 0; h < a.num_heads; ++h) {
    const Series q = head_linear(x, a.wq, a.bq, h, hd);
    const Series k = head_linear(x, a.wk, a.bk, h, hd);
    const Series v = head_linear(x, a.wv, a.bv, h, hd);
    const Series s = series_scale(series_matmul_transposed(q, k), 1.0 / std::sqrt(static_cast<double>(hd)));
    heads.push_back(series_matmul(series_softmax(s, true), v));
  }
  return linear(series_concat_cols(heads), a.wo, a.bo);
}

}  // namespace

Series apply_nonlin_series(const ModelSpec& model, std::size_t l, const Series& x) {
  if (x.cols() != model.hidden_dim) {
    throw ShapeError("state width " + std::to_string(x.cols()) + " differs from hidden_dim " +
                     std::to_string(model.hidden_dim));
  }
  if (l == 0) return x;
  if (l == model.num_blocks() + 1) return norm_series(model.final_norm, x);
  const Block& b = model.block(l);
  const Series normed = norm_series(b.norm, x);
  if (b.kind == BlockKind::attention) return attention_series(b.attn, normed);
  const Series hidden = activate_series(b.mlp.activation, linear(normed, b.mlp.win, b.mlp.bin));
  return linear(hidden, b.mlp.wout, b.mlp.bout);
}

SeriesMap nonlin_map(const ModelSpec& model, std::size_t l) {
  return [&model, l](const Series& x) { return apply_nonlin_series(model, l, x); };
}

}  // namespace jetx
