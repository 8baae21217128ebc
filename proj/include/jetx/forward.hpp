#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "jetx/model.hpp"
#include "jetx/series.hpp"
#include "jetx/tensor.hpp"

namespace jetx {

using TokenSequence = std::vector<int>;

/// Zeroes one component's output during a forward pass.
struct Ablation {
  std::optional<std::size_t> mlp_block;
  std::optional<std::pair<std::size_t, std::size_t>> head;  // (attention block, head)

  bool active() const noexcept { return mlp_block || head; }
};

struct ForwardOptions {
  bool use_positions = true;
  Ablation ablation;
};

void check_tokens(const ModelSpec& model, const TokenSequence& z);

/// eta(z): token embeddings plus (optionally) the positional table. T x d.
Tensor embed(const ModelSpec& model, const TokenSequence& z, bool use_positions = true);

Tensor apply_norm(const NormParams& norm, const Tensor& x);

/// gamma_l for l in 1..L (pre-norm included) and gamma_{L+1} = final norm.
/// l = 0 is the identity.
Tensor apply_nonlin(const ModelSpec& model, std::size_t l, const Tensor& x, const Ablation& ablation = {});

/// Per-head attention weights of block a on a normed input, T x T each.
std::vector<Tensor> attention_patterns(const ModelSpec& model, std::size_t a, const Tensor& normed);

/// x * U^T.
Tensor unembed(const ModelSpec& model, const Tensor& x);
/// U gamma_{L+1}(x).
Tensor readout(const ModelSpec& model, const Tensor& x);

/// h_0 .. h_L.
std::vector<Tensor> residual_streams(const ModelSpec& model, const TokenSequence& z, const ForwardOptions& opts = {});
Tensor residual_stream(const ModelSpec& model, const TokenSequence& z, std::size_t l,
                       const ForwardOptions& opts = {});
/// T x c logits.
Tensor forward(const ModelSpec& model, const TokenSequence& z, const ForwardOptions& opts = {});

/// Series lift of gamma_l, same indexing as apply_nonlin.
Series apply_nonlin_series(const ModelSpec& model, std::size_t l, const Series& x);
SeriesMap nonlin_map(const ModelSpec& model, std::size_t l);

}  // namespace jetx
