#pragma once

// Path expressions: small immutable trees describing functions of the input
// tokens. Jet centers and variates are themselves path expressions, so the
// output of one expansion can feed the next.

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "jetx/forward.hpp"

namespace jetx {

enum class PathKind { embed, stream, nonlin, jet_term, scale, sum, decode };

struct PathNode;
using PathPtr = std::shared_ptr<const PathNode>;

struct PathNode {
  PathKind kind = PathKind::embed;
  std::size_t index = 0;  // stream level or nonlinearity index (0 = identity, L+1 = final norm)
  std::size_t order = 0;
  std::optional<std::size_t> slot;
  double constant = 1.0;
  std::vector<PathPtr> children;  // jet_term: {center, variate}
};

PathPtr path_embed();
/// Stream(0) is the embedding.
PathPtr path_stream(std::size_t l);
PathPtr path_nonlin(std::size_t l, PathPtr child);
PathPtr path_jet(std::size_t l, PathPtr center, PathPtr variate, std::size_t order,
                 std::optional<std::size_t> slot = std::nullopt);
PathPtr path_scale(double c, PathPtr child);
PathPtr path_sum(std::vector<PathPtr> children);
PathPtr path_decode(PathPtr child);

/// Copy of a jet_term root with its weight slot removed.
PathPtr without_slot(const PathPtr& expr);

/// Checks structural invariants against a model (index ranges, Decode only at the root).
void check_path(const ModelSpec& model, const PathPtr& expr);

std::string describe(const PathPtr& expr);
nlohmann::json to_json(const PathPtr& expr);
PathPtr path_from_json(const nlohmann::json& j);

struct EvalOptions {
  bool use_positions = true;
  /// Replace every jet by its value at the center (the degree-0 part).
  bool skeleton = false;
};

/// Per-call evaluation state: residual streams of one input plus a node cache.
class PathEvaluator {
 public:
  PathEvaluator(const ModelSpec& model, TokenSequence z, EvalOptions opts = {});

  /// Evaluates with the given slot weights; slots not covered raise ConfigError.
  Tensor eval(const PathPtr& expr, std::span<const double> weights);
  const Tensor& stream(std::size_t l) const { return streams_.at(l); }
  const std::vector<Tensor>& streams() const noexcept { return streams_; }
  const ModelSpec& model() const noexcept { return model_; }
  const TokenSequence& tokens() const noexcept { return z_; }

 private:
  Tensor eval_node(const PathPtr& expr);

  const ModelSpec& model_;
  TokenSequence z_;
  EvalOptions opts_;
  std::vector<Tensor> streams_;
  std::span<const double> weights_;
  // Holds the node alive so its address cannot be reused while cached.
  std::unordered_map<const PathNode*, std::pair<PathPtr, Tensor>> cache_;
};

Tensor eval_path(const ModelSpec& model, const PathPtr& expr, const TokenSequence& z,
                 std::span<const double> weights, const EvalOptions& opts = {});

}  // namespace jetx
