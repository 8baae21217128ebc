#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "jetx/path.hpp"

namespace jetx {

struct SimplexWeights {
  std::vector<double> w;

  static SimplexWeights uniform(std::size_t n);
  std::size_t size() const noexcept { return w.size(); }
  /// Throws ConfigError unless w >= 0 and sums to 1 within 1e-9.
  void validate() const;
};

struct Center {
  PathPtr expr;
  std::string label;
};

struct ExpansionTerm {
  PathPtr expr;  // pre-unembedding state
  std::optional<std::size_t> slot;
  std::string label;
};

/// Weighted jet paths plus an implicit remainder (target minus the term sum).
struct Expansion {
  std::size_t level = 0;  // expands gamma_{level+1}; level == L is the decoder
  bool decoder = false;
  std::size_t order = 0;
  std::size_t num_slots = 0;
  std::vector<ExpansionTerm> terms;
  SimplexWeights weights;
  /// The computation being rewritten: h_{l+1}, or gamma_{L+1}(h_L) at the decoder.
  PathPtr target;

  nlohmann::json to_json() const;
};

/// One application of the convex-combination lemma at block l+1 (or the decoder when l == L).
Expansion jet_expand(const ModelSpec& model, std::size_t level, const std::vector<Center>& centers, std::size_t k);

/// 2^L equally weighted input-to-output paths, one per subset of blocks.
/// Refuses models with more than max_blocks blocks.
Expansion exp_jet_expansion(const ModelSpec& model, std::size_t k, std::size_t max_blocks = 12);

/// "{}", "{1}", "{2}", "{1,2}", ... in the order exp_jet_expansion emits its terms.
std::vector<std::string> subset_labels(std::size_t num_blocks);
std::vector<std::vector<std::size_t>> subset_members(std::size_t num_blocks);

struct RemainderReport {
  double remainder_norm = 0.0;        // ||delta|| at the final position
  double logit_remainder_norm = 0.0;  // ||U delta||
  double cosine = 0.0;                // model vs expansion logits
};

struct ExpansionEval {
  Tensor expansion_state;   // sum of terms, T x d
  Tensor expansion_logits;  // U applied to the sum
  Tensor model_logits;
  Tensor remainder;  // target - sum of terms
  RemainderReport report;
};

std::vector<Tensor> evaluate_terms(PathEvaluator& ev, const Expansion& exp, std::span<const double> w);
/// Decoder-level expansions only.
ExpansionEval evaluate_expansion(PathEvaluator& ev, const Expansion& exp, std::span<const double> w);
ExpansionEval evaluate_expansion(const ModelSpec& model, const Expansion& exp, const TokenSequence& z,
                                 std::span<const double> w, const EvalOptions& opts = {});

struct StreamEval {
  Tensor expansion;
  Tensor target;
  Tensor remainder;
};
StreamEval evaluate_stream_expansion(PathEvaluator& ev, const Expansion& exp, std::span<const double> w);

struct OptimizeConfig {
  std::size_t max_iters = 500;
  double tol = 1e-8;
  double step = 0.0;  // 0 picks 1 / Lipschitz constant
};

struct OptimizeResult {
  SimplexWeights weights;
  double objective = 0.0;          // ||U delta||^2 at the returned weights
  double uniform_objective = 0.0;  // ... at uniform weights
  std::vector<double> history;     // objective per iterate, nonincreasing
  double kkt_residual = 0.0;       // ||w - P(w - grad)|| of the normalized objective
  std::size_t iterations = 0;
};

std::vector<double> project_to_simplex(std::span<const double> v);
/// min_w ||G w - t||^2 over the simplex; G is m x N (column i is term i), t has m entries.
OptimizeResult minimize_on_simplex(const Tensor& g, std::span<const double> t, const OptimizeConfig& cfg = {});
double simplex_objective(const Tensor& g, std::span<const double> t, std::span<const double> w);

/// Minimizes ||U delta||^2 at the final position over the decoder weights.
OptimizeResult optimize_weights(PathEvaluator& ev, const Expansion& exp, const OptimizeConfig& cfg = {});
OptimizeResult optimize_weights(const ModelSpec& model, const Expansion& exp, const TokenSequence& z,
                                const OptimizeConfig& cfg = {}, const EvalOptions& opts = {});

struct ProbeResult {
  double slope = 0.0;
  bool exact = false;  // remainder vanished at every scale
  std::vector<double> scales;
  std::vector<double> remainders;
};

/// Contracts each center toward y = sum of centers by s and fits the log-log slope of
/// || f(y) - sum_i w_i J^k f(x_i(s))(y) || against s.
ProbeResult remainder_order_probe(const SeriesMap& f, const std::vector<Tensor>& centers, std::size_t k,
                                  std::span<const double> weights = {},
                                  std::vector<double> scales = {1.0, 0.5, 0.25, 0.125});

}  // namespace jetx
