#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "jetx/expander.hpp"

namespace jetx {

struct TokenScore {
  int id = 0;
  std::string token;
  double score = 0.0;
};

/// Highest scores first; ties broken by lower token id.
std::vector<TokenScore> top_tokens(const ModelSpec& model, std::span<const double> logits, std::size_t m);

struct LensEntry {
  std::string label;
  std::optional<double> weight;
  std::vector<TokenScore> top;
  std::vector<double> logits;  // final-position logits behind `top`
  std::optional<double> cosine;  // against the model logits
};

struct LensReport {
  std::string kind;  // logit, iterative, joint
  std::string model_id;
  std::size_t order = 0;
  bool optimized = false;
  std::vector<int> tokens;
  std::vector<LensEntry> entries;
  std::vector<TokenScore> model_top;
  std::vector<TokenScore> expansion_top;  // joint lens only
  std::optional<double> cosine;           // joint lens only

  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// U gamma_{L+1}(h_l(z)) read directly from the residual stream.
LensEntry logit_lens(const ModelSpec& model, const TokenSequence& z, std::size_t l, std::size_t m);
/// U J^k gamma_{L+1}(h_l)(h_L), evaluated through the expander.
LensEntry iterative_jet_lens(const ModelSpec& model, const TokenSequence& z, std::size_t l, std::size_t k,
                             std::size_t m);

/// Centers: the embedding plus every block output gamma_l(h_{l-1}).
std::vector<Center> joint_lens_centers(const ModelSpec& model);
LensReport joint_jet_lens(const ModelSpec& model, const TokenSequence& z, std::size_t k, std::size_t m,
                          bool optimize, const OptimizeConfig& cfg = {});

/// One entry per stream level 0..L.
LensReport logit_lens_report(const ModelSpec& model, const TokenSequence& z, std::size_t m);
LensReport iterative_lens_report(const ModelSpec& model, const TokenSequence& z, std::size_t k, std::size_t m);

enum class LensKind { logit, iterative, joint };
LensKind parse_lens_kind(const std::string& s);
std::string to_string(LensKind k);

/// Cosine between the lens logits and the model logits at the final position.
/// logit/iterative lenses read level `level`; joint lenses ignore it.
double lens_cosine(const ModelSpec& model, const TokenSequence& z, LensKind kind, std::size_t k, std::size_t level,
                   bool optimize);

struct SweepRow {
  std::size_t k = 0;
  std::string lens;
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t n = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<std::string> errors;  // one line per failed sentence
};

SweepResult lens_similarity_sweep(const ModelSpec& model, const std::vector<TokenSequence>& corpus, LensKind kind,
                                  const std::vector<std::size_t>& orders, std::size_t level, bool optimize,
                                  std::size_t threads = 1);
std::string sweep_csv(const SweepResult& result);

}  // namespace jetx
