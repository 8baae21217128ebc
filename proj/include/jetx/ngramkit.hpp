#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "jetx/expander.hpp"

namespace jetx {

struct NGramEntry {
  std::vector<int> tokens;
  float score = 0.0f;
};

struct NGramTable {
  std::size_t arity = 2;
  std::vector<NGramEntry> entries;
  std::string model_id;
  std::string path;  // e.g. "encode-decode", "mlp:2", "attn:1:head0"
  std::size_t order = 0;
  bool normalized = false;  // scores are conditional probabilities
  std::optional<long long> step;
  std::vector<std::string> vocab;

  std::string vocab_fingerprint() const;
  nlohmann::json metadata() const;
};

/// Full-vocabulary score rows of a bi-gram path: rows[i] holds logits for first token ids[i].
struct BigramRows {
  std::vector<int> ids;
  Tensor logits;  // ids.size() x c
  std::string model_id;
  std::string path;
  std::size_t order = 0;
  std::optional<long long> step;
  std::vector<std::string> vocab;
};

/// Empty subset means the whole vocabulary.
BigramRows bigram_encode_decode(const ModelSpec& model, std::size_t k = 0, const std::vector<int>& subset = {},
                                std::size_t threads = 1);
/// Path U gamma_{L+1}(gamma_m(eta(v))) with unit weight.
BigramRows bigram_via_mlp(const ModelSpec& model, std::size_t mlp_block, std::size_t k = 0,
                          const std::vector<int>& subset = {}, std::size_t threads = 1);
/// The path expression a bi-gram sweep evaluates for each single-token input.
PathPtr bigram_path(const ModelSpec& model, std::optional<std::size_t> mlp_block, std::size_t k);

/// Scales every path logit by s (the single-path weight) before tabulating.
BigramRows scale_rows(BigramRows rows, double s);
NGramTable to_table(const BigramRows& rows, bool probabilities = false);

struct TrigramConfig {
  std::size_t attn_block = 1;
  std::size_t head = 0;
  std::size_t k = 0;
  std::vector<int> keys;     // empty: whole vocabulary
  std::vector<int> queries;  // empty: whole vocabulary
  std::size_t topk_per_pair = 5;
  bool alpha_one = false;  // skip the two-position softmax
};

/// Skip-tri-grams (key, query, next) through one head's key-position summand.
NGramTable trigram_via_head(const ModelSpec& model, const TrigramConfig& cfg, std::size_t threads = 1);

/// Highest scores first, ties by lexicographic token tuple.
NGramTable topk(const NGramTable& table, std::size_t k);

struct DiffEntry {
  std::vector<int> tokens;
  std::string side;  // "A-only" or "B-only"
  double score_a = 0.0;
  double score_b = 0.0;  // NaN when the tuple is absent from that table
};

std::vector<DiffEntry> diff(const NGramTable& a, const NGramTable& b, std::size_t k);

std::vector<double> conditional_probs(std::span<const double> logits);

struct KeywordSet {
  std::vector<std::string> patterns;
  std::vector<std::vector<int>> resolved;  // per pattern
  std::vector<std::string> unresolved;

  std::vector<int> ids() const;  // sorted union
};

KeywordSet resolve_keywords(const ModelSpec& model, const std::vector<std::string>& patterns);
std::vector<std::string> read_keyword_file(const std::filesystem::path& path);
bool glob_match(const std::string& pattern, const std::string& text);

/// Mass of keyword pairs (v, u) under P(u | v) from the rows; divided by the number of
/// keyword first tokens unless `sum_only`.
double keyword_mass(const BigramRows& rows, const KeywordSet& keywords, bool sum_only = false);

using Unigrams = std::map<std::string, double>;
Unigrams read_unigrams(const std::filesystem::path& path);

struct PseudoJointResult {
  double mass = 0.0;
  std::vector<std::string> missing;  // first tokens without a unigram probability
};

/// Sum of the K largest P_data(v) P(u | v) over all pairs.
PseudoJointResult pseudo_joint_mass(const BigramRows& rows, const Unigrams& unigrams, std::size_t k);

/// |topK(table) intersect topK(reference)| / K for each table.
std::vector<double> hit_ratio(const std::vector<NGramTable>& tables, const NGramTable& reference, std::size_t k);

struct TracePoint {
  long long step = 0;
  std::vector<int> tokens;
  double score = 0.0;
};

std::vector<TracePoint> score_trace(const std::vector<NGramTable>& tables, const std::vector<std::vector<int>>& ngrams);
std::vector<std::vector<int>> parse_ngram_list(const ModelSpec& model, const std::vector<std::string>& specs);

/// Delta target logit per entry after zeroing one component in the full forward pass
/// on the entry's context (all tokens except the last), positions disabled.
std::vector<double> ablate_and_delta(const ModelSpec& model, const Ablation& component,
                                     const std::vector<NGramEntry>& entries, std::size_t threads = 1);

std::string table_csv(const NGramTable& table);
void write_table(const NGramTable& table, const std::filesystem::path& csv_path);
NGramTable read_table(const std::filesystem::path& csv_path);

std::string csv_escape(const std::string& s);
std::string format_score(double v);

}  // namespace jetx
