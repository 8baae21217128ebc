#include "jetx/ngramkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "jetx/errors.hpp"
#include "jetx/parallel.hpp"

namespace jetx {

namespace {

std::vector<int> full_or(const ModelSpec& model, const std::vector<int>& subset) {
  if (!subset.empty()) {
    for (int id : subset)
      if (id < 0 || static_cast<std::size_t>(id) >= model.vocab_size)
        throw ConfigError("token id " + std::to_string(id) + " outside the vocabulary");
    return subset;
  }
  std::vector<int> all(model.vocab_size);
  std::iota(all.begin(), all.end(), 0);
  return all;
}

BigramRows sweep_rows(const ModelSpec& model, const PathPtr& expr, const std::vector<int>& ids, std::size_t threads) {
  BigramRows out;
  out.ids = ids;
  out.logits = Tensor({ids.size(), model.vocab_size});
  out.model_id = model.model_id;
  out.step = model.step;
  out.vocab = model.vocab;
  const std::vector<double> unit{1.0};
  EvalOptions opts;
  opts.use_positions = false;
  parallel_for(ids.size(), threads, [&](std::size_t i) {
    PathEvaluator ev(model, {ids[i]}, opts);
    const Tensor logits = unembed(model, ev.eval(expr, unit));
    std::copy(logits.row(0).begin(), logits.row(0).end(), out.logits.row(i).begin());
  });
  return out;
}

bool entry_before(const NGramEntry& a, const NGramEntry& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (quoted) throw FormatError("unterminated quote in CSV line");
  out.push_back(cur);
  return out;
}

std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
  auto p = csv_path;
  return p.replace_extension(".json");
}

}  // namespace

std::string NGramTable::vocab_fingerprint() const {
  ModelSpec tmp;
  tmp.vocab = vocab;
  return tmp.vocab_fingerprint();
}

nlohmann::json NGramTable::metadata() const {
  nlohmann::json j{{"arity", arity},
                   {"model_id", model_id},
                   {"path", path},
                   {"order", order},
                   {"normalized", normalized},
                   {"rows", entries.size()},
                   {"positions", false},
                   {"vocab_fingerprint", vocab_fingerprint()},
                   {"vocab", vocab}};
  j["step"] = step ? nlohmann::json(*step) : nlohmann::json(nullptr);
  return j;
}

PathPtr bigram_path(const ModelSpec& model, std::optional<std::size_t> mlp_block, std::size_t k) {
  const std::size_t L = model.num_blocks();
  Center center{path_embed(), "embed"};
  if (mlp_block) {
    if (model.block(*mlp_block).kind != BlockKind::mlp) {
      throw ConfigError("block " + std::to_string(*mlp_block) + " is not an MLP");
    }
    // Expand gamma_m around the embedding, keep only its jet term.
    const Expansion inner = jet_expand(model, *mlp_block - 1, {center}, k);
    center = {without_slot(inner.terms.back().expr), model.block_label(*mlp_block)};
  }
  return without_slot(jet_expand(model, L, {center}, k).terms.front().expr);
}

BigramRows bigram_encode_decode(const ModelSpec& model, std::size_t k, const std::vector<int>& subset,
                                std::size_t threads) {
  BigramRows rows = sweep_rows(model, bigram_path(model, std::nullopt, k), full_or(model, subset), threads);
  rows.path = "encode-decode";
  rows.order = k;
  return rows;
}

BigramRows bigram_via_mlp(const ModelSpec& model, std::size_t mlp_block, std::size_t k, const std::vector<int>& subset,
                          std::size_t threads) {
  BigramRows rows = sweep_rows(model, bigram_path(model, mlp_block, k), full_or(model, subset), threads);
  rows.path = model.block_label(mlp_block);
  rows.order = k;
  return rows;
}

BigramRows scale_rows(BigramRows rows, double s) {
  rows.logits *= s;
  return rows;
}

NGramTable to_table(const BigramRows& rows, bool probabilities) {
  NGramTable t;
  t.arity = 2;
  t.model_id = rows.model_id;
  t.path = rows.path;
  t.order = rows.order;
  t.normalized = probabilities;
  t.step = rows.step;
  t.vocab = rows.vocab;
  const std::size_t c = rows.logits.cols();
  t.entries.reserve(rows.ids.size() * c);
  for (std::size_t i = 0; i < rows.ids.size(); ++i) {
    std::vector<double> vals(rows.logits.row(i).begin(), rows.logits.row(i).end());
    if (probabilities) vals = conditional_probs(vals);
    for (std::size_t u = 0; u < c; ++u) {
      if (!std::isfinite(vals[u])) throw DomainError("non-finite bi-gram score for first token " +
                                                     std::to_string(rows.ids[i]));
      t.entries.push_back({{rows.ids[i], static_cast<int>(u)}, static_cast<float>(vals[u])});
    }
  }
  return t;
}

NGramTable trigram_via_head(const ModelSpec& model, const TrigramConfig& cfg, std::size_t threads) {
  const Block& blk = model.block(cfg.attn_block);
  if (blk.kind != BlockKind::attention) throw ConfigError("block " + std::to_string(cfg.attn_block) + " is not attention");
  const AttentionParams& a = blk.attn;
  if (cfg.head >= a.num_heads) {
    throw ConfigError("head " + std::to_string(cfg.head) + " out of range for block " + std::to_string(cfg.attn_block) +
                      " with " + std::to_string(a.num_heads) + " heads");
  }
  if (cfg.topk_per_pair == 0) throw ConfigError("topk per pair must be at least 1");
  const std::size_t hd = a.head_dim, d = model.hidden_dim, c = model.vocab_size;
  const std::vector<int> keys = full_or(model, cfg.keys), queries = full_or(model, cfg.queries);

  // Per-token normed embeddings projected through this head.
  std::vector<int> needed(keys);
  needed.insert(needed.end(), queries.begin(), queries.end());
  std::sort(needed.begin(), needed.end());
  needed.erase(std::unique(needed.begin(), needed.end()), needed.end());
  const Tensor normed = apply_norm(blk.norm, embed(model, needed, false));
  auto head_proj = [&](const Tensor& w, const std::vector<double>& b) {
    Tensor out = matmul(normed, slice_cols(w, cfg.head * hd, hd));
    if (!b.empty()) out = add_row_vector(std::move(out), std::span<const double>(b).subspan(cfg.head * hd, hd));
    return out;
  };
  const Tensor q = head_proj(a.wq, a.bq), k = head_proj(a.wk, a.bk);
  Tensor wo_h({hd, d});
  for (std::size_t r = 0; r < hd; ++r) {
    auto src = a.wo.row(cfg.head * hd + r);
    std::copy(src.begin(), src.end(), wo_h.row(r).begin());
  }
  const Tensor ov = matmul(head_proj(a.wv, a.bv), wo_h);
  std::vector<std::size_t> row_of(c, 0);
  for (std::size_t i = 0; i < needed.size(); ++i) row_of[static_cast<std::size_t>(needed[i])] = i;
  const double inv = 1.0 / std::sqrt(static_cast<double>(hd));

  const SeriesMap decoder = nonlin_map(model, model.num_blocks() + 1);
  std::vector<std::vector<NGramEntry>> per_key(keys.size());
  parallel_for(keys.size(), threads, [&](std::size_t ki) {
    const int s = keys[ki];
    const std::size_t rs = row_of[static_cast<std::size_t>(s)];
    auto& bucket = per_key[ki];
    for (int t : queries) {
      const std::size_t rt = row_of[static_cast<std::size_t>(t)];
      double alpha = 1.0;
      if (!cfg.alpha_one) {
        const double s_key = dot(q.row(rt), k.row(rs)) * inv, s_self = dot(q.row(rt), k.row(rt)) * inv;
        const double m = std::max(s_key, s_self);
        alpha = std::exp(s_key - m) / (std::exp(s_key - m) + std::exp(s_self - m));
      }
      Tensor x({1, d});
      for (std::size_t j = 0; j < d; ++j) x[j] = alpha * ov.at(rs, j);
      Tensor variate = x;
      if (cfg.k > 0) {
        ForwardOptions fo;
        fo.use_positions = false;
        variate = take_row(residual_streams(model, {s, t}, fo).back(), 1);
      }
      const Tensor logits = unembed(model, jet_eval(decoder, {x, variate, cfg.k}));
      std::vector<NGramEntry> row;
      row.reserve(c);
      for (std::size_t u = 0; u < c; ++u) row.push_back({{s, t, static_cast<int>(u)}, static_cast<float>(logits[u])});
      const std::size_t keep = std::min(cfg.topk_per_pair, c);
      std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(keep), row.end(), entry_before);
      bucket.insert(bucket.end(), row.begin(), row.begin() + static_cast<std::ptrdiff_t>(keep));
    }
  });

  NGramTable table;
  table.arity = 3;
  table.model_id = model.model_id;
  table.path = "attn:" + std::to_string(cfg.attn_block) + ":head" + std::to_string(cfg.head) +
               (cfg.alpha_one ? ":alpha1" : "");
  table.order = cfg.k;
  table.step = model.step;
  table.vocab = model.vocab;
  for (auto& b : per_key) table.entries.insert(table.entries.end(), b.begin(), b.end());
  return table;
}

NGramTable topk(const NGramTable& table, std::size_t k) {
  NGramTable out = table;
  std::vector<NGramEntry> entries = table.entries;
  const std::size_t keep = std::min(k, entries.size());
  std::partial_sort(entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(keep), entries.end(), entry_before);
  entries.resize(keep);
  out.entries = std::move(entries);
  return out;
}

std::vector<DiffEntry> diff(const NGramTable& a, const NGramTable& b, std::size_t k) {
  if (a.vocab != b.vocab) {
    throw ConfigError("cannot diff tables over different vocabularies (" + a.vocab_fingerprint() + " vs " +
                      b.vocab_fingerprint() + ")");
  }
  if (a.arity != b.arity) throw ConfigError("cannot diff tables of different arity");
  std::map<std::vector<int>, float> full_a, full_b;
  for (const auto& e : a.entries) full_a.emplace(e.tokens, e.score);
  for (const auto& e : b.entries) full_b.emplace(e.tokens, e.score);
  const NGramTable ta = topk(a, k), tb = topk(b, k);
  std::set<std::vector<int>> in_a, in_b;
  for (const auto& e : ta.entries) in_a.insert(e.tokens);
  for (const auto& e : tb.entries) in_b.insert(e.tokens);

  auto lookup = [](const std::map<std::vector<int>, float>& m, const std::vector<int>& key) {
    auto it = m.find(key);
    return it == m.end() ? std::nan("") : static_cast<double>(it->second);
  };
  std::vector<DiffEntry> out;
  for (const auto& e : ta.entries)
    if (!in_b.count(e.tokens)) out.push_back({e.tokens, "A-only", e.score, lookup(full_b, e.tokens)});
  for (const auto& e : tb.entries)
    if (!in_a.count(e.tokens)) out.push_back({e.tokens, "B-only", lookup(full_a, e.tokens), e.score});
  return out;
}

std::vector<double> conditional_probs(std::span<const double> logits) {
  if (logits.empty()) throw ConfigError("empty logit row");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp(logits[i] - m);
  for (double& v : p) v /= total;
  return p;
}

bool glob_match(const std::string& pattern, const std::string& text) {
  std::size_t p = 0, t = 0, star = std::string::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
      ++p;
      ++t;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = t;
    } else if (star != std::string::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

std::vector<int> KeywordSet::ids() const {
  std::set<int> all;
  for (const auto& r : resolved) all.insert(r.begin(), r.end());
  return {all.begin(), all.end()};
}

KeywordSet resolve_keywords(const ModelSpec& model, const std::vector<std::string>& patterns) {
  KeywordSet ks;
  ks.patterns = patterns;
  for (const auto& p : patterns) {
    std::vector<int> ids;
    if (p.find_first_of("*?") == std::string::npos) {
      if (auto id = model.token_id(p)) ids.push_back(*id);
    } else {
      for (std::size_t i = 0; i < model.vocab.size(); ++i)
        if (glob_match(p, model.vocab[i])) ids.push_back(static_cast<int>(i));
    }
    if (ids.empty()) ks.unresolved.push_back(p);
    ks.resolved.push_back(std::move(ids));
  }
  return ks;
}

std::vector<std::string> read_keyword_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open keyword file: " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    out.push_back(line.substr(b, e - b + 1));
  }
  return out;
}

double keyword_mass(const BigramRows& rows, const KeywordSet& keywords, bool sum_only) {
  const std::vector<int> ids = keywords.ids();
  if (ids.empty()) throw ConfigError("no keyword resolved to a vocabulary id");
  const std::size_t c = rows.logits.cols();
  if (rows.logits.rows() == 0 || c == 0) throw ConfigError("keyword mass needs full-vocabulary rows");
  std::map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < rows.ids.size(); ++i) row_of.emplace(rows.ids[i], i);
  double mass = 0.0;
  for (int v : ids) {
    auto it = row_of.find(v);
    if (it == row_of.end()) throw ConfigError("rows lack keyword first token " + std::to_string(v));
    const auto p = conditional_probs(rows.logits.row(it->second));
    for (int u : ids) mass += p[static_cast<std::size_t>(u)];
  }
  return sum_only ? mass : mass / static_cast<double>(ids.size());
}

Unigrams read_unigrams(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open unigram file: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed unigram file " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError("unigram file must map token strings to probabilities");
  Unigrams out;
  for (const auto& [token, v] : j.items()) {
    if (!v.is_number()) throw FormatError("unigram probability for '" + token + "' is not a number");
    const double p = v.get<double>();
    if (!std::isfinite(p) || p < 0.0) throw FormatError("invalid unigram probability for '" + token + "'");
    out.emplace(token, p);
  }
  return out;
}

PseudoJointResult pseudo_joint_mass(const BigramRows& rows, const Unigrams& unigrams, std::size_t k) {
  PseudoJointResult out;
  if (k == 0) return out;
  std::vector<double> joint;
  joint.reserve(rows.ids.size() * rows.logits.cols());
  for (std::size_t i = 0; i < rows.ids.size(); ++i) {
    const std::string& token = rows.vocab.at(static_cast<std::size_t>(rows.ids[i]));
    auto it = unigrams.find(token);
    if (it == unigrams.end()) {
      out.missing.push_back(token);
      continue;
    }
    for (double p : conditional_probs(rows.logits.row(i))) joint.push_back(it->second * p);
  }
  const std::size_t keep = std::min(k, joint.size());
  std::partial_sort(joint.begin(), joint.begin() + static_cast<std::ptrdiff_t>(keep), joint.end(), std::greater<>());
  for (std::size_t i = 0; i < keep; ++i) out.mass += joint[i];
  return out;
}

std::vector<double> hit_ratio(const std::vector<NGramTable>& tables, const NGramTable& reference, std::size_t k) {
  if (k == 0) throw ConfigError("hit ratio needs K >= 1");
  std::set<std::vector<int>> ref;
  for (const auto& e : topk(reference, k).entries) ref.insert(e.tokens);
  std::vector<double> out;
  for (const auto& t : tables) {
    if (t.vocab != reference.vocab) throw ConfigError("hit ratio tables must share the reference vocabulary");
    std::size_t hits = 0;
    for (const auto& e : topk(t, k).entries) hits += ref.count(e.tokens);
    out.push_back(static_cast<double>(hits) / static_cast<double>(k));
  }
  return out;
}

std::vector<TracePoint> score_trace(const std::vector<NGramTable>& tables, const std::vector<std::vector<int>>& ngrams) {
  std::vector<TracePoint> out;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    std::map<std::vector<int>, float> scores;
    for (const auto& e : tables[i].entries) scores.emplace(e.tokens, e.score);
    const long long step = tables[i].step.value_or(static_cast<long long>(i));
    for (const auto& g : ngrams) {
      auto it = scores.find(g);
      if (it == scores.end()) throw ConfigError("n-gram not present in table for step " + std::to_string(step));
      out.push_back({step, g, it->second});
    }
  }
  return out;
}

std::vector<std::vector<int>> parse_ngram_list(const ModelSpec& model, const std::vector<std::string>& specs) {
  std::vector<std::vector<int>> out;
  for (const auto& s : specs) {
    std::istringstream in(s);
    std::vector<int> ids;
    std::string word;
    while (in >> word) {
      auto id = model.token_id(word);
      if (!id) throw ConfigError("unresolvable n-gram '" + s + "': '" + word + "' is not in the vocabulary");
      ids.push_back(*id);
    }
    if (ids.size() < 2) throw ConfigError("n-gram '" + s + "' needs at least two tokens");
    out.push_back(std::move(ids));
  }
  return out;
}

std::vector<double> ablate_and_delta(const ModelSpec& model, const Ablation& component,
                                     const std::vector<NGramEntry>& entries, std::size_t threads) {
  if (!component.active()) throw ConfigError("no component selected for ablation");
  ForwardOptions base;
  base.use_positions = false;
  ForwardOptions ablated = base;
  ablated.ablation = component;
  // Validate the component once up front so errors are not per-entry.
  if (!entries.empty()) {
    TokenSequence ctx(entries[0].tokens.begin(), entries[0].tokens.end() - 1);
    residual_streams(model, ctx, ablated);
  }
  std::vector<double> out(entries.size());
  parallel_for(entries.size(), threads, [&](std::size_t i) {
    const auto& e = entries[i];
    if (e.tokens.size() < 2) throw ConfigError("ablation entries need a context and a target");
    const TokenSequence ctx(e.tokens.begin(), e.tokens.end() - 1);
    const auto target = static_cast<std::size_t>(e.tokens.back());
    const Tensor before = forward(model, ctx, base), after = forward(model, ctx, ablated);
    out[i] = after.at(after.rows() - 1, target) - before.at(before.rows() - 1, target);
  });
  return out;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string format_score(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string table_csv(const NGramTable& table) {
  std::ostringstream os;
  for (std::size_t i = 0; i < table.arity; ++i) os << "token" << i + 1 << ",";
  os << "score\n";
  for (const auto& e : table.entries) {
    for (int id : e.tokens) os << csv_escape(table.vocab.at(static_cast<std::size_t>(id))) << ",";
    os << format_score(e.score) << "\n";
  }
  return os.str();
}

void write_table(const NGramTable& table, const std::filesystem::path& csv_path) {
  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw FormatError("cannot write " + csv_path.string());
  csv << table_csv(table);
  std::ofstream meta(sidecar_path(csv_path), std::ios::binary);
  if (!meta) throw FormatError("cannot write " + sidecar_path(csv_path).string());
  meta << table.metadata().dump(2) << "\n";
}

NGramTable read_table(const std::filesystem::path& csv_path) {
  std::ifstream meta_in(sidecar_path(csv_path));
  if (!meta_in) throw FormatError("missing table sidecar " + sidecar_path(csv_path).string());
  NGramTable t;
  try {
    const auto meta = nlohmann::json::parse(meta_in);
    t.arity = meta.at("arity").get<std::size_t>();
    t.model_id = meta.at("model_id").get<std::string>();
    t.path = meta.at("path").get<std::string>();
    t.order = meta.at("order").get<std::size_t>();
    t.normalized = meta.at("normalized").get<bool>();
    if (!meta.at("step").is_null()) t.step = meta.at("step").get<long long>();
    t.vocab = meta.at("vocab").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed table sidecar: " + std::string(e.what()));
  }
  std::map<std::string, int> index;
  for (std::size_t i = 0; i < t.vocab.size(); ++i) index.emplace(t.vocab[i], static_cast<int>(i));

  std::ifstream in(csv_path);
  if (!in) throw FormatError("cannot open table " + csv_path.string());
  std::string line;
  std::getline(in, line);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != t.arity + 1) {
      throw FormatError(csv_path.string() + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(t.arity + 1) + " columns");
    }
    NGramEntry e;
    for (std::size_t i = 0; i < t.arity; ++i) {
      auto it = index.find(cells[i]);
      if (it == index.end()) throw FormatError(csv_path.string() + ":" + std::to_string(lineno) + ": unknown token");
      e.tokens.push_back(it->second);
    }
    try {
      e.score = std::stof(cells.back());
    } catch (const std::exception&) {
      throw FormatError(csv_path.string() + ":" + std::to_string(lineno) + ": bad score");
    }
    t.entries.push_back(std::move(e));
  }
  return t;
}

}  // namespace jetx
