#include "jetx/lenses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "jetx/errors.hpp"
#include "jetx/parallel.hpp"

namespace jetx {

namespace {

std::vector<double> last_row(const Tensor& t) {
  auto r = t.row(t.rows() - 1);
  return {r.begin(), r.end()};
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

nlohmann::json tokens_json(const std::vector<TokenScore>& top) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& t : top) out.push_back({{"id", t.id}, {"token", t.token}, {"score", t.score}});
  return out;
}

std::string cell(const TokenScore& t) { return t.token + " (" + fmt(t.score, 2) + ")"; }

}  // namespace

std::vector<TokenScore> top_tokens(const ModelSpec& model, std::span<const double> logits, std::size_t m) {
  if (m == 0) throw ConfigError("top-m needs m >= 1");
  std::vector<int> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  m = std::min(m, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(), [&](int a, int b) {
    return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
  });
  std::vector<TokenScore> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back({idx[i], model.vocab[idx[i]], logits[idx[i]]});
  return out;
}

LensEntry logit_lens(const ModelSpec& model, const TokenSequence& z, std::size_t l, std::size_t m) {
  const Tensor h = residual_stream(model, z, l);
  LensEntry e;
  e.label = "h" + std::to_string(l);
  e.logits = last_row(readout(model, take_row(h, h.rows() - 1)));
  e.top = top_tokens(model, e.logits, m);
  return e;
}

LensEntry iterative_jet_lens(const ModelSpec& model, const TokenSequence& z, std::size_t l, std::size_t k,
                             std::size_t m) {
  if (l > model.num_blocks()) throw ConfigError("lens level " + std::to_string(l) + " beyond L");
  const Expansion exp = jet_expand(model, model.num_blocks(), {{path_stream(l), "h" + std::to_string(l)}}, k);
  PathEvaluator ev(model, z);
  const std::vector<double> w{1.0};
  const Tensor state = ev.eval(exp.terms[0].expr, w);
  LensEntry e;
  e.label = "h" + std::to_string(l);
  e.logits = last_row(unembed(model, take_row(state, state.rows() - 1)));
  e.top = top_tokens(model, e.logits, m);
  return e;
}

std::vector<Center> joint_lens_centers(const ModelSpec& model) {
  std::vector<Center> centers{{path_embed(), "embed"}};
  for (std::size_t l = 1; l <= model.num_blocks(); ++l)
    centers.push_back({path_nonlin(l, path_stream(l - 1)), model.block_label(l)});
  return centers;
}

LensReport joint_jet_lens(const ModelSpec& model, const TokenSequence& z, std::size_t k, std::size_t m,
                          bool optimize, const OptimizeConfig& cfg) {
  const auto centers = joint_lens_centers(model);
  const Expansion exp = jet_expand(model, model.num_blocks(), centers, k);
  PathEvaluator ev(model, z);
  std::vector<double> w = exp.weights.w;
  if (optimize) w = optimize_weights(ev, exp, cfg).weights.w;
  const ExpansionEval result = evaluate_expansion(ev, exp, w);

  LensReport r;
  r.kind = "joint";
  r.model_id = model.model_id;
  r.order = k;
  r.optimized = optimize;
  r.tokens = z;
  const std::vector<double> ones(exp.num_slots, 1.0);
  const auto model_row = last_row(result.model_logits);
  for (const auto& term : exp.terms) {
    const Tensor state = ev.eval(term.expr, ones);
    LensEntry e;
    e.label = centers[*term.slot].label;
    e.weight = w[*term.slot];
    e.logits = last_row(unembed(model, take_row(state, state.rows() - 1)));
    e.top = top_tokens(model, e.logits, m);
    r.entries.push_back(std::move(e));
  }
  r.model_top = top_tokens(model, model_row, m);
  r.expansion_top = top_tokens(model, last_row(result.expansion_logits), m);
  r.cosine = result.report.cosine;
  return r;
}

namespace {

LensReport level_report(const ModelSpec& model, const TokenSequence& z, std::size_t m, const std::string& kind,
                        std::size_t k) {
  LensReport r;
  r.kind = kind;
  r.model_id = model.model_id;
  r.order = k;
  r.tokens = z;
  const auto model_row = last_row(forward(model, z));
  for (std::size_t l = 0; l <= model.num_blocks(); ++l) {
    LensEntry e = kind == "logit" ? logit_lens(model, z, l, m) : iterative_jet_lens(model, z, l, k, m);
    e.cosine = cosine_similarity(e.logits, model_row);
    r.entries.push_back(std::move(e));
  }
  r.model_top = top_tokens(model, model_row, m);
  return r;
}

}  // namespace

LensReport logit_lens_report(const ModelSpec& model, const TokenSequence& z, std::size_t m) {
  return level_report(model, z, m, "logit", 0);
}

LensReport iterative_lens_report(const ModelSpec& model, const TokenSequence& z, std::size_t k, std::size_t m) {
  return level_report(model, z, m, "iterative", k);
}

nlohmann::json LensReport::to_json() const {
  nlohmann::json entries_json = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json j{{"label", e.label}, {"top", tokens_json(e.top)}};
    j["weight"] = e.weight ? nlohmann::json(*e.weight) : nlohmann::json(nullptr);
    if (e.cosine) j["cosine"] = *e.cosine;
    entries_json.push_back(std::move(j));
  }
  nlohmann::json j{{"kind", kind},          {"model_id", model_id},
                   {"order", order},        {"optimized", optimized},
                   {"tokens", tokens},      {"position", tokens.empty() ? 0 : tokens.size() - 1},
                   {"entries", entries_json}, {"model_top", tokens_json(model_top)}};
  if (cosine) {
    j["expansion_top"] = tokens_json(expansion_top);
    j["cosine"] = *cosine;
  }
  return j;
}

std::string LensReport::to_text() const {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"center", "weight"});
  const std::size_t m = model_top.size();
  for (std::size_t i = 0; i < m; ++i) rows[0].push_back("top-" + std::to_string(i + 1));
  if (!cosine) rows[0][1] = "cosine";
  for (const auto& e : entries) {
    std::vector<std::string> row{e.label};
    if (e.weight) {
      row.push_back("[" + fmt(*e.weight) + "]");
    } else {
      row.push_back(e.cosine ? fmt(*e.cosine) : "");
    }
    for (const auto& t : e.top) row.push_back(cell(t));
    rows.push_back(std::move(row));
  }
  std::vector<std::string> model_row{"model", ""};
  for (const auto& t : model_top) model_row.push_back(cell(t));
  rows.push_back(std::move(model_row));
  if (cosine) {
    std::vector<std::string> exp_row{"expansion", "[" + fmt(*cosine) + "]"};
    for (const auto& t : expansion_top) exp_row.push_back(cell(t));
    rows.push_back(std::move(exp_row));
  }

  std::vector<std::size_t> widths;
  for (const auto& row : rows) {
    if (widths.size() < row.size()) widths.resize(row.size(), 0);
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  std::ostringstream os;
  os << kind << " lens  model=" << model_id << "  k=" << order;
  if (kind == "joint") os << "  weights=" << (optimized ? "optimized" : "uniform");
  os << "  position=" << (tokens.empty() ? 0 : tokens.size() - 1) << "\n";
  for (const auto& row : rows) {
    std::string line;
    for (std::size_t c = 0; c < row.size(); ++c) {
      line += row[c];
      if (c + 1 < row.size()) line += std::string(widths[c] - row[c].size() + 2, ' ');
    }
    os << line << "\n";
  }
  return os.str();
}

LensKind parse_lens_kind(const std::string& s) {
  if (s == "logit") return LensKind::logit;
  if (s == "iterative") return LensKind::iterative;
  if (s == "joint") return LensKind::joint;
  throw ConfigError("unknown lens kind '" + s + "' (expected logit, iterative or joint)");
}

std::string to_string(LensKind k) {
  switch (k) {
    case LensKind::logit: return "logit";
    case LensKind::iterative: return "iterative";
    case LensKind::joint: return "joint";
  }
  return "?";
}

double lens_cosine(const ModelSpec& model, const TokenSequence& z, LensKind kind, std::size_t k, std::size_t level,
                   bool optimize) {
  if (kind == LensKind::joint) return *joint_jet_lens(model, z, k, 1, optimize).cosine;
  const auto model_row = last_row(forward(model, z));
  const LensEntry e = kind == LensKind::logit ? logit_lens(model, z, level, 1) : iterative_jet_lens(model, z, level, k, 1);
  return cosine_similarity(e.logits, model_row);
}

SweepResult lens_similarity_sweep(const ModelSpec& model, const std::vector<TokenSequence>& corpus, LensKind kind,
                                  const std::vector<std::size_t>& orders, std::size_t level, bool optimize,
                                  std::size_t threads) {
  if (corpus.empty()) throw ConfigError("similarity sweep needs a non-empty corpus");
  SweepResult out;
  for (std::size_t k : orders) {
    std::vector<std::optional<double>> values(corpus.size());
    std::vector<std::string> errors(corpus.size());
    parallel_for(corpus.size(), threads, [&](std::size_t i) {
      try {
        values[i] = lens_cosine(model, corpus[i], kind, k, level, optimize);
      } catch (const DomainError& e) {
        errors[i] = e.what();
      }
    });
    SweepRow row;
    row.k = k;
    row.lens = to_string(kind);
    if (kind == LensKind::joint && optimize) row.lens += "-opt";
    if (kind != LensKind::joint) row.lens += "@" + std::to_string(level);
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (values[i]) {
        ++row.n;
        sum += *values[i];
      } else {
        out.errors.push_back("k=" + std::to_string(k) + " sentence " + std::to_string(i) + ": " + errors[i]);
      }
    }
    row.mean = row.n ? sum / static_cast<double>(row.n) : std::nan("");
    for (const auto& v : values)
      if (v) sq += (*v - row.mean) * (*v - row.mean);
    row.stddev = row.n ? std::sqrt(sq / static_cast<double>(row.n)) : std::nan("");
    out.rows.push_back(row);
  }
  return out;
}

std::string sweep_csv(const SweepResult& result) {
  std::ostringstream os;
  os << "k,lens,mean_cosine,std,n\n";
  for (const auto& r : result.rows) {
    os << r.k << "," << r.lens << "," << (r.n ? fmt(r.mean, 6) : "nan") << "," << (r.n ? fmt(r.stddev, 6) : "nan")
       << "," << r.n << "\n";
  }
  return os.str();
}

}  // namespace jetx
