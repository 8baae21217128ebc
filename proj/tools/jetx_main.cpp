// jetx: command-line front end for jet lenses, expansions and n-gram analyses.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "jetx/errors.hpp"
#include "jetx/lenses.hpp"
#include "jetx/ngramkit.hpp"
#include "jetx/parallel.hpp"
#include "selftest.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace jetx;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitInput = 3;
constexpr int kExitNumeric = 4;

/// Raised for problems with input files so they map to the input-format exit code.
struct InputError : Error {
  using Error::Error;
};

ModelSpec load_input_model(const std::string& path) {
  if (!fs::exists(path)) throw InputError("model file not found: " + path);
  try {
    return load_model(path);
  } catch (const Error& e) {
    throw InputError(e.what());
  }
}

class Output {
 public:
  Output(std::string dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
    fs::create_directories(dir_);
  }

  void input(const std::string& path) { inputs_[path] = file_hash(path); }
  void config(const std::string& key, json value) { config_[key] = std::move(value); }

  void write(const std::string& name, const std::string& content) {
    const fs::path p = fs::path(dir_) / name;
    std::ofstream out(p, std::ios::binary);
    if (!out) throw InputError("cannot write " + p.string());
    out << content;
    out.close();
    outputs_[name] = file_hash(p);
  }

  void write_table_files(const std::string& stem, const NGramTable& t) {
    write(stem + ".csv", table_csv(t));
    write(stem + ".json", t.metadata().dump(2) + "\n");
  }

  void finish() {
    json inputs = json::array();
    for (const auto& [p, h] : inputs_) inputs.push_back({{"path", p}, {"hash", h}});
    json outputs = json::array();
    for (const auto& [p, h] : outputs_) outputs.push_back({{"file", p}, {"hash", h}});
    const json manifest{{"tool", "jetx"}, {"command", command_}, {"config", config_}, {"inputs", inputs},
                        {"outputs", outputs}};
    std::ofstream out(fs::path(dir_) / "manifest.json", std::ios::binary);
    out << manifest.dump(2) << "\n";
  }

 private:
  std::string dir_, command_;
  std::map<std::string, std::string> inputs_, outputs_;
  json config_ = json::object();
};

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

TokenSequence parse_tokens(const ModelSpec& model, const std::string& text, const std::string& ids) {
  if (!ids.empty()) {
    std::istringstream in(ids);
    TokenSequence z;
    std::string tok;
    while (in >> tok) {
      try {
        z.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        throw ConfigError("bad token id '" + tok + "'");
      }
    }
    check_tokens(model, z);
    return z;
  }
  if (text.empty()) throw ConfigError("need --text or --ids");
  try {
    return tokenize(model, text);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
}

std::vector<TokenSequence> read_corpus(const ModelSpec& model, const std::string& path) {
  std::vector<TokenSequence> corpus;
  for (const auto& line : read_lines(path)) {
    try {
      corpus.push_back(tokenize(model, line));
    } catch (const FormatError& e) {
      throw InputError(path + ": " + e.what());
    }
  }
  return corpus;
}

std::vector<std::size_t> parse_orders(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(std::stoul(item));
    } catch (const std::exception&) {
      throw ConfigError("bad order list '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty order list");
  return out;
}

struct PathChoice {
  std::string kind;  // encode-decode, mlp, attn
  std::size_t block = 0;
  std::size_t head = 0;
};

PathChoice parse_path(const std::string& s) {
  if (s == "encode-decode") return {"encode-decode"};
  auto fail = [&] { return ConfigError("bad path '" + s + "' (expected encode-decode, mlp:L or attn:L:H)"); };
  try {
    if (s.rfind("mlp:", 0) == 0) return {"mlp", std::stoul(s.substr(4))};
    if (s.rfind("attn:", 0) == 0) {
      const auto colon = s.find(':', 5);
      if (colon == std::string::npos) throw fail();
      return {"attn", std::stoul(s.substr(5, colon - 5)), std::stoul(s.substr(colon + 1))};
    }
  } catch (const std::invalid_argument&) {
    throw fail();
  }
  throw fail();
}

std::vector<int> read_subset(const ModelSpec& model, const std::string& file, std::size_t first,
                             const std::string& unigram_file) {
  std::vector<int> ids;
  if (!file.empty()) {
    for (const auto& line : read_lines(file)) {
      auto id = model.token_id(line);
      if (!id) throw InputError("subset token '" + line + "' not in vocabulary");
      ids.push_back(*id);
    }
    return ids;
  }
  if (first == 0) return ids;
  // Frequency-ranked when unigrams are available, else the first ids.
  std::vector<std::pair<double, int>> ranked;
  Unigrams uni;
  if (!unigram_file.empty()) uni = read_unigrams(unigram_file);
  for (std::size_t i = 0; i < model.vocab_size; ++i) {
    auto it = uni.find(model.vocab[i]);
    ranked.push_back({it == uni.end() ? 0.0 : it->second, static_cast<int>(i)});
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; i < std::min(first, ranked.size()); ++i) ids.push_back(ranked[i].second);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::string join_ids(const ModelSpec& model, const std::vector<int>& tokens, const char* sep = " ") {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) s += (i ? sep : "") + model.vocab.at(tokens[i]);
  return s;
}

BigramRows bigram_rows(const ModelSpec& model, const PathChoice& path, std::size_t k, const std::vector<int>& subset,
                       std::size_t threads) {
  if (path.kind == "encode-decode") return bigram_encode_decode(model, k, subset, threads);
  if (path.kind == "mlp") return bigram_via_mlp(model, path.block, k, subset, threads);
  throw ConfigError("bi-gram tables need an encode-decode or mlp:L path");
}

// ---------------------------------------------------------------------------

struct Common {
  std::string out = "jetx-out";
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--out", c.out, "Output directory")->capture_default_str();
  app->add_option("--threads", c.threads, "Worker threads (default: JETX_THREADS or all cores)");
}

struct LensArgs {
  Common common;
  std::string model, kind = "joint", text, ids, corpus, orders = "0,1,2";
  std::size_t k = 1, m = 5, level = 0;
  bool optimize = false;
};

int cmd_lens(const LensArgs& a) {
  const ModelSpec model = load_input_model(a.model);
  const std::size_t threads = resolve_threads(a.common.threads);
  const LensKind kind = parse_lens_kind(a.kind);
  Output out(a.common.out, "lens");
  out.input(a.model);
  out.config("kind", a.kind);
  out.config("k", a.k);
  out.config("m", a.m);
  out.config("optimize", a.optimize);

  std::vector<TokenSequence> corpus;
  if (!a.corpus.empty()) {
    out.input(a.corpus);
    corpus = read_corpus(model, a.corpus);
  }
  TokenSequence z;
  if (!a.text.empty() || !a.ids.empty()) {
    z = parse_tokens(model, a.text, a.ids);
  } else if (!corpus.empty()) {
    z = corpus.front();
  } else {
    throw ConfigError("lens needs --text, --ids or --corpus");
  }
  out.config("tokens", z);

  LensReport report;
  switch (kind) {
    case LensKind::logit: report = logit_lens_report(model, z, a.m); break;
    case LensKind::iterative: report = iterative_lens_report(model, z, a.k, a.m); break;
    case LensKind::joint: report = joint_jet_lens(model, z, a.k, a.m, a.optimize); break;
  }
  out.write("lens.json", report.to_json().dump(2) + "\n");
  out.write("lens.txt", report.to_text());
  std::cout << report.to_text();

  std::ostringstream scores;
  scores << "entry,rank,token,score\n";
  for (const auto& e : report.entries)
    for (std::size_t r = 0; r < e.top.size(); ++r)
      scores << csv_escape(e.label) << "," << r + 1 << "," << csv_escape(e.top[r].token) << ","
             << format_score(e.top[r].score) << "\n";
  out.write("lens_scores.csv", scores.str());

  if (!corpus.empty()) {
    out.config("orders", a.orders);
    out.config("level", a.level);
    const SweepResult sweep = lens_similarity_sweep(model, corpus, kind, parse_orders(a.orders), a.level, a.optimize,
                                                    threads);
    for (const auto& e : sweep.errors) std::cerr << "warning: " << e << "\n";
    out.write("similarity.csv", sweep_csv(sweep));
    std::cout << sweep_csv(sweep);
  }
  out.finish();
  return 0;
}

struct ExpandArgs {
  Common common;
  std::string model, text, ids;
  std::size_t k = 1, max_blocks = 12;
  bool list_paths = false;
};

int cmd_expand(const ExpandArgs& a) {
  const ModelSpec model = load_input_model(a.model);
  Output out(a.common.out, "expand");
  out.input(a.model);
  out.config("k", a.k);
  out.config("max_blocks", a.max_blocks);
  const Expansion exp = exp_jet_expansion(model, a.k, a.max_blocks);

  if (a.list_paths) {
    std::string listing;
    for (const auto& t : exp.terms) listing += t.label + "\n";
    std::cout << listing;
    out.write("paths.txt", listing);
    out.finish();
    return 0;
  }
  out.write("expansion.json", exp.to_json().dump(2) + "\n");

  TokenSequence z = (a.text.empty() && a.ids.empty()) ? TokenSequence{0} : parse_tokens(model, a.text, a.ids);
  out.config("tokens", z);
  const auto t0 = std::chrono::steady_clock::now();
  const ExpansionEval ev = evaluate_expansion(model, exp, z, exp.weights.w);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const Tensor logits = forward(model, z);
  const double scale = norm2(logits.row(logits.rows() - 1));
  const json rep{{"paths", exp.terms.size()},
                 {"order", a.k},
                 {"remainder_norm", ev.report.remainder_norm},
                 {"logit_remainder_norm", ev.report.logit_remainder_norm},
                 {"relative_logit_remainder", scale > 0 ? ev.report.logit_remainder_norm / scale : 0.0},
                 {"cosine", ev.report.cosine}};
  out.write("remainder.json", rep.dump(2) + "\n");
  std::printf("paths: %zu\nremainder norm: %.3e\nlogit remainder norm: %.3e\ncosine: %.6f\n", exp.terms.size(),
              ev.report.remainder_norm, ev.report.logit_remainder_norm, ev.report.cosine);
  // Wall time stays off the written files so reruns compare byte for byte.
  std::fprintf(stderr, "evaluation time: %.4f s\n", seconds);
  out.finish();
  return 0;
}

struct NgramArgs {
  Common common;
  std::string model, path = "encode-decode", subset, unigrams;
  std::size_t k = 0, topk = 1000, first = 0, keys = 32, queries = 32, per_pair = 5;
  bool bigram = false, trigram = false, prob = false, alpha_one = false;
  double scale = 1.0;
};

int cmd_ngram(const NgramArgs& a) {
  const ModelSpec model = load_input_model(a.model);
  const std::size_t threads = resolve_threads(a.common.threads);
  if (a.bigram == a.trigram) throw ConfigError("choose exactly one of --bigram or --trigram");
  if (a.topk == 0) throw ConfigError("--topk must be at least 1");
  Output out(a.common.out, "ngram");
  out.input(a.model);
  if (!a.unigrams.empty()) out.input(a.unigrams);
  if (!a.subset.empty()) out.input(a.subset);
  const PathChoice path = parse_path(a.path);
  out.config("path", a.path);
  out.config("k", a.k);
  out.config("topk", a.topk);
  out.config("prob", a.prob);

  NGramTable table;
  if (a.bigram) {
    out.config("scale", a.scale);
    const auto subset = read_subset(model, a.subset, a.first, a.unigrams);
    BigramRows rows = bigram_rows(model, path, a.k, subset, threads);
    if (a.scale != 1.0) rows = scale_rows(std::move(rows), a.scale);
    table = to_table(rows, a.prob);
  } else {
    if (path.kind != "attn") throw ConfigError("tri-gram tables need an attn:L:H path");
    TrigramConfig cfg;
    cfg.attn_block = path.block;
    cfg.head = path.head;
    cfg.k = a.k;
    cfg.keys = read_subset(model, a.subset, a.keys, a.unigrams);
    cfg.queries = read_subset(model, "", a.queries, a.unigrams);
    cfg.topk_per_pair = a.per_pair;
    cfg.alpha_one = a.alpha_one;
    out.config("keys", cfg.keys.size());
    out.config("queries", cfg.queries.size());
    out.config("alpha_one", a.alpha_one);
    table = trigram_via_head(model, cfg, threads);
  }
  const NGramTable top = topk(table, a.topk);
  out.write_table_files("ngram", top);
  std::cout << "wrote " << top.entries.size() << " " << (a.bigram ? "bi" : "tri") << "-grams for path " << top.path
            << "\n";
  out.finish();
  return 0;
}

struct DiffArgs {
  Common common;
  std::string a, b, path = "encode-decode";
  std::size_t k = 0, topk = 1000;
};

int cmd_diff(const DiffArgs& a) {
  const ModelSpec ma = load_input_model(a.a), mb = load_input_model(a.b);
  const std::size_t threads = resolve_threads(a.common.threads);
  Output out(a.common.out, "diff");
  out.input(a.a);
  out.input(a.b);
  out.config("path", a.path);
  out.config("topk", a.topk);
  out.config("k", a.k);
  const PathChoice path = parse_path(a.path);
  const auto d = diff(to_table(bigram_rows(ma, path, a.k, {}, threads)),
                      to_table(bigram_rows(mb, path, a.k, {}, threads)), a.topk);
  std::ostringstream csv;
  csv << "token1,token2,side,score_a,score_b\n";
  std::size_t a_only = 0;
  for (const auto& e : d) {
    a_only += e.side == "A-only";
    for (int id : e.tokens) csv << csv_escape(ma.vocab[id]) << ",";
    csv << e.side << "," << format_score(e.score_a) << "," << format_score(e.score_b) << "\n";
  }
  out.write("diff.csv", csv.str());
  const json summary{{"model_a", ma.model_id}, {"model_b", mb.model_id}, {"topk", a.topk},
                     {"a_only", a_only},        {"b_only", d.size() - a_only}, {"path", a.path}};
  out.write("diff.json", summary.dump(2) + "\n");
  std::cout << "A-only: " << a_only << "  B-only: " << d.size() - a_only << "\n";
  out.finish();
  return 0;
}

struct MassArgs {
  Common common;
  std::string model, keywords, unigrams, path = "encode-decode";
  std::size_t topk = 1000;
  bool sum_only = false;
};

int cmd_mass(const MassArgs& a) {
  const ModelSpec model = load_input_model(a.model);
  const std::size_t threads = resolve_threads(a.common.threads);
  if (a.keywords.empty() == a.unigrams.empty()) throw ConfigError("choose exactly one of --keywords or --unigrams");
  Output out(a.common.out, "mass");
  out.input(a.model);
  out.config("path", a.path);
  const BigramRows rows = bigram_rows(model, parse_path(a.path), 0, {}, threads);
  json result{{"model_id", model.model_id}, {"path", a.path}};
  if (!a.keywords.empty()) {
    out.input(a.keywords);
    out.config("sum_only", a.sum_only);
    std::vector<std::string> patterns;
    try {
      patterns = read_keyword_file(a.keywords);
    } catch (const FormatError& e) {
      throw InputError(e.what());
    }
    const KeywordSet ks = resolve_keywords(model, patterns);
    if (!ks.unresolved.empty()) {
      std::cerr << "warning: unresolved keywords:";
      for (const auto& u : ks.unresolved) std::cerr << " " << u;
      std::cerr << "\n";
    }
    const double mass = keyword_mass(rows, ks, a.sum_only);
    result["kind"] = "keyword";
    result["mass"] = mass;
    result["keyword_ids"] = ks.ids().size();
    result["unresolved"] = ks.unresolved;
    std::printf("keyword bi-gram mass: %.6f (%zu keyword tokens)\n", mass, ks.ids().size());
  } else {
    out.input(a.unigrams);
    out.config("topk", a.topk);
    Unigrams uni;
    try {
      uni = read_unigrams(a.unigrams);
    } catch (const FormatError& e) {
      throw InputError(e.what());
    }
    const auto pj = pseudo_joint_mass(rows, uni, a.topk);
    if (!pj.missing.empty()) std::cerr << "warning: " << pj.missing.size() << " first tokens lack unigram probabilities\n";
    result["kind"] = "pseudo_joint";
    result["mass"] = pj.mass;
    result["topk"] = a.topk;
    result["missing"] = pj.missing;
    std::printf("pseudo-joint mass (top %zu): %.6f\n", a.topk, pj.mass);
  }
  out.write("mass.json", result.dump(2) + "\n");
  out.finish();
  return 0;
}

struct TraceArgs {
  Common common;
  std::vector<std::string> models, bigrams;
  std::string ckpt_dir, unigrams, path = "encode-decode";
  std::size_t topk = 1000;
  bool prob = false;
};

int cmd_trace(const TraceArgs& a) {
  std::vector<std::string> paths = a.models;
  if (!a.ckpt_dir.empty()) {
    if (!fs::is_directory(a.ckpt_dir)) throw InputError("checkpoint directory not found: " + a.ckpt_dir);
    for (const auto& e : fs::directory_iterator(a.ckpt_dir))
      if (e.path().extension() == ".jetm") paths.push_back(e.path().string());
    std::sort(paths.begin(), paths.end());
  }
  if (paths.empty()) throw ConfigError("trace needs --models or --ckpt-dir");
  const std::size_t threads = resolve_threads(a.common.threads);
  Output out(a.common.out, "trace");
  out.config("path", a.path);
  out.config("topk", a.topk);
  out.config("prob", a.prob);
  const PathChoice path = parse_path(a.path);

  std::vector<ModelSpec> models;
  for (const auto& p : paths) {
    out.input(p);
    models.push_back(load_input_model(p));
  }
  std::stable_sort(models.begin(), models.end(),
                   [](const ModelSpec& x, const ModelSpec& y) { return x.step.value_or(0) < y.step.value_or(0); });
  std::vector<NGramTable> tables;
  std::vector<BigramRows> all_rows;
  for (const auto& m : models) {
    all_rows.push_back(bigram_rows(m, path, 0, {}, threads));
    tables.push_back(to_table(all_rows.back(), a.prob));
  }
  auto step_of = [&](std::size_t i) { return models[i].step.value_or(static_cast<long long>(i)); };

  std::ostringstream hits;
  hits << "step,hit_ratio\n";
  if (tables.size() >= 2) {
    const auto ratios = hit_ratio(tables, tables.back(), a.topk);
    for (std::size_t i = 0; i < ratios.size(); ++i) hits << step_of(i) << "," << format_score(ratios[i]) << "\n";
    out.write("hit_ratio.csv", hits.str());
  }
  if (!a.bigrams.empty()) {
    const auto grams = parse_ngram_list(models.back(), a.bigrams);
    std::ostringstream csv;
    csv << "step,bigram,score\n";
    for (const auto& p : score_trace(tables, grams))
      csv << p.step << "," << csv_escape(join_ids(models.back(), p.tokens)) << "," << format_score(p.score) << "\n";
    out.write("trace.csv", csv.str());
  }
  if (!a.unigrams.empty()) {
    out.input(a.unigrams);
    const Unigrams uni = read_unigrams(a.unigrams);
    std::ostringstream csv;
    csv << "step,pseudo_joint_mass\n";
    for (std::size_t i = 0; i < all_rows.size(); ++i)
      csv << step_of(i) << "," << format_score(pseudo_joint_mass(all_rows[i], uni, a.topk).mass) << "\n";
    out.write("pseudo_joint.csv", csv.str());
  }
  std::cout << hits.str();
  out.finish();
  return 0;
}

struct AblateArgs {
  Common common;
  std::string model, path, head;
  std::size_t mlp = 0, topk = 20;
};

int cmd_ablate(const AblateArgs& a) {
  const ModelSpec model = load_input_model(a.model);
  const std::size_t threads = resolve_threads(a.common.threads);
  Output out(a.common.out, "ablate");
  out.input(a.model);
  Ablation comp;
  std::string path = a.path;
  if (a.mlp > 0) {
    comp.mlp_block = a.mlp;
    if (path.empty()) path = "mlp:" + std::to_string(a.mlp);
  } else if (!a.head.empty()) {
    const PathChoice h = parse_path("attn:" + a.head);
    comp.head = {h.block, h.head};
    if (path.empty()) path = "attn:" + a.head;
  } else {
    throw ConfigError("choose --mlp L or --head A:H");
  }
  out.config("path", path);
  out.config("topk", a.topk);
  out.config("component", a.mlp > 0 ? "mlp:" + std::to_string(a.mlp) : "head:" + a.head);

  const PathChoice pc = parse_path(path);
  NGramTable table;
  if (pc.kind == "attn") {
    TrigramConfig cfg;
    cfg.attn_block = pc.block;
    cfg.head = pc.head;
    cfg.keys = read_subset(model, "", 32, "");
    cfg.queries = cfg.keys;
    table = trigram_via_head(model, cfg, threads);
  } else {
    table = to_table(bigram_rows(model, pc, 0, {}, threads));
  }
  const NGramTable top = topk(table, a.topk);
  const auto deltas = ablate_and_delta(model, comp, top.entries, threads);
  std::ostringstream csv;
  for (std::size_t i = 0; i < top.arity; ++i) csv << "token" << i + 1 << ",";
  csv << "path_score,delta_logit\n";
  std::size_t negative = 0;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    negative += deltas[i] < 0;
    for (int id : top.entries[i].tokens) csv << csv_escape(model.vocab[id]) << ",";
    csv << format_score(top.entries[i].score) << "," << format_score(deltas[i]) << "\n";
  }
  out.write("ablate.csv", csv.str());
  std::printf("%zu of %zu entries lose target logit after ablation\n", negative, deltas.size());
  out.finish();
  return 0;
}

struct SelftestArgs {
  std::string fixtures = JETX_DEFAULT_FIXTURES;
  std::string model;
  bool as_json = false;
};

int cmd_selftest(const SelftestArgs& a) {
  const auto results = run_selftest(a.fixtures, a.model);
  bool ok = true;
  int code = 0;
  for (const auto& r : results) {
    if (!r.passed && ok) {
      ok = false;
      code = r.input_error ? kExitInput : kExitNumeric;
    }
  }
  if (a.as_json) {
    json j = json::array();
    for (const auto& r : results) j.push_back({{"check", r.name}, {"passed", r.passed}, {"detail", r.detail}});
    std::cout << json{{"passed", ok}, {"checks", j}}.dump(2) << "\n";
  } else {
    for (const auto& r : results)
      std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << (r.detail.empty() ? "" : "  (" + r.detail + ")") << "\n";
    if (!ok) {
      for (const auto& r : results)
        if (!r.passed) {
          std::cout << "first failing check: " << r.name << "\n";
          break;
        }
    }
  }
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"jetx: jet expansions, lenses and n-gram analyses for residual transformers"};
  app.require_subcommand(1);

  LensArgs lens;
  auto* c_lens = app.add_subcommand("lens", "Logit, iterative or joint jet lens reports");
  add_common(c_lens, lens.common);
  c_lens->add_option("--model", lens.model, "Model archive")->required();
  c_lens->add_option("--kind", lens.kind, "logit | iterative | joint")->capture_default_str();
  c_lens->add_option("--k", lens.k, "Jet order")->capture_default_str();
  c_lens->add_option("--m", lens.m, "Tokens per entry")->capture_default_str();
  c_lens->add_flag("--optimize", lens.optimize, "Optimize joint-lens weights");
  c_lens->add_option("--text", lens.text, "Input words");
  c_lens->add_option("--ids", lens.ids, "Input token ids");
  c_lens->add_option("--corpus", lens.corpus, "Sentences for the similarity sweep");
  c_lens->add_option("--orders", lens.orders, "Orders for the sweep")->capture_default_str();
  c_lens->add_option("--level", lens.level, "Stream level for logit/iterative sweeps")->capture_default_str();

  ExpandArgs expand;
  auto* c_expand = app.add_subcommand("expand", "Exponential jet expansion into 2^L paths");
  add_common(c_expand, expand.common);
  c_expand->add_option("--model", expand.model, "Model archive")->required();
  c_expand->add_option("--k", expand.k, "Jet order")->capture_default_str();
  c_expand->add_option("--text", expand.text, "Input words");
  c_expand->add_option("--ids", expand.ids, "Input token ids");
  c_expand->add_option("--max-blocks", expand.max_blocks, "Refuse models with more blocks")->capture_default_str();
  c_expand->add_flag("--list-paths", expand.list_paths, "Print subset labels only");

  NgramArgs ngram;
  auto* c_ngram = app.add_subcommand("ngram", "Jet bi-gram or skip-tri-gram tables");
  add_common(c_ngram, ngram.common);
  c_ngram->add_option("--model", ngram.model, "Model archive")->required();
  c_ngram->add_flag("--bigram", ngram.bigram, "Bi-gram table");
  c_ngram->add_flag("--trigram", ngram.trigram, "Skip-tri-gram table");
  c_ngram->add_option("--path", ngram.path, "encode-decode | mlp:L | attn:L:H")->capture_default_str();
  c_ngram->add_option("--k", ngram.k, "Jet order")->capture_default_str();
  c_ngram->add_option("--topk", ngram.topk, "Entries kept")->capture_default_str();
  c_ngram->add_flag("--prob", ngram.prob, "Store conditional probabilities instead of logits");
  c_ngram->add_option("--subset", ngram.subset, "File of first tokens (keys for tri-grams)");
  c_ngram->add_option("--first", ngram.first, "Restrict bi-gram rows to the N most frequent tokens");
  c_ngram->add_option("--unigrams", ngram.unigrams, "Unigram JSON for frequency ranking");
  c_ngram->add_option("--keys", ngram.keys, "Key tokens for tri-grams")->capture_default_str();
  c_ngram->add_option("--queries", ngram.queries, "Query tokens for tri-grams")->capture_default_str();
  c_ngram->add_option("--per-pair", ngram.per_pair, "Tri-grams kept per (key, query)")->capture_default_str();
  c_ngram->add_flag("--alpha-one", ngram.alpha_one, "Fix the attention weight to 1");
  c_ngram->add_option("--scale", ngram.scale, "Single-path weight applied to logits")->capture_default_str();

  DiffArgs diff_args;
  auto* c_diff = app.add_subcommand("diff", "Symmetric top-K bi-gram difference of two models");
  add_common(c_diff, diff_args.common);
  c_diff->add_option("--a", diff_args.a, "First model")->required();
  c_diff->add_option("--b", diff_args.b, "Second model")->required();
  c_diff->add_option("--path", diff_args.path, "encode-decode | mlp:L")->capture_default_str();
  c_diff->add_option("--k", diff_args.k, "Jet order")->capture_default_str();
  c_diff->add_option("--topk", diff_args.topk, "K")->capture_default_str();

  MassArgs mass;
  auto* c_mass = app.add_subcommand("mass", "Keyword or pseudo-joint bi-gram mass");
  add_common(c_mass, mass.common);
  c_mass->add_option("--model", mass.model, "Model archive")->required();
  c_mass->add_option("--keywords", mass.keywords, "Keyword pattern file");
  c_mass->add_option("--unigrams", mass.unigrams, "Unigram JSON (pseudo-joint mass)");
  c_mass->add_option("--topk", mass.topk, "K for pseudo-joint mass")->capture_default_str();
  c_mass->add_option("--path", mass.path, "encode-decode | mlp:L")->capture_default_str();
  c_mass->add_flag("--sum", mass.sum_only, "Do not divide by the number of keyword tokens");

  TraceArgs trace;
  auto* c_trace = app.add_subcommand("trace", "Hit ratios and score traces across checkpoints");
  add_common(c_trace, trace.common);
  c_trace->add_option("--models", trace.models, "Checkpoint archives");
  c_trace->add_option("--ckpt-dir", trace.ckpt_dir, "Directory of checkpoint archives");
  c_trace->add_option("--bigrams", trace.bigrams, "Bi-grams to trace, e.g. \"foo bar\"");
  c_trace->add_option("--unigrams", trace.unigrams, "Unigram JSON for pseudo-joint mass");
  c_trace->add_option("--topk", trace.topk, "K")->capture_default_str();
  c_trace->add_option("--path", trace.path, "encode-decode | mlp:L")->capture_default_str();
  c_trace->add_flag("--prob", trace.prob, "Trace probabilities instead of logits");

  AblateArgs ablate;
  auto* c_ablate = app.add_subcommand("ablate", "Delta logits after zeroing an MLP or head");
  add_common(c_ablate, ablate.common);
  c_ablate->add_option("--model", ablate.model, "Model archive")->required();
  c_ablate->add_option("--mlp", ablate.mlp, "MLP block to zero");
  c_ablate->add_option("--head", ablate.head, "Head to zero, as BLOCK:HEAD");
  c_ablate->add_option("--path", ablate.path, "Path whose top entries are checked (default: the component)");
  c_ablate->add_option("--topk", ablate.topk, "Entries checked")->capture_default_str();

  SelftestArgs selftest;
  auto* c_selftest = app.add_subcommand("selftest", "Fast consistency checks on shipped fixtures");
  c_selftest->add_option("--fixtures", selftest.fixtures, "Fixture directory")->capture_default_str();
  c_selftest->add_option("--model", selftest.model, "Check a single archive instead");
  c_selftest->add_flag("--json", selftest.as_json, "Machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*c_lens) return cmd_lens(lens);
    if (*c_expand) return cmd_expand(expand);
    if (*c_ngram) return cmd_ngram(ngram);
    if (*c_diff) return cmd_diff(diff_args);
    if (*c_mass) return cmd_mass(mass);
    if (*c_trace) return cmd_trace(trace);
    if (*c_ablate) return cmd_ablate(ablate);
    if (*c_selftest) return cmd_selftest(selftest);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitUsage;
}
