#include "selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>

#include <nlohmann/json.hpp>

#include "jetx/errors.hpp"
#include "jetx/lenses.hpp"

namespace jetx {

namespace {

namespace fs = std::filesystem;

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

void run(std::vector<CheckResult>& out, const std::string& name, const std::function<std::string()>& body) {
  CheckResult r;
  r.name = name;
  try {
    r.detail = body();
    r.passed = true;
  } catch (const Error& e) {
    r.detail = e.what();
  } catch (const std::exception& e) {
    r.detail = e.what();
  }
  out.push_back(std::move(r));
}

void require(bool ok, const std::string& what) {
  if (!ok) throw DomainError(what);
}

TokenSequence sample_tokens(const ModelSpec& model, std::size_t n) {
  TokenSequence z;
  for (std::size_t i = 0; i < n; ++i) z.push_back(static_cast<int>((7 * i + 3) % model.vocab_size));
  return z;
}

std::string check_series_agreement(const ModelSpec& model, const TokenSequence& z) {
  const auto h = residual_streams(model, z);
  double worst = 0.0;
  for (std::size_t l = 1; l <= model.num_blocks() + 1; ++l) {
    const Tensor plain = apply_nonlin(model, l, h[l - 1]);
    const Series s = apply_nonlin_series(model, l, lift_constant(h[l - 1], 1));
    worst = std::max(worst, max_abs_diff(s.coeff(0), plain));
    require(max_abs_diff(s.coeff(1), Tensor(plain.shape())) == 0.0, "constant lift produced a nonzero derivative");
  }
  require(worst <= 1e-10, "series and plain block outputs differ by " + sci(worst));
  return "max diff " + sci(worst);
}

std::string check_lens_equivalence(const ModelSpec& model, const TokenSequence& z) {
  double worst = 0.0;
  for (std::size_t l = 0; l <= model.num_blocks(); ++l) {
    const auto a = logit_lens(model, z, l, 1).logits;
    const auto b = iterative_jet_lens(model, z, l, 0, 1).logits;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  }
  require(worst <= 1e-10, "order-0 iterative lens differs from logit lens by " + sci(worst));
  return "max diff " + sci(worst);
}

std::string check_expansion_identity(const ModelSpec& model, const TokenSequence& z) {
  if (model.num_blocks() > 12) return "skipped (too many blocks)";
  const Expansion exp = exp_jet_expansion(model, 1);
  PathEvaluator ev(model, z);
  const ExpansionEval r = evaluate_expansion(ev, exp, exp.weights.w);
  const Tensor rebuilt = r.expansion_state + r.remainder;
  const Tensor target = ev.eval(exp.target, exp.weights.w);
  const double err = max_abs_diff(rebuilt, target);
  require(err <= 1e-9 * (1.0 + norm2(target.values())), "terms plus remainder miss the target by " + sci(err));
  return "paths " + std::to_string(exp.terms.size()) + ", identity error " + sci(err);
}

std::string check_optimizer(const ModelSpec& model, const TokenSequence& z) {
  const Expansion exp = jet_expand(model, model.num_blocks(), joint_lens_centers(model), 1);
  const OptimizeResult r = optimize_weights(model, exp, z);
  require(r.objective <= r.uniform_objective * (1.0 + 1e-12), "optimized objective exceeds the uniform one");
  for (std::size_t i = 1; i < r.history.size(); ++i)
    require(r.history[i] <= r.history[i - 1] * (1.0 + 1e-12), "objective history increased");
  return "objective " + sci(r.objective) + " vs uniform " + sci(r.uniform_objective);
}

std::string check_probe_parity(const ModelSpec& model, const fs::path& probe_file) {
  std::ifstream in(probe_file);
  const auto j = nlohmann::json::parse(in);
  double worst = 0.0;
  for (const auto& p : j.at("probes")) {
    const TokenSequence z = p.at("ids").get<TokenSequence>();
    const Tensor logits = forward(model, z);
    const auto ref = p.at("logits").get<std::vector<std::vector<double>>>();
    require(ref.size() == logits.rows(), "probe logits have the wrong number of rows");
    for (std::size_t t = 0; t < ref.size(); ++t)
      for (std::size_t v = 0; v < ref[t].size(); ++v) worst = std::max(worst, std::abs(ref[t][v] - logits.at(t, v)));
  }
  require(worst <= 1e-4, "probe logits differ by " + sci(worst));
  return "max diff " + sci(worst);
}

std::string check_linear_exactness(const ModelSpec& model, const TokenSequence& z) {
  const Expansion exp = exp_jet_expansion(model, 1);
  const ExpansionEval r = evaluate_expansion(model, exp, z, exp.weights.w);
  const double scale = norm2(r.model_logits.row(r.model_logits.rows() - 1));
  const double rel = r.report.logit_remainder_norm / std::max(scale, 1e-300);
  require(rel <= 1e-8, "order-1 remainder on a linear network is " + sci(rel));
  return "relative remainder " + sci(rel);
}

void model_checks(std::vector<CheckResult>& out, const std::string& tag, const ModelSpec& model) {
  const TokenSequence z = sample_tokens(model, std::min<std::size_t>(6, model.positions ? model.positions->rows() : 6));
  run(out, tag + ":finite_forward", [&] {
    const Tensor logits = forward(model, z);
    for (double v : logits.values()) require(std::isfinite(v), "non-finite logit");
    return std::string{};
  });
  run(out, tag + ":series_agreement", [&] { return check_series_agreement(model, z); });
  run(out, tag + ":lens_equivalence", [&] { return check_lens_equivalence(model, z); });
  run(out, tag + ":expansion_identity", [&] { return check_expansion_identity(model, z); });
  run(out, tag + ":optimizer", [&] { return check_optimizer(model, z); });
}

bool load(std::vector<CheckResult>& out, const fs::path& p, ModelSpec& model) {
  CheckResult r;
  r.name = "load:" + p.filename().string();
  try {
    model = load_model(p);
    r.passed = true;
    r.detail = model.model_id;
  } catch (const std::exception& e) {
    r.input_error = true;
    r.detail = e.what();
  }
  out.push_back(r);
  return r.passed;
}

}  // namespace

std::vector<CheckResult> run_selftest(const std::string& fixture_dir, const std::string& model_path) {
  std::vector<CheckResult> out;
  ModelSpec model;
  if (!model_path.empty()) {
    if (load(out, model_path, model)) model_checks(out, "model", model);
    return out;
  }

  const fs::path dir(fixture_dir);
  const fs::path toy = dir / "toy-markov-L4.jetm", lin = dir / "lin.jetm";
  if (!fs::is_directory(dir)) {
    out.push_back({"fixtures", false, true, "fixture directory not found: " + fixture_dir});
    return out;
  }
  if (!load(out, toy, model)) return out;
  model_checks(out, "toy", model);
  if (fs::exists(dir / "probe_logits.json"))
    run(out, "toy:probe_parity", [&] { return check_probe_parity(model, dir / "probe_logits.json"); });

  ModelSpec linear;
  if (!load(out, lin, linear)) return out;
  run(out, "linear:exactness", [&] { return check_linear_exactness(linear, sample_tokens(linear, 5)); });
  return out;
}

}  // namespace jetx
