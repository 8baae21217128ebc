#include "jetx/expander.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "jetx/errors.hpp"

namespace jetx {

SimplexWeights SimplexWeights::uniform(std::size_t n) {
  if (n == 0) throw ConfigError("simplex needs at least one weight");
  return {std::vector<double>(n, 1.0 / static_cast<double>(n))};
}

void SimplexWeights::validate() const {
  if (w.empty()) throw ConfigError("empty weight vector");
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!(w[i] >= 0.0)) throw ConfigError("weight " + std::to_string(i) + " is negative");
    total += w[i];
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("weights sum to " + std::to_string(total) + ", not 1");
}

nlohmann::json Expansion::to_json() const {
  nlohmann::json terms_json = nlohmann::json::array();
  for (const auto& t : terms) {
    nlohmann::json j{{"label", t.label}, {"path", jetx::to_json(t.expr)}};
    j["slot"] = t.slot ? nlohmann::json(*t.slot) : nlohmann::json(nullptr);
    terms_json.push_back(std::move(j));
  }
  return {{"level", level},     {"decoder", decoder}, {"order", order},
          {"num_slots", num_slots}, {"weights", weights.w}, {"target", jetx::to_json(target)},
          {"terms", terms_json}};
}

Expansion jet_expand(const ModelSpec& model, std::size_t level, const std::vector<Center>& centers, std::size_t k) {
  const std::size_t L = model.num_blocks();
  if (centers.empty()) throw ConfigError("jet_expand needs at least one center");
  if (level > L) throw ConfigError("expansion level " + std::to_string(level) + " beyond L=" + std::to_string(L));
  for (const auto& c : centers) check_path(model, c.expr);

  Expansion exp;
  exp.level = level;
  exp.decoder = level == L;
  exp.order = k;
  exp.num_slots = centers.size();
  exp.weights = SimplexWeights::uniform(centers.size());
  const PathPtr variate = path_stream(level);
  const std::size_t nonlin = level + 1;

  if (!exp.decoder) {
    // Identity paths. J^k id at a center is the center itself once k >= 1;
    // at k = 0 the weights carry over to these terms as well.
    for (std::size_t i = 0; i < centers.size(); ++i) {
      if (k == 0) {
        exp.terms.push_back({path_jet(0, centers[i].expr, variate, 0, i), i, centers[i].label});
      } else {
        exp.terms.push_back({centers[i].expr, std::nullopt, centers[i].label});
      }
    }
  }
  const std::string tag = "J" + std::to_string(k) + "[g" + std::to_string(nonlin) + "]";
  for (std::size_t i = 0; i < centers.size(); ++i) {
    exp.terms.push_back({path_jet(nonlin, centers[i].expr, variate, k, i), i, tag + "(" + centers[i].label + ")"});
  }
  exp.target = exp.decoder ? path_nonlin(L + 1, path_stream(L)) : path_stream(level + 1);
  return exp;
}

std::vector<std::vector<std::size_t>> subset_members(std::size_t num_blocks) {
  std::vector<std::vector<std::size_t>> out(std::size_t{1} << num_blocks);
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t j = 0; j < num_blocks; ++j)
      if (i >> j & 1U) out[i].push_back(j + 1);
  return out;
}

std::vector<std::string> subset_labels(std::size_t num_blocks) {
  std::vector<std::string> out;
  for (const auto& s : subset_members(num_blocks)) {
    std::string label = "{";
    for (std::size_t i = 0; i < s.size(); ++i) label += (i ? "," : "") + std::to_string(s[i]);
    out.push_back(label + "}");
  }
  return out;
}

Expansion exp_jet_expansion(const ModelSpec& model, std::size_t k, std::size_t max_blocks) {
  const std::size_t L = model.num_blocks();
  if (L > max_blocks) {
    throw ConfigError("exponential expansion of " + std::to_string(L) + " blocks exceeds the budget of " +
                      std::to_string(max_blocks) + " blocks (2^" + std::to_string(L) + " paths)");
  }
  const auto labels = subset_labels(L);
  std::vector<Center> centers{{path_embed(), labels[0]}};
  if (L == 0) return jet_expand(model, 0, centers, k);
  centers.push_back({path_nonlin(1, path_embed()), labels[1]});
  for (std::size_t l = 1;; ++l) {
    Expansion exp = jet_expand(model, l, centers, k);
    for (std::size_t i = 0; i < exp.terms.size(); ++i) exp.terms[i].label = labels[i];
    if (l == L) return exp;
    // Nested applications keep their weights fixed at uniform.
    const double w = 1.0 / static_cast<double>(exp.num_slots);
    centers.clear();
    for (const auto& t : exp.terms) {
      centers.push_back({t.slot ? path_scale(w, without_slot(t.expr)) : t.expr, t.label});
    }
  }
}

std::vector<Tensor> evaluate_terms(PathEvaluator& ev, const Expansion& exp, std::span<const double> w) {
  if (w.size() != exp.num_slots) {
    throw ConfigError("expansion has " + std::to_string(exp.num_slots) + " weight slots, got " +
                      std::to_string(w.size()) + " weights");
  }
  std::vector<Tensor> out;
  out.reserve(exp.terms.size());
  for (const auto& t : exp.terms) out.push_back(ev.eval(t.expr, w));
  return out;
}

namespace {

Tensor sum_terms(const std::vector<Tensor>& values, const Tensor& like) {
  Tensor total(like.shape());
  for (const auto& v : values) total += v;
  return total;
}

}  // namespace

ExpansionEval evaluate_expansion(PathEvaluator& ev, const Expansion& exp, std::span<const double> w) {
  if (!exp.decoder) throw ConfigError("evaluate_expansion needs a decoder-level expansion");
  const ModelSpec& model = ev.model();
  ExpansionEval out;
  const Tensor target = ev.eval(exp.target, w);
  out.expansion_state = sum_terms(evaluate_terms(ev, exp, w), target);
  out.remainder = target - out.expansion_state;
  out.expansion_logits = unembed(model, out.expansion_state);
  out.model_logits = unembed(model, target);

  const std::size_t last = target.rows() - 1;
  const Tensor delta = take_row(out.remainder, last);
  out.report.remainder_norm = norm2(delta.values());
  out.report.logit_remainder_norm = norm2(unembed(model, delta).values());
  out.report.cosine = cosine_similarity(out.model_logits.row(last), out.expansion_logits.row(last));
  return out;
}

ExpansionEval evaluate_expansion(const ModelSpec& model, const Expansion& exp, const TokenSequence& z,
                                 std::span<const double> w, const EvalOptions& opts) {
  PathEvaluator ev(model, z, opts);
  return evaluate_expansion(ev, exp, w);
}

StreamEval evaluate_stream_expansion(PathEvaluator& ev, const Expansion& exp, std::span<const double> w) {
  StreamEval out;
  out.target = ev.eval(exp.target, w);
  out.expansion = sum_terms(evaluate_terms(ev, exp, w), out.target);
  out.remainder = out.target - out.expansion;
  return out;
}

std::vector<double> project_to_simplex(std::span<const double> v) {
  if (v.empty()) throw ConfigError("cannot project an empty vector");
  std::vector<double> u(v.begin(), v.end());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumulative = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumulative += u[j];
    const double t = (cumulative - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::max(v[i] - theta, 0.0);
  return out;
}

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Quadratic {
  MatrixXd q;  // G^T G
  VectorXd b;  // G^T t
  double c = 0.0;

  double value(const VectorXd& w) const { return std::max(w.dot(q * w) - 2.0 * b.dot(w) + c, 0.0); }
  VectorXd grad(const VectorXd& w) const { return 2.0 * (q * w - b); }
};

VectorXd project(const VectorXd& v) {
  const auto p = project_to_simplex(std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
  return Eigen::Map<const VectorXd>(p.data(), static_cast<Eigen::Index>(p.size()));
}

double kkt_residual(const Quadratic& f, const VectorXd& w, double scale) {
  return (w - project(w - f.grad(w) / scale)).norm();
}

// Minimizer of f on the affine hull of the face given by `support`.
VectorXd face_minimizer(const Quadratic& f, const std::vector<Eigen::Index>& support, Eigen::Index n) {
  const auto m = static_cast<Eigen::Index>(support.size());
  MatrixXd kkt = MatrixXd::Zero(m + 1, m + 1);
  VectorXd rhs(m + 1);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) kkt(i, j) = 2.0 * f.q(support[i], support[j]);
    kkt(i, m) = 1.0;
    kkt(m, i) = 1.0;
    rhs(i) = 2.0 * f.b(support[i]);
  }
  rhs(m) = 1.0;
  const VectorXd sol = kkt.completeOrthogonalDecomposition().solve(rhs);
  VectorXd w = VectorXd::Zero(n);
  for (Eigen::Index i = 0; i < m; ++i) w(support[i]) = sol(i);
  return w;
}

// Active-set polish: moves toward the face minimizer, dropping coordinates that hit zero.
VectorXd polish(const Quadratic& f, VectorXd w) {
  const Eigen::Index n = w.size();
  for (Eigen::Index round = 0; round < n; ++round) {
    std::vector<Eigen::Index> support;
    for (Eigen::Index i = 0; i < n; ++i)
      if (w(i) > 0.0) support.push_back(i);
    const VectorXd target = face_minimizer(f, support, n);
    double t = 1.0;
    Eigen::Index blocking = -1;
    for (Eigen::Index i : support) {
      if (target(i) < 0.0) {
        const double ti = w(i) / (w(i) - target(i));
        if (ti < t) {
          t = ti;
          blocking = i;
        }
      }
    }
    VectorXd next = w + t * (target - w);
    if (blocking >= 0) next(blocking) = 0.0;
    next = next.cwiseMax(0.0);
    next /= next.sum();
    if (f.value(next) > f.value(w)) break;
    w = next;
    if (blocking < 0) break;
  }
  return w;
}

}  // namespace

double simplex_objective(const Tensor& g, std::span<const double> t, std::span<const double> w) {
  const std::size_t m = g.rows(), n = g.cols();
  if (t.size() != m || w.size() != n) throw ShapeError("simplex_objective: size mismatch");
  double total = 0.0;
  for (std::size_t r = 0; r < m; ++r) {
    double v = -t[r];
    for (std::size_t i = 0; i < n; ++i) v += g.at(r, i) * w[i];
    total += v * v;
  }
  return total;
}

OptimizeResult minimize_on_simplex(const Tensor& g, std::span<const double> t, const OptimizeConfig& cfg) {
  const auto m = static_cast<Eigen::Index>(g.rows()), n = static_cast<Eigen::Index>(g.cols());
  if (g.rank() != 2 || static_cast<Eigen::Index>(t.size()) != m) throw ShapeError("minimize_on_simplex: size mismatch");
  if (n == 0) throw ConfigError("minimize_on_simplex: no terms");
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gm(g.data(), m, n);
  const Eigen::Map<const VectorXd> tv(t.data(), m);
  Quadratic f{gm.transpose() * gm, gm.transpose() * tv, tv.squaredNorm()};
  const double scale = f.c > 0.0 ? f.c : 1.0;

  OptimizeResult res;
  VectorXd w = VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  res.uniform_objective = f.value(w);
  res.history.push_back(res.uniform_objective);

  const double lambda_max = n == 1 ? f.q(0, 0) : Eigen::SelfAdjointEigenSolver<MatrixXd>(f.q).eigenvalues().maxCoeff();
  if (n > 1 && lambda_max > 0.0) {
    const double step = cfg.step > 0.0 ? cfg.step : 1.0 / (2.0 * lambda_max);
    double current = res.uniform_objective;
    std::size_t it = 0;
    while (it < cfg.max_iters && kkt_residual(f, w, scale) > cfg.tol) {
      ++it;
      const VectorXd next = project(w - step * f.grad(w));
      const double value = f.value(next);
      if (value > current) break;
      w = next;
      current = value;
      res.history.push_back(value);
      // Periodically jump to the face minimizer once the support has settled.
      if (it % 25 == 0 || it == cfg.max_iters) {
        const VectorXd p = polish(f, w);
        const double pv = f.value(p);
        if (pv <= current) {
          w = p;
          current = pv;
          res.history.push_back(pv);
        }
      }
    }
    const VectorXd p = polish(f, w);
    if (f.value(p) <= current) {
      w = p;
      res.history.push_back(f.value(p));
    }
    res.iterations = it;
  }
  res.weights.w.assign(w.data(), w.data() + n);
  res.objective = f.value(w);
  res.kkt_residual = kkt_residual(f, w, scale);
  return res;
}

OptimizeResult optimize_weights(PathEvaluator& ev, const Expansion& exp, const OptimizeConfig& cfg) {
  if (!exp.decoder) {
    throw ConfigError("weight optimization is only supported for decoder-level expansions, where the objective "
                      "is a convex quadratic");
  }
  const ModelSpec& model = ev.model();
  const std::size_t n = exp.num_slots;
  const Tensor target = ev.eval(exp.target, std::vector<double>(n, 1.0));
  const std::size_t last = target.rows() - 1;
  // Every term is linear in its own slot, so unit weights give the columns of G.
  const std::vector<double> ones(n, 1.0);
  Tensor fixed = unembed(model, take_row(target, last));
  Tensor g({model.vocab_size, n});
  for (const auto& term : exp.terms) {
    const Tensor logits = unembed(model, take_row(ev.eval(term.expr, ones), last));
    if (term.slot) {
      for (std::size_t r = 0; r < model.vocab_size; ++r) g.at(r, *term.slot) += logits[r];
    } else {
      fixed -= logits;
    }
  }
  return minimize_on_simplex(g, fixed.values(), cfg);
}

OptimizeResult optimize_weights(const ModelSpec& model, const Expansion& exp, const TokenSequence& z,
                                const OptimizeConfig& cfg, const EvalOptions& opts) {
  PathEvaluator ev(model, z, opts);
  return optimize_weights(ev, exp, cfg);
}

ProbeResult remainder_order_probe(const SeriesMap& f, const std::vector<Tensor>& centers, std::size_t k,
                                  std::span<const double> weights, std::vector<double> scales) {
  if (centers.empty()) throw ConfigError("remainder_order_probe needs centers");
  if (scales.size() < 2) throw ConfigError("remainder_order_probe needs at least two scales");
  std::vector<double> w(weights.begin(), weights.end());
  if (w.empty()) w = SimplexWeights::uniform(centers.size()).w;
  if (w.size() != centers.size()) throw ConfigError("one weight per center required");

  Tensor y(centers[0].shape());
  for (const auto& c : centers) y += c;
  const Tensor fy = jet_eval(f, {y, y, 0});

  ProbeResult out;
  out.scales = scales;
  for (double s : scales) {
    Tensor approx(fy.shape());
    for (std::size_t i = 0; i < centers.size(); ++i) {
      const Tensor xi = y + s * (centers[i] - y);
      approx += w[i] * jet_eval(f, {xi, y, k});
    }
    out.remainders.push_back(norm2((fy - approx).values()));
  }
  const double floor = 1e-12 * (1.0 + norm2(fy.values()));
  out.exact = std::all_of(out.remainders.begin(), out.remainders.end(), [&](double r) { return r <= floor; });
  if (out.exact) return out;

  // Least-squares slope of log remainder against log scale.
  const std::size_t n = scales.size();
  double mx = 0.0, my = 0.0;
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    lx[i] = std::log(scales[i]);
    ly[i] = std::log(std::max(out.remainders[i], 1e-300));
    mx += lx[i];
    my += ly[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  out.slope = sxy / sxx;
  return out;
}

}  // namespace jetx
