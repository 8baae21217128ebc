#include "jetx/path.hpp"

#include <sstream>

#include "jetx/errors.hpp"

namespace jetx {

namespace {

PathPtr make(PathNode node) { return std::make_shared<const PathNode>(std::move(node)); }

const char* kind_name(PathKind k) {
  switch (k) {
    case PathKind::embed: return "embed";
    case PathKind::stream: return "stream";
    case PathKind::nonlin: return "nonlin";
    case PathKind::jet_term: return "jet";
    case PathKind::scale: return "scale";
    case PathKind::sum: return "sum";
    case PathKind::decode: return "decode";
  }
  return "?";
}

PathKind parse_kind(const std::string& s) {
  for (PathKind k : {PathKind::embed, PathKind::stream, PathKind::nonlin, PathKind::jet_term, PathKind::scale,
                     PathKind::sum, PathKind::decode}) {
    if (s == kind_name(k)) return k;
  }
  throw FormatError("unknown path node '" + s + "'");
}

bool has_slot(const PathNode& n) {
  if (n.slot) return true;
  for (const auto& c : n.children)
    if (has_slot(*c)) return true;
  return false;
}

void check_node(const ModelSpec& model, const PathNode& n, bool root) {
  const std::size_t L = model.num_blocks();
  switch (n.kind) {
    case PathKind::stream:
      if (n.index > L) throw ConfigError("Stream(" + std::to_string(n.index) + ") beyond L=" + std::to_string(L));
      break;
    case PathKind::nonlin:
    case PathKind::jet_term:
      if (n.index > L + 1) throw ConfigError("nonlinearity index " + std::to_string(n.index) + " beyond L+1");
      break;
    case PathKind::decode:
      if (!root) throw ConfigError("Decode may only appear at the root of a path");
      break;
    default: break;
  }
  for (const auto& c : n.children) check_node(model, *c, false);
}

}  // namespace

PathPtr path_embed() { return make(PathNode{}); }

PathPtr path_stream(std::size_t l) {
  if (l == 0) return path_embed();
  PathNode n;
  n.kind = PathKind::stream;
  n.index = l;
  return make(std::move(n));
}

PathPtr path_nonlin(std::size_t l, PathPtr child) {
  PathNode n;
  n.kind = PathKind::nonlin;
  n.index = l;
  n.children = {std::move(child)};
  return make(std::move(n));
}

PathPtr path_jet(std::size_t l, PathPtr center, PathPtr variate, std::size_t order, std::optional<std::size_t> slot) {
  PathNode n;
  n.kind = PathKind::jet_term;
  n.index = l;
  n.order = order;
  n.slot = slot;
  n.children = {std::move(center), std::move(variate)};
  return make(std::move(n));
}

PathPtr path_scale(double c, PathPtr child) {
  PathNode n;
  n.kind = PathKind::scale;
  n.constant = c;
  n.children = {std::move(child)};
  return make(std::move(n));
}

PathPtr path_sum(std::vector<PathPtr> children) {
  if (children.empty()) throw ConfigError("Sum needs at least one child");
  PathNode n;
  n.kind = PathKind::sum;
  n.children = std::move(children);
  return make(std::move(n));
}

PathPtr path_decode(PathPtr child) {
  PathNode n;
  n.kind = PathKind::decode;
  n.children = {std::move(child)};
  return make(std::move(n));
}

PathPtr without_slot(const PathPtr& expr) {
  if (!expr->slot) return expr;
  PathNode n = *expr;
  n.slot.reset();
  return make(std::move(n));
}

void check_path(const ModelSpec& model, const PathPtr& expr) { check_node(model, *expr, true); }

std::string describe(const PathPtr& expr) {
  const PathNode& n = *expr;
  std::ostringstream os;
  switch (n.kind) {
    case PathKind::embed: os << "embed"; break;
    case PathKind::stream: os << "h" << n.index; break;
    case PathKind::nonlin: os << "g" << n.index << "(" << describe(n.children[0]) << ")"; break;
    case PathKind::jet_term:
      if (n.slot) os << "w" << *n.slot << "*";
      os << "J" << n.order << "[g" << n.index << "](" << describe(n.children[0]) << "; " << describe(n.children[1])
         << ")";
      break;
    case PathKind::scale: os << n.constant << "*" << describe(n.children[0]); break;
    case PathKind::sum:
      os << "(";
      for (std::size_t i = 0; i < n.children.size(); ++i) os << (i ? " + " : "") << describe(n.children[i]);
      os << ")";
      break;
    case PathKind::decode: os << "U(" << describe(n.children[0]) << ")"; break;
  }
  return os.str();
}

nlohmann::json to_json(const PathPtr& expr) {
  const PathNode& n = *expr;
  nlohmann::json j{{"node", kind_name(n.kind)}};
  switch (n.kind) {
    case PathKind::stream: j["level"] = n.index; break;
    case PathKind::nonlin: j["nonlin"] = n.index; break;
    case PathKind::jet_term:
      j["nonlin"] = n.index;
      j["order"] = n.order;
      if (n.slot) j["slot"] = *n.slot;
      j["center"] = to_json(n.children[0]);
      j["variate"] = to_json(n.children[1]);
      return j;
    case PathKind::scale: j["constant"] = n.constant; break;
    default: break;
  }
  if (!n.children.empty()) {
    j["children"] = nlohmann::json::array();
    for (const auto& c : n.children) j["children"].push_back(to_json(c));
  }
  return j;
}

PathPtr path_from_json(const nlohmann::json& j) {
  try {
    const PathKind kind = parse_kind(j.at("node").get<std::string>());
    auto child = [&](std::size_t i) { return path_from_json(j.at("children").at(i)); };
    switch (kind) {
      case PathKind::embed: return path_embed();
      case PathKind::stream: return path_stream(j.at("level").get<std::size_t>());
      case PathKind::nonlin: return path_nonlin(j.at("nonlin").get<std::size_t>(), child(0));
      case PathKind::jet_term: {
        std::optional<std::size_t> slot;
        if (j.contains("slot")) slot = j.at("slot").get<std::size_t>();
        return path_jet(j.at("nonlin").get<std::size_t>(), path_from_json(j.at("center")),
                        path_from_json(j.at("variate")), j.at("order").get<std::size_t>(), slot);
      }
      case PathKind::scale: return path_scale(j.at("constant").get<double>(), child(0));
      case PathKind::sum: {
        std::vector<PathPtr> cs;
        for (const auto& c : j.at("children")) cs.push_back(path_from_json(c));
        return path_sum(std::move(cs));
      }
      case PathKind::decode: return path_decode(child(0));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed path JSON: ") + e.what());
  }
  throw FormatError("malformed path JSON");
}

PathEvaluator::PathEvaluator(const ModelSpec& model, TokenSequence z, EvalOptions opts)
    : model_(model), z_(std::move(z)), opts_(opts) {
  ForwardOptions fo;
  fo.use_positions = opts_.use_positions;
  streams_ = residual_streams(model_, z_, fo);
}

Tensor PathEvaluator::eval(const PathPtr& expr, std::span<const double> weights) {
  check_path(model_, expr);
  weights_ = weights;
  // Weighted subtrees depend on the weights, so drop them between calls.
  std::erase_if(cache_, [](const auto& kv) { return has_slot(*kv.first); });
  return eval_node(expr);
}

Tensor PathEvaluator::eval_node(const PathPtr& expr) {
  const PathNode& n = *expr;
  if (auto it = cache_.find(&n); it != cache_.end()) return it->second.second;
  Tensor out;
  switch (n.kind) {
    case PathKind::embed: out = streams_[0]; break;
    case PathKind::stream: out = streams_.at(n.index); break;
    case PathKind::nonlin: out = apply_nonlin(model_, n.index, eval_node(n.children[0])); break;
    case PathKind::jet_term: {
      JetRequest req{eval_node(n.children[0]), eval_node(n.children[1]), n.order};
      if (!req.center.same_shape(req.variate)) {
        throw ShapeError("jet center " + shape_string(req.center.shape()) + " and variate " +
                         shape_string(req.variate.shape()) + " disagree");
      }
      try {
        if (opts_.skeleton) {
          out = apply_nonlin(model_, n.index, req.center);
        } else {
          out = jet_eval(nonlin_map(model_, n.index), req);
        }
      } catch (const DomainError& e) {
        throw DomainError(std::string(e.what()) + " in jet term g" + std::to_string(n.index) + " of order " +
                          std::to_string(n.order));
      }
      if (n.slot) {
        if (*n.slot >= weights_.size()) {
          throw ConfigError("weight slot " + std::to_string(*n.slot) + " not covered by " +
                            std::to_string(weights_.size()) + " weights");
        }
        out *= weights_[*n.slot];
      }
      break;
    }
    case PathKind::scale:
      out = eval_node(n.children[0]);
      out *= n.constant;
      break;
    case PathKind::sum:
      out = eval_node(n.children[0]);
      for (std::size_t i = 1; i < n.children.size(); ++i) out += eval_node(n.children[i]);
      break;
    case PathKind::decode: out = unembed(model_, eval_node(n.children[0])); break;
  }
  cache_.emplace(&n, std::make_pair(expr, out));
  return out;
}

Tensor eval_path(const ModelSpec& model, const PathPtr& expr, const TokenSequence& z, std::span<const double> weights,
                 const EvalOptions& opts) {
  PathEvaluator ev(model, z, opts);
  return ev.eval(expr, weights);
}

}  // namespace jetx
