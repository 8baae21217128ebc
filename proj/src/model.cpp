#include "jetx/model.hpp"

#include <cmath>
#include <sstream>

#include "jetx/errors.hpp"

namespace jetx {

std::string to_string(NormKind k) {
  switch (k) {
    case NormKind::none: return "none";
    case NormKind::layernorm: return "layernorm";
    case NormKind::rmsnorm: return "rmsnorm";
  }
  return "?";
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::gelu_tanh: return "gelu_tanh";
    case Activation::silu: return "silu";
    case Activation::identity: return "identity";
  }
  return "?";
}

std::string to_string(BlockKind k) { return k == BlockKind::attention ? "attention" : "mlp"; }

NormKind parse_norm_kind(const std::string& s) {
  if (s == "none") return NormKind::none;
  if (s == "layernorm") return NormKind::layernorm;
  if (s == "rmsnorm") return NormKind::rmsnorm;
  throw FormatError("unknown norm kind '" + s + "'");
}

Activation parse_activation(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "gelu_tanh") return Activation::gelu_tanh;
  if (s == "silu") return Activation::silu;
  if (s == "identity") return Activation::identity;
  throw FormatError("unknown activation '" + s + "'");
}

const Block& ModelSpec::block(std::size_t l) const {
  if (l < 1 || l > blocks.size()) {
    throw ConfigError("block index " + std::to_string(l) + " out of range 1.." + std::to_string(blocks.size()));
  }
  return blocks[l - 1];
}

namespace {

void expect(bool ok, const std::string& what) {
  if (!ok) throw ShapeError("model: " + what);
}

void check_matrix(const Tensor& t, std::size_t r, std::size_t c, const std::string& name) {
  expect(t.rank() == 2 && t.shape()[0] == r && t.shape()[1] == c,
         name + " has shape " + shape_string(t.shape()) + ", expected " + shape_string({r, c}));
}

void check_vector(const std::vector<double>& v, std::size_t n, const std::string& name) {
  expect(v.empty() || v.size() == n, name + " has length " + std::to_string(v.size()) + ", expected " +
                                         std::to_string(n));
}

void check_norm(const NormParams& n, std::size_t d, const std::string& name) {
  if (n.kind != NormKind::none && !(n.eps > 0.0)) throw ConfigError("model: " + name + " eps must be positive");
  check_vector(n.scale, d, name + ".scale");
  check_vector(n.bias, d, name + ".bias");
  if (n.kind == NormKind::none) expect(n.scale.empty() && n.bias.empty(), name + " of kind none carries parameters");
}

}  // namespace

void ModelSpec::validate() const {
  const std::size_t c = vocab_size, d = hidden_dim;
  expect(c > 0 && d > 0, "vocab_size and hidden_dim must be positive");
  check_matrix(embed, c, d, "embed.E");
  check_matrix(unembed, c, d, "unembed.U");
  if (positions) expect(positions->rank() == 2 && positions->cols() == d, "pos.table width differs from hidden_dim");
  expect(vocab.size() == c, "vocabulary has " + std::to_string(vocab.size()) + " entries, expected " +
                                std::to_string(c));
  for (std::size_t l = 1; l <= blocks.size(); ++l) {
    const Block& b = blocks[l - 1];
    const std::string p = "block." + std::to_string(l);
    check_norm(b.norm, d, p + ".norm");
    if (b.kind == BlockKind::attention) {
      const auto& a = b.attn;
      expect(a.num_heads > 0 && a.head_dim > 0, p + " needs positive num_heads and head_dim");
      const std::size_t hd = a.num_heads * a.head_dim;
      check_matrix(a.wq, d, hd, p + ".attn.wq");
      check_matrix(a.wk, d, hd, p + ".attn.wk");
      check_matrix(a.wv, d, hd, p + ".attn.wv");
      check_matrix(a.wo, hd, d, p + ".attn.wo");
      check_vector(a.bq, hd, p + ".attn.bq");
      check_vector(a.bk, hd, p + ".attn.bk");
      check_vector(a.bv, hd, p + ".attn.bv");
      check_vector(a.bo, d, p + ".attn.bo");
    } else {
      const auto& m = b.mlp;
      check_matrix(m.win, d, m.hidden_dim, p + ".mlp.win");
      check_matrix(m.wout, m.hidden_dim, d, p + ".mlp.wout");
      check_vector(m.bin, m.hidden_dim, p + ".mlp.bin");
      check_vector(m.bout, d, p + ".mlp.bout");
    }
  }
  check_norm(final_norm, d, "final_norm");
}

std::optional<int> ModelSpec::token_id(const std::string& s) const {
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (vocab[i] == s) return static_cast<int>(i);
  return std::nullopt;
}

std::string ModelSpec::vocab_fingerprint() const {
  std::vector<unsigned char> bytes;
  for (const auto& t : vocab) {
    bytes.insert(bytes.end(), t.begin(), t.end());
    bytes.push_back(0);
  }
  return content_hash(bytes);
}

std::string ModelSpec::block_label(std::size_t l) const {
  if (l == blocks.size() + 1) return "final_norm";
  const Block& b = block(l);
  return (b.kind == BlockKind::attention ? "attn:" : "mlp:") + std::to_string(l);
}

std::vector<int> tokenize(const ModelSpec& model, const std::string& text) {
  std::istringstream in(text);
  std::vector<int> ids;
  std::string word;
  while (in >> word) {
    auto id = model.token_id(word);
    if (!id) throw FormatError("word '" + word + "' is not in the vocabulary");
    ids.push_back(*id);
  }
  if (ids.empty()) throw FormatError("text contains no tokens");
  return ids;
}

}  // namespace jetx
