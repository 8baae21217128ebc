#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "jetx/errors.hpp"
#include "jetx/model.hpp"

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace jetx {

using json = nlohmann::json;

namespace {

struct RawTensor {
  Shape shape;
  std::vector<double> data;
};

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto v : s) n *= v;
  return n;
}

std::map<std::string, RawTensor> read_tensors(const json& header, const unsigned char* data, std::size_t data_size,
                                              const std::string& origin) {
  std::map<std::string, RawTensor> out;
  for (const auto& [name, info] : header.items()) {
    if (name == "__metadata__") continue;
    if (!info.is_object() || !info.contains("dtype") || !info.contains("shape") || !info.contains("data_offsets")) {
      throw FormatError(origin + ": tensor '" + name + "' lacks dtype/shape/data_offsets");
    }
    const std::string dtype = info.at("dtype").get<std::string>();
    std::size_t width = 0;
    if (dtype == "F32") {
      width = 4;
    } else if (dtype == "F64") {
      width = 8;
    } else {
      throw FormatError(origin + ": tensor '" + name + "' has unsupported dtype " + dtype);
    }
    RawTensor t;
    for (const auto& d : info.at("shape")) t.shape.push_back(d.get<std::size_t>());
    const auto& off = info.at("data_offsets");
    if (!off.is_array() || off.size() != 2) throw FormatError(origin + ": tensor '" + name + "' has bad data_offsets");
    const auto begin = off[0].get<std::uint64_t>();
    const auto end = off[1].get<std::uint64_t>();
    const std::size_t n = numel(t.shape);
    if (end < begin || end > data_size) {
      throw FormatError(origin + ": tensor '" + name + "' data range exceeds file size");
    }
    if (end - begin != n * width) {
      throw FormatError(origin + ": tensor '" + name + "' byte length does not match its shape");
    }
    t.data.resize(n);
    const unsigned char* src = data + begin;
    for (std::size_t i = 0; i < n; ++i) {
      double v;
      if (width == 4) {
        float f;
        std::memcpy(&f, src + 4 * i, 4);
        v = f;
      } else {
        std::memcpy(&v, src + 8 * i, 8);
      }
      if (!std::isfinite(v)) {
        throw FormatError(origin + ": tensor '" + name + "' contains NaN/Inf at element " + std::to_string(i));
      }
      t.data[i] = v;
    }
    out.emplace(name, std::move(t));
  }
  return out;
}

class TensorTable {
 public:
  TensorTable(std::map<std::string, RawTensor> tensors, std::string origin)
      : tensors_(std::move(tensors)), origin_(std::move(origin)) {}

  bool has(const std::string& name) const { return tensors_.count(name) != 0; }

  Tensor take(const std::string& name, const Shape& expected) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw FormatError(origin_ + ": missing tensor '" + name + "'");
    check_shape(name, it->second.shape, expected);
    used_.insert(name);
    return Tensor(it->second.shape, it->second.data);
  }

  std::vector<double> take_vector(const std::string& name, std::size_t n, bool required) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) {
      if (required) throw FormatError(origin_ + ": missing tensor '" + name + "'");
      return {};
    }
    check_shape(name, it->second.shape, {n});
    used_.insert(name);
    return it->second.data;
  }

  void reject_unused() const {
    for (const auto& [name, _] : tensors_)
      if (!used_.count(name)) throw FormatError(origin_ + ": unexpected tensor '" + name + "'");
  }

 private:
  void check_shape(const std::string& name, const Shape& actual, const Shape& expected) const {
    if (actual != expected) {
      throw ShapeError(origin_ + ": tensor '" + name + "' has shape " + shape_string(actual) + ", expected " +
                       shape_string(expected));
    }
  }

  std::map<std::string, RawTensor> tensors_;
  std::set<std::string> used_;
  std::string origin_;
};

NormParams read_norm(const json& meta, TensorTable& tensors, const std::string& prefix, std::size_t d) {
  NormParams p;
  p.kind = parse_norm_kind(meta.value("kind", "none"));
  p.eps = meta.value("eps", 1e-5);
  if (p.kind == NormKind::layernorm) {
    p.scale = tensors.take_vector(prefix + ".scale", d, false);
    p.bias = tensors.take_vector(prefix + ".bias", d, false);
  } else if (p.kind == NormKind::rmsnorm) {
    p.scale = tensors.take_vector(prefix + ".scale", d, false);
  }
  return p;
}

json norm_json(const NormParams& p) {
  json j{{"kind", to_string(p.kind)}};
  if (p.kind != NormKind::none) j["eps"] = p.eps;
  return j;
}

}  // namespace

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path.string());
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

ModelSpec load_model(const std::filesystem::path& path) {
  return parse_model(read_file_bytes(path), path.string());
}

ModelSpec parse_model(const std::vector<unsigned char>& bytes, const std::string& origin) {
  if (bytes.size() < 8) throw FormatError(origin + ": file too small for header length");
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  if (header_len > bytes.size() - 8) throw FormatError(origin + ": header length exceeds file size");

  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw FormatError(origin + ": malformed header JSON: " + e.what());
  }
  if (!header.is_object() || !header.contains("__metadata__")) {
    throw FormatError(origin + ": header lacks __metadata__");
  }

  ModelSpec m;
  try {
    const json& meta = header.at("__metadata__");
    const json& arch = meta.at("architecture");
    m.model_id = meta.value("model_id", std::filesystem::path(origin).stem().string());
    if (meta.contains("step") && meta.at("step").is_number_integer()) m.step = meta.at("step").get<long long>();
    m.vocab_size = arch.at("vocab_size").get<std::size_t>();
    m.hidden_dim = arch.at("hidden_dim").get<std::size_t>();
    m.tied_embeddings = arch.value("tied_embeddings", false);
    const std::size_t c = m.vocab_size, d = m.hidden_dim;

    const unsigned char* data = bytes.data() + 8 + header_len;
    const std::size_t data_size = bytes.size() - 8 - header_len;
    TensorTable tensors(read_tensors(header, data, data_size, origin), origin);

    m.embed = tensors.take("embed.E", {c, d});
    if (m.tied_embeddings && !tensors.has("unembed.U")) {
      m.unembed = m.embed;
    } else {
      m.unembed = tensors.take("unembed.U", {c, d});
    }
    const std::size_t max_pos = arch.value("max_positions", std::size_t{0});
    if (tensors.has("pos.table")) m.positions = tensors.take("pos.table", {max_pos, d});

    const json& blocks = arch.at("blocks");
    std::size_t l = 0;
    for (const json& b : blocks) {
      ++l;
      const std::string prefix = "block." + std::to_string(l);
      Block blk;
      blk.norm = read_norm(b.value("norm", json::object()), tensors, prefix + ".norm", d);
      const std::string kind = b.at("kind").get<std::string>();
      if (kind == "attention") {
        blk.kind = BlockKind::attention;
        auto& a = blk.attn;
        a.num_heads = b.at("num_heads").get<std::size_t>();
        a.head_dim = b.at("head_dim").get<std::size_t>();
        const std::size_t hd = a.num_heads * a.head_dim;
        a.wq = tensors.take(prefix + ".attn.wq", {d, hd});
        a.wk = tensors.take(prefix + ".attn.wk", {d, hd});
        a.wv = tensors.take(prefix + ".attn.wv", {d, hd});
        a.wo = tensors.take(prefix + ".attn.wo", {hd, d});
        a.bq = tensors.take_vector(prefix + ".attn.bq", hd, false);
        a.bk = tensors.take_vector(prefix + ".attn.bk", hd, false);
        a.bv = tensors.take_vector(prefix + ".attn.bv", hd, false);
        a.bo = tensors.take_vector(prefix + ".attn.bo", d, false);
      } else if (kind == "mlp") {
        blk.kind = BlockKind::mlp;
        auto& p = blk.mlp;
        p.hidden_dim = b.at("hidden_dim").get<std::size_t>();
        p.activation = parse_activation(b.value("activation", "gelu"));
        p.win = tensors.take(prefix + ".mlp.win", {d, p.hidden_dim});
        p.wout = tensors.take(prefix + ".mlp.wout", {p.hidden_dim, d});
        p.bin = tensors.take_vector(prefix + ".mlp.bin", p.hidden_dim, false);
        p.bout = tensors.take_vector(prefix + ".mlp.bout", d, false);
      } else {
        throw FormatError(origin + ": unknown block kind '" + kind + "'");
      }
      m.blocks.push_back(std::move(blk));
    }
    m.final_norm = read_norm(arch.value("final_norm", json::object()), tensors, "final_norm", d);
    tensors.reject_unused();

    if (meta.contains("vocab")) {
      m.vocab = meta.at("vocab").get<std::vector<std::string>>();
    } else {
      for (std::size_t i = 0; i < c; ++i) m.vocab.push_back("<" + std::to_string(i) + ">");
    }
  } catch (const json::exception& e) {
    throw FormatError(origin + ": malformed metadata: " + e.what());
  }
  m.validate();
  return m;
}

std::vector<unsigned char> serialize_model(const ModelSpec& m, StorageType storage) {
  m.validate();
  std::map<std::string, std::pair<Shape, const double*>> entries;
  auto add = [&](const std::string& name, Shape shape, const double* p) { entries[name] = {std::move(shape), p}; };
  auto add_vec = [&](const std::string& name, const std::vector<double>& v) {
    if (!v.empty()) add(name, {v.size()}, v.data());
  };
  auto add_norm = [&](const std::string& prefix, const NormParams& n) {
    add_vec(prefix + ".scale", n.scale);
    add_vec(prefix + ".bias", n.bias);
  };

  add("embed.E", m.embed.shape(), m.embed.data());
  add("unembed.U", m.unembed.shape(), m.unembed.data());
  if (m.positions) add("pos.table", m.positions->shape(), m.positions->data());
  json blocks = json::array();
  for (std::size_t l = 1; l <= m.num_blocks(); ++l) {
    const Block& b = m.block(l);
    const std::string prefix = "block." + std::to_string(l);
    add_norm(prefix + ".norm", b.norm);
    if (b.kind == BlockKind::attention) {
      const auto& a = b.attn;
      add(prefix + ".attn.wq", a.wq.shape(), a.wq.data());
      add(prefix + ".attn.wk", a.wk.shape(), a.wk.data());
      add(prefix + ".attn.wv", a.wv.shape(), a.wv.data());
      add(prefix + ".attn.wo", a.wo.shape(), a.wo.data());
      add_vec(prefix + ".attn.bq", a.bq);
      add_vec(prefix + ".attn.bk", a.bk);
      add_vec(prefix + ".attn.bv", a.bv);
      add_vec(prefix + ".attn.bo", a.bo);
      blocks.push_back({{"kind", "attention"},
                        {"num_heads", a.num_heads},
                        {"head_dim", a.head_dim},
                        {"norm", norm_json(b.norm)}});
    } else {
      const auto& p = b.mlp;
      add(prefix + ".mlp.win", p.win.shape(), p.win.data());
      add(prefix + ".mlp.wout", p.wout.shape(), p.wout.data());
      add_vec(prefix + ".mlp.bin", p.bin);
      add_vec(prefix + ".mlp.bout", p.bout);
      blocks.push_back({{"kind", "mlp"},
                        {"hidden_dim", p.hidden_dim},
                        {"activation", to_string(p.activation)},
                        {"norm", norm_json(b.norm)}});
    }
  }
  add_norm("final_norm", m.final_norm);

  json meta{{"format", "jetm"},
            {"version", 1},
            {"model_id", m.model_id},
            {"vocab", m.vocab},
            {"architecture",
             {{"vocab_size", m.vocab_size},
              {"hidden_dim", m.hidden_dim},
              {"blocks", blocks},
              {"final_norm", norm_json(m.final_norm)},
              {"max_positions", m.positions ? m.positions->rows() : 0},
              {"tied_embeddings", m.tied_embeddings}}}};
  if (m.step) meta["step"] = *m.step;

  json header{{"__metadata__", meta}};
  const std::size_t width = storage == StorageType::f32 ? 4 : 8;
  std::uint64_t offset = 0;
  for (const auto& [name, e] : entries) {
    const std::uint64_t n = numel(e.first) * width;
    header[name] = {{"dtype", width == 4 ? "F32" : "F64"}, {"shape", e.first}, {"data_offsets", {offset, offset + n}}};
    offset += n;
  }
  std::string text = header.dump();
  text.append((8 - text.size() % 8) % 8, ' ');

  std::vector<unsigned char> out(8 + text.size() + offset);
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>(len >> (8 * i));
  std::memcpy(out.data() + 8, text.data(), text.size());
  unsigned char* dst = out.data() + 8 + text.size();
  for (const auto& [name, e] : entries) {
    const std::size_t n = numel(e.first);
    for (std::size_t i = 0; i < n; ++i) {
      if (width == 4) {
        const float f = static_cast<float>(e.second[i]);
        std::memcpy(dst, &f, 4);
      } else {
        std::memcpy(dst, &e.second[i], 8);
      }
      dst += width;
    }
  }
  return out;
}

void save_model(const ModelSpec& model, const std::filesystem::path& path, StorageType storage) {
  const auto bytes = serialize_model(model, storage);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string content_hash(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::string file_hash(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return "fnv1a64:" + content_hash(bytes);
}

}  // namespace jetx
