#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include <nlohmann/json.hpp>

#include "jetx/errors.hpp"
#include "jetx/forward.hpp"
#include "test_models.hpp"

using namespace jetx;
using json = nlohmann::json;

namespace {

struct Split {
  json header;
  std::vector<unsigned char> data;
};

Split split(const std::vector<unsigned char>& bytes) {
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  Split s;
  s.header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  s.data.assign(bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n), bytes.end());
  return s;
}

std::vector<unsigned char> join(const Split& s) {
  const std::string h = s.header.dump();
  std::vector<unsigned char> out(8);
  const std::uint64_t n = h.size();
  std::memcpy(out.data(), &n, 8);
  out.insert(out.end(), h.begin(), h.end());
  out.insert(out.end(), s.data.begin(), s.data.end());
  return out;
}

ModelSpec small_model() {
  jetx::testing::RandomModelConfig cfg;
  cfg.seed = 21;
  return jetx::testing::random_model(cfg);
}

}  // namespace

TEST_CASE("archives round-trip exactly in f64") {
  const ModelSpec m = small_model();
  const ModelSpec back = parse_model(serialize_model(m));
  CHECK(back.model_id == m.model_id);
  CHECK(back.vocab == m.vocab);
  CHECK(back.num_blocks() == m.num_blocks());
  const TokenSequence z{1, 4, 2, 7};
  CHECK(max_abs_diff(forward(back, z), forward(m, z)) == 0.0);
  CHECK(serialize_model(back) == serialize_model(m));
}

TEST_CASE("f32 storage rounds weights but keeps logits close") {
  const ModelSpec m = small_model();
  const ModelSpec back = parse_model(serialize_model(m, StorageType::f32));
  const TokenSequence z{3, 3, 0};
  const double err = max_abs_diff(forward(back, z), forward(m, z));
  CHECK(err > 0.0);
  CHECK(err < 1e-4);
}

TEST_CASE("headers are padded to eight bytes") {
  const auto bytes = serialize_model(small_model());
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  CHECK(n % 8 == 0);
}

TEST_CASE("truncated or oversized headers are format errors") {
  const auto bytes = serialize_model(small_model());
  CHECK_THROWS_WITH_AS(parse_model({bytes.begin(), bytes.begin() + 5}), doctest::Contains("too small"), FormatError);
  auto bad = bytes;
  const std::uint64_t huge = bytes.size() * 2;
  std::memcpy(bad.data(), &huge, 8);
  CHECK_THROWS_WITH_AS(parse_model(bad), doctest::Contains("exceeds file size"), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() - 16);
  CHECK_THROWS_AS(parse_model(cut), FormatError);
}

TEST_CASE("non-finite weights are rejected with the element index") {
  Split s = split(serialize_model(small_model()));
  const auto off = s.header.at("embed.E").at("data_offsets")[0].get<std::size_t>();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::memcpy(s.data.data() + off + 3 * sizeof(double), &nan, sizeof nan);
  CHECK_THROWS_WITH_AS(parse_model(join(s)), doctest::Contains("element 3"), FormatError);
}

TEST_CASE("shape mismatches name the tensor") {
  Split s = split(serialize_model(small_model()));
  auto& u = s.header.at("unembed.U");
  const auto shape = u.at("shape").get<std::vector<std::size_t>>();
  u["shape"] = {shape[1], shape[0]};
  CHECK_THROWS_WITH_AS(parse_model(join(s)), doctest::Contains("unembed.U"), ShapeError);
}

TEST_CASE("unsupported dtypes, unknown tensors and missing tensors are rejected") {
  const Split base = split(serialize_model(small_model()));
  Split s = base;
  s.header.at("embed.E")["dtype"] = "BF16";
  CHECK_THROWS_WITH_AS(parse_model(join(s)), doctest::Contains("BF16"), FormatError);
  s = base;
  s.header["stray"] = base.header.at("embed.E");
  CHECK_THROWS_WITH_AS(parse_model(join(s)), doctest::Contains("stray"), FormatError);
  s = base;
  s.header.erase("embed.E");
  CHECK_THROWS_WITH_AS(parse_model(join(s)), doctest::Contains("embed.E"), FormatError);
  s = base;
  s.header["__metadata__"]["architecture"]["blocks"][0]["kind"] = "moe";
  CHECK_THROWS_AS(parse_model(join(s)), FormatError);
}

TEST_CASE("tied embeddings reuse E when U is absent") {
  Split s = split(serialize_model(small_model()));
  s.header.erase("unembed.U");
  s.header["__metadata__"]["architecture"]["tied_embeddings"] = true;
  const ModelSpec m = parse_model(join(s));
  CHECK(m.tied_embeddings);
  CHECK(max_abs_diff(m.unembed, m.embed) == 0.0);
}

TEST_CASE("missing vocabularies default to index names") {
  Split s = split(serialize_model(small_model()));
  s.header["__metadata__"].erase("vocab");
  const ModelSpec m = parse_model(join(s));
  CHECK(m.vocab.at(5) == "<5>");
}

TEST_CASE("files round-trip and hash stably") {
  const auto dir = std::filesystem::temp_directory_path() / "jetx_archive_test";
  std::filesystem::create_directories(dir);
  const ModelSpec m = small_model();
  save_model(m, dir / "a.jetm");
  save_model(m, dir / "b.jetm");
  CHECK(file_hash(dir / "a.jetm") == file_hash(dir / "b.jetm"));
  CHECK(file_hash(dir / "a.jetm").rfind("fnv1a64:", 0) == 0);
  CHECK(load_model(dir / "a.jetm").vocab_size == m.vocab_size);
  CHECK_THROWS_AS(load_model(dir / "missing.jetm"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("validation catches inconsistent models") {
  ModelSpec m = small_model();
  m.blocks[0].attn.wq = Tensor(Shape{3, 3});
  CHECK_THROWS_AS(m.validate(), ShapeError);
  m = small_model();
  m.final_norm.eps = 0.0;
  CHECK_THROWS_AS(m.validate(), ConfigError);
  CHECK_THROWS_AS(small_model().block(0), ConfigError);
  CHECK(small_model().block_label(1) == "attn:1");
  CHECK(small_model().block_label(2) == "mlp:2");
  CHECK(small_model().block_label(3) == "final_norm");
}
