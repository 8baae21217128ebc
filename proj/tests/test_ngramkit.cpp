#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "jetx/errors.hpp"
#include "jetx/ngramkit.hpp"
#include "test_models.hpp"

using namespace jetx;
using jetx::testing::RandomModelConfig;
using jetx::testing::random_model;

namespace {

ModelSpec toy(unsigned seed = 41) {
  RandomModelConfig cfg;
  cfg.seed = seed;
  cfg.kinds = {BlockKind::attention, BlockKind::mlp, BlockKind::attention, BlockKind::mlp};
  return random_model(cfg);
}

std::vector<double> row_of(const BigramRows& r, std::size_t i) { return {r.logits.row(i).begin(), r.logits.row(i).end()}; }

NGramTable table_of(std::vector<std::pair<std::vector<int>, float>> rows) {
  NGramTable t;
  t.vocab = {"a", "b", "c"};
  for (auto& [tok, s] : rows) t.entries.push_back({tok, s});
  return t;
}

}  // namespace

TEST_CASE("encode-decode rows are the decoder applied to the embedding") {
  const ModelSpec m = toy();
  const BigramRows rows = bigram_encode_decode(m);
  REQUIRE(rows.logits.rows() == m.vocab_size);
  for (int v : {0, 3, 11}) {
    const Tensor e = take_row(m.embed, static_cast<std::size_t>(v));
    const Tensor expect = unembed(m, apply_nonlin(m, m.num_blocks() + 1, e));
    CHECK(max_abs_diff(Tensor::vector(row_of(rows, static_cast<std::size_t>(v))), expect.reshaped({m.vocab_size})) <=
          1e-12);
  }
}

TEST_CASE("MLP rows are the decoder applied to the block output alone") {
  const ModelSpec m = toy();
  const BigramRows rows = bigram_via_mlp(m, 2);
  CHECK(rows.path == "mlp:2");
  const Tensor e = take_row(m.embed, 5);
  const Tensor expect = unembed(m, apply_nonlin(m, m.num_blocks() + 1, apply_nonlin(m, 2, e)));
  CHECK(max_abs_diff(Tensor::vector(row_of(rows, 5)), expect.reshaped({m.vocab_size})) <= 1e-12);
  CHECK_THROWS_AS(bigram_via_mlp(m, 1), ConfigError);
}

TEST_CASE("sweeps are independent of threads and subsets") {
  const ModelSpec m = toy();
  for (std::size_t k : {0, 1}) {
    const BigramRows one = bigram_encode_decode(m, k, {}, 1), three = bigram_encode_decode(m, k, {}, 3);
    CHECK(max_abs_diff(one.logits, three.logits) == 0.0);
    const BigramRows sub = bigram_encode_decode(m, k, {7, 2}, 2);
    CHECK(row_of(sub, 0) == row_of(one, 7));
    CHECK(row_of(sub, 1) == row_of(one, 2));
  }
  CHECK_THROWS_AS(bigram_encode_decode(m, 0, {99}), ConfigError);
}

TEST_CASE("probability tables are normalized per first token") {
  const NGramTable t = to_table(bigram_encode_decode(toy()), true);
  CHECK(t.normalized);
  std::map<int, double> sums;
  for (const auto& e : t.entries) sums[e.tokens[0]] += e.score;
  for (const auto& [v, s] : sums) CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("single-path scaling multiplies logits") {
  const BigramRows rows = bigram_encode_decode(toy());
  const BigramRows half = scale_rows(rows, 0.5);
  CHECK(max_abs_diff(half.logits, 0.5 * rows.logits) == 0.0);
}

TEST_CASE("top-k ranks by score then by token tuple") {
  const NGramTable t = table_of({{{2, 1}, 1.0f}, {{0, 2}, 3.0f}, {{1, 0}, 3.0f}, {{0, 1}, 3.0f}, {{2, 2}, -1.0f}});
  const NGramTable top = topk(t, 3);
  REQUIRE(top.entries.size() == 3);
  CHECK(top.entries[0].tokens == std::vector<int>{0, 1});
  CHECK(top.entries[1].tokens == std::vector<int>{0, 2});
  CHECK(top.entries[2].tokens == std::vector<int>{1, 0});
  CHECK(topk(t, 99).entries.size() == 5);
}

TEST_CASE("diffs are symmetric and empty on identical tables") {
  const NGramTable a = table_of({{{0, 0}, 3.0f}, {{0, 1}, 2.0f}, {{1, 1}, 1.0f}});
  const NGramTable b = table_of({{{0, 0}, 3.0f}, {{0, 1}, 0.0f}, {{1, 1}, 1.0f}});
  CHECK(diff(a, a, 2).empty());
  const auto ab = diff(a, b, 2), ba = diff(b, a, 2);
  REQUIRE(ab.size() == 2);
  CHECK(ab[0].side == "A-only");
  CHECK(ab[0].tokens == std::vector<int>{0, 1});
  CHECK(ab[0].score_b == 0.0);
  CHECK(ab[1].side == "B-only");
  CHECK(ba[0].tokens == ab[1].tokens);
  NGramTable other = b;
  other.vocab = {"a", "b", "d"};
  CHECK_THROWS_AS(diff(a, other, 2), ConfigError);
}

TEST_CASE("glob patterns and keyword resolution") {
  CHECK(glob_match("sh*", "shaimva"));
  CHECK(glob_match("*va", "shaimva"));
  CHECK(glob_match("s?a*", "shaimva"));
  CHECK_FALSE(glob_match("sh?", "shaimva"));
  CHECK(glob_match("*", ""));
  const ModelSpec m = toy();
  const KeywordSet ks = resolve_keywords(m, {"t1", "t1?", "zz"});
  CHECK(ks.unresolved == std::vector<std::string>{"zz"});
  CHECK(ks.ids() == std::vector<int>{1, 10, 11});
}

TEST_CASE("keyword mass is an average of conditional masses") {
  const ModelSpec m = toy();
  const BigramRows rows = bigram_encode_decode(m);
  const KeywordSet ks = resolve_keywords(m, {"t1", "t2", "t3"});
  const double mean = keyword_mass(rows, ks), sum = keyword_mass(rows, ks, true);
  CHECK(sum == doctest::Approx(3 * mean));
  CHECK(mean > 0.0);
  CHECK(mean < 1.0);
  const KeywordSet all = resolve_keywords(m, {"*"});
  CHECK(keyword_mass(rows, all) == doctest::Approx(1.0));
  CHECK_THROWS_AS(keyword_mass(rows, resolve_keywords(m, {"zz"})), ConfigError);
}

TEST_CASE("pseudo-joint mass grows with K up to the unigram total") {
  const ModelSpec m = toy();
  const BigramRows rows = bigram_encode_decode(m);
  Unigrams uni;
  for (std::size_t i = 0; i < m.vocab_size; ++i) uni[m.vocab[i]] = 1.0 / static_cast<double>(m.vocab_size);
  double prev = 0.0;
  for (std::size_t k : {1, 10, 50, 144}) {
    const double mass = pseudo_joint_mass(rows, uni, k).mass;
    CHECK(mass >= prev);
    prev = mass;
  }
  CHECK(prev == doctest::Approx(1.0));
  uni.erase("t0");
  CHECK(pseudo_joint_mass(rows, uni, 5).missing == std::vector<std::string>{"t0"});
}

TEST_CASE("hit ratios and traces") {
  const NGramTable a = table_of({{{0, 0}, 3.0f}, {{0, 1}, 2.0f}, {{1, 1}, 1.0f}});
  NGramTable b = table_of({{{0, 0}, 0.0f}, {{0, 1}, 2.0f}, {{1, 1}, 1.0f}});
  b.step = 10;
  const auto r = hit_ratio({a, b}, a, 2);
  CHECK(r == std::vector<double>{1.0, 0.5});
  const auto trace = score_trace({a, b}, {{0, 0}});
  REQUIRE(trace.size() == 2);
  CHECK(trace[0].step == 0);
  CHECK(trace[1].step == 10);
  CHECK(trace[1].score == 0.0);
  CHECK_THROWS_AS(score_trace({a}, {{2, 2}}), ConfigError);
}

TEST_CASE("tri-gram head scores match the head's key-position summand") {
  RandomModelConfig cfg;
  cfg.seed = 43;
  cfg.kinds = {BlockKind::attention};
  cfg.heads = 1;
  const ModelSpec m = random_model(cfg);
  TrigramConfig tc;
  tc.keys = {2, 5};
  tc.queries = {1, 7};
  tc.topk_per_pair = 3;
  const NGramTable t = trigram_via_head(m, tc);
  CHECK(t.arity == 3);
  REQUIRE(t.entries.size() == 2 * 2 * 3);
  const SeriesMap decoder = nonlin_map(m, 2);
  for (const auto& e : t.entries) {
    const int s = e.tokens[0], q = e.tokens[1];
    // Single-token pass: the head attends to itself, so the block output is ov(s) + bo.
    const Tensor es = embed(m, {s}, false);
    Tensor ov = apply_nonlin(m, 1, es);
    const Tensor bo = add_row_vector(Tensor(ov.shape()), m.block(1).attn.bo);
    ov -= bo;
    const Tensor normed = apply_norm(m.block(1).norm, embed(m, {s, q}, false));
    const double alpha = attention_patterns(m, 1, normed)[0].at(1, 0);
    const Tensor logits = unembed(m, apply_nonlin(m, 2, alpha * ov));
    CHECK(static_cast<double>(e.score) == doctest::Approx(logits[static_cast<std::size_t>(e.tokens[2])]).epsilon(1e-6));
  }
  tc.alpha_one = true;
  const NGramTable t1 = trigram_via_head(m, tc);
  CHECK(t1.path == "attn:1:head0:alpha1");
  tc.head = 3;
  CHECK_THROWS_AS(trigram_via_head(m, tc), ConfigError);
}

TEST_CASE("tri-gram sweeps are thread independent") {
  const ModelSpec m = toy();
  TrigramConfig tc;
  tc.attn_block = 3;
  tc.head = 1;
  tc.k = 1;
  const NGramTable a = trigram_via_head(m, tc, 1), b = trigram_via_head(m, tc, 4);
  REQUIRE(a.entries.size() == b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].tokens == b.entries[i].tokens);
    CHECK(a.entries[i].score == b.entries[i].score);
  }
}

TEST_CASE("tables round-trip through CSV with the sidecar") {
  const auto dir = std::filesystem::temp_directory_path() / "jetx_table_test";
  std::filesystem::create_directories(dir);
  ModelSpec m = toy();
  m.vocab[3] = "com,ma";
  m.vocab[4] = "qu\"ote";
  m.step = 77;
  const NGramTable t = topk(to_table(bigram_encode_decode(m)), 40);
  write_table(t, dir / "t.csv");
  CHECK(std::filesystem::exists(dir / "t.json"));
  const NGramTable back = read_table(dir / "t.csv");
  CHECK(back.step == 77);
  CHECK(back.vocab == t.vocab);
  REQUIRE(back.entries.size() == t.entries.size());
  for (std::size_t i = 0; i < t.entries.size(); ++i) {
    CHECK(back.entries[i].tokens == t.entries[i].tokens);
    CHECK(back.entries[i].score == t.entries[i].score);
  }
  std::filesystem::remove(dir / "t.json");
  CHECK_THROWS_AS(read_table(dir / "t.csv"), FormatError);
  std::filesystem::remove_all(dir);
  CHECK(csv_escape("a,b") == "\"a,b\"");
  CHECK(format_score(0.1f) == "0.100000001");
}

TEST_CASE("ablating a zero-map MLP changes nothing") {
  ModelSpec m = toy();
  m.blocks[1].mlp.wout = Tensor(m.blocks[1].mlp.wout.shape());
  m.blocks[1].mlp.bout.assign(m.hidden_dim, 0.0);
  Ablation a;
  a.mlp_block = 2;
  const NGramTable t = topk(to_table(bigram_encode_decode(m)), 10);
  for (double d : ablate_and_delta(m, a, t.entries)) CHECK(d == 0.0);
}

TEST_CASE("ablation deltas follow the full forward pass") {
  const ModelSpec m = toy();
  Ablation a;
  a.mlp_block = 4;
  const std::vector<NGramEntry> entries{{{3, 9}, 0.0f}, {{1, 2, 5}, 0.0f}};
  const auto d = ablate_and_delta(m, a, entries, 2);
  ForwardOptions base, ablated;
  base.use_positions = ablated.use_positions = false;
  ablated.ablation = a;
  const Tensor before = forward(m, {1, 2}, base), after = forward(m, {1, 2}, ablated);
  CHECK(d[1] == doctest::Approx(after.at(1, 5) - before.at(1, 5)).epsilon(1e-12));
  a.mlp_block = 1;
  CHECK_THROWS_AS(ablate_and_delta(m, a, entries), ConfigError);
}
