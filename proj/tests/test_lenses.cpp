#include <doctest.h>

#include <cmath>
#include <fstream>
#include <string>

#include "jetx/errors.hpp"
#include "jetx/lenses.hpp"
#include "jetx/parallel.hpp"
#include "test_models.hpp"

using namespace jetx;

namespace {

ModelSpec toy() {
  jetx::testing::RandomModelConfig cfg;
  cfg.seed = 51;
  cfg.kinds = {BlockKind::attention, BlockKind::mlp, BlockKind::attention};
  return jetx::testing::random_model(cfg);
}

}  // namespace

TEST_CASE("top tokens break ties by id") {
  const ModelSpec m = toy();
  std::vector<double> logits(m.vocab_size, 0.0);
  logits[4] = logits[2] = 1.0;
  const auto top = top_tokens(m, logits, 3);
  CHECK(top[0].id == 2);
  CHECK(top[1].id == 4);
  CHECK(top[2].id == 0);
  CHECK_THROWS_AS(top_tokens(m, logits, 0), ConfigError);
}

TEST_CASE("order-zero iterative lens is the logit lens") {
  const ModelSpec m = toy();
  const TokenSequence z{2, 7, 1};
  for (std::size_t l = 0; l <= m.num_blocks(); ++l) {
    const auto a = logit_lens(m, z, l, 3), b = iterative_jet_lens(m, z, l, 0, 3);
    for (std::size_t i = 0; i < a.logits.size(); ++i) CHECK(std::abs(a.logits[i] - b.logits[i]) <= 1e-10);
  }
  // The top level reads the model itself at every order.
  const Tensor logits = forward(m, z);
  const auto top = iterative_jet_lens(m, z, m.num_blocks(), 2, 1);
  CHECK(std::abs(top.logits[0] - logits.at(2, 0)) <= 1e-10);
}

TEST_CASE("first-order iterative lens tracks the model better at early blocks") {
  const ModelSpec m = load_model(std::string(JETX_FIXTURE_DIR) + "/toy-markov-L4.jetm");
  std::ifstream in(std::string(JETX_FIXTURE_DIR) + "/probe_sentences.txt");
  std::vector<TokenSequence> corpus;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') corpus.push_back(tokenize(m, line));
  REQUIRE(corpus.size() >= 20);
  for (std::size_t l = 0; l < 2; ++l) {
    std::size_t better = 0;
    for (const auto& z : corpus)
      if (lens_cosine(m, z, LensKind::iterative, 1, l, false) > lens_cosine(m, z, LensKind::iterative, 0, l, false))
        ++better;
    CAPTURE(l);
    CHECK(static_cast<double>(better) >= 0.6 * static_cast<double>(corpus.size()));
  }
}

TEST_CASE("joint lens reports one entry per block plus the embedding") {
  const ModelSpec m = toy();
  const LensReport r = joint_jet_lens(m, {1, 2, 3}, 1, 4, false);
  REQUIRE(r.entries.size() == m.num_blocks() + 1);
  CHECK(r.entries[0].label == "embed");
  CHECK(r.entries[2].label == "mlp:2");
  CHECK(*r.entries[1].weight == doctest::Approx(0.25));
  CHECK(r.cosine.has_value());
  const LensReport opt = joint_jet_lens(m, {1, 2, 3}, 1, 4, true);
  double total = 0;
  for (const auto& e : opt.entries) total += *e.weight;
  CHECK(total == doctest::Approx(1.0));
  const auto text = opt.to_text();
  CHECK(text.find("weights=optimized") != std::string::npos);
  CHECK(text.find("[") != std::string::npos);
  CHECK(opt.to_json().at("entries").size() == m.num_blocks() + 1);
}

TEST_CASE("lens similarity sweeps are deterministic across threads") {
  const ModelSpec m = toy();
  const std::vector<TokenSequence> corpus{{1}, {2, 3}, {4, 5, 6}, {7, 8, 9, 10}, {0, 0}};
  const auto a = lens_similarity_sweep(m, corpus, LensKind::joint, {0, 1}, 0, true, 1);
  const auto b = lens_similarity_sweep(m, corpus, LensKind::joint, {0, 1}, 0, true, 3);
  CHECK(sweep_csv(a) == sweep_csv(b));
  CHECK(a.rows.size() == 2);
  CHECK(a.rows[0].lens == "joint-opt");
  CHECK(a.rows[1].n == corpus.size());
  const auto it = lens_similarity_sweep(m, corpus, LensKind::iterative, {1}, 1, false, 2);
  CHECK(it.rows[0].lens == "iterative@1");
  CHECK_THROWS_AS(lens_similarity_sweep(m, {}, LensKind::logit, {0}, 0, false), ConfigError);
  CHECK_THROWS_AS(parse_lens_kind("tuned"), ConfigError);
}

TEST_CASE("parallel_for covers every index and rethrows") {
  std::vector<int> hit(103, 0);
  parallel_for(hit.size(), 4, [&](std::size_t i) { hit[i] += 1; });
  for (int h : hit) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) {
                    if (i == 7) throw DomainError("boom");
                  }),
                  DomainError);
  CHECK(resolve_threads(std::size_t{3}) == 3);
  CHECK(resolve_threads(std::nullopt) >= 1);
}
