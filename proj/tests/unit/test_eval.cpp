#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "mse2d/corpus.hpp"
#include "mse2d/errors.hpp"
#include "mse2d/eval.hpp"

using namespace mse2d;

namespace {

double row_cos(const Tensor& a, const Tensor& b, std::size_t r) {
  const std::size_t d = a.dim(1);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t c = 0; c < d; ++c) {
    ab += a.at(r, c) * b.at(r, c);
    aa += a.at(r, c) * a.at(r, c);
    bb += b.at(r, c) * b.at(r, c);
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

struct Fixture {
  EncoderModel model = init_model(EncoderConfig{});
  std::vector<ScoredPair> pairs;
  Fixture() {
    SyntheticCorpusSpec spec;
    spec.eval_pairs_per_cluster = 6;
    pairs = generate_synthetic_corpus(spec).eval;
  }
  std::vector<TokenSequence> side(bool first) const {
    Tokenizer tok(model.config());
    std::vector<TokenSequence> out;
    for (const ScoredPair& p : pairs) out.push_back(tok.encode(first ? p.text_a : p.text_b));
    return out;
  }
  std::vector<double> gold() const {
    std::vector<double> g;
    for (const ScoredPair& p : pairs) g.push_back(p.score);
    return g;
  }
  // Cosines at (n, d) computed straight from embed(), no slicing reuse.
  std::vector<double> naive_scores(std::size_t n, std::size_t d) const {
    Tensor a = embed(model, side(true), n, d);
    Tensor b = embed(model, side(false), n, d);
    std::vector<double> s;
    for (std::size_t r = 0; r < pairs.size(); ++r) s.push_back(row_cos(a, b, r));
    return s;
  }
};

}  // namespace

TEST_SUITE("spearman") {
  TEST_CASE("perfect, reversed and the five-point example") {
    const std::vector<double> x{1, 2, 3};
    CHECK(spearman(x, std::vector<double>{10, 20, 30}) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(spearman(x, std::vector<double>{3, 2, 1}) == doctest::Approx(-1.0).epsilon(1e-15));
    // 1 - 6 * 4 / (5 * 24)
    const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 1, 4, 3, 5};
    CHECK(spearman(a, b) == doctest::Approx(1.0 - 24.0 / 120.0).epsilon(1e-14));
  }

  TEST_CASE("midranks for ties") {
    const std::vector<double> v{10, 20, 20, 30, 20};
    CHECK(average_ranks(v) == std::vector<double>{1, 3, 3, 5, 3});
    // Pearson of ranks [1.5,1.5,3] vs [1,2,3]: cov 1.5/... computed by hand: r = sqrt(3)/2.
    CHECK(spearman(std::vector<double>{0, 0, 1}, std::vector<double>{1, 2, 3}) ==
          doctest::Approx(std::sqrt(3.0) / 2.0).epsilon(1e-14));
  }

  TEST_CASE("invariant under increasing transforms, symmetric, self-correlation one") {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> n01;
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> x(30), y(30), ex, ay;
      for (std::size_t i = 0; i < 30; ++i) {
        x[i] = n01(rng);
        y[i] = x[i] + n01(rng);
      }
      for (double v : x) ex.push_back(std::exp(v));
      for (double v : y) ay.push_back(3.0 * v - 7.0);
      const double base = spearman(x, y);
      CHECK(spearman(ex, y) == doctest::Approx(base).epsilon(1e-13));
      CHECK(spearman(x, ay) == doctest::Approx(base).epsilon(1e-13));
      CHECK(spearman(y, x) == base);
      CHECK(spearman(x, x) == doctest::Approx(1.0).epsilon(1e-14));
      CHECK(base <= 1.0);
      CHECK(base >= -1.0);
    }
  }

  TEST_CASE("errors") {
    const std::vector<double> two{1, 2};
    CHECK_THROWS_AS(spearman(two, std::vector<double>{1, 2, 3}), InputError);
    CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{1}), InputError);
    CHECK_THROWS_AS(spearman(two, std::vector<double>{5, 5}), InputError);
    CHECK_THROWS_AS(spearman(std::vector<double>{4, 4, 4}, std::vector<double>{1, 2, 3}), InputError);
    CHECK_THROWS_AS(spearman(two, std::vector<double>{1, NAN}), InputError);
  }
}

TEST_SUITE("evaluate") {
  TEST_CASE("grid covers exactly the requested cells in layer-major order") {
    Fixture f;
    const std::vector<std::size_t> layers{3, 1}, dims{64, 8, 32};
    EvalReport r = evaluate(f.model, f.pairs, layers, dims);
    REQUIRE(r.cells.size() == 6);
    CHECK(r.cells[0].layer == 1);
    CHECK(r.cells[0].dim == 8);
    CHECK(r.cells[5].layer == 3);
    CHECK(r.cells[5].dim == 64);
    for (const EvalCell& c : r.cells) CHECK(c.num_pairs == f.pairs.size());
    CHECK_THROWS(r.cell(2, 8));
  }

  TEST_CASE("slicing reuse agrees with the naive path on every cell") {
    Fixture f;
    const std::vector<std::size_t> layers{1, 2, 3, 4}, dims{8, 16, 32, 64};
    EvalReport r = evaluate(f.model, f.pairs, layers, dims);
    for (std::size_t n : layers) {
      for (std::size_t d : dims) {
        CHECK(std::abs(r.cell(n, d).spearman - spearman(f.naive_scores(n, d), f.gold())) < 1e-12);
      }
    }
  }

  TEST_CASE("gold equal to the arranged cosine gives exactly one") {
    Fixture f;
    auto scores = f.naive_scores(2, 16);
    for (std::size_t i = 0; i < f.pairs.size(); ++i) f.pairs[i].score = scores[i];
    const std::vector<std::size_t> layers{2}, dims{16};
    CHECK(evaluate(f.model, f.pairs, layers, dims).cell(2, 16).spearman == doctest::Approx(1.0).epsilon(1e-14));
  }

  TEST_CASE("deterministic, and independent of thread count and chunking") {
    Fixture f;
    const std::vector<std::size_t> layers{1, 4}, dims{8, 64};
    EvalReport a = evaluate(f.model, f.pairs, layers, dims);
    EvalReport b = evaluate(f.model, f.pairs, layers, dims);
    EvalOptions opt;
    opt.num_threads = 3;
    opt.chunk_size = 7;
    EvalReport c = evaluate(f.model, f.pairs, layers, dims, opt);
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
      CHECK(a.cells[i].spearman == b.cells[i].spearman);
      CHECK(a.cells[i].spearman == c.cells[i].spearman);
    }
  }

  TEST_CASE("untokenizable pairs are skipped and counted") {
    Fixture f;
    const std::size_t total = f.pairs.size();
    f.pairs.push_back({"   ", "something", 1.0});
    f.pairs.push_back({"fine", "", 0.0});
    const std::vector<std::size_t> layers{4}, dims{64};
    EvalReport r = evaluate(f.model, f.pairs, layers, dims);
    CHECK(r.skipped_pairs == 2);
    CHECK(r.cell(4, 64).num_pairs == total);
  }

  TEST_CASE("argument errors") {
    Fixture f;
    const std::vector<std::size_t> ok{1}, bad_layer{5}, bad_dim{65}, none;
    CHECK_THROWS_AS(evaluate(f.model, std::vector<ScoredPair>{}, ok, ok), InputError);
    CHECK_THROWS_AS(evaluate(f.model, f.pairs, bad_layer, ok), InputError);
    CHECK_THROWS_AS(evaluate(f.model, f.pairs, ok, bad_dim), InputError);
    CHECK_THROWS_AS(evaluate(f.model, f.pairs, none, ok), InputError);
  }

  TEST_CASE("csv layout") {
    EvalReport r;
    r.cells.push_back({1, 8, 0.5, 10});
    r.cells.push_back({4, 64, -0.25, 10});
    std::ostringstream os;
    write_report_csv(r, os);
    CHECK(os.str() == "layer,dim,spearman,num_pairs\n1,8,0.5,10\n4,64,-0.25,10\n");
  }
}
