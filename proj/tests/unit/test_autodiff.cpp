#include <doctest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mse2d/errors.hpp"
#include "mse2d/ops.hpp"
#include "op_cases.hpp"
#include "random_graph.hpp"

using namespace mse2d;
using mse2d::testing::check_gradients;
using mse2d::testing::random_tensor;
using mse2d::testing::weighted_sum;


TEST_SUITE("matmul") {
  TEST_CASE("identity and hand-computed products") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor b({2, 2}, {3, 4, 5, 6});
    Tensor c = ops::matmul(eye, b);
    CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{3, 4, 5, 6});
    CHECK(ops::matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item() == 11.0);
  }

  TEST_CASE("gradient of sum(output) is ones . b^T") {
    std::mt19937_64 rng(7);
    Tensor a = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({5, 3}, rng);
    auto res = check_gradients([&] { return ops::sum(ops::matmul(a, b)); }, {a, b}, 1e-5,
                               mse2d::testing::Stencil::two_point);
    CHECK(res.max_rel_error < 1e-6);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t k = 0; k < 5; ++k) {
        double expected = 0.0;
        for (std::size_t j = 0; j < 3; ++j) expected += b.at(k, j);
        CHECK(a.grad()[i * 5 + k] == doctest::Approx(expected).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    try {
      (void)ops::matmul(a, b);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[2x3] . [2x3]") != std::string::npos);
    }
  }
}

TEST_SUITE("elementwise") {
  TEST_CASE("softmax of zeros is uniform") {
    Tensor s = ops::softmax(Tensor({3}, {0, 0, 0}), 0);
    for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("softmax rows sum to one and stay in (0, 1] even for huge logits") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = random_tensor({5, 7}, rng, 300.0);
      for (std::size_t axis : {0u, 1u}) {
        Tensor s = ops::softmax(x, axis);
        const std::size_t outer = axis == 0 ? 7 : 5, len = axis == 0 ? 5 : 7;
        for (std::size_t o = 0; o < outer; ++o) {
          double total = 0.0;
          for (std::size_t a = 0; a < len; ++a) {
            const double v = axis == 0 ? s.at(a, o) : s.at(o, a);
            CHECK(std::isfinite(v));
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            total += v;
          }
          CHECK(std::abs(total - 1.0) < 1e-12);
        }
      }
    }
  }

  TEST_CASE("softmax entries strictly positive for moderate logits") {
    std::mt19937_64 rng(4);
    Tensor s = ops::softmax(random_tensor({4, 6}, rng, 3.0), 1);
    for (double v : s.data()) CHECK(v > 0.0);
  }

  TEST_CASE("masked softmax zeroes masked entries") {
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    const std::vector<std::uint8_t> keep{0, 1, 1, 1, 0, 1};
    Tensor s = ops::softmax(x, 1, keep);
    CHECK(s.at(0, 0) == 0.0);
    CHECK(s.at(1, 1) == 0.0);
    CHECK(s.at(0, 1) + s.at(0, 2) == doctest::Approx(1.0));
    Tensor ls = ops::log_softmax(x, 1, keep);
    CHECK(ls.at(0, 0) == 0.0);
    CHECK(std::exp(ls.at(0, 2)) == doctest::Approx(s.at(0, 2)));
    const std::vector<std::uint8_t> none{0, 0, 0, 1, 1, 1};
    CHECK_THROWS_AS((void)ops::softmax(x, 1, none), InputError);
  }

  TEST_CASE("cosine similarity") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 10; ++i) {
      Tensor v = random_tensor({6}, rng);
      CHECK(ops::cosine_similarity(v, v).item() == doctest::Approx(1.0).epsilon(1e-14));
    }
    CHECK_THROWS_AS((void)ops::cosine_similarity(Tensor::zeros({3}), Tensor::ones({3})), InputError);
    CHECK_THROWS_AS((void)ops::l2_normalize_rows(Tensor::zeros({2, 3})), InputError);
  }

  TEST_CASE("slice_prefix") {
    Tensor x({5}, {3, 1, 4, 1, 5});
    Tensor y = ops::slice_prefix(x, 3);
    CHECK(std::vector<double>(y.data().begin(), y.data().end()) == std::vector<double>{3, 1, 4});
    CHECK_THROWS_AS((void)ops::slice_prefix(x, 0), InputError);
    CHECK_THROWS_AS((void)ops::slice_prefix(x, 6), InputError);

    std::mt19937_64 rng(6);
    Tensor m = random_tensor({3, 4}, rng);
    Tensor full = ops::slice_prefix(m, 4);
    CHECK(std::equal(full.data().begin(), full.data().end(), m.data().begin()));
  }

  TEST_CASE("slice_prefix backward touches only the prefix") {
    Tensor x({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::slice_prefix(x, 2)));
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 0, 0, 1, 1, 0, 0});
  }

  TEST_CASE("layer_norm rejects non-positive eps") {
    Tensor x = Tensor::ones({2, 3});
    CHECK_THROWS_AS((void)ops::layer_norm(x, Tensor::ones({3}), Tensor::zeros({3}), 0.0), InputError);
  }
}

TEST_SUITE("backward") {
  TEST_CASE("sum gives ones") {
    Tensor x = Tensor({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
  }

  TEST_CASE("sum of squares gives 2x") {
    Tensor x = Tensor({3}, {1, 2, 3}, true);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::sum(ops::mul(x, x)));
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{2, 4, 6});
  }

  TEST_CASE("gradients accumulate until zeroed") {
    Tensor x = Tensor({2}, {1, 2}, true);
    for (int i = 0; i < 2; ++i) {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(ops::sum(x));
    }
    CHECK(x.grad()[0] == 2.0);
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }

  TEST_CASE("composite matmul -> layer_norm -> softmax matches finite differences") {
    std::mt19937_64 rng(11);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor gain = random_tensor({5}, rng);
    Tensor bias = random_tensor({5}, rng);
    auto res = check_gradients(
        [&] { return weighted_sum(ops::softmax(ops::layer_norm(ops::matmul(x, w), gain, bias), 1)); },
        {x, w, gain, bias}, 1e-5, mse2d::testing::Stencil::two_point);
    INFO(res.worst);
    CHECK(res.max_rel_error < 1e-4);
  }

  TEST_CASE("errors: non-scalar loss, loss off the tape") {
    Tensor x = Tensor({2}, {1, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = ops::scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), TapeError);
    Tape other;
    Tensor loss = ops::sum(y);
    CHECK_THROWS_AS(other.backward(loss), TapeError);
    CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), TapeError);
  }

  TEST_CASE("no recording without a tape or without grad inputs") {
    Tensor x = Tensor({2}, {1, 2}, true);
    Tensor y = ops::sum(x);
    CHECK(y.impl()->tape == nullptr);
    Tape tape;
    TapeScope scope(tape);
    (void)ops::sum(Tensor({2}, {1, 2}));
    CHECK(tape.size() == 0);
  }

  TEST_CASE("tape is topologically ordered") {
    std::mt19937_64 rng(12);
    Tensor x = random_tensor({3, 3}, rng);
    x.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = ops::sum(ops::gelu(ops::matmul(x, ops::transpose(x))));
    for (std::size_t i = 0; i < tape.size(); ++i) {
      for (const auto& in : tape.nodes()[i].inputs) {
        if (in->tape == &tape) CHECK(in->node_index < i);
      }
    }
    tape.backward(loss);
  }

  TEST_CASE("backward is linear in the loss") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 5; ++trial) {
      Tensor x = random_tensor({3, 4}, rng);
      Tensor w = random_tensor({4, 4}, rng);
      x.set_requires_grad(true);
      const double alpha = 0.7, beta = -1.3;
      auto l1 = [&] { return weighted_sum(ops::gelu(ops::matmul(x, w)), 1); };
      auto l2 = [&] { return weighted_sum(ops::log_softmax(ops::matmul(x, w), 1), 2); };
      auto grad_of = [&](auto&& fn) {
        x.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        tape.backward(fn());
        return std::vector<double>(x.grad().begin(), x.grad().end());
      };
      const auto g1 = grad_of(l1);
      const auto g2 = grad_of(l2);
      const auto g = grad_of([&] { return ops::add(ops::scale(l1(), alpha), ops::scale(l2(), beta)); });
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - (alpha * g1[i] + beta * g2[i])) < 1e-10);
    }
  }
}

TEST_SUITE("finite differences per op") {
  TEST_CASE("every op passes the central-difference check") {
    for (const mse2d::testing::OpCase& c : mse2d::testing::op_cases()) {
      auto res = check_gradients(c.fn, c.inputs);
      INFO(c.name, ": ", res.worst);
      CHECK(res.max_rel_error < 1e-4);
    }
  }

  TEST_CASE("20 randomly composed graphs") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      mse2d::testing::RandomGraph g = mse2d::testing::make_random_graph(1000 + seed);
      auto res = check_gradients(std::cref(g), g.inputs);
      INFO("seed ", seed, ": ", res.worst);
      CHECK(res.max_rel_error < 1e-4);
    }
  }
}
