#include <doctest.h>

#include <cmath>
#include <set>

#include "fixtures.hpp"
#include "mse2d/corpus.hpp"
#include "mse2d/errors.hpp"
#include "mse2d/ops.hpp"
#include "mse2d/optimizer.hpp"
#include "mse2d/trainer.hpp"
#include "stats.hpp"

using namespace mse2d;
using mse2d::testing::same_parameters;

namespace {

EncoderConfig small_config(std::size_t layers = 2, std::size_t hidden = 8) {
  EncoderConfig c;
  c.num_layers = layers;
  c.hidden_dim = hidden;
  c.num_heads = 2;
  c.ffn_dim = 16;
  c.vocab_size = 97;
  c.max_seq_len = 12;
  return c;
}

TrainBatch pair_batch(const EncoderConfig& c, std::size_t pairs) {
  std::vector<TextPair> data;
  const char* words[] = {"red apple pie", "green apple tart", "blue sky above", "grey sky below",
                         "fast car race", "slow car crawl",  "old dog sleeps", "young dog runs"};
  for (std::size_t i = 0; i < pairs; ++i) data.push_back({words[(2 * i) % 8], words[(2 * i + 1) % 8]});
  return make_batch(std::span<const TextPair>(data), Tokenizer(c));
}

std::vector<std::vector<double>> grads_of(const EncoderModel& m) {
  std::vector<std::vector<double>> out;
  for (const Tensor& p : m.parameters()) out.emplace_back(p.grad().begin(), p.grad().end());
  return out;
}

double max_abs_diff(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  }
  return worst;
}

// Gradients of whatever scalar `build` returns, on a fresh tape.
template <typename Fn>
std::vector<std::vector<double>> gradients(EncoderModel& m, Fn&& build) {
  m.zero_grad();
  Tape tape;
  TapeScope scope(tape);
  Tensor loss = build();
  tape.backward(loss);
  return grads_of(m);
}

std::vector<Tensor> states_of(const EncoderModel& m, const TrainBatch& b) {
  return forward_layers(m, pad_batch(b.sequences, m.config()), m.num_layers());
}

}  // namespace

TEST_SUITE("dims") {
  TEST_CASE("default sets") {
    CHECK(default_dim_set(768).dims == std::vector<std::size_t>{8, 16, 32, 64, 128, 256, 512});
    CHECK(default_dim_set(64).dims == std::vector<std::size_t>{8, 16, 32});
    CHECK_FALSE(default_dim_set(64).warning);
    DimSet small = default_dim_set(4);
    CHECK(small.dims == std::vector<std::size_t>{2});
    CHECK(small.warning);
  }

  TEST_CASE("D = 8 has no power below it and falls back to D/2") {
    DimSet s = default_dim_set(8);
    CHECK(s.dims == std::vector<std::size_t>{4});
    CHECK(s.warning);
  }

  TEST_CASE("config validation") {
    EncoderConfig enc = small_config();
    TrainConfig t;
    t.dims = {4, 2};
    CHECK_THROWS_AS(t.validate(enc), ConfigError);
    t.dims = {8};
    CHECK_THROWS_AS(t.validate(enc), ConfigError);
    t.dims = {2, 4};
    CHECK_NOTHROW(t.validate(enc));
    t.lambda = LossWeights{0, 0, 0, 0, 0};
    CHECK_THROWS_AS(t.validate(enc), ConfigError);
    t.lambda = LossWeights{};
    t.lambda.align = -1;
    CHECK_THROWS_AS(t.validate(enc), ConfigError);
  }
}

TEST_SUITE("sampling") {
  TEST_CASE("chi-square helper reproduces tabulated critical values") {
    CHECK(mse2d::testing::chi_square_p(23.209, 10) == doctest::Approx(0.01).epsilon(1e-3));
    CHECK(mse2d::testing::chi_square_p(9.210, 2) == doctest::Approx(0.01).epsilon(1e-3));
    CHECK(mse2d::testing::chi_square_p(3.841, 1) == doctest::Approx(0.05).epsilon(1e-3));
    CHECK(mse2d::testing::chi_square_p(0.0, 5) == 1.0);
  }

  TEST_CASE("layer draws for N = 2 are always 1") {
    Rng rng = make_stream(42, "sampling");
    for (int i = 0; i < 1000; ++i) CHECK(sample_layer(rng, 2) == 1);
    CHECK_THROWS_AS(sample_layer(rng, 1), ConfigError);
  }

  TEST_CASE("layer draws for N = 12 are uniform on [1, 11]") {
    Rng rng = make_stream(42, "sampling");
    std::vector<std::size_t> counts(11, 0);
    for (int i = 0; i < 100000; ++i) {
      const std::size_t n = sample_layer(rng, 12);
      REQUIRE(n >= 1);
      REQUIRE(n <= 11);
      ++counts[n - 1];
    }
    auto chi = mse2d::testing::uniform_chi_square(counts);
    CHECK(chi.p_value > 0.01);
    for (std::size_t c : counts) CHECK(std::abs(double(c) - 100000.0 / 11) < 3 * std::sqrt(100000.0 / 11));
  }

  TEST_CASE("dim draws are uniform over the set") {
    Rng rng = make_stream(42, "sampling");
    const std::vector<std::size_t> dims{8, 16, 32};
    std::vector<std::size_t> counts(3, 0);
    for (int i = 0; i < 100000; ++i) {
      const std::size_t d = sample_dim(rng, dims);
      REQUIRE((d == 8 || d == 16 || d == 32));
      ++counts[d == 8 ? 0 : d == 16 ? 1 : 2];
    }
    CHECK(mse2d::testing::uniform_chi_square(counts).p_value > 0.01);
    const std::vector<std::size_t> single{8};
    CHECK(sample_dim(rng, single) == 8);
    CHECK_THROWS_AS(sample_dim(rng, std::vector<std::size_t>{}), ConfigError);
  }
}

TEST_SUITE("optimizer") {
  TEST_CASE("first AdamW step moves by lr * sign(g) plus decoupled decay") {
    Tensor p({2}, {1.0, -2.0}, true);
    AdamW opt({p}, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.01});
    p.mutable_grad()[0] = 3.0;
    p.mutable_grad()[1] = -0.5;
    opt.step();
    // m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps).
    CHECK(p.at(0) == doctest::Approx(1.0 - 0.1 * 0.01 * 1.0 - 0.1 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
    CHECK(p.at(1) == doctest::Approx(-2.0 - 0.1 * 0.01 * -2.0 + 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
    CHECK(opt.steps_taken() == 1);
  }
}

TEST_SUITE("joint loss") {
  TEST_CASE("joint equals the independently recomputed components (2 pairs, N=2, D=8)") {
    EncoderModel m = init_model(small_config());
    TrainBatch batch = pair_batch(m.config(), 2);
    TrainConfig cfg = TrainConfig{}.resolved(m.config());
    const std::vector<std::size_t> d{4};
    NoGradScope no_grad;
    StepLoss loss = compute_step_loss(m, batch, cfg, 1, d);

    auto states = states_of(m, batch);
    const Tensor& last = states[1];
    const Tensor& shallow = states[0];
    const double l_nd_full = contrastive_loss(last, batch.info).item();
    const double l_sd_full = contrastive_loss(shallow, batch.info).item();
    const double l_nd = contrastive_loss(ops::slice_prefix(last, 4), batch.info).item();
    const double l_sd = contrastive_loss(ops::slice_prefix(shallow, 4), batch.info).item();
    const double align = kl_alignment_loss(shallow, last).item() +
                         kl_alignment_loss(ops::slice_prefix(shallow, 4), ops::slice_prefix(last, 4)).item();
    CHECK(std::abs(loss.components.last_full - l_nd_full) < 1e-10);
    CHECK(std::abs(loss.components.shallow_full - l_sd_full) < 1e-10);
    CHECK(std::abs(loss.components.last_prefix - l_nd) < 1e-10);
    CHECK(std::abs(loss.components.shallow_prefix - l_sd) < 1e-10);
    CHECK(std::abs(loss.components.align - align) < 1e-10);
    CHECK(std::abs(loss.joint.item() - (l_nd_full + l_sd_full + l_nd + l_sd + align)) < 1e-10);
  }

  TEST_CASE("non-unit lambdas weight each component") {
    EncoderModel m = init_model(small_config(3, 16));
    TrainBatch batch = pair_batch(m.config(), 4);
    TrainConfig cfg = TrainConfig{}.resolved(m.config());
    cfg.lambda = LossWeights{0.3, 1.7, 0.25, 2.0, 0.6};
    const std::vector<std::size_t> d{8};
    NoGradScope no_grad;
    StepLoss loss = compute_step_loss(m, batch, cfg, 2, d);
    const LossComponents& c = loss.components;
    const double expected =
        0.3 * c.last_full + 1.7 * c.shallow_full + 0.25 * c.last_prefix + 2.0 * c.shallow_prefix + 0.6 * c.align;
    CHECK(std::abs(loss.joint.item() - expected) < 1e-10);
  }

  TEST_CASE("full sweep averages the prefix terms over every dim") {
    EncoderModel m = init_model(small_config(2, 16));
    TrainBatch batch = pair_batch(m.config(), 3);
    TrainConfig cfg = TrainConfig{}.resolved(m.config());
    cfg.dims = {2, 4, 8};
    cfg.dim_mode = DimMode::full_sweep;
    NoGradScope no_grad;
    StepLoss loss = compute_step_loss(m, batch, cfg, 1, cfg.dims);
    auto states = states_of(m, batch);
    double expected = 0;
    for (std::size_t d : cfg.dims) expected += contrastive_loss(ops::slice_prefix(states[1], d), batch.info).item();
    CHECK(std::abs(loss.components.last_prefix - expected / 3) < 1e-10);
  }

  TEST_CASE("a zero lambda matches a build that omits the term") {
    EncoderModel m = init_model(small_config(3, 16));
    TrainBatch batch = pair_batch(m.config(), 4);
    const std::vector<std::size_t> d{8};
    const double tau = kDefaultTau;

    TrainConfig cfg = TrainConfig{}.resolved(m.config());
    cfg.lambda.align = 0.0;
    auto with_zero = gradients(m, [&] { return compute_step_loss(m, batch, cfg, 2, d).joint; });
    auto omitted = gradients(m, [&] {
      auto s = states_of(m, batch);
      Tensor j = contrastive_loss(s[2], batch.info, tau);
      j = ops::add(j, contrastive_loss(s[1], batch.info, tau));
      j = ops::add(j, contrastive_loss(ops::slice_prefix(s[2], 8), batch.info, tau));
      j = ops::add(j, contrastive_loss(ops::slice_prefix(s[1], 8), batch.info, tau));
      return j;
    });
    CHECK(max_abs_diff(with_zero, omitted) < 1e-12);

    TrainConfig no_shallow = TrainConfig{}.resolved(m.config());
    no_shallow.lambda.shallow_full = 0.0;
    no_shallow.lambda.shallow_prefix = 0.0;
    auto zeroed = gradients(m, [&] { return compute_step_loss(m, batch, no_shallow, 1, d).joint; });
    auto reference = gradients(m, [&] {
      auto s = states_of(m, batch);
      Tensor j = ops::add(contrastive_loss(s[2], batch.info, tau),
                          contrastive_loss(ops::slice_prefix(s[2], 8), batch.info, tau));
      return ops::add(j, ops::add(kl_alignment_loss(s[0], s[2], tau),
                                  kl_alignment_loss(ops::slice_prefix(s[0], 8), ops::slice_prefix(s[2], 8), tau)));
    });
    CHECK(max_abs_diff(zeroed, reference) < 1e-12);
  }

  TEST_CASE("zero-weight terms are never constructed") {
    EncoderModel m = init_model(small_config());
    TrainBatch batch = pair_batch(m.config(), 2);
    TrainConfig cfg = TrainConfig{}.resolved(m.config());
    cfg.plain = true;
    NoGradScope no_grad;
    StepLoss loss = compute_step_loss(m, batch, cfg, 0, {});
    CHECK(loss.last_full.defined());
    CHECK_FALSE(loss.shallow_full.defined());
    CHECK_FALSE(loss.last_prefix.defined());
    CHECK_FALSE(loss.shallow_prefix.defined());
    CHECK_FALSE(loss.align.defined());
    CHECK(loss.joint.item() == loss.last_full.item());
  }

  TEST_CASE("alignment sends no gradient into the last layer") {
    EncoderModel m = init_model(small_config(3, 16));
    TrainBatch batch = pair_batch(m.config(), 4);
    TrainConfig cfg = TrainConfig{}.resolved(m.config());
    cfg.lambda = LossWeights{0, 0, 0, 0, 1};
    const std::vector<std::size_t> d{8};
    for (std::size_t n : {1, 2}) {
      gradients(m, [&] { return compute_step_loss(m, batch, cfg, n, d).joint; });
      const LayerWeights& top = m.layers().back();
      for (const Tensor* t : {&top.wq, &top.wk, &top.wv, &top.wo, &top.w1, &top.w2, &top.out_norm_gain,
                              &top.out_norm_bias, &top.attn_norm_gain, &top.ffn_norm_bias}) {
        for (double g : t->grad()) CHECK(g == 0.0);
      }
      double shallow_norm = 0;
      for (double g : m.layers().front().wq.grad()) shallow_norm += g * g;
      CHECK(shallow_norm > 0.0);
    }
  }

  TEST_CASE("MRL-only gradients equal a baseline MRL loss on the last layer") {
    EncoderModel m = init_model(small_config(3, 16));
    TrainBatch batch = pair_batch(m.config(), 4);
    TrainConfig cfg = TrainConfig{}.resolved(m.config());
    cfg.mrl_only = true;
    const std::vector<std::size_t> d{4};
    auto mrl = gradients(m, [&] { return compute_step_loss(m, batch, cfg, 0, d).joint; });
    auto baseline = gradients(m, [&] {
      auto s = states_of(m, batch);
      return ops::add(contrastive_loss(s[2], batch.info), contrastive_loss(ops::slice_prefix(s[2], 4), batch.info));
    });
    CHECK(max_abs_diff(mrl, baseline) < 1e-12);
  }

  TEST_CASE("ablation flags zero the documented weights") {
    TrainConfig cfg;
    cfg.disable_last_layer = true;
    CHECK(cfg.effective_weights() == LossWeights{0, 1, 0, 1, 1});
    cfg = TrainConfig{};
    cfg.disable_align = true;
    CHECK(cfg.effective_weights() == LossWeights{1, 1, 1, 1, 0});
    cfg = TrainConfig{};
    cfg.mrl_only = true;
    CHECK(cfg.effective_weights() == LossWeights{1, 0, 1, 0, 0});
    cfg = TrainConfig{};
    cfg.plain = true;
    CHECK(cfg.effective_weights() == LossWeights{1, 0, 0, 0, 0});
  }
}

TEST_SUITE("trainer") {
  TEST_CASE("reports decompose and log their samples") {
    EncoderModel m = init_model(small_config(4, 16));
    Trainer trainer(m, TrainConfig{});
    TrainBatch batch = pair_batch(m.config(), 4);
    std::set<std::size_t> layers;
    for (int i = 0; i < 20; ++i) {
      TrainStepReport r = trainer.step(batch);
      const LossComponents& c = r.components;
      CHECK(std::abs(r.joint - (c.last_full + c.shallow_full + c.last_prefix + c.shallow_prefix + c.align)) < 1e-10);
      CHECK(r.step == std::size_t(i));
      REQUIRE(r.dim);
      CHECK((*r.dim == 8));
      layers.insert(r.layer);
    }
    CHECK(layers == std::set<std::size_t>{1, 2, 3});
  }

  TEST_CASE("sampled n and d are reproducible from the seed") {
    auto run = [](std::uint64_t seed) {
      EncoderModel m = init_model(small_config(4, 32));
      TrainConfig cfg;
      cfg.seed = seed;
      Trainer trainer(m, cfg);
      TrainBatch batch = pair_batch(m.config(), 2);
      std::vector<std::pair<std::size_t, std::size_t>> draws;
      for (int i = 0; i < 8; ++i) {
        auto r = trainer.step(batch);
        draws.emplace_back(r.layer, *r.dim);
      }
      return draws;
    };
    CHECK(run(7) == run(7));
    CHECK(run(7) != run(8));
  }

  TEST_CASE("plain mode trains bit-identically to a last-layer-only loop") {
    EncoderModel a = init_model(small_config(3, 16));
    EncoderModel b = a.clone();
    TrainBatch batch = pair_batch(a.config(), 4);
    TrainConfig cfg;
    cfg.plain = true;
    Trainer trainer(a, cfg);
    AdamW opt(b.parameters(), AdamWOptions{cfg.learning_rate, 0.9, 0.999, 1e-8, cfg.weight_decay});
    for (int i = 0; i < 5; ++i) {
      TrainStepReport r = trainer.step(batch);
      CHECK(r.joint == r.components.last_full);
      CHECK(r.components.align == 0.0);
      CHECK(r.layer == 0);
      CHECK_FALSE(r.dim);
      Tape tape;
      TapeScope scope(tape);
      Tensor loss = contrastive_loss(states_of(b, batch).back(), batch.info);
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
    }
    CHECK(same_parameters(a, b));
  }

  TEST_CASE("disable_align leaves the alignment field at zero") {
    EncoderModel m = init_model(small_config(3, 16));
    TrainConfig cfg;
    cfg.disable_align = true;
    Trainer trainer(m, cfg);
    TrainBatch batch = pair_batch(m.config(), 4);
    for (int i = 0; i < 5; ++i) {
      TrainStepReport r = trainer.step(batch);
      CHECK(r.components.align == 0.0);
      const LossComponents& c = r.components;
      CHECK(std::abs(r.joint - (c.last_full + c.shallow_full + c.last_prefix + c.shallow_prefix)) < 1e-10);
    }
  }

  TEST_CASE("non-finite loss aborts with the component breakdown") {
    EncoderModel m = init_model(small_config());
    const EncoderModel before = m.clone();
    TrainConfig cfg;
    cfg.tau = 1e-320;
    Trainer trainer(m, cfg);
    try {
      trainer.step(pair_batch(m.config(), 2));
      FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
      CHECK_FALSE(std::isfinite(e.report().joint));
      CHECK(std::string(e.what()).find("L_N_D=") != std::string::npos);
      CHECK(std::string(e.what()).find("L_align=") != std::string::npos);
    }
    CHECK(same_parameters(m, before));
    CHECK(trainer.steps_taken() == 0);
  }
}

TEST_SUITE("train") {
  SyntheticCorpusSpec small_corpus() {
    SyntheticCorpusSpec s;
    s.num_clusters = 4;
    s.pairs_per_cluster = 24;
    s.eval_pairs_per_cluster = 4;
    return s;
  }

  TEST_CASE("learning-rate constants") {
    CHECK(kFineTuneLearningRate == 5e-5);
    CHECK(kScratchLearningRate == 1e-3);
    CHECK(TrainConfig{}.learning_rate == kScratchLearningRate);
  }

  TEST_CASE("same seed gives identical final weights and logs") {
    auto corpus = generate_synthetic_corpus(small_corpus());
    EncoderModel a = init_model(small_config(3, 16));
    EncoderModel b = init_model(small_config(3, 16));
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 16;
    auto ra = train(a, std::span<const TextPair>(corpus.train), cfg);
    auto rb = train(b, std::span<const TextPair>(corpus.train), cfg);
    CHECK(same_parameters(a, b));
    REQUIRE(ra.size() == rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i) CHECK(ra[i].joint == rb[i].joint);
  }

  TEST_CASE("joint loss falls over training on the cluster corpus") {
    auto corpus = generate_synthetic_corpus(small_corpus());
    EncoderModel m = init_model(small_config(3, 16));
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.epochs = 4;
    std::vector<double> joints;
    std::size_t checkpoints = 0;
    TrainCallbacks cb;
    cb.on_step = [&](const TrainStepReport& r) { joints.push_back(r.joint); };
    cb.on_checkpoint = [&](const EncoderModel&, std::size_t) { ++checkpoints; };
    cfg.checkpoint_every = 10;
    auto reports = train(m, std::span<const TextPair>(corpus.train), cfg, cb);
    REQUIRE(reports.size() == 48);
    REQUIRE(joints.size() == 48);
    const std::size_t k = joints.size() / 10;
    double first = 0, last = 0;
    for (std::size_t i = 0; i < k; ++i) {
      first += joints[i];
      last += joints[joints.size() - 1 - i];
    }
    CHECK(last < first);
    CHECK(checkpoints == 48 / 10 + 1);
  }

  TEST_CASE("triplet and scored-pair datasets train") {
    EncoderModel m = init_model(small_config(2, 8));
    std::vector<TextTriplet> triplets{{"a b", "a c", "x y"}, {"d e", "d f", "x z"}, {"g h", "g i", "y z"}};
    TrainConfig cfg;
    cfg.epochs = 1;
    auto r = train(m, std::span<const TextTriplet>(triplets), cfg);
    CHECK(r.size() == 1);
    std::vector<ScoredPair> scored{{"a b", "a c", 4.0}, {"d e", "x y", 1.0}, {"g h", "g i", 5.0}};
    auto r2 = train(m, std::span<const ScoredPair>(scored), cfg, {}, 5.0);
    CHECK(r2.size() == 1);
    CHECK(std::isfinite(r2.front().joint));
  }

  TEST_CASE("empty or too-small datasets are rejected") {
    EncoderModel m = init_model(small_config());
    std::vector<TextPair> none;
    CHECK_THROWS_AS(train(m, std::span<const TextPair>(none), TrainConfig{}), InputError);
    std::vector<TextPair> one{{"a", "b"}};
    CHECK_THROWS_AS(train(m, std::span<const TextPair>(one), TrainConfig{}), InputError);
  }
}
