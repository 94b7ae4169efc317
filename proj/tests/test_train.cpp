#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "lcflow/errors.hpp"
#include "lcflow/train.hpp"
#include "oracles.hpp"

using namespace lcflow;

namespace {

Dataset small_blobs(std::size_t n, std::uint64_t seed) {
  BlobOptions o;
  o.n = n;
  o.seed = seed;
  return generate_blobs(o);
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.hidden_width = 16;
  return c;
}

// The unfactored identity flow maps x to the squeezed rearrangement of x.
FlowModel identity_flow(Layout l) {
  FlowModel m(l);
  m.add(CouplingLayer::checkerboard(l, false, 4, 4.0));
  return m;
}

}  // namespace

TEST_CASE("config defaults") {
  const TrainConfig c;
  CHECK(c.batch_size == 64);
  CHECK(c.learning_rate == 1e-3);
  CHECK(c.beta1 == 0.9);
  CHECK(c.beta2 == 0.999);
  CHECK(c.adam_epsilon == 1e-8);
  CHECK(c.weight_decay == 5e-5);
  CHECK(c.dequant_alpha == 0.05);
  CHECK(c.scales == 2);
  CHECK(c.couplings_per_scale == 2);
  CHECK(c.hidden_width == 64);
  CHECK(c.effective_pretrain_epochs() == 9);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config text round trip and errors") {
  TrainConfig c;
  c.set("epochs", "7");
  c.set("pretrain_epochs", "2");
  c.set("learning_rate", "0.0025");
  c.set("dequant_alpha", "0.01");
  c.set("seed", "18446744073709551615");
  c.set("hidden_width", " 12 ");
  const TrainConfig back = TrainConfig::parse("# comment\n\n" + c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.pretrain_epochs == std::optional<std::size_t>(2));
  CHECK(back.seed == 18446744073709551615ULL);
  CHECK(back.hidden_width == 12);
  CHECK(TrainConfig::parse("pretrain_epochs=auto\nepochs=10\n").effective_pretrain_epochs() == 3);

  CHECK_THROWS_AS(c.set("nope", "1"), InvalidArgumentError);
  CHECK_THROWS_AS(c.set("epochs", "ten"), InvalidArgumentError);
  CHECK_THROWS_AS(c.set("epochs", "-1"), InvalidArgumentError);
  CHECK_THROWS_AS(TrainConfig::parse("dequant_alpha=0.5\n"), InvalidArgumentError);
  CHECK_THROWS_AS(TrainConfig::parse("batch_size=0\n"), InvalidArgumentError);
  CHECK_THROWS_AS(TrainConfig::parse("epochs\n"), InvalidArgumentError);
}

TEST_CASE("preprocess of zero without noise") {
  const auto p = preprocess(Tensor({1, 1}, {0.0}), 0.05, nullptr);
  CHECK(p.x[0] == doctest::Approx(std::log(0.05 / 0.95)).epsilon(1e-15));
  CHECK(p.x[0] == doctest::Approx(-2.9444389791664403).epsilon(1e-14));
}

TEST_CASE("postprocess undoes preprocess") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pix(0, 255);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor x({10, 16}), noise({10, 16});
  for (double& v : x.data()) v = pix(rng);
  for (double& v : noise.data()) v = unit(rng);
  const auto p = preprocess(x, 0.05, noise);
  const Tensor back = postprocess(p.x, 0.05);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(std::abs(back[i] - noise[i] - x[i]) < 1e-9);
    CHECK(std::floor(back[i] - noise[i] + 0.5) == x[i]);
  }
}

TEST_CASE("preprocess correction matches the numerical derivative") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> val(0.0, 255.999), alpha_d(0.01, 0.2);
  // Long double keeps the difference quotient's rounding well below 1e-8.
  const long double h = 1e-5L;
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const double v = val(rng), alpha = alpha_d(rng);
    const double px = std::floor(v), e = v - px;
    const auto p = preprocess(Tensor({1, 1}, {px}), alpha, Tensor({1, 1}, {e}));
    auto g = [&](long double t) {
      const long double u = alpha + (1 - alpha) * t / 256.0L;
      return std::log(u / (1 - u));
    };
    const double fd = static_cast<double>((g(v + h) - g(v - h)) / (2 * h));
    worst = std::max(worst, std::abs(std::exp(p.log_jacobian[0]) - fd) / fd);
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("preprocess rejects out-of-range pixels") {
  CHECK_THROWS_AS(preprocess(Tensor({1, 2}, {0.0, 256.0}), 0.05, nullptr), InvalidArgumentError);
  CHECK_THROWS_AS(preprocess(Tensor({1, 2}, {-1.0, 3.0}), 0.05, nullptr), InvalidArgumentError);
  CHECK_THROWS_AS(preprocess(Tensor({1, 1}, {3.0}), 0.6, nullptr), InvalidArgumentError);
}

TEST_CASE("identity flow on standard normal data gives the Gaussian entropy") {
  std::mt19937_64 rng(3);
  const Tensor x = oracle::normal_tensor({10000, 16}, rng);
  const double bpd = evaluate_bpd_continuous(identity_flow(Layout{4, 1}), x);
  CHECK(std::abs(bpd - 0.5 * std::log2(2 * std::numbers::pi * std::numbers::e)) < 0.05);
}

TEST_CASE("bits/dim decreases as likelihood increases") {
  std::mt19937_64 rng(4);
  const Tensor x = oracle::normal_tensor({100, 16}, rng);
  const FlowModel m = identity_flow(Layout{4, 1});
  const Tensor shrunk = elementwise(BinaryOp::mul, x, 0.5);  // closer to the mode, higher density
  CHECK(evaluate_bpd_continuous(m, shrunk) < evaluate_bpd_continuous(m, x));
}

TEST_CASE("evaluation is invariant to the chunk size") {
  const Dataset d = small_blobs(100, 5);
  std::mt19937_64 rng(5);
  FlowModel m = oracle::random_model(rng, Layout{8, 1}, 2, true, 8, 0.2);
  const double a = evaluate_bpd(m, d.images, 0.05, 1, 512);
  const double b = evaluate_bpd(m, d.images, 0.05, 1, 7);
  const double c = evaluate_bpd(m, d.images, 0.05, 1, 1);
  CHECK(std::abs(a - b) < 1e-12);
  CHECK(std::abs(a - c) < 1e-12);
  CHECK(std::isfinite(a));
  CHECK(a > 0.0);
}

TEST_CASE("zero-epoch pretrain returns the identity model with zero maps") {
  const Dataset d = small_blobs(60, 6);
  TrainConfig c = quick_config(5);
  c.pretrain_epochs = 0;
  const auto r = pretrain(c, d);
  CHECK(r.model.factor_count() == 0);
  CHECK(r.metrics.epochs.size() == 1);
  REQUIRE(r.logdet_maps.size() == 2);
  for (const auto& m : r.logdet_maps) {
    CHECK(m.shape() == Shape{8, 8, 1});
    CHECK(m == Tensor({8, 8, 1}, 0.0));
  }
  std::mt19937_64 rng(6);
  const Tensor x = oracle::normal_tensor({3, 64}, rng);
  const auto z = flow_forward(r.model, x).z_parts;
  REQUIRE(z.size() == 1);
  std::vector<double> sorted_x(x.data().begin(), x.data().end()), sorted_z(z[0].data().begin(), z[0].data().end());
  std::sort(sorted_x.begin(), sorted_x.end());
  std::sort(sorted_z.begin(), sorted_z.end());
  CHECK(sorted_x == sorted_z);
}

TEST_CASE("loss gradient at initialization matches finite differences") {
  std::mt19937_64 rng(7);
  Architecture arch;
  arch.input = Layout{4, 1};
  arch.scales = 1;
  arch.hidden = 6;
  std::vector<FactorSpec> specs = derive_plan_baseline(Strategy::static_realnvp, arch.input, 1, 0).factor_specs();
  FlowModel m = build_flow(arch, specs, rng);
  const Tensor pixels({4, 4, 4, 1}, 0.0);
  Tensor img(pixels.shape());
  std::uniform_int_distribution<int> pix(0, 255);
  for (double& v : img.data()) v = pix(rng);
  const Tensor x = preprocess(img, 0.05, &rng).x;
  auto params = m.parameters();
  // Likelihood part; the hidden layers have exactly zero gradient here.
  CHECK(grad_check([&] { return training_loss(m, x, 0.0).loss; }, params) < 1e-5);
  // Weight decay part against its closed form 2 * wd * w.
  const double wd = 5e-5;
  const LossTerms with = training_loss(m, x, wd);
  backward(with.loss);
  std::vector<Tensor> g_with;
  for (auto* p : params) g_with.push_back(p->grad);
  backward(training_loss(m, x, 0.0).loss);
  std::size_t k = 0;
  double worst = 0.0;
  for (const auto& layer : m.layers()) {
    const auto* c = std::get_if<CouplingLayer>(&layer);
    if (!c) continue;
    for (const DenseNet* net : {&c->scale_net(), &c->shift_net()}) {
      // Parameters are listed weights-then-bias per dense layer.
      for (std::size_t l = 0; l < net->weights().size(); ++l) {
        const Parameter& w = net->weights()[l];
        for (std::size_t i = 0; i < w.value.numel(); ++i) {
          worst = std::max(worst, std::abs(g_with[k][i] - params[k]->grad[i] - 2 * wd * w.value[i]));
        }
        k += 2;
      }
    }
  }
  CHECK(k == params.size());
  CHECK(worst < 1e-15);
}

TEST_CASE("pretraining reduces validation bits/dim") {
  const Dataset d = small_blobs(1000, 8);
  TrainConfig c;
  c.epochs = 20;
  c.pretrain_epochs = 20;
  const auto r = pretrain(c, d);
  REQUIRE(r.metrics.epochs.size() == 21);
  MESSAGE("epoch 0 " << r.metrics.epochs.front().valid_bpd << " epoch 20 " << r.metrics.final_valid_bpd());
  CHECK(r.metrics.final_valid_bpd() < r.metrics.epochs.front().valid_bpd);
  for (const auto& e : r.metrics.epochs) {
    CHECK(std::isfinite(e.valid_bpd));
    CHECK(e.valid_bpd > 0.0);
  }
}

TEST_CASE("training is deterministic in the seed") {
  const Dataset d = small_blobs(120, 9);
  const TrainConfig c = quick_config(2);
  const auto plan = derive_plan_baseline(Strategy::random, d.layout(), 2, 3);
  const auto a = train_with_plan(c, d, plan);
  const auto b = train_with_plan(c, d, plan);
  CHECK(metrics_csv(a.metrics, false) == metrics_csv(b.metrics, false));
  std::stringstream sa, sb;
  a.model.save(sa);
  b.model.save(sb);
  CHECK(sa.str() == sb.str());
  TrainConfig other = c;
  other.seed = 1;
  CHECK(metrics_csv(train_with_plan(other, d, plan).metrics, false) != metrics_csv(a.metrics, false));
}

TEST_CASE("training never changes the plan's index lists") {
  const Dataset d = small_blobs(80, 10);
  const auto plan = derive_plan_baseline(Strategy::random, d.layout(), 2, 4);
  const auto r = train_with_plan(quick_config(1), d, plan);
  std::size_t k = 0;
  for (const auto& layer : r.model.layers()) {
    if (const auto* f = std::get_if<FactorLayer>(&layer)) {
      CHECK(f->keep() == plan.scales[k].keep);
      CHECK(f->factor() == plan.scales[k].factor);
      ++k;
    }
  }
  CHECK(k == 2);
  CHECK(r.metrics.plan == "random");
}

TEST_CASE("plan/layout mismatch") {
  const Dataset d = small_blobs(40, 11);
  const auto wrong_layout = derive_plan_baseline(Strategy::static_realnvp, Layout{4, 1}, 2, 0);
  CHECK_THROWS_AS(train_with_plan(quick_config(1), d, wrong_layout), ShapeError);
  const auto wrong_scales = derive_plan_baseline(Strategy::static_realnvp, Layout{8, 1}, 1, 0);
  CHECK_THROWS_AS(train_with_plan(quick_config(1), d, wrong_scales), ShapeError);
}

TEST_CASE("constant images reach very low bits/dim with a static plan") {
  const Dataset d = constant_images(400, Layout{8, 1}, 128.0);
  TrainConfig c;
  c.epochs = 15;
  const auto r = train_with_plan(c, d, derive_plan_baseline(Strategy::static_realnvp, d.layout(), 2, 0));
  MESSAGE("constant images: epoch 0 " << r.metrics.epochs.front().valid_bpd << " final " << r.metrics.final_valid_bpd());
  // The floor is 0: the dequantized data is uniform on unit cells.
  CHECK(r.metrics.final_valid_bpd() < 2.0);
  CHECK(r.metrics.final_valid_bpd() < r.metrics.epochs.front().valid_bpd - 5.0);
}

TEST_CASE("metrics csv") {
  RunMetrics m;
  m.epochs.push_back({0, 8.5, 8.25, 0.5});
  m.epochs.push_back({1, 7.5, 7.25, 1.5});
  CHECK(metrics_csv(m, false) ==
        "epoch,split,bits_per_dim,seconds\n0,train,8.5,\n0,valid,8.25,\n1,train,7.5,\n1,valid,7.25,\n");
  CHECK(metrics_csv(m, true).find("1,valid,7.25,1.5\n") != std::string::npos);
}

TEST_CASE("identity flow samples are standard normal") {
  std::mt19937_64 rng(12);
  const Tensor s = sample_model_space(identity_flow(Layout{2, 1}), 2500, rng);
  CHECK(s.shape() == Shape{2500, 4});
  CHECK(oracle::ks_normal_pvalue(s.vec()) > 0.01);
}

TEST_CASE("samples are seeded and shaped like the input") {
  std::mt19937_64 mrng(13);
  const FlowModel m = oracle::random_model(mrng, Layout{8, 1}, 2, true, 8, 0.2);
  std::mt19937_64 a(1), b(1);
  const Tensor sa = sample(m, 5, 0.05, a), sb = sample(m, 5, 0.05, b);
  CHECK(sa == sb);
  CHECK(sa.shape() == Shape{5, 8, 8, 1});
  for (double v : sa.data()) CHECK((v >= 0.0 && v < 256.0));
}

TEST_CASE("interpolation endpoints, midpoint and continuity") {
  std::mt19937_64 rng(14);
  const FlowModel m = oracle::random_model(rng, Layout{8, 1}, 2, true, 8, 0.2);
  const Dataset d = small_blobs(4, 15);
  const Tensor a = slice(d.images, 0, 0, 1), b = slice(d.images, 0, 1, 2);
  const auto frames = interpolate(m, a, b, 9, 0.05);
  REQUIRE(frames.size() == 9);
  double err = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    err = std::max(err, std::abs(frames.front()[i] - a[i]));
    err = std::max(err, std::abs(frames.back()[i] - b[i]));
  }
  CHECK(err < 1e-6);
  const auto same = interpolate(m, a, a, 3, 0.05);
  for (std::size_t i = 0; i < 64; ++i) CHECK(std::abs(same[1][i] - a[i]) < 1e-6);
  // Halving the step roughly halves the largest frame-to-frame jump.
  auto max_jump = [](const std::vector<Tensor>& f) {
    double j = 0.0;
    for (std::size_t k = 1; k < f.size(); ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < f[k].numel(); ++i) s += (f[k][i] - f[k - 1][i]) * (f[k][i] - f[k - 1][i]);
      j = std::max(j, std::sqrt(s));
    }
    return j;
  };
  const double coarse = max_jump(interpolate(m, a, b, 17, 0.05));
  const double fine = max_jump(interpolate(m, a, b, 33, 0.05));
  CHECK(fine < 0.75 * coarse);
  CHECK_THROWS_AS(interpolate(m, a, b, 1, 0.05), InvalidArgumentError);
}
