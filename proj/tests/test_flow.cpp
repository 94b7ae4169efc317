#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "lcflow/errors.hpp"
#include "lcflow/flow.hpp"
#include "oracles.hpp"

using namespace lcflow;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.numel() == b.numel());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

FlowModel single(const CouplingLayer& c) {
  FlowModel m(c.layout());
  m.add(c);
  return m;
}

}  // namespace

TEST_CASE("identity-initialized coupling") {
  std::mt19937_64 rng(1);
  CouplingLayer c = CouplingLayer::checkerboard(Layout{4, 1}, false, 8, 4.0);
  c.scale_net().init(rng);
  c.shift_net().init(rng);
  const Tensor x = oracle::normal_tensor({5, 16}, rng);
  const auto [y, ld] = c.forward(x);
  CHECK(y == x);
  CHECK(ld == Tensor({5, 16}, 0.0));
  CHECK(c.inverse(x) == x);
}

TEST_CASE("constant-net coupling, hand-computed") {
  const CouplingLayer c = oracle::constant_coupling(Layout{1, 2}, {1, 0}, std::log(2.0), 1.0);
  const auto [y, ld] = c.forward(Tensor({1, 2}, {5.0, 3.0}));
  CHECK(y[0] == 5.0);
  CHECK(y[1] == doctest::Approx(7.0).epsilon(1e-14));
  CHECK(ld[0] == 0.0);
  CHECK(ld[1] == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  const Tensor x = c.inverse(Tensor({1, 2}, {5.0, 7.0}));
  CHECK(x[0] == 5.0);
  CHECK(x[1] == doctest::Approx(3.0).epsilon(1e-14));
}

TEST_CASE("mask validation") {
  CHECK_THROWS_AS(CouplingLayer(Layout{1, 2}, {1, 1}, 3, 4.0), InvalidArgumentError);
  CHECK_THROWS_AS(CouplingLayer(Layout{1, 2}, {0, 0}, 3, 4.0), InvalidArgumentError);
  CHECK_THROWS_AS(CouplingLayer(Layout{1, 2}, {1, 0, 1}, 3, 4.0), ShapeError);
  CHECK_THROWS_AS(CouplingLayer::channel_split(Layout{2, 1}, false, 3, 4.0), InvalidArgumentError);
}

TEST_CASE("coupling log-det matches the numerical jacobian") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    CouplingLayer c = seed % 2 ? CouplingLayer::checkerboard(Layout{2, 2}, seed % 4 == 1, 8, 4.0)
                               : CouplingLayer::channel_split(Layout{2, 2}, seed % 4 == 2, 8, 4.0);
    FlowModel m = single(c);
    oracle::randomize(m, rng, 0.5);
    const Tensor x = oracle::normal_tensor({1, 8}, rng);
    const auto r = flow_forward(m, x);
    const double total = r.total_logdet[0];
    const auto j = oracle::numerical_jacobian([&](const oracle::Vec& v) { return oracle::flow_latent(m, v); }, x.vec());
    const double ref = oracle::log_abs_det(j);
    CHECK(std::abs(total - ref) / std::max(std::abs(ref), 1e-8) < 1e-4);
  }
}

TEST_CASE("coupling round trip on 100 random layers") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(500 + seed);
    const Layout l{seed % 2 ? std::size_t{4} : std::size_t{2}, 1 + seed % 3};
    CouplingLayer c = l.channels > 1 && seed % 3 == 0 ? CouplingLayer::channel_split(l, seed % 2, 8, 4.0)
                                                      : CouplingLayer::checkerboard(l, seed % 2, 8, 4.0);
    FlowModel m = single(c);
    oracle::randomize(m, rng, 0.7);
    const auto& layer = std::get<CouplingLayer>(m.layers()[0]);
    const Tensor x = oracle::normal_tensor({3, l.dims()}, rng, 2.0);
    worst = std::max(worst, max_abs_diff(layer.inverse(layer.forward(x).first), x));
    const Tensor y = oracle::normal_tensor({3, l.dims()}, rng, 2.0);
    worst = std::max(worst, max_abs_diff(layer.forward(layer.inverse(y)).first, y));
  }
  CHECK(worst < 1e-9);
}

TEST_CASE("squeeze sub-pixel order") {
  // 2x2x1: TL, TR, BL, BR become channels 0..3.
  CHECK(squeeze(Tensor({2, 2, 1}, {1, 2, 3, 4})) == Tensor({1, 1, 4}, {1, 2, 3, 4}));
  // 2x2x2, entries encode (row, col, ch) as 100r + 10c + ch.
  const Tensor x({2, 2, 2}, {0, 1, 10, 11, 100, 101, 110, 111});
  CHECK(squeeze(x) == Tensor({1, 1, 8}, {0, 10, 100, 110, 1, 11, 101, 111}));
  // 4x4x1: block (0,1) holds pixels (0,2),(0,3),(1,2),(1,3).
  Tensor g({4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) g[i] = static_cast<double>(i);
  const Tensor s = squeeze(g);
  CHECK(s.shape() == Shape{2, 2, 4});
  CHECK(slice(s.reshaped({4, 4}), 0, 1, 2) == Tensor({1, 4}, {2, 3, 6, 7}));
}

TEST_CASE("squeeze is a bijection with unsqueeze as inverse") {
  std::mt19937_64 rng(3);
  const Tensor x = oracle::normal_tensor({3, 8, 8, 3}, rng);
  const Tensor s = squeeze(x);
  CHECK(s.shape() == Shape{3, 4, 4, 12});
  CHECK(unsqueeze(s) == x);
  const auto perm = squeeze_permutation(Layout{8, 3});
  std::vector<std::size_t> sorted(perm);
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
  CHECK_THROWS_AS(squeeze(Tensor({3, 3, 1})), ShapeError);
  CHECK_THROWS_AS(squeezed(Layout{5, 2}), ShapeError);
}

TEST_CASE("factor layer validation") {
  const Layout l{1, 4};
  CHECK_NOTHROW(FactorLayer(l, {0, 2}, {1, 3}));
  CHECK_THROWS(FactorLayer(l, {0, 1, 2}, {3}));
  CHECK_THROWS(FactorLayer(l, {0, 1}, {1, 3}));
  CHECK_THROWS(FactorLayer(l, {0, 1}, {2, 4}));
  CHECK_THROWS(FactorLayer(Layout{2, 1}, {0, 1}, {2, 3}));
}

TEST_CASE("layout chain is enforced") {
  FlowModel m(Layout{4, 1});
  CHECK_THROWS_AS(m.add(SqueezeLayer(Layout{2, 4})), ShapeError);
  m.add(SqueezeLayer(Layout{4, 1}));
  CHECK(m.output_layout() == Layout{2, 4});
  CHECK_THROWS_AS(scale_layouts(Layout{4, 1}, 3, true), ShapeError);
  CHECK(scale_layouts(Layout{8, 1}, 2, true).back() == Layout{2, 4});
  CHECK(scale_layouts(Layout{8, 1}, 2, false).back() == Layout{2, 16});
}

TEST_CASE("flow round trip and latent bookkeeping on random multi-scale models") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t scales = 1 + trial % 3;
    const bool factored = trial % 4 != 0;
    FlowModel m = oracle::random_model(rng, Layout{8, 1 + static_cast<std::size_t>(trial % 2)}, scales, factored);
    CHECK(m.factor_count() == (factored ? scales : 0));
    const Tensor x = oracle::normal_tensor({4, m.input_layout().dims()}, rng);
    const auto r = flow_forward(m, x);
    std::size_t total = 0;
    for (const auto& z : r.z_parts) total += z.dim(1);
    CHECK(total == m.input_layout().dims());
    CHECK(max_abs_diff(flow_inverse(m, r.z_parts), x) < 1e-9);
  }
}

TEST_CASE("log-det map sums to the total log-det") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    FlowModel m = oracle::random_model(rng, Layout{8, 1 + static_cast<std::size_t>(trial % 3)}, 1 + trial % 3,
                                       trial % 2 == 0, 8, 0.4);
    const Tensor x = oracle::normal_tensor({6, m.input_layout().dims()}, rng);
    const auto r = flow_forward(m, x);
    const Tensor total = r.logdet_map.total();
    CHECK(max_abs_diff(total, r.total_logdet) < 1e-10);
    // Every input dim is attributed exactly once.
    const Tensor in = r.logdet_map.to_input_layout();
    for (std::size_t b = 0; b < 6; ++b) {
      double s = 0.0;
      for (std::size_t d = 0; d < in.dim(1); ++d) s += in.at(b, d);
      CHECK(std::abs(s - r.total_logdet[b]) < 1e-10);
    }
  }
}

TEST_CASE("constant-net couplings reproduce the exact jacobian diagonal") {
  FlowModel m(Layout{2, 1});
  m.add(oracle::constant_coupling(Layout{2, 1}, {1, 0, 0, 1}, 0.7, -0.2));
  m.add(oracle::constant_coupling(Layout{2, 1}, {0, 1, 1, 0}, -1.1, 0.5));
  m.add(SqueezeLayer(Layout{2, 1}));
  m.add(oracle::constant_coupling(Layout{1, 4}, {0, 1, 1, 0}, 0.3, 0.0));
  std::mt19937_64 rng(4);
  const Tensor x = oracle::normal_tensor({1, 4}, rng);
  const auto r = flow_forward(m, x);
  const auto j = oracle::numerical_jacobian([&](const oracle::Vec& v) { return oracle::flow_latent(m, v); }, x.vec());
  // Output order is squeezed, so the jacobian is a permuted diagonal.
  const auto perm = squeeze_permutation(Layout{2, 1});
  const Tensor per_dim = r.logdet_map.to_input_layout();
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(per_dim[perm[k]] == doctest::Approx(std::log(std::abs(j(k, perm[k])))).epsilon(1e-9));
  }
  CHECK(per_dim[0] == doctest::Approx(-1.1 + 0.3));
  CHECK(per_dim[1] == doctest::Approx(0.7));
  CHECK(per_dim[2] == doctest::Approx(0.7));
  CHECK(per_dim[3] == doctest::Approx(-1.1 + 0.3));
}

TEST_CASE("log-det map permutes with squeeze and freezes at factoring") {
  std::mt19937_64 rng(9);
  FlowModel m(Layout{4, 1});
  m.add(CouplingLayer::checkerboard(Layout{4, 1}, false, 6, 4.0));
  m.mark_boundary();
  m.add(SqueezeLayer(Layout{4, 1}));
  m.mark_boundary();
  std::vector<std::size_t> keep, factor;
  for (std::size_t d = 0; d < 16; ++d) (d % 4 < 2 ? keep : factor).push_back(d);
  m.add(FactorLayer(Layout{2, 4}, keep, factor));
  m.add(CouplingLayer::checkerboard(Layout{2, 2}, true, 6, 4.0));
  oracle::randomize(m, rng, 0.5);
  const Tensor x = oracle::normal_tensor({2, 16}, rng);
  const auto r = flow_forward(m, x);
  // Before and after the squeeze, in input layout, the maps agree.
  CHECK(r.boundary_maps[0] == r.boundary_maps[1]);
  // Frozen block equals the pre-factor map at the factored positions.
  const auto perm = squeeze_permutation(Layout{4, 1});
  const Tensor& frozen = r.logdet_map.frozen.at(0);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < factor.size(); ++k)
      CHECK(frozen.at(b, k) == r.boundary_maps[0].at(b, perm[factor[k]]));
  // Origins of live and frozen dims partition the input.
  std::vector<int> seen(16, 0);
  for (auto o : r.logdet_map.live_origin) ++seen[o];
  for (auto o : r.logdet_map.frozen_origin[0]) ++seen[o];
  for (int s : seen) CHECK(s == 1);
}

TEST_CASE("change of variables against a numerical jacobian") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(900 + seed);
    FlowModel m = oracle::random_model(rng, Layout{2, 2}, 1, seed % 2 == 0, 6, 0.4);
    const Tensor x = oracle::normal_tensor({1, 8}, rng);
    const double ll = log_likelihood(m, x)[0];
    const double ref = oracle::log_likelihood(m, x.vec());
    CHECK(std::abs(ll - ref) / std::abs(ref) < 1e-4);
  }
}

TEST_CASE("model file round trip") {
  std::mt19937_64 rng(12);
  const FlowModel m = oracle::random_model(rng, Layout{8, 1}, 2, true);
  std::stringstream a;
  m.save(a);
  std::stringstream in(a.str());
  const FlowModel back = FlowModel::load(in);
  std::stringstream b;
  back.save(b);
  CHECK(a.str() == b.str());
  const Tensor x = oracle::normal_tensor({3, 64}, rng);
  CHECK(log_likelihood(m, x) == log_likelihood(back, x));

  std::stringstream cut(a.str().substr(0, a.str().size() / 2));
  CHECK_THROWS_AS(FlowModel::load(cut), CorruptFileError);
  std::string bad = a.str();
  bad[1] = 'X';
  std::stringstream wrong(bad);
  CHECK_THROWS_AS(FlowModel::load(wrong), CorruptFileError);
}

TEST_CASE("log prior of standard normal rows") {
  const std::array<Tensor, 2> parts{Tensor({1, 2}, {0.0, 1.0}), Tensor({1, 1}, {-2.0})};
  const double expect = -1.5 * std::log(2 * std::numbers::pi) - 0.5 * (0 + 1 + 4);
  CHECK(log_prior(parts)[0] == doctest::Approx(expect).epsilon(1e-14));
}
