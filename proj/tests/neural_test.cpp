#include "ewip/neural.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "ewip/checkpoint.hpp"
#include "test_util.hpp"

namespace ewip::neural {
namespace {

using test::relative_error;

Mlp random_net(std::mt19937_64& rng, std::vector<int> sizes,
               OutputActivation act = OutputActivation::linear, Vector limits = {}) {
  Mlp net(std::move(sizes), act, std::move(limits));
  for (auto& w : net.weights())
    for (Eigen::Index i = 0; i < w.size(); ++i)
      w.data()[i] = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
  for (auto& b : net.biases())
    for (Eigen::Index i = 0; i < b.size(); ++i)
      b.data()[i] = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  return net;
}

// straight-line reimplementation with raw loops, no shared code path
std::vector<double> oracle_forward(const Mlp& net, const std::vector<double>& in) {
  std::vector<double> a = in;
  const auto& sizes = net.layer_sizes();
  for (std::size_t k = 0; k + 1 < sizes.size(); ++k) {
    std::vector<double> z(sizes[k + 1], 0.0);
    for (int i = 0; i < sizes[k + 1]; ++i) {
      double acc = net.biases()[k](i);
      for (int j = 0; j < sizes[k]; ++j) acc += net.weights()[k](i, j) * a[j];
      z[i] = acc;
    }
    const bool last = (k + 2 == sizes.size());
    for (int i = 0; i < sizes[k + 1]; ++i) {
      if (!last) {
        z[i] = z[i] > 0.0 ? z[i] : 0.0;
      } else if (net.output_activation() == OutputActivation::bounded_tanh) {
        z[i] = net.output_limits()(i) * std::tanh(z[i]);
      }
    }
    a = std::move(z);
  }
  return a;
}

TEST(Forward, ZeroNetworkGivesZeroOutput) {
  Mlp net({4, 8, 2}, OutputActivation::linear);
  const Vector out = net.evaluate(Vector::Ones(4));
  EXPECT_DOUBLE_EQ(out.norm(), 0.0);
}

TEST(Forward, IdentityLinearLayer) {
  Mlp net({3, 3}, OutputActivation::linear);
  net.weights()[0] = Matrix::Identity(3, 3);
  Vector in(3);
  in << 1.0, -2.0, 0.5;
  EXPECT_EQ(net.evaluate(in), in);
}

TEST(Forward, MatchesStraightLineOracle) {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const Mlp net = random_net(rng, {5, 7, 6, 3});
    std::vector<double> in(5);
    for (auto& v : in) v = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);
    const Vector got = net.evaluate(Eigen::Map<const Vector>(in.data(), 5));
    const auto want = oracle_forward(net, in);
    for (int i = 0; i < 3; ++i) EXPECT_LE(relative_error(got(i), want[i]), 1e-12);
  }
}

TEST(Forward, BoundedOutputsStayWithinLimits) {
  std::mt19937_64 rng(5);
  Vector limits(2);
  limits << 5.0, 20.0;
  const Mlp net = random_net(rng, {4, 16, 2}, OutputActivation::bounded_tanh, limits);
  for (int i = 0; i < 50; ++i) {
    Vector in(4);
    for (int j = 0; j < 4; ++j) in(j) = std::uniform_real_distribution<double>(-30, 30)(rng);
    const Vector out = net.evaluate(in);
    EXPECT_LE(std::abs(out(0)), 5.0);
    EXPECT_LE(std::abs(out(1)), 20.0);
  }
}

TEST(Forward, ShapeMismatchThrows) {
  Mlp net({4, 2}, OutputActivation::linear);
  EXPECT_THROW(net.evaluate(Vector::Zero(3)), std::invalid_argument);
}

TEST(Forward, PureAndRepeatable) {
  std::mt19937_64 rng(17);
  const Mlp net = random_net(rng, {6, 12, 2});
  Vector in(6);
  for (int j = 0; j < 6; ++j) in(j) = std::uniform_real_distribution<double>(-1, 1)(rng);
  const Vector a = net.evaluate(in);
  const Vector b = net.evaluate(in);
  EXPECT_EQ(a, b);
}

double seeded_loss(const Mlp& net, const Vector& in, const Vector& seed) {
  return seed.dot(net.evaluate(in));
}

TEST(Gradients, MatchCentralFiniteDifferences) {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const bool bounded = trial % 3 == 0;
    Vector limits(2);
    limits << 2.0, 4.0;
    Mlp net = random_net(rng, {4, 6, 5, 2},
                         bounded ? OutputActivation::bounded_tanh : OutputActivation::linear,
                         bounded ? limits : Vector{});
    Vector in(4), seed(2);
    for (int j = 0; j < 4; ++j) in(j) = std::uniform_real_distribution<double>(-1, 1)(rng);
    for (int j = 0; j < 2; ++j) seed(j) = std::uniform_real_distribution<double>(-1, 1)(rng);

    Mlp::Tape tape;
    net.forward(Matrix(in), tape);
    Gradients grads = net.zero_gradients();
    net.backward(tape, Matrix(seed), grads);

    const double h = 1e-5;
    for (std::size_t k = 0; k < net.weights().size(); ++k) {
      for (Eigen::Index idx = 0; idx < net.weights()[k].size(); ++idx) {
        double& p = net.weights()[k].data()[idx];
        const double saved = p;
        p = saved + h;
        const double lp = seeded_loss(net, in, seed);
        p = saved - h;
        const double lm = seeded_loss(net, in, seed);
        p = saved;
        worst = std::max(worst, relative_error((lp - lm) / (2 * h), grads.weights[k].data()[idx]));
      }
      for (Eigen::Index idx = 0; idx < net.biases()[k].size(); ++idx) {
        double& p = net.biases()[k].data()[idx];
        const double saved = p;
        p = saved + h;
        const double lp = seeded_loss(net, in, seed);
        p = saved - h;
        const double lm = seeded_loss(net, in, seed);
        p = saved;
        worst = std::max(worst, relative_error((lp - lm) / (2 * h), grads.biases[k].data()[idx]));
      }
    }
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Gradients, InputGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(55);
  const Mlp net = random_net(rng, {5, 8, 3});
  Vector in(5), seed(3);
  for (int j = 0; j < 5; ++j) in(j) = std::uniform_real_distribution<double>(-1, 1)(rng);
  for (int j = 0; j < 3; ++j) seed(j) = std::uniform_real_distribution<double>(-1, 1)(rng);
  Mlp::Tape tape;
  net.forward(Matrix(in), tape);
  Gradients grads = net.zero_gradients();
  const Matrix din = net.backward(tape, Matrix(seed), grads);
  const double h = 1e-6;
  for (int j = 0; j < 5; ++j) {
    Vector ip = in, im = in;
    ip(j) += h;
    im(j) -= h;
    const double fd = (seeded_loss(net, ip, seed) - seeded_loss(net, im, seed)) / (2 * h);
    EXPECT_LE(relative_error(fd, din(j, 0)), 1e-6);
  }
}

TEST(Gradients, ZeroSeedGivesZeroGradients) {
  std::mt19937_64 rng(2);
  const Mlp net = random_net(rng, {3, 5, 2});
  Mlp::Tape tape;
  net.forward(Matrix(Vector::Ones(3)), tape);
  Gradients grads = net.zero_gradients();
  net.backward(tape, Matrix::Zero(2, 1), grads);
  EXPECT_DOUBLE_EQ(grads.squared_norm(), 0.0);
}

TEST(Gradients, LinearLayerSquaredErrorClosedForm) {
  std::mt19937_64 rng(8);
  Mlp net({3, 2}, OutputActivation::linear);
  for (Eigen::Index i = 0; i < net.weights()[0].size(); ++i)
    net.weights()[0].data()[i] = std::uniform_real_distribution<double>(-1, 1)(rng);
  Vector x(3), y(2);
  x << 0.3, -1.2, 0.7;
  y << 0.5, -0.25;

  Mlp::Tape tape;
  const Matrix out = net.forward(Matrix(x), tape);
  const Matrix seed = 2.0 * (out - Matrix(y));  // d/dout of ||Wx + b - y||^2
  Gradients grads = net.zero_gradients();
  net.backward(tape, seed, grads);

  const Matrix analytic = 2.0 * (net.weights()[0] * x + net.biases()[0] - y) * x.transpose();
  EXPECT_LE((grads.weights[0] - analytic).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Gradients, BackwardWithoutForwardThrows) {
  Mlp net({3, 2}, OutputActivation::linear);
  Mlp::Tape tape;
  Gradients grads = net.zero_gradients();
  EXPECT_THROW(net.backward(tape, Matrix::Zero(2, 1), grads), std::logic_error);
}

TEST(Adam, ZeroGradientZeroL2IsIdentity) {
  std::mt19937_64 rng(3);
  Mlp net = random_net(rng, {4, 6, 2});
  const Mlp before = net;
  AdamConfig cfg;
  cfg.l2 = 0.0;
  AdamState st = AdamState::make(net, cfg);
  adam_update(net, net.zero_gradients(), st);
  for (std::size_t k = 0; k < net.weights().size(); ++k)
    EXPECT_EQ(net.weights()[k], before.weights()[k]);
}

TEST(Adam, FirstStepHasLearningRateMagnitude) {
  Mlp net({1, 1}, OutputActivation::linear);
  net.weights()[0](0, 0) = 0.0;
  AdamConfig cfg;
  cfg.lr = 0.01;
  cfg.l2 = 0.0;
  AdamState st = AdamState::make(net, cfg);
  Gradients g = net.zero_gradients();
  g.weights[0](0, 0) = 3.7;
  adam_update(net, g, st);
  // bias-corrected first step: lr * g / (|g| + eps) ~= lr * sign(g)
  EXPECT_NEAR(net.weights()[0](0, 0), -0.01, 1e-6);
}

TEST(Adam, GlobalNormClipEqualsPreScaledGradient) {
  std::mt19937_64 rng(9);
  Mlp a = random_net(rng, {3, 4, 2});
  Mlp b = a;
  Gradients g = a.zero_gradients();
  for (auto& w : g.weights)
    for (Eigen::Index i = 0; i < w.size(); ++i)
      w.data()[i] = std::uniform_real_distribution<double>(-2, 2)(rng);
  const double norm = std::sqrt(g.squared_norm());
  ASSERT_GT(norm, 1.0);

  AdamConfig clip_cfg;
  clip_cfg.clip = 1.0;
  clip_cfg.l2 = 0.0;
  AdamState sa = AdamState::make(a, clip_cfg);
  adam_update(a, g, sa);

  Gradients scaled = g;
  scaled.scale(1.0 / norm);
  AdamConfig no_clip;
  no_clip.clip = 0.0;
  no_clip.l2 = 0.0;
  AdamState sb = AdamState::make(b, no_clip);
  adam_update(b, scaled, sb);

  for (std::size_t k = 0; k < a.weights().size(); ++k)
    EXPECT_LE((a.weights()[k] - b.weights()[k]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Adam, RejectsNonFiniteGradient) {
  Mlp net({2, 2}, OutputActivation::linear);
  AdamState st = AdamState::make(net, {});
  Gradients g = net.zero_gradients();
  g.weights[0](0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(adam_update(net, g, st), std::runtime_error);
}

TEST(SoftUpdate, EndpointsAndMidpoint) {
  std::mt19937_64 rng(4);
  const Mlp online = random_net(rng, {3, 4, 2});
  Mlp target = random_net(rng, {3, 4, 2});
  Mlp t1 = target;
  soft_update(t1, online, 1.0);
  for (std::size_t k = 0; k < online.weights().size(); ++k)
    EXPECT_EQ(t1.weights()[k], online.weights()[k]);

  Mlp t0 = target;
  soft_update(t0, online, 0.0);
  for (std::size_t k = 0; k < online.weights().size(); ++k)
    EXPECT_EQ(t0.weights()[k], target.weights()[k]);

  Mlp scalar_target({1, 1}, OutputActivation::linear);
  Mlp scalar_online({1, 1}, OutputActivation::linear);
  scalar_online.weights()[0](0, 0) = 2.0;
  soft_update(scalar_target, scalar_online, 0.5);
  EXPECT_DOUBLE_EQ(scalar_target.weights()[0](0, 0), 1.0);
}

TEST(SoftUpdate, ComposesAffinely) {
  std::mt19937_64 rng(14);
  const Mlp online = random_net(rng, {3, 5, 2});
  const Mlp base = random_net(rng, {3, 5, 2});
  const double a = 0.3, b = 0.2;

  Mlp sequential = base;
  soft_update(sequential, online, a);
  soft_update(sequential, online, b);

  Mlp single = base;
  soft_update(single, online, 1.0 - (1.0 - a) * (1.0 - b));

  for (std::size_t k = 0; k < online.weights().size(); ++k)
    EXPECT_LE((sequential.weights()[k] - single.weights()[k]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(SoftUpdate, ArchitectureMismatchThrows) {
  Mlp a({3, 4, 2}, OutputActivation::linear);
  const Mlp b({3, 5, 2}, OutputActivation::linear);
  EXPECT_THROW(soft_update(a, b, 0.5), std::invalid_argument);
}

TEST(Init, DeterministicUnderSeed) {
  const Mlp a = Mlp::init({4, 8, 2}, 77, OutputActivation::linear);
  const Mlp b = Mlp::init({4, 8, 2}, 77, OutputActivation::linear);
  const Mlp c = Mlp::init({4, 8, 2}, 78, OutputActivation::linear);
  for (std::size_t k = 0; k < a.weights().size(); ++k) {
    EXPECT_EQ(a.weights()[k], b.weights()[k]);
  }
  bool any_diff = false;
  for (std::size_t k = 0; k < a.weights().size(); ++k)
    any_diff = any_diff || a.weights()[k] != c.weights()[k];
  EXPECT_TRUE(any_diff);
}

TEST(Init, FanInBoundHoldsAndBiasesZero) {
  const Mlp net = Mlp::init({9, 16, 3}, 5, OutputActivation::linear);
  for (const auto& w : net.weights()) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w.cols()));
    EXPECT_LE(w.cwiseAbs().maxCoeff(), bound);
  }
  for (const auto& b : net.biases()) EXPECT_DOUBLE_EQ(b.norm(), 0.0);
}

TEST(RunningNorm, TracksMeanAndVariance) {
  RunningNorm norm(2);
  std::mt19937_64 rng(21);
  double sum0 = 0.0, sum1 = 0.0;
  std::vector<Vector> xs;
  for (int i = 0; i < 1000; ++i) {
    Vector x(2);
    x(0) = 3.0 + 2.0 * draw_normal(rng);
    x(1) = -1.0 + 0.5 * draw_normal(rng);
    xs.push_back(x);
    sum0 += x(0);
    sum1 += x(1);
    norm.observe(x);
  }
  EXPECT_NEAR(norm.mean()(0), sum0 / 1000.0, 1e-12);
  EXPECT_NEAR(norm.mean()(1), sum1 / 1000.0, 1e-12);
  double var0 = 0.0;
  for (const auto& x : xs) var0 += (x(0) - sum0 / 1000.0) * (x(0) - sum0 / 1000.0);
  EXPECT_NEAR(norm.variance()(0), var0 / 1000.0, 1e-9);

  norm.freeze(true);
  const Vector mean_before = norm.mean();
  norm.observe(Vector::Constant(2, 100.0));
  EXPECT_EQ(norm.mean(), mean_before);
}

TEST(RunningNorm, NormalizedValuesClipped) {
  RunningNorm norm(1);
  for (int i = 0; i < 10; ++i) norm.observe(Vector::Constant(1, static_cast<double>(i)));
  const Vector big = norm.normalize(Vector::Constant(1, 1e9));
  EXPECT_DOUBLE_EQ(big(0), 10.0);
}

TEST(Checkpoint, BitExactRoundTrip) {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "ewip_neural_ckpt_test.bin").string();

  std::mt19937_64 rng(99);
  Vector limits(2);
  limits << 5.0, 20.0;
  Mlp net = random_net(rng, {6, 12, 2}, OutputActivation::bounded_tanh, limits);
  AdamConfig cfg;
  cfg.lr = 3e-4;
  cfg.clip = 1.0;
  AdamState adam = AdamState::make(net, cfg);
  // take a few steps so moments are nontrivial
  for (int i = 0; i < 3; ++i) {
    Mlp::Tape tape;
    Matrix in = Matrix::Random(6, 4);
    net.forward(in, tape);
    Gradients g = net.zero_gradients();
    net.backward(tape, Matrix::Random(2, 4), g);
    adam_update(net, g, adam);
  }
  RunningNorm norm(6);
  for (int i = 0; i < 17; ++i) norm.observe(Vector::Random(6));

  {
    io::BinaryWriter w(path);
    io::write_header(w, "test", 1);
    io::write_mlp(w, net);
    io::write_adam(w, adam);
    io::write_norm(w, norm);
    io::write_rng(w, rng);
    w.close();
  }

  io::BinaryReader r(path);
  const auto [kind, version] = io::read_header(r);
  EXPECT_EQ(kind, "test");
  EXPECT_EQ(version, 1u);
  const Mlp net2 = io::read_mlp(r);
  const AdamState adam2 = io::read_adam(r);
  const RunningNorm norm2 = io::read_norm(r);
  std::mt19937_64 rng2 = io::read_rng(r);

  ASSERT_TRUE(net.same_architecture(net2));
  for (std::size_t k = 0; k < net.weights().size(); ++k) {
    EXPECT_EQ(net.weights()[k], net2.weights()[k]);
    EXPECT_EQ(net.biases()[k], net2.biases()[k]);
  }
  EXPECT_EQ(adam.step_count, adam2.step_count);
  for (std::size_t k = 0; k < adam.m_w.size(); ++k) {
    EXPECT_EQ(adam.m_w[k], adam2.m_w[k]);
    EXPECT_EQ(adam.v_w[k], adam2.v_w[k]);
  }
  EXPECT_EQ(norm.count(), norm2.count());
  EXPECT_EQ(norm.mean(), norm2.mean());
  EXPECT_EQ(norm.m2(), norm2.m2());
  for (int i = 0; i < 32; ++i) ASSERT_EQ(rng(), rng2());

  fs::remove(path);
}

}  // namespace
}  // namespace ewip::neural
