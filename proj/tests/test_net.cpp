#include <doctest.h>

#include <cmath>

#include "deepfv/net.hpp"
#include "deepfv/rng.hpp"
#include "oracles.hpp"

using namespace deepfv;

namespace {

bool close_rel(Scalar a, Scalar b, Scalar tol) {
  return std::abs(a - b) <= tol * std::max<Scalar>(1.0, std::abs(b));
}

// Plain-loop forward for eval mode with batch norm off.
Matrix forward_reference(const NetParams& params, const Matrix& batch) {
  Matrix x = batch;
  for (const auto& layer : params.layers) {
    Matrix z(x.rows(), layer.weight.rows());
    for (Index i = 0; i < x.rows(); ++i)
      for (Index o = 0; o < layer.weight.rows(); ++o) {
        Scalar acc = layer.bias(o);
        for (Index j = 0; j < x.cols(); ++j) acc += layer.weight(o, j) * x(i, j);
        z(i, o) = acc > 0 ? acc : 0;
      }
    x = z;
  }
  return x;
}

NetParams random_net(Index in, const std::vector<Index>& widths, bool bn,
                     Scalar dropout, std::uint64_t seed) {
  NetParams p = net_init(in, widths, dropout, bn, seed);
  // Shift batch-norm state away from the identity so its gradients matter.
  if (bn) {
    Rng rng(seed_stream(seed, 99));
    for (Index i = 0; i < p.bn_gamma.size(); ++i) {
      p.bn_gamma(i) = rng.uniform(0.5, 1.5);
      p.bn_beta(i) = rng.uniform(-0.3, 0.3);
      p.bn_running_mean(i) = rng.uniform(-0.5, 0.5);
      p.bn_running_var(i) = rng.uniform(0.5, 2.0);
    }
  }
  return p;
}

// True when every pre-activation is safely away from the ReLU kink.
bool away_from_kinks(const ForwardTrace& trace, Scalar margin = 1e-3) {
  for (const auto& z : trace.pre_acts)
    if ((z.cwiseAbs().array() < margin).any()) return false;
  return true;
}

}  // namespace

TEST_CASE("forward: identity layer is plain relu") {
  NetParams p;
  NetLayer layer;
  layer.weight = Matrix::Identity(2, 2);
  layer.bias = Vector::Zero(2);
  p.layers.push_back(layer);
  p.bn_enabled = false;
  Matrix x(1, 2);
  x << -1, 2;
  Matrix y = forward(p, x, Mode::kEval, 0);
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 1) == 2.0);
}

TEST_CASE("forward: eval mode is deterministic and dropout-free") {
  NetParams p = random_net(3, {5, 4}, true, 0.5, 1);
  Rng rng(61);
  Matrix x = oracles::random_matrix(3, 3, rng);
  Matrix a = forward(p, x, Mode::kEval, 123);
  Matrix b = forward(p, x, Mode::kEval, 456);  // different seed, same output
  CHECK((a - b).cwiseAbs().maxCoeff() == 0);
}

TEST_CASE("forward matches the straight-line oracle") {
  NetParams p = random_net(4, {6, 3}, false, 0.0, 2);
  Rng rng(62);
  Matrix x = oracles::random_matrix(5, 4, rng);
  Matrix y = forward(p, x, Mode::kEval, 0);
  CHECK((y - forward_reference(p, x)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("forward: batch-norm eval output permutes with the batch") {
  NetParams p = random_net(3, {4}, true, 0.0, 3);
  Rng rng(63);
  Matrix x = oracles::random_matrix(4, 3, rng);
  Matrix y = forward(p, x, Mode::kEval, 0);
  Matrix xp(4, 3), expected(4, y.cols());
  std::vector<Index> perm = {2, 0, 3, 1};
  for (Index i = 0; i < 4; ++i) {
    xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    expected.row(i) = y.row(perm[static_cast<std::size_t>(i)]);
  }
  Matrix yp = forward(p, xp, Mode::kEval, 0);
  CHECK((yp - expected).cwiseAbs().maxCoeff() == 0);
}

TEST_CASE("forward: train-mode errors and running stats") {
  NetParams p = random_net(3, {4}, true, 0.0, 4);
  Matrix single = Matrix::Random(1, 3);
  CHECK_THROWS_AS(forward(p, single, Mode::kTrain, 0), DataError);

  Rng rng(64);
  Matrix x = oracles::random_matrix(6, 3, rng);
  Vector before_mean = p.bn_running_mean;
  forward(p, x, Mode::kTrain, 0);
  CHECK((p.bn_running_mean - before_mean).cwiseAbs().maxCoeff() > 0);
}

TEST_CASE("backward: zero upstream gives zero gradients") {
  NetParams p = random_net(3, {4, 2}, true, 0.0, 5);
  Rng rng(65);
  Matrix x = oracles::random_matrix(4, 3, rng);
  ForwardTrace trace;
  forward(p, x, Mode::kTrain, 0, &trace);
  NetGradients g = backward(p, trace, Matrix::Zero(4, 2));
  for (const auto& layer : g.layers) {
    CHECK(layer.weight.cwiseAbs().maxCoeff() == 0);
    CHECK(layer.bias.cwiseAbs().maxCoeff() == 0);
  }
  CHECK(g.input.cwiseAbs().maxCoeff() == 0);
  CHECK(g.bn_gamma.cwiseAbs().maxCoeff() == 0);
}

TEST_CASE("backward: linear regime input gradient is upstream * W") {
  NetParams p;
  NetLayer layer;
  Rng rng(66);
  layer.weight = oracles::random_matrix(3, 4, rng, 0.3);
  layer.bias = Vector::Constant(3, 10.0);  // keeps every unit active
  p.layers.push_back(layer);
  p.bn_enabled = false;
  Matrix x = oracles::random_matrix(5, 4, rng, 0.2);
  ForwardTrace trace;
  forward(p, x, Mode::kTrain, 0, &trace);
  REQUIRE(away_from_kinks(trace));
  Matrix upstream = oracles::random_matrix(5, 3, rng);
  NetGradients g = backward(p, trace, upstream);
  CHECK((g.input - upstream * layer.weight).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("backward matches finite differences across random nets") {
  Rng rng(67);
  const Scalar h = 1e-5;
  const Scalar tol = 1e-4;
  int done = 0;
  int attempts = 0;
  while (done < 20 && attempts < 200) {
    ++attempts;
    Index in = 2 + static_cast<Index>(rng.uniform_int(3));
    std::vector<Index> widths;
    Index layers = 1 + static_cast<Index>(rng.uniform_int(2));
    for (Index l = 0; l < layers; ++l)
      widths.push_back(2 + static_cast<Index>(rng.uniform_int(3)));
    bool bn = rng.uniform() < 0.5;
    bool dropout_on = rng.uniform() < 0.3;
    std::uint64_t net_seed = rng.uniform_int(1u << 30);
    std::uint64_t fwd_seed = rng.uniform_int(1u << 30);
    NetParams params =
        random_net(in, widths, bn, dropout_on ? 0.25 : 0.0, net_seed);
    Index n = 3 + static_cast<Index>(rng.uniform_int(3));
    Matrix x = oracles::random_matrix(n, in, rng);

    ForwardTrace trace;
    NetParams probe = params;
    Matrix y = forward(probe, x, Mode::kTrain, fwd_seed, &trace);
    if (!away_from_kinks(trace)) continue;  // nudge past ReLU boundaries
    Matrix upstream = oracles::random_matrix(n, y.cols(), rng);
    NetGradients grads = backward(params, trace, upstream);

    auto loss_at = [&](const NetParams& candidate, const Matrix& input) {
      NetParams c = candidate;  // running stats churn is irrelevant here
      return (upstream.array() * forward(c, input, Mode::kTrain, fwd_seed).array())
          .sum();
    };

    // Layer weights and biases.
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      for (Index i = 0; i < params.layers[l].weight.rows(); ++i)
        for (Index j = 0; j < params.layers[l].weight.cols(); ++j) {
          NetParams hi = params, lo = params;
          hi.layers[l].weight(i, j) += h;
          lo.layers[l].weight(i, j) -= h;
          Scalar fd = (loss_at(hi, x) - loss_at(lo, x)) / (2 * h);
          CHECK(close_rel(grads.layers[l].weight(i, j), fd, tol));
        }
      for (Index i = 0; i < params.layers[l].bias.size(); ++i) {
        NetParams hi = params, lo = params;
        hi.layers[l].bias(i) += h;
        lo.layers[l].bias(i) -= h;
        Scalar fd = (loss_at(hi, x) - loss_at(lo, x)) / (2 * h);
        CHECK(close_rel(grads.layers[l].bias(i), fd, tol));
      }
    }
    if (bn) {
      for (Index i = 0; i < params.bn_gamma.size(); ++i) {
        NetParams hi = params, lo = params;
        hi.bn_gamma(i) += h;
        lo.bn_gamma(i) -= h;
        Scalar fd = (loss_at(hi, x) - loss_at(lo, x)) / (2 * h);
        CHECK(close_rel(grads.bn_gamma(i), fd, tol));

        hi = params;
        lo = params;
        hi.bn_beta(i) += h;
        lo.bn_beta(i) -= h;
        fd = (loss_at(hi, x) - loss_at(lo, x)) / (2 * h);
        CHECK(close_rel(grads.bn_beta(i), fd, tol));
      }
    }
    // Inputs.
    for (Index i = 0; i < x.rows(); ++i)
      for (Index j = 0; j < x.cols(); ++j) {
        Matrix hi = x, lo = x;
        hi(i, j) += h;
        lo(i, j) -= h;
        Scalar fd = (loss_at(params, hi) - loss_at(params, lo)) / (2 * h);
        CHECK(close_rel(grads.input(i, j), fd, tol));
      }
    ++done;
  }
  REQUIRE(done >= 20);
}

TEST_CASE("backward rejects a mismatched trace") {
  NetParams p = random_net(3, {4, 2}, false, 0.0, 9);
  Rng rng(69);
  Matrix x = oracles::random_matrix(4, 3, rng);
  ForwardTrace trace;
  forward(p, x, Mode::kTrain, 0, &trace);
  Matrix wrong_upstream = Matrix::Zero(4, 5);
  CHECK_THROWS_AS(backward(p, trace, wrong_upstream), ConsistencyError);
  NetParams other = random_net(3, {4, 4, 2}, false, 0.0, 10);
  Matrix upstream = Matrix::Zero(4, 2);
  CHECK_THROWS_AS(backward(other, trace, upstream), ConsistencyError);
}

TEST_CASE("cross_entropy_loss hand cases") {
  Matrix confident(1, 3);
  confident << 200, 0, 0;
  CrossEntropyResult r = cross_entropy_loss(confident, {0});
  CHECK(r.loss == doctest::Approx(0.0).epsilon(1e-12));

  Matrix uniform = Matrix::Zero(2, 4);
  r = cross_entropy_loss(uniform, {1, 3});
  CHECK(r.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  CHECK_THROWS_AS(cross_entropy_loss(uniform, {0, 4}), DataError);
  CHECK_THROWS_AS(cross_entropy_loss(uniform, {0}), DimensionError);
}

TEST_CASE("cross_entropy_loss gradient matches finite differences") {
  Rng rng(68);
  Matrix logits = oracles::random_matrix(4, 5, rng, 2.0);
  std::vector<int> labels = {2, 0, 4, 1};
  CrossEntropyResult r = cross_entropy_loss(logits, labels);
  const Scalar h = 1e-6;
  for (Index i = 0; i < logits.rows(); ++i)
    for (Index j = 0; j < logits.cols(); ++j) {
      Matrix hi = logits, lo = logits;
      hi(i, j) += h;
      lo(i, j) -= h;
      Scalar fd = (cross_entropy_loss(hi, labels).loss -
                   cross_entropy_loss(lo, labels).loss) /
                  (2 * h);
      CHECK(std::abs(r.grad(i, j) - fd) < 1e-6);
    }
}
