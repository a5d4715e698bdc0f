#include <catch2/catch.hpp>

#include <cmath>

#include "helpers.hpp"
#include "sgmcmc/estimators.hpp"
#include "sgmcmc/gaussian.hpp"
#include "sgmcmc/logistic.hpp"

using namespace sgmcmc;
using test_helpers::all_subsets;
using test_helpers::rel_err;
using test_helpers::small_logistic;

namespace {

MiniBatch batch_of(std::vector<Index> idx, Index population) {
  MiniBatch b;
  b.indices = std::move(idx);
  b.population = population;
  return b;
}

}  // namespace

TEST_CASE("simple estimator degenerate batches") {
  const auto model = small_logistic(6, 2, 21);
  RngStream rng(4);
  const Vector theta = rng.normal_vec(2);
  const Vector full = grad_full(model, theta);

  const auto est_full = estimate_simple(model, theta, batch_of({0, 1, 2, 3, 4, 5}, 6));
  REQUIRE(rel_err(est_full.vector, full) < 1e-12);

  Vector g2(2);
  model.grad_datum(theta, 3, g2);
  const auto est_one = estimate_simple(model, theta, batch_of({3}, 6));
  REQUIRE(rel_err(est_one.vector, Vector(6.0 * g2)) < 1e-14);
}

TEST_CASE("simple estimator is exactly unbiased over all batches") {
  const auto model = small_logistic(6, 2, 22);
  RngStream rng(5);
  const Vector theta = rng.normal_vec(2);
  const Vector full = grad_full(model, theta);

  for (const Index n : {Index(1), Index(2), Index(3), Index(4)}) {
    Vector mean = Vector::Zero(2);
    const auto subsets = all_subsets(6, n);
    for (const auto& s : subsets) mean += estimate_simple(model, theta, batch_of(s, 6)).vector;
    mean /= static_cast<double>(subsets.size());
    REQUIRE(rel_err(mean, full) < 1e-12);
  }
}

TEST_CASE("sgd anchor lands at the mode of a quadratic potential") {
  GaussianPotential model(GaussianTarget::standard(2));
  SgdConfig sgd;
  sgd.iterations = 2000;
  sgd.schedule = StepSchedule::polynomial(0.5);
  Vector theta0(2);
  theta0 << 3.0, -2.0;
  sgd.theta0 = theta0;
  RngStream rng(8);
  const ControlVariateState state = cv_prepare(model, sgd, rng);
  REQUIRE(state.anchor.norm() <= 1e-3);
  REQUIRE(state.sum_consistency_error() <= 1e-12);
}

TEST_CASE("sgd anchor shrinks the full gradient by an order of magnitude") {
  const auto model = small_logistic(1000, 2, 23);
  const ConvexityConstants cc = convexity_constants(model);

  Vector theta0(2);
  theta0 << 1.0, 1.0;
  SgdConfig sgd;
  sgd.iterations = 2000;
  sgd.batch_size = 32;
  sgd.schedule = StepSchedule::polynomial(cc.step_ceiling() * 20.0);
  sgd.theta0 = theta0;
  RngStream rng(9);
  const ControlVariateState state = cv_prepare(model, sgd, rng);

  const double norm_before = grad_full(model, theta0).norm();
  const double norm_after = grad_full(model, state.anchor).norm();
  REQUIRE(norm_after * 10.0 <= norm_before);

  // cached rows match the finite-difference oracle at the anchor
  for (const Index i : {Index(0), Index(17), Index(999)}) {
    const Vector fd = test_helpers::fd_grad_datum(model, state.anchor, i);
    REQUIRE(rel_err(Vector(state.anchor_grads.row(i).transpose()), fd) < 1e-5);
  }
}

TEST_CASE("sgd divergence is an optimization failure") {
  GaussianPotential model(GaussianTarget::standard(1));
  SgdConfig sgd;
  sgd.iterations = 200;
  sgd.schedule = StepSchedule::fixed(3.0);  // |1 - h| > 1: iterates blow up
  Vector theta0(1);
  theta0 << 1.0;
  sgd.theta0 = theta0;
  RngStream rng(10);
  REQUIRE_THROWS_AS(cv_prepare(model, sgd, rng), OptimizationError);
}

TEST_CASE("control-variate estimate is exact at the anchor and for full batches") {
  const auto model = small_logistic(6, 2, 24);
  SgdConfig sgd;
  sgd.iterations = 300;
  sgd.batch_size = 3;
  sgd.schedule = StepSchedule::polynomial(0.05);
  RngStream rng(11);
  const ControlVariateState state = cv_prepare(model, sgd, rng);

  for (const auto& s : all_subsets(6, 2)) {
    const auto est = estimate_cv(model, state, state.anchor, batch_of(s, 6));
    REQUIRE((est.vector - state.anchor_sum).norm() == 0.0);
  }

  RngStream rng2(12);
  const Vector theta = rng2.normal_vec(2);
  const auto est = estimate_cv(model, state, theta, batch_of({0, 1, 2, 3, 4, 5}, 6));
  REQUIRE(rel_err(est.vector, grad_full(model, theta)) < 1e-12);
}

TEST_CASE("control-variate estimator is exactly unbiased over all batches") {
  const auto model = small_logistic(6, 2, 25);
  SgdConfig sgd;
  sgd.iterations = 300;
  sgd.batch_size = 3;
  sgd.schedule = StepSchedule::polynomial(0.05);
  RngStream rng(13);
  const ControlVariateState state = cv_prepare(model, sgd, rng);

  const Vector theta = rng.normal_vec(2);
  const Vector full = grad_full(model, theta);
  Vector mean = Vector::Zero(2);
  const auto subsets = all_subsets(6, 2);
  for (const auto& s : subsets) mean += estimate_cv(model, state, theta, batch_of(s, 6)).vector;
  mean /= static_cast<double>(subsets.size());
  REQUIRE(rel_err(mean, full) < 1e-12);
}

TEST_CASE("anchor refresh keeps the cache coherent") {
  const auto model = small_logistic(20, 2, 26);
  SgdConfig sgd;
  sgd.iterations = 200;
  sgd.batch_size = 5;
  sgd.schedule = StepSchedule::polynomial(0.02);
  RngStream rng(14);
  ControlVariateState state = cv_prepare(model, sgd, rng);

  SECTION("empty batch is a no-op") {
    const Matrix rows = state.anchor_grads;
    const Vector sum = state.anchor_sum;
    cv_refresh_anchors(state, batch_of({}, 20), state.anchor, model);
    REQUIRE((state.anchor_grads - rows).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((state.anchor_sum - sum).norm() == 0.0);
  }

  SECTION("full refresh equals a fresh preparation at the new point") {
    const Vector theta_now = rng.normal_vec(2);
    std::vector<Index> all(20);
    for (Index i = 0; i < 20; ++i) all[static_cast<std::size_t>(i)] = i;
    cv_refresh_anchors(state, batch_of(all, 20), theta_now, model);

    ControlVariateState fresh;
    fresh.anchor = theta_now;
    detail::fill_anchor_cache(model, fresh);
    REQUIRE((state.anchor_grads - fresh.anchor_grads).cwiseAbs().maxCoeff() < 1e-15);
    REQUIRE(rel_err(state.anchor_sum, fresh.anchor_sum) < 1e-12);
  }

  SECTION("the running sum survives many partial refreshes") {
    for (int rep = 0; rep < 1000; ++rep) {
      const MiniBatch b = sample_minibatch(20, 4, rng);
      cv_refresh_anchors(state, b, rng.normal_vec(2), model);
    }
    REQUIRE(state.sum_consistency_error() < 1e-9);
  }

  SECTION("unbiasedness holds with per-index anchors") {
    for (int rep = 0; rep < 50; ++rep) {
      const MiniBatch b = sample_minibatch(20, 4, rng);
      cv_refresh_anchors(state, b, rng.normal_vec(2), model);
    }
    const Vector theta = rng.normal_vec(2);
    const Vector full = grad_full(model, theta);
    Vector mean = Vector::Zero(2);
    const auto subsets = all_subsets(20, 2);
    for (const auto& s : subsets)
      mean += estimate_cv(model, state, theta, batch_of(s, 20)).vector;
    mean /= static_cast<double>(subsets.size());
    REQUIRE(rel_err(mean, full) < 1e-12);
  }
}

TEST_CASE("weighted estimator reductions") {
  const auto model = small_logistic(4, 2, 27);
  RngStream rng(15);
  const Vector theta = rng.normal_vec(2);
  const Vector full = grad_full(model, theta);

  SECTION("uniform weights reproduce the simple-estimator form on the drawn batch") {
    const WeightScheme scheme = WeightScheme::uniform(4, 2);
    const auto est = estimate_weighted(model, theta, scheme, rng);
    Vector simple_form = Vector::Zero(2);
    Vector g(2);
    for (const Index i : est.batch.indices) {
      model.grad_datum(theta, i, g);
      simple_form += g;
    }
    simple_form *= 4.0 / 2.0;
    REQUIRE(rel_err(est.vector, simple_form) < 1e-12);
  }

  SECTION("all-ones weights always give the full gradient") {
    const WeightScheme scheme(Vector::Ones(4));
    for (int rep = 0; rep < 5; ++rep) {
      const auto est = estimate_weighted(model, theta, scheme, rng);
      REQUIRE(est.batch.size() == 4);
      REQUIRE(rel_err(est.vector, full) < 1e-12);
    }
  }

  SECTION("weight validation") {
    Vector bad(2);
    bad << 0.5, 1.5;
    REQUIRE_THROWS_AS(WeightScheme(bad), ArgumentError);
    bad << 0.0, 0.5;
    REQUIRE_THROWS_AS(WeightScheme(bad), ArgumentError);
  }
}

TEST_CASE("weighted estimator is exactly unbiased over all inclusion patterns") {
  const auto model = small_logistic(4, 2, 28);
  RngStream rng(16);
  const Vector theta = rng.normal_vec(2);
  const Vector full = grad_full(model, theta);

  Vector w(4);
  w << 0.9, 0.7, 0.2, 0.2;
  const WeightScheme scheme(w);

  Matrix grads(4, 2);
  Vector g(2);
  for (Index i = 0; i < 4; ++i) {
    model.grad_datum(theta, i, g);
    grads.row(i) = g.transpose();
  }

  Vector mean = Vector::Zero(2);
  for (int mask = 0; mask < 16; ++mask) {
    double prob = 1.0;
    Vector value = Vector::Zero(2);
    for (Index i = 0; i < 4; ++i) {
      if (mask & (1 << i)) {
        prob *= w[i];
        value += grads.row(i).transpose() / w[i];
      } else {
        prob *= 1.0 - w[i];
      }
    }
    mean += prob * value;
  }
  REQUIRE(rel_err(mean, full) < 1e-12);
}

TEST_CASE("variance probe") {
  const auto model = small_logistic(100, 2, 29);
  RngStream rng(17);
  const Vector theta = rng.normal_vec(2);

  SECTION("full-batch estimator has zero covariance") {
    const Matrix v = variance_probe(make_full_oracle(model), theta, 16, rng);
    REQUIRE(v.cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("output is symmetric") {
    const Matrix v = variance_probe(make_simple_oracle(model, 10), theta, 200, rng);
    REQUIRE((v - v.transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }

  SECTION("needs at least two replicates") {
    REQUIRE_THROWS_AS(variance_probe(make_full_oracle(model), theta, 1, rng), ArgumentError);
  }

  SECTION("control variates beat simple subsampling near the anchor") {
    SgdConfig sgd;
    sgd.iterations = 1000;
    sgd.batch_size = 10;
    sgd.schedule = StepSchedule::polynomial(convexity_constants(model).step_ceiling() * 20.0);
    RngStream prep_rng(18);
    ControlVariateState state = cv_prepare(model, sgd, prep_rng);

    Vector near = state.anchor;
    near[0] += 0.05 * state.anchor.norm();
    const Matrix v_simple = variance_probe(make_simple_oracle(model, 10), near, 1000, rng);
    const Matrix v_cv = variance_probe(make_cv_oracle(model, state, 10), near, 1000, rng);
    REQUIRE(v_cv.trace() < v_simple.trace());

    // every draw at the anchor is exactly anchor_sum; only the subtraction
    // of the column mean leaves sub-denormal residue
    const Matrix v_cv_anchor =
        variance_probe(make_cv_oracle(model, state, 10), state.anchor, 100, rng);
    REQUIRE(v_cv_anchor.cwiseAbs().maxCoeff() <= 1e-28);
  }
}

TEST_CASE("cv oracle can fall back to the simple estimator outside a radius") {
  const auto model = small_logistic(50, 2, 30);
  SgdConfig sgd;
  sgd.iterations = 500;
  sgd.batch_size = 10;
  sgd.schedule = StepSchedule::polynomial(0.01);
  RngStream rng(19);
  ControlVariateState state = cv_prepare(model, sgd, rng);

  GradientEstimate est;
  const GradientOracle oracle = make_cv_oracle(model, state, 5, false, 0.25);
  const Vector far = state.anchor + Vector::Constant(2, 10.0);
  oracle(far, rng, est);
  REQUIRE(est.tag == EstimatorTag::simple);
  oracle(state.anchor, rng, est);
  REQUIRE(est.tag == EstimatorTag::control_variate);
}
