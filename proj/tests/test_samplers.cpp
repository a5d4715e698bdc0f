#include <catch2/catch.hpp>

#include <cmath>

#include "helpers.hpp"
#include "sgmcmc/gaussian.hpp"
#include "sgmcmc/logistic.hpp"
#include "sgmcmc/samplers.hpp"

using namespace sgmcmc;
using test_helpers::small_logistic;

TEST_CASE("zero step size freezes the chain") {
  GaussianPotential model(GaussianTarget::standard(2));
  RunConfig cfg;
  cfg.iterations = 200;
  cfg.burn_in = 0;
  cfg.estimator = EstimatorChoice::full;
  cfg.schedule = StepSchedule::fixed(0.0);
  Vector theta0(2);
  theta0 << 1.5, -0.5;
  cfg.theta0 = theta0;
  RngStream rng(201);
  const RunResult result = run_sgld(model, cfg, rng);
  REQUIRE(result.trace.stored() == 200);
  for (Index k = 0; k < result.trace.stored(); ++k) {
    REQUIRE(result.trace.states(k, 0) == 1.5);
    REQUIRE(result.trace.states(k, 1) == -0.5);
  }
}

TEST_CASE("identical seeds give bit-identical traces") {
  const auto model = small_logistic(50, 3, 202);
  RunConfig cfg;
  cfg.iterations = 500;
  cfg.burn_in = 100;
  cfg.stride = 3;
  cfg.subsample = 10;
  cfg.schedule = StepSchedule::fixed(1e-3);
  RngStream r1(7), r2(7);
  const RunResult a = run_sgld(model, cfg, r1);
  const RunResult b = run_sgld(model, cfg, r2);
  REQUIRE(a.trace.stored() == (500 - 100) / 3);
  REQUIRE((a.trace.states - b.trace.states).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((a.trace.grads - b.trace.grads).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("trace shape follows burn-in and stride") {
  GaussianPotential model(GaussianTarget::standard(1));
  for (const auto& [k, burn, stride] :
       {std::tuple<Index, Index, Index>{100, 50, 10}, {101, 50, 10}, {100, 0, 1}, {7, 3, 2}}) {
    RunConfig cfg;
    cfg.iterations = k;
    cfg.burn_in = burn;
    cfg.stride = stride;
    cfg.estimator = EstimatorChoice::full;
    cfg.schedule = StepSchedule::fixed(0.01);
    RngStream rng(203);
    const RunResult result = run_sgld(model, cfg, rng);
    REQUIRE(result.trace.stored() == (k - burn) / stride);
    for (const Index it : result.trace.iterations) {
      REQUIRE(it >= burn);
      REQUIRE((it - burn + 1) % stride == 0);
    }
  }
}

TEST_CASE("default burn-in is half the run") {
  GaussianPotential model(GaussianTarget::standard(1));
  RunConfig cfg;
  cfg.iterations = 1000;
  cfg.estimator = EstimatorChoice::full;
  cfg.schedule = StepSchedule::fixed(0.01);
  RngStream rng(204);
  const RunResult result = run_sgld(model, cfg, rng);
  REQUIRE(result.trace.stored() == 500);
  REQUIRE(result.trace.iterations.front() == 500);
}

TEST_CASE("config validation") {
  RunConfig cfg;
  cfg.iterations = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ArgumentError);
  cfg.iterations = 10;
  cfg.burn_in = 10;
  REQUIRE_THROWS_AS(cfg.validate(), ArgumentError);
  cfg.burn_in = 2;
  cfg.stride = 0;
  REQUIRE_THROWS_AS(cfg.validate(), ArgumentError);
}

TEST_CASE("generic recipe runner reduces to the direct update bitwise") {
  const Index d = 2;
  GaussianPotential model(GaussianTarget::bench2d());
  RunConfig cfg;
  cfg.iterations = 400;
  cfg.burn_in = 0;
  cfg.estimator = EstimatorChoice::full;
  cfg.schedule = StepSchedule::fixed(0.05);
  Vector theta0(d);
  theta0 << 0.3, -0.2;
  cfg.theta0 = theta0;

  RngStream r1(77), r2(77);
  const RunResult direct = run_sgld(model, cfg, r1);
  const RunResult generic = run_recipe(model, make_sgld_spec(d), cfg, r2);
  REQUIRE((direct.trace.states - generic.trace.states).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((direct.trace.grads - generic.trace.grads).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("subsample equal to the data size is the full-batch sampler") {
  const auto model = small_logistic(20, 2, 205);
  RunConfig full_cfg;
  full_cfg.iterations = 300;
  full_cfg.burn_in = 0;
  full_cfg.estimator = EstimatorChoice::full;
  full_cfg.schedule = StepSchedule::fixed(1e-3);
  RunConfig sub_cfg = full_cfg;
  sub_cfg.estimator = EstimatorChoice::simple;
  sub_cfg.subsample = 20;

  RngStream r1(31), r2(31);
  const RunResult a = run_sgld(model, full_cfg, r1);
  const RunResult b = run_sgld(model, sub_cfg, r2);
  REQUIRE((a.trace.states - b.trace.states).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("stationary variance of the overdamped chain matches the closed form") {
  // 1-d standard normal, exact gradients: Var = 1/(1 - h/4).
  GaussianPotential model(GaussianTarget::standard(1));
  RunConfig cfg;
  cfg.iterations = 2000000;
  cfg.burn_in = 100000;
  cfg.estimator = EstimatorChoice::full;
  cfg.schedule = StepSchedule::fixed(0.01);
  RngStream rng(20240630);
  const RunResult result = run_sgld(model, cfg, rng);
  const double mean = result.trace.states.col(0).mean();
  const double var =
      (result.trace.states.col(0).array() - mean).square().sum() / (result.trace.stored() - 1);
  REQUIRE(var == Approx(1.0 / (1.0 - 0.01 / 4.0)).epsilon(0.005));
}

TEST_CASE("divergent dynamics end with a partial trace and a report") {
  GaussianPotential model(GaussianTarget::standard(1));
  RunConfig cfg;
  cfg.iterations = 100000;
  cfg.burn_in = 0;
  cfg.estimator = EstimatorChoice::full;
  cfg.schedule = StepSchedule::fixed(10.0);  // |1 - h/2| = 4: geometric blow-up
  RngStream rng(206);
  const RunResult result = run_sgld(model, cfg, rng);
  REQUIRE(result.divergence.has_value());
  REQUIRE(result.divergence->iteration < 100);
  REQUIRE(result.trace.stored() <= result.divergence->iteration + 1);
}

TEST_CASE("recipe runner with inner steps keeps the trace contract") {
  GaussianPotential model(GaussianTarget::standard(2));
  RunConfig cfg;
  cfg.iterations = 200;
  cfg.burn_in = 100;
  cfg.stride = 5;
  cfg.estimator = EstimatorChoice::full;
  cfg.schedule = StepSchedule::fixed(0.01);
  cfg.inner_steps = 5;
  RngStream rng(207);
  const RunResult result = run_recipe(model, make_sghmc_spec(2, 1.0), cfg, rng);
  REQUIRE(!result.divergence.has_value());
  REQUIRE(result.trace.stored() == 20);
}

TEST_CASE("cv pipeline starts at the anchor with no burn-in transient") {
  const auto model = small_logistic(2000, 4, 208);
  const ConvexityConstants cc = convexity_constants(model);

  RunConfig cfg;
  cfg.iterations = 20000;
  cfg.burn_in = 0;
  cfg.stride = 50;
  cfg.subsample = 50;
  cfg.estimator = EstimatorChoice::control_variate;
  cfg.schedule = StepSchedule::fixed(0.1 * cc.step_ceiling());

  SgdConfig sgd;
  sgd.iterations = 4000;
  sgd.batch_size = 50;
  sgd.schedule = StepSchedule::polynomial(20.0 * cc.step_ceiling());

  {
    // phase 2 starts exactly at the anchor (stride 1 stores iteration 0)
    RunConfig unthinned = cfg;
    unthinned.iterations = 10;
    unthinned.stride = 1;
    RngStream check_rng(209);
    const CvPipelineResult head = run_cv_pipeline(model, unthinned, sgd, check_rng);
    REQUIRE((head.run.trace.states.row(0).transpose() - head.cv.anchor).norm() == 0.0);
  }

  RngStream rng(209);
  const CvPipelineResult out = run_cv_pipeline(model, cfg, sgd, rng);
  REQUIRE(!out.run.divergence.has_value());
  REQUIRE(out.run.trace.timings.optimization_sec > 0.0);
  REQUIRE(out.run.trace.timings.sampling_sec > 0.0);

  // two-sample check: first and last blocks of the thinned trace agree
  const Index m = out.run.trace.stored();
  REQUIRE(m == 400);
  const Index block = 100;
  for (Index j = 0; j < 4; ++j) {
    const auto col = out.run.trace.states.col(j);
    const double m1 = col.head(block).mean();
    const double m2 = col.tail(block).mean();
    const double v1 = (col.head(block).array() - m1).square().sum() / (block - 1);
    const double v2 = (col.tail(block).array() - m2).square().sum() / (block - 1);
    // factor 5 covers residual autocorrelation of the thinned samples
    const double se = std::sqrt((v1 + v2) / static_cast<double>(block) * 5.0);
    REQUIRE(std::abs(m1 - m2) <= 3.0 * se);
  }
}

TEST_CASE("cv pipeline with the full batch is the exact-gradient sampler from the mode") {
  const auto model = small_logistic(50, 2, 210);
  RunConfig cfg;
  cfg.iterations = 200;
  cfg.burn_in = 0;
  cfg.estimator = EstimatorChoice::control_variate;
  cfg.schedule = StepSchedule::fixed(1e-3);
  cfg.subsample = 0;  // full batch

  SgdConfig sgd;
  sgd.iterations = 500;
  sgd.batch_size = 10;
  sgd.schedule = StepSchedule::polynomial(0.02);

  RngStream rng(211);
  const CvPipelineResult out = run_cv_pipeline(model, cfg, sgd, rng);
  for (Index k = 0; k < out.run.trace.stored(); ++k) {
    const Vector theta = out.run.trace.states.row(k).transpose();
    const Vector g = grad_full(model, theta);
    REQUIRE((out.run.trace.grads.row(k).transpose() - g).norm() <=
            1e-12 * std::max(1.0, g.norm()));
  }
}

TEST_CASE("noise-corrected runs remove the gradient-noise inflation") {
  // overdamped spec, known isotropic gradient noise: the corrected driving
  // noise restores the noise-free stationary variance exactly in law
  GaussianPotential model(GaussianTarget::standard(1));
  const double h = 0.1;
  const double v = 1.0;
  RunConfig cfg;
  cfg.iterations = 600000;
  cfg.burn_in = 100000;
  cfg.estimator = EstimatorChoice::full;
  cfg.schedule = StepSchedule::fixed(h);

  const GradientOracle noisy = make_noisy_oracle(make_full_oracle(model), v);
  RngStream rng(212);
  const NoiseCorrection corr = NoiseCorrection::with(Matrix(v * Matrix::Identity(1, 1)));
  const RunResult res = run_recipe(1, make_sgld_spec(1), noisy, cfg, rng, corr);
  REQUIRE(!res.divergence.has_value());
  const auto col = res.trace.states.col(0);
  const double mean = col.mean();
  const double var = (col.array() - mean).square().sum() / (col.size() - 1);
  REQUIRE(var == Approx(1.0 / (1.0 - h / 4.0)).epsilon(0.04));
}

TEST_CASE("small-step stationary variances of the shipped dynamics") {
  GaussianPotential model(GaussianTarget::standard(1));
  std::uint64_t seed = 213;
  for (const double h : {0.05, 0.01}) {
    RunConfig cfg;
    cfg.iterations = 600000;
    cfg.burn_in = 100000;
    cfg.estimator = EstimatorChoice::full;
    cfg.schedule = StepSchedule::fixed(h);

    const auto variance = [](const Trace& tr) {
      const auto col = tr.states.col(0);
      const double mean = col.mean();
      return (col.array() - mean).square().sum() / (col.size() - 1);
    };
    // 3 sigma of the variance estimate for a chain with forgetting rate r
    const auto band = [&](double r) {
      const double a = 1.0 - r;
      const double tau_int = (1.0 + a * a) / (1.0 - a * a);
      return 3.0 * std::sqrt(2.0 * tau_int / (cfg.iterations - cfg.burn_in));
    };

    {
      RngStream rng(seed++);
      const RunResult res = run_sgld(model, cfg, rng);
      REQUIRE(variance(res.trace) ==
              Approx(1.0 / (1.0 - h / 4.0)).epsilon(band(h / 2.0)));
    }
    {
      RngStream rng(seed++);
      const RunResult res = run_recipe(model, make_sghmc_spec(1, 1.0), cfg, rng);
      REQUIRE(variance(res.trace) == Approx(1.0).epsilon(2.0 * h + band(h / 4.0)));
    }
    {
      RngStream rng(seed++);
      const RunResult res = run_recipe(model, make_sgnht_spec(1, 1.0), cfg, rng);
      REQUIRE(variance(res.trace) == Approx(1.0).epsilon(2.0 * h + band(h / 4.0)));
    }
  }
}
