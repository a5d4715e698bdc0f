#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>

#include "sgmcmc/core.hpp"

namespace sgmcmc {

/// Block layout of an augmented sampler state: parameters theta, an optional
/// momentum block of the same length, and an optional scalar thermostat.
struct StateLayout {
  Index theta_dim = 0;
  bool has_momentum = false;
  bool has_thermostat = false;

  Index state_dim() const {
    return theta_dim * (has_momentum ? 2 : 1) + (has_thermostat ? 1 : 0);
  }
  auto theta(const Vector& zeta) const { return zeta.head(theta_dim); }
  auto momentum(const Vector& zeta) const { return zeta.segment(theta_dim, theta_dim); }
  double thermostat(const Vector& zeta) const { return zeta[state_dim() - 1]; }
};

/// One sampler from the general SDE family
///   d zeta = (1/2) b(zeta) dt + sqrt(D(zeta)) dB,
///   b = -(D + Q) grad H + Gamma,   Gamma_i = sum_j d(D_ij + Q_ij)/d zeta_j,
/// with D positive semi-definite and Q skew-symmetric. Any choice satisfying
/// those constraints leaves exp(-H) stationary, so a spec is defined entirely
/// by its layout, H-gradient assembly and matrix functions. The matrix
/// callbacks write into caller-owned storage sized state_dim x state_dim.
struct RecipeSpec {
  std::string name;
  StateLayout layout;
  bool constant_diffusion = false;  // D does not depend on the state
  bool constant_curl = false;       // Q does not depend on the state

  std::function<void(const Vector&, Matrix&)> diffusion;  // D(zeta)
  std::function<void(const Vector&, Matrix&)> curl;       // Q(zeta)
  std::function<void(const Vector&, Vector&)> gamma;      // Gamma(zeta)
  // Assembles grad H(zeta) from a stochastic gradient of U plus the
  // analytic blocks (momentum, thermostat).
  std::function<void(const Vector&, const Vector&, Vector&)> grad_h;

  // Optional explicit factor L(zeta) with L L^T = D(zeta).
  std::function<void(const Vector&, Matrix&)> sqrt_diffusion;

  double thermostat_init = 0.0;
};

/// Gradient-noise handling for the injected Gaussian: when enabled the
/// per-step covariance becomes D - h * B with B = (1/4)(D+Q) V (D+Q)^T and
/// V the gradient-noise covariance lifted to the state space. The corrected
/// covariance must stay PSD or the step fails loudly.
struct NoiseCorrection {
  bool enabled = false;
  Matrix v_hat;  // d x d covariance of the theta-gradient estimate

  static NoiseCorrection off() { return {}; }
  static NoiseCorrection with(Matrix v) {
    NoiseCorrection c;
    c.enabled = true;
    c.v_hat = std::move(v);
    return c;
  }
};

/// Embeds a d x d theta-gradient covariance into the full state space
/// (zero rows/columns for momentum and thermostat blocks).
inline Matrix lift_theta_cov(const StateLayout& layout, const Matrix& v_hat) {
  if (v_hat.rows() != layout.theta_dim || v_hat.cols() != layout.theta_dim)
    throw ArgumentError("lift_theta_cov: v_hat must be theta_dim x theta_dim");
  Matrix v = Matrix::Zero(layout.state_dim(), layout.state_dim());
  v.topLeftCorner(layout.theta_dim, layout.theta_dim) = v_hat;
  return v;
}

/// D - h*B with B = (1/4)(D+Q) V (D+Q)^T. Eigenvalues in [-1e-10, 0) are
/// clipped to zero; anything below that margin is infeasible and reported
/// with the offending eigenvalue (the step size is too large to correct).
inline Matrix corrected_noise_cov(const Matrix& D, const Matrix& Q, const Matrix& v_state,
                                  double h) {
  if ((v_state - v_state.transpose()).cwiseAbs().maxCoeff() > 1e-9)
    throw ArgumentError("corrected_noise_cov: V must be symmetric");
  const Matrix A = D + Q;
  Matrix cov = D - (h / 4.0) * (A * v_state * A.transpose());
  cov = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < -1e-10) {
    throw CorrectionInfeasibleError(
        "corrected noise covariance is not PSD (min eigenvalue " +
            std::to_string(min_eig) + "); reduce the step size",
        min_eig);
  }
  if (min_eig < 0.0) {
    const Vector clipped = es.eigenvalues().cwiseMax(0.0);
    cov = es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose();
  }
  return cov;
}

/// b(zeta) = -(D + Q) grad H + Gamma.
inline Vector drift(const RecipeSpec& spec, const Vector& zeta, const Vector& grad_h_estimate) {
  const Index s = spec.layout.state_dim();
  if (zeta.size() != s || grad_h_estimate.size() != s)
    throw ArgumentError("drift: state/gradient length does not match the spec layout");
  Matrix D(s, s), Q(s, s);
  Vector gamma(s);
  spec.diffusion(zeta, D);
  spec.curl(zeta, Q);
  spec.gamma(zeta, gamma);
  return -((D + Q) * grad_h_estimate) + gamma;
}

namespace detail {

inline bool is_diagonal(const Matrix& m) {
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) {
      if (i != j && m(i, j) != 0.0) return false;
    }
  }
  return true;
}

struct NoiseFactor {
  bool diagonal = false;
  Vector sqrt_diag;  // when diagonal
  Matrix dense;      // otherwise

  void apply(const Vector& z, Vector& out) const {
    if (diagonal) {
      out = sqrt_diag.cwiseProduct(z);
    } else {
      out.noalias() = dense * z;
    }
  }
};

inline NoiseFactor factor_covariance(const Matrix& cov, bool from_correction) {
  NoiseFactor f;
  if (is_diagonal(cov)) {
    f.diagonal = true;
    f.sqrt_diag.resize(cov.rows());
    for (Index i = 0; i < cov.rows(); ++i) {
      const double v = cov(i, i);
      if (v < -1e-10) {
        if (from_correction)
          throw CorrectionInfeasibleError(
              "corrected noise covariance has negative diagonal " + std::to_string(v), v);
        throw ArgumentError("diffusion matrix has negative diagonal " + std::to_string(v));
      }
      f.sqrt_diag[i] = v > 0.0 ? std::sqrt(v) : 0.0;
    }
    return f;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (cov + cov.transpose()));
  const double min_eig = es.eigenvalues().minCoeff();
  if (min_eig < -1e-10) {
    if (from_correction)
      throw CorrectionInfeasibleError(
          "corrected noise covariance is not PSD (min eigenvalue " + std::to_string(min_eig) +
              ")",
          min_eig);
    throw ArgumentError("diffusion matrix is not PSD (min eigenvalue " +
                        std::to_string(min_eig) + ")");
  }
  f.dense = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
            es.eigenvectors().transpose();
  return f;
}

}  // namespace detail

/// One Euler transition
///   zeta' = zeta + (h/2) * b(zeta) + sqrt(h) * L z,   z ~ N(0, I),
/// with L L^T = D (or the corrected covariance). Exactly state_dim() normals
/// are consumed per step regardless of zero diffusion blocks. Constant
/// matrices and their factor are evaluated once at construction.
class StepKernel {
 public:
  StepKernel(const RecipeSpec& spec, double h, NoiseCorrection correction = NoiseCorrection::off())
      : spec_(&spec), h_(h), sqrt_h_(std::sqrt(h)), correction_(std::move(correction)) {
    if (!(h > 0.0)) throw ArgumentError("StepKernel: step size must be positive");
    const Index s = spec.layout.state_dim();
    d_.resize(s, s);
    q_.resize(s, s);
    gamma_.resize(s);
    grad_h_.resize(s);
    z_.resize(s);
    noise_.resize(s);
    if (correction_.enabled) {
      v_state_ = lift_theta_cov(spec.layout, correction_.v_hat);
    }
    if (spec.constant_diffusion) spec.diffusion(Vector::Zero(s), d_);
    if (spec.constant_curl) spec.curl(Vector::Zero(s), q_);
    const bool factor_fixed =
        spec.constant_diffusion && (!correction_.enabled || spec.constant_curl);
    if (factor_fixed) {
      factor_ = build_factor(Vector::Zero(s), d_, q_);
      factor_cached_ = true;
    }
  }

  double step_size() const { return h_; }

  Vector step(const Vector& zeta, const Vector& grad_u_estimate, RngStream& rng) {
    const StateLayout& layout = spec_->layout;
    const Index s = layout.state_dim();
    if (zeta.size() != s) throw ArgumentError("StepKernel: state length mismatch");
    if (grad_u_estimate.size() != layout.theta_dim)
      throw ArgumentError("StepKernel: gradient estimate length mismatch");

    if (!spec_->constant_diffusion) spec_->diffusion(zeta, d_);
    if (!spec_->constant_curl) spec_->curl(zeta, q_);
    spec_->gamma(zeta, gamma_);
    spec_->grad_h(zeta, grad_u_estimate, grad_h_);

    Vector next = zeta + (h_ / 2.0) * (-((d_ + q_) * grad_h_) + gamma_);
    if (!factor_cached_) factor_ = build_factor(zeta, d_, q_);
    rng.normal_vec(z_);
    factor_.apply(z_, noise_);
    next += sqrt_h_ * noise_;
    return next;
  }

 private:
  detail::NoiseFactor build_factor(const Vector& zeta, const Matrix& D, const Matrix& Q) const {
    if (!correction_.enabled) {
      if (spec_->sqrt_diffusion) {
        Matrix L(D.rows(), D.cols());
        spec_->sqrt_diffusion(zeta, L);
        detail::NoiseFactor f;
        f.dense = L;
        return f;
      }
      return detail::factor_covariance(D, /*from_correction=*/false);
    }
    return detail::factor_covariance(corrected_noise_cov(D, Q, v_state_, h_),
                                     /*from_correction=*/true);
  }

  const RecipeSpec* spec_;
  double h_;
  double sqrt_h_;
  NoiseCorrection correction_;
  Matrix v_state_;
  Matrix d_, q_;
  Vector gamma_, grad_h_, z_, noise_;
  detail::NoiseFactor factor_;
  bool factor_cached_ = false;
};

inline Vector euler_step(const RecipeSpec& spec, const Vector& zeta, const Vector& grad_u_estimate,
                         double h, NoiseCorrection correction, RngStream& rng) {
  StepKernel kernel(spec, h, std::move(correction));
  Vector next = kernel.step(zeta, grad_u_estimate, rng);
  if (!all_finite(next) || next.cwiseAbs().maxCoeff() > kDivergenceGuard)
    throw DivergenceError("euler_step: state diverged");
  return next;
}

/// Checks the structural invariants of a spec at random states: Q skewness,
/// D symmetric PSD, and Gamma against central finite differences of the
/// row-wise divergence of D + Q. Throws on the first violation.
inline void validate_recipe(const RecipeSpec& spec, Index trials, RngStream& rng,
                            double skew_tol = 1e-12, double psd_tol = 1e-10,
                            double gamma_tol = 1e-5) {
  const Index s = spec.layout.state_dim();
  Matrix D(s, s), Q(s, s), Ap(s, s), Am(s, s), Dp(s, s), Qp(s, s);
  Vector gamma(s);
  const double eps = 1e-5;
  for (Index t = 0; t < trials; ++t) {
    const Vector zeta = rng.normal_vec(s);
    spec.diffusion(zeta, D);
    spec.curl(zeta, Q);
    spec.gamma(zeta, gamma);

    if ((Q + Q.transpose()).cwiseAbs().maxCoeff() > skew_tol)
      throw ArgumentError(spec.name + ": curl matrix is not skew-symmetric");
    if ((D - D.transpose()).cwiseAbs().maxCoeff() > 1e-12)
      throw ArgumentError(spec.name + ": diffusion matrix is not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> es(D);
    if (es.eigenvalues().minCoeff() < -psd_tol)
      throw ArgumentError(spec.name + ": diffusion matrix is not PSD");

    // Gamma_i vs sum_j d(D_ij + Q_ij)/d zeta_j.
    Vector gamma_fd = Vector::Zero(s);
    Vector zp = zeta, zm = zeta;
    for (Index j = 0; j < s; ++j) {
      zp[j] = zeta[j] + eps;
      zm[j] = zeta[j] - eps;
      spec.diffusion(zp, Dp);
      spec.curl(zp, Qp);
      Ap = Dp + Qp;
      spec.diffusion(zm, Dp);
      spec.curl(zm, Qp);
      Am = Dp + Qp;
      gamma_fd += (Ap.col(j) - Am.col(j)) / (2.0 * eps);
      zp[j] = zeta[j];
      zm[j] = zeta[j];
    }
    for (Index i = 0; i < s; ++i) {
      const double scale = std::max(1.0, std::abs(gamma_fd[i]));
      if (std::abs(gamma[i] - gamma_fd[i]) > gamma_tol * scale)
        throw ArgumentError(spec.name + ": Gamma[" + std::to_string(i) +
                            "] does not match the finite-difference divergence");
    }
  }
}

/// Overdamped Langevin sampler: state = theta, H = U, D = I, Q = 0.
/// With the full-data gradient this is the unadjusted Langevin algorithm;
/// with a subsampled gradient it is standard stochastic-gradient Langevin.
inline RecipeSpec make_sgld_spec(Index d) {
  if (d < 1) throw ArgumentError("make_sgld_spec: dimension must be >= 1");
  RecipeSpec spec;
  spec.name = "sgld";
  spec.layout = StateLayout{d, false, false};
  spec.constant_diffusion = true;
  spec.constant_curl = true;
  spec.diffusion = [](const Vector&, Matrix& D) { D.setIdentity(); };
  spec.curl = [](const Vector&, Matrix& Q) { Q.setZero(); };
  spec.gamma = [](const Vector&, Vector& g) { g.setZero(); };
  spec.grad_h = [](const Vector&, const Vector& grad_u, Vector& out) { out = grad_u; };
  return spec;
}

/// Underdamped Langevin sampler with friction C:
///   state = (theta, rho), H = U + rho'rho/2,
///   D = diag(0, C), Q = [[0, -I], [I, 0]].
/// C = 0 recovers Euler Hamiltonian dynamics, which only conserves energy
/// when the gradients are exact; with noisy gradients it accumulates the
/// noise and diverges.
inline RecipeSpec make_sghmc_spec(Index d, const Matrix& friction) {
  if (d < 1) throw ArgumentError("make_sghmc_spec: dimension must be >= 1");
  if (friction.rows() != d || friction.cols() != d)
    throw ArgumentError("make_sghmc_spec: friction must be d x d");
  if ((friction - friction.transpose()).cwiseAbs().maxCoeff() > 1e-12)
    throw ArgumentError("make_sghmc_spec: friction must be symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(friction);
  if (es.eigenvalues().minCoeff() < -1e-10)
    throw ArgumentError("make_sghmc_spec: friction must be PSD");

  RecipeSpec spec;
  spec.name = "sghmc";
  spec.layout = StateLayout{d, true, false};
  spec.constant_diffusion = true;
  spec.constant_curl = true;
  spec.diffusion = [d, friction](const Vector&, Matrix& D) {
    D.setZero();
    D.bottomRightCorner(d, d) = friction;
  };
  spec.curl = [d](const Vector&, Matrix& Q) {
    Q.setZero();
    Q.topRightCorner(d, d) = -Matrix::Identity(d, d);
    Q.bottomLeftCorner(d, d) = Matrix::Identity(d, d);
  };
  spec.gamma = [](const Vector&, Vector& g) { g.setZero(); };
  spec.grad_h = [d](const Vector& zeta, const Vector& grad_u, Vector& out) {
    out.head(d) = grad_u;
    out.tail(d) = zeta.tail(d);
  };
  return spec;
}

inline RecipeSpec make_sghmc_spec(Index d, double friction) {
  return make_sghmc_spec(d, Matrix(friction * Matrix::Identity(d, d)));
}

/// Thermostat-augmented sampler: state = (theta, rho, eta),
///   H = U + rho'rho/2 + (eta - A)^2 / (2d),
///   D = diag(0, A*I, 0),
///   Q couples rho and eta through rho/d blocks, giving the thermostat the
///   drift eta_dot = rho'rho/d - 1 (the -1 is the divergence term Gamma).
/// The eta column of Q is the transpose of the eta row, which is what the
/// Gamma finite-difference validation pins down.
inline RecipeSpec make_sgnht_spec(Index d, double a) {
  if (d < 1) throw ArgumentError("make_sgnht_spec: dimension must be >= 1");
  if (!(a > 0.0)) throw ArgumentError("make_sgnht_spec: A must be positive");

  RecipeSpec spec;
  spec.name = "sgnht";
  spec.layout = StateLayout{d, true, true};
  spec.constant_diffusion = true;
  spec.constant_curl = false;
  spec.thermostat_init = a;
  spec.diffusion = [d, a](const Vector&, Matrix& D) {
    D.setZero();
    D.block(d, d, d, d) = a * Matrix::Identity(d, d);
  };
  spec.curl = [d](const Vector& zeta, Matrix& Q) {
    const Index s = 2 * d + 1;
    Q.setZero();
    Q.block(0, d, d, d) = -Matrix::Identity(d, d);
    Q.block(d, 0, d, d) = Matrix::Identity(d, d);
    const auto rho = zeta.segment(d, d);
    Q.block(d, s - 1, d, 1) = rho / static_cast<double>(d);
    Q.block(s - 1, d, 1, d) = -rho.transpose() / static_cast<double>(d);
  };
  spec.gamma = [d](const Vector&, Vector& g) {
    g.setZero();
    g[2 * d] = -1.0;
  };
  spec.grad_h = [d, a](const Vector& zeta, const Vector& grad_u, Vector& out) {
    out.head(d) = grad_u;
    out.segment(d, d) = zeta.segment(d, d);
    out[2 * d] = (zeta[2 * d] - a) / static_cast<double>(d);
  };
  return spec;
}

}  // namespace sgmcmc
