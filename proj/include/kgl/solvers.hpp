// Estimators for graph learning from two-side-dependent signals.
//
// The joint objective over a Laplacian L (Tr(L) = m, L1 = 0, nonpositive
// off-diagonals) and coefficients A is
//
//   J(L, A) = ||M o (Y - K_z A K_x)||_F^2 + lambda Tr(K_z A K_x A^T)
//           + rho Tr(A K_x L K_x A^T K_z) + psi ||L||_F^2
//
// minimized by alternating an exact L-update (a nonnegative quadratic
// programme over edge weights on a scaled simplex) with an exact A-update
// (closed form through m- and n-sized eigendecompositions, per-row solves
// when the observation side is independent, conjugate gradients on the
// masked normal system, or gradient descent as the fallback for singular
// node kernels). One-sided variants replace K_z or K_x by the identity.
// Baselines: plain smoothness-based graph learning, its two-step denoising
// form, and the observation-side-only joint model.

#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kgl/datagen.hpp"
#include "kgl/errors.hpp"
#include "kgl/graph.hpp"
#include "kgl/kernels.hpp"
#include "kgl/numerics.hpp"

namespace kgl {

enum class Variant { KGL, KGL_N, KGL_O };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::KGL: return "KGL";
    case Variant::KGL_N: return "KGL-N";
    case Variant::KGL_O: return "KGL-O";
  }
  return "?";
}

struct Hyperparams {
  double lambda = 1e-2;  // function-complexity weight
  double rho = 1e-2;     // graph-smoothness weight
  double psi = 1e-5;     // Frobenius weight on L
  double gamma = 1e-4;   // gradient-descent step size
  double tol = 1e-6;     // outer-loop increment tolerance (epsilon)
  int max_outer = 50;
  double qp_tol = 1e-9;  // relative objective change in the L-update QP
  std::int64_t qp_max_iter = 20000;
  double cg_tol = 1e-10;
  std::int64_t cg_max_iter = 10000;
  double gd_tol = 1e-8;  // gradient-norm tolerance of the fallback A-update
  std::int64_t gd_max_iter = 200000;

  void validate() const {
    if (!(lambda > 0 && rho > 0 && psi > 0 && gamma > 0 && tol > 0 &&
          qp_tol > 0 && cg_tol > 0 && gd_tol > 0)) {
      throw InvalidConfig("Hyperparams: weights and tolerances must be > 0");
    }
    if (gamma > 1e-4) {
      throw InvalidConfig("Hyperparams: gamma must be <= 1e-4");
    }
    if (max_outer < 1 || qp_max_iter < 1 || cg_max_iter < 1 ||
        gd_max_iter < 1) {
      throw InvalidConfig("Hyperparams: iteration caps must be >= 1");
    }
  }
};

struct FitResult {
  Graph graph;             // estimated Laplacian as a weight vector
  MatrixXd coefficients;   // n x m A-hat
  std::vector<double> objective_trace;
  int iterations = 0;
  bool converged = false;
  double wall_time_ms = 0.0;
  std::string variant;
};

namespace detail {

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

inline double kgl_objective(const MatrixXd& y, const MatrixXd& k_x,
                            const MatrixXd& k_z, const MatrixXd& lap,
                            const MatrixXd& a, const Hyperparams& hp,
                            const MatrixXd* mask = nullptr) {
  MatrixXd residual = y - k_z * a * k_x;
  if (mask != nullptr) residual = residual.cwiseProduct(*mask);
  const MatrixXd kz_a = k_z * a;
  const MatrixXd a_kx = a * k_x;
  const double fit_term = residual.squaredNorm();
  const double complexity = kz_a.cwiseProduct(a_kx).sum();
  const double smoothness = kz_a.cwiseProduct(a_kx * lap * k_x).sum();
  return fit_term + hp.lambda * complexity + hp.rho * smoothness +
         hp.psi * lap.squaredNorm();
}

/// Y-hat = K_z A K_x.
inline MatrixXd predict(const MatrixXd& a, const MatrixXd& k_x,
                        const MatrixXd& k_z) {
  return k_z * a * k_x;
}

// ---------------------------------------------------------------------------
// A-updates
// ---------------------------------------------------------------------------

/// Exact minimizer of the A-subproblem through the factorization
/// H = ((rho L + lambda K_x^-1) (+) K_z)(K_x (x) I_n): eigendecompose the
/// two small matrices, rescale entrywise by the pairwise eigenvalue sums,
/// and map back. Requires only that K_x is invertible; K_z may be singular.
/// Cost O(n^3 + m^3 + n m^2 + n^2 m).
inline MatrixXd a_step_closed_form(const MatrixXd& y, const KernelMatrix& k_x,
                                   const KernelMatrix& k_z,
                                   const MatrixXd& lap, double lambda,
                                   double rho) {
  if (!k_x.is_invertible()) {
    throw SingularKernel("a_step_closed_form: K_x is numerically singular");
  }
  const Eigen::Index m = k_x.size();
  const Eigen::Index n = k_z.size();
  const SymEig& ex = k_x.eig();
  const SymEig& ez = k_z.eig();
  AllocGuard::check(static_cast<std::size_t>(m), static_cast<std::size_t>(m));
  const MatrixXd kx_inv = ex.map_values([](double v) { return 1.0 / v; });
  const SymEig ec = sym_eig(rho * lap + lambda * kx_inv);  // U_x, d_x
  AllocGuard::check(static_cast<std::size_t>(n), static_cast<std::size_t>(m));
  MatrixXd b = ez.vectors.transpose() * y * ec.vectors;
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) {
      b(i, j) /= ec.values[j] + std::max(ez.values[i], 0.0);
    }
  }
  return ez.vectors * b * ec.vectors.transpose() * kx_inv;
}

/// Gradient of the vectorized A-subproblem,
/// (K^2 + lambda K + rho S (x) K_z) a - K y with S = K_x L K_x,
/// evaluated with Kronecker-structured products only.
inline VectorXd a_subproblem_gradient(const MatrixXd& k_x, const MatrixXd& k_z,
                                      const MatrixXd& s, double lambda,
                                      double rho, const VectorXd& ky,
                                      const VectorXd& a) {
  const VectorXd t = kron_matvec(k_x, k_z, a);
  return kron_matvec(k_x, k_z, t) + lambda * t +
         rho * kron_matvec(s, k_z, a) - ky;
}

/// Masked counterpart: (K diag(m) K + lambda K + rho S (x) K_z) a
/// - K vec(M o Y).
inline VectorXd a_subproblem_gradient_masked(
    const MatrixXd& k_x, const MatrixXd& k_z, const MatrixXd& s, double lambda,
    double rho, const VectorXd& mask_vec, const VectorXd& k_masked_y,
    const VectorXd& a) {
  const VectorXd t = kron_matvec(k_x, k_z, a);
  return kron_matvec(k_x, k_z, mask_vec.cwiseProduct(t)) + lambda * t +
         rho * kron_matvec(s, k_z, a) - k_masked_y;
}

/// Gradient descent on vec(A) from A = 0. The first step uses the supplied
/// step size (so one step from zero lands on gamma * K y); later steps use
/// the exact line-search step for the quadratic, which costs the same one
/// operator application per iteration. Stops once the gradient infinity
/// norm falls below tol * ||K y||_inf. Handles singular kernels.
inline MatrixXd a_step_gradient(const MatrixXd& y, const MatrixXd& k_x,
                                const MatrixXd& k_z, const MatrixXd& lap,
                                double lambda, double rho, double gamma,
                                double tol = 1e-8,
                                std::int64_t max_iter = 200000,
                                ConvergenceReport* report = nullptr) {
  const Eigen::Index m = k_x.rows();
  const Eigen::Index n = k_z.rows();
  const MatrixXd s = k_x * lap * k_x;
  const VectorXd ky = kron_matvec(k_x, k_z, VectorXd(as_vector(y)));
  const double target = tol * ky.cwiseAbs().maxCoeff();
  auto apply = [&](const VectorXd& v) {
    const VectorXd t = kron_matvec(k_x, k_z, v);
    return VectorXd(kron_matvec(k_x, k_z, t) + lambda * t +
                    rho * kron_matvec(s, k_z, v));
  };
  VectorXd a = VectorXd::Zero(m * n);
  VectorXd g = -ky;  // gradient at zero
  double quadratic = 0.0;  // a^T C a - 2 a^T ky, tracked for the divergence guard
  int increases = 0;
  std::int64_t it = 0;
  for (; it < max_iter; ++it) {
    if (g.cwiseAbs().maxCoeff() <= target) break;
    double step = gamma;
    VectorXd cg;
    if (it > 0) {
      cg = apply(g);
      if (!cg.allFinite()) {
        throw NumericalFailure("a_step_gradient: non-finite operator output");
      }
      const double curvature = g.dot(cg);
      if (curvature > 0.0) step = g.squaredNorm() / curvature;
    }
    const VectorXd a_next = a - step * g;
    // The gradient recurrence g - step * C g is refreshed periodically so
    // round-off cannot accumulate across long runs.
    const VectorXd g_next =
        (it == 0 || it % 512 == 511) ? VectorXd(apply(a_next) - ky)
                                     : VectorXd(g - step * cg);
    const double q_next = a_next.dot(g_next) - a_next.dot(ky);
    if (q_next > quadratic) {
      if (++increases >= 5) {
        throw StepSizeTooLarge(
            "a_step_gradient: objective increased 5 consecutive steps");
      }
    } else {
      increases = 0;
    }
    a = a_next;
    g = g_next;
    quadratic = q_next;
  }
  if (report != nullptr) {
    const double ky_max = ky.cwiseAbs().maxCoeff();
    *report = {g.cwiseAbs().maxCoeff() <= target, it,
               ky_max > 0 ? g.cwiseAbs().maxCoeff() / ky_max : 0.0};
  }
  return MatrixXd(as_matrix(a, n, m));
}

/// Masked A-update: solves the stationarity system
/// (diag(m) K + lambda I + rho (L K_x (x) I_n)) a = vec(M o Y)
/// by conjugate gradients on its symmetrized form. The similarity transform
/// p = K^{1/2} a turns the system into
///   (K^{1/2} diag(m) K^{1/2} + lambda I + rho (K_x^{1/2} L K_x^{1/2} (x) I))
///     p = K^{1/2} vec(M o Y),
/// which is symmetric with spectrum bounded below by lambda, so CG converges
/// at a rate set by lambda rather than by the kernel conditioning. Every
/// operator application is Kronecker-structured. Kernels are assumed PD in
/// exact arithmetic (RBF, graph smoothing); numerical rank deficiency only
/// truncates directions that carry no fit signal, and the returned A is the
/// unique minimizer on the range of K.
inline MatrixXd a_step_masked(const MatrixXd& y, const MatrixXd& mask,
                              const KernelMatrix& k_x, const KernelMatrix& k_z,
                              const MatrixXd& lap, double lambda, double rho,
                              double cg_tol = 1e-10,
                              std::int64_t cg_max_iter = 10000,
                              const MatrixXd* warm_start = nullptr,
                              ConvergenceReport* report = nullptr) {
  const Eigen::Index m = k_x.size();
  const Eigen::Index n = k_z.size();
  if (mask.rows() != n || mask.cols() != m) {
    throw InvalidInput("a_step_masked: mask dimensions do not match Y");
  }
  const SymEig& ex = k_x.eig();
  const SymEig& ez = k_z.eig();
  auto spectral_pow = [](const SymEig& eig, double power) {
    const double cutoff = 1e-12 * eig.values.cwiseAbs().maxCoeff();
    return eig.map_values([=](double v) {
      return v > cutoff ? std::pow(v, power) : 0.0;
    });
  };
  AllocGuard::check(static_cast<std::size_t>(m), static_cast<std::size_t>(m));
  const MatrixXd kx_sqrt = spectral_pow(ex, 0.5);
  const MatrixXd kx_isqrt = spectral_pow(ex, -0.5);
  AllocGuard::check(static_cast<std::size_t>(n), static_cast<std::size_t>(n));
  const MatrixXd kz_sqrt = spectral_pow(ez, 0.5);
  const MatrixXd kz_isqrt = spectral_pow(ez, -0.5);
  const MatrixXd g_x = kx_sqrt * lap * kx_sqrt;
  const MatrixXd eye_n = MatrixXd::Identity(n, n);
  const VectorXd mask_vec = VectorXd(as_vector(mask));
  const MatrixXd masked_y = mask.cwiseProduct(y);
  const VectorXd b =
      kron_matvec(kx_sqrt, kz_sqrt, VectorXd(as_vector(masked_y)));
  auto op = [&](const VectorXd& p) {
    const VectorXd t = kron_matvec(kx_sqrt, kz_sqrt, p);
    return VectorXd(kron_matvec(kx_sqrt, kz_sqrt, mask_vec.cwiseProduct(t)) +
                    lambda * p + rho * kron_matvec(g_x, eye_n, p));
  };
  std::optional<VectorXd> warm;
  if (warm_start != nullptr) {
    warm = kron_matvec(kx_sqrt, kz_sqrt, VectorXd(as_vector(*warm_start)));
  }
  CgResult solve = conjugate_gradient(op, b, cg_tol, cg_max_iter,
                                      warm ? &*warm : nullptr);
  if (report != nullptr) *report = solve.report;
  if (!solve.report.converged) {
    throw ConvergenceError("a_step_masked", solve.report);
  }
  const VectorXd a = kron_matvec(kx_isqrt, kz_isqrt, solve.x);
  return MatrixXd(as_matrix(a, n, m));
}

/// A-update for the node-side-only model (K_z = I): the problem splits into
/// independent per-row solves a_i = pinv(K_x^2 + lambda K_x + rho S) K_x y_i,
/// which stack to A = Y K_x pinv(G).
inline MatrixXd a_step_node_side(const MatrixXd& y, const KernelMatrix& k_x,
                                 const MatrixXd& lap, double lambda,
                                 double rho) {
  const MatrixXd& kx = k_x.gram();
  const MatrixXd s = kx * lap * kx;
  const MatrixXd g = kx * kx + lambda * kx + rho * s;
  return y * kx * pseudo_inverse(sym_eig(g));
}

// ---------------------------------------------------------------------------
// L-update
// ---------------------------------------------------------------------------

struct QpOptions {
  double tol = 1e-9;       // relative objective change
  double stat_tol = 1e-8;  // infinity norm of the projected-gradient step
  std::int64_t max_iter = 20000;
};

inline QpOptions qp_options(const Hyperparams& hp) {
  QpOptions opts;
  opts.tol = hp.qp_tol;
  opts.max_iter = hp.qp_max_iter;
  return opts;
}

/// Exact weight-space reformulation of
///   min_{L in L, Tr(L) = m}  rho Tr(P L P^T) + psi ||L||_F^2:
/// over w >= 0 with sum w = m/2, minimize
///   f(w) = rho z.w + psi (2 w.w + ||S_inc w||^2),
/// where z_k is the squared distance between the two columns of P named by
/// pair k and S_inc maps pair weights to node degrees. Solved by projected
/// gradient with Armijo backtracking (c = 1e-4, shrink 0.5) and the exact
/// simplex projection; warm-startable from the previous outer iteration.
/// Termination requires both a relative objective change below tol and a
/// projected step below stat_tol: the objective-change rule alone fires
/// spuriously right after a warm start, when a single short step barely
/// moves the objective but the iterate is still drifting.
inline Graph l_step(const MatrixXd& p, double rho, double psi, Eigen::Index m,
                    const VectorXd* warm_start = nullptr, QpOptions opts = {},
                    ConvergenceReport* report = nullptr) {
  if (!p.allFinite()) throw InvalidInput("l_step: non-finite P");
  if (p.cols() != m) throw InvalidInput("l_step: P must have m columns");
  PairIncidence inc(m);
  const Eigen::Index k = inc.pair_count();
  const double total = static_cast<double>(m) / 2.0;
  VectorXd z(k);
  for (Eigen::Index e = 0; e < k; ++e) {
    const auto& [j, jp] = inc.pair(e);
    z[e] = (p.col(j) - p.col(jp)).squaredNorm();
  }
  auto value = [&](const VectorXd& w) {
    const VectorXd d = inc.degrees(w);
    return rho * z.dot(w) + psi * (2.0 * w.squaredNorm() + d.squaredNorm());
  };
  auto gradient = [&](const VectorXd& w) {
    return VectorXd(rho * z + psi * (4.0 * w + 2.0 * inc.pair_sums(inc.degrees(w))));
  };

  VectorXd w = (warm_start != nullptr)
                   ? project_scaled_simplex(*warm_start, total)
                   : VectorXd::Constant(k, total / static_cast<double>(k));
  double f = value(w);
  // Lipschitz constant of the gradient is psi * 4m; near-zero psi turns the
  // problem into a linear programme where a single long step reaches a
  // vertex, so the initial step is capped only by backtracking.
  double step = 1.0 / std::max(psi * 4.0 * static_cast<double>(m), 1e-12);
  bool converged = false;
  std::int64_t it = 0;
  for (; it < opts.max_iter && !converged; ++it) {
    const VectorXd g = gradient(w);
    bool accepted = false;
    bool backtracked = false;
    for (int bt = 0; bt < 60; ++bt) {
      const VectorXd w_new = project_scaled_simplex(w - step * g, total);
      const VectorXd d = w_new - w;
      const double d_max = d.cwiseAbs().maxCoeff();
      if (d_max == 0.0) {  // fixed point of the projected step
        converged = true;
        accepted = true;
        break;
      }
      const double f_new = value(w_new);
      if (f_new <= f + 1e-4 * g.dot(d)) {
        if (std::abs(f - f_new) <= opts.tol * std::max(1.0, std::abs(f)) &&
            d_max <= opts.stat_tol) {
          converged = true;
        }
        w = w_new;
        f = f_new;
        accepted = true;
        break;
      }
      step *= 0.5;
      backtracked = true;
    }
    if (!accepted) {
      converged = true;  // step shrank to nothing; w is numerically stationary
      break;
    }
    if (!backtracked) step = std::min(step * 2.0, 1e14);
  }
  if (report != nullptr) *report = {converged, it, f};
  return Graph(m, w);
}

// ---------------------------------------------------------------------------
// Alternating-minimization drivers
// ---------------------------------------------------------------------------

namespace detail {

inline MatrixXd dispatch_a_step(const Dataset& ds, const KernelMatrix& k_x,
                                const KernelMatrix& k_z, const MatrixXd& lap,
                                const Hyperparams& hp, Variant variant,
                                const MatrixXd& current_a) {
  if (ds.mask) {
    return a_step_masked(ds.y, *ds.mask, k_x, k_z, lap, hp.lambda, hp.rho,
                         hp.cg_tol, hp.cg_max_iter, &current_a);
  }
  if (variant == Variant::KGL_N) {
    return a_step_node_side(ds.y, k_x, lap, hp.lambda, hp.rho);
  }
  if (k_x.is_invertible()) {
    return a_step_closed_form(ds.y, k_x, k_z, lap, hp.lambda, hp.rho);
  }
  return a_step_gradient(ds.y, k_x.gram(), k_z.gram(), lap, hp.lambda, hp.rho,
                         hp.gamma, hp.gd_tol, hp.gd_max_iter);
}

}  // namespace detail

/// Alternating minimization from A = 0, L-update first. Stops when both the
/// L and A increments fall below hp.tol in the infinity norm or max_outer is
/// reached. The objective trace records J(L_t, A_t) per outer iteration and
/// is non-increasing because both updates are exact minimizations.
inline FitResult kgl_fit(const Dataset& ds, const Hyperparams& hp,
                         Variant variant = Variant::KGL) {
  hp.validate();
  detail::Stopwatch watch;
  const Eigen::Index n = ds.n();
  const Eigen::Index m = ds.m();
  const KernelMatrix k_x =
      variant == Variant::KGL_O ? identity_kernel(m) : ds.k_x;
  const KernelMatrix k_z =
      variant == Variant::KGL_N ? identity_kernel(n) : ds.k_z;
  if (k_x.size() != m || k_z.size() != n) {
    throw InvalidInput("kgl_fit: kernel sizes do not match Y");
  }
  const MatrixXd kz_sqrt = k_z.sqrt();

  MatrixXd a = MatrixXd::Zero(n, m);
  MatrixXd lap, prev_lap, prev_a;
  VectorXd w;
  bool have_w = false;
  std::vector<double> trace;
  bool converged = false;
  int iterations = 0;
  const MatrixXd* mask = ds.mask ? &*ds.mask : nullptr;

  for (int t = 0; t < hp.max_outer; ++t) {
    const MatrixXd p = kz_sqrt * a * k_x.gram();
    Graph g = l_step(p, hp.rho, hp.psi, m, have_w ? &w : nullptr,
                     qp_options(hp));
    w = g.weights();
    have_w = true;
    lap = g.laplacian();
    a = detail::dispatch_a_step(ds, k_x, k_z, lap, hp, variant, a);
    trace.push_back(
        kgl_objective(ds.y, k_x.gram(), k_z.gram(), lap, a, hp, mask));
    iterations = t + 1;
    if (t > 0) {
      const double dl = (lap - prev_lap).cwiseAbs().maxCoeff();
      const double da = (a - prev_a).cwiseAbs().maxCoeff();
      if (std::max(dl, da) < hp.tol) {
        converged = true;
        break;
      }
    }
    prev_lap = lap;
    prev_a = a;
  }
  return FitResult{Graph(m, w),    std::move(a), std::move(trace),
                   iterations,     converged,    watch.ms(),
                   to_string(variant)};
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Smoothness-based graph learning: min Tr(Y L Y^T) + psi ||L||_F^2 over the
/// constraint set, i.e. a single L-update with P = Y.
inline Graph gl_fit(const MatrixXd& y, double psi, QpOptions opts = {}) {
  if (!(psi > 0.0)) throw InvalidConfig("gl_fit: psi must be > 0");
  return l_step(y, 1.0, psi, y.cols(), nullptr, opts);
}

struct TwoStepResult {
  Graph graph;
  MatrixXd y_hat;
  std::vector<double> objective_trace;
  int iterations = 0;
  bool converged = false;
  double wall_time_ms = 0.0;
};

/// Two-step graph learning with an identity denoising map, minimizing
///   (1/rho) ||Y - Y-hat||_F^2 + Tr(Y-hat L Y-hat^T) + psi ||L||_F^2
/// by alternating the L-update on P = Y-hat (identical in form to gl_fit)
/// with the closed-form signal update, rows of which solve
/// (I + rho L) y-hat_i = y_i. As rho -> 0 the scheme reduces to gl_fit on Y;
/// as rho -> infinity the rows of Y-hat are projected onto the nullspace of
/// the learned Laplacian.
inline TwoStepResult gl_2step_fit(const MatrixXd& y, double rho, double psi,
                                  double tol = 1e-6, int max_outer = 50,
                                  QpOptions opts = {}) {
  if (!(rho > 0.0 && psi > 0.0)) {
    throw InvalidConfig("gl_2step_fit: rho and psi must be > 0");
  }
  detail::Stopwatch watch;
  const Eigen::Index m = y.cols();
  MatrixXd y_hat = y;
  MatrixXd lap, prev_lap, prev_y_hat;
  VectorXd w;
  bool have_w = false;
  std::vector<double> trace;
  bool converged = false;
  int iterations = 0;
  for (int t = 0; t < max_outer; ++t) {
    Graph g = l_step(y_hat, 1.0, psi, m, have_w ? &w : nullptr, opts);
    w = g.weights();
    have_w = true;
    lap = g.laplacian();
    const MatrixXd shrink = MatrixXd::Identity(m, m) + rho * lap;
    y_hat = shrink.llt().solve(y.transpose()).transpose();
    trace.push_back((y - y_hat).squaredNorm() / rho +
                    (y_hat * lap).cwiseProduct(y_hat).sum() +
                    psi * lap.squaredNorm());
    iterations = t + 1;
    if (t > 0) {
      const double dl = (lap - prev_lap).cwiseAbs().maxCoeff();
      const double dy = (y_hat - prev_y_hat).cwiseAbs().maxCoeff();
      if (std::max(dl, dy) < tol) {
        converged = true;
        break;
      }
    }
    prev_lap = lap;
    prev_y_hat = y_hat;
  }
  return TwoStepResult{Graph(m, w), std::move(y_hat), std::move(trace),
                       iterations,  converged,        watch.ms()};
}

// ---------------------------------------------------------------------------
// Observation-side-only joint baseline
// ---------------------------------------------------------------------------

inline double kgl_agnostic_objective(const MatrixXd& y, const MatrixXd& k_z,
                                     const MatrixXd& lap, const MatrixXd& a,
                                     const Hyperparams& hp,
                                     const MatrixXd* mask = nullptr) {
  MatrixXd residual = y - k_z * a;
  if (mask != nullptr) residual = residual.cwiseProduct(*mask);
  const MatrixXd kz_a = k_z * a;
  return residual.squaredNorm() + hp.lambda * kz_a.cwiseProduct(a).sum() +
         hp.rho * (kz_a * lap).cwiseProduct(kz_a).sum() +
         hp.psi * lap.squaredNorm();
}

namespace detail {

// Stationarity (K_z + lambda I) A + rho K_z A L = Y solved in the joint
// eigenbases of K_z and L: entrywise division in the transformed domain.
inline MatrixXd agnostic_a_step(const MatrixXd& y, const KernelMatrix& k_z,
                                const MatrixXd& lap, double lambda,
                                double rho) {
  const SymEig& ez = k_z.eig();
  const SymEig el = sym_eig(lap);
  MatrixXd t = ez.vectors.transpose() * y * el.vectors;
  for (Eigen::Index j = 0; j < t.cols(); ++j) {
    const double theta = std::max(el.values[j], 0.0);
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      const double lz = std::max(ez.values[i], 0.0);
      t(i, j) /= lz + lambda + rho * lz * theta;
    }
  }
  return ez.vectors * t * el.vectors.transpose();
}

// Masked variant: the substitution B = K_z^{1/2} A symmetrizes the
// stationarity system into
//   K_z^{1/2}(M o (K_z^{1/2} B)) + lambda B + rho K_z B L = K_z^{1/2}(M o Y)
// whose spectrum is bounded below by lambda; solved with conjugate
// gradients, then mapped back through the pseudo-inverse square root.
inline MatrixXd agnostic_a_step_masked(const MatrixXd& y, const MatrixXd& mask,
                                       const KernelMatrix& k_z,
                                       const MatrixXd& lap, double lambda,
                                       double rho, double cg_tol,
                                       std::int64_t cg_max_iter,
                                       const MatrixXd* warm_start) {
  const Eigen::Index n = y.rows();
  const Eigen::Index m = y.cols();
  const SymEig& ez = k_z.eig();
  auto spectral_pow = [&](double power) {
    const double cutoff = 1e-12 * ez.values.cwiseAbs().maxCoeff();
    return ez.map_values([=](double v) {
      return v > cutoff ? std::pow(v, power) : 0.0;
    });
  };
  const MatrixXd kz_sqrt = spectral_pow(0.5);
  const MatrixXd kz_isqrt = spectral_pow(-0.5);
  const MatrixXd& kz = k_z.gram();
  const MatrixXd rhs = kz_sqrt * mask.cwiseProduct(y);
  auto op = [&](const VectorXd& v) {
    const MatrixXd b = as_matrix(v, n, m);
    MatrixXd out = kz_sqrt * mask.cwiseProduct(kz_sqrt * b) + lambda * b +
                   rho * kz * b * lap;
    return VectorXd(as_vector(out));
  };
  std::optional<VectorXd> warm;
  if (warm_start != nullptr) {
    warm = VectorXd(as_vector(MatrixXd(kz_sqrt * *warm_start)));
  }
  CgResult solve = conjugate_gradient(op, VectorXd(as_vector(rhs)), cg_tol,
                                      cg_max_iter, warm ? &*warm : nullptr);
  if (!solve.report.converged) {
    throw ConvergenceError("agnostic_a_step_masked", solve.report);
  }
  return kz_isqrt * as_matrix(solve.x, n, m);
}

}  // namespace detail

/// Joint model that regresses Y on the observation-side kernel only
/// (Y ~ K_z A) and measures smoothness through Tr(K_z A L A^T K_z); its
/// L-update therefore runs on P = K_z A. Alternation and stopping mirror
/// kgl_fit.
inline FitResult kgl_agnostic_fit(const Dataset& ds, const Hyperparams& hp) {
  hp.validate();
  detail::Stopwatch watch;
  const Eigen::Index n = ds.n();
  const Eigen::Index m = ds.m();
  const KernelMatrix& k_z = ds.k_z;
  if (k_z.size() != n) throw InvalidInput("kgl_agnostic_fit: bad K_z size");
  MatrixXd a = MatrixXd::Zero(n, m);
  MatrixXd lap, prev_lap, prev_a;
  VectorXd w;
  bool have_w = false;
  std::vector<double> trace;
  bool converged = false;
  int iterations = 0;
  const MatrixXd* mask = ds.mask ? &*ds.mask : nullptr;
  for (int t = 0; t < hp.max_outer; ++t) {
    const MatrixXd p = k_z.gram() * a;
    Graph g = l_step(p, hp.rho, hp.psi, m, have_w ? &w : nullptr,
                     qp_options(hp));
    w = g.weights();
    have_w = true;
    lap = g.laplacian();
    a = mask ? detail::agnostic_a_step_masked(ds.y, *mask, k_z, lap, hp.lambda,
                                              hp.rho, hp.cg_tol,
                                              hp.cg_max_iter, &a)
             : detail::agnostic_a_step(ds.y, k_z, lap, hp.lambda, hp.rho);
    trace.push_back(kgl_agnostic_objective(ds.y, k_z.gram(), lap, a, hp, mask));
    iterations = t + 1;
    if (t > 0) {
      const double dl = (lap - prev_lap).cwiseAbs().maxCoeff();
      const double da = (a - prev_a).cwiseAbs().maxCoeff();
      if (std::max(dl, da) < hp.tol) {
        converged = true;
        break;
      }
    }
    prev_lap = lap;
    prev_a = a;
  }
  return FitResult{Graph(m, w),  std::move(a), std::move(trace), iterations,
                   converged,    watch.ms(),   "KGL-Agnostic"};
}

}  // namespace kgl
