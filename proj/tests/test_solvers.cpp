#include "kgl/solvers.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "kgl/datagen.hpp"
#include "kgl/rng.hpp"
#include "oracles.hpp"

using namespace kgl;
using oracle::dense_kron;

namespace {

Hyperparams base_hp(double lambda = 0.1, double rho = 0.1, double psi = 1e-3) {
  Hyperparams hp;
  hp.lambda = lambda;
  hp.rho = rho;
  hp.psi = psi;
  return hp;
}

Graph random_graph(Eigen::Index m, std::uint64_t seed, double density = 0.4) {
  GraphModel model;
  model.kind = GraphKind::ER;
  model.target_density = density;
  return generate(model, m, seed);
}

struct Instance {
  MatrixXd y;
  KernelMatrix k_x;
  KernelMatrix k_z;
  MatrixXd lap;
};

Instance random_instance(Eigen::Index m, Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  Instance inst;
  inst.k_x = external_kernel(oracle::random_spd(m, rng));
  inst.k_z = external_kernel(oracle::random_spd(n, rng));
  inst.y = oracle::random_matrix(n, m, rng);
  PairIncidence inc(m);
  inst.lap =
      from_weights(oracle::random_weights(inc.pair_count(), rng), m).laplacian();
  return inst;
}

// Dense mn x mn stationarity system (K + lambda I + rho (L K_x (x) I_n)) a
// = y, i.e. the gradient system (K^2 + lambda K + rho S (x) K_z) a = K y
// with one factor of K cancelled from every term.
MatrixXd dense_a_system(const Instance& inst, double lambda, double rho) {
  const Eigen::Index m = inst.k_x.size();
  const Eigen::Index n = inst.k_z.size();
  const MatrixXd k = dense_kron(inst.k_x.gram(), inst.k_z.gram());
  const MatrixXd lkx_i =
      dense_kron(MatrixXd(inst.lap * inst.k_x.gram()), MatrixXd::Identity(n, n));
  return k + lambda * MatrixXd::Identity(m * n, m * n) + rho * lkx_i;
}

void expect_graph_feasible(const Graph& g, double trace_target) {
  const MatrixXd lap = g.laplacian();
  EXPECT_LT((lap * VectorXd::Ones(g.nodes())).cwiseAbs().maxCoeff(), 1e-9);
  for (Eigen::Index i = 0; i < g.nodes(); ++i) {
    for (Eigen::Index j = 0; j < g.nodes(); ++j) {
      if (i != j) EXPECT_LE(lap(i, j), 1e-12);
    }
  }
  EXPECT_NEAR(lap.trace(), trace_target, 1e-6);
}

void expect_monotone(const std::vector<double>& trace) {
  for (std::size_t t = 1; t < trace.size(); ++t) {
    EXPECT_LE(trace[t], trace[t - 1] + 1e-9);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

TEST(KglObjective, ZeroEstimateGivesDataNorm) {
  Rng rng(1);
  const MatrixXd y = oracle::random_matrix(4, 3, rng);
  const MatrixXd a = MatrixXd::Zero(4, 3);
  const MatrixXd lap = MatrixXd::Zero(3, 3);
  const double j = kgl_objective(y, MatrixXd::Identity(3, 3),
                                 MatrixXd::Identity(4, 4), lap, a, base_hp());
  EXPECT_NEAR(j, y.squaredNorm(), 1e-12);
}

TEST(KglObjective, IdentityKernelReduction) {
  Rng rng(2);
  const Eigen::Index n = 4, m = 3;
  const MatrixXd y = oracle::random_matrix(n, m, rng);
  const MatrixXd a = oracle::random_matrix(n, m, rng);
  const MatrixXd lap = random_graph(m, 3).laplacian();
  const Hyperparams hp = base_hp(0.3, 0.7, 0.2);
  const double j = kgl_objective(y, MatrixXd::Identity(m, m),
                                 MatrixXd::Identity(n, n), lap, a, hp);
  const double expected = (y - a).squaredNorm() +
                          hp.lambda * a.squaredNorm() +
                          hp.rho * (a * lap).cwiseProduct(a).sum() +
                          hp.psi * lap.squaredNorm();
  EXPECT_NEAR(j, expected, 1e-10);
}

TEST(KglObjective, MatchesTermByTermOracle) {
  const Instance inst = random_instance(3, 4, 5);
  Rng rng(6);
  const MatrixXd a = oracle::random_matrix(4, 3, rng);
  const MatrixXd mask = (oracle::random_matrix(4, 3, rng).array() > 0.0)
                            .cast<double>()
                            .matrix();
  const Hyperparams hp = base_hp(0.2, 0.5, 0.1);
  const double j = kgl_objective(inst.y, inst.k_x.gram(), inst.k_z.gram(),
                                 inst.lap, a, hp, &mask);
  // Independent reimplementation with explicit trace loops.
  const MatrixXd r =
      mask.cwiseProduct(inst.y - inst.k_z.gram() * a * inst.k_x.gram());
  double fit = 0.0;
  for (Eigen::Index j2 = 0; j2 < r.cols(); ++j2) {
    for (Eigen::Index i = 0; i < r.rows(); ++i) fit += r(i, j2) * r(i, j2);
  }
  auto trace_of = [](const MatrixXd& x) {
    double t = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) t += x(i, i);
    return t;
  };
  const double complexity =
      trace_of(inst.k_z.gram() * a * inst.k_x.gram() * a.transpose());
  const double smooth = trace_of(a * inst.k_x.gram() * inst.lap *
                                 inst.k_x.gram() * a.transpose() *
                                 inst.k_z.gram());
  const double frob = trace_of(inst.lap * inst.lap.transpose());
  EXPECT_NEAR(j, fit + hp.lambda * complexity + hp.rho * smooth + hp.psi * frob,
              1e-10);
}

TEST(Predict, Trivials) {
  Rng rng(7);
  const MatrixXd a = oracle::random_matrix(3, 2, rng);
  EXPECT_EQ(predict(MatrixXd::Zero(3, 2), MatrixXd::Identity(2, 2),
                    MatrixXd::Identity(3, 3))
                .norm(),
            0.0);
  EXPECT_EQ(predict(a, MatrixXd::Identity(2, 2), MatrixXd::Identity(3, 3)), a);
  // vec identity cross-check.
  const MatrixXd kx = oracle::random_symmetric(2, rng);
  const MatrixXd kz = oracle::random_symmetric(3, rng);
  const VectorXd via_kron = kron_matvec(kx, kz, VectorXd(as_vector(a)));
  EXPECT_LT((as_matrix(via_kron, 3, 2) - predict(a, kx, kz)).norm(), 1e-12);
}

// ---------------------------------------------------------------------------
// Closed-form A-update
// ---------------------------------------------------------------------------

TEST(AStepClosedForm, ScalarShrinkageWithIdentityKernels) {
  Rng rng(8);
  const Eigen::Index n = 4, m = 3;
  const MatrixXd y = oracle::random_matrix(n, m, rng);
  const double lambda = 0.7;
  const MatrixXd a =
      a_step_closed_form(y, identity_kernel(m), identity_kernel(n),
                         MatrixXd::Zero(m, m), lambda, 0.5);
  EXPECT_LT((a - y / (1.0 + lambda)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(AStepClosedForm, MatchesDenseSolve) {
  const Instance inst = random_instance(5, 4, 9);
  const double lambda = 0.05, rho = 0.3;
  const MatrixXd a =
      a_step_closed_form(inst.y, inst.k_x, inst.k_z, inst.lap, lambda, rho);
  const MatrixXd h = dense_a_system(inst, lambda, rho);
  const VectorXd expected = h.lu().solve(VectorXd(as_vector(inst.y)));
  const VectorXd got = as_vector(a);
  EXPECT_LT((got - expected).norm() / expected.norm(), 1e-8);
}

TEST(AStepClosedForm, InfinitePenaltyShrinksToZero) {
  const Instance inst = random_instance(4, 5, 10);
  const MatrixXd a =
      a_step_closed_form(inst.y, inst.k_x, inst.k_z, inst.lap, 1e8, 0.1);
  EXPECT_LT(a.norm(), 1e-6 * inst.y.norm());
}

TEST(AStepClosedForm, ZeroesTheGradient) {
  const Instance inst = random_instance(4, 4, 11);
  const double lambda = 0.2, rho = 0.4;
  const MatrixXd a =
      a_step_closed_form(inst.y, inst.k_x, inst.k_z, inst.lap, lambda, rho);
  const MatrixXd s = inst.k_x.gram() * inst.lap * inst.k_x.gram();
  const VectorXd ky =
      kron_matvec(inst.k_x.gram(), inst.k_z.gram(), VectorXd(as_vector(inst.y)));
  const VectorXd grad =
      a_subproblem_gradient(inst.k_x.gram(), inst.k_z.gram(), s, lambda, rho,
                            ky, VectorXd(as_vector(a)));
  EXPECT_LT(grad.cwiseAbs().maxCoeff(), 1e-8 * ky.cwiseAbs().maxCoeff());
}

TEST(AStepClosedForm, SingularNodeKernelThrows) {
  Rng rng(12);
  MatrixXd low = oracle::random_matrix(4, 2, rng);
  const KernelMatrix k_x = external_kernel(low * low.transpose());
  const Instance inst = random_instance(4, 3, 13);
  EXPECT_THROW(
      a_step_closed_form(inst.y, k_x, inst.k_z, inst.lap, 0.1, 0.1),
      SingularKernel);
}

TEST(AStepClosedForm, ToleratesSingularObservationKernel) {
  // K_z may be rank deficient: the factorization never inverts it.
  Rng rng(14);
  const Eigen::Index m = 4, n = 5;
  Instance inst = random_instance(m, n, 15);
  MatrixXd low = oracle::random_matrix(n, 2, rng);
  inst.k_z = KernelMatrix(low * low.transpose(),
                          {KernelProvenance::Kind::External, 0.0});
  const double lambda = 0.3, rho = 0.2;
  const MatrixXd a =
      a_step_closed_form(inst.y, inst.k_x, inst.k_z, inst.lap, lambda, rho);
  const MatrixXd h = dense_a_system(inst, lambda, rho);
  const VectorXd expected = h.lu().solve(VectorXd(as_vector(inst.y)));
  EXPECT_LT((VectorXd(as_vector(a)) - expected).norm() / expected.norm(), 1e-8);
}

TEST(AStepClosedForm, LinearInY) {
  const Instance inst = random_instance(4, 3, 16);
  const MatrixXd a1 =
      a_step_closed_form(inst.y, inst.k_x, inst.k_z, inst.lap, 0.1, 0.1);
  const MatrixXd a2 = a_step_closed_form(MatrixXd(2.0 * inst.y), inst.k_x,
                                         inst.k_z, inst.lap, 0.1, 0.1);
  EXPECT_LT((a2 - 2.0 * a1).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(AStepClosedForm, PosteriorEquivalenceAtRhoZero) {
  // With rho = 0 and lambda = sigma^2 the update is the maximizer of the
  // Gaussian log-posterior with likelihood N(K a, sigma^2 I) and prior
  // N(0, pinv(K)), computed here densely via the posterior precision.
  const Instance inst = random_instance(3, 3, 17);
  const double sigma_sq = 0.25;
  const MatrixXd a = a_step_closed_form(inst.y, inst.k_x, inst.k_z,
                                        MatrixXd::Zero(3, 3), sigma_sq, 1e-14);
  const MatrixXd k = dense_kron(inst.k_x.gram(), inst.k_z.gram());
  const MatrixXd precision = k.transpose() * k / sigma_sq + k;
  const VectorXd mean = precision.ldlt().solve(
      k.transpose() * VectorXd(as_vector(inst.y)) / sigma_sq);
  EXPECT_LT((VectorXd(as_vector(a)) - mean).norm() / mean.norm(), 1e-8);
}

// ---------------------------------------------------------------------------
// Gradient A-update
// ---------------------------------------------------------------------------

TEST(AStepGradient, FirstStepFromZeroIsGammaKy) {
  const Instance inst = random_instance(3, 4, 18);
  const double gamma = 1e-4;
  const MatrixXd a =
      a_step_gradient(inst.y, inst.k_x.gram(), inst.k_z.gram(), inst.lap, 0.1,
                      0.1, gamma, 1e-30, 1);
  const VectorXd ky =
      kron_matvec(inst.k_x.gram(), inst.k_z.gram(), VectorXd(as_vector(inst.y)));
  EXPECT_LT((VectorXd(as_vector(a)) - gamma * ky).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(AStepGradient, AgreesWithClosedForm) {
  const Instance inst = random_instance(4, 3, 19);
  const double lambda = 0.3, rho = 0.2;
  const MatrixXd exact =
      a_step_closed_form(inst.y, inst.k_x, inst.k_z, inst.lap, lambda, rho);
  ConvergenceReport report;
  const MatrixXd iterative =
      a_step_gradient(inst.y, inst.k_x.gram(), inst.k_z.gram(), inst.lap,
                      lambda, rho, 1e-4, 1e-10, 100000, &report);
  EXPECT_TRUE(report.converged);
  EXPECT_LT((iterative - exact).norm() / exact.norm(), 1e-5);
}

TEST(AStepGradient, DescendsOnSingularObservationKernel) {
  // K_z = pinv(L_z) for a graph on the observation side is singular; the
  // fallback must still descend and reach a small gradient.
  const Graph row_graph = random_graph(5, 20);
  const KernelMatrix k_z = laplacian_pinv_kernel(row_graph);
  const Instance base = random_instance(4, 5, 21);
  ConvergenceReport report;
  const MatrixXd a =
      a_step_gradient(base.y, base.k_x.gram(), k_z.gram(), base.lap, 0.2, 0.3,
                      1e-4, 1e-6, 200000, &report);
  EXPECT_TRUE(report.converged);
  // Quadratic objective at the result is below the start value 0.
  const MatrixXd s = base.k_x.gram() * base.lap * base.k_x.gram();
  const VectorXd ky =
      kron_matvec(base.k_x.gram(), k_z.gram(), VectorXd(as_vector(base.y)));
  const VectorXd av = as_vector(a);
  const VectorXd grad = a_subproblem_gradient(base.k_x.gram(), k_z.gram(), s,
                                              0.2, 0.3, ky, av);
  const double quadratic = av.dot(grad) - av.dot(ky);
  EXPECT_LT(quadratic, 0.0);
}

// ---------------------------------------------------------------------------
// Masked A-update
// ---------------------------------------------------------------------------

TEST(AStepMasked, AllOnesMaskMatchesClosedForm) {
  const Instance inst = random_instance(4, 5, 22);
  const double lambda = 0.2, rho = 0.3;
  const MatrixXd full = MatrixXd::Ones(5, 4);
  const MatrixXd masked = a_step_masked(inst.y, full, inst.k_x, inst.k_z,
                                        inst.lap, lambda, rho, 1e-12, 20000);
  const MatrixXd closed =
      a_step_closed_form(inst.y, inst.k_x, inst.k_z, inst.lap, lambda, rho);
  EXPECT_LT((masked - closed).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(AStepMasked, MatchesDenseMaskedSolve) {
  const Instance inst = random_instance(4, 4, 23);
  Rng rng(24);
  MatrixXd mask(4, 4);
  for (Eigen::Index j = 0; j < 4; ++j) {
    for (Eigen::Index i = 0; i < 4; ++i) {
      mask(i, j) = rng.uniform() < 0.3 ? 0.0 : 1.0;
    }
  }
  const double lambda = 0.15, rho = 0.25;
  const MatrixXd a = a_step_masked(inst.y, mask, inst.k_x, inst.k_z, inst.lap,
                                   lambda, rho, 1e-13, 50000);
  // Dense stationarity: (diag(m) K + lambda I + rho (L K_x (x) I)) a
  //                     = vec(M o Y).
  const Eigen::Index mn = 16;
  const MatrixXd k = dense_kron(inst.k_x.gram(), inst.k_z.gram());
  const VectorXd mvec = as_vector(mask);
  const MatrixXd g = MatrixXd(mvec.asDiagonal()) * k +
                     lambda * MatrixXd::Identity(mn, mn) +
                     rho * dense_kron(MatrixXd(inst.lap * inst.k_x.gram()),
                                      MatrixXd::Identity(4, 4));
  const VectorXd expected =
      g.lu().solve(VectorXd(as_vector(MatrixXd(mask.cwiseProduct(inst.y)))));
  EXPECT_LT((VectorXd(as_vector(a)) - expected).norm() / expected.norm(), 1e-7);
}

TEST(AStepMasked, AllZeroMaskGivesZero) {
  const Instance inst = random_instance(3, 4, 25);
  const MatrixXd zero_mask = MatrixXd::Zero(4, 3);
  const MatrixXd a = a_step_masked(inst.y, zero_mask, inst.k_x, inst.k_z,
                                   inst.lap, 0.5, 0.5);
  EXPECT_EQ(a.norm(), 0.0);
}

TEST(AStepMasked, HandlesRankDeficientObservationKernel) {
  // Numerically singular K_z (as an RBF kernel on dense stamps becomes):
  // CG on the symmetric system from a zero start returns the minimum-norm
  // minimizer, i.e. pinv(C) b for the gradient operator C.
  Rng rng(26);
  MatrixXd low = oracle::random_matrix(4, 2, rng);
  const KernelMatrix singular = external_kernel(low * low.transpose());
  Instance inst = random_instance(3, 4, 27);
  inst.k_z = singular;
  MatrixXd mask(4, 3);
  for (Eigen::Index j = 0; j < 3; ++j) {
    for (Eigen::Index i = 0; i < 4; ++i) {
      mask(i, j) = rng.uniform() < 0.3 ? 0.0 : 1.0;
    }
  }
  const double lambda = 0.2, rho = 0.3;
  const MatrixXd a = a_step_masked(inst.y, mask, inst.k_x, inst.k_z, inst.lap,
                                   lambda, rho, 1e-12, 50000);
  const MatrixXd k = dense_kron(inst.k_x.gram(), inst.k_z.gram());
  const MatrixXd s = inst.k_x.gram() * inst.lap * inst.k_x.gram();
  const MatrixXd c = k * MatrixXd(VectorXd(as_vector(mask)).asDiagonal()) * k +
                     lambda * k + rho * dense_kron(s, inst.k_z.gram());
  const VectorXd b =
      k * VectorXd(as_vector(MatrixXd(mask.cwiseProduct(inst.y))));
  const VectorXd expected = pseudo_inverse(sym_eig(c), 1e-12) * b;
  EXPECT_LT((VectorXd(as_vector(a)) - expected).norm() /
                std::max(expected.norm(), 1e-12),
            1e-6);
}

// ---------------------------------------------------------------------------
// Node-side A-update
// ---------------------------------------------------------------------------

TEST(AStepNodeSide, SingleSignalMatchesDirectSolve) {
  const Instance inst = random_instance(5, 1, 28);
  const double lambda = 0.2, rho = 0.3;
  const MatrixXd a =
      a_step_node_side(inst.y, inst.k_x, inst.lap, lambda, rho);
  const MatrixXd& kx = inst.k_x.gram();
  const MatrixXd s = kx * inst.lap * kx;
  const MatrixXd g = kx * kx + lambda * kx + rho * s;
  const VectorXd expected = g.ldlt().solve(kx * inst.y.row(0).transpose());
  EXPECT_LT((a.row(0).transpose() - expected).norm() / expected.norm(), 1e-8);
}

TEST(AStepNodeSide, MatchesGeneralPathWithIdentityKz) {
  const Instance inst = random_instance(6, 5, 29);
  const double lambda = 0.4, rho = 0.1;
  const MatrixXd node_side =
      a_step_node_side(inst.y, inst.k_x, inst.lap, lambda, rho);
  const MatrixXd general = a_step_closed_form(
      inst.y, inst.k_x, identity_kernel(5), inst.lap, lambda, rho);
  EXPECT_LT((node_side - general).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(AStepNodeSide, RowPermutationEquivariant) {
  const Instance inst = random_instance(4, 6, 30);
  MatrixXd permuted = inst.y;
  permuted.row(0).swap(permuted.row(3));
  const MatrixXd a = a_step_node_side(inst.y, inst.k_x, inst.lap, 0.2, 0.2);
  MatrixXd a_perm =
      a_step_node_side(permuted, inst.k_x, inst.lap, 0.2, 0.2);
  a_perm.row(0).swap(a_perm.row(3));
  EXPECT_LT((a - a_perm).cwiseAbs().maxCoeff(), 1e-12);
}

// ---------------------------------------------------------------------------
// L-update
// ---------------------------------------------------------------------------

TEST(LStep, VanishingRhoGivesUniformWeights) {
  Rng rng(31);
  const Eigen::Index m = 5;
  const MatrixXd p = oracle::random_matrix(4, m, rng);
  const Graph g = l_step(p, 1e-12, 0.5, m);
  const double uniform = 1.0 / static_cast<double>(m - 1);
  EXPECT_LT((g.weights().array() - uniform).abs().maxCoeff(), 1e-6);
  EXPECT_NEAR(g.laplacian().trace(), static_cast<double>(m), 1e-9);
}

TEST(LStep, VanishingPsiConcentratesOnClosestPair) {
  Rng rng(32);
  const Eigen::Index m = 4;
  const MatrixXd p = oracle::random_matrix(5, m, rng);
  PairIncidence inc(m);
  VectorXd z(inc.pair_count());
  for (Eigen::Index k = 0; k < inc.pair_count(); ++k) {
    const auto& [j, jp] = inc.pair(k);
    z[k] = (p.col(j) - p.col(jp)).squaredNorm();
  }
  Eigen::Index best = 0;
  z.minCoeff(&best);
  const Graph g = l_step(p, 1.0, 1e-9, m);
  const double total = g.weights().sum();
  EXPECT_GT(g.weights()[best], 0.999 * total);
}

TEST(LStep, MatchesActiveSetOracle) {
  Rng rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::Index m = 4;
    const MatrixXd p = oracle::random_matrix(3, m, rng);
    const double rho = 0.5 + rng.uniform();
    const double psi = std::pow(10.0, rng.uniform(-4.0, -1.0));
    const Graph g = l_step(p, rho, psi, m);
    const oracle::SimplexQp qp = oracle::l_step_qp(p, rho, psi, m);
    const VectorXd expected = oracle::solve_simplex_qp(qp);
    ASSERT_GT(expected.size(), 0);
    EXPECT_LE(qp.value(g.weights()), qp.value(expected) + 1e-5);
    EXPECT_NEAR(g.weights().sum(), 2.0, 1e-9);
  }
}

TEST(LStep, WarmStartOnlyImproves) {
  Rng rng(34);
  const Eigen::Index m = 5;
  const MatrixXd p = oracle::random_matrix(4, m, rng);
  const oracle::SimplexQp qp = oracle::l_step_qp(p, 1.0, 1e-2, m);
  PairIncidence inc(m);
  const VectorXd warm = project_scaled_simplex(
      oracle::random_weights(inc.pair_count(), rng), 2.5);
  const Graph g = l_step(p, 1.0, 1e-2, m, &warm);
  EXPECT_LE(qp.value(g.weights()), qp.value(warm) + 1e-12);
}

// ---------------------------------------------------------------------------
// Gradient correctness against finite differences
// ---------------------------------------------------------------------------

TEST(GradientCheck, FullAndMaskedMatchFiniteDifferences) {
  Rng rng(35);
  for (int trial = 0; trial < 20; ++trial) {
    const Instance inst = random_instance(3, 3, 100 + trial);
    const double lambda = 0.1 + rng.uniform();
    const double rho = 0.1 + rng.uniform();
    Hyperparams hp = base_hp(lambda, rho, 1e-4);
    MatrixXd mask(3, 3);
    for (Eigen::Index j = 0; j < 3; ++j) {
      for (Eigen::Index i = 0; i < 3; ++i) {
        mask(i, j) = rng.uniform() < 0.3 ? 0.0 : 1.0;
      }
    }
    const VectorXd a0 = oracle::random_matrix(9, 1, rng);
    const MatrixXd s = inst.k_x.gram() * inst.lap * inst.k_x.gram();
    const VectorXd ky = kron_matvec(inst.k_x.gram(), inst.k_z.gram(),
                                    VectorXd(as_vector(inst.y)));
    const VectorXd k_my =
        kron_matvec(inst.k_x.gram(), inst.k_z.gram(),
                    VectorXd(as_vector(MatrixXd(mask.cwiseProduct(inst.y)))));

    // Full objective: J(a) as implemented, differentiated numerically. The
    // analytic expression follows the half-gradient convention, hence the
    // factor two.
    auto full = [&](const VectorXd& v) {
      return kgl_objective(inst.y, inst.k_x.gram(), inst.k_z.gram(), inst.lap,
                           MatrixXd(as_matrix(v, 3, 3)), hp);
    };
    const VectorXd fd_full = oracle::finite_difference_gradient(full, a0);
    const VectorXd an_full = a_subproblem_gradient(
        inst.k_x.gram(), inst.k_z.gram(), s, lambda, rho, ky, a0);
    EXPECT_LT((fd_full - 2.0 * an_full).norm() / fd_full.norm(), 1e-5);

    auto masked = [&](const VectorXd& v) {
      return kgl_objective(inst.y, inst.k_x.gram(), inst.k_z.gram(), inst.lap,
                           MatrixXd(as_matrix(v, 3, 3)), hp, &mask);
    };
    const VectorXd fd_masked = oracle::finite_difference_gradient(masked, a0);
    const VectorXd an_masked = a_subproblem_gradient_masked(
        inst.k_x.gram(), inst.k_z.gram(), s, lambda, rho,
        VectorXd(as_vector(mask)), k_my, a0);
    EXPECT_LT((fd_masked - 2.0 * an_masked).norm() / fd_masked.norm(), 1e-5);
  }
}

TEST(PsdCertificate, QuadraticFormOperatorIsPsd) {
  Rng rng(36);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Index m = 2 + static_cast<Eigen::Index>(rng.uniform_int(0, 2));
    const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.uniform_int(0, 2));
    const Instance inst = random_instance(m, n, 300 + trial);
    const double lambda = rng.uniform();
    const double rho = rng.uniform();
    const MatrixXd s = inst.k_x.gram() * inst.lap * inst.k_x.gram();
    const MatrixXd k = dense_kron(inst.k_x.gram(), inst.k_z.gram());
    const MatrixXd c =
        k * k + lambda * k + rho * dense_kron(s, inst.k_z.gram());
    const VectorXd values = sym_eig(c).values;
    EXPECT_GE(values.minCoeff(), -1e-8 * values.cwiseAbs().maxCoeff());
  }
}

// ---------------------------------------------------------------------------
// Full fits
// ---------------------------------------------------------------------------

TEST(Hyperparams, ValidateRejectsBadValues) {
  Hyperparams hp;
  EXPECT_NO_THROW(hp.validate());
  hp.lambda = -1.0;
  EXPECT_THROW(hp.validate(), InvalidConfig);
  hp = Hyperparams{};
  hp.gamma = 1e-3;  // above the 1e-4 cap
  EXPECT_THROW(hp.validate(), InvalidConfig);
  hp = Hyperparams{};
  hp.max_outer = 0;
  EXPECT_THROW(hp.validate(), InvalidConfig);
}

TEST(KglFit, ZeroDataGivesZeroCoefficientsAndUniformGraph) {
  Dataset ds;
  ds.y = MatrixXd::Zero(6, 5);
  ds.k_x = graph_smoothing_kernel(random_graph(5, 40), 1.0);
  ds.k_z = identity_kernel(6);
  const FitResult fit = kgl_fit(ds, base_hp(), Variant::KGL);
  EXPECT_EQ(fit.coefficients.norm(), 0.0);
  const double uniform = 1.0 / 4.0;
  EXPECT_LT((fit.graph.weights().array() - uniform).abs().maxCoeff(), 1e-9);
  EXPECT_TRUE(fit.converged);
}

TEST(KglFit, TraceMonotoneAndGraphFeasible) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Graph g = random_graph(8, 50 + seed);
    const Dataset ds = synthesize(g, 30, seed % 2 == 0, 0.01, 1.0, 60 + seed);
    const FitResult fit = kgl_fit(ds, base_hp(1e-2, 1e-2, 1e-3), Variant::KGL);
    expect_monotone(fit.objective_trace);
    expect_graph_feasible(fit.graph, 8.0);
  }
}

TEST(KglFit, VariantNEqualsGeneralFitWithIdentityKz) {
  const Graph g = random_graph(6, 70);
  Dataset ds = synthesize(g, 20, false, 0.01, 1.0, 71);
  ASSERT_TRUE(ds.k_z.is_identity());
  const FitResult via_variant = kgl_fit(ds, base_hp(), Variant::KGL_N);
  const FitResult via_general = kgl_fit(ds, base_hp(), Variant::KGL);
  EXPECT_LT((via_variant.graph.weights() - via_general.graph.weights())
                .cwiseAbs()
                .maxCoeff(),
            1e-8);
  EXPECT_LT(
      (via_variant.coefficients - via_general.coefficients).cwiseAbs().maxCoeff(),
      1e-8);
}

TEST(KglFit, VariantOEqualsGeneralFitWithIdentityKx) {
  const Graph g = random_graph(6, 72);
  Dataset dependent = synthesize(g, 15, true, 0.01, 1.0, 73);
  Dataset with_identity_kx = dependent;
  with_identity_kx.k_x = identity_kernel(6);
  const FitResult via_variant = kgl_fit(dependent, base_hp(), Variant::KGL_O);
  const FitResult via_general =
      kgl_fit(with_identity_kx, base_hp(), Variant::KGL);
  EXPECT_LT((via_variant.graph.weights() - via_general.graph.weights())
                .cwiseAbs()
                .maxCoeff(),
            1e-8);
}

TEST(KglFit, MaskedFitRunsAndStaysFeasible) {
  const Graph g = random_graph(7, 80);
  Dataset ds =
      apply_mask(synthesize(g, 25, false, 0.01, 1.0, 81), 0.4, 82);
  const FitResult fit = kgl_fit(ds, base_hp(1e-2, 1e-2, 1e-4), Variant::KGL_N);
  expect_monotone(fit.objective_trace);
  expect_graph_feasible(fit.graph, 7.0);
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

TEST(GlFit, ConstantColumnsGiveUniformWeights) {
  MatrixXd y(4, 5);
  for (Eigen::Index j = 0; j < 5; ++j) y.col(j).setConstant(1.7);
  const Graph g = gl_fit(y, 1e-3);
  const double uniform = 1.0 / 4.0;
  EXPECT_LT((g.weights().array() - uniform).abs().maxCoeff(), 1e-8);
}

TEST(GlFit, DuplicateColumnsAttractAllWeightAsPsiVanishes) {
  Rng rng(90);
  MatrixXd y = oracle::random_matrix(6, 4, rng);
  y.col(2) = y.col(1);  // pair (1,2) has z = 0
  const Graph g = gl_fit(y, 1e-9);
  PairIncidence inc(4);
  Eigen::Index pair_12 = -1;
  for (Eigen::Index k = 0; k < inc.pair_count(); ++k) {
    if (inc.pair(k).first == 1 && inc.pair(k).second == 2) pair_12 = k;
  }
  EXPECT_GT(g.weights()[pair_12], 0.999 * g.weights().sum());
}

TEST(GlFit, RecoversBlockStructureFromSmoothSignals) {
  // Two dense blocks; noise-free smooth signals should place more weight
  // within blocks than across in at least 90% of trials.
  int hits = 0;
  const int trials = 50;
  for (int t = 0; t < trials; ++t) {
    GraphModel model;
    model.kind = GraphKind::SBM;
    model.target_density = 0.4;
    model.sbm_blocks = 2;
    model.sbm_in_out_ratio = 8.0;
    const Graph truth = generate(model, 10, 900 + t);
    const Dataset ds = synthesize(truth, 100, false, 0.0, 5.0, 950 + t);
    const Graph learned = gl_fit(ds.y, 1e-2);
    double within = 0.0, cross = 0.0;
    int within_n = 0, cross_n = 0;
    const auto& inc = learned.incidence();
    for (Eigen::Index k = 0; k < inc.pair_count(); ++k) {
      const auto& [j, jp] = inc.pair(k);
      if ((j < 5) == (jp < 5)) {
        within += learned.weights()[k];
        ++within_n;
      } else {
        cross += learned.weights()[k];
        ++cross_n;
      }
    }
    if (within / within_n > cross / cross_n) ++hits;
  }
  EXPECT_GE(hits, 45);
}

TEST(Gl2Step, VanishingRhoReducesToGlFit) {
  Rng rng(91);
  const MatrixXd y = oracle::random_matrix(8, 5, rng);
  const TwoStepResult two = gl_2step_fit(y, 1e-9, 1e-3);
  const Graph gl = gl_fit(y, 1e-3);
  EXPECT_LT((two.y_hat - y).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((two.graph.weights() - gl.weights()).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Gl2Step, HugeRhoProjectsRowsOntoConstants) {
  Rng rng(92);
  const MatrixXd y = oracle::random_matrix(6, 5, rng);
  // Large psi keeps the learned graph dense, hence connected, so the
  // nullspace of L is the constant vector.
  const TwoStepResult two = gl_2step_fit(y, 1e6, 1.0);
  for (Eigen::Index i = 0; i < two.y_hat.rows(); ++i) {
    const double spread =
        two.y_hat.row(i).maxCoeff() - two.y_hat.row(i).minCoeff();
    EXPECT_LT(spread, 1e-3);
  }
}

TEST(Gl2Step, ObjectiveNonIncreasing) {
  Rng rng(93);
  for (int t = 0; t < 20; ++t) {
    const MatrixXd y = oracle::random_matrix(10, 6, rng);
    const TwoStepResult two = gl_2step_fit(y, 0.5, 1e-3);
    expect_monotone(two.objective_trace);
    expect_graph_feasible(two.graph, 6.0);
  }
}

// ---------------------------------------------------------------------------
// Observation-side-only baseline
// ---------------------------------------------------------------------------

TEST(KglAgnostic, RidgeReductionWithIdentityKz) {
  const Graph g = random_graph(5, 94);
  Dataset ds = synthesize(g, 8, false, 0.01, 1.0, 95);
  Hyperparams hp = base_hp(0.5, 1e-12, 1e-3);
  const FitResult fit = kgl_agnostic_fit(ds, hp);
  EXPECT_LT((fit.coefficients - ds.y / 1.5).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(KglAgnostic, AStepMatchesDenseSolve) {
  const Instance inst = random_instance(4, 4, 96);
  const double lambda = 0.2, rho = 0.4;
  const MatrixXd a =
      detail::agnostic_a_step(inst.y, inst.k_z, inst.lap, lambda, rho);
  // Dense vectorized stationarity: (I (x) (K_z + lambda I) + rho L (x) K_z)
  // vec(A) = vec(Y).
  const Eigen::Index n = 4, m = 4;
  const MatrixXd dense =
      dense_kron(MatrixXd::Identity(m, m),
                 MatrixXd(inst.k_z.gram() + lambda * MatrixXd::Identity(n, n))) +
      rho * dense_kron(inst.lap, inst.k_z.gram());
  const VectorXd expected = dense.lu().solve(VectorXd(as_vector(inst.y)));
  EXPECT_LT((VectorXd(as_vector(a)) - expected).norm() / expected.norm(), 1e-8);
}

TEST(KglAgnostic, MaskedAStepMatchesDense) {
  const Instance inst = random_instance(4, 4, 97);
  Rng rng(98);
  MatrixXd mask(4, 4);
  for (Eigen::Index j = 0; j < 4; ++j) {
    for (Eigen::Index i = 0; i < 4; ++i) {
      mask(i, j) = rng.uniform() < 0.3 ? 0.0 : 1.0;
    }
  }
  const double lambda = 0.3, rho = 0.2;
  const MatrixXd a = detail::agnostic_a_step_masked(
      inst.y, mask, inst.k_z, inst.lap, lambda, rho, 1e-13, 50000, nullptr);
  // Dense stationarity premultiplied by nothing:
  // (M o (K_z A)) + lambda A + rho K_z A L = M o Y.
  const Eigen::Index n = 4, m = 4;
  const MatrixXd kz_dense = dense_kron(MatrixXd::Identity(m, m), inst.k_z.gram());
  const MatrixXd sys =
      MatrixXd(VectorXd(as_vector(mask)).asDiagonal()) * kz_dense +
      lambda * MatrixXd::Identity(n * m, n * m) +
      rho * dense_kron(inst.lap, inst.k_z.gram());
  const VectorXd expected = sys.lu().solve(
      VectorXd(as_vector(MatrixXd(mask.cwiseProduct(inst.y)))));
  EXPECT_LT((VectorXd(as_vector(a)) - expected).norm() / expected.norm(), 1e-6);
}

TEST(KglAgnostic, TraceMonotoneAndFeasible) {
  const Graph g = random_graph(6, 99);
  const Dataset ds = synthesize(g, 20, true, 0.01, 1.0, 100);
  const FitResult fit = kgl_agnostic_fit(ds, base_hp(1e-2, 1e-2, 1e-4));
  expect_monotone(fit.objective_trace);
  expect_graph_feasible(fit.graph, 6.0);
  EXPECT_EQ(fit.variant, "KGL-Agnostic");
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}
