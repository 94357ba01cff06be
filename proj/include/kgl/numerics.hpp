// Dense symmetric linear algebra and convex-optimization primitives:
// eigendecomposition with a deterministic sign convention, spectral
// pseudo-inverse and square root, Kronecker-structured matrix-vector
// products, Euclidean projection onto a scaled simplex, and conjugate
// gradients for matrix-free SPD systems.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "kgl/errors.hpp"

namespace kgl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Allocation guard
// ---------------------------------------------------------------------------

/// RAII cap on the element count of any single work matrix allocated inside
/// the Kronecker-structured code paths. Used by tests to certify that the
/// structured solvers never materialize an mn-by-mn operator.
class AllocGuard {
 public:
  explicit AllocGuard(std::size_t max_elements) : previous_(limit()) {
    limit() = max_elements;
  }
  ~AllocGuard() { limit() = previous_; }
  AllocGuard(const AllocGuard&) = delete;
  AllocGuard& operator=(const AllocGuard&) = delete;

  /// Called before allocating a rows-by-cols work matrix.
  static void check(std::size_t rows, std::size_t cols) {
    const std::size_t cap = limit();
    if (cap != 0 && rows * cols > cap) {
      throw NumericalFailure("allocation guard: work matrix of " +
                             std::to_string(rows) + "x" + std::to_string(cols) +
                             " elements exceeds the active cap of " +
                             std::to_string(cap));
    }
  }

 private:
  static std::size_t& limit() {
    thread_local std::size_t active = 0;  // 0 = unlimited
    return active;
  }
  std::size_t previous_;
};

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition
// ---------------------------------------------------------------------------

/// Eigendecomposition of a symmetric matrix: `vectors` is orthogonal,
/// `values` ascending, and vectors * values.asDiagonal() * vectors^T
/// reconstructs the input. Eigenvector signs follow the convention that the
/// first component of magnitude above 1e-12 * column norm is positive, so
/// repeated decompositions of equal inputs are bitwise identical.
struct SymEig {
  MatrixXd vectors;
  VectorXd values;

  Eigen::Index size() const { return values.size(); }

  MatrixXd reconstruct() const {
    return vectors * values.asDiagonal() * vectors.transpose();
  }

  /// Apply a spectral function f(lambda) entrywise: Q f(diag) Q^T.
  template <typename F>
  MatrixXd map_values(F&& f) const {
    VectorXd mapped(values.size());
    for (Eigen::Index i = 0; i < values.size(); ++i) mapped[i] = f(values[i]);
    return vectors * mapped.asDiagonal() * vectors.transpose();
  }
};

inline SymEig sym_eig(const MatrixXd& matrix) {
  if (matrix.rows() != matrix.cols()) {
    throw InvalidInput("sym_eig: matrix is not square");
  }
  if (!matrix.allFinite()) {
    throw InvalidInput("sym_eig: matrix has non-finite entries");
  }
  // Symmetrize so tiny asymmetries from accumulated round-off cannot reach
  // the solver; inputs are required symmetric within 1e-10.
  MatrixXd sym = 0.5 * (matrix + matrix.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(sym);
  if (solver.info() != Eigen::Success) {
    throw NumericalFailure("sym_eig: eigendecomposition failed");
  }
  SymEig out{solver.eigenvectors(), solver.eigenvalues()};
  for (Eigen::Index j = 0; j < out.vectors.cols(); ++j) {
    auto col = out.vectors.col(j);
    const double scale = col.norm();
    for (Eigen::Index i = 0; i < col.size(); ++i) {
      if (std::abs(col[i]) > 1e-12 * scale) {
        if (col[i] < 0.0) col = -col;
        break;
      }
    }
  }
  return out;
}

/// Moore-Penrose pseudo-inverse from a spectral decomposition. Eigenvalues
/// with |lambda| <= rel_tol * max|lambda| are treated as zero.
inline MatrixXd pseudo_inverse(const SymEig& eig, double rel_tol = 1e-10) {
  if (rel_tol <= 0.0) throw InvalidInput("pseudo_inverse: rel_tol must be > 0");
  const double cutoff = rel_tol * eig.values.cwiseAbs().maxCoeff();
  return eig.map_values(
      [cutoff](double v) { return std::abs(v) <= cutoff ? 0.0 : 1.0 / v; });
}

/// Symmetric PSD square root. Eigenvalues in [-1e-8 * max, 0) are clamped to
/// zero (kernel matrices are PSD up to round-off); anything more negative is
/// a genuine violation.
inline MatrixXd psd_sqrt(const SymEig& eig) {
  const double max_abs = eig.values.cwiseAbs().maxCoeff();
  const double floor = -1e-8 * max_abs;
  if (eig.values.minCoeff() < floor) {
    throw NotPSD("psd_sqrt: eigenvalue " +
                 std::to_string(eig.values.minCoeff()) +
                 " below the PSD tolerance");
  }
  return eig.map_values(
      [](double v) { return v > 0.0 ? std::sqrt(v) : 0.0; });
}

// ---------------------------------------------------------------------------
// Kronecker-structured operations
// ---------------------------------------------------------------------------
//
// Vectorization is column-stacking of an n-by-m matrix A, so that
// (K_x (x) K_z) vec(A) = vec(K_z A K_x). Eigen stores column-major, which
// makes vec() a flat view of the coefficient array.

inline Eigen::Map<const MatrixXd> as_matrix(const VectorXd& a, Eigen::Index n,
                                            Eigen::Index m) {
  return Eigen::Map<const MatrixXd>(a.data(), n, m);
}

inline Eigen::Map<const VectorXd> as_vector(const MatrixXd& a) {
  return Eigen::Map<const VectorXd>(a.data(), a.size());
}

/// (K_x (x) K_z) a computed as vec(K_z A K_x) in O(nm(n+m)) without forming
/// the mn-by-mn product.
inline VectorXd kron_matvec(const MatrixXd& k_x, const MatrixXd& k_z,
                            const VectorXd& a) {
  const Eigen::Index m = k_x.rows();
  const Eigen::Index n = k_z.rows();
  if (k_x.cols() != m || k_z.cols() != n || a.size() != m * n) {
    throw InvalidInput("kron_matvec: dimension mismatch");
  }
  AllocGuard::check(static_cast<std::size_t>(n), static_cast<std::size_t>(m));
  MatrixXd t = k_z * as_matrix(a, n, m);
  AllocGuard::check(static_cast<std::size_t>(n), static_cast<std::size_t>(m));
  MatrixXd r = t * k_x;
  return VectorXd(as_vector(r));
}

// ---------------------------------------------------------------------------
// Scaled-simplex projection
// ---------------------------------------------------------------------------

/// Euclidean projection onto {v >= 0, sum v = total} via the sort-based
/// threshold rule: v_i = max(w_i - tau, 0) with tau from the largest feasible
/// prefix.
inline VectorXd project_scaled_simplex(const VectorXd& w, double total) {
  if (total <= 0.0) {
    throw InvalidInput("project_scaled_simplex: total must be > 0");
  }
  if (!w.allFinite()) {
    throw InvalidInput("project_scaled_simplex: non-finite input");
  }
  const Eigen::Index k = w.size();
  std::vector<double> sorted(w.data(), w.data() + k);
  std::sort(sorted.begin(), sorted.end(), std::greater<double>());
  double running = 0.0;
  double tau = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    running += sorted[static_cast<std::size_t>(i)];
    const double candidate =
        (running - total) / static_cast<double>(i + 1);
    if (i + 1 == k || sorted[static_cast<std::size_t>(i + 1)] <= candidate) {
      tau = candidate;
      break;
    }
  }
  return (w.array() - tau).cwiseMax(0.0);
}

// ---------------------------------------------------------------------------
// Conjugate gradients
// ---------------------------------------------------------------------------

using LinearOperator = std::function<VectorXd(const VectorXd&)>;

struct CgResult {
  VectorXd x;
  ConvergenceReport report;
};

/// CG for symmetric positive (semi-)definite operators. Stops when
/// ||apply(x) - b|| <= tol * ||b||. With x0 = 0 on a consistent singular
/// system this converges to the minimum-norm solution.
inline CgResult conjugate_gradient(const LinearOperator& apply,
                                   const VectorXd& b, double tol = 1e-10,
                                   std::int64_t max_iter = 10000,
                                   const VectorXd* x0 = nullptr) {
  const double b_norm = b.norm();
  VectorXd x = (x0 != nullptr) ? *x0 : VectorXd::Zero(b.size());
  if (b_norm == 0.0) {
    return {VectorXd::Zero(b.size()), {true, 0, 0.0}};
  }
  VectorXd r = b - apply(x);
  VectorXd p = r;
  double rs = r.squaredNorm();
  CgResult out;
  for (std::int64_t it = 0; it < max_iter; ++it) {
    if (std::sqrt(rs) <= tol * b_norm) {
      out.x = std::move(x);
      out.report = {true, it, std::sqrt(rs) / b_norm};
      return out;
    }
    VectorXd ap = apply(p);
    if (!ap.allFinite()) {
      throw NumericalFailure("conjugate_gradient: operator produced non-finite values");
    }
    const double denom = p.dot(ap);
    if (denom <= 0.0) {
      // Stalled on the numerical nullspace; return the current iterate.
      out.x = std::move(x);
      out.report = {std::sqrt(rs) <= 10 * tol * b_norm, it,
                    std::sqrt(rs) / b_norm};
      return out;
    }
    const double alpha = rs / denom;
    x += alpha * p;
    r -= alpha * ap;
    const double rs_next = r.squaredNorm();
    p = r + (rs_next / rs) * p;
    rs = rs_next;
  }
  out.x = std::move(x);
  out.report = {std::sqrt(rs) <= tol * b_norm, max_iter,
                std::sqrt(rs) / b_norm};
  return out;
}

// ---------------------------------------------------------------------------
// Pair incidence
// ---------------------------------------------------------------------------

/// Lexicographic enumeration of the m(m-1)/2 unordered node pairs (j, j'),
/// j < j'. A weight vector over this order maps bijectively to a symmetric
/// hollow nonnegative adjacency matrix.
class PairIncidence {
 public:
  explicit PairIncidence(Eigen::Index m) : m_(m) {
    if (m < 1) throw InvalidInput("PairIncidence: need at least one node");
    pairs_.reserve(static_cast<std::size_t>(pair_count()));
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index jp = j + 1; jp < m; ++jp) {
        pairs_.emplace_back(j, jp);
      }
    }
  }

  Eigen::Index nodes() const { return m_; }
  Eigen::Index pair_count() const { return m_ * (m_ - 1) / 2; }
  const std::pair<Eigen::Index, Eigen::Index>& pair(Eigen::Index k) const {
    return pairs_[static_cast<std::size_t>(k)];
  }

  /// Degrees d_j = sum of weights of pairs containing j (S_inc w).
  VectorXd degrees(const VectorXd& w) const {
    VectorXd d = VectorXd::Zero(m_);
    for (Eigen::Index k = 0; k < pair_count(); ++k) {
      const auto& [j, jp] = pairs_[static_cast<std::size_t>(k)];
      d[j] += w[k];
      d[jp] += w[k];
    }
    return d;
  }

  /// Adjoint of `degrees`: (S_inc^T d)_k = d_j + d_j'.
  VectorXd pair_sums(const VectorXd& d) const {
    VectorXd s(pair_count());
    for (Eigen::Index k = 0; k < pair_count(); ++k) {
      const auto& [j, jp] = pairs_[static_cast<std::size_t>(k)];
      s[k] = d[j] + d[jp];
    }
    return s;
  }

  MatrixXd adjacency(const VectorXd& w) const {
    MatrixXd adj = MatrixXd::Zero(m_, m_);
    for (Eigen::Index k = 0; k < pair_count(); ++k) {
      const auto& [j, jp] = pairs_[static_cast<std::size_t>(k)];
      adj(j, jp) = w[k];
      adj(jp, j) = w[k];
    }
    return adj;
  }

  VectorXd weights_from_adjacency(const MatrixXd& adj) const {
    VectorXd w(pair_count());
    for (Eigen::Index k = 0; k < pair_count(); ++k) {
      const auto& [j, jp] = pairs_[static_cast<std::size_t>(k)];
      w[k] = adj(j, jp);
    }
    return w;
  }

 private:
  Eigen::Index m_;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs_;
};

}  // namespace kgl
