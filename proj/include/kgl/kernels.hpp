// Gram matrix construction for the node side and the observation side:
// RBF kernels with the median-heuristic bandwidth, graph smoothing kernels
// (I + alpha L)^-1, Laplacian pseudo-inverse kernels, identities, and
// externally supplied matrices. Every kernel carries a cached
// eigendecomposition and records how it was built.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "kgl/errors.hpp"
#include "kgl/graph.hpp"
#include "kgl/numerics.hpp"

namespace kgl {

struct KernelProvenance {
  enum class Kind { RBF, GraphSmoothing, LaplacianPinv, Identity, External };
  Kind kind = Kind::External;
  double param = 0.0;  // bandwidth for RBF, alpha for GraphSmoothing

  std::string describe() const {
    switch (kind) {
      case Kind::RBF: return "RBF(bandwidth=" + std::to_string(param) + ")";
      case Kind::GraphSmoothing:
        return "GraphSmoothing(alpha=" + std::to_string(param) + ")";
      case Kind::LaplacianPinv: return "LaplacianPinv";
      case Kind::Identity: return "Identity";
      case Kind::External: return "External";
    }
    return "?";
  }
};

/// Symmetric PSD Gram matrix with a lazily cached eigendecomposition.
/// When a kernel is shared across threads, call eig() once before sharing.
class KernelMatrix {
 public:
  KernelMatrix() = default;
  KernelMatrix(MatrixXd gram, KernelProvenance provenance)
      : gram_(std::move(gram)), provenance_(provenance) {
    if (gram_.rows() != gram_.cols()) {
      throw InvalidInput("KernelMatrix: gram matrix must be square");
    }
    if (!gram_.isApprox(gram_.transpose(), 1e-10)) {
      throw InvalidInput("KernelMatrix: gram matrix must be symmetric");
    }
  }

  const MatrixXd& gram() const { return gram_; }
  Eigen::Index size() const { return gram_.rows(); }
  const KernelProvenance& provenance() const { return provenance_; }

  const SymEig& eig() const {
    if (!eig_) {
      eig_ = std::make_shared<SymEig>(sym_eig(gram_));
      const double max_abs = eig_->values.cwiseAbs().maxCoeff();
      if (max_abs > 0.0 && eig_->values.minCoeff() < -1e-8 * max_abs) {
        throw NotPSD("KernelMatrix: " + provenance_.describe() +
                     " is not positive semi-definite");
      }
    }
    return *eig_;
  }

  /// True when the smallest eigenvalue clears rel_tol * largest, i.e. a
  /// direct inverse is numerically safe.
  bool is_invertible(double rel_tol = 1e-10) const {
    const auto& e = eig();
    const double max_abs = e.values.cwiseAbs().maxCoeff();
    return max_abs > 0.0 && e.values.minCoeff() > rel_tol * max_abs;
  }

  MatrixXd pinv(double rel_tol = 1e-10) const {
    return pseudo_inverse(eig(), rel_tol);
  }

  MatrixXd sqrt() const { return psd_sqrt(eig()); }

  bool is_identity() const {
    return gram_.isIdentity(0.0);
  }

 private:
  MatrixXd gram_;
  KernelProvenance provenance_;
  mutable std::shared_ptr<SymEig> eig_;
};

/// Median of the q(q-1)/2 pairwise Euclidean distances.
inline double median_heuristic(const MatrixXd& points) {
  const Eigen::Index q = points.rows();
  if (q < 2) throw InvalidInput("median_heuristic: need at least two points");
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(q * (q - 1) / 2));
  for (Eigen::Index i = 0; i < q; ++i) {
    for (Eigen::Index j = i + 1; j < q; ++j) {
      dists.push_back((points.row(i) - points.row(j)).norm());
    }
  }
  if (*std::max_element(dists.begin(), dists.end()) == 0.0) {
    throw DegenerateBandwidth("median_heuristic: all points identical");
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t n = dists.size();
  return n % 2 == 1 ? dists[n / 2]
                    : 0.5 * (dists[n / 2 - 1] + dists[n / 2]);
}

/// Default RBF bandwidth from the median heuristic, in the median-trick
/// form K = exp(-d^2 / median(d)), i.e. sigma = sqrt(median / 2) in the
/// exp(-d^2 / (2 sigma^2)) convention.
inline double median_heuristic_bandwidth(const MatrixXd& points) {
  return std::sqrt(median_heuristic(points) / 2.0);
}

/// K_ij = exp(-||p_i - p_j||^2 / (2 sigma^2)); an absent bandwidth falls
/// back to the median heuristic, a supplied non-positive one is an error.
inline KernelMatrix rbf_kernel(const MatrixXd& points,
                               std::optional<double> bandwidth = std::nullopt) {
  const Eigen::Index q = points.rows();
  if (q < 2) throw InvalidInput("rbf_kernel: need at least two points");
  if (bandwidth && !(*bandwidth > 0.0)) {
    throw InvalidBandwidth("rbf_kernel: bandwidth must be > 0");
  }
  const double sigma =
      bandwidth ? *bandwidth : median_heuristic_bandwidth(points);
  MatrixXd k(q, q);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (Eigen::Index i = 0; i < q; ++i) {
    k(i, i) = 1.0;
    for (Eigen::Index j = i + 1; j < q; ++j) {
      const double d2 = (points.row(i) - points.row(j)).squaredNorm();
      k(i, j) = k(j, i) = std::exp(-d2 * inv);
    }
  }
  return KernelMatrix(std::move(k),
                      {KernelProvenance::Kind::RBF, sigma});
}

/// K = (I + alpha L)^-1 through the spectrum of L; strictly PD for alpha > 0.
inline KernelMatrix graph_smoothing_kernel(const Graph& graph, double alpha) {
  if (!(alpha > 0.0)) {
    throw InvalidConfig("graph_smoothing_kernel: alpha must be > 0");
  }
  SymEig eig = sym_eig(graph.laplacian());
  MatrixXd k = eig.map_values(
      [alpha](double v) { return 1.0 / (1.0 + alpha * std::max(v, 0.0)); });
  return KernelMatrix(std::move(k),
                      {KernelProvenance::Kind::GraphSmoothing, alpha});
}

/// K = pinv(L); PSD with the constant vector in the nullspace.
inline KernelMatrix laplacian_pinv_kernel(const Graph& graph) {
  MatrixXd k = pseudo_inverse(sym_eig(graph.laplacian()));
  return KernelMatrix(std::move(k),
                      {KernelProvenance::Kind::LaplacianPinv, 0.0});
}

inline KernelMatrix identity_kernel(Eigen::Index q) {
  if (q < 1) throw InvalidInput("identity_kernel: need q >= 1");
  return KernelMatrix(MatrixXd::Identity(q, q),
                      {KernelProvenance::Kind::Identity, 0.0});
}

/// Wrap an externally supplied dense Gram matrix, rejecting asymmetric or
/// non-PSD input.
inline KernelMatrix external_kernel(MatrixXd gram) {
  KernelMatrix k(std::move(gram), {KernelProvenance::Kind::External, 0.0});
  k.eig();  // validates PSD eagerly
  return k;
}

}  // namespace kgl
