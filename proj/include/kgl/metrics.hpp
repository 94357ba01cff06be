// Evaluation metrics: average precision of edge recovery under a sweeping
// weight threshold, normalized adjacency error, and masked data MSEs.

#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include "kgl/errors.hpp"
#include "kgl/graph.hpp"

namespace kgl {

struct EvalReport {
  std::optional<double> aps;
  std::optional<double> sse_g;
  std::optional<double> mse_train;
  std::optional<double> mse_oos;
};

/// Non-interpolated average precision: pairs are labeled by (true weight > 0)
/// and ranked by estimated weight; AP = sum over descending-score thresholds
/// of (R_k - R_{k-1}) P_k, with equal scores collapsed into one threshold.
inline double average_precision(const Graph& truth, const Graph& estimate) {
  if (truth.nodes() != estimate.nodes()) {
    throw InvalidInput("average_precision: node counts differ");
  }
  const VectorXd& w_true = truth.weights();
  const VectorXd& scores = estimate.weights();
  const Eigen::Index k = w_true.size();
  const double positives = (w_true.array() > 0.0).count();
  if (positives == 0) {
    throw UndefinedMetric("average_precision: ground truth has no edges");
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(k));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return scores[a] > scores[b];
  });
  double ap = 0.0;
  double tp = 0.0;
  double recall_prev = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (w_true[order[j]] > 0.0) tp += 1.0;
      ++j;
    }
    const double predicted = static_cast<double>(j);
    const double precision = tp / predicted;
    const double recall = tp / positives;
    ap += (recall - recall_prev) * precision;
    recall_prev = recall;
    i = j;
  }
  return ap;
}

/// ||W-hat - W0||_F^2 / ||W0||_F^2 over dense adjacency matrices.
inline double sse_graph(const Graph& truth, const Graph& estimate) {
  if (truth.nodes() != estimate.nodes()) {
    throw InvalidInput("sse_graph: node counts differ");
  }
  const double denom = truth.adjacency().squaredNorm();
  if (denom == 0.0) {
    throw DivisionByZero("sse_graph: ground-truth adjacency is zero");
  }
  return (estimate.adjacency() - truth.adjacency()).squaredNorm() / denom;
}

/// ||M o (Y-hat - Y)||_F^2 / ||M||_F^2; the denominator counts observed
/// entries since the mask is binary.
inline double mse_training(const MatrixXd& y, const MatrixXd& y_hat,
                           const MatrixXd& mask) {
  const double count = mask.squaredNorm();
  if (count == 0.0) {
    throw UndefinedMetric("mse_training: no observed entries");
  }
  return mask.cwiseProduct(y_hat - y).squaredNorm() / count;
}

/// ||(11^T - M) o (Y-hat - Y)||_F^2 / ||11^T - M||_F^2 over missing entries.
inline double mse_out_of_sample(const MatrixXd& y, const MatrixXd& y_hat,
                                const MatrixXd& mask) {
  const MatrixXd complement = MatrixXd::Ones(mask.rows(), mask.cols()) - mask;
  const double count = complement.squaredNorm();
  if (count == 0.0) {
    throw UndefinedMetric("mse_out_of_sample: no missing entries");
  }
  return complement.cwiseProduct(y_hat - y).squaredNorm() / count;
}

}  // namespace kgl
