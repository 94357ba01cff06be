// Undirected weighted graphs stored as a pair-indexed weight vector, with
// adjacency/Laplacian conversions, trace normalization, and the random
// topology generators (Erdos-Renyi, Barabasi-Albert, stochastic block model)
// used to draw ground truth.

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kgl/errors.hpp"
#include "kgl/numerics.hpp"
#include "kgl/rng.hpp"

namespace kgl {

/// Weighted undirected graph on m nodes. Weights live on the lexicographic
/// pair order of PairIncidence; W and L = diag(W1) - W are derived views.
class Graph {
 public:
  Graph(Eigen::Index m, VectorXd weights)
      : incidence_(m), weights_(std::move(weights)) {
    if (weights_.size() != incidence_.pair_count()) {
      throw InvalidInput("Graph: weight vector has wrong length");
    }
    if ((weights_.array() < 0.0).any()) {
      throw InvalidInput("Graph: negative edge weight");
    }
    if (!weights_.allFinite()) {
      throw InvalidInput("Graph: non-finite edge weight");
    }
  }

  Eigen::Index nodes() const { return incidence_.nodes(); }
  const VectorXd& weights() const { return weights_; }
  const PairIncidence& incidence() const { return incidence_; }

  MatrixXd adjacency() const { return incidence_.adjacency(weights_); }
  VectorXd degrees() const { return incidence_.degrees(weights_); }

  MatrixXd laplacian() const {
    MatrixXd l = -adjacency();
    l.diagonal() = degrees();
    return l;
  }

  /// Tr(L) = sum of degrees = twice the total edge weight.
  double laplacian_trace() const { return 2.0 * weights_.sum(); }

  Eigen::Index edge_count() const {
    return (weights_.array() > 0.0).count();
  }

  double density() const {
    return static_cast<double>(edge_count()) /
           static_cast<double>(incidence_.pair_count());
  }

 private:
  PairIncidence incidence_;
  VectorXd weights_;
};

inline Graph from_weights(const VectorXd& w, Eigen::Index m) {
  return Graph(m, w);
}

inline std::pair<MatrixXd, MatrixXd> to_dense(const Graph& g) {
  return {g.adjacency(), g.laplacian()};
}

/// Rescale weights so Tr(L) = m exactly; topology unchanged.
inline Graph normalize(const Graph& g) {
  const double trace = g.laplacian_trace();
  if (trace <= 0.0) {
    throw DegenerateGraph("normalize: graph has no positive weights");
  }
  const double scale = static_cast<double>(g.nodes()) / trace;
  return Graph(g.nodes(), g.weights() * scale);
}

// ---------------------------------------------------------------------------
// Random graph models
// ---------------------------------------------------------------------------

enum class GraphKind { ER, BA, SBM };

inline std::string to_string(GraphKind kind) {
  switch (kind) {
    case GraphKind::ER: return "ER";
    case GraphKind::BA: return "BA";
    case GraphKind::SBM: return "SBM";
  }
  return "?";
}

inline GraphKind graph_kind_from_string(const std::string& s) {
  if (s == "ER") return GraphKind::ER;
  if (s == "BA") return GraphKind::BA;
  if (s == "SBM") return GraphKind::SBM;
  throw InvalidConfig("unknown graph kind: " + s);
}

struct GraphModel {
  GraphKind kind = GraphKind::ER;
  double target_density = 0.3;
  int sbm_blocks = 2;
  double sbm_in_out_ratio = 4.0;

  void validate() const {
    if (!(target_density > 0.0 && target_density < 1.0)) {
      throw InvalidConfig("GraphModel: target_density must lie in (0,1)");
    }
    if (kind == GraphKind::SBM && sbm_blocks < 2) {
      throw InvalidConfig("GraphModel: SBM needs at least 2 blocks");
    }
  }
};

namespace detail {

// Topology draws return a 0/1 pair indicator in PairIncidence order.
inline std::vector<char> er_topology(const PairIncidence& inc, double p,
                                     Rng& rng) {
  std::vector<char> present(static_cast<std::size_t>(inc.pair_count()));
  for (auto& e : present) e = rng.bernoulli(p) ? 1 : 0;
  return present;
}

inline std::vector<char> sbm_topology(const PairIncidence& inc,
                                      const GraphModel& model, Rng& rng) {
  const Eigen::Index m = inc.nodes();
  const int blocks = model.sbm_blocks;
  // Expected density = (ratio * in_pairs + out_pairs) / total * p_out.
  Eigen::Index in_pairs = 0;
  auto block_of = [&](Eigen::Index j) {
    return static_cast<int>(j * blocks / m);
  };
  for (Eigen::Index k = 0; k < inc.pair_count(); ++k) {
    const auto& [j, jp] = inc.pair(k);
    if (block_of(j) == block_of(jp)) ++in_pairs;
  }
  const Eigen::Index out_pairs = inc.pair_count() - in_pairs;
  const double denom = model.sbm_in_out_ratio * static_cast<double>(in_pairs) +
                       static_cast<double>(out_pairs);
  double p_out = model.target_density *
                 static_cast<double>(inc.pair_count()) / denom;
  double p_in = std::min(1.0, model.sbm_in_out_ratio * p_out);
  p_out = std::min(1.0, p_out);
  std::vector<char> present(static_cast<std::size_t>(inc.pair_count()));
  for (Eigen::Index k = 0; k < inc.pair_count(); ++k) {
    const auto& [j, jp] = inc.pair(k);
    const double p = block_of(j) == block_of(jp) ? p_in : p_out;
    present[static_cast<std::size_t>(k)] = rng.bernoulli(p) ? 1 : 0;
  }
  return present;
}

// Preferential attachment: seed clique on k+1 nodes, then each new node
// attaches to k distinct existing nodes with probability proportional to
// degree.
inline std::vector<char> ba_topology(const PairIncidence& inc,
                                     const GraphModel& model, Rng& rng) {
  const Eigen::Index m = inc.nodes();
  const double raw = model.target_density * static_cast<double>(m - 1) / 2.0;
  Eigen::Index attach = static_cast<Eigen::Index>(std::llround(raw));
  attach = std::max<Eigen::Index>(1, std::min(attach, m - 1));
  if (attach + 1 > m) {
    throw InvalidConfig("BA: attachment count infeasible for m = " +
                        std::to_string(m));
  }
  std::vector<char> present(static_cast<std::size_t>(inc.pair_count()), 0);
  auto index_of = [&](Eigen::Index a, Eigen::Index b) {
    if (a > b) std::swap(a, b);
    // Offset of row a in the lexicographic pair list, then within-row shift.
    return a * m - a * (a + 1) / 2 + (b - a - 1);
  };
  std::vector<double> degree(static_cast<std::size_t>(m), 0.0);
  auto add_edge = [&](Eigen::Index a, Eigen::Index b) {
    present[static_cast<std::size_t>(index_of(a, b))] = 1;
    degree[static_cast<std::size_t>(a)] += 1.0;
    degree[static_cast<std::size_t>(b)] += 1.0;
  };
  for (Eigen::Index a = 0; a <= attach; ++a) {
    for (Eigen::Index b = a + 1; b <= attach; ++b) add_edge(a, b);
  }
  for (Eigen::Index v = attach + 1; v < m; ++v) {
    std::vector<char> chosen(static_cast<std::size_t>(v), 0);
    for (Eigen::Index e = 0; e < attach; ++e) {
      double total = 0.0;
      for (Eigen::Index u = 0; u < v; ++u) {
        if (!chosen[static_cast<std::size_t>(u)]) {
          total += degree[static_cast<std::size_t>(u)];
        }
      }
      double draw = rng.uniform() * total;
      // Cumulative scan; round-off past the end falls back to the last
      // unchosen candidate, which always exists (attach <= v - 1).
      Eigen::Index picked = 0;
      bool found = false;
      for (Eigen::Index u = 0; u < v; ++u) {
        if (chosen[static_cast<std::size_t>(u)]) continue;
        picked = u;
        draw -= degree[static_cast<std::size_t>(u)];
        if (draw <= 0.0) {
          found = true;
          break;
        }
      }
      (void)found;
      chosen[static_cast<std::size_t>(picked)] = 1;
      add_edge(picked, v);
    }
  }
  return present;
}

}  // namespace detail

/// Draw a graph from `model`: topology tuned to the target edge density,
/// per-edge weights from U(0,1) symmetrized as (W + W^T)/2, then rescaled so
/// Tr(L) = m.
inline Graph generate(const GraphModel& model, Eigen::Index m,
                      std::uint64_t rng_seed) {
  model.validate();
  if (m < 3) throw InvalidConfig("generate: need m >= 3");
  Rng rng(rng_seed);
  PairIncidence inc(m);
  std::vector<char> present;
  switch (model.kind) {
    case GraphKind::ER:
      present = detail::er_topology(inc, model.target_density, rng);
      break;
    case GraphKind::BA:
      present = detail::ba_topology(inc, model, rng);
      break;
    case GraphKind::SBM:
      present = detail::sbm_topology(inc, model, rng);
      break;
  }
  VectorXd w = VectorXd::Zero(inc.pair_count());
  for (Eigen::Index k = 0; k < inc.pair_count(); ++k) {
    if (present[static_cast<std::size_t>(k)]) {
      // Both off-diagonal entries drawn independently, then averaged.
      w[k] = 0.5 * (rng.uniform() + rng.uniform());
    }
  }
  return normalize(Graph(m, w));
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json graph_to_json(const Graph& g) {
  nlohmann::json j;
  j["m"] = g.nodes();
  j["pairs_order"] = "lex";
  j["weights"] = std::vector<double>(g.weights().data(),
                                     g.weights().data() + g.weights().size());
  return j;
}

inline Graph graph_from_json(const nlohmann::json& j) {
  if (j.at("pairs_order").get<std::string>() != "lex") {
    throw InvalidInput("graph_from_json: unsupported pair order");
  }
  const auto m = j.at("m").get<Eigen::Index>();
  const auto values = j.at("weights").get<std::vector<double>>();
  VectorXd w(static_cast<Eigen::Index>(values.size()));
  for (Eigen::Index k = 0; k < w.size(); ++k) {
    w[k] = values[static_cast<std::size_t>(k)];
  }
  return Graph(m, w);
}

}  // namespace kgl
