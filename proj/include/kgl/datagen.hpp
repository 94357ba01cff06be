// Synthetic data generation: coefficients drawn from the matrix-normal prior
// vec(A) ~ N(0, pinv(K_x) (x) pinv(K_z)), signals Y = K_z A K_x + E with
// i.i.d. Gaussian noise, and Bernoulli observation masks.

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>

#include <json.hpp>

#include "kgl/errors.hpp"
#include "kgl/graph.hpp"
#include "kgl/io.hpp"
#include "kgl/kernels.hpp"
#include "kgl/numerics.hpp"
#include "kgl/rng.hpp"

namespace kgl {

struct DatasetMeta {
  double noise_var = 0.0;    // sigma_eps^2
  double missing_rate = 0.0; // r
  double alpha = 1.0;        // smoothing strength of the generating K_x
  std::uint64_t seed = 0;
  bool dependent = false;
};

/// Observation matrix with its side-information kernels, optional mask
/// (1 = observed), generation metadata, and the ground-truth graph when the
/// data are synthetic.
struct Dataset {
  MatrixXd y;                       // n x m
  std::optional<MatrixXd> mask;     // n x m, entries in {0,1}
  KernelMatrix k_x;                 // m x m node-side kernel
  KernelMatrix k_z;                 // n x n observation-side kernel
  DatasetMeta meta;
  std::optional<Graph> truth;

  Eigen::Index n() const { return y.rows(); }
  Eigen::Index m() const { return y.cols(); }

  /// Y with zeros at masked positions, for models that cannot use the mask.
  MatrixXd masked_y() const {
    return mask ? MatrixXd(y.cwiseProduct(*mask)) : y;
  }
};

/// Draw A (n x m) with vec(A) ~ N(0, pinv(K_x) (x) pinv(K_z)), realized as
/// A = P_z G P_x with G i.i.d. standard normal and P_x, P_z the PSD square
/// roots of the pseudo-inverses. Never touches an mn-by-mn covariance.
inline MatrixXd sample_coefficients(const KernelMatrix& k_x,
                                    const KernelMatrix& k_z,
                                    std::uint64_t rng_seed) {
  const Eigen::Index m = k_x.size();
  const Eigen::Index n = k_z.size();
  const MatrixXd p_x = psd_sqrt(sym_eig(k_x.pinv()));
  const MatrixXd p_z = psd_sqrt(sym_eig(k_z.pinv()));
  Rng rng(rng_seed);
  MatrixXd g(n, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    for (Eigen::Index i = 0; i < n; ++i) g(i, j) = rng.normal();
  }
  return p_z * g * p_x;
}

/// Generate a dataset on `graph`: K_x = (I + alpha L)^-1; K_z is the
/// identity for independent observations or an RBF kernel on the stamps
/// z = [0, 1, ..., n-1] with median-heuristic bandwidth for dependent ones.
inline Dataset synthesize(const Graph& graph, Eigen::Index n, bool dependent,
                          double noise_var, double alpha,
                          std::uint64_t rng_seed) {
  if (n < 2) throw InvalidInput("synthesize: need n >= 2");
  if (noise_var < 0.0) throw InvalidInput("synthesize: negative noise variance");
  Dataset ds;
  ds.k_x = graph_smoothing_kernel(graph, alpha);
  if (dependent) {
    MatrixXd stamps(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) stamps(i, 0) = static_cast<double>(i);
    ds.k_z = rbf_kernel(stamps);
  } else {
    ds.k_z = identity_kernel(n);
  }
  MatrixXd a = sample_coefficients(ds.k_x, ds.k_z, rng_seed);
  // Noise stream is derived from the same seed, offset to keep the
  // coefficient draw identical whether or not noise is added.
  Rng noise_rng(rng_seed ^ 0x9e3779b97f4a7c15ull);
  ds.y = ds.k_z.gram() * a * ds.k_x.gram();
  if (noise_var > 0.0) {
    const double sd = std::sqrt(noise_var);
    for (Eigen::Index j = 0; j < ds.y.cols(); ++j) {
      for (Eigen::Index i = 0; i < ds.y.rows(); ++i) {
        ds.y(i, j) += sd * noise_rng.normal();
      }
    }
  }
  ds.meta = {noise_var, 0.0, alpha, rng_seed, dependent};
  ds.truth = graph;
  return ds;
}

/// Attach an i.i.d. Bernoulli(1 - r) observation mask. Y itself is left
/// untouched; consumers apply the mask.
inline Dataset apply_mask(Dataset dataset, double missing_rate,
                          std::uint64_t rng_seed) {
  if (!(missing_rate >= 0.0 && missing_rate < 1.0)) {
    throw InvalidInput("apply_mask: missing rate must lie in [0,1)");
  }
  Rng rng(rng_seed);
  MatrixXd mask(dataset.n(), dataset.m());
  for (Eigen::Index j = 0; j < mask.cols(); ++j) {
    for (Eigen::Index i = 0; i < mask.rows(); ++i) {
      mask(i, j) = rng.bernoulli(1.0 - missing_rate) ? 1.0 : 0.0;
    }
  }
  if (mask.sum() == 0.0) {
    throw DegenerateMask("apply_mask: realized mask has no observed entries");
  }
  dataset.mask = std::move(mask);
  dataset.meta.missing_rate = missing_rate;
  return dataset;
}

// ---------------------------------------------------------------------------
// Directory serialization: Y.csv, mask.csv (when present), K_x.csv, K_z.csv,
// graph.json (when ground truth is known), meta.json.
// ---------------------------------------------------------------------------

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_csv(dir / "Y.csv", ds.y);
  if (ds.mask) write_csv(dir / "mask.csv", *ds.mask);
  write_csv(dir / "K_x.csv", ds.k_x.gram());
  write_csv(dir / "K_z.csv", ds.k_z.gram());
  if (ds.truth) {
    write_file(dir / "graph.json", graph_to_json(*ds.truth).dump(2) + "\n");
  }
  nlohmann::json meta;
  meta["noise_var"] = ds.meta.noise_var;
  meta["missing_rate"] = ds.meta.missing_rate;
  meta["alpha"] = ds.meta.alpha;
  meta["seed"] = ds.meta.seed;
  meta["dependent"] = ds.meta.dependent;
  meta["k_x_provenance"] = ds.k_x.provenance().describe();
  meta["k_z_provenance"] = ds.k_z.provenance().describe();
  write_file(dir / "meta.json", meta.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.y = read_csv(dir / "Y.csv");
  if (std::filesystem::exists(dir / "mask.csv")) {
    ds.mask = read_csv(dir / "mask.csv");
    if (((ds.mask->array() != 0.0) && (ds.mask->array() != 1.0)).any()) {
      throw InvalidInput("load_dataset: mask entries must be 0 or 1");
    }
  }
  ds.k_x = external_kernel(read_csv(dir / "K_x.csv"));
  ds.k_z = external_kernel(read_csv(dir / "K_z.csv"));
  if (std::filesystem::exists(dir / "graph.json")) {
    ds.truth = graph_from_json(nlohmann::json::parse(read_file(dir / "graph.json")));
  }
  const auto meta = nlohmann::json::parse(read_file(dir / "meta.json"));
  ds.meta.noise_var = meta.value("noise_var", 0.0);
  ds.meta.missing_rate = meta.value("missing_rate", 0.0);
  ds.meta.alpha = meta.value("alpha", 1.0);
  ds.meta.seed = meta.value("seed", std::uint64_t{0});
  ds.meta.dependent = meta.value("dependent", false);
  if (ds.y.cols() != ds.k_x.size() || ds.y.rows() != ds.k_z.size()) {
    throw InvalidInput("load_dataset: kernel sizes do not match Y");
  }
  return ds;
}

}  // namespace kgl
