#pragma once

#include <oodlab/core.hpp>
#include <oodlab/dataset.hpp>
#include <oodlab/model.hpp>
#include <oodlab/subspace.hpp>

#include <cmath>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

namespace oodlab {

struct PruneReport {
  Index iteration = -1;
  Index kept_rank = 0;
  std::vector<double> dropped_singulars;
  // Filled by callers with ground truth in hand; NaN otherwise.
  double pre_spurious_energy = std::numeric_limits<double>::quiet_NaN();
  double post_spurious_energy = std::numeric_limits<double>::quiet_NaN();
  double pre_invariant_energy = std::numeric_limits<double>::quiet_NaN();
  double post_invariant_energy = std::numeric_limits<double>::quiet_NaN();
  double risk_gap_ratio = std::numeric_limits<double>::quiet_NaN();
  bool degenerate_gap = false;
};

// Minimal number of leading directions whose squared singular values reach
// the requested energy fraction. Always returns at least 1 for nonzero input.
inline Index energy_rank(const Vector& singular_values, double energy_keep) {
  if (energy_keep <= 0.0 || energy_keep > 1.0)
    throw BadFractionError("energy_rank: energy_keep must lie in (0, 1]");
  double total = 0.0;
  for (Index i = 0; i < singular_values.size(); ++i)
    total += singular_values(i) * singular_values(i);
  if (total <= 0.0) return 0;
  const double target = energy_keep * total;
  double cum = 0.0;
  for (Index k = 0; k < singular_values.size(); ++k) {
    cum += singular_values(k) * singular_values(k);
    if (cum >= target * (1.0 - 1e-12)) return k + 1;
  }
  return singular_values.size();
}

// Removes the trailing response directions of the flagged set from the
// extractor and shrinks each gate by the energy fraction it lost. The SVD is
// taken of the raw (ungated) flagged responses, so repeated application with
// the same flagged set is a no-op once the surviving directions carry the
// full retained energy.
inline std::pair<ModelState, PruneReport> prune_by_svd(const ModelState& m,
                                                       const Matrix& flagged_x,
                                                       double energy_keep) {
  if (flagged_x.rows() == 0)
    throw EmptyFlagSetError("prune_by_svd: no flagged instances");
  if (energy_keep <= 0.0 || energy_keep > 1.0)
    throw BadFractionError("prune_by_svd: energy_keep must lie in (0, 1]");
  if (flagged_x.cols() != m.w.cols())
    throw ShapeMismatchError("prune_by_svd: input dimension mismatch");

  const Matrix responses = flagged_x * m.w.transpose();  // nf x m, raw
  // Decompose responses^T so the left factor lives on the model side.
  const ProjectionDecomposition dec = svd(responses.transpose());
  const Index rank = numerical_rank(dec.singular_values);

  ModelState out = m;
  PruneReport report;
  report.kept_rank = 0;
  if (rank == 0) return {out, report};  // nothing to prune against

  const Index keep = std::min(energy_rank(dec.singular_values, energy_keep), rank);
  report.kept_rank = keep;
  for (Index i = keep; i < rank; ++i)
    report.dropped_singulars.push_back(dec.singular_values(i));
  if (keep >= rank) return {out, report};

  // Deflate the extractor along each dropped response direction.
  for (Index i = keep; i < rank; ++i) {
    const Vector xi = dec.left.col(i);
    out.w -= xi * (xi.transpose() * out.w);
  }
  // Per-channel energy audit drives the gate update.
  for (Index j = 0; j < m.w.rows(); ++j) {
    double full = 0.0, dropped = 0.0;
    for (Index i = 0; i < rank; ++i) {
      const double s2 = dec.singular_values(i) * dec.singular_values(i);
      const double contrib = s2 * dec.left(j, i) * dec.left(j, i);
      full += contrib;
      if (i >= keep) dropped += contrib;
    }
    if (full > 0.0) {
      double factor = (full - dropped) / full;
      factor = std::min(1.0, std::max(0.0, factor));
      out.saliency(j) *= factor;
    }
  }
  return {out, report};
}

// Zeroes all but the `keep` largest-norm rows of the extractor. Ties break
// toward keeping the lower row index.
inline ModelState magnitude_prune(const ModelState& m, Index keep) {
  if (keep < 1 || keep > m.w.rows())
    throw BadRankError("magnitude_prune: keep must lie in [1, channels]");
  std::vector<Index> order(static_cast<std::size_t>(m.w.rows()));
  std::iota(order.begin(), order.end(), Index{0});
  std::vector<double> norms(order.size());
  for (Index j = 0; j < m.w.rows(); ++j)
    norms[static_cast<std::size_t>(j)] = m.w.row(j).norm();
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return norms[static_cast<std::size_t>(a)] > norms[static_cast<std::size_t>(b)];
  });
  ModelState out = m;
  for (std::size_t r = static_cast<std::size_t>(keep); r < order.size(); ++r)
    out.w.row(order[r]).setZero();
  return out;
}

struct RiskGap {
  double ratio = std::numeric_limits<double>::quiet_NaN();
  bool degenerate = false;      // pruned gap below resolution; ratio is +inf
  double gap_full = 0.0;        // |mean OOD discrepancy - mean ID discrepancy|
  double gap_pruned = 0.0;
  double raw_gap_full = 0.0;    // same gap on ungated responses, for logging
  double raw_gap_pruned = 0.0;
};

namespace detail {

// Mean per-population distance between a model's responses and the target
// extractor's responses. Returns {id_mean, ood_mean}.
inline std::pair<double, double> population_discrepancy(const Matrix& responses,
                                                        const Matrix& reference,
                                                        const std::vector<std::uint8_t>& id_mask) {
  double id_sum = 0.0, ood_sum = 0.0;
  Index id_n = 0, ood_n = 0;
  for (Index i = 0; i < responses.rows(); ++i) {
    const double dist = (responses.row(i) - reference.row(i)).norm();
    if (id_mask[static_cast<std::size_t>(i)]) {
      id_sum += dist;
      ++id_n;
    } else {
      ood_sum += dist;
      ++ood_n;
    }
  }
  if (id_n == 0 || ood_n == 0)
    throw EmptyPopulationError("risk_gap_ratio: needs both populations present");
  return {id_sum / static_cast<double>(id_n), ood_sum / static_cast<double>(ood_n)};
}

}  // namespace detail

// Ratio of the full model's ID/OOD discrepancy gap to the pruned model's.
// A ratio above 1 means pruning tightened the two populations together.
// Degenerate pruned gaps yield +inf with the flag set rather than a throw.
inline RiskGap risk_gap_ratio(const ModelState& full, const ModelState& pruned,
                              const BiasedDataset& ds) {
  if (ds.truth.w_star.size() == 0)
    throw MissingTruthError("risk_gap_ratio: dataset lacks a target extractor");
  if (full.w.cols() != ds.d() || pruned.w.cols() != ds.d())
    throw ShapeMismatchError("risk_gap_ratio: model/dataset dimension mismatch");
  const Matrix reference = ds.x * ds.truth.w_star.transpose();

  const auto [id_f, ood_f] =
      detail::population_discrepancy(project_features(full, ds.x), reference, ds.id_mask);
  const auto [id_p, ood_p] =
      detail::population_discrepancy(project_features(pruned, ds.x), reference, ds.id_mask);
  const auto [rid_f, rood_f] =
      detail::population_discrepancy(ds.x * full.w.transpose(), reference, ds.id_mask);
  const auto [rid_p, rood_p] =
      detail::population_discrepancy(ds.x * pruned.w.transpose(), reference, ds.id_mask);

  RiskGap out;
  out.gap_full = std::abs(ood_f - id_f);
  out.gap_pruned = std::abs(ood_p - id_p);
  out.raw_gap_full = std::abs(rood_f - rid_f);
  out.raw_gap_pruned = std::abs(rood_p - rid_p);
  if (out.gap_pruned < 1e-12) {
    out.degenerate = true;
    out.ratio = std::numeric_limits<double>::infinity();
  } else {
    out.ratio = out.gap_full / out.gap_pruned;
  }
  return out;
}

// Gated response energy along the generator's spurious directions.
inline double spurious_energy(const ModelState& m, const FeatureSplit& split) {
  if (split.spurious_dirs.basis_dim() == 0) return 0.0;
  return (m.effective_w() * split.spurious_dirs.columns).squaredNorm();
}

inline double invariant_energy(const ModelState& m, const FeatureSplit& split) {
  if (split.invariant_dirs.basis_dim() == 0) return 0.0;
  return (m.effective_w() * split.invariant_dirs.columns).squaredNorm();
}

// Cosine similarity between the gated and target responses to the invariant
// directions, flattened. 1 means the invariant channel survived intact.
inline double invariant_fidelity(const ModelState& m, const BiasedDataset& ds) {
  if (ds.truth.w_star.size() == 0)
    throw MissingTruthError("invariant_fidelity: dataset lacks a target extractor");
  const Matrix& in = ds.split.invariant_dirs.columns;
  const Matrix got = m.effective_w() * in;
  const Matrix want = ds.truth.w_star * in;
  const double ng = got.norm(), nw = want.norm();
  if (ng <= 0.0 || nw <= 0.0) return 0.0;
  double dot = 0.0;
  for (Index j = 0; j < got.cols(); ++j) dot += got.col(j).dot(want.col(j));
  return dot / (ng * nw);
}

}  // namespace oodlab
