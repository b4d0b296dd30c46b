#pragma once

#include <oodlab/core.hpp>
#include <oodlab/dataset.hpp>
#include <oodlab/identification.hpp>
#include <oodlab/pruning.hpp>
#include <oodlab/trainer.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

namespace oodlab {

// Reconciles measured training behavior against the closed-form predictions:
// update-magnitude proportionality (prop2), the converged population loss gap
// (prop3), the pruning risk-gap ordering (lemma1), and the penalty-weight
// sweep (lemma2). Verdicts use the pinned tolerances below; every report is a
// pure function of (dataset, config), so reruns are bit-identical.
struct TheoryReport {
  std::string claim;               // one of: prop2, prop3, lemma1, lemma2
  std::vector<double> predicted;
  std::vector<double> measured;
  // |measured - predicted| / max(|predicted|, 1e-12) for the claim's headline
  // scalar pair; for prop2 it is the median of the per-iteration errors.
  double relative_error = 0.0;
  double epsilon_term = 0.0;  // iteration-0 population gap, reported separately
  bool pass = false;
  std::uint64_t fingerprint = 0;
  // Claim-specific extras: lemma2 stores the spurious weight energies of the
  // sweep here, in multiplier order.
  std::vector<double> auxiliary;
  std::string detail;
};

// Verdict tolerances. Acceptance thresholds elsewhere must match these.
inline constexpr double kProp2MedianTol = 0.25;
inline constexpr double kProp3RelTol = 0.35;
inline constexpr double kProp3SymmetricFrac = 0.05;  // of iteration-0 avg loss
inline constexpr double kLemma1MinRatio = 0.95;
inline constexpr double kLemma2FidelityTol = 0.05;   // relative to the ERM run
inline constexpr double kPlateauRelStep = 0.01;      // per 10 iterations
inline constexpr Index kPlateauLookback = 10;

inline double relative_to(double measured, double predicted) {
  return std::abs(measured - predicted) / std::max(std::abs(predicted), 1e-12);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Canonical fingerprint of everything a check's outcome depends on.
inline std::uint64_t config_fingerprint(const BiasedDataset& ds, const TrainConfig& cfg) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "seed=%llu d=%lld m=%lld n=%lld p_i=%.17g regime=%d loss=%d "
                "iters=%lld lr=%.17g init=%.17g init_seed=%llu warmup=%lld "
                "prior=%.17g sigma=%.17g slack=%.17g eta_mode=%d eta=%.17g "
                "etax=%.17g pe=%lld keep=%.17g",
                static_cast<unsigned long long>(ds.seed),
                static_cast<long long>(ds.d()),
                static_cast<long long>(ds.feature_dim()),
                static_cast<long long>(ds.n()), ds.p_i,
                static_cast<int>(cfg.regime), static_cast<int>(cfg.loss),
                static_cast<long long>(cfg.iterations), cfg.learning_rate,
                cfg.init_scale, static_cast<unsigned long long>(cfg.init_seed),
                static_cast<long long>(cfg.warmup), cfg.p_i_prior,
                cfg.sigma_online, cfg.delta_slack, static_cast<int>(cfg.eta_mode),
                cfg.eta_value, cfg.eta_scale,
                static_cast<long long>(cfg.prune_every), cfg.energy_keep);
  return fnv1a64(buf);
}

// First iteration at which the average loss has moved by less than
// kPlateauRelStep over the last kPlateauLookback iterations. The infinite-time
// limit of the analysis is not realizable; this is its stand-in.
inline Index find_plateau(const TrainingTrace& trace) {
  const Index n = static_cast<Index>(trace.records.size());
  for (Index t = kPlateauLookback; t < n; ++t) {
    const double prev =
        trace.records[static_cast<std::size_t>(t - kPlateauLookback)].avg_loss;
    const double now = trace.records[static_cast<std::size_t>(t)].avg_loss;
    if (prev <= 0.0) continue;
    if (std::abs(now - prev) / prev < kPlateauRelStep) return t;
  }
  throw NotConvergedError(
      "find_plateau: average loss still moving by more than 1% per 10 iterations");
}

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo =
      *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

}  // namespace detail

// Update-magnitude proportionality. Measures, per iteration, how fast the
// model moves along the realized ID pool versus the OOD pool (each rate
// normalized by the remaining coordinate error in that pool, so the units of
// the two sides match), and compares the p_o-weighted difference against
// 2 (p_i^2 sigma_ef^2 - p_o^2 sigma_eg^2) from the recorded overlap snapshots.
// Iterations 10 through 200 vote; the median relative error decides.
inline TheoryReport check_prop2(const TrainingTrace& trace, const BiasedDataset& ds,
                                const TrainConfig& cfg) {
  if (trace.model_history.empty())
    throw MissingTraceError("check_prop2: trace lacks per-iteration models");
  if (ds.truth.w_star.size() == 0)
    throw MissingTruthError("check_prop2: dataset lacks ground truth");
  if (ds.truth.id_basis.cols() == 0 || ds.truth.ood_basis.cols() == 0)
    throw EmptyPopulationError("check_prop2: a population pool is empty");

  TheoryReport rep;
  rep.claim = "prop2";
  rep.fingerprint = config_fingerprint(ds, cfg);

  const Matrix& F = ds.truth.id_basis;
  const Matrix& G = ds.truth.ood_basis;
  const Matrix a_star = ds.truth.w_star * F;
  const Matrix b_star = ds.truth.w_star * G;
  const double p_o = 1.0 - ds.p_i;
  const Index last = std::min<Index>(200, static_cast<Index>(trace.records.size()) - 1);

  std::vector<double> rels;
  for (Index t = 10; t < last; ++t) {
    const Matrix& w0 = trace.model_history[static_cast<std::size_t>(t)];
    const Matrix& w1 = trace.model_history[static_cast<std::size_t>(t + 1)];
    const double res_a = ((w0 * F) - a_star).norm();
    const double res_b = ((w0 * G) - b_star).norm();
    if (res_a < 1e-12 || res_b < 1e-12) break;  // converged pools stop voting
    const double ua = ((w1 - w0) * F).norm() / (cfg.learning_rate * res_a);
    const double ub = ((w1 - w0) * G).norm() / (cfg.learning_rate * res_b);
    const double meas = p_o * std::abs(ua - ub);
    const auto& r = trace.records[static_cast<std::size_t>(t)];
    const double pred = 2.0 * (ds.p_i * ds.p_i * r.sigma_ef * r.sigma_ef -
                               p_o * p_o * r.sigma_eg * r.sigma_eg);
    rep.measured.push_back(meas);
    rep.predicted.push_back(pred);
    rels.push_back(relative_to(meas, pred));
  }
  if (rels.empty()) throw MissingTraceError("check_prop2: no usable iterations");
  rep.relative_error = detail::median_of(rels);
  rep.pass = rep.relative_error < kProp2MedianTol;
  rep.detail = "median over iterations 10.." + std::to_string(last - 1);
  return rep;
}

// Converged population loss gap. The prediction is the structural term
// (p_i^2 - p_o^2)(1 - sigma_fg) plus the iteration-0 gap standing in for the
// initialization term. Biased data must show a positive measured gap within
// tolerance; balanced data must show nothing beyond the initialization term.
inline TheoryReport check_prop3(const TrainingTrace& trace, const BiasedDataset& ds,
                                const TrainConfig& cfg) {
  if (trace.records.empty()) throw MissingTraceError("check_prop3: empty trace");
  if (ds.truth.w_star.size() == 0)
    throw MissingTruthError("check_prop3: dataset lacks ground truth");

  TheoryReport rep;
  rep.claim = "prop3";
  rep.fingerprint = config_fingerprint(ds, cfg);

  const Index at = find_plateau(trace);
  const auto& r0 = trace.records.front();
  const auto& rp = trace.records[static_cast<std::size_t>(at)];
  const double eps = r0.ood_loss - r0.id_loss;
  const double p_o = 1.0 - ds.p_i;
  const double sigma = estimate_sigma_fg(ds);
  const double structural = (ds.p_i * ds.p_i - p_o * p_o) * (1.0 - sigma);
  const double pred = structural + eps;
  const double meas = rp.ood_loss - rp.id_loss;

  rep.predicted = {pred};
  rep.measured = {meas};
  rep.epsilon_term = eps;
  rep.relative_error = relative_to(meas, pred);
  if (ds.p_i > p_o) {
    rep.pass = meas > 0.0 && rep.relative_error < kProp3RelTol;
  } else {
    // Balanced populations: the structural term vanishes and the gap must
    // stay within a sliver of the initial average loss.
    rep.pass = std::abs(meas - eps) <= kProp3SymmetricFrac * r0.avg_loss;
  }
  rep.detail = "plateau at iteration " + std::to_string(at) +
               ", sigma_fg=" + std::to_string(sigma);
  return rep;
}

// Risk-gap ordering for one prune. Pass iff the full model's ID/OOD response
// discrepancy gap is at least kLemma1MinRatio times the pruned model's.
inline TheoryReport check_lemma1(const ModelState& full, const ModelState& pruned,
                                 const BiasedDataset& ds) {
  TheoryReport rep;
  rep.claim = "lemma1";
  rep.fingerprint = config_fingerprint(ds, TrainConfig{});

  const RiskGap rg = risk_gap_ratio(full, pruned, ds);
  const double ratio =
      rg.degenerate ? std::numeric_limits<double>::infinity() : rg.ratio;
  rep.predicted = {1.0};
  rep.measured = {ratio};
  rep.relative_error = rg.degenerate ? 0.0 : relative_to(ratio, 1.0);
  rep.pass = rg.degenerate || ratio >= kLemma1MinRatio;
  rep.detail = rg.degenerate ? "pruned gap below resolution, ratio reported as +inf"
                             : "gap_full=" + std::to_string(rg.gap_full) +
                                   " gap_pruned=" + std::to_string(rg.gap_pruned);
  return rep;
}

// Penalty-weight sweep. Multipliers scale the measured automatic weight (the
// final value of an auto-mode run, conventionally called 2e); the sweep must
// show (i) compliant runs (multiplier <= 1) holding invariant-direction
// fidelity within kLemma2FidelityTol of the ERM run, (ii) spurious weight
// energy strictly decreasing across compliant multipliers, and (iii) the
// largest multiplier degrading fidelity below every compliant run.
inline TheoryReport check_lemma2(const BiasedDataset& ds, const TrainConfig& base,
                                 std::vector<double> multipliers = {0.0, 0.25, 0.5,
                                                                    1.0, 10.0}) {
  if (multipliers.empty())
    throw BadSweepError("check_lemma2: empty multiplier sweep");
  std::sort(multipliers.begin(), multipliers.end());
  if (multipliers.front() > 1.0 || multipliers.back() <= 1.0)
    throw BadSweepError(
        "check_lemma2: sweep needs a compliant multiplier and a violating one");

  TheoryReport rep;
  rep.claim = "lemma2";
  rep.fingerprint = config_fingerprint(ds, base);

  TrainConfig erm = base;
  erm.regime = Regime::erm;
  const TrainingTrace base_tr = train(ds, erm);
  const double fid_erm = invariant_fidelity(base_tr.final_model, ds);

  TrainConfig aut = base;
  aut.regime = Regime::sfp;
  aut.prune_every = 0;  // isolate the penalty from pruning
  aut.eta_mode = EtaMode::auto_2e;
  aut.eta_scale = 1.0;
  const TrainingTrace auto_tr = train(ds, aut);
  const double two_e = auto_tr.records.back().eta;
  if (!(two_e > 0.0))
    throw BadSweepError("check_lemma2: automatic penalty weight never armed");

  std::vector<double> fids, energies;
  for (double mult : multipliers) {
    TrainConfig fx = aut;
    fx.eta_mode = EtaMode::fixed;
    fx.eta_value = mult * two_e;
    const TrainingTrace tr = train(ds, fx);
    fids.push_back(invariant_fidelity(tr.final_model, ds));
    energies.push_back(spurious_energy(tr.final_model, ds.split));
  }

  bool fidelity_ok = true, monotone_ok = true;
  double worst_compliant_fid = fids.front();
  double worst_dev = 0.0;
  double prev_energy = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < multipliers.size(); ++i) {
    if (multipliers[i] > 1.0) continue;
    const double dev = std::abs(fids[i] - fid_erm) / std::max(std::abs(fid_erm), 1e-12);
    worst_dev = std::max(worst_dev, dev);
    if (dev > kLemma2FidelityTol) fidelity_ok = false;
    if (fids[i] < worst_compliant_fid) worst_compliant_fid = fids[i];
    if (energies[i] >= prev_energy) monotone_ok = false;
    prev_energy = energies[i];
  }
  const bool violator_worst = fids.back() < worst_compliant_fid;

  rep.predicted = {fid_erm};
  rep.measured = fids;
  rep.auxiliary = energies;
  rep.relative_error = worst_dev;
  rep.epsilon_term = two_e;  // the sweep's reference weight, for the record
  rep.pass = fidelity_ok && monotone_ok && violator_worst;
  rep.detail = std::string("fidelity ") + (fidelity_ok ? "ok" : "violated") +
               ", energy ordering " + (monotone_ok ? "ok" : "violated") +
               ", violator " + (violator_worst ? "worst" : "not worst");
  return rep;
}

}  // namespace oodlab
