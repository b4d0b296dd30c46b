#pragma once

#include <oodlab/core.hpp>
#include <oodlab/dataset.hpp>
#include <oodlab/identification.hpp>
#include <oodlab/model.hpp>
#include <oodlab/pruning.hpp>
#include <oodlab/subspace.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace oodlab {

// erm: plain full-batch descent on the task loss.
// magnitude_baseline: descent plus on-schedule zeroing of the smallest rows,
//   matched in retained rank to what the energy rule would keep.
// sfp: descent plus a sparsity penalty on flagged responses and on-schedule
//   spectral pruning against the flagged set.
enum class Regime { erm, magnitude_baseline, sfp };

enum class EtaMode { auto_2e, fixed };

// squared: task loss is the mean per-instance squared residual (the default,
//   regression setting). cross_entropy: softmax cross-entropy over the gated
//   responses against one-hot targets, for classification-view runs only.
enum class LossKind { squared, cross_entropy };

struct TrainConfig {
  Regime regime = Regime::erm;
  LossKind loss = LossKind::squared;
  Index iterations = 800;
  double learning_rate = 0.1;
  double init_scale = 0.01;
  std::uint64_t init_seed = 101;
  Index warmup = 10;  // iterations before flags drive any intervention
  // Declared bias of the training batch. Negative means "take it from the
  // dataset's own declared value"; training on a bare view requires it.
  double p_i_prior = -1.0;
  double sigma_online = 0.0;  // pool-overlap prior used in the loss bounds
  double delta_slack = 1.0;   // multiplier on the flagging threshold
  EtaMode eta_mode = EtaMode::auto_2e;
  double eta_value = 0.0;  // used directly when eta_mode == fixed
  double eta_scale = 1.0;  // multiplier on the automatic value
  Index prune_every = 100;  // 0 disables scheduled pruning
  double energy_keep = 0.90;
  double divergence_limit = 1e6;
  bool record_models = false;  // keep every iterate (plus the final one)
  bool record_flags = false;   // keep every iteration's flag mask
};

struct TrainView {
  const Matrix& x;
  const Matrix& y;
};

struct IterationRecord {
  Index iter = 0;
  double avg_loss = 0.0;
  // Filled by the metrics hook when ground truth is available; NaN otherwise.
  double id_loss = std::numeric_limits<double>::quiet_NaN();
  double ood_loss = std::numeric_limits<double>::quiet_NaN();
  double sup_id = 0.0;
  double inf_id_plain = 0.0;
  double inf_id_fair = 0.0;
  double delta = 0.0;  // threshold actually used, slack included
  double flagged_fraction = 0.0;
  double eta = 0.0;
  double sigma_ef = std::numeric_limits<double>::quiet_NaN();
  double sigma_eg = std::numeric_limits<double>::quiet_NaN();
  double eq8_residual = std::numeric_limits<double>::quiet_NaN();
};

struct TrainingTrace {
  std::vector<IterationRecord> records;
  std::vector<PruneReport> prune_events;
  ModelState final_model;
  std::vector<Matrix> model_history;  // per-iteration iterates, final appended
  std::vector<std::vector<std::uint8_t>> flag_history;
};

// Called once per iteration with the pre-update model and the record already
// holding the observable fields.
using MetricsHook =
    std::function<void(const ModelState&, const Vector& per_instance_losses,
                       IterationRecord&)>;
// Called after each prune event with the models on both sides of it.
using PruneHook = std::function<void(const ModelState& before, const ModelState& after,
                                     const std::vector<std::uint8_t>& flags,
                                     PruneReport&)>;

inline void validate(const TrainConfig& cfg) {
  if (cfg.iterations < 1) throw ConfigError("trainer: iterations must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("trainer: learning_rate must be positive");
  if (cfg.init_scale < 0.0) throw ConfigError("trainer: init_scale must be nonnegative");
  if (cfg.warmup < 0) throw ConfigError("trainer: warmup must be nonnegative");
  if (cfg.p_i_prior > 1.0) throw BadProportionError("trainer: p_i_prior must lie in [0, 1]");
  if (cfg.sigma_online < 0.0 || cfg.sigma_online > 1.0)
    throw BadProportionError("trainer: sigma_online must lie in [0, 1]");
  if (!(cfg.delta_slack > 0.0)) throw ConfigError("trainer: delta_slack must be positive");
  if (cfg.eta_scale < 0.0) throw ConfigError("trainer: eta_scale must be nonnegative");
  if (cfg.eta_value < 0.0) throw ConfigError("trainer: eta_value must be nonnegative");
  if (cfg.prune_every < 0) throw ConfigError("trainer: prune_every must be nonnegative");
  if (cfg.energy_keep <= 0.0 || cfg.energy_keep > 1.0)
    throw BadFractionError("trainer: energy_keep must lie in (0, 1]");
  if (!(cfg.divergence_limit > 0.0))
    throw ConfigError("trainer: divergence_limit must be positive");
}

inline double task_loss(const ModelState& m, const Matrix& x, const Matrix& y) {
  if (x.cols() != m.w.cols() || y.cols() != m.w.rows() || x.rows() != y.rows())
    throw ShapeMismatchError("task_loss: model/batch dimension mismatch");
  if (x.rows() == 0) throw ShapeMismatchError("task_loss: empty batch");
  return (x * m.w.transpose() - y).squaredNorm() / static_cast<double>(x.rows());
}

// Squared residual norm per instance; task_loss is their mean.
inline Vector per_instance_losses(const ModelState& m, const Matrix& x, const Matrix& y) {
  if (x.cols() != m.w.cols() || y.cols() != m.w.rows() || x.rows() != y.rows())
    throw ShapeMismatchError("per_instance_losses: model/batch dimension mismatch");
  const Matrix r = x * m.w.transpose() - y;
  return r.rowwise().squaredNorm();
}

inline Matrix gradient(const ModelState& m, const Matrix& x, const Matrix& y) {
  if (x.cols() != m.w.cols() || y.cols() != m.w.rows() || x.rows() != y.rows())
    throw ShapeMismatchError("gradient: model/batch dimension mismatch");
  if (x.rows() == 0) throw ShapeMismatchError("gradient: empty batch");
  return (2.0 / static_cast<double>(x.rows())) * (x * m.w.transpose() - y).transpose() * x;
}

// Per-instance softmax cross-entropy of the gated responses against one-hot
// targets. Classification-view runs train on this instead of the squared
// loss; the gated response doubles as the logit vector, matching accuracy().
inline Vector cross_entropy_losses(const ModelState& m, const Matrix& x, const Matrix& y) {
  if (x.cols() != m.w.cols() || y.cols() != m.w.rows() || x.rows() != y.rows())
    throw ShapeMismatchError("cross_entropy_losses: model/batch dimension mismatch");
  if (x.rows() == 0) throw ShapeMismatchError("cross_entropy_losses: empty batch");
  const Matrix z = project_features(m, x);
  const Matrix shifted = z.colwise() - z.rowwise().maxCoeff();
  const Vector lse = shifted.array().exp().rowwise().sum().log().matrix();
  return lse - (shifted.array() * y.array()).rowwise().sum().matrix();
}

// Gradient of the mean absolute gated response over the flagged instances:
// (1 / (nf m)) diag(g) sign(R)^T X_f with R the gated responses.
inline Matrix sparsity_gradient(const ModelState& m, const Matrix& flagged_x) {
  if (flagged_x.rows() == 0)
    throw EmptyFlagSetError("sparsity_gradient: no flagged instances");
  if (flagged_x.cols() != m.w.cols())
    throw ShapeMismatchError("sparsity_gradient: input dimension mismatch");
  const Matrix r = project_features(m, flagged_x);
  const Matrix sgn = r.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
  const double scale =
      1.0 / (static_cast<double>(flagged_x.rows()) * static_cast<double>(m.w.rows()));
  return scale * (m.saliency.asDiagonal() * (sgn.transpose() * flagged_x));
}

// Mean absolute elementwise residual of the gated responses on the flagged
// set; the automatic penalty weight is twice this.
inline double mean_flagged_residual(const ModelState& m, const Matrix& flagged_x,
                                    const Matrix& flagged_targets) {
  if (flagged_x.rows() == 0)
    throw EmptyFlagSetError("mean_flagged_residual: no flagged instances");
  if (flagged_x.rows() != flagged_targets.rows() ||
      flagged_x.cols() != m.w.cols() || flagged_targets.cols() != m.w.rows())
    throw ShapeMismatchError("mean_flagged_residual: dimension mismatch");
  const Matrix r = project_features(m, flagged_x) - flagged_targets;
  return r.cwiseAbs().sum() /
         (static_cast<double>(flagged_x.rows()) * static_cast<double>(m.w.rows()));
}

inline double compute_eta(const ModelState& m, const Matrix& flagged_x,
                          const Matrix& flagged_targets) {
  return 2.0 * mean_flagged_residual(m, flagged_x, flagged_targets);
}

struct GradientDecomposition {
  Matrix total;
  Matrix id_term;         // error along the ID pool times the ID second moment
  Matrix ood_term;        // error along the OOD pool times the OOD second moment
  Matrix cross_residual;  // total minus both; zero iff the pools are orthogonal
};

namespace detail {

// Moore-Penrose pseudoinverse through the shared SVD routine.
inline Matrix pinv(const Matrix& m) {
  const ProjectionDecomposition dec = svd(m);
  const Index r = numerical_rank(dec.singular_values);
  Matrix out = Matrix::Zero(m.cols(), m.rows());
  for (Index i = 0; i < r; ++i)
    out += (dec.right.col(i) / dec.singular_values(i)) * dec.left.col(i).transpose();
  return out;
}

inline Matrix select_rows(const Matrix& x, const std::vector<std::uint8_t>& mask) {
  Index count = 0;
  for (auto v : mask) count += v ? 1 : 0;
  Matrix out(count, x.cols());
  Index at = 0;
  for (Index i = 0; i < x.rows(); ++i)
    if (mask[static_cast<std::size_t>(i)]) out.row(at++) = x.row(i);
  return out;
}

}  // namespace detail

// Splits the full-batch gradient into the part explained by the error along
// the ID pool acting on the ID rows, the same for the OOD side, and whatever
// is left. The error W - W* is resolved onto the two pool bases jointly
// (least-norm solve), so shared directions are shared, not double counted.
inline GradientDecomposition gradient_decomposed(const ModelState& m,
                                                 const BiasedDataset& ds) {
  if (ds.truth.w_star.size() == 0)
    throw MissingTruthError("gradient_decomposed: dataset lacks a target extractor");
  if (m.w.rows() != ds.truth.w_star.rows() || m.w.cols() != ds.d())
    throw ShapeMismatchError("gradient_decomposed: model/dataset dimension mismatch");

  GradientDecomposition out;
  out.total = gradient(m, ds.x, ds.y);

  const Matrix& f = ds.truth.id_basis;   // d x kf
  const Matrix& g = ds.truth.ood_basis;  // d x kg
  const Index kf = f.cols(), kg = g.cols();
  const Matrix diff = m.w - ds.truth.w_star;

  Matrix stacked(ds.d(), kf + kg);
  if (kf > 0) stacked.leftCols(kf) = f;
  if (kg > 0) stacked.rightCols(kg) = g;
  Matrix coords;  // (kf + kg) x m
  if (kf + kg > 0)
    coords = detail::pinv(stacked) * diff.transpose();

  Matrix diff_id = Matrix::Zero(m.w.rows(), ds.d());
  Matrix diff_ood = Matrix::Zero(m.w.rows(), ds.d());
  if (kf > 0) diff_id = (f * coords.topRows(kf)).transpose();
  if (kg > 0) diff_ood = (g * coords.bottomRows(kg)).transpose();

  const auto [x_id, x_ood] = split_populations(ds);
  const double inv_n = 1.0 / static_cast<double>(ds.n());
  out.id_term = x_id.rows() > 0
                    ? Matrix(2.0 * inv_n * diff_id * (x_id.transpose() * x_id))
                    : Matrix::Zero(m.w.rows(), ds.d());
  out.ood_term = x_ood.rows() > 0
                     ? Matrix(2.0 * inv_n * diff_ood * (x_ood.transpose() * x_ood))
                     : Matrix::Zero(m.w.rows(), ds.d());
  out.cross_residual = out.total - out.id_term - out.ood_term;
  return out;
}

// Full-batch descent with loss-interval flagging. The per-iteration order is:
// measure, bound, flag, record, update, then prune on schedule. Flags only
// drive the penalty and pruning once warmup has passed. The automatic penalty
// weight is recomputed from the flagged residuals once per pruning interval
// (prune_every, or its default cadence when scheduled pruning is disabled),
// never per iteration, so traces stay stable as the residual decays.
inline TrainingTrace train(const TrainView& view, const TrainConfig& cfg,
                           const MetricsHook& metrics = {},
                           const PruneHook& prune_diag = {}) {
  validate(cfg);
  if (view.x.rows() != view.y.rows() || view.x.rows() == 0)
    throw ShapeMismatchError("train: batch rows mismatch or empty batch");
  if (cfg.p_i_prior < 0.0)
    throw ConfigError("train: a bias prior is required when training on a view");
  const double p_i = cfg.p_i_prior;
  const double p_o = 1.0 - p_i;

  TrainingTrace trace;
  ModelState model = init_model(view.y.cols(), view.x.cols(), cfg.init_scale,
                                cfg.init_seed);
  const double n = static_cast<double>(view.x.rows());

  double avg_prev = 0.0;
  double eta_current = 0.0;
  bool eta_ready = false;
  const Index eta_interval = cfg.prune_every > 0 ? cfg.prune_every : Index{100};
  trace.records.reserve(static_cast<std::size_t>(cfg.iterations));

  const bool ce = cfg.loss == LossKind::cross_entropy;
  for (Index t = 0; t < cfg.iterations; ++t) {
    Matrix resp, probs;
    Vector losses;
    if (ce) {
      resp = project_features(model, view.x);  // gated logits
      const Matrix shifted = resp.colwise() - resp.rowwise().maxCoeff();
      probs = shifted.array().exp();
      const Vector zsum = probs.rowwise().sum();
      losses = zsum.array().log().matrix() -
               (shifted.array() * view.y.array()).rowwise().sum().matrix();
      probs = probs.array().colwise() / zsum.array();
    } else {
      resp = view.x * model.w.transpose();
      losses = (resp - view.y).rowwise().squaredNorm();
    }
    const double avg = losses.sum() / n;
    if (!std::isfinite(avg) || avg > cfg.divergence_limit)
      throw DivergenceError("train: loss diverged at iteration " + std::to_string(t));
    if (t == 0) avg_prev = avg;

    IdentificationBounds bounds =
        loss_bounds(avg_prev, avg, p_i, p_o, cfg.sigma_online, cfg.sigma_online);
    bounds.delta *= cfg.delta_slack;
    const std::vector<std::uint8_t> flags = identify(losses, bounds);
    Index flagged = 0;
    for (auto v : flags) flagged += v ? 1 : 0;
    const bool flags_active = flagged > 0 && t >= cfg.warmup;

    if (cfg.regime == Regime::sfp && flags_active) {
      if (cfg.eta_mode == EtaMode::fixed) {
        eta_current = cfg.eta_value;
        eta_ready = true;
      } else if ((t + 1) % eta_interval == 0) {
        const Matrix fx = detail::select_rows(view.x, flags);
        const Matrix fy = detail::select_rows(view.y, flags);
        eta_current = cfg.eta_scale * compute_eta(model, fx, fy);
        eta_ready = true;
      }
    }

    IterationRecord rec;
    rec.iter = t;
    rec.avg_loss = avg;
    rec.sup_id = bounds.sup_id;
    rec.inf_id_plain = bounds.inf_id_plain;
    rec.inf_id_fair = bounds.inf_id_fair;
    rec.delta = bounds.delta;
    rec.flagged_fraction = static_cast<double>(flagged) / n;
    rec.eta = cfg.regime == Regime::sfp && eta_ready ? eta_current : 0.0;
    if (metrics) metrics(model, losses, rec);
    trace.records.push_back(rec);
    if (cfg.record_models) trace.model_history.push_back(model.w);
    if (cfg.record_flags) trace.flag_history.push_back(flags);

    Matrix grad = ce ? Matrix((1.0 / n) * (model.saliency.asDiagonal() *
                                           ((probs - view.y).transpose() * view.x)))
                     : Matrix((2.0 / n) * (resp - view.y).transpose() * view.x);
    if (cfg.regime == Regime::sfp && flags_active && eta_current > 0.0)
      grad += eta_current * sparsity_gradient(model, detail::select_rows(view.x, flags));
    model.w -= cfg.learning_rate * grad;
    model.iteration = t + 1;
    avg_prev = avg;

    const bool on_schedule =
        cfg.prune_every > 0 && (t + 1) % cfg.prune_every == 0;
    if (on_schedule && flags_active && cfg.regime != Regime::erm) {
      const Matrix fx = detail::select_rows(view.x, flags);
      const ModelState before = model;
      PruneReport report;
      if (cfg.regime == Regime::sfp) {
        auto [pruned, rep] = prune_by_svd(model, fx, cfg.energy_keep);
        model = std::move(pruned);
        report = std::move(rep);
        if (report.kept_rank > 0 && cfg.eta_mode == EtaMode::auto_2e) {
          const Matrix fy = detail::select_rows(view.y, flags);
          eta_current = cfg.eta_scale * compute_eta(model, fx, fy);
        }
      } else {
        const ProjectionDecomposition dec = svd((fx * model.w.transpose()).transpose());
        const Index rank = numerical_rank(dec.singular_values);
        if (rank == 0) continue;
        const Index keep = std::min(energy_rank(dec.singular_values, cfg.energy_keep), rank);
        model = magnitude_prune(model, keep);
        report.kept_rank = keep;
        for (Index i = keep; i < rank; ++i)
          report.dropped_singulars.push_back(dec.singular_values(i));
      }
      report.iteration = t + 1;
      if (prune_diag) prune_diag(before, model, flags, report);
      trace.prune_events.push_back(std::move(report));
    }
  }
  if (cfg.record_models) trace.model_history.push_back(model.w);
  trace.final_model = std::move(model);
  return trace;
}

// Ground-truth instrumented run: fills the per-population losses, the
// alignment of the learned row space with both pools, the residual of the
// average-loss correction identity, and prune-event energy audits.
inline TrainingTrace train(const BiasedDataset& ds, const TrainConfig& cfg) {
  TrainConfig run = cfg;
  if (run.p_i_prior < 0.0) run.p_i_prior = ds.p_i;

  double sigma_exact = std::numeric_limits<double>::quiet_NaN();
  try {
    sigma_exact = estimate_sigma_fg(ds);
  } catch (const EmptyPopulationError&) {
  }
  const double corr_exact = std::isnan(sigma_exact)
                                ? std::numeric_limits<double>::quiet_NaN()
                                : loss_correction(ds.p_i, ds.p_o, sigma_exact);
  const bool has_id = ds.truth.id_basis.cols() > 0;
  const bool has_ood = ds.truth.ood_basis.cols() > 0;
  const SubspaceBasis id_pool{ds.truth.id_basis};
  const SubspaceBasis ood_pool{ds.truth.ood_basis};

  MetricsHook metrics = [&](const ModelState& m, const Vector& losses,
                            IterationRecord& rec) {
    double id_sum = 0.0, ood_sum = 0.0;
    Index id_n = 0, ood_n = 0;
    for (Index i = 0; i < losses.size(); ++i) {
      if (ds.id_mask[static_cast<std::size_t>(i)]) {
        id_sum += losses(i);
        ++id_n;
      } else {
        ood_sum += losses(i);
        ++ood_n;
      }
    }
    if (id_n > 0) rec.id_loss = id_sum / static_cast<double>(id_n);
    if (ood_n > 0) rec.ood_loss = ood_sum / static_cast<double>(ood_n);
    try {
      const SubspaceBasis e = m.row_basis();
      if (has_id) rec.sigma_ef = largest_overlap(e, id_pool);
      if (has_ood) rec.sigma_eg = largest_overlap(e, ood_pool);
    } catch (const ZeroMatrixError&) {
    }
    if (!std::isnan(corr_exact) && id_n > 0)
      rec.eq8_residual = rec.avg_loss - rec.id_loss - corr_exact;
  };

  PruneHook audit = [&](const ModelState& before, const ModelState& after,
                        const std::vector<std::uint8_t>&, PruneReport& rep) {
    rep.pre_spurious_energy = spurious_energy(before, ds.split);
    rep.post_spurious_energy = spurious_energy(after, ds.split);
    rep.pre_invariant_energy = invariant_energy(before, ds.split);
    rep.post_invariant_energy = invariant_energy(after, ds.split);
    if (has_id && has_ood) {
      const RiskGap gap = risk_gap_ratio(before, after, ds);
      rep.risk_gap_ratio = gap.ratio;
      rep.degenerate_gap = gap.degenerate;
    }
  };

  return train(TrainView{ds.x, ds.y}, run, metrics, audit);
}

inline TrainingTrace train(const EnvironmentSuite& suite, const TrainConfig& cfg) {
  TrainConfig run = cfg;
  if (run.p_i_prior < 0.0) {
    double declared = 0.0;
    const std::size_t trained = suite.train_envs.size();
    for (std::size_t i = 0; i < trained; ++i) declared += suite.bias_ratios[i];
    run.p_i_prior = trained > 0 ? declared / static_cast<double>(trained) : 0.0;
  }
  return train(pooled_training_set(suite), run);
}

// Fraction of rows whose largest gated response channel matches the label.
inline double accuracy(const ModelState& m, const BiasedDataset& ds) {
  if (ds.classes < 2 || ds.labels.empty())
    throw ConfigError("accuracy: dataset has no class labels");
  const Matrix resp = project_features(m, ds.x);
  Index hits = 0;
  for (Index i = 0; i < resp.rows(); ++i) {
    Index best = 0;
    for (Index c = 1; c < resp.cols(); ++c)
      if (resp(i, c) > resp(i, best)) best = c;
    if (static_cast<int>(best) == ds.labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(resp.rows());
}

struct PopulationAccuracy {
  double id = std::numeric_limits<double>::quiet_NaN();
  double ood = std::numeric_limits<double>::quiet_NaN();
};

inline PopulationAccuracy accuracy_by_population(const ModelState& m,
                                                 const BiasedDataset& ds) {
  if (ds.classes < 2 || ds.labels.empty())
    throw ConfigError("accuracy_by_population: dataset has no class labels");
  const Matrix resp = project_features(m, ds.x);
  Index id_hits = 0, ood_hits = 0, id_n = 0, ood_n = 0;
  for (Index i = 0; i < resp.rows(); ++i) {
    Index best = 0;
    for (Index c = 1; c < resp.cols(); ++c)
      if (resp(i, c) > resp(i, best)) best = c;
    const bool hit = static_cast<int>(best) == ds.labels[static_cast<std::size_t>(i)];
    if (ds.id_mask[static_cast<std::size_t>(i)]) {
      id_hits += hit ? 1 : 0;
      ++id_n;
    } else {
      ood_hits += hit ? 1 : 0;
      ++ood_n;
    }
  }
  PopulationAccuracy out;
  if (id_n > 0) out.id = static_cast<double>(id_hits) / static_cast<double>(id_n);
  if (ood_n > 0) out.ood = static_cast<double>(ood_hits) / static_cast<double>(ood_n);
  return out;
}

}  // namespace oodlab
