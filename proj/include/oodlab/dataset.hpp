#pragma once

#include <oodlab/core.hpp>
#include <oodlab/subspace.hpp>

#include <Eigen/QR>

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace oodlab {

// How in-distribution rows obtain their spurious coordinates.
//   none:         free gaussian draw, scale spur_free_scale
//   linear:       a fixed orthogonal map of the invariant coordinates,
//                 scaled by lock_strength (a deterministic shortcut)
//   class_locked: a per-class prototype vector plus small noise
enum class LockMode { none, linear, class_locked };


struct SplitDims {
  Index invariant = 8;
  Index spurious = 8;
  Index unknown = 8;

  Index total() const { return invariant + spurious + unknown; }
};

struct EnvironmentConfig {
  Index d = 32;
  Index m = 8;
  Index n = 2000;
  double p_i = 0.8;
  SplitDims dims;
  double noise_scale = 0.0;
  LockMode lock = LockMode::linear;
  // Negative means automatic: sqrt(p_i/p_o - 1), which makes the
  // per-direction energy of the ID pool exceed the OOD pool's by exactly
  // p_i/p_o and places the pool overlap at sqrt(p_o/p_i).
  double lock_strength = -1.0;
  Index classes = 0;  // >0 switches targets to one-hot labels; must equal m
  double spur_scale = 2.5;       // class prototype magnitude
  double class_noise = 0.05;     // per-row jitter around the class prototype
  double spur_free_scale = 1.0;  // free-draw spurious coordinate scale
  double inv_scale = 1.0;
  double unk_scale = 1.0;
  double truth_scale = 0.11;      // invariant component of w_star
  double truth_spur_scale = 0.0;  // spurious component of w_star
  double truth_unk_scale = 0.0;   // unknown component of w_star
  // Out-of-distribution rows get this much fresh per-row target noise: the
  // unknown mechanism's contribution to the response, unpredictable from x.
  // It floors the OOD loss of any linear extractor. Regression targets only.
  double unknown_target_scale = 0.0;
  std::uint64_t seed = 1;
  // Environments of one suite share the directional frame (same seed) but
  // draw rows from distinct streams selected by this salt.
  std::uint64_t row_salt = 0;
};

struct FeatureSplit {
  SubspaceBasis invariant_dirs;  // IN, d x k_inv
  SubspaceBasis spurious_dirs;   // F', d x k_spu
  SubspaceBasis unknown_dirs;    // G', d x k_unk
};

struct GroundTruth {
  Matrix w_star;             // m x d
  Matrix a_star;             // m x dim(id pool): w_star in the ID pool basis
  Matrix b_star;             // m x dim(ood pool)
  Matrix id_basis;           // d x dim(S), realized row-space basis of the ID rows
  Matrix ood_basis;          // d x dim(U)
  Matrix label_projections;  // classes x k_inv; empty unless labels exist
};

struct BiasedDataset {
  Matrix x;  // n x d
  Matrix y;  // n x m (regression targets, or one-hot rows when classes > 0)
  std::vector<std::uint8_t> id_mask;
  std::vector<int> labels;  // empty when classes == 0
  FeatureSplit split;
  GroundTruth truth;
  EnvironmentConfig params;
  double p_i = 0.0;
  double p_o = 0.0;
  Index classes = 0;
  std::uint64_t seed = 0;

  Index n() const { return x.rows(); }
  Index d() const { return x.cols(); }
  Index feature_dim() const { return y.cols(); }
};

namespace detail {

// QR-derived orthonormal columns with the R-diagonal made positive so the
// result is unique for a given input.
inline Matrix qr_orthonormal(const Matrix& m) {
  Eigen::HouseholderQR<Matrix> qr(m);
  Matrix q = qr.householderQ() * Matrix::Identity(m.rows(), m.cols());
  const Matrix r = qr.matrixQR().topRows(m.cols()).triangularView<Eigen::Upper>();
  for (Index c = 0; c < q.cols(); ++c)
    if (r(c, c) < 0.0) q.col(c) = -q.col(c);
  return q;
}

inline Matrix normalized_gaussian(Rng& rng, Index rows, Index cols) {
  Matrix a = rng.gaussian_matrix(rows, cols);
  const double target = std::sqrt(static_cast<double>(rows * cols));
  const double norm = a.norm();
  if (norm > 0.0) a *= target / norm;
  return a;
}

inline int argmax_label(const Matrix& projections, const Vector& coords) {
  Vector scores = projections * coords;
  Index best = 0;
  for (Index c = 1; c < scores.size(); ++c)
    if (scores(c) > scores(best)) best = c;
  return static_cast<int>(best);
}

// Orthonormal rows whenever they fit: symmetric argmax cones keep the label
// rule linearly recoverable at high accuracy.
inline Matrix label_projection_matrix(std::uint64_t seed, Index classes, Index k_inv) {
  Rng rng(Rng::derive_seed(seed, 0xC1));
  if (classes <= k_inv && k_inv > 0)
    return qr_orthonormal(rng.gaussian_matrix(k_inv, classes)).transpose();
  return rng.gaussian_matrix(classes, k_inv);
}

}  // namespace detail

inline double effective_lock_strength(const EnvironmentConfig& cfg) {
  if (cfg.lock_strength >= 0.0) return cfg.lock_strength;
  const double p_o = 1.0 - cfg.p_i;
  if (p_o <= 0.0 || cfg.p_i <= 0.0) return 0.0;
  const double ratio = cfg.p_i / p_o;
  return ratio > 1.0 ? std::sqrt(ratio - 1.0) : 0.0;
}

inline void validate(const EnvironmentConfig& cfg) {
  if (cfg.d < 1 || cfg.m < 1) throw ConfigError("environment: d and m must be positive");
  if (cfg.n < 4) throw ConfigError("environment: n must be at least 4");
  if (cfg.dims.invariant < 0 || cfg.dims.spurious < 0 || cfg.dims.unknown < 0 ||
      cfg.dims.total() < 1 || cfg.dims.total() > cfg.d)
    throw BadSplitError("environment: split dims must be nonnegative and sum in [1, d]");
  if (cfg.p_i < 0.0 || cfg.p_i > 1.0)
    throw BadProportionError("environment: p_i must lie in [0, 1]");
  if (cfg.classes > 0 && cfg.classes != cfg.m)
    throw ConfigError("environment: classes must equal m for one-hot targets");
  if (cfg.lock == LockMode::class_locked && cfg.classes < 2)
    throw ConfigError("environment: class_locked lock needs classes >= 2");
  if (cfg.unknown_target_scale < 0.0)
    throw ConfigError("environment: unknown_target_scale must be nonnegative");
}

inline BiasedDataset make_environment(const EnvironmentConfig& cfg) {
  validate(cfg);
  const Index k_inv = cfg.dims.invariant;
  const Index k_spu = cfg.dims.spurious;
  const Index k_unk = cfg.dims.unknown;

  // Frame stream: directions, lock map, label projections, truth. Shared by
  // all environments of a suite. Row stream: mask and per-row draws.
  Rng frame(Rng::derive_seed(cfg.seed, 0x0F));
  Rng rows(Rng::derive_seed(cfg.seed, 0xA1 + cfg.row_salt));

  const Matrix q = detail::qr_orthonormal(frame.gaussian_matrix(cfg.d, cfg.dims.total()));
  const Matrix in_dirs = q.leftCols(k_inv);
  const Matrix spu_dirs = q.middleCols(k_inv, k_spu);
  const Matrix unk_dirs = q.rightCols(k_unk);

  // Lock map: orthonormal in whichever direction fits, so the lock neither
  // inflates nor collapses coordinate energy beyond lock_strength.
  Matrix lock_map;
  if (k_inv > 0 && k_spu > 0) {
    const Index side = std::max(k_inv, k_spu);
    lock_map = detail::qr_orthonormal(frame.gaussian_matrix(side, side))
                   .topLeftCorner(k_spu, k_inv);
  }

  Matrix label_proj;
  if (cfg.classes > 0)
    label_proj = detail::label_projection_matrix(cfg.seed, cfg.classes, k_inv);

  // All three component matrices are always drawn so that configs differing
  // only in the truth scales share every other draw.
  Matrix w_star = Matrix::Zero(cfg.m, cfg.d);
  if (k_inv > 0)
    w_star += cfg.truth_scale * detail::normalized_gaussian(frame, cfg.m, k_inv) *
              in_dirs.transpose();
  if (k_spu > 0)
    w_star += cfg.truth_spur_scale * detail::normalized_gaussian(frame, cfg.m, k_spu) *
              spu_dirs.transpose();
  if (k_unk > 0)
    w_star += cfg.truth_unk_scale * detail::normalized_gaussian(frame, cfg.m, k_unk) *
              unk_dirs.transpose();

  const Index n_id = static_cast<Index>(std::llround(cfg.p_i * static_cast<double>(cfg.n)));
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(cfg.n), 0);
  for (Index i = 0; i < n_id; ++i) mask[static_cast<std::size_t>(i)] = 1;
  rows.shuffle(mask);

  const double tau = effective_lock_strength(cfg);

  BiasedDataset ds;
  ds.x.resize(cfg.n, cfg.d);
  ds.labels.assign(static_cast<std::size_t>(cfg.classes > 0 ? cfg.n : 0), 0);
  const bool ood_target_noise = cfg.unknown_target_scale > 0.0 && cfg.classes == 0;
  for (Index i = 0; i < cfg.n; ++i) {
    const Vector u = cfg.inv_scale * rows.gaussian_vector(k_inv);
    Vector row = Vector::Zero(cfg.d);
    if (k_inv > 0) row += in_dirs * u;
    if (mask[static_cast<std::size_t>(i)]) {
      Vector s = Vector::Zero(k_spu);
      if (k_spu > 0) {
        switch (cfg.lock) {
          case LockMode::none:
            s = cfg.spur_free_scale * rows.gaussian_vector(k_spu);
            break;
          case LockMode::linear:
            if (k_inv > 0)
              s = tau * (lock_map * u);
            else
              s = cfg.spur_free_scale * rows.gaussian_vector(k_spu);
            break;
          case LockMode::class_locked: {
            const int label = detail::argmax_label(label_proj, u);
            Rng proto(Rng::derive_seed(cfg.seed, 0xB0 + static_cast<std::uint64_t>(label)));
            Vector phi = proto.gaussian_vector(k_spu);
            phi /= phi.norm();
            s = cfg.spur_scale * phi + cfg.class_noise * rows.gaussian_vector(k_spu);
            break;
          }
        }
        row += spu_dirs * s;
      }
      if (cfg.noise_scale > 0.0) {
        if (k_inv > 0) row += cfg.noise_scale * (in_dirs * rows.gaussian_vector(k_inv));
        if (k_spu > 0) row += cfg.noise_scale * (spu_dirs * rows.gaussian_vector(k_spu));
      }
    } else {
      if (cfg.lock == LockMode::class_locked && k_spu > 0) {
        // Unlocked rows still carry a scenery vector, just from a uniformly
        // random class, so only the label pairing is biased, not the feature's
        // presence. This is what makes the shortcut actively misleading on a
        // zero-bias environment rather than merely absent.
        const int rnd = static_cast<int>(
            rows.below(static_cast<std::uint64_t>(cfg.classes)));
        Rng proto(Rng::derive_seed(cfg.seed, 0xB0 + static_cast<std::uint64_t>(rnd)));
        Vector phi = proto.gaussian_vector(k_spu);
        phi /= phi.norm();
        row += spu_dirs *
               (cfg.spur_scale * phi + cfg.class_noise * rows.gaussian_vector(k_spu));
      } else if (k_unk > 0) {
        row += unk_dirs * (cfg.unk_scale * rows.gaussian_vector(k_unk));
      }
      if (cfg.noise_scale > 0.0) {
        if (k_inv > 0) row += cfg.noise_scale * (in_dirs * rows.gaussian_vector(k_inv));
        if (k_unk > 0) row += cfg.noise_scale * (unk_dirs * rows.gaussian_vector(k_unk));
      }
    }
    ds.x.row(i) = row.transpose();
    if (cfg.classes > 0)
      ds.labels[static_cast<std::size_t>(i)] = detail::argmax_label(label_proj, u);
  }

  if (cfg.classes > 0) {
    ds.y = Matrix::Zero(cfg.n, cfg.m);
    for (Index i = 0; i < cfg.n; ++i)
      ds.y(i, ds.labels[static_cast<std::size_t>(i)]) = 1.0;
  } else {
    ds.y = ds.x * w_star.transpose();
    // The noise comes from its own stream so feature draws stay bitwise
    // identical across target-noise scales.
    if (ood_target_noise) {
      Rng noise(Rng::derive_seed(cfg.seed, 0xE0 + cfg.row_salt));
      for (Index i = 0; i < cfg.n; ++i) {
        if (mask[static_cast<std::size_t>(i)]) continue;
        ds.y.row(i) +=
            cfg.unknown_target_scale * noise.gaussian_vector(cfg.m).transpose();
      }
    }
  }

  ds.id_mask = std::move(mask);
  ds.split.invariant_dirs = SubspaceBasis{in_dirs};
  ds.split.spurious_dirs = SubspaceBasis{spu_dirs};
  ds.split.unknown_dirs = SubspaceBasis{unk_dirs};
  ds.truth.w_star = std::move(w_star);
  ds.truth.label_projections = std::move(label_proj);
  ds.params = cfg;
  ds.p_i = cfg.p_i;
  ds.p_o = 1.0 - cfg.p_i;
  ds.classes = cfg.classes;
  ds.seed = cfg.seed;

  // Realized pool bases; empty when a population is absent.
  Matrix x_id(n_id, cfg.d), x_ood(cfg.n - n_id, cfg.d);
  Index a = 0, b = 0;
  for (Index i = 0; i < cfg.n; ++i) {
    if (ds.id_mask[static_cast<std::size_t>(i)])
      x_id.row(a++) = ds.x.row(i);
    else
      x_ood.row(b++) = ds.x.row(i);
  }
  ds.truth.id_basis = n_id > 0 ? orthonormal_basis(x_id).columns : Matrix(cfg.d, 0);
  ds.truth.ood_basis =
      cfg.n - n_id > 0 ? orthonormal_basis(x_ood).columns : Matrix(cfg.d, 0);
  ds.truth.a_star = ds.truth.w_star * ds.truth.id_basis;
  ds.truth.b_star = ds.truth.w_star * ds.truth.ood_basis;
  return ds;
}

inline BiasedDataset make_environment(Index d, Index m, Index n, double p_i,
                                      SplitDims split_dims, double noise_scale,
                                      std::uint64_t seed) {
  EnvironmentConfig cfg;
  cfg.d = d;
  cfg.m = m;
  cfg.n = n;
  cfg.p_i = p_i;
  cfg.dims = split_dims;
  cfg.noise_scale = noise_scale;
  cfg.seed = seed;
  return make_environment(cfg);
}

// Pools of X split by the id mask; rows keep their relative order.
inline std::pair<Matrix, Matrix> split_populations(const BiasedDataset& ds) {
  Index n_id = 0;
  for (auto v : ds.id_mask) n_id += v ? 1 : 0;
  Matrix x_id(n_id, ds.d()), x_ood(ds.n() - n_id, ds.d());
  Index a = 0, b = 0;
  for (Index i = 0; i < ds.n(); ++i) {
    if (ds.id_mask[static_cast<std::size_t>(i)])
      x_id.row(a++) = ds.x.row(i);
    else
      x_ood.row(b++) = ds.x.row(i);
  }
  return {std::move(x_id), std::move(x_ood)};
}

// One-hot class targets derived from the invariant coordinates only. For a
// dataset generated with labels the stored labels are reused; otherwise
// labels come from fixed random projections of the realized invariant
// component, so spurious coordinates can never influence them.
inline BiasedDataset classification_view(const BiasedDataset& ds, Index classes) {
  if (classes < 2) throw ConfigError("classification_view: classes must be >= 2");
  if (classes != ds.feature_dim())
    throw ConfigError("classification_view: classes must equal the target dim m");
  BiasedDataset out = ds;
  if (ds.classes == classes) return out;
  Matrix proj = ds.truth.label_projections;
  if (proj.rows() != classes)
    proj = detail::label_projection_matrix(ds.params.seed, classes,
                                           ds.split.invariant_dirs.basis_dim());
  out.labels.resize(static_cast<std::size_t>(ds.n()));
  out.y = Matrix::Zero(ds.n(), classes);
  for (Index i = 0; i < ds.n(); ++i) {
    const Vector coords =
        ds.split.invariant_dirs.columns.transpose() * ds.x.row(i).transpose();
    const int label = detail::argmax_label(proj, coords);
    out.labels[static_cast<std::size_t>(i)] = label;
    out.y(i, label) = 1.0;
  }
  out.truth.label_projections = std::move(proj);
  out.classes = classes;
  out.params.classes = classes;
  return out;
}

struct EnvironmentSuite {
  std::vector<BiasedDataset> train_envs;
  BiasedDataset test_env;
  std::vector<double> bias_ratios;
  EnvironmentConfig base;

  Index train_rows() const {
    Index n = 0;
    for (const auto& env : train_envs) n += env.n();
    return n;
  }

  Matrix pooled_x() const {
    Matrix x(train_rows(), base.d);
    Index at = 0;
    for (const auto& env : train_envs) {
      x.middleRows(at, env.n()) = env.x;
      at += env.n();
    }
    return x;
  }

  Matrix pooled_y() const {
    Matrix y(train_rows(), train_envs.empty() ? 0 : train_envs.front().feature_dim());
    Index at = 0;
    for (const auto& env : train_envs) {
      y.middleRows(at, env.n()) = env.y;
      at += env.n();
    }
    return y;
  }

  std::vector<std::uint8_t> pooled_mask() const {
    std::vector<std::uint8_t> mask;
    mask.reserve(static_cast<std::size_t>(train_rows()));
    for (const auto& env : train_envs)
      mask.insert(mask.end(), env.id_mask.begin(), env.id_mask.end());
    return mask;
  }

  // Realized ID fraction of the pooled training rows.
  double pooled_p_i() const {
    const auto mask = pooled_mask();
    if (mask.empty()) return 0.0;
    double c = 0;
    for (auto v : mask) c += v ? 1.0 : 0.0;
    return c / static_cast<double>(mask.size());
  }
};

// One environment per ratio, sharing the directional frame and ground truth
// (same seed) while drawing rows independently. The last environment is the
// held-out test environment; a single-ratio suite trains and tests on its
// only environment.
inline EnvironmentSuite make_suite(const std::vector<double>& bias_ratios,
                                   Index per_env_size,
                                   const EnvironmentConfig& common) {
  if (bias_ratios.empty()) throw EmptySuiteError("make_suite: no bias ratios given");
  for (double r : bias_ratios)
    if (r < 0.0 || r > 1.0)
      throw BadProportionError("make_suite: every ratio must lie in [0, 1]");
  EnvironmentSuite suite;
  suite.bias_ratios = bias_ratios;
  suite.base = common;
  suite.base.n = per_env_size;
  std::vector<BiasedDataset> envs;
  for (std::size_t i = 0; i < bias_ratios.size(); ++i) {
    EnvironmentConfig cfg = suite.base;
    cfg.p_i = bias_ratios[i];
    cfg.row_salt = i + 1;
    envs.push_back(make_environment(cfg));
  }
  suite.test_env = envs.back();
  if (envs.size() == 1) {
    suite.train_envs = std::move(envs);
  } else {
    envs.pop_back();
    suite.train_envs = std::move(envs);
  }
  return suite;
}

// Concatenates the training environments into one dataset. The directional
// frame and ground truth are shared across a suite, so those carry over; the
// realized pool bases are recomputed from the pooled rows.
inline BiasedDataset pooled_training_set(const EnvironmentSuite& suite) {
  if (suite.train_envs.empty())
    throw EmptySuiteError("pooled_training_set: suite has no training environments");
  const BiasedDataset& first = suite.train_envs.front();
  BiasedDataset ds;
  ds.x = suite.pooled_x();
  ds.y = suite.pooled_y();
  ds.id_mask = suite.pooled_mask();
  for (const auto& env : suite.train_envs)
    ds.labels.insert(ds.labels.end(), env.labels.begin(), env.labels.end());
  ds.split = first.split;
  ds.truth = first.truth;
  ds.params = first.params;
  ds.classes = first.classes;
  ds.seed = first.seed;
  double id_count = 0.0;
  for (auto v : ds.id_mask) id_count += v ? 1.0 : 0.0;
  ds.p_i = id_count / static_cast<double>(ds.id_mask.size());
  ds.p_o = 1.0 - ds.p_i;
  ds.params.p_i = ds.p_i;
  ds.params.n = ds.x.rows();
  const auto [x_id, x_ood] = [&] {
    Index n_id = 0;
    for (auto v : ds.id_mask) n_id += v ? 1 : 0;
    Matrix a(n_id, ds.d()), b(ds.n() - n_id, ds.d());
    Index ai = 0, bi = 0;
    for (Index i = 0; i < ds.n(); ++i) {
      if (ds.id_mask[static_cast<std::size_t>(i)])
        a.row(ai++) = ds.x.row(i);
      else
        b.row(bi++) = ds.x.row(i);
    }
    return std::make_pair(std::move(a), std::move(b));
  }();
  ds.truth.id_basis = x_id.rows() > 0 ? orthonormal_basis(x_id).columns : Matrix(ds.d(), 0);
  ds.truth.ood_basis =
      x_ood.rows() > 0 ? orthonormal_basis(x_ood).columns : Matrix(ds.d(), 0);
  ds.truth.a_star = ds.truth.w_star * ds.truth.id_basis;
  ds.truth.b_star = ds.truth.w_star * ds.truth.ood_basis;
  return ds;
}

// Exact pool-overlap value: the largest principal-angle cosine between the
// realized row spaces of the two populations. Verifier-side only; training
// code must use a configured prior instead (it cannot see the id mask).
inline double estimate_sigma_fg(const BiasedDataset& ds) {
  if (ds.truth.id_basis.cols() == 0 || ds.truth.ood_basis.cols() == 0)
    throw EmptyPopulationError("estimate_sigma_fg: a population is empty");
  return largest_overlap(SubspaceBasis{ds.truth.id_basis},
                         SubspaceBasis{ds.truth.ood_basis});
}

inline double estimate_sigma_fg(double configured_prior) {
  if (configured_prior < 0.0 || configured_prior > 1.0)
    throw BadProportionError("estimate_sigma_fg: prior must lie in [0, 1]");
  return configured_prior;
}

}  // namespace oodlab
