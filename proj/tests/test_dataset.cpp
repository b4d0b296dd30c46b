#include <catch2/catch_amalgamated.hpp>

#include <oodlab/dataset.hpp>

#include "oracles.hpp"

#include <cmath>
#include <cstring>

using namespace oodlab;

namespace {

Index argmax_row(const Matrix& m, Index row) {
  Index best = 0;
  for (Index c = 1; c < m.cols(); ++c)
    if (m(row, c) > m(row, best)) best = c;
  return best;
}

double ls_accuracy(const Matrix& features, const Matrix& onehot,
                   const std::vector<int>& labels) {
  const Matrix w = oracle::least_squares(features, onehot);
  const Matrix scores = features * w;
  Index hits = 0;
  for (Index i = 0; i < scores.rows(); ++i)
    if (argmax_row(scores, i) == labels[static_cast<std::size_t>(i)]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

}  // namespace

TEST_CASE("p_i = 1 yields an all-ID dataset with no unknown energy") {
  const BiasedDataset ds = make_environment(16, 4, 64, 1.0, SplitDims{4, 4, 4}, 0.0, 3);
  for (auto v : ds.id_mask) REQUIRE(v == 1);
  const Matrix unk = ds.x * ds.split.unknown_dirs.columns;
  REQUIRE(unk.cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE(ds.p_i + ds.p_o == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("p_i = 0.5 splits exactly half and half") {
  const BiasedDataset ds = make_environment(16, 4, 100, 0.5, SplitDims{4, 4, 4}, 0.0, 5);
  Index count = 0;
  for (auto v : ds.id_mask) count += v;
  REQUIRE(count == 50);
}

TEST_CASE("population membership controls which split carries each row") {
  const BiasedDataset ds = make_environment(24, 6, 300, 0.7, SplitDims{6, 6, 6}, 0.1, 11);
  for (Index i = 0; i < ds.n(); ++i) {
    const double along_unknown =
        (ds.x.row(i) * ds.split.unknown_dirs.columns).cwiseAbs().maxCoeff();
    const double along_spurious =
        (ds.x.row(i) * ds.split.spurious_dirs.columns).cwiseAbs().maxCoeff();
    if (ds.id_mask[static_cast<std::size_t>(i)])
      REQUIRE(along_unknown < 1e-10);
    else
      REQUIRE(along_spurious < 1e-10);
  }
}

TEST_CASE("split bases are orthonormal and mutually orthogonal") {
  const BiasedDataset ds = make_environment(20, 4, 40, 0.8, SplitDims{4, 4, 4}, 0.0, 7);
  REQUIRE(is_orthonormal(ds.split.invariant_dirs.columns));
  REQUIRE(is_orthonormal(ds.split.spurious_dirs.columns));
  REQUIRE(is_orthonormal(ds.split.unknown_dirs.columns));
  const Vector s1 = overlap_spectrum(ds.split.invariant_dirs, ds.split.spurious_dirs);
  const Vector s2 = overlap_spectrum(ds.split.invariant_dirs, ds.split.unknown_dirs);
  const Vector s3 = overlap_spectrum(ds.split.spurious_dirs, ds.split.unknown_dirs);
  REQUIRE(s1.cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE(s2.cwiseAbs().maxCoeff() < 1e-10);
  REQUIRE(s3.cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("targets satisfy y = x times transposed truth at generation") {
  EnvironmentConfig cfg;
  cfg.d = 20;
  cfg.m = 5;
  cfg.n = 60;
  cfg.dims = SplitDims{5, 5, 5};
  cfg.truth_scale = 0.4;
  cfg.truth_unk_scale = 0.2;
  cfg.seed = 13;
  const BiasedDataset ds = make_environment(cfg);
  const Matrix expect = ds.x * ds.truth.w_star.transpose();
  REQUIRE((ds.y - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("pool overlap spectrum shows shared invariant and orthogonal rest") {
  EnvironmentConfig cfg;
  cfg.d = 20;
  cfg.m = 4;
  cfg.n = 400;
  cfg.p_i = 0.8;
  cfg.dims = SplitDims{4, 4, 4};
  cfg.lock = LockMode::none;  // free spurious draws make the ID pool span IN + F'
  cfg.seed = 17;
  const BiasedDataset ds = make_environment(cfg);
  const Vector spectrum = overlap_spectrum(SubspaceBasis{ds.truth.id_basis},
                                           SubspaceBasis{ds.truth.ood_basis});
  REQUIRE(spectrum.size() == 8);
  for (Index i = 0; i < 4; ++i) REQUIRE(spectrum(i) > 1.0 - 1e-8);
  for (Index i = 4; i < 8; ++i) REQUIRE(spectrum(i) < 1e-6);
}

TEST_CASE("the linear lock places the pool overlap at its closed form") {
  EnvironmentConfig cfg;
  cfg.d = 32;
  cfg.m = 8;
  cfg.n = 400;
  cfg.p_i = 0.8;
  cfg.seed = 19;
  const BiasedDataset ds = make_environment(cfg);
  // auto lock strength: tau^2 = p_i/p_o - 1 = 3, overlap = 1/sqrt(1+tau^2)
  const double tau = effective_lock_strength(cfg);
  REQUIRE(tau == Catch::Approx(std::sqrt(3.0)).margin(1e-12));
  const double sigma = estimate_sigma_fg(ds);
  REQUIRE(sigma == Catch::Approx(0.5).margin(1e-6));
  // every principal cosine of the tilted span equals the same value
  const Vector spectrum = overlap_spectrum(SubspaceBasis{ds.truth.id_basis},
                                           SubspaceBasis{ds.truth.ood_basis});
  for (Index i = 0; i < spectrum.size(); ++i)
    REQUIRE(spectrum(i) == Catch::Approx(0.5).margin(1e-6));
}

TEST_CASE("generation is deterministic per seed and sensitive to it") {
  const BiasedDataset a = make_environment(16, 4, 80, 0.75, SplitDims{4, 4, 4}, 0.05, 23);
  const BiasedDataset b = make_environment(16, 4, 80, 0.75, SplitDims{4, 4, 4}, 0.05, 23);
  const BiasedDataset c = make_environment(16, 4, 80, 0.75, SplitDims{4, 4, 4}, 0.05, 24);
  REQUIRE(std::memcmp(a.x.data(), b.x.data(),
                      sizeof(double) * static_cast<std::size_t>(a.x.size())) == 0);
  REQUIRE(std::memcmp(a.y.data(), b.y.data(),
                      sizeof(double) * static_cast<std::size_t>(a.y.size())) == 0);
  REQUIRE(a.id_mask == b.id_mask);
  REQUIRE((a.x - c.x).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("config validation rejects impossible requests") {
  REQUIRE_THROWS_AS(make_environment(10, 4, 40, 0.5, SplitDims{4, 4, 4}, 0.0, 1),
                    BadSplitError);
  REQUIRE_THROWS_AS(make_environment(16, 4, 40, 1.2, SplitDims{4, 4, 4}, 0.0, 1),
                    BadProportionError);
  REQUIRE_THROWS_AS(make_environment(16, 4, 2, 0.5, SplitDims{4, 4, 4}, 0.0, 1),
                    ConfigError);
}

TEST_CASE("exact sigma estimation needs both populations") {
  const BiasedDataset ds = make_environment(16, 4, 64, 1.0, SplitDims{4, 4, 4}, 0.0, 3);
  REQUIRE_THROWS_AS(estimate_sigma_fg(ds), EmptyPopulationError);
  REQUIRE(estimate_sigma_fg(0.25) == 0.25);
  REQUIRE_THROWS_AS(estimate_sigma_fg(1.5), BadProportionError);
}

TEST_CASE("classification view produces argmax one-hot targets") {
  EnvironmentConfig cfg;
  cfg.d = 12;
  cfg.m = 2;
  cfg.n = 200;
  cfg.p_i = 0.5;
  cfg.dims = SplitDims{4, 4, 4};
  cfg.lock = LockMode::none;
  cfg.seed = 31;
  const BiasedDataset view = classification_view(make_environment(cfg), 2);
  REQUIRE(view.classes == 2);
  REQUIRE(view.truth.label_projections.rows() == 2);
  for (Index i = 0; i < view.n(); ++i) {
    REQUIRE(view.y.row(i).sum() == Catch::Approx(1.0).margin(1e-12));
    const Vector coords =
        view.split.invariant_dirs.columns.transpose() * view.x.row(i).transpose();
    const Vector scores = view.truth.label_projections * coords;
    const Index expect = scores(0) >= scores(1) ? 0 : 1;
    REQUIRE(view.y(i, expect) == 1.0);
    REQUIRE(view.labels[static_cast<std::size_t>(i)] == static_cast<int>(expect));
  }
}

TEST_CASE("unbiased data admits an accurate full least-squares fit") {
  EnvironmentConfig cfg;
  cfg.d = 32;
  cfg.m = 4;
  cfg.n = 2000;
  cfg.p_i = 0.0;  // every instance draws from the unknown split
  cfg.dims = SplitDims{8, 8, 8};
  cfg.lock = LockMode::none;
  cfg.seed = 37;
  const BiasedDataset view = classification_view(make_environment(cfg), 4);
  const double acc = ls_accuracy(view.x, view.y, view.labels);
  REQUIRE(acc > 0.95);
}

TEST_CASE("class-locked bias creates a spurious shortcut") {
  EnvironmentConfig cfg;
  cfg.d = 32;
  cfg.m = 4;
  cfg.n = 2000;
  cfg.p_i = 0.9;
  cfg.dims = SplitDims{8, 8, 8};
  cfg.lock = LockMode::class_locked;
  cfg.classes = 4;
  cfg.seed = 41;
  const BiasedDataset ds = make_environment(cfg);
  // restrict features to spurious coordinates of ID rows only
  Index n_id = 0;
  for (auto v : ds.id_mask) n_id += v;
  Matrix feats(n_id, ds.split.spurious_dirs.basis_dim());
  Matrix targets(n_id, 4);
  std::vector<int> labels;
  Index at = 0;
  for (Index i = 0; i < ds.n(); ++i) {
    if (!ds.id_mask[static_cast<std::size_t>(i)]) continue;
    feats.row(at) = ds.x.row(i) * ds.split.spurious_dirs.columns;
    targets.row(at) = ds.y.row(i);
    labels.push_back(ds.labels[static_cast<std::size_t>(i)]);
    ++at;
  }
  const double acc = ls_accuracy(feats, targets, labels);
  REQUIRE(acc > 0.80);
}

TEST_CASE("labels never depend on spurious coordinates") {
  EnvironmentConfig cfg;
  cfg.d = 24;
  cfg.m = 4;
  cfg.n = 150;
  cfg.p_i = 0.8;
  cfg.dims = SplitDims{6, 6, 6};
  cfg.lock = LockMode::none;
  cfg.seed = 43;
  const BiasedDataset base = make_environment(cfg);
  const BiasedDataset before = classification_view(base, 4);
  // rotate every row's spurious component to a different row's
  BiasedDataset scrambled = base;
  const Matrix f = base.split.spurious_dirs.columns;
  const Matrix spur_coords = base.x * f;  // n x k_spu
  for (Index i = 0; i < base.n(); ++i) {
    const Index j = (i + 1) % base.n();
    scrambled.x.row(i) += (spur_coords.row(j) - spur_coords.row(i)) * f.transpose();
  }
  const BiasedDataset after = classification_view(scrambled, 4);
  REQUIRE(before.labels == after.labels);
}

TEST_CASE("suites share geometry while varying the bias ratio") {
  EnvironmentConfig common;
  common.d = 24;
  common.m = 6;
  common.dims = SplitDims{6, 6, 6};
  common.lock = LockMode::class_locked;
  common.classes = 6;
  common.seed = 47;
  const EnvironmentSuite suite = make_suite({0.8, 0.6, 0.0}, 500, common);
  REQUIRE(suite.train_envs.size() == 2);
  REQUIRE(suite.test_env.p_i == 0.0);
  REQUIRE(suite.bias_ratios.size() == 3);
  // shared frame: identical split directions and ground truth across envs
  const Matrix& in0 = suite.train_envs[0].split.invariant_dirs.columns;
  const Matrix& in1 = suite.train_envs[1].split.invariant_dirs.columns;
  REQUIRE((in0 - in1).cwiseAbs().maxCoeff() == 0.0);
  REQUIRE((suite.train_envs[0].truth.w_star - suite.test_env.truth.w_star)
              .cwiseAbs()
              .maxCoeff() == 0.0);
  // rows differ between environments
  REQUIRE((suite.train_envs[0].x.topRows(10) - suite.train_envs[1].x.topRows(10))
              .cwiseAbs()
              .maxCoeff() > 1e-8);
  REQUIRE(suite.pooled_p_i() == Catch::Approx(0.7).margin(1e-9));
  REQUIRE(suite.pooled_x().rows() == 1000);
}

TEST_CASE("single-ratio suites train and test on the same environment") {
  EnvironmentConfig common;
  common.d = 16;
  common.m = 4;
  common.dims = SplitDims{4, 4, 4};
  common.seed = 53;
  const EnvironmentSuite suite = make_suite({0.0}, 200, common);
  REQUIRE(suite.train_envs.size() == 1);
  REQUIRE((suite.train_envs[0].x - suite.test_env.x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("suite validation") {
  EnvironmentConfig common;
  REQUIRE_THROWS_AS(make_suite({}, 100, common), EmptySuiteError);
  REQUIRE_THROWS_AS(make_suite({0.5, 1.3}, 100, common), BadProportionError);
}

TEST_CASE("unknown target noise floors the held-out loss of every extractor") {
  EnvironmentConfig cfg;
  cfg.d = 24;
  cfg.m = 6;
  cfg.n = 1200;
  cfg.dims = SplitDims{6, 6, 6};
  cfg.lock = LockMode::none;
  cfg.truth_scale = 0.3;
  cfg.seed = 61;
  const BiasedDataset clean = make_environment(cfg);
  cfg.unknown_target_scale = 0.4;
  const BiasedDataset noisy = make_environment(cfg);

  // The knob touches targets only, and only on the held-out rows.
  REQUIRE((clean.x - noisy.x).cwiseAbs().maxCoeff() == 0.0);
  const Matrix resid = noisy.y - noisy.x * noisy.truth.w_star.transpose();
  double id_resid = 0.0, ood_resid = 0.0;
  Index n_ood = 0;
  for (Index i = 0; i < noisy.n(); ++i) {
    if (noisy.id_mask[static_cast<std::size_t>(i)]) {
      id_resid = std::max(id_resid, resid.row(i).cwiseAbs().maxCoeff());
    } else {
      ood_resid += resid.row(i).squaredNorm();
      ++n_ood;
    }
  }
  REQUIRE(id_resid == 0.0);
  // Mean held-out residual energy concentrates near scale^2 * m.
  const double floor = cfg.unknown_target_scale * cfg.unknown_target_scale *
                       static_cast<double>(cfg.m);
  REQUIRE(ood_resid / static_cast<double>(n_ood) ==
          Catch::Approx(floor).epsilon(0.15));
}

TEST_CASE("unlocked class rows carry a random-class scenery vector") {
  EnvironmentConfig cfg;
  cfg.d = 32;
  cfg.m = 8;
  cfg.n = 1600;
  cfg.p_i = 0.0;
  cfg.dims = SplitDims{8, 8, 8};
  cfg.lock = LockMode::class_locked;
  cfg.classes = 8;
  cfg.spur_scale = 2.5;
  cfg.seed = 67;
  const BiasedDataset ds = make_environment(cfg);

  // Every row has full-strength scenery even though none is class-locked, and
  // the scenery class matches the label only at the uniform base rate.
  const Matrix spur_coords = ds.x * ds.split.spurious_dirs.columns;
  Matrix prototypes(8, 8);
  for (int c = 0; c < 8; ++c) {
    Rng proto(Rng::derive_seed(cfg.seed, 0xB0 + static_cast<std::uint64_t>(c)));
    Vector phi = proto.gaussian_vector(8);
    prototypes.row(c) = (phi / phi.norm()).transpose();
  }
  Index label_matches = 0;
  for (Index i = 0; i < ds.n(); ++i) {
    REQUIRE_THAT(spur_coords.row(i).norm(),
                 Catch::Matchers::WithinAbs(cfg.spur_scale, 0.4));
    Index best = 0;
    double best_dot = -1e300;
    for (Index c = 0; c < 8; ++c) {
      const double dot = spur_coords.row(i).dot(prototypes.row(c));
      if (dot > best_dot) { best_dot = dot; best = c; }
    }
    if (static_cast<int>(best) == ds.labels[static_cast<std::size_t>(i)])
      ++label_matches;
  }
  const double match_rate =
      static_cast<double>(label_matches) / static_cast<double>(ds.n());
  REQUIRE(match_rate < 0.25);
  REQUIRE(match_rate > 0.04);

  // Non-class locks keep held-out rows free of spurious coordinates.
  cfg.lock = LockMode::none;
  cfg.classes = 0;
  const BiasedDataset plain = make_environment(cfg);
  const Matrix plain_spur = plain.x * plain.split.spurious_dirs.columns;
  REQUIRE(plain_spur.cwiseAbs().maxCoeff() < 1e-12);
}
