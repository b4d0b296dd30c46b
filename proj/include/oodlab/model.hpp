#pragma once

#include <oodlab/core.hpp>
#include <oodlab/subspace.hpp>

#include <cstdint>

namespace oodlab {

// Linear feature extractor plus per-channel response gates. Gates start at 1
// and only ever shrink; a gate scales the channel's response, never the
// stored weights, so the raw weight geometry stays inspectable after pruning.
struct ModelState {
  Matrix w;          // m x d
  Vector saliency;   // m gates in [0, 1]
  Index iteration = 0;

  Index channels() const { return w.rows(); }
  Index ambient_dim() const { return w.cols(); }

  // diag(saliency) * w, the matrix actually applied to inputs.
  Matrix effective_w() const { return saliency.asDiagonal() * w; }

  // Orthonormal basis of the raw row space. Throws ZeroMatrixError when the
  // extractor has been pruned to nothing.
  SubspaceBasis row_basis() const { return orthonormal_basis(w); }
};

inline ModelState init_model(Index channels, Index ambient_dim, double scale,
                             std::uint64_t seed) {
  if (channels < 1 || ambient_dim < 1)
    throw DimMismatchError("init_model: channels and ambient_dim must be positive");
  Rng rng(seed);
  ModelState m;
  m.w = scale * rng.gaussian_matrix(channels, ambient_dim);
  m.saliency = Vector::Ones(channels);
  m.iteration = 0;
  return m;
}

// Gated responses, one row per instance: x * w^T * diag(saliency).
inline Matrix project_features(const ModelState& m, const Matrix& x) {
  if (x.cols() != m.w.cols())
    throw ShapeMismatchError("project_features: input dimension mismatch");
  return (x * m.w.transpose()) * m.saliency.asDiagonal();
}

}  // namespace oodlab
