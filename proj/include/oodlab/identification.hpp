#pragma once

#include <oodlab/core.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

namespace oodlab {

// Loss-interval bookkeeping for one training iteration. The correction term
// p_o (p_i - p_o) (1 - sigma) converts an observed average loss into bounds
// on the unobserved mean ID loss; delta doubles as the flagging threshold.
struct IdentificationBounds {
  double avg_loss_prev = 0.0;
  double avg_loss_now = 0.0;
  double sup_id = 0.0;
  double inf_id_plain = 0.0;
  double inf_id_fair = 0.0;
  double delta = 0.0;
  double sigma_fg = 0.0;  // the value used for the current iteration
  double p_i = 0.0;
  double p_o = 0.0;
};

inline double loss_correction(double p_i, double p_o, double sigma_fg) {
  return p_o * (p_i - p_o) * (1.0 - sigma_fg);
}

inline IdentificationBounds loss_bounds(double avg_prev, double avg_now, double p_i,
                                        double p_o, double sigma_fg_prev,
                                        double sigma_fg_now) {
  if (p_i < 0.0 || p_i > 1.0 || p_o < 0.0 || p_o > 1.0 ||
      std::abs(p_i + p_o - 1.0) > 1e-9)
    throw BadProportionError("loss_bounds: proportions must be in [0,1] and sum to 1");
  if (sigma_fg_prev < 0.0 || sigma_fg_prev > 1.0 || sigma_fg_now < 0.0 ||
      sigma_fg_now > 1.0)
    throw BadProportionError("loss_bounds: sigma_fg must lie in [0, 1]");
  if (!std::isfinite(avg_prev) || !std::isfinite(avg_now))
    throw DivergenceError("loss_bounds: non-finite average loss");
  IdentificationBounds b;
  b.avg_loss_prev = avg_prev;
  b.avg_loss_now = avg_now;
  b.p_i = p_i;
  b.p_o = p_o;
  b.sigma_fg = sigma_fg_now;
  b.sup_id = std::abs(avg_prev - loss_correction(p_i, p_o, sigma_fg_prev));
  b.inf_id_plain = std::abs(avg_now - loss_correction(p_i, p_o, sigma_fg_now));
  b.inf_id_fair = std::max(0.0, b.sup_id - std::abs(avg_now - avg_prev));
  b.delta = b.sup_id;
  return b;
}

// Flags instances whose loss falls strictly below the threshold.
inline std::vector<std::uint8_t> identify(const Vector& per_instance_losses,
                                          const IdentificationBounds& bounds) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(per_instance_losses.size()));
  for (Index i = 0; i < per_instance_losses.size(); ++i)
    mask[static_cast<std::size_t>(i)] = per_instance_losses(i) < bounds.delta ? 1 : 0;
  return mask;
}

}  // namespace oodlab
