#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dropgrad/errors.hpp"
#include "dropgrad/network.hpp"

namespace dropgrad {

enum class LrSchedule { constant, cosine };
enum class AlphaScaling { off, fixed, online };

inline const char* to_string(LrSchedule s) {
  return s == LrSchedule::constant ? "constant" : "cosine";
}
inline const char* to_string(AlphaScaling s) {
  switch (s) {
    case AlphaScaling::off: return "off";
    case AlphaScaling::fixed: return "fixed";
    case AlphaScaling::online: return "online";
  }
  return "?";
}

struct OptimConfig {
  double lr = 0.1;
  double momentum = 0.0;
  double weight_decay = 0.0;
  LrSchedule schedule = LrSchedule::constant;
  AlphaScaling alpha_scaling = AlphaScaling::off;
  double alpha_fixed = 1.0;  // used when alpha_scaling == fixed

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (alpha_scaling == AlphaScaling::fixed && !(alpha_fixed > 0.0 && alpha_fixed <= 1.0)) {
      throw ConfigError("fixed alpha must be in (0,1]");
    }
  }
};

// Schedule value for base rate `lr` at step t of T, t in [1,T].
// cosine: lr * (1 + cos(pi*(t-1)/T)) / 2.
inline double lr_at(double lr, LrSchedule schedule, std::uint64_t t, std::uint64_t T) {
  if (t < 1 || t > T) {
    throw ConfigError("lr_at step " + std::to_string(t) + " outside [1," + std::to_string(T) +
                      "]");
  }
  switch (schedule) {
    case LrSchedule::constant: return lr;
    case LrSchedule::cosine:
      return lr * (1.0 + std::cos(M_PI * static_cast<double>(t - 1) / static_cast<double>(T))) /
             2.0;
  }
  return lr;
}

inline double lr_at(const OptimConfig& cfg, std::uint64_t t, std::uint64_t T) {
  return lr_at(cfg.lr, cfg.schedule, t, T);
}

// Effective step size: the 1/alpha rescaling divides the base rate before
// the schedule weight, so fixed(alpha) at lr is bitwise identical to
// alpha off at lr/alpha.
inline double effective_lr(const OptimConfig& cfg, std::uint64_t t, std::uint64_t T,
                           std::optional<double> alpha_t) {
  double alpha = 1.0;
  switch (cfg.alpha_scaling) {
    case AlphaScaling::off: break;
    case AlphaScaling::fixed: alpha = cfg.alpha_fixed; break;
    case AlphaScaling::online:
      if (!alpha_t) throw ConfigError("online alpha scaling requires alpha_t");
      if (!(*alpha_t > 0.0 && *alpha_t <= 1.0)) {
        throw ConfigError("alpha_t must be in (0,1], got " + std::to_string(*alpha_t));
      }
      alpha = *alpha_t;
      break;
  }
  return lr_at(cfg.lr / alpha, cfg.schedule, t, T);
}

// SGD with momentum: v <- momentum*v + (g + weight_decay*theta);
// theta <- theta - eta_t * v.
template <typename Scalar>
void sgd_step(std::vector<LayerParams<Scalar>>& params,
              std::vector<LayerParams<Scalar>>& velocity,
              const std::vector<LayerGrads<Scalar>>& grads, const OptimConfig& cfg,
              std::uint64_t t, std::uint64_t T, std::optional<double> alpha_t = std::nullopt) {
  cfg.validate();
  if (velocity.size() != params.size() || grads.size() != params.size()) {
    throw ShapeError("optimizer state does not match parameters");
  }
  const Scalar eta = static_cast<Scalar>(effective_lr(cfg, t, T, alpha_t));
  const Scalar mu = static_cast<Scalar>(cfg.momentum);
  const Scalar wd = static_cast<Scalar>(cfg.weight_decay);

  auto update = [&](DenseTensor<Scalar>& theta, DenseTensor<Scalar>& vel,
                    const DenseTensor<Scalar>& g, const char* what) {
    if (g.shape() != theta.shape()) {
      throw ShapeError(std::string("gradient shape mismatch for ") + what);
    }
    if (!g.all_finite()) throw NumericError(std::string("non-finite gradient for ") + what);
    if (vel.size() == 0) vel = DenseTensor<Scalar>(theta.shape());
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const Scalar step_g = g[i] + wd * theta[i];
      vel[i] = mu * vel[i] + step_g;
      theta[i] -= eta * vel[i];
    }
  };

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].empty()) continue;
    update(params[i].theta, velocity[i].theta, grads[i].d_theta, "theta");
    if (params[i].bias.size() > 0) {
      update(params[i].bias, velocity[i].bias, grads[i].d_bias, "bias");
    }
  }
}

}  // namespace dropgrad
