#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "lbi/denoiser.hpp"
#include "lbi/dynamics.hpp"
#include "lbi/error.hpp"
#include "lbi/optim.hpp"
#include "lbi/schedule.hpp"

namespace lbi {

enum class LboMode { Gradient, Numerical, Hybrid };

inline std::string_view to_string(LboMode m) {
    switch (m) {
    case LboMode::Gradient: return "gradient";
    case LboMode::Numerical: return "numerical";
    case LboMode::Hybrid: return "hybrid";
    }
    return "unknown";
}

inline LboMode parse_lbo_mode(std::string_view s) {
    if (s == "gradient" || s == "g") return LboMode::Gradient;
    if (s == "numerical" || s == "n") return LboMode::Numerical;
    if (s == "hybrid" || s == "h") return LboMode::Hybrid;
    throw Error(ErrorCode::Config, "unknown LBO mode '" + std::string(s) + "'", "parse_lbo_mode");
}

struct LboConfig {
    LboMode mode = LboMode::Numerical;
    int max_iters = 15;
    double tol = 1e-8;      // infinity-norm residual threshold
    double lr = 1e-3;       // Adam learning rate of the gradient phase
    int n_g = 5;            // gradient iterations before switching (hybrid)
    double guidance_w = 1.0;

    /// Per-mode iteration caps: 15 numerical, 20 gradient, 20 hybrid (5 + 15).
    static LboConfig defaults(LboMode mode) {
        LboConfig c;
        c.mode = mode;
        c.max_iters = mode == LboMode::Numerical ? 15 : 20;
        return c;
    }

    void validate() const {
        detail::require(max_iters >= 0, ErrorCode::Config, "max_iters must be >= 0", "LboConfig");
        detail::require(tol > 0.0, ErrorCode::Config, "tol must be > 0", "LboConfig");
        detail::require(lr > 0.0, ErrorCode::Config, "lr must be > 0", "LboConfig");
        detail::require(n_g >= 0, ErrorCode::Config, "n_g must be >= 0", "LboConfig");
        detail::require(mode != LboMode::Hybrid || n_g <= max_iters, ErrorCode::Config, "n_g must be <= max_iters",
                        "LboConfig");
        detail::require(std::isfinite(guidance_w), ErrorCode::Config, "guidance must be finite", "LboConfig");
    }
};

struct LboStepReport {
    int t = 0;
    int iters_used = 0;
    double final_residual = 0.0;
    bool converged = false;
};

/// b_0 = DDIM-inverted latent minus z_prev.
inline Latent init_bias(const Denoiser& model, const NoiseSchedule& sched, const Latent& z_prev, int t_prev, int t,
                        const Condition& c, double w = 1.0) {
    return ddim_invert_step(model, sched, z_prev, t_prev, t, c, w) - z_prev;
}

/// Generation-side bias (1 - phi) z_t - psi F(z_t, t, C); z_t minus it is one
/// deterministic generation step.
inline Latent bias_target(const Denoiser& model, const NoiseSchedule& sched, const Latent& z_t, int t, int t_prev,
                          const Condition& c, double w = 1.0) {
    const StepCoefficients k = coefficients(sched, t, t_prev, 0.0);
    return (1.0 - k.phi) * z_t - k.psi * cfg_eval(model, z_t, t, c, w);
}

/// One fixed-point sweep b <- bias_target(z_prev + b). The minus sign on the
/// psi F term is the one that makes a fixed point satisfy the generation step.
inline Latent lbo_numerical_iterate(const Denoiser& model, const NoiseSchedule& sched, const Latent& z_prev,
                                    int t_prev, int t, const Condition& c, double w, const Latent& b) {
    detail::require_dim(b.size(), z_prev.size(), "latent bias");
    return bias_target(model, sched, z_prev + b, t, t_prev, c, w);
}

/// mean |b - bias_target(z_prev + b)|
inline double lbo_objective(const Denoiser& model, const NoiseSchedule& sched, const Latent& z_prev, int t_prev, int t,
                            const Condition& c, double w, const Latent& b) {
    const Latent r = b - lbo_numerical_iterate(model, sched, z_prev, t_prev, t, c, w, b);
    return r.cwiseAbs().mean();
}

inline double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

/// Gradient of lbo_objective with respect to b. The residual Jacobian is
/// phi I + psi dF/dz; |.| has subgradient 0 at the origin.
inline Latent lbo_objective_gradient(const Denoiser& model, const NoiseSchedule& sched, const Latent& z_prev,
                                     int t_prev, int t, const Condition& c, double w, const Latent& b) {
    const StepCoefficients k = coefficients(sched, t, t_prev, 0.0);
    const Latent z = z_prev + b;
    const Latent r = b - ((1.0 - k.phi) * z - k.psi * cfg_eval(model, z, t, c, w));
    const Latent s = r.unaryExpr(&sign0) / static_cast<double>(r.size());
    return k.phi * s + k.psi * cfg_vjp(model, z, t, c, w, s);
}

/// One Adam step on lbo_objective.
inline Latent lbo_gradient_iterate(const Denoiser& model, const NoiseSchedule& sched, const Latent& z_prev, int t_prev,
                                   int t, const Condition& c, double w, const Latent& b, AdamState& opt) {
    const Latent g = lbo_objective_gradient(model, sched, z_prev, t_prev, t, c, w, b);
    return adam_step(opt, b, g);
}

struct LboStepResult {
    Latent z_t;
    LboStepReport report;
};

namespace detail {

inline void require_finite(const Latent& v, int iter, int t) {
    if (!v.allFinite()) {
        throw Error(ErrorCode::Divergence,
                    "latent bias became non-finite at iteration " + std::to_string(iter) + " (t=" +
                        std::to_string(t) + ")",
                    "iteration " + std::to_string(iter));
    }
}

} // namespace detail

/// One LBO inversion step z_prev -> z_t.
///
/// Numerical mode iterates the fixed-point map until the sup-norm change drops
/// below tol. Gradient mode runs Adam on the mean absolute residual and keeps
/// the iterate with the lowest objective (the DDIM initialization included),
/// so it never returns a worse step than plain inversion. Hybrid runs the
/// gradient phase for n_g iterations and continues numerically from its best
/// iterate. Adam state is fresh for every call. Non-convergence is reported,
/// not thrown.
inline LboStepResult lbo_invert_step(const Denoiser& model, const NoiseSchedule& sched, const Latent& z_prev,
                                     int t_prev, int t, const Condition& c, const LboConfig& cfg) {
    cfg.validate();
    const double w = cfg.guidance_w;
    const Latent z_ddim = ddim_invert_step(model, sched, z_prev, t_prev, t, c, w);
    Latent b = z_ddim - z_prev;
    bool moved = false;

    LboStepReport rep;
    rep.t = t;

    const int n_grad = cfg.mode == LboMode::Gradient ? cfg.max_iters : (cfg.mode == LboMode::Hybrid ? cfg.n_g : 0);
    const int n_num = cfg.max_iters - n_grad;

    if (cfg.max_iters == 0) {
        rep.final_residual =
            cfg.mode == LboMode::Gradient
                ? lbo_objective(model, sched, z_prev, t_prev, t, c, w, b)
                : (lbo_numerical_iterate(model, sched, z_prev, t_prev, t, c, w, b) - b).cwiseAbs().maxCoeff();
        rep.converged = rep.final_residual < cfg.tol;
        return {z_ddim, rep};
    }

    if (n_grad > 0) {
        AdamState opt(cfg.lr);
        Latent best = b;
        double best_obj = lbo_objective(model, sched, z_prev, t_prev, t, c, w, b);
        int iter = 0;
        while (iter < n_grad && !(best_obj < cfg.tol)) {
            b = lbo_gradient_iterate(model, sched, z_prev, t_prev, t, c, w, b, opt);
            ++iter;
            detail::require_finite(b, iter, t);
            const double obj = lbo_objective(model, sched, z_prev, t_prev, t, c, w, b);
            if (!std::isfinite(obj)) detail::require_finite(Latent::Constant(1, obj), iter, t);
            if (obj < best_obj) {
                best_obj = obj;
                best = b;
                moved = true;
            }
        }
        b = best;
        rep.iters_used = iter;
        rep.final_residual = best_obj;
        rep.converged = best_obj < cfg.tol;
        if (rep.converged) {
            return {moved ? Latent(z_prev + b) : z_ddim, rep};
        }
    }

    for (int i = 0; i < n_num; ++i) {
        const Latent next = lbo_numerical_iterate(model, sched, z_prev, t_prev, t, c, w, b);
        ++rep.iters_used;
        detail::require_finite(next, rep.iters_used, t);
        rep.final_residual = (next - b).cwiseAbs().maxCoeff();
        b = next;
        moved = true;
        if (rep.final_residual < cfg.tol) {
            rep.converged = true;
            break;
        }
    }
    return {moved ? Latent(z_prev + b) : z_ddim, rep};
}

struct LboTrajectory {
    Trajectory trajectory;
    std::vector<LboStepReport> reports;
};

inline LboTrajectory lbo_invert_trajectory(const Denoiser& model, const NoiseSchedule& sched, const TimestepGrid& grid,
                                           const Latent& z0, const Condition& c, const LboConfig& cfg) {
    detail::require(!grid.empty(), ErrorCode::InvalidParameter, "timestep grid is empty", "lbo_invert_trajectory");
    cfg.validate();
    LboTrajectory out;
    out.trajectory = Trajectory{Direction::Inversion, grid, cfg.guidance_w, c, {}};
    out.trajectory.entries.reserve(grid.size() + 1);
    out.reports.reserve(grid.size());
    Latent z = z0;
    out.trajectory.entries.push_back({0, z});
    for (std::size_t i = 0; i < grid.size(); ++i) {
        LboStepResult step = lbo_invert_step(model, sched, z, grid.prev_of(i), grid.step(i), c, cfg);
        z = std::move(step.z_t);
        out.trajectory.entries.push_back({grid.step(i), z});
        out.reports.push_back(step.report);
    }
    return out;
}

} // namespace lbi
