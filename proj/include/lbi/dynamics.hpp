#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lbi/denoiser.hpp"
#include "lbi/error.hpp"
#include "lbi/schedule.hpp"

namespace lbi {

enum class Direction { Generation, Inversion };

inline std::string_view to_string(Direction d) { return d == Direction::Generation ? "generation" : "inversion"; }

struct TrajectoryEntry {
    int t = 0;
    Latent z;
};

/// Ordered latents of one sweep. Generation runs T -> 0, inversion 0 -> T; both
/// include the t = 0 endpoint.
struct Trajectory {
    Direction direction = Direction::Inversion;
    TimestepGrid grid;
    double guidance = 1.0;
    Condition condition = Unconditional{};
    std::vector<TrajectoryEntry> entries;

    const Latent& front() const { return entries.front().z; }
    const Latent& back() const { return entries.back().z; }

    /// Latent recorded at timestep t.
    const Latent& at_timestep(int t) const {
        for (const auto& e : entries)
            if (e.t == t) return e.z;
        throw Error(ErrorCode::Bounds, "timestep " + std::to_string(t) + " not in trajectory", "Trajectory");
    }
};

inline Latent forward_noise(const NoiseSchedule& sched, const Latent& z0, int t, const Latent& eps) {
    detail::require_dim(eps.size(), z0.size(), "forward_noise eps");
    const double ab = sched.alpha_bar(t);
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

inline Latent forward_step(double beta, const Latent& z_prev, const Latent& eps) {
    detail::require_dim(eps.size(), z_prev.size(), "forward_step eps");
    return std::sqrt(1.0 - beta) * z_prev + std::sqrt(beta) * eps;
}

inline Latent forward_step(const NoiseSchedule& sched, const Latent& z_prev, int t, const Latent& eps) {
    return forward_step(sched.beta(t), z_prev, eps);
}

/// One backward step z_{t_prev} = phi z_t + psi F_w(z_t, t, C) + sigma eps.
inline Latent generate_step(const Denoiser& model, const NoiseSchedule& sched, const Latent& z_t, int t, int t_prev,
                            const Condition& c, double w = 1.0, double eta = 0.0,
                            const std::optional<Latent>& eps = std::nullopt) {
    const StepCoefficients k = coefficients(sched, t, t_prev, eta);
    const Latent f = cfg_eval(model, z_t, t, c, w);
    if (eta == 0.0) return k.phi * z_t + k.psi * f;
    if (!eps) {
        throw Error(ErrorCode::MissingNoise, "eta > 0 requires a noise sample", "generate_step");
    }
    detail::require_dim(eps->size(), z_t.size(), "generate_step eps");
    return k.phi * z_t + k.psi * f + k.sigma * (*eps);
}

/// Plain DDIM inversion step: evaluates F at the lower latent and target step t.
inline Latent ddim_invert_step(const Denoiser& model, const NoiseSchedule& sched, const Latent& z_prev, int t_prev,
                               int t, const Condition& c, double w = 1.0) {
    const StepCoefficients k = coefficients(sched, t, t_prev, 0.0);
    const Latent f = cfg_eval(model, z_prev, t, c, w);
    return z_prev / k.phi - (k.psi / k.phi) * f;
}

inline Trajectory generate_trajectory(const Denoiser& model, const NoiseSchedule& sched, const TimestepGrid& grid,
                                      const Latent& z_T, const Condition& c, double w = 1.0) {
    detail::require(!grid.empty(), ErrorCode::InvalidParameter, "timestep grid is empty", "generate_trajectory");
    Trajectory traj{Direction::Generation, grid, w, c, {}};
    traj.entries.reserve(grid.size() + 1);
    Latent z = z_T;
    traj.entries.push_back({grid.step(grid.size() - 1), z});
    for (std::size_t i = grid.size(); i-- > 0;) {
        z = generate_step(model, sched, z, grid.step(i), grid.prev_of(i), c, w);
        traj.entries.push_back({grid.prev_of(i), z});
    }
    return traj;
}

inline Trajectory ddim_invert_trajectory(const Denoiser& model, const NoiseSchedule& sched, const TimestepGrid& grid,
                                         const Latent& z0, const Condition& c, double w = 1.0) {
    detail::require(!grid.empty(), ErrorCode::InvalidParameter, "timestep grid is empty", "ddim_invert_trajectory");
    Trajectory traj{Direction::Inversion, grid, w, c, {}};
    traj.entries.reserve(grid.size() + 1);
    Latent z = z0;
    traj.entries.push_back({0, z});
    for (std::size_t i = 0; i < grid.size(); ++i) {
        z = ddim_invert_step(model, sched, z, grid.prev_of(i), grid.step(i), c, w);
        traj.entries.push_back({grid.step(i), z});
    }
    return traj;
}

} // namespace lbi
