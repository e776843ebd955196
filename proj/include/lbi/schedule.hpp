#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lbi/error.hpp"

namespace lbi {

/// Discrete DDPM noise schedule. Timesteps are 1-based (1..T); index 0 holds
/// the empty-product convention alpha_bar(0) = 1.
class NoiseSchedule {
public:
    explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
        detail::require(!betas_.empty(), ErrorCode::InvalidParameter, "schedule needs at least one beta",
                        "NoiseSchedule");
        alpha_bars_.resize(betas_.size() + 1);
        alpha_bars_[0] = 1.0;
        for (std::size_t t = 1; t <= betas_.size(); ++t) {
            const double b = betas_[t - 1];
            detail::require(b > 0.0 && b < 1.0 && std::isfinite(b), ErrorCode::InvalidParameter,
                            "beta_" + std::to_string(t) + " = " + std::to_string(b) + " outside (0,1)",
                            "NoiseSchedule");
            alpha_bars_[t] = alpha_bars_[t - 1] * (1.0 - b);
        }
    }

    int t_train() const noexcept { return static_cast<int>(betas_.size()); }

    double beta(int t) const {
        check_step(t, 1);
        return betas_[static_cast<std::size_t>(t - 1)];
    }

    double alpha_bar(int t) const {
        check_step(t, 0);
        return alpha_bars_[static_cast<std::size_t>(t)];
    }

    std::span<const double> betas() const noexcept { return betas_; }

    /// alpha_bar(1..T); the stored alpha_bar(0) = 1 is not included.
    std::span<const double> alpha_bars() const noexcept { return std::span(alpha_bars_).subspan(1); }

    void check_step(int t, int lo = 0) const {
        if (t < lo || t > t_train()) {
            throw Error(ErrorCode::Bounds,
                        "timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                            std::to_string(t_train()) + "]",
                        "NoiseSchedule");
        }
    }

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

inline NoiseSchedule make_linear_schedule(int t_train, double beta_start, double beta_end) {
    detail::require(t_train >= 1, ErrorCode::InvalidParameter, "t_train must be >= 1", "make_linear_schedule");
    detail::require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ErrorCode::InvalidParameter,
                    "need 0 < beta_start <= beta_end < 1", "make_linear_schedule");
    std::vector<double> betas(static_cast<std::size_t>(t_train));
    if (t_train == 1) {
        betas[0] = beta_start;
    } else {
        for (int i = 0; i < t_train; ++i) {
            const double f = static_cast<double>(i) / static_cast<double>(t_train - 1);
            betas[static_cast<std::size_t>(i)] = beta_start + f * (beta_end - beta_start);
        }
        betas.back() = beta_end;
    }
    return NoiseSchedule(std::move(betas));
}

/// The default toy schedule: linear betas 1e-4 .. 0.05 over 100 training steps.
inline NoiseSchedule default_schedule() { return make_linear_schedule(100, 1e-4, 0.05); }

struct StepCoefficients {
    double phi = 1.0;
    double psi = 0.0;
    double sigma = 0.0;
    int t = 0;
    int t_prev = 0;
};

/// Coefficients of one backward step z_prev = phi z_t + psi F(z_t) + sigma eps
/// between grid-adjacent timesteps t_prev < t. sigma uses beta of the current
/// step t, as in the adjacent-step formula.
inline StepCoefficients coefficients(const NoiseSchedule& sched, int t, int t_prev, double eta = 0.0) {
    if (t_prev >= t) {
        throw Error(ErrorCode::Ordering,
                    "t_prev (" + std::to_string(t_prev) + ") must be < t (" + std::to_string(t) + ")",
                    "coefficients");
    }
    sched.check_step(t, 1);
    sched.check_step(t_prev, 0);
    detail::require(eta >= 0.0 && eta <= 1.0, ErrorCode::InvalidParameter, "eta must lie in [0,1]", "coefficients");

    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    StepCoefficients c;
    c.t = t;
    c.t_prev = t_prev;
    c.phi = std::sqrt(ab_prev / ab);
    c.sigma = eta == 0.0 ? 0.0 : eta * std::sqrt(sched.beta(t) * (1.0 - ab_prev) / (1.0 - ab));
    c.psi = std::sqrt(std::max(0.0, 1.0 - ab_prev - c.sigma * c.sigma)) - std::sqrt((1.0 - ab) * ab_prev / ab);
    return c;
}

struct SkipCoefficients {
    double phi = 1.0;
    double psi = 0.0;
};

inline SkipCoefficients skip_coefficients_from_alpha_bar(double alpha_bar_dt, double alpha_bar_0 = 1.0) {
    SkipCoefficients s;
    s.phi = std::sqrt(alpha_bar_0 / alpha_bar_dt);
    s.psi = std::sqrt(1.0 - alpha_bar_0) - std::sqrt((1.0 - alpha_bar_dt) * alpha_bar_0 / alpha_bar_dt);
    return s;
}

/// Coefficients of the direct 0 <-> dt jump used by the latent-alignment
/// regularizer. With alpha_bar(0) = 1 the first term of psi vanishes.
inline SkipCoefficients skip_coefficients(const NoiseSchedule& sched, int dt) {
    if (dt < 1 || dt > sched.t_train()) {
        throw Error(ErrorCode::Bounds,
                    "dt = " + std::to_string(dt) + " outside [1, " + std::to_string(sched.t_train()) + "]",
                    "skip_coefficients");
    }
    return skip_coefficients_from_alpha_bar(sched.alpha_bar(dt));
}

/// Strictly increasing inference timesteps; the step before steps[0] is 0.
class TimestepGrid {
public:
    TimestepGrid() = default;

    TimestepGrid(std::vector<int> steps, int t_train) : steps_(std::move(steps)) {
        detail::require(!steps_.empty(), ErrorCode::InvalidParameter, "timestep grid is empty", "TimestepGrid");
        int prev = 0;
        for (int s : steps_) {
            detail::require(s > prev && s <= t_train, ErrorCode::InvalidParameter,
                            "grid steps must be strictly increasing within [1, T_train]", "TimestepGrid");
            prev = s;
        }
    }

    std::span<const int> steps() const noexcept { return steps_; }
    std::size_t size() const noexcept { return steps_.size(); }
    bool empty() const noexcept { return steps_.empty(); }

    int step(std::size_t i) const { return steps_.at(i); }
    int prev_of(std::size_t i) const { return i == 0 ? 0 : steps_.at(i - 1); }

    /// Stride of the first interval; the default dt for the alignment regularizer.
    int stride() const { return steps_.at(0); }

    bool operator==(const TimestepGrid&) const = default;

private:
    std::vector<int> steps_;
};

inline TimestepGrid make_uniform_grid(const NoiseSchedule& sched, int s) {
    const int t_train = sched.t_train();
    if (s < 1 || s > t_train) {
        throw Error(ErrorCode::InvalidParameter,
                    "grid size " + std::to_string(s) + " outside [1, " + std::to_string(t_train) + "]",
                    "make_uniform_grid");
    }
    std::vector<int> steps(static_cast<std::size_t>(s));
    for (int i = 0; i < s; ++i) {
        steps[static_cast<std::size_t>(i)] =
            static_cast<int>((static_cast<long long>(i + 1) * t_train) / s);
    }
    return TimestepGrid(std::move(steps), t_train);
}

} // namespace lbi
