#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include <Eigen/Core>

#include "lbi/error.hpp"

namespace lbi {

/// Bias-corrected Adam. Moments are sized lazily on the first step so one
/// state can be default-constructed before the optimized vector is known.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long step_count = 0;

    AdamState() = default;
    explicit AdamState(double learning_rate) : lr(learning_rate) {}
};

inline Eigen::VectorXd adam_step(AdamState& state, const Eigen::VectorXd& x, const Eigen::VectorXd& grad) {
    detail::require_dim(grad.size(), x.size(), "adam_step gradient");
    if (!grad.allFinite()) {
        throw Error(ErrorCode::Divergence,
                    "non-finite gradient at Adam step " + std::to_string(state.step_count + 1), "adam_step");
    }
    if (state.step_count == 0 && state.m.size() == 0) {
        state.m = Eigen::VectorXd::Zero(x.size());
        state.v = Eigen::VectorXd::Zero(x.size());
    }
    detail::require_dim(state.m.size(), x.size(), "adam_step state");

    ++state.step_count;
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad;
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));

    Eigen::VectorXd next(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        next[i] = x[i] - state.lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
    return next;
}

using ScalarFn = std::function<double(const Eigen::VectorXd&)>;

/// Central-difference gradient with per-coordinate step h_rel * (1 + |x_i|).
inline Eigen::VectorXd finite_difference_gradient(const ScalarFn& f, const Eigen::VectorXd& x, double h_rel = 1e-6) {
    Eigen::VectorXd g(x.size());
    Eigen::VectorXd probe = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double h = h_rel * (1.0 + std::abs(x[i]));
        probe[i] = x[i] + h;
        const double fp = f(probe);
        probe[i] = x[i] - h;
        const double fm = f(probe);
        probe[i] = x[i];
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw Error(ErrorCode::Divergence, "non-finite function value near coordinate " + std::to_string(i),
                        "finite_difference_gradient");
        }
        g[i] = (fp - fm) / ((x[i] + h) - (x[i] - h));
    }
    return g;
}

/// Max over coordinates of |claimed - fd| / max(|fd|, 1e-12).
inline double gradient_check(const ScalarFn& f, const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& grad_f,
                             const Eigen::VectorXd& x, double h_rel = 1e-6) {
    const Eigen::VectorXd fd = finite_difference_gradient(f, x, h_rel);
    const Eigen::VectorXd claimed = grad_f(x);
    detail::require_dim(claimed.size(), x.size(), "gradient_check claimed gradient");
    if (!claimed.allFinite()) {
        throw Error(ErrorCode::Divergence, "claimed gradient is not finite", "gradient_check");
    }
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double denom = std::max(std::abs(fd[i]), 1e-12);
        worst = std::max(worst, std::abs(claimed[i] - fd[i]) / denom);
    }
    return worst;
}

} // namespace lbi
