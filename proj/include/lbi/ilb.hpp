#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lbi/autoencoder.hpp"
#include "lbi/denoiser.hpp"
#include "lbi/error.hpp"
#include "lbi/lbo.hpp"
#include "lbi/metrics.hpp"
#include "lbi/optim.hpp"
#include "lbi/schedule.hpp"

namespace lbi {

struct ConsistencyWeights {
    double l1 = 1.0;
    double ssim = 1.0;
    double perceptual = 1.0;
};

struct IlbConfig {
    double lr = 0.1;
    int max_iters = 100;
    double rel_tol = 1e-5;
    int patience = 5;
    int dt = 2;  // one stride of the default 100-step / 50-step grid
    bool use_reg = true;
    ConsistencyWeights weights;
    double guidance_w = 1.0;
    SsimParams ssim;

    void validate(const NoiseSchedule& sched) const {
        detail::require(lr > 0.0, ErrorCode::Config, "ILB lr must be > 0", "IlbConfig");
        detail::require(max_iters >= 1, ErrorCode::Config, "ILB max_iters must be >= 1", "IlbConfig");
        detail::require(rel_tol > 0.0, ErrorCode::Config, "ILB rel_tol must be > 0", "IlbConfig");
        detail::require(patience >= 1, ErrorCode::Config, "ILB patience must be >= 1", "IlbConfig");
        detail::require(weights.l1 >= 0.0 && weights.ssim >= 0.0 && weights.perceptual >= 0.0, ErrorCode::Config,
                        "loss weights must be >= 0", "IlbConfig");
        if (dt < 1 || dt > sched.t_train()) {
            throw Error(ErrorCode::Bounds, "dt = " + std::to_string(dt) + " outside the schedule", "IlbConfig");
        }
    }
};

namespace detail {

inline void require_perceptual(const PerceptualMetric* perc, const ConsistencyWeights& w) {
    detail::require(perc != nullptr || w.perceptual == 0.0, ErrorCode::InvalidParameter,
                    "perceptual weight is nonzero but no perceptual metric was given", "consistency_loss");
}

} // namespace detail

inline double consistency_loss(const Image& x0, const Latent& z0, const Autoencoder& ae, const PerceptualMetric* perc,
                               const ConsistencyWeights& w, const SsimParams& sp = {}) {
    detail::require_perceptual(perc, w);
    const Image xh = ae.decode(z0);
    detail::require_same_shape(x0, xh, "consistency_loss");
    double loss = 0.0;
    if (w.l1 != 0.0) loss += w.l1 * (x0.pixels - xh.pixels).cwiseAbs().mean();
    if (w.ssim != 0.0) loss -= w.ssim * ssim(x0, xh, sp);
    if (w.perceptual != 0.0) loss += w.perceptual * perc->distance(x0, xh);
    return loss;
}

inline Latent consistency_gradient(const Image& x0, const Latent& z0, const Autoencoder& ae,
                                   const PerceptualMetric* perc, const ConsistencyWeights& w,
                                   const SsimParams& sp = {}) {
    detail::require_perceptual(perc, w);
    const Image xh = ae.decode(z0);
    detail::require_same_shape(x0, xh, "consistency_gradient");
    Image g(xh.shape, 0.0);
    if (w.l1 != 0.0) {
        g.pixels += (w.l1 / static_cast<double>(xh.pixels.size())) * (xh.pixels - x0.pixels).unaryExpr(&sign0);
    }
    if (w.ssim != 0.0) {
        Image gs;
        ssim(x0, xh, sp, &gs);
        g.pixels -= w.ssim * gs.pixels;
    }
    if (w.perceptual != 0.0) g.pixels += w.perceptual * perc->gradient_y(x0, xh).pixels;
    return ae.decoder_vjp(z0, g);
}

/// Jump z0 -> z_dt by one inversion step and back by one generation step.
inline Latent skip_roundtrip(const Denoiser& model, const NoiseSchedule& sched, const Latent& z0, int dt,
                             const Condition& c, double w = 1.0) {
    const SkipCoefficients k = skip_coefficients(sched, dt);
    const Latent z_dt = z0 / k.phi - (k.psi / k.phi) * cfg_eval(model, z0, dt, c, w);
    return k.phi * z_dt + k.psi * cfg_eval(model, z_dt, dt, c, w);
}

inline double regularization_loss(const Denoiser& model, const NoiseSchedule& sched, const Latent& z0, int dt,
                                  const Condition& c, double w = 1.0) {
    return (z0 - skip_roundtrip(model, sched, z0, dt, c, w)).cwiseAbs().mean();
}

/// Gradient of regularization_loss, differentiating through both denoiser
/// evaluations of the round trip.
inline Latent regularization_gradient(const Denoiser& model, const NoiseSchedule& sched, const Latent& z0, int dt,
                                      const Condition& c, double w = 1.0) {
    const SkipCoefficients k = skip_coefficients(sched, dt);
    const Latent z_dt = z0 / k.phi - (k.psi / k.phi) * cfg_eval(model, z0, dt, c, w);
    const Latent rt = k.phi * z_dt + k.psi * cfg_eval(model, z_dt, dt, c, w);
    const Latent s = (z0 - rt).unaryExpr(&sign0) / static_cast<double>(z0.size());
    // (d rt / d z0)^T s = (I/phi - psi/phi J(z0)^T)(phi s + psi J(z_dt)^T s)
    const Latent u = k.phi * s + k.psi * cfg_vjp(model, z_dt, dt, c, w, s);
    const Latent back = u / k.phi - (k.psi / k.phi) * cfg_vjp(model, z0, dt, c, w, u);
    return s - back;
}

struct IlbTracePoint {
    int iter = 0;
    double l_con = 0.0;
    double l_reg = 0.0;
    double total = 0.0;
};

struct IlbReport {
    int iters_used = 0;
    double initial_l_con = 0.0, initial_l_reg = 0.0, initial_total = 0.0;
    double final_l_con = 0.0, final_l_reg = 0.0, final_total = 0.0;
    int best_iter = 0;
    std::vector<IlbTracePoint> trace;  // loss after each optimizer step
};

struct IlbResult {
    Latent z0;
    IlbReport report;
};

/// Adam on L_con (+ L_reg when enabled) starting from E(x0). Stops after
/// `patience` consecutive steps whose relative decrease over the previous step
/// is below rel_tol, or at max_iters, and returns the lowest-loss iterate seen
/// (possibly the start).
/// L_reg is always evaluated so disabled runs can still report it.
inline IlbResult ilb_optimize(const Image& x0, const Autoencoder& ae, const Denoiser& model,
                              const NoiseSchedule& sched, const PerceptualMetric* perc, const IlbConfig& cfg,
                              const Condition& c = Unconditional{}) {
    cfg.validate(sched);
    detail::require_perceptual(perc, cfg.weights);
    detail::require_dim(model.latent_dim(), ae.latent_dim(), "denoiser vs autoencoder latent");
    const double w = cfg.guidance_w;

    auto evaluate = [&](const Latent& z, int iter) {
        IlbTracePoint p;
        p.iter = iter;
        p.l_con = consistency_loss(x0, z, ae, perc, cfg.weights, cfg.ssim);
        p.l_reg = regularization_loss(model, sched, z, cfg.dt, c, w);
        p.total = p.l_con + (cfg.use_reg ? p.l_reg : 0.0);
        if (!std::isfinite(p.total)) {
            throw Error(ErrorCode::Divergence, "ILB loss became non-finite at iteration " + std::to_string(iter),
                        "iteration " + std::to_string(iter));
        }
        return p;
    };
    auto gradient = [&](const Latent& z) {
        Latent g = consistency_gradient(x0, z, ae, perc, cfg.weights, cfg.ssim);
        if (cfg.use_reg) g += regularization_gradient(model, sched, z, cfg.dt, c, w);
        return g;
    };

    Latent z = ae.encode(x0);
    IlbResult out;
    IlbReport& rep = out.report;
    const IlbTracePoint init = evaluate(z, 0);
    rep.initial_l_con = init.l_con;
    rep.initial_l_reg = init.l_reg;
    rep.initial_total = init.total;
    IlbTracePoint best = init;
    Latent best_z = z;

    AdamState opt(cfg.lr);
    int stalled = 0;
    double prev_total = init.total;
    for (int iter = 1; iter <= cfg.max_iters; ++iter) {
        z = adam_step(opt, z, gradient(z));
        const IlbTracePoint p = evaluate(z, iter);
        rep.trace.push_back(p);
        rep.iters_used = iter;
        const double improvement = (prev_total - p.total) / std::max(std::abs(prev_total), 1e-12);
        prev_total = p.total;
        if (p.total < best.total) {
            best = p;
            best_z = z;
        }
        stalled = improvement < cfg.rel_tol ? stalled + 1 : 0;
        if (stalled >= cfg.patience) break;
    }
    rep.best_iter = best.iter;
    rep.final_l_con = best.l_con;
    rep.final_l_reg = best.l_reg;
    rep.final_total = best.total;
    out.z0 = std::move(best_z);
    return out;
}

} // namespace lbi
