#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lbi/autoencoder.hpp"
#include "lbi/denoiser.hpp"
#include "lbi/ilb.hpp"
#include "lbi/lbo.hpp"
#include "lbi/optim.hpp"
#include "lbi/rng.hpp"
#include "lbi/schedule.hpp"

namespace lbi {

struct GradcheckEntry {
    std::string name;
    int probes = 0;
    double max_rel_error = 0.0;
    int rejected = 0;  // draws skipped for lying too close to a kink
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;

    double max_rel_error() const {
        double m = 0.0;
        for (const auto& e : entries) m = std::max(m, e.max_rel_error);
        return m;
    }
};

struct GradcheckOptions {
    int probes = 20;
    std::uint64_t seed = 0;
    double guidance = 1.0;
    int n_classes = 0;  // > 0 draws class-label conditions
    int dt = 2;
    ConsistencyWeights weights;
    double kink_margin = 1e-5;  // ten stencil widths clear of any L1 kink
};

/// Central-difference checks of the three hand-assembled gradients: the
/// denoiser VJP (as v . F), the LBO objective gradient, and the ILB loss
/// gradient (consistency plus regularization). `images` must be nonempty and
/// match the autoencoder.
inline GradcheckReport run_gradchecks(const Denoiser& model, const NoiseSchedule& sched, const Autoencoder& ae,
                                      const PerceptualMetric* perc, std::span<const Image> images,
                                      const GradcheckOptions& opt) {
    detail::require(!images.empty(), ErrorCode::InvalidInput, "gradcheck needs at least one image", "gradcheck");
    detail::require(opt.probes >= 1, ErrorCode::InvalidParameter, "probes must be >= 1", "gradcheck");
    const int d = model.latent_dim();
    const int t_max = sched.t_train();
    Rng root(opt.seed);
    auto condition = [&](Rng& rng) -> Condition {
        if (opt.n_classes <= 0) return Unconditional{};
        return ClassLabel{static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.n_classes)))};
    };
    GradcheckReport rep;

    {
        GradcheckEntry e{"denoiser_vjp"};
        Rng rng = root.split(1);
        for (; e.probes < opt.probes; ++e.probes) {
            const Latent z = rng.normal_vector(d), v = rng.normal_vector(d);
            const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(t_max)));
            const Condition c = condition(rng);
            const ScalarFn f = [&](const Eigen::VectorXd& x) { return v.dot(cfg_eval(model, x, t, c, opt.guidance)); };
            const auto g = [&](const Eigen::VectorXd& x) { return cfg_vjp(model, x, t, c, opt.guidance, v); };
            e.max_rel_error = std::max(e.max_rel_error, gradient_check(f, g, z));
        }
        rep.entries.push_back(e);
    }
    {
        GradcheckEntry e{"lbo_gradient"};
        Rng rng = root.split(2);
        for (; e.probes < opt.probes; ++e.probes) {
            const Latent z = rng.normal_vector(d), b = 0.1 * rng.normal_vector(d);
            const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(t_max)));
            const int tp = static_cast<int>(rng.below(static_cast<std::uint64_t>(t)));
            const Condition c = condition(rng);
            const ScalarFn f = [&](const Eigen::VectorXd& x) {
                return lbo_objective(model, sched, z, tp, t, c, opt.guidance, x);
            };
            const auto g = [&](const Eigen::VectorXd& x) {
                return lbo_objective_gradient(model, sched, z, tp, t, c, opt.guidance, x);
            };
            e.max_rel_error = std::max(e.max_rel_error, gradient_check(f, g, b));
        }
        rep.entries.push_back(e);
    }
    {
        GradcheckEntry e{"ilb_gradient"};
        Rng rng = root.split(3);
        for (int attempt = 0; e.probes < opt.probes; ++attempt) {
            detail::require(attempt < 50 * opt.probes, ErrorCode::InvalidInput,
                            "could not place ILB probes away from L1 kinks", "gradcheck");
            const Image& x = images[rng.below(images.size())];
            const Latent z = ae.encode(x) + 0.05 * rng.normal_vector(ae.latent_dim());
            const Condition c = condition(rng);
            const double pix_gap = (ae.decode(z).pixels - x.pixels).cwiseAbs().minCoeff();
            const double reg_gap = (z - skip_roundtrip(model, sched, z, opt.dt, c, opt.guidance)).cwiseAbs().minCoeff();
            if (pix_gap < opt.kink_margin || reg_gap < opt.kink_margin) {
                ++e.rejected;
                continue;
            }
            const ScalarFn f = [&](const Eigen::VectorXd& q) {
                return consistency_loss(x, q, ae, perc, opt.weights) +
                       regularization_loss(model, sched, q, opt.dt, c, opt.guidance);
            };
            const auto g = [&](const Eigen::VectorXd& q) {
                return Latent(consistency_gradient(x, q, ae, perc, opt.weights) +
                              regularization_gradient(model, sched, q, opt.dt, c, opt.guidance));
            };
            e.max_rel_error = std::max(e.max_rel_error, gradient_check(f, g, z));
            ++e.probes;
        }
        rep.entries.push_back(e);
    }
    return rep;
}

} // namespace lbi
