// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "lbi/benchmark.hpp"
#include "lbi/gradcheck.hpp"

using namespace lbi;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

Latent inf_norm_diff(const Latent& a, const Latent& b) { return (a - b).cwiseAbs(); }

NoiseSchedule random_schedule(Rng& rng, int t_train) {
    std::vector<double> betas(static_cast<std::size_t>(t_train));
    for (double& b : betas) b = rng.uniform(1e-5, 0.05);
    return NoiseSchedule(std::move(betas));
}

// 1 -------------------------------------------------------------------------
Outcome scheduler_algebra() {
    Rng rng(101);
    double closed_form = 0.0, identity = 0.0;
    for (int s = 0; s < 100; ++s) {
        const NoiseSchedule sched = random_schedule(rng, 100);
        const Latent z0 = rng.normal_vector(4);
        const Latent zero = Latent::Zero(4);
        Latent z = z0;
        for (int t = 1; t <= sched.t_train(); ++t) {
            z = forward_step(sched, z, t, zero);
            closed_form = std::max(closed_form, inf_norm_diff(z, forward_noise(sched, z0, t, zero)).maxCoeff());
        }
        for (int k = 0; k < 20; ++k) {
            const int t = 1 + static_cast<int>(rng.below(100));
            const int tp = static_cast<int>(rng.below(static_cast<std::uint64_t>(t)));
            const StepCoefficients c = coefficients(sched, t, tp);
            const double ab = sched.alpha_bar(t), abp = sched.alpha_bar(tp);
            const double rhs = std::sqrt(ab) * (std::sqrt(1.0 / ab - 1.0) - std::sqrt(1.0 / abp - 1.0));
            identity = std::max(identity, std::abs(-c.psi / c.phi - rhs));
        }
    }
    return {closed_form <= 1e-12 && identity <= 1e-12,
            "iterated vs closed form " + fmt("%.2e", closed_form) + ", coefficient identity " + fmt("%.2e", identity)};
}

// 2 -------------------------------------------------------------------------
Outcome constant_denoiser_exactness() {
    const NoiseSchedule sched = default_schedule();
    const TimestepGrid grid = make_uniform_grid(sched, 50);
    Rng rng(202);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const ConstantDenoiser f(rng.normal_vector(8), sched.t_train());
        const Latent z = rng.normal_vector(8);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const int t = grid.step(i), tp = grid.prev_of(i);
            const Latent up = ddim_invert_step(f, sched, z, tp, t, Unconditional{});
            worst = std::max(worst, inf_norm_diff(generate_step(f, sched, up, t, tp, Unconditional{}), z).maxCoeff());
            const Latent down = generate_step(f, sched, z, t, tp, Unconditional{});
            worst = std::max(worst, inf_norm_diff(ddim_invert_step(f, sched, down, tp, t, Unconditional{}), z).maxCoeff());
        }
        const Trajectory inv = ddim_invert_trajectory(f, sched, grid, z, Unconditional{});
        worst = std::max(worst, inf_norm_diff(generate_trajectory(f, sched, grid, inv.back(), Unconditional{}).back(), z)
                                    .maxCoeff());
        const Trajectory gen = generate_trajectory(f, sched, grid, z, Unconditional{});
        worst = std::max(worst,
                         inf_norm_diff(ddim_invert_trajectory(f, sched, grid, gen.back(), Unconditional{}).back(), z)
                             .maxCoeff());
    }
    return {worst <= 1e-10, "max deviation over steps and 50-step sweeps " + fmt("%.2e", worst)};
}

// 3 -------------------------------------------------------------------------
Outcome gradient_fidelity() {
    const NoiseSchedule sched = default_schedule();
    const DataParams small{.height = 8, .width = 8};
    const auto images = gen_shapes(40, 303, small);
    const LinearFit fit = fit_linear_autoencoder(images, 16, 0.2);
    const MlpDenoiser mlp = MlpDenoiser::random_init(MlpShape{16, 64, 3, 0, sched.t_train()}, sched, 303);
    const RandomConvPerceptual perc;
    GradcheckOptions opt;
    opt.probes = 20;
    opt.seed = 303;
    opt.guidance = 2.0;
    opt.n_classes = 3;
    const GradcheckReport rep = run_gradchecks(mlp, sched, fit.ae, &perc, images, opt);
    std::string detail;
    bool enough = true;
    for (const auto& e : rep.entries) {
        detail += e.name + " " + fmt("%.2e", e.max_rel_error) + " (" + std::to_string(e.probes) + " probes, " +
                  std::to_string(e.rejected) + " redrawn); ";
        enough = enough && e.probes >= 20;
    }
    return {enough && rep.max_rel_error() <= 1e-4, detail + "tolerance 1e-4"};
}

// 4 -------------------------------------------------------------------------
RunConfig point_config(std::uint64_t seed, int count) {
    RunConfig c;
    c.seed = seed;
    c.data_kind = DataKind::Gauss2d;
    c.count = count;
    c.train_count = 1000;
    c.steps = 50;
    c.perceptual = "none";
    c.ilb.weights.perceptual = 0.0;
    return c;
}

Outcome lbo_certificate() {
    const RunConfig cfg = point_config(404, 100);
    const Backends b = build_backends(cfg);
    const LboConfig lc = cfg.lbo_config(LboMode::Numerical);
    int unconverged = 0, not_tenfold = 0;
    double worst_replay = 0.0, worst_rt = 0.0, worst_ratio = 0.0;
    for (const Image& x : b.instances) {
        const Latent z0 = b.ae->encode(x);
        const LboTrajectory inv = lbo_invert_trajectory(*b.model, b.schedule, b.grid, z0, Unconditional{}, lc);
        for (std::size_t i = 0; i < inv.reports.size(); ++i) {
            const LboStepReport& r = inv.reports[i];
            if (!r.converged || r.final_residual >= 1e-8 || r.iters_used > 15) ++unconverged;
            const Latent back = generate_step(*b.model, b.schedule, inv.trajectory.entries[i + 1].z, b.grid.step(i),
                                              b.grid.prev_of(i), Unconditional{});
            worst_replay = std::max(worst_replay, inf_norm_diff(back, inv.trajectory.entries[i].z).maxCoeff());
        }
        const auto replay = [&](const Trajectory& t) {
            return relative_l2(generate_trajectory(*b.model, b.schedule, b.grid, t.back(), Unconditional{}).back(), z0);
        };
        const double e_lbo = replay(inv.trajectory);
        const double e_ddim = replay(ddim_invert_trajectory(*b.model, b.schedule, b.grid, z0, Unconditional{}));
        worst_rt = std::max(worst_rt, e_lbo);
        worst_ratio = std::max(worst_ratio, e_lbo / e_ddim);
        if (!(10.0 * e_lbo <= e_ddim)) ++not_tenfold;
    }
    const bool pass = unconverged == 0 && worst_replay <= 10.0 * lc.tol && worst_rt <= 1e-6 && not_tenfold == 0;
    return {pass, std::to_string(unconverged) + " unconverged steps; max single-step replay " +
                      fmt("%.2e", worst_replay) + "; max round-trip rel L2 " + fmt("%.2e", worst_rt) +
                      "; max lbo/ddim error ratio " + fmt("%.2e", worst_ratio) + " over 100 instances"};
}

// 5 -------------------------------------------------------------------------
Outcome variant_agreement() {
    const LboMode modes[3] = {LboMode::Gradient, LboMode::Numerical, LboMode::Hybrid};

    const RunConfig acfg = point_config(505, 100);
    const Backends ab = build_backends(acfg);
    double worst_g = 0.0, worst_h = 0.0;
    for (const Image& x : ab.instances) {
        Latent z_T[3];
        for (int k = 0; k < 3; ++k)
            z_T[k] = lbo_invert_trajectory(*ab.model, ab.schedule, ab.grid, ab.ae->encode(x), Unconditional{},
                                           acfg.lbo_config(modes[k]))
                         .trajectory.back();
        worst_g = std::max(worst_g, relative_l2(z_T[0], z_T[1]));
        worst_h = std::max(worst_h, relative_l2(z_T[2], z_T[1]));
    }
    const bool agree = worst_g <= 1e-3 && worst_h <= 1e-3;

    RunConfig mcfg = point_config(506, 100);
    mcfg.denoiser = "mlp";
    mcfg.train_count = 2000;
    const Backends mb = build_backends(mcfg);
    int wins[3] = {0, 0, 0};
    for (const Image& x : mb.instances) {
        const Latent z0 = mb.ae->encode(x);
        const auto replay = [&](const Trajectory& t) {
            return relative_l2(generate_trajectory(*mb.model, mb.schedule, mb.grid, t.back(), Unconditional{}).back(),
                               z0);
        };
        const double e_ddim = replay(ddim_invert_trajectory(*mb.model, mb.schedule, mb.grid, z0, Unconditional{}));
        for (int k = 0; k < 3; ++k) {
            const double e = replay(lbo_invert_trajectory(*mb.model, mb.schedule, mb.grid, z0, Unconditional{},
                                                          mcfg.lbo_config(modes[k]))
                                        .trajectory);
            if (e < e_ddim) ++wins[k];
        }
    }
    const int n = static_cast<int>(mb.instances.size());
    const bool beats = std::all_of(std::begin(wins), std::end(wins), [&](int w) { return 100 * w >= 95 * n; });
    return {agree && beats,
            "analytic z_T rel L2 vs lbo-n: lbo-g " + fmt("%.2e", worst_g) + ", lbo-h " + fmt("%.2e", worst_h) +
                " (tol 1e-3); trained-MLP wins over ddim: lbo-g " + std::to_string(wins[0]) + "/" + std::to_string(n) +
                ", lbo-n " + std::to_string(wins[1]) + "/" + std::to_string(n) + ", lbo-h " + std::to_string(wins[2]) +
                "/" + std::to_string(n) + " (MLP held-out loss " + fmt("%.3f", mb.training->heldout_loss) + ")"};
}

// 6 -------------------------------------------------------------------------
Outcome zero_iteration_degeneracy() {
    const NoiseSchedule sched = default_schedule();
    const TimestepGrid grid = make_uniform_grid(sched, 50);
    const MlpDenoiser mlp = MlpDenoiser::random_init(MlpShape{3, 32, 2, 0, sched.t_train()}, sched, 606);
    Rng rng(606);
    int mismatches = 0, compared = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const Latent z0 = rng.normal_vector(3);
        const Condition c = ClassLabel{trial % 2};
        const double w = trial % 3 == 0 ? 3.0 : 1.0;
        const Trajectory ddim = ddim_invert_trajectory(mlp, sched, grid, z0, c, w);
        for (LboMode m : {LboMode::Gradient, LboMode::Numerical, LboMode::Hybrid}) {
            LboConfig cfg = LboConfig::defaults(m);
            cfg.max_iters = 0;
            cfg.n_g = 0;
            cfg.guidance_w = w;
            const Trajectory lbo = lbo_invert_trajectory(mlp, sched, grid, z0, c, cfg).trajectory;
            for (std::size_t i = 0; i < ddim.entries.size(); ++i, ++compared)
                if (!(lbo.entries[i].z.array() == ddim.entries[i].z.array()).all()) ++mismatches;
        }
    }
    return {mismatches == 0, std::to_string(mismatches) + " of " + std::to_string(compared) +
                                 " latents differ from DDIM inversion (bitwise)"};
}

// 7 and 8 -------------------------------------------------------------------
RunConfig lossy_config() {
    RunConfig c;
    c.seed = 707;
    c.data_kind = DataKind::Shapes;
    c.count = 50;
    c.train_count = 200;
    c.autoencoder = "linear";
    c.latent_dim = 64;
    c.ridge = 0.2;
    return c;
}

Outcome ilb_improvement() {
    const RunConfig cfg = lossy_config();
    const Backends b = build_backends(cfg);
    double psnr_enc = 0.0, psnr_ilb = 0.0;
    int not_better = 0;
    for (const Image& x : b.instances) {
        const IlbResult r = ilb_optimize(x, *b.ae, *b.model, b.schedule, b.perceptual.get(), cfg.ilb_config());
        psnr_enc += psnr(x, b.ae->decode(b.ae->encode(x)));
        psnr_ilb += psnr(x, b.ae->decode(r.z0));
        if (!(r.report.final_total <= r.report.initial_total)) ++not_better;
    }
    const double n = static_cast<double>(b.instances.size());
    const double gain = (psnr_ilb - psnr_enc) / n;
    return {gain >= 1.0 && not_better == 0,
            "mean PSNR " + fmt("%.2f", psnr_enc / n) + " -> " + fmt("%.2f", psnr_ilb / n) + " dB (gain " +
                fmt("%.2f", gain) + " dB, need 1.00); final > initial loss on " + std::to_string(not_better) +
                " of 50 images"};
}

Outcome regularizer_effect() {
    const RunConfig cfg = lossy_config();
    const Backends b = build_backends(cfg);
    IlbConfig on = cfg.ilb_config(), off = on;
    off.use_reg = false;
    int wins = 0;
    for (const Image& x : b.instances) {
        const IlbResult r_on = ilb_optimize(x, *b.ae, *b.model, b.schedule, b.perceptual.get(), on);
        const IlbResult r_off = ilb_optimize(x, *b.ae, *b.model, b.schedule, b.perceptual.get(), off);
        if (r_on.report.final_l_reg <= r_off.report.final_l_reg) ++wins;
    }
    const int n = static_cast<int>(b.instances.size());
    return {10 * wins >= 9 * n,
            "L_reg enabled ends with lower or equal regularization loss on " + std::to_string(wins) + "/" +
                std::to_string(n) + " images (need 90%)"};
}

// 9 -------------------------------------------------------------------------
Outcome metric_sanity() {
    double self = 0.0, sym = 0.0;
    Rng rng(909);
    for (const Image& x : gen_shapes(10, 909)) {
        Image y = x;
        for (Eigen::Index i = 0; i < y.pixels.size(); ++i) y.pixels[i] += 0.1 * rng.normal();
        self = std::max(self, std::abs(ssim(x, x) - 1.0));
        sym = std::max(sym, std::abs(ssim(x, y) - ssim(y, x)));
    }
    const ImageShape s{8, 8, 1};
    Image a(s, 0.5), b(s, 0.5);
    for (Eigen::Index i = 0; i < b.pixels.size(); ++i) b.pixels[i] += i % 2 == 0 ? 0.1 : -0.1;
    const double p = psnr(a, b);
    const double c = ssim(Image(ImageShape{4, 4, 1}, 0.0), Image(ImageShape{4, 4, 1}, 0.5));
    const bool pass = self <= 1e-12 && sym <= 1e-12 && std::abs(p - 20.0) <= 1e-9 && std::abs(c - 3.9984e-4) <= 1e-6;
    return {pass, "|ssim(x,x)-1| " + fmt("%.1e", self) + ", asymmetry " + fmt("%.1e", sym) + ", psnr at MSE 0.01 " +
                      fmt("%.10f", p) + " dB, constant-image ssim " + fmt("%.7e", c)};
}

// 10 ------------------------------------------------------------------------
Outcome determinism() {
    RunConfig cfg;
    cfg.seed = 1010;
    cfg.count = 8;
    cfg.train_count = 60;
    cfg.steps = 20;
    cfg.data.height = 8;
    cfg.data.width = 8;
    cfg.latent_dim = 16;
    cfg.ilb.max_iters = 15;
    const std::string serial = rows_to_csv(run_benchmark(cfg).rows, false);
    const std::string serial_again = rows_to_csv(run_benchmark(cfg).rows, false);
    cfg.threads = 4;
    const std::string parallel = rows_to_csv(run_benchmark(cfg).rows, false);
    const std::string parallel_again = rows_to_csv(run_benchmark(cfg).rows, false);
    const bool pass = serial == serial_again && serial == parallel && parallel == parallel_again;
    return {pass, std::to_string(std::count(serial.begin(), serial.end(), '\n') - 1) +
                      " rows; serial reruns " + (serial == serial_again ? "identical" : "DIFFER") +
                      ", 4-thread runs " + (parallel == parallel_again && serial == parallel ? "identical" : "DIFFER")};
}

struct Criterion {
    int id;
    const char* name;
    double budget_s;  // 0: no runtime bound
    std::function<Outcome()> run;
};

} // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {1, "scheduler algebra", 1.0, scheduler_algebra},
        {2, "constant-denoiser exactness", 1.0, constant_denoiser_exactness},
        {3, "gradient fidelity", 30.0, gradient_fidelity},
        {4, "LBO fixed-point certificate", 120.0, lbo_certificate},
        {5, "variant agreement", 600.0, variant_agreement},
        {6, "max_iters=0 degeneracy", 0.0, zero_iteration_degeneracy},
        {7, "ILB improvement", 600.0, ilb_improvement},
        {8, "regularizer effect", 0.0, regularizer_effect},
        {9, "metric sanity", 0.0, metric_sanity},
        {10, "determinism", 0.0, determinism},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const Error& e) {
            o = {false, std::string("error ") + std::string(to_string(e.code())) + ": " + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::string timing = fmt("%.2f s", secs);
        if (c.budget_s > 0.0) {
            timing += fmt(" of %.0f s", c.budget_s);
            if (secs > c.budget_s) {
                o.pass = false;
                timing += " (over budget)";
            }
        }
        if (!o.pass) ++failed;
        std::printf("%s criterion %2d %-28s %s [%s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                    timing.c_str());
        std::fflush(stdout);
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
