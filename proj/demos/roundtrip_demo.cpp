// Inverts a handful of 2-D mixture samples with plain DDIM and with each LBO
// mode, regenerates them, and prints the round-trip error per method.

#include <cstdio>
#include <vector>

#include "lbi/benchmark.hpp"

int main() {
    using namespace lbi;
    const NoiseSchedule sched = default_schedule();
    const TimestepGrid grid = make_uniform_grid(sched, 50);
    const PointSet train = gen_gauss2d(500, 1);
    const LinearGaussianDenoiser model = fit_analytic_denoiser(train.points, sched, 1e-3);
    const PointSet eval = gen_gauss2d(5, 2);

    std::printf("%-8s %14s %14s %14s %14s\n", "instance", "ddim", "lbo-g", "lbo-n", "lbo-h");
    for (std::size_t i = 0; i < eval.points.size(); ++i) {
        const Latent& z0 = eval.points[i];
        auto replay = [&](const Trajectory& inv) {
            return relative_l2(generate_trajectory(model, sched, grid, inv.back(), Unconditional{}).back(), z0);
        };
        std::printf("%-8zu %14.3e", i, replay(ddim_invert_trajectory(model, sched, grid, z0, Unconditional{})));
        for (LboMode m : {LboMode::Gradient, LboMode::Numerical, LboMode::Hybrid}) {
            const auto inv = lbo_invert_trajectory(model, sched, grid, z0, Unconditional{}, LboConfig::defaults(m));
            std::printf(" %14.3e", replay(inv.trajectory));
        }
        std::printf("\n");
    }
}
