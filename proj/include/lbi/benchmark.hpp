#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "lbi/autoencoder.hpp"
#include "lbi/data.hpp"
#include "lbi/denoiser.hpp"
#include "lbi/dynamics.hpp"
#include "lbi/error.hpp"
#include "lbi/ilb.hpp"
#include "lbi/io.hpp"
#include "lbi/lbo.hpp"
#include "lbi/metrics.hpp"
#include "lbi/schedule.hpp"

namespace lbi {

// ---------------------------------------------------------------- methods

struct MethodSpec {
    std::string name;           // as written, e.g. "lbo-n+ilb"
    std::optional<LboMode> lbo; // empty for plain DDIM inversion
    bool ilb = false;
};

inline MethodSpec parse_method(const std::string& s) {
    MethodSpec m{s, std::nullopt, false};
    std::string base = s;
    const std::string suffix = "+ilb";
    if (base.size() > suffix.size() && base.compare(base.size() - suffix.size(), suffix.size(), suffix) == 0) {
        m.ilb = true;
        base.resize(base.size() - suffix.size());
    }
    if (base == "ddim") return m;
    if (base == "lbo-g") m.lbo = LboMode::Gradient;
    else if (base == "lbo-n") m.lbo = LboMode::Numerical;
    else if (base == "lbo-h") m.lbo = LboMode::Hybrid;
    else throw Error(ErrorCode::Config, "unknown method '" + s + "'", "methods");
    return m;
}

// ---------------------------------------------------------------- configuration

struct RunConfig {
    std::uint64_t seed = 0;
    int t_train = 100;
    double beta_start = 1e-4;
    double beta_end = 0.05;
    int steps = 50;
    double guidance = 1.0;
    bool conditional = false;
    int threads = 1;
    bool record_wall_time = false;
    std::vector<std::string> methods = {"ddim",     "lbo-g",     "lbo-n",     "lbo-h",
                                        "ddim+ilb", "lbo-g+ilb", "lbo-n+ilb", "lbo-h+ilb"};

    DataKind data_kind = DataKind::Shapes;
    int count = 20;
    int train_count = 200;
    DataParams data;

    std::string denoiser = "analytic";  // analytic | mlp | file
    std::string denoiser_path;
    double analytic_jitter = 1e-3;
    MlpTrainConfig mlp;

    std::string autoencoder = "auto";  // auto | identity | linear | tiny-conv | file
    std::string autoencoder_path;
    int latent_dim = 64;
    double ridge = 0.2;
    std::uint64_t autoencoder_seed = 7;

    std::string perceptual = "random-conv";  // random-conv | none
    std::uint64_t perceptual_seed = 1234;

    std::optional<int> lbo_max_iters;  // per-mode default when empty
    double lbo_tol = 1e-8;
    double lbo_lr = 1e-3;
    int lbo_n_g = 5;

    IlbConfig ilb;

    LboConfig lbo_config(LboMode mode) const {
        LboConfig c = LboConfig::defaults(mode);
        if (lbo_max_iters) c.max_iters = *lbo_max_iters;
        c.tol = lbo_tol;
        c.lr = lbo_lr;
        c.n_g = lbo_n_g;
        c.guidance_w = guidance;
        return c;
    }

    IlbConfig ilb_config() const {
        IlbConfig c = ilb;
        c.guidance_w = guidance;
        return c;
    }

    std::string resolved_autoencoder() const {
        if (autoencoder != "auto") return autoencoder;
        return data_kind == DataKind::Shapes ? "linear" : "identity";
    }
};

namespace detail {

inline void check_keys(const io::json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw Error(ErrorCode::Config, where + " must be an object", where);
    for (const auto& [k, v] : j.items())
        if (!allowed.count(k)) throw Error(ErrorCode::Config, "unknown key '" + k + "' in " + where, where);
}

template <class T>
void take(const io::json& j, const char* key, T& dst, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const io::json::exception&) {
        throw Error(ErrorCode::Config, std::string("bad value for '") + key + "' in " + where, where);
    }
}

inline io::json number_json(double v) {
    if (std::isfinite(v)) return v;
    return io::format_number(v);
}

} // namespace detail

inline io::json to_json(const RunConfig& c) {
    return {
        {"seed", c.seed},
        {"schedule", {{"t_train", c.t_train}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}}},
        {"steps", c.steps},
        {"guidance", c.guidance},
        {"conditional", c.conditional},
        {"threads", c.threads},
        {"record_wall_time", c.record_wall_time},
        {"methods", c.methods},
        {"data",
         {{"kind", std::string(to_string(c.data_kind))},
          {"count", c.count},
          {"train_count", c.train_count},
          {"dim", c.data.dim},
          {"components", c.data.components},
          {"radius", c.data.radius},
          {"spread", c.data.spread},
          {"height", c.data.height},
          {"width", c.data.width},
          {"max_shapes", c.data.max_shapes}}},
        {"denoiser",
         {{"backend", c.denoiser},
          {"path", c.denoiser_path},
          {"jitter", c.analytic_jitter},
          {"hidden", c.mlp.hidden},
          {"batch", c.mlp.batch},
          {"steps_per_epoch", c.mlp.steps_per_epoch},
          {"epochs", c.mlp.max_epochs},
          {"lr", c.mlp.lr},
          {"target_loss", c.mlp.target_loss},
          {"label_dropout", c.mlp.label_dropout}}},
        {"autoencoder",
         {{"backend", c.autoencoder},
          {"path", c.autoencoder_path},
          {"latent_dim", c.latent_dim},
          {"ridge", c.ridge},
          {"seed", c.autoencoder_seed}}},
        {"perceptual", {{"backend", c.perceptual}, {"seed", c.perceptual_seed}}},
        {"lbo",
         {{"max_iters", c.lbo_max_iters ? io::json(*c.lbo_max_iters) : io::json(nullptr)},
          {"tol", c.lbo_tol},
          {"lr", c.lbo_lr},
          {"n_g", c.lbo_n_g}}},
        {"ilb",
         {{"lr", c.ilb.lr},
          {"max_iters", c.ilb.max_iters},
          {"rel_tol", c.ilb.rel_tol},
          {"patience", c.ilb.patience},
          {"dt", c.ilb.dt},
          {"use_reg", c.ilb.use_reg},
          {"w_l1", c.ilb.weights.l1},
          {"w_ssim", c.ilb.weights.ssim},
          {"w_perceptual", c.ilb.weights.perceptual}}},
    };
}

/// Overlays `j` on the defaults. Unknown keys and ill-typed values are errors.
inline RunConfig run_config_from_json(const io::json& j) {
    using detail::take;
    RunConfig c;
    detail::check_keys(j,
                       {"seed", "schedule", "steps", "guidance", "conditional", "threads", "record_wall_time",
                        "methods", "data", "denoiser", "autoencoder", "perceptual", "lbo", "ilb"},
                       "config");
    take(j, "seed", c.seed, "config");
    take(j, "steps", c.steps, "config");
    take(j, "guidance", c.guidance, "config");
    take(j, "conditional", c.conditional, "config");
    take(j, "threads", c.threads, "config");
    take(j, "record_wall_time", c.record_wall_time, "config");
    take(j, "methods", c.methods, "config");
    if (j.contains("schedule")) {
        const auto& s = j["schedule"];
        detail::check_keys(s, {"t_train", "beta_start", "beta_end"}, "schedule");
        take(s, "t_train", c.t_train, "schedule");
        take(s, "beta_start", c.beta_start, "schedule");
        take(s, "beta_end", c.beta_end, "schedule");
    }
    if (j.contains("data")) {
        const auto& d = j["data"];
        detail::check_keys(d,
                           {"kind", "count", "train_count", "dim", "components", "radius", "spread", "height", "width",
                            "max_shapes"},
                           "data");
        std::string kind(to_string(c.data_kind));
        take(d, "kind", kind, "data");
        try {
            c.data_kind = parse_data_kind(kind);
        } catch (const Error& e) {
            throw Error(ErrorCode::Config, e.what(), "data");
        }
        take(d, "count", c.count, "data");
        take(d, "train_count", c.train_count, "data");
        take(d, "dim", c.data.dim, "data");
        take(d, "components", c.data.components, "data");
        take(d, "radius", c.data.radius, "data");
        take(d, "spread", c.data.spread, "data");
        take(d, "height", c.data.height, "data");
        take(d, "width", c.data.width, "data");
        take(d, "max_shapes", c.data.max_shapes, "data");
    }
    if (j.contains("denoiser")) {
        const auto& d = j["denoiser"];
        detail::check_keys(d,
                           {"backend", "path", "jitter", "hidden", "batch", "steps_per_epoch", "epochs", "lr",
                            "target_loss", "label_dropout"},
                           "denoiser");
        take(d, "backend", c.denoiser, "denoiser");
        take(d, "path", c.denoiser_path, "denoiser");
        take(d, "jitter", c.analytic_jitter, "denoiser");
        take(d, "hidden", c.mlp.hidden, "denoiser");
        take(d, "batch", c.mlp.batch, "denoiser");
        take(d, "steps_per_epoch", c.mlp.steps_per_epoch, "denoiser");
        take(d, "epochs", c.mlp.max_epochs, "denoiser");
        take(d, "lr", c.mlp.lr, "denoiser");
        take(d, "target_loss", c.mlp.target_loss, "denoiser");
        take(d, "label_dropout", c.mlp.label_dropout, "denoiser");
    }
    if (j.contains("autoencoder")) {
        const auto& a = j["autoencoder"];
        detail::check_keys(a, {"backend", "path", "latent_dim", "ridge", "seed"}, "autoencoder");
        take(a, "backend", c.autoencoder, "autoencoder");
        take(a, "path", c.autoencoder_path, "autoencoder");
        take(a, "latent_dim", c.latent_dim, "autoencoder");
        take(a, "ridge", c.ridge, "autoencoder");
        take(a, "seed", c.autoencoder_seed, "autoencoder");
    }
    if (j.contains("perceptual")) {
        const auto& p = j["perceptual"];
        detail::check_keys(p, {"backend", "seed"}, "perceptual");
        take(p, "backend", c.perceptual, "perceptual");
        take(p, "seed", c.perceptual_seed, "perceptual");
    }
    if (j.contains("lbo")) {
        const auto& l = j["lbo"];
        detail::check_keys(l, {"max_iters", "tol", "lr", "n_g"}, "lbo");
        if (l.contains("max_iters") && !l["max_iters"].is_null()) {
            int m = 0;
            take(l, "max_iters", m, "lbo");
            c.lbo_max_iters = m;
        }
        take(l, "tol", c.lbo_tol, "lbo");
        take(l, "lr", c.lbo_lr, "lbo");
        take(l, "n_g", c.lbo_n_g, "lbo");
    }
    if (j.contains("ilb")) {
        const auto& i = j["ilb"];
        detail::check_keys(i, {"lr", "max_iters", "rel_tol", "patience", "dt", "use_reg", "w_l1", "w_ssim", "w_perceptual"},
                           "ilb");
        take(i, "lr", c.ilb.lr, "ilb");
        take(i, "max_iters", c.ilb.max_iters, "ilb");
        take(i, "rel_tol", c.ilb.rel_tol, "ilb");
        take(i, "patience", c.ilb.patience, "ilb");
        take(i, "dt", c.ilb.dt, "ilb");
        take(i, "use_reg", c.ilb.use_reg, "ilb");
        take(i, "w_l1", c.ilb.weights.l1, "ilb");
        take(i, "w_ssim", c.ilb.weights.ssim, "ilb");
        take(i, "w_perceptual", c.ilb.weights.perceptual, "ilb");
    }
    return c;
}

inline void validate(const RunConfig& c) {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw Error(ErrorCode::Config, msg, "config");
    };
    need(!c.methods.empty(), "method list is empty");
    std::set<std::string> seen;
    for (const auto& m : c.methods) {
        parse_method(m);
        need(seen.insert(m).second, "method '" + m + "' listed twice");
    }
    need(c.t_train >= 1, "schedule.t_train must be >= 1");
    need(c.steps >= 1 && c.steps <= c.t_train, "steps must lie in [1, t_train]");
    need(std::isfinite(c.guidance), "guidance must be finite");
    need(c.threads >= 1, "threads must be >= 1");
    need(c.count >= 1 && c.train_count >= 2, "data.count must be >= 1 and data.train_count >= 2");
    need(c.denoiser == "analytic" || c.denoiser == "mlp" || c.denoiser == "file", "unknown denoiser backend");
    need(c.denoiser != "file" || !c.denoiser_path.empty(), "denoiser.path is required for the file backend");
    const std::string ae = c.resolved_autoencoder();
    need(ae == "identity" || ae == "linear" || ae == "tiny-conv" || ae == "file", "unknown autoencoder backend");
    need(ae != "file" || !c.autoencoder_path.empty(), "autoencoder.path is required for the file backend");
    need(c.data_kind == DataKind::Shapes || ae == "identity" || ae == "file",
         "gauss2d data needs the identity autoencoder");
    need(c.perceptual == "random-conv" || c.perceptual == "none", "unknown perceptual backend");
    need(!c.conditional || c.data_kind == DataKind::Gauss2d, "conditional runs need labelled gauss2d data");
    need(!c.conditional || c.denoiser != "analytic", "the analytic denoiser is unconditional");
    for (LboMode m : {LboMode::Gradient, LboMode::Numerical, LboMode::Hybrid}) {
        try {
            c.lbo_config(m).validate();
        } catch (const Error& e) {
            throw Error(ErrorCode::Config, e.what(), "lbo");
        }
    }
    const NoiseSchedule sched = make_linear_schedule(c.t_train, c.beta_start, c.beta_end);
    c.ilb_config().validate(sched);
    if (c.perceptual == "none")
        need(c.ilb.weights.perceptual == 0.0, "ilb.w_perceptual must be 0 without a perceptual backend");
}

// ---------------------------------------------------------------- backends

/// Everything a run needs besides the method: schedule, grid, models and the
/// evaluation instances. Point data becomes 1 x dim single-channel images seen
/// through an identity autoencoder, so one pipeline serves both data kinds.
struct Backends {
    NoiseSchedule schedule = default_schedule();
    TimestepGrid grid;
    std::unique_ptr<Denoiser> model;
    std::unique_ptr<Autoencoder> ae;
    std::unique_ptr<PerceptualMetric> perceptual;
    std::vector<Image> instances;
    std::vector<Condition> conditions;
    std::optional<MlpTrainReport> training;
};

inline constexpr std::uint64_t kTrainStream = 0x7472'6169'6e00'0001ull;
inline constexpr std::uint64_t kMlpStream = 0x6d6c'7000'0000'0002ull;

inline LinearGaussianDenoiser fit_analytic_denoiser(std::span<const Latent> latents, const NoiseSchedule& sched,
                                                    double jitter) {
    detail::require(latents.size() >= 2, ErrorCode::Fit, "need at least two latents", "fit_analytic_denoiser");
    const Eigen::Index d = latents[0].size();
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    for (const auto& z : latents) mu += z;
    mu /= static_cast<double>(latents.size());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto& z : latents) cov.noalias() += (z - mu) * (z - mu).transpose();
    cov /= static_cast<double>(latents.size() - 1);
    cov += jitter * Eigen::MatrixXd::Identity(d, d);
    return LinearGaussianDenoiser(std::move(mu), std::move(cov), sched);
}

inline Backends build_backends(const RunConfig& cfg) {
    validate(cfg);
    Backends b;
    b.schedule = make_linear_schedule(cfg.t_train, cfg.beta_start, cfg.beta_end);
    b.grid = make_uniform_grid(b.schedule, cfg.steps);

    const std::uint64_t train_seed = hash_combine(cfg.seed, kTrainStream);
    std::vector<Image> train_images;
    std::vector<int> train_labels;
    if (cfg.data_kind == DataKind::Shapes) {
        train_images = gen_shapes(cfg.train_count, train_seed, cfg.data);
        b.instances = gen_shapes(cfg.count, cfg.seed, cfg.data);
        b.conditions.assign(b.instances.size(), Unconditional{});
    } else {
        const ImageShape row{1, cfg.data.dim, 1};
        const PointSet train = gen_gauss2d(cfg.train_count, train_seed, cfg.data);
        for (const auto& p : train.points) train_images.emplace_back(row, p);
        train_labels = train.labels;
        const PointSet eval = gen_gauss2d(cfg.count, cfg.seed, cfg.data);
        for (std::size_t i = 0; i < eval.points.size(); ++i) {
            b.instances.emplace_back(row, eval.points[i]);
            b.conditions.push_back(cfg.conditional ? Condition{ClassLabel{eval.labels[i]}} : Condition{Unconditional{}});
        }
    }

    const ImageShape shape = b.instances.front().shape;
    const std::string ae = cfg.resolved_autoencoder();
    if (ae == "identity") b.ae = std::make_unique<IdentityAutoencoder>(shape);
    else if (ae == "linear")
        b.ae = std::make_unique<LinearAutoencoder>(fit_linear_autoencoder(train_images, cfg.latent_dim, cfg.ridge).ae);
    else if (ae == "tiny-conv") b.ae = std::make_unique<TinyConvAutoencoder>(shape, cfg.autoencoder_seed);
    else b.ae = io::autoencoder_from(io::load_model(cfg.autoencoder_path));
    detail::require(b.ae->image_shape() == shape, ErrorCode::Config, "autoencoder image shape does not match the data",
                    "autoencoder");

    std::vector<Latent> latents;
    latents.reserve(train_images.size());
    for (const auto& x : train_images) latents.push_back(b.ae->encode(x));

    if (cfg.denoiser == "analytic") {
        b.model = std::make_unique<LinearGaussianDenoiser>(fit_analytic_denoiser(latents, b.schedule, cfg.analytic_jitter));
    } else if (cfg.denoiser == "mlp") {
        MlpTrainConfig mc = cfg.mlp;
        mc.seed = hash_combine(cfg.seed, kMlpStream);
        const std::vector<int> labels = cfg.conditional ? train_labels : std::vector<int>{};
        TrainedMlp trained = train_mlp_denoiser(latents, labels, b.schedule, mc);
        b.training = trained.report;
        b.model = std::make_unique<MlpDenoiser>(std::move(trained.model));
    } else {
        io::LoadedDenoiser loaded = io::denoiser_from(io::load_model(cfg.denoiser_path));
        detail::require(loaded.schedule.t_train() == cfg.t_train, ErrorCode::Config,
                        "stored denoiser was trained with a different T_train", "denoiser");
        b.schedule = loaded.schedule;
        b.grid = make_uniform_grid(b.schedule, cfg.steps);
        b.model = std::move(loaded.model);
    }
    detail::require(b.model->latent_dim() == b.ae->latent_dim(), ErrorCode::Config,
                    "denoiser and autoencoder latent sizes differ", "backends");

    if (cfg.perceptual == "random-conv")
        b.perceptual = std::make_unique<RandomConvPerceptual>(shape.channels, cfg.perceptual_seed);
    return b;
}

// ---------------------------------------------------------------- one instance

struct BenchmarkRow {
    std::string method;
    int instance_id = 0;
    double psnr_db = std::numeric_limits<double>::quiet_NaN();
    double ssim = std::numeric_limits<double>::quiet_NaN();
    double perceptual = std::numeric_limits<double>::quiet_NaN();
    double roundtrip_l2_rel = std::numeric_limits<double>::quiet_NaN();
    double mean_lbo_iters = 0.0;
    double wall_ms = 0.0;
    std::string error;  // "code: message" for a failed instance
};

struct RoundTrip {
    Latent z0;  // starting latent (E(x) or the ILB optimum)
    Trajectory inversion;
    Trajectory generation;
    std::vector<LboStepReport> lbo_reports;
    std::optional<IlbReport> ilb;
    Image reconstruction;
};

inline RoundTrip run_roundtrip(const Backends& b, const RunConfig& cfg, const MethodSpec& m, const Image& x,
                               const Condition& c) {
    RoundTrip r;
    if (m.ilb) {
        IlbResult res = ilb_optimize(x, *b.ae, *b.model, b.schedule, b.perceptual.get(), cfg.ilb_config(), c);
        r.z0 = std::move(res.z0);
        r.ilb = std::move(res.report);
    } else {
        r.z0 = b.ae->encode(x);
    }
    if (m.lbo) {
        LboTrajectory inv = lbo_invert_trajectory(*b.model, b.schedule, b.grid, r.z0, c, cfg.lbo_config(*m.lbo));
        r.inversion = std::move(inv.trajectory);
        r.lbo_reports = std::move(inv.reports);
    } else {
        r.inversion = ddim_invert_trajectory(*b.model, b.schedule, b.grid, r.z0, c, cfg.guidance);
    }
    r.generation = generate_trajectory(*b.model, b.schedule, b.grid, r.inversion.back(), c, cfg.guidance);
    r.reconstruction = b.ae->decode(r.generation.back());
    return r;
}

inline MetricReport image_metrics(const Image& x, const Image& y, const PerceptualMetric* perc) {
    MetricReport m;
    m.psnr_db = psnr(x, y);
    m.ssim = ssim(x, y);
    m.perceptual = perc ? perc->distance(x, y) : std::numeric_limits<double>::quiet_NaN();
    return m;
}

inline BenchmarkRow run_instance(const Backends& b, const RunConfig& cfg, const MethodSpec& m, int id) {
    BenchmarkRow row;
    row.method = m.name;
    row.instance_id = id;
    const auto start = std::chrono::steady_clock::now();
    try {
        const Image& x = b.instances.at(static_cast<std::size_t>(id));
        const RoundTrip r = run_roundtrip(b, cfg, m, x, b.conditions.at(static_cast<std::size_t>(id)));
        const MetricReport q = image_metrics(x, r.reconstruction, b.perceptual.get());
        row.psnr_db = q.psnr_db;
        row.ssim = q.ssim;
        row.perceptual = q.perceptual;
        row.roundtrip_l2_rel = relative_l2(r.generation.back(), r.z0);
        if (!r.lbo_reports.empty()) {
            double total = 0.0;
            for (const auto& s : r.lbo_reports) total += s.iters_used;
            row.mean_lbo_iters = total / static_cast<double>(r.lbo_reports.size());
        }
    } catch (const Error& e) {
        row.error = std::string(to_string(e.code())) + ": " + e.what();
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return row;
}

// ---------------------------------------------------------------- whole run

struct BenchmarkResult {
    std::vector<BenchmarkRow> rows;  // sorted by (instance_id, method)
    io::json summary;
};

inline io::json summarize(const RunConfig& cfg, const Backends& b, const std::vector<BenchmarkRow>& rows) {
    io::json methods = io::json::object();
    for (const auto& name : cfg.methods) {
        double psnr_sum = 0.0, ssim_sum = 0.0, perc_sum = 0.0, rt_sum = 0.0, iters_sum = 0.0;
        int ok = 0, failed = 0;
        for (const auto& r : rows) {
            if (r.method != name) continue;
            if (!r.error.empty()) {
                ++failed;
                continue;
            }
            ++ok;
            psnr_sum += r.psnr_db;
            ssim_sum += r.ssim;
            perc_sum += r.perceptual;
            rt_sum += r.roundtrip_l2_rel;
            iters_sum += r.mean_lbo_iters;
        }
        const double n = ok > 0 ? ok : std::numeric_limits<double>::quiet_NaN();
        methods[name] = {{"instances", ok},
                         {"errors", failed},
                         {"mean_psnr_db", detail::number_json(psnr_sum / n)},
                         {"mean_ssim", detail::number_json(ssim_sum / n)},
                         {"mean_perceptual", detail::number_json(perc_sum / n)},
                         {"mean_roundtrip_l2_rel", detail::number_json(rt_sum / n)},
                         {"mean_lbo_iters", detail::number_json(iters_sum / n)}};
    }
    double psnr_sum = 0.0, ssim_sum = 0.0, perc_sum = 0.0;
    for (const auto& x : b.instances) {
        const MetricReport q = image_metrics(x, b.ae->decode(b.ae->encode(x)), b.perceptual.get());
        psnr_sum += q.psnr_db;
        ssim_sum += q.ssim;
        perc_sum += q.perceptual;
    }
    const double n = static_cast<double>(b.instances.size());
    io::json out = {{"config", to_json(cfg)},
                    {"instances", b.instances.size()},
                    {"methods", methods},
                    {"autoencoder_upper_bound",
                     {{"mean_psnr_db", detail::number_json(psnr_sum / n)},
                      {"mean_ssim", detail::number_json(ssim_sum / n)},
                      {"mean_perceptual", detail::number_json(perc_sum / n)}}}};
    if (b.training) {
        out["denoiser_training"] = {{"epochs_run", b.training->epochs_run},
                                    {"final_train_loss", b.training->final_train_loss},
                                    {"heldout_loss", b.training->heldout_loss}};
    }
    return out;
}

inline BenchmarkResult run_benchmark(const RunConfig& cfg, const Backends& b) {
    std::vector<MethodSpec> specs;
    for (const auto& m : cfg.methods) specs.push_back(parse_method(m));
    const int n = static_cast<int>(b.instances.size());
    std::vector<BenchmarkRow> rows(static_cast<std::size_t>(n) * specs.size());

    std::atomic<int> next{0};
    auto worker = [&] {
        for (int id; (id = next.fetch_add(1)) < n;)
            for (std::size_t k = 0; k < specs.size(); ++k)
                rows[static_cast<std::size_t>(id) * specs.size() + k] = run_instance(b, cfg, specs[k], id);
    };
    const int threads = std::min(cfg.threads, n);
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::sort(rows.begin(), rows.end(), [](const BenchmarkRow& a, const BenchmarkRow& c) {
        return a.instance_id != c.instance_id ? a.instance_id < c.instance_id : a.method < c.method;
    });
    BenchmarkResult res{std::move(rows), {}};
    res.summary = summarize(cfg, b, res.rows);
    return res;
}

inline BenchmarkResult run_benchmark(const RunConfig& cfg) { return run_benchmark(cfg, build_backends(cfg)); }

/// wall_ms is left empty unless record_wall_time is set, keeping the file
/// byte-identical across runs with the same configuration.
inline std::string rows_to_csv(const std::vector<BenchmarkRow>& rows, bool with_wall_time) {
    std::string out = io::csv_row({"method", "instance_id", "psnr_db", "ssim", "perceptual", "roundtrip_l2_rel",
                                   "mean_lbo_iters", "wall_ms", "error"});
    for (const auto& r : rows) {
        out += io::csv_row({r.method, std::to_string(r.instance_id), io::format_number(r.psnr_db),
                            io::format_number(r.ssim), io::format_number(r.perceptual),
                            io::format_number(r.roundtrip_l2_rel), io::format_number(r.mean_lbo_iters),
                            with_wall_time ? io::format_number(r.wall_ms) : std::string(), r.error});
    }
    return out;
}

} // namespace lbi
