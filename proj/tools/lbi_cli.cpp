#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lbi/benchmark.hpp"
#include "lbi/gradcheck.hpp"
#include "lbi/io.hpp"

namespace fs = std::filesystem;
using lbi::io::json;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = ".";
    std::string method;
    std::optional<int> steps;
    std::optional<double> guidance;
    std::optional<int> dt;
    bool no_ilb = false;
    std::string input;
    int index = 0;
};

void add_common(CLI::App* app, Common& o, bool with_method) {
    app->add_option("--config", o.config, "RunConfig JSON file");
    app->add_option("--seed", o.seed, "override the master seed");
    app->add_option("--out", o.out, "output directory")->capture_default_str();
    app->add_option("--steps", o.steps, "number of sampling steps S");
    app->add_option("--guidance", o.guidance, "classifier-free guidance scale");
    app->add_option("--dt", o.dt, "ILB skip distance");
    app->add_option("--input", o.input, "input file");
    app->add_option("--index", o.index, "instance index")->capture_default_str();
    if (with_method) {
        app->add_option("--method", o.method, "ddim | lbo-g | lbo-n | lbo-h, optional +ilb suffix");
        app->add_flag("--no-ilb", o.no_ilb, "drop the ILB stage");
    }
}

std::string strip_ilb(std::string m) {
    const std::string suffix = "+ilb";
    if (m.size() > suffix.size() && m.compare(m.size() - suffix.size(), suffix.size(), suffix) == 0)
        m.resize(m.size() - suffix.size());
    return m;
}

lbi::RunConfig load_config(const Common& o) {
    lbi::RunConfig c = o.config.empty() ? lbi::RunConfig{} : lbi::run_config_from_json(lbi::io::read_json(o.config));
    if (o.seed) c.seed = *o.seed;
    if (o.steps) c.steps = *o.steps;
    if (o.guidance) c.guidance = *o.guidance;
    if (o.dt) c.ilb.dt = *o.dt;
    if (!o.method.empty()) c.methods = {o.method};
    if (o.no_ilb) {
        std::vector<std::string> kept;
        for (const auto& m : c.methods) {
            const std::string base = strip_ilb(m);
            if (std::find(kept.begin(), kept.end(), base) == kept.end()) kept.push_back(base);
        }
        c.methods = kept;
    }
    return c;
}

fs::path out_dir(const Common& o) {
    const fs::path dir(o.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw lbi::Error(lbi::ErrorCode::Io, "cannot create output directory: " + ec.message(), o.out);
    return dir;
}

void emit(const json& j) { std::cout << j.dump(2) << "\n"; }

const lbi::Image& instance(const lbi::Backends& b, const Common& o) {
    if (o.index < 0 || o.index >= static_cast<int>(b.instances.size()))
        throw lbi::Error(lbi::ErrorCode::Bounds, "--index outside the instance range", "index");
    return b.instances[static_cast<std::size_t>(o.index)];
}

lbi::MethodSpec single_method(const lbi::RunConfig& c) {
    if (c.methods.size() != 1)
        throw lbi::Error(lbi::ErrorCode::Config, "exactly one method is required (use --method)", "method");
    return lbi::parse_method(c.methods.front());
}

/// Training images from --input (a dataset file) or from the configured generator.
std::pair<std::vector<lbi::Image>, std::vector<int>> training_data(const lbi::RunConfig& c, const Common& o) {
    std::vector<lbi::Image> images;
    std::vector<int> labels;
    if (!o.input.empty()) {
        const json j = lbi::io::read_json(o.input);
        if (j.value("kind", "") == "gauss2d") {
            const lbi::PointSet p = lbi::io::points_from_json(j);
            for (const auto& x : p.points) images.emplace_back(lbi::ImageShape{1, static_cast<int>(x.size()), 1}, x);
            labels = p.labels;
        } else {
            images = lbi::io::images_from_json(j);
        }
    } else if (c.data_kind == lbi::DataKind::Shapes) {
        images = lbi::gen_shapes(c.train_count, lbi::hash_combine(c.seed, lbi::kTrainStream), c.data);
    } else {
        const lbi::PointSet p = lbi::gen_gauss2d(c.train_count, lbi::hash_combine(c.seed, lbi::kTrainStream), c.data);
        for (const auto& x : p.points) images.emplace_back(lbi::ImageShape{1, c.data.dim, 1}, x);
        labels = p.labels;
    }
    if (images.empty()) throw lbi::Error(lbi::ErrorCode::InvalidInput, "training set is empty", "training_data");
    return {std::move(images), std::move(labels)};
}

std::unique_ptr<lbi::Autoencoder> make_autoencoder(const lbi::RunConfig& c, std::span<const lbi::Image> train) {
    const std::string kind = c.resolved_autoencoder();
    const lbi::ImageShape shape = train.front().shape;
    if (kind == "identity") return std::make_unique<lbi::IdentityAutoencoder>(shape);
    if (kind == "linear")
        return std::make_unique<lbi::LinearAutoencoder>(lbi::fit_linear_autoencoder(train, c.latent_dim, c.ridge).ae);
    if (kind == "tiny-conv") return std::make_unique<lbi::TinyConvAutoencoder>(shape, c.autoencoder_seed);
    return lbi::io::autoencoder_from(lbi::io::load_model(c.autoencoder_path));
}

// ---------------------------------------------------------------- subcommands

struct GenDataOpts {
    std::string kind;
    int n = 100;
    lbi::DataParams params;
};

void cmd_gen_data(const Common& o, const GenDataOpts& g) {
    const lbi::DataKind kind = lbi::parse_data_kind(g.kind);
    const std::uint64_t seed = o.seed.value_or(0);
    const json j = kind == lbi::DataKind::Gauss2d ? lbi::io::dataset_json(lbi::gen_gauss2d(g.n, seed, g.params), seed)
                                                  : lbi::io::dataset_json(lbi::gen_shapes(g.n, seed, g.params), seed);
    const fs::path path = out_dir(o) / "dataset.json";
    lbi::io::write_json(path.string(), j);
    emit({{"dataset", path.string()}, {"kind", g.kind}, {"n", g.n}});
}

void cmd_train_autoencoder(const Common& o) {
    const lbi::RunConfig c = load_config(o);
    const auto [images, labels] = training_data(c, o);
    const auto ae = make_autoencoder(c, images);
    double psnr_sum = 0.0;
    for (const auto& x : images) psnr_sum += lbi::psnr(x, ae->decode(ae->encode(x)));
    const fs::path path = out_dir(o) / "autoencoder.bin";
    lbi::io::save_model(path.string(), lbi::io::to_model_file(*ae));
    emit({{"model", path.string()},
          {"kind", ae->kind()},
          {"latent_dim", ae->latent_dim()},
          {"train_mean_psnr_db", lbi::detail::number_json(psnr_sum / static_cast<double>(images.size()))}});
}

void cmd_train_denoiser(const Common& o) {
    const lbi::RunConfig c = load_config(o);
    const auto [images, labels] = training_data(c, o);
    const auto ae = make_autoencoder(c, images);
    std::vector<lbi::Latent> latents;
    for (const auto& x : images) latents.push_back(ae->encode(x));
    const lbi::NoiseSchedule sched = lbi::make_linear_schedule(c.t_train, c.beta_start, c.beta_end);
    const fs::path path = out_dir(o) / "denoiser.bin";
    json report = {{"model", path.string()}, {"latent_dim", ae->latent_dim()}};
    if (c.denoiser == "mlp") {
        lbi::MlpTrainConfig mc = c.mlp;
        mc.seed = lbi::hash_combine(c.seed, lbi::kMlpStream);
        const auto trained =
            lbi::train_mlp_denoiser(latents, c.conditional ? labels : std::vector<int>{}, sched, mc);
        lbi::io::save_model(path.string(), lbi::io::to_model_file(trained.model));
        report["kind"] = "mlp";
        report["epochs_run"] = trained.report.epochs_run;
        report["final_train_loss"] = trained.report.final_train_loss;
        report["heldout_loss"] = trained.report.heldout_loss;
        report["reached_target"] = trained.report.reached_target;
    } else if (c.denoiser == "analytic") {
        const auto d = lbi::fit_analytic_denoiser(latents, sched, c.analytic_jitter);
        lbi::io::save_model(path.string(), lbi::io::to_model_file(d));
        report["kind"] = "linear_gaussian";
    } else {
        throw lbi::Error(lbi::ErrorCode::Config, "train-denoiser needs the analytic or mlp backend", "denoiser");
    }
    emit(report);
}

struct SampleOpts {
    int n = 8;
    std::optional<int> label;
};

void cmd_sample(const Common& o, const SampleOpts& s) {
    const lbi::RunConfig c = load_config(o);
    const lbi::Backends b = lbi::build_backends(c);
    const lbi::Condition cond = s.label ? lbi::Condition{lbi::ClassLabel{*s.label}} : lbi::Condition{lbi::Unconditional{}};
    json samples = json::array();
    for (int i = 0; i < s.n; ++i) {
        const lbi::Latent z_T = lbi::Rng(lbi::hash_combine(c.seed, static_cast<std::uint64_t>(i))).normal_vector(
            b.model->latent_dim());
        const lbi::Trajectory tr = lbi::generate_trajectory(*b.model, b.schedule, b.grid, z_T, cond, c.guidance);
        samples.push_back({{"z_T", lbi::io::to_json(z_T)},
                           {"z0", lbi::io::to_json(tr.back())},
                           {"decoded", lbi::io::to_json(b.ae->decode(tr.back()).pixels)}});
    }
    const fs::path path = out_dir(o) / "samples.json";
    lbi::io::write_json(path.string(),
                        {{"shape", lbi::io::shape_json(b.ae->image_shape())},
                         {"guidance", c.guidance},
                         {"condition", lbi::io::condition_json(cond)},
                         {"samples", samples}});
    emit({{"samples", path.string()}, {"n", s.n}});
}

void cmd_invert(const Common& o) {
    lbi::RunConfig c = load_config(o);
    if (o.method.empty()) c.methods = {"lbo-n"};
    const lbi::MethodSpec m = single_method(c);
    if (m.ilb) throw lbi::Error(lbi::ErrorCode::Config, "invert takes a latent; use roundtrip for ILB", "method");
    const lbi::Backends b = lbi::build_backends(c);
    lbi::Latent z0;
    lbi::Condition cond = b.conditions.at(0);
    if (!o.input.empty()) {
        const json j = lbi::io::read_json(o.input);
        z0 = lbi::io::vector_from_json(j.is_object() ? j.at("z") : j, "latent");
        if (j.is_object() && j.contains("condition")) cond = lbi::io::condition_from_json(j["condition"]);
    } else {
        z0 = b.ae->encode(instance(b, o));
        cond = b.conditions[static_cast<std::size_t>(o.index)];
    }
    lbi::detail::require_dim(z0.size(), b.model->latent_dim(), "input latent");
    const fs::path dir = out_dir(o);
    json reports = json::array();
    lbi::Trajectory tr;
    if (m.lbo) {
        lbi::LboTrajectory inv = lbi::lbo_invert_trajectory(*b.model, b.schedule, b.grid, z0, cond, c.lbo_config(*m.lbo));
        tr = std::move(inv.trajectory);
        reports = lbi::io::lbo_reports_json(inv.reports);
    } else {
        tr = lbi::ddim_invert_trajectory(*b.model, b.schedule, b.grid, z0, cond, c.guidance);
    }
    lbi::io::write_json((dir / "trajectory.json").string(), lbi::io::trajectory_json(tr));
    lbi::io::write_json((dir / "step_reports.json").string(), reports);
    emit({{"method", m.name},
          {"trajectory", (dir / "trajectory.json").string()},
          {"step_reports", (dir / "step_reports.json").string()},
          {"z_T_norm", tr.back().norm()}});
}

void cmd_ilb(const Common& o) {
    const lbi::RunConfig c = load_config(o);
    const lbi::Backends b = lbi::build_backends(c);
    const lbi::Image& x = instance(b, o);
    const lbi::IlbResult r = lbi::ilb_optimize(x, *b.ae, *b.model, b.schedule, b.perceptual.get(), c.ilb_config(),
                                               b.conditions[static_cast<std::size_t>(o.index)]);
    const fs::path dir = out_dir(o);
    const double before = lbi::psnr(x, b.ae->decode(b.ae->encode(x)));
    const double after = lbi::psnr(x, b.ae->decode(r.z0));
    json report = lbi::io::ilb_report_json(r.report);
    report["psnr_encode_db"] = lbi::detail::number_json(before);
    report["psnr_ilb_db"] = lbi::detail::number_json(after);
    lbi::io::write_json((dir / "ilb_report.json").string(), report);
    lbi::io::write_file((dir / "ilb_trace.csv").string(), lbi::io::ilb_trace_csv(r.report));
    lbi::io::write_json((dir / "ilb_latent.json").string(), {{"z", lbi::io::to_json(r.z0)}});
    emit(report);
}

json roundtrip_json(const lbi::Backends& b, const lbi::RunConfig& c, const lbi::MethodSpec& m, int index) {
    const lbi::Image& x = b.instances.at(static_cast<std::size_t>(index));
    const lbi::RoundTrip r = lbi::run_roundtrip(b, c, m, x, b.conditions[static_cast<std::size_t>(index)]);
    const lbi::MetricReport q = lbi::image_metrics(x, r.reconstruction, b.perceptual.get());
    json div = json::array();
    for (double v : lbi::trajectory_divergence(r.inversion, r.generation)) div.push_back(v);
    json j = {{"method", m.name},
              {"instance_id", index},
              {"roundtrip_l2_rel", lbi::relative_l2(r.generation.back(), r.z0)},
              {"psnr_db", lbi::detail::number_json(q.psnr_db)},
              {"ssim", q.ssim},
              {"perceptual", lbi::detail::number_json(q.perceptual)},
              {"divergence", div},
              {"lbo_reports", lbi::io::lbo_reports_json(r.lbo_reports)}};
    if (r.ilb) j["ilb"] = lbi::io::ilb_report_json(*r.ilb);
    return j;
}

void cmd_roundtrip(const Common& o) {
    const lbi::RunConfig c = load_config(o);
    const lbi::MethodSpec m = single_method(c);
    const lbi::Backends b = lbi::build_backends(c);
    instance(b, o);
    const json j = roundtrip_json(b, c, m, o.index);
    lbi::io::write_json((out_dir(o) / "roundtrip.json").string(), j);
    emit({{"method", j["method"]}, {"roundtrip_l2_rel", j["roundtrip_l2_rel"]}, {"psnr_db", j["psnr_db"]}});
}

struct GradcheckOpts {
    int probes = 20;
    double tol = 1e-4;
};

int cmd_gradcheck(const Common& o, const GradcheckOpts& g) {
    const lbi::RunConfig c = load_config(o);
    const lbi::Backends b = lbi::build_backends(c);
    lbi::GradcheckOptions opt;
    opt.probes = g.probes;
    opt.seed = c.seed;
    opt.guidance = c.guidance;
    opt.dt = c.ilb.dt;
    opt.weights = c.ilb.weights;
    if (const auto* mlp = dynamic_cast<const lbi::MlpDenoiser*>(b.model.get())) opt.n_classes = mlp->shape().n_classes;
    const lbi::GradcheckReport rep = lbi::run_gradchecks(*b.model, b.schedule, *b.ae, b.perceptual.get(), b.instances, opt);
    json checks = json::object();
    for (const auto& e : rep.entries) checks[e.name] = {{"probes", e.probes}, {"redrawn", e.rejected}, {"max_rel_error", e.max_rel_error}};
    const bool pass = rep.max_rel_error() <= g.tol;
    const json j = {{"denoiser", b.model->kind()},
                    {"checks", checks},
                    {"max_rel_error", rep.max_rel_error()},
                    {"tolerance", g.tol},
                    {"pass", pass}};
    lbi::io::write_json((out_dir(o) / "gradcheck.json").string(), j);
    emit(j);
    return pass ? 0 : 3;
}

void cmd_report_plot_data(const Common& o) {
    const lbi::RunConfig c = load_config(o);
    const lbi::Backends b = lbi::build_backends(c);
    instance(b, o);
    std::string div_csv = lbi::io::csv_row({"method", "t", "divergence"});
    std::string iter_csv = lbi::io::csv_row({"method", "t", "iters", "residual", "converged"});
    std::string ilb_csv = lbi::io::csv_row({"method", "iter", "l_con", "l_reg", "total"});
    for (const auto& name : c.methods) {
        const lbi::MethodSpec m = lbi::parse_method(name);
        const lbi::Image& x = b.instances[static_cast<std::size_t>(o.index)];
        const lbi::RoundTrip r = lbi::run_roundtrip(b, c, m, x, b.conditions[static_cast<std::size_t>(o.index)]);
        const std::vector<double> div = lbi::trajectory_divergence(r.inversion, r.generation);
        const auto steps = r.inversion.grid.steps();
        for (std::size_t i = 0; i < div.size(); ++i) {
            const int t = i == 0 ? 0 : steps[i - 1];
            div_csv += lbi::io::csv_row({name, std::to_string(t), lbi::io::format_number(div[i])});
        }
        for (const auto& s : r.lbo_reports)
            iter_csv += lbi::io::csv_row({name, std::to_string(s.t), std::to_string(s.iters_used),
                                          lbi::io::format_number(s.final_residual), s.converged ? "1" : "0"});
        if (r.ilb)
            for (const auto& p : r.ilb->trace)
                ilb_csv += lbi::io::csv_row({name, std::to_string(p.iter), lbi::io::format_number(p.l_con),
                                             lbi::io::format_number(p.l_reg), lbi::io::format_number(p.total)});
    }
    const fs::path dir = out_dir(o);
    lbi::io::write_file((dir / "divergence.csv").string(), div_csv);
    lbi::io::write_file((dir / "lbo_iterations.csv").string(), iter_csv);
    lbi::io::write_file((dir / "ilb_traces.csv").string(), ilb_csv);
    emit({{"divergence", (dir / "divergence.csv").string()},
          {"lbo_iterations", (dir / "lbo_iterations.csv").string()},
          {"ilb_traces", (dir / "ilb_traces.csv").string()}});
}

void cmd_benchmark(const Common& o) {
    const lbi::RunConfig c = load_config(o);
    const lbi::BenchmarkResult r = lbi::run_benchmark(c);
    const fs::path dir = out_dir(o);
    lbi::io::write_file((dir / "results.csv").string(), lbi::rows_to_csv(r.rows, c.record_wall_time));
    lbi::io::write_json((dir / "summary.json").string(), r.summary);
    emit({{"results", (dir / "results.csv").string()},
          {"summary", (dir / "summary.json").string()},
          {"methods", r.summary["methods"]}});
}

int fail(const std::string& code, const std::string& message, const std::string& context, int status) {
    std::cerr << json{{"code", code}, {"message", message}, {"context", context}}.dump() << "\n";
    return status;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Latent bias inversion toolkit"};
    app.require_subcommand(1);

    Common o;
    GenDataOpts gen;
    SampleOpts samp;
    GradcheckOpts gc;

    auto* gen_cmd = app.add_subcommand("gen-data", "generate a seeded dataset file");
    add_common(gen_cmd, o, false);
    gen_cmd->add_option("--kind", gen.kind, "gauss2d | shapes")->required();
    gen_cmd->add_option("-n,--n", gen.n, "number of samples")->capture_default_str();
    gen_cmd->add_option("--dim", gen.params.dim, "gauss2d dimension")->capture_default_str();
    gen_cmd->add_option("--components", gen.params.components, "gauss2d mixture components")->capture_default_str();
    gen_cmd->add_option("--height", gen.params.height, "image height")->capture_default_str();
    gen_cmd->add_option("--width", gen.params.width, "image width")->capture_default_str();

    auto* tae = app.add_subcommand("train-autoencoder", "fit and store the configured autoencoder");
    add_common(tae, o, false);
    auto* tden = app.add_subcommand("train-denoiser", "train or fit the configured denoiser and store it");
    add_common(tden, o, false);
    auto* sample = app.add_subcommand("sample", "generate latents from seeded noise");
    add_common(sample, o, false);
    sample->add_option("-n,--n", samp.n, "number of samples")->capture_default_str();
    sample->add_option("--label", samp.label, "class label condition");
    auto* inv = app.add_subcommand("invert", "invert a latent and write its trajectory and step reports");
    add_common(inv, o, true);
    auto* ilb = app.add_subcommand("ilb", "optimize the starting latent of one instance");
    add_common(ilb, o, false);
    auto* rt = app.add_subcommand("roundtrip", "invert, regenerate and score one instance");
    add_common(rt, o, true);
    auto* grad = app.add_subcommand("gradcheck", "compare assembled gradients with finite differences");
    add_common(grad, o, false);
    grad->add_option("--probes", gc.probes, "probes per check")->capture_default_str();
    grad->add_option("--tol", gc.tol, "maximum relative error")->capture_default_str();
    auto* plot = app.add_subcommand("report-plot-data", "write plot-ready CSVs for one instance");
    add_common(plot, o, true);
    auto* bench = app.add_subcommand("benchmark", "run every configured method on every instance");
    add_common(bench, o, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("usage", e.what(), e.get_name(), 2);
    }

    try {
        if (*gen_cmd) cmd_gen_data(o, gen);
        else if (*tae) cmd_train_autoencoder(o);
        else if (*tden) cmd_train_denoiser(o);
        else if (*sample) cmd_sample(o, samp);
        else if (*inv) cmd_invert(o);
        else if (*ilb) cmd_ilb(o);
        else if (*rt) cmd_roundtrip(o);
        else if (*grad) return cmd_gradcheck(o, gc);
        else if (*plot) cmd_report_plot_data(o);
        else if (*bench) cmd_benchmark(o);
    } catch (const lbi::Error& e) {
        return fail(std::string(lbi::to_string(e.code())), e.what(), e.context(), 1);
    } catch (const json::exception& e) {
        return fail("format", e.what(), "json", 1);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), "", 1);
    }
    return 0;
}
