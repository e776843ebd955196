#include <cmath>
#include <string>

#include <gtest/gtest.h>

#include "lbi/benchmark.hpp"
#include "test_support.hpp"

namespace lbi {
namespace {

using io::json;

RunConfig small_shapes() {
    RunConfig c;
    c.count = 3;
    c.train_count = 40;
    c.steps = 10;
    c.data.height = 8;
    c.data.width = 8;
    c.latent_dim = 12;
    c.ilb.max_iters = 10;
    c.methods = {"ddim", "lbo-n", "lbo-h+ilb"};
    return c;
}

TEST(Methods, Parse) {
    EXPECT_FALSE(parse_method("ddim").lbo.has_value());
    EXPECT_FALSE(parse_method("ddim").ilb);
    EXPECT_EQ(*parse_method("lbo-g").lbo, LboMode::Gradient);
    const MethodSpec m = parse_method("lbo-h+ilb");
    EXPECT_EQ(*m.lbo, LboMode::Hybrid);
    EXPECT_TRUE(m.ilb);
    EXPECT_LBI_ERROR(parse_method("lbo-x"), ErrorCode::Config);
    EXPECT_LBI_ERROR(parse_method("+ilb"), ErrorCode::Config);
}

TEST(Config, DefaultsRoundTripThroughJson) {
    const RunConfig d;
    const json j = to_json(d);
    EXPECT_EQ(to_json(run_config_from_json(j)), j);
    EXPECT_EQ(to_json(run_config_from_json(json::object())), j);
    EXPECT_EQ(j["methods"].size(), 8u);
    EXPECT_TRUE(j["lbo"]["max_iters"].is_null());
}

TEST(Config, OverlayAndPerModeIterationCaps) {
    const RunConfig c =
        run_config_from_json(json::parse(R"({"seed": 9, "lbo": {"tol": 1e-6}, "data": {"kind": "gauss2d"}})"));
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(c.data_kind, DataKind::Gauss2d);
    EXPECT_EQ(c.resolved_autoencoder(), "identity");
    EXPECT_EQ(c.lbo_config(LboMode::Numerical).max_iters, 15);
    EXPECT_EQ(c.lbo_config(LboMode::Gradient).max_iters, 20);
    EXPECT_EQ(c.lbo_config(LboMode::Hybrid).tol, 1e-6);
    const RunConfig fixed = run_config_from_json(json::parse(R"({"lbo": {"max_iters": 7}})"));
    EXPECT_EQ(fixed.lbo_config(LboMode::Gradient).max_iters, 7);
}

TEST(Config, RejectsBadInput) {
    EXPECT_LBI_ERROR(run_config_from_json(json{{"sed", 1}}), ErrorCode::Config);
    EXPECT_LBI_ERROR(run_config_from_json(json{{"lbo", {{"tole", 1}}}}), ErrorCode::Config);
    EXPECT_LBI_ERROR(run_config_from_json(json{{"steps", "many"}}), ErrorCode::Config);
    EXPECT_LBI_ERROR(run_config_from_json(json{{"data", {{"kind", "faces"}}}}), ErrorCode::Config);
    RunConfig c;
    c.methods = {};
    EXPECT_LBI_ERROR(validate(c), ErrorCode::Config);
    c.methods = {"ddim", "ddim"};
    EXPECT_LBI_ERROR(validate(c), ErrorCode::Config);
    c = RunConfig{};
    c.steps = 101;
    EXPECT_LBI_ERROR(validate(c), ErrorCode::Config);
    c = RunConfig{};
    c.lbo_max_iters = 2;  // below n_g for hybrid
    EXPECT_LBI_ERROR(validate(c), ErrorCode::Config);
    c = RunConfig{};
    c.perceptual = "none";
    EXPECT_LBI_ERROR(validate(c), ErrorCode::Config);
    c.ilb.weights.perceptual = 0.0;
    EXPECT_NO_THROW(validate(c));
    c = RunConfig{};
    c.conditional = true;
    EXPECT_LBI_ERROR(validate(c), ErrorCode::Config);
    c = RunConfig{};
    c.data_kind = DataKind::Gauss2d;
    c.autoencoder = "linear";
    EXPECT_LBI_ERROR(validate(c), ErrorCode::Config);
}

TEST(AnalyticDenoiser, MatchesSampleMoments) {
    const std::vector<Latent> pts = {Latent{{1.0, 0.0}}, Latent{{3.0, 2.0}}, Latent{{0.0, 1.0}}};
    const auto d = fit_analytic_denoiser(pts, default_schedule(), 0.5);
    EXPECT_NEAR(d.mu()[0], 4.0 / 3.0, 1e-15);
    EXPECT_NEAR(d.mu()[1], 1.0, 1e-15);
    EXPECT_NEAR(d.sigma()(0, 1), 1.0, 1e-14);
    EXPECT_NEAR(d.sigma()(1, 1), 1.0 + 0.5, 1e-14);
    EXPECT_LBI_ERROR(fit_analytic_denoiser(std::vector<Latent>{Latent::Zero(2)}, default_schedule(), 0.0),
                     ErrorCode::Fit);
}

TEST(Benchmark, RowsAreSortedCompleteAndFinite) {
    const RunConfig cfg = small_shapes();
    const BenchmarkResult r = run_benchmark(cfg);
    ASSERT_EQ(r.rows.size(), 9u);
    for (std::size_t i = 0; i < r.rows.size(); ++i) {
        const BenchmarkRow& row = r.rows[i];
        EXPECT_EQ(row.instance_id, static_cast<int>(i / 3));
        EXPECT_TRUE(row.error.empty()) << row.error;
        EXPECT_TRUE(std::isfinite(row.psnr_db) || row.psnr_db == INFINITY);
        EXPECT_TRUE(std::isfinite(row.ssim));
        EXPECT_TRUE(std::isfinite(row.perceptual));
        EXPECT_TRUE(std::isfinite(row.roundtrip_l2_rel));
    }
    EXPECT_EQ(r.rows[0].method, "ddim");
    EXPECT_EQ(r.rows[1].method, "lbo-h+ilb");
    EXPECT_EQ(r.rows[2].method, "lbo-n");
    EXPECT_EQ(r.rows[0].mean_lbo_iters, 0.0);
    EXPECT_GT(r.rows[2].mean_lbo_iters, 0.0);
    EXPECT_LT(r.rows[2].roundtrip_l2_rel, r.rows[0].roundtrip_l2_rel);

    const json& s = r.summary;
    EXPECT_EQ(s["instances"], 3);
    EXPECT_EQ(s["methods"]["lbo-n"]["instances"], 3);
    EXPECT_EQ(s["methods"]["lbo-n"]["errors"], 0);
    EXPECT_TRUE(s["autoencoder_upper_bound"]["mean_psnr_db"].is_number());
    EXPECT_EQ(s["config"], to_json(cfg));
}

TEST(Benchmark, CsvIsByteIdenticalAcrossRunsAndThreadCounts) {
    RunConfig cfg = small_shapes();
    const std::string one = rows_to_csv(run_benchmark(cfg).rows, false);
    const std::string again = rows_to_csv(run_benchmark(cfg).rows, false);
    cfg.threads = 3;
    const std::string threaded = rows_to_csv(run_benchmark(cfg).rows, false);
    EXPECT_EQ(one, again);
    EXPECT_EQ(one, threaded);
    EXPECT_EQ(one.substr(0, one.find("\r\n")),
              "method,instance_id,psnr_db,ssim,perceptual,roundtrip_l2_rel,mean_lbo_iters,wall_ms,error");
}

TEST(Benchmark, WallTimeOnlyWhenRequested) {
    BenchmarkRow row;
    row.method = "ddim";
    row.psnr_db = INFINITY;
    row.ssim = 1.0;
    row.perceptual = 0.0;
    row.roundtrip_l2_rel = 0.0;
    row.wall_ms = 12.5;
    const std::string csv = rows_to_csv({row}, false);
    EXPECT_EQ(csv.substr(csv.find("\r\n") + 2), "ddim,0,inf,1.0,0.0,0.0,0.0,,\r\n");
    EXPECT_NE(rows_to_csv({row}, true).find(",12.5,"), std::string::npos);
}

TEST(Benchmark, FailedInstancesBecomeErrorRows) {
    RunConfig cfg = small_shapes();
    cfg.methods = {"lbo-n"};
    Backends b = build_backends(cfg);
    b.model = std::make_unique<ScaledDenoiser>(cfg.latent_dim, 1e6, cfg.t_train);
    const BenchmarkResult r = run_benchmark(cfg, b);
    ASSERT_EQ(r.rows.size(), 3u);
    for (const auto& row : r.rows) {
        EXPECT_EQ(row.error.rfind("divergence:", 0), 0u) << row.error;
        EXPECT_TRUE(std::isnan(row.psnr_db));
    }
    EXPECT_EQ(r.summary["methods"]["lbo-n"]["errors"], 3);
    EXPECT_EQ(r.summary["methods"]["lbo-n"]["mean_psnr_db"], "nan");
    EXPECT_NE(rows_to_csv(r.rows, false).find("divergence: "), std::string::npos);
}

TEST(Benchmark, PointDataWithTrainedMlpAndLabels) {
    RunConfig cfg;
    cfg.data_kind = DataKind::Gauss2d;
    cfg.count = 4;
    cfg.train_count = 200;
    cfg.steps = 10;
    cfg.denoiser = "mlp";
    cfg.conditional = true;
    cfg.guidance = 2.0;
    cfg.mlp.hidden = 16;
    cfg.mlp.max_epochs = 3;
    cfg.mlp.steps_per_epoch = 10;
    cfg.methods = {"ddim", "lbo-g", "lbo-n+ilb"};
    const Backends b = build_backends(cfg);
    EXPECT_EQ(b.ae->kind(), "identity");
    EXPECT_EQ(b.model->kind(), "mlp");
    EXPECT_TRUE(std::holds_alternative<ClassLabel>(b.conditions[0]));
    const BenchmarkResult r = run_benchmark(cfg, b);
    for (const auto& row : r.rows) EXPECT_TRUE(row.error.empty()) << row.error;
    EXPECT_EQ(r.summary["denoiser_training"]["epochs_run"], 3);
}

double method_mean(const json& summary, const std::string& method, const std::string& key) {
    return summary["methods"][method][key].get<double>();
}

TEST(BenchmarkOrdering, LboBeatsDdimOnTwentyAnalyticInstances) {
    RunConfig cfg;
    cfg.methods = {"ddim", "lbo-n"};
    const BenchmarkResult r = run_benchmark(cfg);
    EXPECT_EQ(r.summary["instances"], 20);
    EXPECT_LT(method_mean(r.summary, "lbo-n", "mean_roundtrip_l2_rel"),
              method_mean(r.summary, "ddim", "mean_roundtrip_l2_rel"));
}

TEST(BenchmarkOrdering, IlbRaisesPsnrWithLossyAutoencoder) {
    RunConfig cfg;
    cfg.methods = {"lbo-n", "lbo-n+ilb"};
    const BenchmarkResult r = run_benchmark(cfg);
    EXPECT_EQ(r.summary["config"]["autoencoder"]["ridge"], 0.2);
    EXPECT_GE(method_mean(r.summary, "lbo-n+ilb", "mean_psnr_db"), method_mean(r.summary, "lbo-n", "mean_psnr_db"));
}

} // namespace
} // namespace lbi
