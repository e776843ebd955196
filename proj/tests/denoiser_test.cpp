#include <cmath>
#include <numbers>

#include <Eigen/LU>
#include <gtest/gtest.h>

#include "lbi/denoiser.hpp"
#include "lbi/optim.hpp"
#include "test_support.hpp"

namespace lbi {
namespace {

using testing::scalar;
using testing::toy_schedule;

// log N(z; sqrt(ab) mu, ab Sigma + (1 - ab) I), written out independently of the backend.
double log_marginal(const Eigen::VectorXd& z, const Eigen::VectorXd& mu, const Eigen::MatrixXd& sigma, double ab) {
    const Eigen::Index d = z.size();
    const Eigen::MatrixXd cov = ab * sigma + (1.0 - ab) * Eigen::MatrixXd::Identity(d, d);
    const Eigen::VectorXd r = z - std::sqrt(ab) * mu;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
    return -0.5 * r.dot(ldlt.solve(r)) - 0.5 * std::log(cov.determinant()) -
           0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi);
}

TEST(LinearGaussian, UnitGaussianHandValue) {
    LinearGaussianDenoiser m(Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1), toy_schedule());
    EXPECT_NEAR(m.eval(scalar(1.0), 2, Unconditional{})[0], 0.4358899, 1e-7);
    EXPECT_NEAR(m.eval(scalar(1.0), 2, Unconditional{})[0], std::sqrt(0.19), 1e-15);
    EXPECT_NEAR(m.vjp(scalar(1.0), 2, Unconditional{}, scalar(1.0))[0], std::sqrt(0.19), 1e-15);
}

TEST(LinearGaussian, UnitGaussianClosedFormOnDefaultGrid) {
    const auto s = default_schedule();
    const int d = 4;
    LinearGaussianDenoiser m(Eigen::VectorXd::Zero(d), Eigen::MatrixXd::Identity(d, d), s);
    Rng rng(3);
    for (int t = 1; t <= s.t_train(); ++t) {
        const Latent z = rng.normal_vector(d);
        const Latent e = m.eval(z, t, Unconditional{});
        EXPECT_LE((e - std::sqrt(1.0 - s.alpha_bar(t)) * z).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(LinearGaussian, MatchesFiniteDifferenceScoreOfMarginal) {
    // eps*(z, t) = -sqrt(1 - ab) grad log p_t(z)
    const auto s = default_schedule();
    Rng rng(17);
    const int d = 3;
    const Eigen::VectorXd mu = rng.normal_vector(d);
    const Eigen::MatrixXd sigma = testing::random_spd(rng, d, 0.1, 2.0);
    LinearGaussianDenoiser m(mu, sigma, s);
    for (int t : {1, 7, 30, 64, 100}) {
        const double ab = s.alpha_bar(t);
        const Latent z = rng.normal_vector(d);
        const ScalarFn logp = [&](const Eigen::VectorXd& v) { return log_marginal(v, mu, sigma, ab); };
        const Eigen::VectorXd score = finite_difference_gradient(logp, z, 1e-5);
        const Latent expected = -std::sqrt(1.0 - ab) * score;
        EXPECT_LE((m.eval(z, t, Unconditional{}) - expected).cwiseAbs().maxCoeff(), 1e-7) << "t=" << t;
    }
}

TEST(LinearGaussian, RejectsBadCovariance) {
    Eigen::MatrixXd nonsym(2, 2);
    nonsym << 1.0, 0.5, 0.0, 1.0;
    EXPECT_LBI_ERROR(LinearGaussianDenoiser(Eigen::VectorXd::Zero(2), nonsym, toy_schedule()),
                     ErrorCode::InvalidParameter);
    Eigen::MatrixXd indefinite(2, 2);
    indefinite << 1.0, 0.0, 0.0, -1.0;
    EXPECT_LBI_ERROR(LinearGaussianDenoiser(Eigen::VectorXd::Zero(2), indefinite, toy_schedule()),
                     ErrorCode::InvalidParameter);
}

TEST(Denoiser, DimensionAndTimestepErrors) {
    LinearGaussianDenoiser m(Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2), toy_schedule());
    EXPECT_LBI_ERROR(m.eval(scalar(1.0), 1, Unconditional{}), ErrorCode::Dimension);
    EXPECT_LBI_ERROR(m.eval(Latent::Zero(2), 4, Unconditional{}), ErrorCode::Bounds);
    EXPECT_LBI_ERROR(m.vjp(Latent::Zero(2), 1, Unconditional{}, scalar(1.0)), ErrorCode::Dimension);
}

TEST(Denoiser, ConstantStub) {
    ConstantDenoiser zero(Latent::Zero(3), 10);
    Rng rng(1);
    EXPECT_TRUE(zero.eval(rng.normal_vector(3), 5, Unconditional{}).isZero(0.0));
    EXPECT_TRUE(zero.vjp(rng.normal_vector(3), 5, Unconditional{}, rng.normal_vector(3)).isZero(0.0));
}

TEST(Denoiser, PurityAcrossBackends) {
    const auto s = default_schedule();
    Rng rng(8);
    LinearGaussianDenoiser lg(rng.normal_vector(5), testing::random_spd(rng, 5, 0.2, 1.0), s);
    MlpDenoiser mlp = MlpDenoiser::random_init({5, 32, 3, 0, s.t_train()}, s, 42);
    for (const Denoiser* m : {static_cast<const Denoiser*>(&lg), static_cast<const Denoiser*>(&mlp)}) {
        const Latent z = rng.normal_vector(5);
        const Latent a = m->eval(z, 37, ClassLabel{1});
        const Latent b = m->eval(z, 37, ClassLabel{1});
        EXPECT_EQ(a, b) << m->kind();
    }
}

TEST(Vjp, ZeroCotangentAndLinearity) {
    const auto s = default_schedule();
    Rng rng(21);
    LinearGaussianDenoiser lg(rng.normal_vector(4), testing::random_spd(rng, 4, 0.2, 1.0), s);
    MlpDenoiser mlp = MlpDenoiser::random_init({4, 16, 2, 0, s.t_train()}, s, 7);
    for (const Denoiser* m : {static_cast<const Denoiser*>(&lg), static_cast<const Denoiser*>(&mlp)}) {
        ASSERT_TRUE(m->supports_exact_vjp());
        const Latent z = rng.normal_vector(4);
        EXPECT_TRUE(m->vjp(z, 20, Unconditional{}, Latent::Zero(4)).isZero(0.0));
        const Latent v1 = rng.normal_vector(4), v2 = rng.normal_vector(4);
        const double a = 0.7, b = -1.3;
        const Latent lhs = m->vjp(z, 20, Unconditional{}, a * v1 + b * v2);
        const Latent rhs = a * m->vjp(z, 20, Unconditional{}, v1) + b * m->vjp(z, 20, Unconditional{}, v2);
        EXPECT_LE((lhs - rhs).cwiseAbs().maxCoeff(), 1e-10) << m->kind();
    }
}

TEST(Vjp, MlpMatchesFiniteDifferences) {
    const auto s = default_schedule();
    MlpDenoiser mlp = MlpDenoiser::random_init({3, 32, 2, 0, s.t_train()}, s, 99);
    Rng rng(123);
    for (int probe = 0; probe < 20; ++probe) {
        const Latent z = rng.normal_vector(3);
        const Latent v = rng.normal_vector(3);
        const int t = 1 + static_cast<int>(rng.below(100));
        const Condition c = probe % 2 == 0 ? Condition{ClassLabel{1}} : Condition{Unconditional{}};
        const ScalarFn f = [&](const Eigen::VectorXd& x) { return v.dot(mlp.eval(x, t, c)); };
        const auto g = [&](const Eigen::VectorXd& x) { return mlp.vjp(x, t, c, v); };
        EXPECT_LE(gradient_check(f, g, z), 1e-4) << "probe " << probe;
    }
}

TEST(Vjp, FiniteDifferenceFallback) {
    testing::FunctionDenoiser f(2, 10, [](const Latent& z, int, const Condition&) {
        Latent out(2);
        out << std::sin(z[0]) * z[1], z[0] * z[0];
        return out;
    });
    EXPECT_FALSE(f.supports_exact_vjp());
    Latent z(2), v(2);
    z << 0.3, -1.2;
    v << 0.5, 2.0;
    Latent expected(2);
    expected << v[0] * std::cos(z[0]) * z[1] + v[1] * 2.0 * z[0], v[0] * std::sin(z[0]);
    EXPECT_LE((f.vjp(z, 1, Unconditional{}, v) - expected).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(Cfg, BlendRules) {
    const auto s = default_schedule();
    MlpDenoiser mlp = MlpDenoiser::random_init({3, 16, 4, 0, s.t_train()}, s, 5);
    Rng rng(4);
    const Latent z = rng.normal_vector(3);
    const Condition c = ClassLabel{2};
    EXPECT_EQ(cfg_eval(mlp, z, 10, c, 1.0), mlp.eval(z, 10, c));
    EXPECT_EQ(cfg_eval(mlp, z, 10, c, 0.0), mlp.eval(z, 10, Unconditional{}));
    const Latent eu = mlp.eval(z, 10, Unconditional{}), ec = mlp.eval(z, 10, c);
    EXPECT_LE((cfg_eval(mlp, z, 10, c, 3.0) - (eu + 3.0 * (ec - eu))).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Cfg, AffineFormulaOnStub) {
    testing::FunctionDenoiser stub(1, 10, [](const Latent&, int, const Condition& c) {
        return std::holds_alternative<Unconditional>(c) ? scalar(0.0) : scalar(1.0);
    });
    EXPECT_DOUBLE_EQ(cfg_eval(stub, scalar(0.3), 2, ClassLabel{0}, 7.5)[0], 7.5);
}

TEST(Mlp, ConditionValidation) {
    const auto s = default_schedule();
    MlpDenoiser mlp = MlpDenoiser::random_init({2, 8, 3, 0, s.t_train()}, s, 1);
    EXPECT_LBI_ERROR(mlp.eval(Latent::Zero(2), 3, ClassLabel{3}), ErrorCode::InvalidParameter);
    EXPECT_LBI_ERROR(mlp.eval(Latent::Zero(2), 3, Embedding{Eigen::VectorXd::Zero(2)}), ErrorCode::InvalidParameter);
    MlpDenoiser emb = MlpDenoiser::random_init({2, 8, 0, 4, s.t_train()}, s, 1);
    EXPECT_LBI_ERROR(emb.eval(Latent::Zero(2), 3, Embedding{Eigen::VectorXd::Zero(3)}), ErrorCode::Dimension);
    EXPECT_NO_THROW(emb.eval(Latent::Zero(2), 3, Embedding{Eigen::VectorXd::Ones(4)}));
}

TEST(Mlp, EmbeddingConditionVjp) {
    const auto s = default_schedule();
    MlpDenoiser emb = MlpDenoiser::random_init({3, 16, 0, 4, s.t_train()}, s, 12);
    Rng rng(6);
    const Condition c = Embedding{rng.normal_vector(4)};
    const Latent v = rng.normal_vector(3);
    const ScalarFn f = [&](const Eigen::VectorXd& x) { return v.dot(emb.eval(x, 40, c)); };
    const auto g = [&](const Eigen::VectorXd& x) { return emb.vjp(x, 40, c, v); };
    EXPECT_LE(gradient_check(f, g, rng.normal_vector(3)), 1e-4);
}

std::vector<Latent> eight_points() {
    std::vector<Latent> pts;
    for (int k = 0; k < 8; ++k) {
        const double a = 2.0 * std::numbers::pi * k / 8.0;
        Latent p(2);
        p << std::cos(a), std::sin(a);
        pts.push_back(p);
    }
    return pts;
}

TEST(Training, OverfitsEightPoints) {
    const auto s = default_schedule();
    const auto pts = eight_points();
    MlpTrainConfig cfg;
    cfg.seed = 3;
    cfg.max_epochs = 60;
    const TrainedMlp out = train_mlp_denoiser(pts, {}, s, cfg);
    EXPECT_EQ(out.report.epochs_run, 60);
    // Noise-sampled eps-MSE cannot go below the Bayes floor of this data
    // (about 0.266 under the default schedule); 0.40 was frozen from the
    // first seeded run (0.360).
    EXPECT_LT(out.report.final_train_loss, 0.40);
    EXPECT_GT(out.report.final_train_loss, 0.2);
    EXPECT_TRUE(std::isfinite(out.report.heldout_loss));
}

TEST(Training, SameSeedGivesIdenticalWeights) {
    const auto s = default_schedule();
    const auto pts = eight_points();
    std::vector<int> labels = {0, 0, 1, 1, 2, 2, 3, 3};
    MlpTrainConfig cfg;
    cfg.seed = 11;
    cfg.max_epochs = 3;
    const TrainedMlp a = train_mlp_denoiser(pts, labels, s, cfg);
    const TrainedMlp b = train_mlp_denoiser(pts, labels, s, cfg);
    EXPECT_EQ(a.model.parameters(), b.model.parameters());
    EXPECT_EQ(a.model.shape().n_classes, 4);
    cfg.seed = 12;
    const TrainedMlp c = train_mlp_denoiser(pts, labels, s, cfg);
    EXPECT_NE(a.model.parameters(), c.model.parameters());
}

TEST(Training, Errors) {
    const auto s = default_schedule();
    EXPECT_LBI_ERROR(train_mlp_denoiser({}, {}, s, {}), ErrorCode::InvalidInput);
    const std::vector<Latent> bad = {Latent::Constant(2, std::nan(""))};
    EXPECT_LBI_ERROR(train_mlp_denoiser(bad, {}, s, {}), ErrorCode::InvalidInput);
    const std::vector<Latent> pts = {Latent::Constant(2, 1.0), Latent::Constant(2, -1.0)};
    MlpTrainConfig cfg;
    cfg.max_epochs = 2;
    cfg.lr = 1e308;
    try {
        train_mlp_denoiser(pts, {}, s, cfg);
        ADD_FAILURE() << "expected a training failure";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::TrainingFailure);
        EXPECT_NE(std::string(e.what()).find("epoch 1"), std::string::npos) << e.what();
    }
}

} // namespace
} // namespace lbi
