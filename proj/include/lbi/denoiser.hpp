#pragma once

#include <cmath>
#include <limits>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "lbi/error.hpp"
#include "lbi/optim.hpp"
#include "lbi/rng.hpp"
#include "lbi/schedule.hpp"

namespace lbi {

using Latent = Eigen::VectorXd;

struct Unconditional {
    bool operator==(const Unconditional&) const = default;
};
struct ClassLabel {
    int k = 0;
    bool operator==(const ClassLabel&) const = default;
};
struct Embedding {
    Eigen::VectorXd v;
    bool operator==(const Embedding& o) const { return v.size() == o.v.size() && v == o.v; }
};

/// The conditioning signal C. A text encoder is out of scope; callers hand in
/// a class label or a raw embedding directly.
using Condition = std::variant<Unconditional, ClassLabel, Embedding>;

inline std::string describe(const Condition& c) {
    if (std::holds_alternative<ClassLabel>(c)) return "class:" + std::to_string(std::get<ClassLabel>(c).k);
    if (std::holds_alternative<Embedding>(c)) return "embedding[" + std::to_string(std::get<Embedding>(c).v.size()) + "]";
    return "unconditional";
}

/// Noise predictor F(z, t, C). Public eval/vjp validate shapes and then forward
/// to the backend hooks. Backends without an analytic Jacobian inherit the
/// central-difference vjp.
class Denoiser {
public:
    virtual ~Denoiser() = default;

    virtual int latent_dim() const = 0;
    virtual int t_train() const = 0;
    virtual bool supports_exact_vjp() const { return false; }
    virtual std::string kind() const = 0;

    Latent eval(const Latent& z, int t, const Condition& c) const {
        check(z, t, c);
        return do_eval(z, t, c);
    }

    Latent vjp(const Latent& z, int t, const Condition& c, const Latent& v) const {
        check(z, t, c);
        detail::require_dim(v.size(), latent_dim(), "denoiser vjp cotangent");
        return do_vjp(z, t, c, v);
    }

    /// v^T dF/dz by central differences, h = 1e-4 (1 + |z_i|).
    Latent fd_vjp(const Latent& z, int t, const Condition& c, const Latent& v) const {
        Latent out(z.size());
        Latent probe = z;
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            const double h = 1e-4 * (1.0 + std::abs(z[i]));
            probe[i] = z[i] + h;
            const Latent fp = do_eval(probe, t, c);
            probe[i] = z[i] - h;
            const Latent fm = do_eval(probe, t, c);
            probe[i] = z[i];
            out[i] = v.dot(fp - fm) / (2.0 * h);
        }
        return out;
    }

protected:
    virtual Latent do_eval(const Latent& z, int t, const Condition& c) const = 0;
    virtual Latent do_vjp(const Latent& z, int t, const Condition& c, const Latent& v) const {
        return fd_vjp(z, t, c, v);
    }
    virtual void check_condition(const Condition&) const {}

private:
    void check(const Latent& z, int t, const Condition& c) const {
        detail::require_dim(z.size(), latent_dim(), "denoiser input");
        if (t < 0 || t > t_train()) {
            throw Error(ErrorCode::Bounds,
                        "timestep " + std::to_string(t) + " outside [0, " + std::to_string(t_train()) + "]",
                        kind());
        }
        check_condition(c);
    }
};

/// Classifier-free guidance blend eps_u + w (eps_c - eps_u). w = 1 returns the
/// conditional prediction itself, w = 0 the unconditional one.
inline Latent cfg_eval(const Denoiser& model, const Latent& z, int t, const Condition& c, double w) {
    if (w == 1.0) return model.eval(z, t, c);
    if (w == 0.0) return model.eval(z, t, Unconditional{});
    const Latent eu = model.eval(z, t, Unconditional{});
    const Latent ec = model.eval(z, t, c);
    return eu + w * (ec - eu);
}

inline Latent cfg_vjp(const Denoiser& model, const Latent& z, int t, const Condition& c, double w, const Latent& v) {
    if (w == 1.0) return model.vjp(z, t, c, v);
    if (w == 0.0) return model.vjp(z, t, Unconditional{}, v);
    return (1.0 - w) * model.vjp(z, t, Unconditional{}, v) + w * model.vjp(z, t, c, v);
}

/// F = const. Makes DDIM generation and inversion exact inverses.
class ConstantDenoiser final : public Denoiser {
public:
    ConstantDenoiser(Latent value, int t_train) : value_(std::move(value)), t_train_(t_train) {}

    int latent_dim() const override { return static_cast<int>(value_.size()); }
    int t_train() const override { return t_train_; }
    bool supports_exact_vjp() const override { return true; }
    std::string kind() const override { return "constant"; }

protected:
    Latent do_eval(const Latent&, int, const Condition&) const override { return value_; }
    Latent do_vjp(const Latent& z, int, const Condition&, const Latent&) const override {
        return Latent::Zero(z.size());
    }

private:
    Latent value_;
    int t_train_;
};

/// F(z) = a z + offset, independent of t and C.
class ScaledDenoiser final : public Denoiser {
public:
    ScaledDenoiser(int dim, double a, int t_train, double offset = 0.0)
        : dim_(dim), a_(a), offset_(offset), t_train_(t_train) {}

    int latent_dim() const override { return dim_; }
    int t_train() const override { return t_train_; }
    bool supports_exact_vjp() const override { return true; }
    std::string kind() const override { return "scaled"; }

protected:
    Latent do_eval(const Latent& z, int, const Condition&) const override {
        return (a_ * z).array() + offset_;
    }
    Latent do_vjp(const Latent&, int, const Condition&, const Latent& v) const override { return a_ * v; }

private:
    int dim_;
    double a_;
    double offset_;
    int t_train_;
};

/// Exact noise predictor for Gaussian data N(mu, Sigma):
///   F(z, t) = sqrt(1 - ab_t) (ab_t Sigma + (1 - ab_t) I)^{-1} (z - sqrt(ab_t) mu).
/// Affine in z, so the Jacobian is a constant symmetric matrix per timestep.
class LinearGaussianDenoiser final : public Denoiser {
public:
    LinearGaussianDenoiser(Eigen::VectorXd mu, Eigen::MatrixXd sigma, NoiseSchedule sched)
        : mu_(std::move(mu)), sigma_(std::move(sigma)), sched_(std::move(sched)) {
        const Eigen::Index d = mu_.size();
        detail::require(d > 0, ErrorCode::InvalidParameter, "empty mean", "LinearGaussianDenoiser");
        detail::require(sigma_.rows() == d && sigma_.cols() == d, ErrorCode::Dimension,
                        "covariance must be d x d", "LinearGaussianDenoiser");
        detail::require((sigma_ - sigma_.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + sigma_.cwiseAbs().maxCoeff()),
                        ErrorCode::InvalidParameter, "covariance is not symmetric", "LinearGaussianDenoiser");
        Eigen::LLT<Eigen::MatrixXd> llt(sigma_);
        detail::require(llt.info() == Eigen::Success, ErrorCode::InvalidParameter,
                        "covariance is not positive definite", "LinearGaussianDenoiser");

        const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(d, d);
        jac_.reserve(static_cast<std::size_t>(sched_.t_train()) + 1);
        for (int t = 0; t <= sched_.t_train(); ++t) {
            const double ab = sched_.alpha_bar(t);
            if (t == 0) {
                jac_.push_back(Eigen::MatrixXd::Zero(d, d));
                continue;
            }
            const Eigen::MatrixXd marginal = ab * sigma_ + (1.0 - ab) * eye;
            Eigen::MatrixXd j = std::sqrt(1.0 - ab) * marginal.llt().solve(eye);
            jac_.push_back(0.5 * (j + j.transpose()));
        }
    }

    int latent_dim() const override { return static_cast<int>(mu_.size()); }
    int t_train() const override { return sched_.t_train(); }
    bool supports_exact_vjp() const override { return true; }
    std::string kind() const override { return "linear_gaussian"; }

    const Eigen::VectorXd& mu() const noexcept { return mu_; }
    const Eigen::MatrixXd& sigma() const noexcept { return sigma_; }
    const NoiseSchedule& schedule() const noexcept { return sched_; }
    const Eigen::MatrixXd& jacobian(int t) const { return jac_.at(static_cast<std::size_t>(t)); }

protected:
    Latent do_eval(const Latent& z, int t, const Condition&) const override {
        const double ab = sched_.alpha_bar(t);
        return jacobian(t) * (z - std::sqrt(ab) * mu_);
    }
    Latent do_vjp(const Latent&, int t, const Condition&, const Latent& v) const override {
        return jacobian(t).transpose() * v;
    }

private:
    Eigen::VectorXd mu_;
    Eigen::MatrixXd sigma_;
    NoiseSchedule sched_;
    std::vector<Eigen::MatrixXd> jac_;
};

struct MlpShape {
    int latent_dim = 2;
    int hidden = 64;
    int n_classes = 0;
    int cond_dim = 0;
    int t_train = 100;

    bool operator==(const MlpShape&) const = default;
};

/// Named parameter block inside the flat MLP parameter vector (column-major).
struct ParamBlock {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    Eigen::Index offset = 0;

    Eigen::Index size() const { return rows * cols; }
};

/// Two-hidden-layer tanh MLP:
///   h1 = tanh(W1 z + b1 + temb[t] + cond(C)),  h2 = tanh(W2 h1 + b2),  F = W3 h2 + b3.
/// cond(C) is a class-embedding row (the last row is the unconditional slot)
/// or Wc v for a raw embedding.
class MlpDenoiser final : public Denoiser {
public:
    MlpDenoiser(MlpShape shape, NoiseSchedule sched, Eigen::VectorXd params)
        : shape_(shape), sched_(std::move(sched)), blocks_(layout(shape)), params_(std::move(params)) {
        detail::require(shape_.t_train == sched_.t_train(), ErrorCode::InvalidParameter,
                        "schedule length does not match the time-embedding table", "MlpDenoiser");
        detail::require_dim(params_.size(), parameter_count(shape_), "MlpDenoiser parameters");
        detail::require(params_.allFinite(), ErrorCode::InvalidParameter, "non-finite weights", "MlpDenoiser");
    }

    static MlpDenoiser random_init(MlpShape shape, NoiseSchedule sched, std::uint64_t seed) {
        detail::require(shape.latent_dim > 0 && shape.hidden > 0 && shape.n_classes >= 0 && shape.cond_dim >= 0,
                        ErrorCode::InvalidParameter, "invalid MLP dimensions", "MlpDenoiser");
        shape.t_train = sched.t_train();
        const auto blocks = layout(shape);
        Eigen::VectorXd p = Eigen::VectorXd::Zero(parameter_count(shape));
        Rng rng(seed);
        auto fill = [&](const ParamBlock& b, double scale) {
            for (Eigen::Index i = 0; i < b.size(); ++i) p[b.offset + i] = scale * rng.normal();
        };
        fill(blocks[kW1], 1.0 / std::sqrt(static_cast<double>(shape.latent_dim)));
        fill(blocks[kCemb], 0.1);
        fill(blocks[kWc], shape.cond_dim > 0 ? 1.0 / std::sqrt(static_cast<double>(shape.cond_dim)) : 0.0);
        fill(blocks[kW2], 1.0 / std::sqrt(static_cast<double>(shape.hidden)));
        fill(blocks[kW3], 1.0 / std::sqrt(static_cast<double>(shape.hidden)));
        // Sinusoidal initialization of the learned per-timestep embedding.
        const ParamBlock& te = blocks[kTemb];
        for (Eigen::Index t = 0; t < te.rows; ++t) {
            for (Eigen::Index j = 0; j < te.cols; ++j) {
                const double freq = std::pow(100.0, -static_cast<double>(j / 2 * 2) / static_cast<double>(te.cols));
                const double arg = static_cast<double>(t) * freq;
                p[te.offset + j * te.rows + t] = (j % 2 == 0) ? std::sin(arg) : std::cos(arg);
            }
        }
        return MlpDenoiser(shape, std::move(sched), std::move(p));
    }

    static std::vector<ParamBlock> layout(const MlpShape& s) {
        const Eigen::Index d = s.latent_dim, h = s.hidden;
        std::vector<ParamBlock> blocks = {
            {"w1", h, d}, {"b1", h, 1},
            {"temb", s.t_train + 1, h}, {"cemb", s.n_classes + 1, h}, {"wc", h, s.cond_dim},
            {"w2", h, h}, {"b2", h, 1},
            {"w3", d, h}, {"b3", d, 1},
        };
        Eigen::Index off = 0;
        for (auto& b : blocks) {
            b.offset = off;
            off += b.size();
        }
        return blocks;
    }

    static Eigen::Index parameter_count(const MlpShape& s) {
        const auto blocks = layout(s);
        return blocks.back().offset + blocks.back().size();
    }

    int latent_dim() const override { return shape_.latent_dim; }
    int t_train() const override { return shape_.t_train; }
    bool supports_exact_vjp() const override { return true; }
    std::string kind() const override { return "mlp"; }

    const MlpShape& shape() const noexcept { return shape_; }
    const NoiseSchedule& schedule() const noexcept { return sched_; }
    const Eigen::VectorXd& parameters() const noexcept { return params_; }
    const std::vector<ParamBlock>& blocks() const noexcept { return blocks_; }

    void set_parameters(Eigen::VectorXd params) {
        detail::require_dim(params.size(), params_.size(), "MlpDenoiser parameters");
        detail::require(params.allFinite(), ErrorCode::InvalidParameter, "non-finite weights", "MlpDenoiser");
        params_ = std::move(params);
    }

    /// Batched forward pass; columns of `z` are samples. Hidden activations are
    /// kept for the backward pass.
    struct Activations {
        Eigen::MatrixXd h1;
        Eigen::MatrixXd h2;
        Eigen::MatrixXd out;
    };

    Activations forward(const Eigen::MatrixXd& z, std::span<const int> ts, std::span<const Condition> cs) const {
        const auto w1 = block(kW1);
        Eigen::MatrixXd a1 = w1 * z;
        a1.colwise() += block(kB1).col(0);
        for (Eigen::Index n = 0; n < z.cols(); ++n) {
            a1.col(n) += block(kTemb).row(ts[static_cast<std::size_t>(n)]).transpose();
            add_condition(a1.col(n), cs[static_cast<std::size_t>(n)]);
        }
        Activations act;
        act.h1 = a1.array().tanh().matrix();
        Eigen::MatrixXd a2 = block(kW2) * act.h1;
        a2.colwise() += block(kB2).col(0);
        act.h2 = a2.array().tanh().matrix();
        act.out = block(kW3) * act.h2;
        act.out.colwise() += block(kB3).col(0);
        return act;
    }

    /// Backward pass for cotangent `g_out` (columns per sample). Returns the input
    /// cotangent; accumulates parameter gradients into `g_params` when given.
    Eigen::MatrixXd backward(const Eigen::MatrixXd& z, std::span<const int> ts, std::span<const Condition> cs,
                             const Activations& act, const Eigen::MatrixXd& g_out,
                             Eigen::VectorXd* g_params = nullptr) const {
        const Eigen::MatrixXd g_a2 =
            ((block(kW3).transpose() * g_out).array() * (1.0 - act.h2.array().square())).matrix();
        const Eigen::MatrixXd g_a1 =
            ((block(kW2).transpose() * g_a2).array() * (1.0 - act.h1.array().square())).matrix();
        if (g_params != nullptr) {
            auto gb = [&](int k) { return mut_block(*g_params, k); };
            gb(kW3).noalias() += g_out * act.h2.transpose();
            gb(kB3).col(0) += g_out.rowwise().sum();
            gb(kW2).noalias() += g_a2 * act.h1.transpose();
            gb(kB2).col(0) += g_a2.rowwise().sum();
            gb(kW1).noalias() += g_a1 * z.transpose();
            gb(kB1).col(0) += g_a1.rowwise().sum();
            auto temb = gb(kTemb);
            auto cemb = gb(kCemb);
            auto wc = gb(kWc);
            for (Eigen::Index n = 0; n < z.cols(); ++n) {
                temb.row(ts[static_cast<std::size_t>(n)]) += g_a1.col(n).transpose();
                const Condition& c = cs[static_cast<std::size_t>(n)];
                if (const auto* e = std::get_if<Embedding>(&c)) {
                    wc.noalias() += g_a1.col(n) * e->v.transpose();
                } else {
                    cemb.row(class_row(c)) += g_a1.col(n).transpose();
                }
            }
        }
        return block(kW1).transpose() * g_a1;
    }

protected:
    Latent do_eval(const Latent& z, int t, const Condition& c) const override {
        const int ts[1] = {t};
        const Condition cs[1] = {c};
        return forward(z, ts, cs).out.col(0);
    }

    Latent do_vjp(const Latent& z, int t, const Condition& c, const Latent& v) const override {
        const int ts[1] = {t};
        const Condition cs[1] = {c};
        const Eigen::MatrixXd zm = z;
        const Activations act = forward(zm, ts, cs);
        const Eigen::MatrixXd vm = v;
        return backward(zm, ts, cs, act, vm).col(0);
    }

    void check_condition(const Condition& c) const override {
        if (const auto* k = std::get_if<ClassLabel>(&c)) {
            detail::require(k->k >= 0 && k->k < shape_.n_classes, ErrorCode::InvalidParameter,
                            "class label " + std::to_string(k->k) + " outside [0, " +
                                std::to_string(shape_.n_classes) + ")",
                            "MlpDenoiser");
        } else if (const auto* e = std::get_if<Embedding>(&c)) {
            detail::require(shape_.cond_dim > 0, ErrorCode::InvalidParameter,
                            "model has no embedding conditioning", "MlpDenoiser");
            detail::require_dim(e->v.size(), shape_.cond_dim, "condition embedding");
        }
    }

private:
    enum : int { kW1 = 0, kB1, kTemb, kCemb, kWc, kW2, kB2, kW3, kB3 };

    Eigen::Map<const Eigen::MatrixXd> block(int k) const {
        const ParamBlock& b = blocks_[static_cast<std::size_t>(k)];
        return {params_.data() + b.offset, b.rows, b.cols};
    }

    Eigen::Map<Eigen::MatrixXd> mut_block(Eigen::VectorXd& flat, int k) const {
        const ParamBlock& b = blocks_[static_cast<std::size_t>(k)];
        return {flat.data() + b.offset, b.rows, b.cols};
    }

    Eigen::Index class_row(const Condition& c) const {
        if (const auto* k = std::get_if<ClassLabel>(&c)) return k->k;
        return shape_.n_classes;
    }

    template <typename Col>
    void add_condition(Col&& col, const Condition& c) const {
        if (const auto* e = std::get_if<Embedding>(&c)) {
            col += block(kWc) * e->v;
        } else {
            col += block(kCemb).row(class_row(c)).transpose();
        }
    }

    MlpShape shape_;
    NoiseSchedule sched_;
    std::vector<ParamBlock> blocks_;
    Eigen::VectorXd params_;
};

struct MlpTrainConfig {
    int hidden = 64;
    int batch = 128;
    int steps_per_epoch = 50;
    int max_epochs = 200;
    double lr = 2e-3;
    double target_loss = 0.0;  // 0 disables early stopping
    double label_dropout = 0.1;
    double holdout_fraction = 0.1;
    int holdout_draws = 512;
    std::uint64_t seed = 0;
};

struct MlpTrainReport {
    int epochs_run = 0;
    double final_train_loss = 0.0;
    double heldout_loss = 0.0;
    bool reached_target = false;
};

struct TrainedMlp {
    MlpDenoiser model;
    MlpTrainReport report;
};

/// Seeded epsilon-prediction regression. Labels are optional; when present the
/// number of classes is max(label) + 1 and labels are dropped to the
/// unconditional slot with probability label_dropout.
inline TrainedMlp train_mlp_denoiser(std::span<const Latent> data, std::span<const int> labels,
                                     const NoiseSchedule& sched, const MlpTrainConfig& cfg) {
    if (data.empty()) throw Error(ErrorCode::InvalidInput, "training data is empty", "train_mlp_denoiser");
    const int d = static_cast<int>(data[0].size());
    detail::require(d > 0, ErrorCode::InvalidInput, "zero-dimensional data", "train_mlp_denoiser");
    for (const auto& x : data) {
        detail::require_dim(x.size(), d, "training sample");
        detail::require(x.allFinite(), ErrorCode::InvalidInput, "non-finite training sample", "train_mlp_denoiser");
    }
    detail::require(labels.empty() || labels.size() == data.size(), ErrorCode::InvalidInput,
                    "labels must be empty or match the data count", "train_mlp_denoiser");
    detail::require(cfg.batch > 0 && cfg.steps_per_epoch > 0 && cfg.max_epochs > 0 && cfg.lr > 0.0,
                    ErrorCode::InvalidParameter, "invalid training configuration", "train_mlp_denoiser");

    int n_classes = 0;
    for (int l : labels) {
        detail::require(l >= 0, ErrorCode::InvalidInput, "negative class label", "train_mlp_denoiser");
        n_classes = std::max(n_classes, l + 1);
    }

    MlpShape shape{d, cfg.hidden, n_classes, 0, sched.t_train()};
    Rng master(cfg.seed);
    MlpDenoiser model = MlpDenoiser::random_init(shape, sched, master.split(0)());

    // Hold out a slice of the data when there is enough of it; tiny sets are
    // validated on fresh noise draws over the training points instead.
    const std::size_t n = data.size();
    std::size_t n_hold = static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(n));
    if (n < 20) n_hold = 0;
    const std::size_t n_train = n - n_hold;

    struct Draw {
        std::size_t idx;
        int t;
        Condition c;
    };
    auto condition_for = [&](std::size_t idx, Rng& rng) -> Condition {
        if (labels.empty()) return Unconditional{};
        if (rng.uniform() < cfg.label_dropout) return Unconditional{};
        return ClassLabel{labels[idx]};
    };

    Rng hold_rng = master.split(1);
    const int n_val = std::max(1, cfg.holdout_draws);
    Eigen::MatrixXd val_x(d, n_val), val_eps(d, n_val);
    std::vector<int> val_t(static_cast<std::size_t>(n_val));
    std::vector<Condition> val_c(static_cast<std::size_t>(n_val));
    for (int k = 0; k < n_val; ++k) {
        const std::size_t idx = n_hold > 0 ? n_train + hold_rng.below(n_hold) : hold_rng.below(n);
        const int t = 1 + static_cast<int>(hold_rng.below(static_cast<std::uint64_t>(sched.t_train())));
        const Eigen::VectorXd eps = hold_rng.normal_vector(d);
        const double ab = sched.alpha_bar(t);
        val_x.col(k) = std::sqrt(ab) * data[idx] + std::sqrt(1.0 - ab) * eps;
        val_eps.col(k) = eps;
        val_t[static_cast<std::size_t>(k)] = t;
        val_c[static_cast<std::size_t>(k)] = labels.empty() ? Condition{Unconditional{}} : Condition{ClassLabel{labels[idx]}};
    }
    auto heldout = [&](const MlpDenoiser& m) {
        const auto act = m.forward(val_x, val_t, val_c);
        return (act.out - val_eps).squaredNorm() / static_cast<double>(val_eps.size());
    };

    AdamState adam(cfg.lr);
    Rng step_rng = master.split(2);
    Eigen::MatrixXd zb(d, cfg.batch), eb(d, cfg.batch);
    std::vector<int> tb(static_cast<std::size_t>(cfg.batch));
    std::vector<Condition> cb(static_cast<std::size_t>(cfg.batch));
    Eigen::VectorXd grad(model.parameters().size());

    MlpTrainReport report;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (int s = 0; s < cfg.steps_per_epoch; ++s) {
            for (int k = 0; k < cfg.batch; ++k) {
                const std::size_t idx = step_rng.below(n_train);
                const int t = 1 + static_cast<int>(step_rng.below(static_cast<std::uint64_t>(sched.t_train())));
                const double ab = sched.alpha_bar(t);
                const Eigen::VectorXd eps = step_rng.normal_vector(d);
                zb.col(k) = std::sqrt(ab) * data[idx] + std::sqrt(1.0 - ab) * eps;
                eb.col(k) = eps;
                tb[static_cast<std::size_t>(k)] = t;
                cb[static_cast<std::size_t>(k)] = condition_for(idx, step_rng);
            }
            const auto act = model.forward(zb, tb, cb);
            const Eigen::MatrixXd diff = act.out - eb;
            const double loss = diff.squaredNorm() / static_cast<double>(diff.size());
            if (!std::isfinite(loss)) {
                throw Error(ErrorCode::TrainingFailure, "loss became non-finite in epoch " + std::to_string(epoch),
                            "epoch " + std::to_string(epoch));
            }
            epoch_loss += loss;
            grad.setZero();
            model.backward(zb, tb, cb, act, (2.0 / static_cast<double>(diff.size())) * diff, &grad);
            Eigen::VectorXd next;
            try {
                next = adam_step(adam, model.parameters(), grad);
            } catch (const Error&) {
                next = Eigen::VectorXd::Constant(1, std::numeric_limits<double>::quiet_NaN());
            }
            if (!next.allFinite()) {
                throw Error(ErrorCode::TrainingFailure, "weights became non-finite in epoch " + std::to_string(epoch),
                            "epoch " + std::to_string(epoch));
            }
            model.set_parameters(next);
        }
        report.epochs_run = epoch;
        report.final_train_loss = epoch_loss / cfg.steps_per_epoch;
        if (cfg.target_loss > 0.0) {
            report.heldout_loss = heldout(model);
            if (report.heldout_loss < cfg.target_loss) {
                report.reached_target = true;
                break;
            }
        }
    }
    if (!(cfg.target_loss > 0.0)) report.heldout_loss = heldout(model);
    if (!std::isfinite(report.heldout_loss)) {
        throw Error(ErrorCode::TrainingFailure, "held-out loss is non-finite", "train_mlp_denoiser");
    }
    return {std::move(model), report};
}

} // namespace lbi
