#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "lbi/error.hpp"
#include "lbi/rng.hpp"

namespace lbi {

struct ImageShape {
    int height = 0;
    int width = 0;
    int channels = 1;

    int pixel_count() const noexcept { return height * width * channels; }
    bool operator==(const ImageShape&) const = default;
};

/// Real-valued image, row-major (y, x, c) interleaved.
struct Image {
    ImageShape shape;
    Eigen::VectorXd pixels;

    Image() = default;
    Image(ImageShape s, Eigen::VectorXd p) : shape(s), pixels(std::move(p)) {
        detail::require_dim(pixels.size(), shape.pixel_count(), "image pixels");
    }
    explicit Image(ImageShape s, double fill = 0.0)
        : shape(s), pixels(Eigen::VectorXd::Constant(s.pixel_count(), fill)) {}

    double& at(int y, int x, int c = 0) { return pixels[index(y, x, c)]; }
    double at(int y, int x, int c = 0) const { return pixels[index(y, x, c)]; }

    Eigen::Index index(int y, int x, int c = 0) const {
        return (static_cast<Eigen::Index>(y) * shape.width + x) * shape.channels + c;
    }

    Image clamped() const { return {shape, pixels.cwiseMax(0.0).cwiseMin(1.0)}; }
};

/// Encoder/decoder pair E, D between images and latents.
class Autoencoder {
public:
    virtual ~Autoencoder() = default;

    virtual ImageShape image_shape() const = 0;
    virtual int latent_dim() const = 0;
    virtual bool supports_exact_vjp() const { return false; }
    virtual std::string kind() const = 0;

    Eigen::VectorXd encode(const Image& x) const {
        detail::require(x.shape == image_shape(), ErrorCode::Dimension, "image shape does not match autoencoder",
                        "encode");
        detail::require(x.pixels.allFinite(), ErrorCode::InvalidInput, "image has non-finite pixels", "encode");
        return do_encode(x);
    }

    Image decode(const Eigen::VectorXd& z) const {
        detail::require_dim(z.size(), latent_dim(), "decode latent");
        return do_decode(z);
    }

    /// v^T dD/dz for an image-shaped cotangent v.
    Eigen::VectorXd decoder_vjp(const Eigen::VectorXd& z, const Image& v) const {
        detail::require_dim(z.size(), latent_dim(), "decoder_vjp latent");
        detail::require(v.shape == image_shape(), ErrorCode::Dimension, "cotangent shape does not match image",
                        "decoder_vjp");
        return do_decoder_vjp(z, v);
    }

    Eigen::VectorXd fd_decoder_vjp(const Eigen::VectorXd& z, const Image& v) const {
        Eigen::VectorXd out(z.size());
        Eigen::VectorXd probe = z;
        for (Eigen::Index i = 0; i < z.size(); ++i) {
            const double h = 1e-4 * (1.0 + std::abs(z[i]));
            probe[i] = z[i] + h;
            const Image fp = do_decode(probe);
            probe[i] = z[i] - h;
            const Image fm = do_decode(probe);
            probe[i] = z[i];
            out[i] = v.pixels.dot(fp.pixels - fm.pixels) / (2.0 * h);
        }
        return out;
    }

protected:
    virtual Eigen::VectorXd do_encode(const Image& x) const = 0;
    virtual Image do_decode(const Eigen::VectorXd& z) const = 0;
    virtual Eigen::VectorXd do_decoder_vjp(const Eigen::VectorXd& z, const Image& v) const {
        return fd_decoder_vjp(z, v);
    }
};

class IdentityAutoencoder final : public Autoencoder {
public:
    explicit IdentityAutoencoder(ImageShape shape) : shape_(shape) {}

    ImageShape image_shape() const override { return shape_; }
    int latent_dim() const override { return shape_.pixel_count(); }
    bool supports_exact_vjp() const override { return true; }
    std::string kind() const override { return "identity"; }

protected:
    Eigen::VectorXd do_encode(const Image& x) const override { return x.pixels; }
    Image do_decode(const Eigen::VectorXd& z) const override { return {shape_, z}; }
    Eigen::VectorXd do_decoder_vjp(const Eigen::VectorXd&, const Image& v) const override { return v.pixels; }

private:
    ImageShape shape_;
};

/// Projection autoencoder: E(x) = s .* W (x - mean), D(z) = W^T z + mean, with
/// orthonormal rows in W so W^T is its pseudo-inverse. The per-component gain
/// s defaults to 1 (D(E(x)) is then the orthogonal projection onto the
/// retained subspace); s < 1 models an encoder trained with a ridge penalty
/// that no longer inverts the decoder exactly.
class LinearAutoencoder final : public Autoencoder {
public:
    LinearAutoencoder(ImageShape shape, Eigen::MatrixXd w, Eigen::VectorXd mean, Eigen::VectorXd gain = {})
        : shape_(shape), w_(std::move(w)), mean_(std::move(mean)), gain_(std::move(gain)) {
        const Eigen::Index p = shape_.pixel_count();
        detail::require(w_.rows() >= 1 && w_.rows() <= p && w_.cols() == p, ErrorCode::Dimension,
                        "projection must be latent_dim x pixel_count with latent_dim <= pixel_count",
                        "LinearAutoencoder");
        detail::require_dim(mean_.size(), p, "LinearAutoencoder mean");
        if (gain_.size() == 0) gain_ = Eigen::VectorXd::Ones(w_.rows());
        detail::require_dim(gain_.size(), w_.rows(), "LinearAutoencoder gain");
        const double off =
            (w_ * w_.transpose() - Eigen::MatrixXd::Identity(w_.rows(), w_.rows())).cwiseAbs().maxCoeff();
        detail::require(off <= 1e-10, ErrorCode::InvalidParameter, "projection rows are not orthonormal",
                        "LinearAutoencoder");
    }

    ImageShape image_shape() const override { return shape_; }
    int latent_dim() const override { return static_cast<int>(w_.rows()); }
    bool supports_exact_vjp() const override { return true; }
    std::string kind() const override { return "linear"; }

    const Eigen::MatrixXd& projection() const noexcept { return w_; }
    Eigen::MatrixXd reconstruction() const { return w_.transpose(); }
    const Eigen::VectorXd& mean() const noexcept { return mean_; }
    const Eigen::VectorXd& gain() const noexcept { return gain_; }

protected:
    Eigen::VectorXd do_encode(const Image& x) const override {
        return gain_.cwiseProduct(w_ * (x.pixels - mean_));
    }
    Image do_decode(const Eigen::VectorXd& z) const override { return {shape_, w_.transpose() * z + mean_}; }
    Eigen::VectorXd do_decoder_vjp(const Eigen::VectorXd&, const Image& v) const override { return w_ * v.pixels; }

private:
    ImageShape shape_;
    Eigen::MatrixXd w_;
    Eigen::VectorXd mean_;
    Eigen::VectorXd gain_;
};

struct LinearFit {
    LinearAutoencoder ae;
    Eigen::VectorXd variances;  // retained principal variances, descending
};

/// PCA fit of a LinearAutoencoder. ridge > 0 shrinks each encoder component by
/// var / (var + ridge), the minimizer of a ridge-penalized linear encoder.
inline LinearFit fit_linear_autoencoder(std::span<const Image> data, int latent_dim, double ridge = 0.0) {
    detail::require(data.size() >= 2, ErrorCode::Fit, "need at least two images", "fit_linear_autoencoder");
    const ImageShape shape = data[0].shape;
    const Eigen::Index p = shape.pixel_count();
    detail::require(latent_dim >= 1 && latent_dim <= p, ErrorCode::InvalidParameter,
                    "latent_dim must lie in [1, pixel_count]", "fit_linear_autoencoder");
    detail::require(ridge >= 0.0, ErrorCode::InvalidParameter, "ridge must be >= 0", "fit_linear_autoencoder");

    Eigen::MatrixXd x(p, static_cast<Eigen::Index>(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i) {
        detail::require(data[i].shape == shape, ErrorCode::Dimension, "images differ in shape",
                        "fit_linear_autoencoder");
        x.col(static_cast<Eigen::Index>(i)) = data[i].pixels;
    }
    const Eigen::VectorXd mean = x.rowwise().mean();
    x.colwise() -= mean;
    const Eigen::MatrixXd cov = (x * x.transpose()) / static_cast<double>(data.size());
    detail::require(cov.trace() > 1e-14, ErrorCode::Fit, "data has zero variance", "fit_linear_autoencoder");

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    detail::require(eig.info() == Eigen::Success, ErrorCode::Fit, "eigendecomposition failed",
                    "fit_linear_autoencoder");

    Eigen::MatrixXd w(latent_dim, p);
    Eigen::VectorXd var(latent_dim);
    for (int k = 0; k < latent_dim; ++k) {
        // Eigen sorts ascending.
        const Eigen::Index col = p - 1 - k;
        Eigen::VectorXd dir = eig.eigenvectors().col(col);
        Eigen::Index arg = 0;
        dir.cwiseAbs().maxCoeff(&arg);
        if (dir[arg] < 0.0) dir = -dir;
        w.row(k) = dir.transpose();
        var[k] = std::max(0.0, eig.eigenvalues()[col]);
    }
    Eigen::VectorXd gain = Eigen::VectorXd::Ones(latent_dim);
    if (ridge > 0.0) {
        for (int k = 0; k < latent_dim; ++k) gain[k] = var[k] / (var[k] + ridge);
    }
    return {LinearAutoencoder(shape, std::move(w), mean, std::move(gain)), var};
}

/// Small nonlinear autoencoder with fixed random weights: 2x2 average pooling
/// down, nearest upsampling plus a tanh-gated 3x3 residual convolution up.
/// It has no analytic decoder Jacobian and exercises the finite-difference path.
class TinyConvAutoencoder final : public Autoencoder {
public:
    TinyConvAutoencoder(ImageShape shape, std::uint64_t seed) : shape_(shape), seed_(seed) {
        detail::require(shape.height % 2 == 0 && shape.width % 2 == 0 && shape.height > 0 && shape.width > 0,
                        ErrorCode::InvalidParameter, "tiny-conv autoencoder needs even image sides",
                        "TinyConvAutoencoder");
        Rng rng(seed);
        kernel_.resize(9 * shape.channels * shape.channels);
        for (double& k : kernel_) k = 0.2 * rng.normal();
    }

    ImageShape image_shape() const override { return shape_; }
    int latent_dim() const override { return (shape_.height / 2) * (shape_.width / 2) * shape_.channels; }
    std::string kind() const override { return "tiny-conv"; }
    std::uint64_t seed() const noexcept { return seed_; }

protected:
    Eigen::VectorXd do_encode(const Image& x) const override {
        const int h2 = shape_.height / 2, w2 = shape_.width / 2, c = shape_.channels;
        Eigen::VectorXd z(latent_dim());
        for (int y = 0; y < h2; ++y)
            for (int xx = 0; xx < w2; ++xx)
                for (int ch = 0; ch < c; ++ch) {
                    const double s = x.at(2 * y, 2 * xx, ch) + x.at(2 * y + 1, 2 * xx, ch) +
                                     x.at(2 * y, 2 * xx + 1, ch) + x.at(2 * y + 1, 2 * xx + 1, ch);
                    z[(y * w2 + xx) * c + ch] = 0.25 * s;
                }
        return z;
    }

    Image do_decode(const Eigen::VectorXd& z) const override {
        const int h = shape_.height, w = shape_.width, c = shape_.channels, w2 = w / 2;
        Image up(shape_);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < c; ++ch) up.at(y, x, ch) = z[((y / 2) * w2 + x / 2) * c + ch];
        Image out = up;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int co = 0; co < c; ++co) {
                    double acc = 0.0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = y + dy, xx = x + dx;
                            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                            for (int ci = 0; ci < c; ++ci)
                                acc += kernel_[static_cast<std::size_t>((((dy + 1) * 3 + dx + 1) * c + ci) * c + co)] *
                                       up.at(yy, xx, ci);
                        }
                    out.at(y, x, co) += 0.1 * std::tanh(acc);
                }
        return out;
    }

private:
    ImageShape shape_;
    std::uint64_t seed_;
    std::vector<double> kernel_;
};

} // namespace lbi
