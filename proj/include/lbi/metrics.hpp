#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "lbi/autoencoder.hpp"
#include "lbi/dynamics.hpp"
#include "lbi/error.hpp"
#include "lbi/rng.hpp"

namespace lbi {

namespace detail {

inline void require_same_shape(const Image& x, const Image& y, const char* what) {
    if (!(x.shape == y.shape)) throw Error(ErrorCode::Dimension, "image shapes differ", what);
}

} // namespace detail

/// 10 log10(range^2 / MSE); +infinity for identical images.
inline double psnr(const Image& x, const Image& y, double data_range = 1.0) {
    detail::require_same_shape(x, y, "psnr");
    detail::require(data_range > 0.0, ErrorCode::InvalidParameter, "data_range must be > 0", "psnr");
    const double mse = (x.pixels - y.pixels).squaredNorm() / static_cast<double>(x.pixels.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / mse);
}

struct SsimParams {
    int window = 7;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double data_range = 1.0;
};

/// Mean local SSIM over all fully contained Gaussian windows, averaged over
/// channels. Images smaller than the window fall back to one global window
/// with uniform weights. When `grad_y` is given it receives dSSIM/dy.
inline double ssim(const Image& x, const Image& y, const SsimParams& p = {}, Image* grad_y = nullptr) {
    detail::require_same_shape(x, y, "ssim");
    const int h = x.shape.height, w = x.shape.width, nc = x.shape.channels;
    const double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
    const double c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);

    const bool global = h < p.window || w < p.window;
    const int wh = global ? h : p.window;
    const int ww = global ? w : p.window;
    Eigen::MatrixXd weights(wh, ww);
    if (global) {
        weights.setConstant(1.0 / static_cast<double>(h * w));
    } else {
        Eigen::VectorXd g(p.window);
        const double mid = 0.5 * (p.window - 1);
        for (int i = 0; i < p.window; ++i) g[i] = std::exp(-0.5 * (i - mid) * (i - mid) / (p.sigma * p.sigma));
        g /= g.sum();
        weights = g * g.transpose();
    }
    const int ny = h - wh + 1, nx = w - ww + 1;
    const double n_windows = static_cast<double>(ny) * nx * nc;

    if (grad_y != nullptr) *grad_y = Image(y.shape, 0.0);
    double total = 0.0;
    for (int c = 0; c < nc; ++c) {
        for (int oy = 0; oy < ny; ++oy) {
            for (int ox = 0; ox < nx; ++ox) {
                double mx = 0, my = 0, exx = 0, eyy = 0, exy = 0;
                for (int dy = 0; dy < wh; ++dy)
                    for (int dx = 0; dx < ww; ++dx) {
                        const double g = weights(dy, dx);
                        const double a = x.at(oy + dy, ox + dx, c), b = y.at(oy + dy, ox + dx, c);
                        mx += g * a;
                        my += g * b;
                        exx += g * a * a;
                        eyy += g * b * b;
                        exy += g * a * b;
                    }
                const double vx = exx - mx * mx, vy = eyy - my * my, cxy = exy - mx * my;
                const double num_l = 2.0 * mx * my + c1, num_s = 2.0 * cxy + c2;
                const double den_l = mx * mx + my * my + c1, den_s = vx + vy + c2;
                const double s = (num_l * num_s) / (den_l * den_s);
                total += s;
                if (grad_y != nullptr) {
                    const double scale = s / n_windows;
                    for (int dy = 0; dy < wh; ++dy)
                        for (int dx = 0; dx < ww; ++dx) {
                            const double g = weights(dy, dx);
                            const double a = x.at(oy + dy, ox + dx, c), b = y.at(oy + dy, ox + dx, c);
                            grad_y->at(oy + dy, ox + dx, c) +=
                                scale * g *
                                (2.0 * mx / num_l + 2.0 * (a - mx) / num_s - 2.0 * my / den_l - 2.0 * (b - my) / den_s);
                        }
                }
            }
        }
    }
    return total / n_windows;
}

/// Feature-space image distance standing in for a learned perceptual metric.
class PerceptualMetric {
public:
    virtual ~PerceptualMetric() = default;
    virtual std::string kind() const = 0;
    virtual double distance(const Image& x, const Image& y) const = 0;

    /// d distance / dy. Central differences unless a backend overrides it.
    virtual Image gradient_y(const Image& x, const Image& y) const {
        Image g(y.shape, 0.0);
        Image probe = y;
        for (Eigen::Index i = 0; i < y.pixels.size(); ++i) {
            const double h = 1e-5 * (1.0 + std::abs(y.pixels[i]));
            probe.pixels[i] = y.pixels[i] + h;
            const double fp = distance(x, probe);
            probe.pixels[i] = y.pixels[i] - h;
            const double fm = distance(x, probe);
            probe.pixels[i] = y.pixels[i];
            g.pixels[i] = (fp - fm) / (2.0 * h);
        }
        return g;
    }
};

/// Untrained two-layer convolutional feature extractor with fixed random
/// weights (3x3 kernels, stride 1, zero padding, tanh; 8 then 16 channels).
/// Features are normalized to unit length across channels at every pixel and
/// compared by squared difference averaged over pixels, summed over layers.
/// This is not LPIPS; it only keeps a differentiable feature-space term.
class RandomConvPerceptual final : public PerceptualMetric {
public:
    explicit RandomConvPerceptual(int in_channels = 1, std::uint64_t seed = 1234) : seed_(seed) {
        Rng rng(seed);
        const int widths[3] = {in_channels, 8, 16};
        for (int l = 0; l < 2; ++l) {
            Layer layer;
            layer.cin = widths[l];
            layer.cout = widths[l + 1];
            layer.kernel.resize(static_cast<std::size_t>(9 * layer.cin * layer.cout));
            const double scale = 1.5 / std::sqrt(9.0 * layer.cin);
            for (double& k : layer.kernel) k = scale * rng.normal();
            layer.bias.resize(static_cast<std::size_t>(layer.cout));
            for (double& b : layer.bias) b = 0.1 * rng.normal();
            layers_.push_back(std::move(layer));
        }
    }

    std::string kind() const override { return "random-conv"; }
    std::uint64_t seed() const noexcept { return seed_; }

    double distance(const Image& x, const Image& y) const override {
        check(x, y);
        const auto fx = features(x), fy = features(y);
        double d = 0.0;
        for (std::size_t l = 0; l < layers_.size(); ++l) d += layer_distance(fx[l].normed, fy[l].normed);
        return d;
    }

    Image gradient_y(const Image& x, const Image& y) const override {
        check(x, y);
        const auto fx = features(x), fy = features(y);
        const int h = y.shape.height, w = y.shape.width;
        const double inv_pix = 1.0 / static_cast<double>(h * w);

        // Walk back from the last layer; g_act holds d/d(tanh output) of layer l.
        Tensor g_act;
        for (std::size_t li = layers_.size(); li-- > 0;) {
            const Layer& layer = layers_[li];
            const Tensor& act = fy[li].act;
            Tensor g = li + 1 == layers_.size() ? Tensor(h, w, layer.cout) : std::move(g_act);
            // Normalization term of this layer.
            for (int p = 0; p < h * w; ++p) {
                double ss = 0.0, dot = 0.0;
                for (int c = 0; c < layer.cout; ++c) ss += act.v[idx(p, c, layer.cout)] * act.v[idx(p, c, layer.cout)];
                const double s = std::sqrt(ss + kNormEps);
                Eigen::VectorXd gn(layer.cout);
                for (int c = 0; c < layer.cout; ++c) {
                    const std::size_t k = idx(p, c, layer.cout);
                    gn[c] = 2.0 * inv_pix * (fy[li].normed.v[k] - fx[li].normed.v[k]);
                    dot += act.v[k] * gn[c];
                }
                for (int c = 0; c < layer.cout; ++c) {
                    const std::size_t k = idx(p, c, layer.cout);
                    g.v[k] += gn[c] / s - act.v[k] * dot / (s * s * s);
                }
            }
            // Through tanh and the convolution.
            for (std::size_t k = 0; k < g.v.size(); ++k) g.v[k] *= 1.0 - act.v[k] * act.v[k];
            g_act = conv_backward_input(layer, g, h, w);
        }
        return {y.shape, Eigen::Map<const Eigen::VectorXd>(g_act.v.data(), static_cast<Eigen::Index>(g_act.v.size()))};
    }

private:
    static constexpr double kNormEps = 1e-10;

    struct Layer {
        int cin = 1, cout = 1;
        std::vector<double> kernel;  // [ky][kx][cin][cout]
        std::vector<double> bias;

        double k(int ky, int kx, int ci, int co) const {
            return kernel[static_cast<std::size_t>(((ky * 3 + kx) * cin + ci) * cout + co)];
        }
    };

    struct Tensor {
        int h = 0, w = 0, c = 0;
        std::vector<double> v;
        Tensor() = default;
        Tensor(int hh, int ww, int cc) : h(hh), w(ww), c(cc), v(static_cast<std::size_t>(hh * ww * cc), 0.0) {}
    };

    struct LayerOut {
        Tensor act;
        Tensor normed;
    };

    static std::size_t idx(int p, int c, int nc) { return static_cast<std::size_t>(p * nc + c); }

    void check(const Image& x, const Image& y) const {
        detail::require_same_shape(x, y, "perceptual");
        detail::require(x.shape.channels == layers_[0].cin, ErrorCode::Dimension,
                        "perceptual metric built for a different channel count", "perceptual");
    }

    static Tensor conv_forward(const Layer& layer, const Tensor& in) {
        Tensor out(in.h, in.w, layer.cout);
        for (int y = 0; y < in.h; ++y)
            for (int x = 0; x < in.w; ++x)
                for (int co = 0; co < layer.cout; ++co) {
                    double acc = layer.bias[static_cast<std::size_t>(co)];
                    for (int ky = 0; ky < 3; ++ky) {
                        const int yy = y + ky - 1;
                        if (yy < 0 || yy >= in.h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int xx = x + kx - 1;
                            if (xx < 0 || xx >= in.w) continue;
                            for (int ci = 0; ci < layer.cin; ++ci)
                                acc += layer.k(ky, kx, ci, co) * in.v[idx(yy * in.w + xx, ci, layer.cin)];
                        }
                    }
                    out.v[idx(y * in.w + x, co, layer.cout)] = acc;
                }
        return out;
    }

    static Tensor conv_backward_input(const Layer& layer, const Tensor& g_out, int h, int w) {
        Tensor g_in(h, w, layer.cin);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int co = 0; co < layer.cout; ++co) {
                    const double g = g_out.v[idx(y * w + x, co, layer.cout)];
                    if (g == 0.0) continue;
                    for (int ky = 0; ky < 3; ++ky) {
                        const int yy = y + ky - 1;
                        if (yy < 0 || yy >= h) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            const int xx = x + kx - 1;
                            if (xx < 0 || xx >= w) continue;
                            for (int ci = 0; ci < layer.cin; ++ci)
                                g_in.v[idx(yy * w + xx, ci, layer.cin)] += layer.k(ky, kx, ci, co) * g;
                        }
                    }
                }
        return g_in;
    }

    std::vector<LayerOut> features(const Image& img) const {
        Tensor cur(img.shape.height, img.shape.width, img.shape.channels);
        for (std::size_t k = 0; k < cur.v.size(); ++k) cur.v[k] = img.pixels[static_cast<Eigen::Index>(k)];
        std::vector<LayerOut> outs;
        for (const Layer& layer : layers_) {
            Tensor act = conv_forward(layer, cur);
            for (double& a : act.v) a = std::tanh(a);
            Tensor normed = act;
            for (int p = 0; p < act.h * act.w; ++p) {
                double ss = 0.0;
                for (int c = 0; c < act.c; ++c) ss += act.v[idx(p, c, act.c)] * act.v[idx(p, c, act.c)];
                const double s = std::sqrt(ss + kNormEps);
                for (int c = 0; c < act.c; ++c) normed.v[idx(p, c, act.c)] /= s;
            }
            cur = act;
            outs.push_back({std::move(act), std::move(normed)});
        }
        return outs;
    }

    static double layer_distance(const Tensor& a, const Tensor& b) {
        double d = 0.0;
        for (std::size_t k = 0; k < a.v.size(); ++k) d += (a.v[k] - b.v[k]) * (a.v[k] - b.v[k]);
        return d / static_cast<double>(a.h * a.w);
    }

    std::uint64_t seed_;
    std::vector<Layer> layers_;
};

struct MetricReport {
    double psnr_db = 0.0;  // +infinity for a perfect reconstruction
    double ssim = 0.0;
    double perceptual = 0.0;
    double roundtrip_l2_rel = 0.0;
};

inline double relative_l2(const Eigen::VectorXd& approx, const Eigen::VectorXd& ref) {
    detail::require_dim(approx.size(), ref.size(), "relative_l2");
    const double n = ref.norm();
    const double e = (approx - ref).norm();
    return n > 0.0 ? e / n : e;
}

/// Per-timestep distance between an inversion sweep and the generation replay
/// from its endpoint, ordered by increasing t.
inline std::vector<double> trajectory_divergence(const Trajectory& inv, const Trajectory& gen) {
    detail::require(inv.direction == Direction::Inversion && gen.direction == Direction::Generation,
                     ErrorCode::InvalidInput, "need one inversion and one generation trajectory",
                     "trajectory_divergence");
    detail::require(inv.grid == gen.grid && inv.entries.size() == gen.entries.size(), ErrorCode::InvalidInput,
                    "trajectories use different grids", "trajectory_divergence");
    const std::size_t n = inv.entries.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& a = inv.entries[i];
        const auto& b = gen.entries[n - 1 - i];
        detail::require(a.t == b.t, ErrorCode::InvalidInput, "trajectory timesteps are not aligned",
                        "trajectory_divergence");
        out[i] = (a.z - b.z).norm();
    }
    return out;
}

} // namespace lbi
