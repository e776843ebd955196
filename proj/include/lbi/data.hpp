#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "lbi/autoencoder.hpp"
#include "lbi/error.hpp"
#include "lbi/rng.hpp"

namespace lbi {

enum class DataKind { Gauss2d, Shapes };

inline std::string_view to_string(DataKind k) { return k == DataKind::Gauss2d ? "gauss2d" : "shapes"; }

inline DataKind parse_data_kind(std::string_view s) {
    if (s == "gauss2d") return DataKind::Gauss2d;
    if (s == "shapes") return DataKind::Shapes;
    throw Error(ErrorCode::InvalidParameter, "unknown data kind '" + std::string(s) + "'", "gen_data");
}

struct DataParams {
    // gauss2d: mixture of `components` isotropic Gaussians with means on a
    // circle of `radius` (first two coordinates), per-coordinate std `spread`.
    int dim = 2;
    int components = 4;
    double radius = 2.0;
    double spread = 0.3;
    // shapes
    int height = 16;
    int width = 16;
    int max_shapes = 3;
};

struct PointSet {
    std::vector<Eigen::VectorXd> points;
    std::vector<int> labels;
};

inline PointSet gen_gauss2d(int n, std::uint64_t seed, const DataParams& p = {}) {
    detail::require(n >= 1, ErrorCode::InvalidParameter, "n must be >= 1", "gen_data");
    detail::require(p.dim >= 1 && p.components >= 1 && p.spread > 0.0, ErrorCode::InvalidParameter,
                    "invalid gauss2d parameters", "gen_data");
    PointSet out;
    out.points.reserve(static_cast<std::size_t>(n));
    out.labels.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng(seed).split(static_cast<std::uint64_t>(i));
        const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(p.components)));
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(p.dim);
        const double a = 2.0 * std::numbers::pi * k / p.components;
        mean[0] = p.radius * std::cos(a);
        if (p.dim > 1) mean[1] = p.radius * std::sin(a);
        out.points.push_back(mean + p.spread * rng.normal_vector(p.dim));
        out.labels.push_back(k);
    }
    return out;
}

/// One procedural grayscale image: a linear gradient background with up to
/// `max_shapes` rectangles and discs painted over it. Values lie in [0, 1].
inline Image gen_shape_image(std::uint64_t seed, const DataParams& p = {}) {
    detail::require(p.height >= 1 && p.width >= 1 && p.max_shapes >= 0, ErrorCode::InvalidParameter,
                    "invalid shapes parameters", "gen_data");
    Rng rng(seed);
    Image img(ImageShape{p.height, p.width, 1});
    const double base = rng.uniform(0.1, 0.5);
    const double gy = rng.uniform(-0.3, 0.3), gx = rng.uniform(-0.3, 0.3);
    for (int y = 0; y < p.height; ++y)
        for (int x = 0; x < p.width; ++x)
            img.at(y, x) = base + gy * y / std::max(1, p.height - 1) + gx * x / std::max(1, p.width - 1);

    const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, p.max_shapes))));
    for (int s = 0; s < count && p.max_shapes > 0; ++s) {
        const double value = rng.uniform(0.0, 1.0);
        if (rng.uniform() < 0.5) {
            const int h = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, p.height / 2))));
            const int w = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, p.width / 2))));
            const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(p.height)));
            const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(p.width)));
            for (int y = y0; y < std::min(p.height, y0 + h); ++y)
                for (int x = x0; x < std::min(p.width, x0 + w); ++x) img.at(y, x) = value;
        } else {
            const double cy = rng.uniform(0.0, p.height), cx = rng.uniform(0.0, p.width);
            const double r = rng.uniform(1.5, 0.35 * std::min(p.height, p.width) + 1.5);
            for (int y = 0; y < p.height; ++y)
                for (int x = 0; x < p.width; ++x) {
                    const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
                    if (dy * dy + dx * dx <= r * r) img.at(y, x) = value;
                }
        }
    }
    img.pixels = img.pixels.cwiseMax(0.0).cwiseMin(1.0);
    return img;
}

/// n images; image i is drawn from the stream hash(seed, i).
inline std::vector<Image> gen_shapes(int n, std::uint64_t seed, const DataParams& p = {}) {
    detail::require(n >= 1, ErrorCode::InvalidParameter, "n must be >= 1", "gen_data");
    std::vector<Image> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(gen_shape_image(hash_combine(seed, static_cast<std::uint64_t>(i)), p));
    return out;
}

} // namespace lbi
