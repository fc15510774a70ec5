#include "cqvae/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace cqvae {

VariationReport shape_variation(const std::vector<Shape>& samples) {
    if (samples.empty()) throw std::invalid_argument("shape_variation: empty sample list");
    const size_t j_max = samples.front().size();
    for (const Shape& s : samples) require_same_size(samples.front(), s, "shape_variation");
    if (j_max == 0) throw std::invalid_argument("shape_variation: shapes have no points");

    VariationReport rep;
    rep.mean_shape = Shape(j_max);
    const double inv_k = 1.0 / double(samples.size());
    for (const Shape& s : samples) {
        for (size_t j = 0; j < j_max; ++j) {
            rep.mean_shape.points[j].x += s.points[j].x * inv_k;
            rep.mean_shape.points[j].y += s.points[j].y * inv_k;
        }
    }
    rep.per_point.assign(j_max, 0.0);
    for (const Shape& s : samples) {
        for (size_t j = 0; j < j_max; ++j) {
            rep.per_point[j] += point_distance(s.points[j], rep.mean_shape.points[j]) * inv_k;
        }
    }
    for (double v : rep.per_point) rep.scalar += v;
    rep.scalar /= double(j_max);
    return rep;
}

double bias(const Shape& s, const Shape& s_star) {
    require_same_size(s, s_star, "bias");
    if (s.size() == 0) throw std::invalid_argument("bias: shapes have no points");
    double acc = 0.0;
    for (size_t j = 0; j < s.size(); ++j) acc += point_distance(s.points[j], s_star.points[j]);
    return acc / double(s.size());
}

double correlation(const std::vector<double>& xs, const std::vector<double>& ys,
                   const std::string& x_name, const std::string& y_name) {
    if (xs.size() != ys.size()) {
        throw std::invalid_argument("correlation: series lengths differ (" +
                                    std::to_string(xs.size()) + " vs " + std::to_string(ys.size()) +
                                    ")");
    }
    if (xs.size() < 2) throw std::invalid_argument("correlation: need at least two points");
    const double n = double(xs.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx, dy = ys[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if (vx == 0.0) throw std::invalid_argument("correlation: series '" + x_name + "' has zero variance");
    if (vy == 0.0) throw std::invalid_argument("correlation: series '" + y_name + "' has zero variance");
    return cov / std::sqrt(vx * vy);
}

}  // namespace cqvae
