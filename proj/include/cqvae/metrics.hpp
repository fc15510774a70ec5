#pragma once

#include <string>
#include <vector>

#include "cqvae/shape.hpp"

namespace cqvae {

// Pointwise spread of a set of corresponding shapes around their mean.
struct VariationReport {
    Shape mean_shape;
    std::vector<double> per_point;  // mean distance of point j to its mean position
    double scalar = 0.0;            // average of per_point over all points
};

// Mean shape, per-point variation, and their scalar average over K sampled
// shapes with shared correspondence.
VariationReport shape_variation(const std::vector<Shape>& samples);

// Mean pointwise Euclidean distance between a shape and the consensus.
double bias(const Shape& s, const Shape& s_star);

// Pearson correlation. The series names are used in the zero-variance error
// message so callers can tell which input was degenerate.
double correlation(const std::vector<double>& xs, const std::vector<double>& ys,
                   const std::string& x_name = "x", const std::string& y_name = "y");

}  // namespace cqvae
