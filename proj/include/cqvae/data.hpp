#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cqvae/image.hpp"
#include "cqvae/matching.hpp"
#include "cqvae/rng.hpp"
#include "cqvae/shape.hpp"

namespace cqvae {

// Knobs for one synthetic scene: a smooth disk-like contour annotated by
// several simulated experts whose disagreement is controlled by `ambiguity`.
// The same scalar also degrades the rendered image (stronger blur and pixel
// noise), so scene ambiguity is visible in the input, not just in the
// annotations.
struct SceneParams {
    int j = 176;       // contour points
    int h = 64;        // image height
    int w = 64;        // image width
    int experts = 3;   // simulated annotators
    double ambiguity = 1.0;
    double noise_unit = 0.02;  // expert displacement unit, fraction of image width
};

struct SyntheticScene {
    ImageF image;
    ExpertSet experts;  // consensus = the noise-free generator contour
    SceneParams params;
};

SyntheticScene generate_scene(const SceneParams& params, RngStream& rng);

// PCA over mean-centered flattened shapes.
struct StatisticalShapeModel {
    Shape mean_shape;
    std::vector<std::vector<double>> modes;  // orthonormal 2J-dim directions, strongest first
    std::vector<double> mode_variances;      // matching eigenvalues, nonincreasing
};

// Keeps the smallest number of leading modes whose cumulative eigenvalue
// share reaches `variance_fraction` of the total.
StatisticalShapeModel fit_ssm(const std::vector<Shape>& shapes, double variance_fraction);

// mean + sum_i b_i * mode_i with b_i ~ Normal(0, variance_i) truncated to
// three standard deviations. The coefficient-returning variant exists so
// sampling statistics can be tested directly.
Shape sample_ssm(const StatisticalShapeModel& ssm, RngStream& rng);
Shape sample_ssm(const StatisticalShapeModel& ssm, RngStream& rng, std::vector<double>& coeffs_out);

// Thin-plate spline interpolating `src` control points onto `dst`, with
// kernel r^2 log r plus an affine part. `lambda` smooths by relaxing exact
// interpolation.
class ThinPlateSpline {
public:
    ThinPlateSpline(const std::vector<Point2>& src, const std::vector<Point2>& dst, double lambda);
    Point2 apply(const Point2& p) const;
    Shape apply(const Shape& s) const;

private:
    std::vector<Point2> ctrl_;
    std::vector<double> wx_, wy_;  // kernel weights + 3 affine coefficients each
};

struct WarpResult {
    ImageF image;
    std::vector<Shape> shapes;  // same order as the input list
};

// Fits a TPS moving `source` onto `target` using every `control_stride`-th
// correspondence point, forward-maps `shapes` through it, and resamples the
// image by the inverse mapping with bilinear interpolation.
WarpResult tps_warp(const ImageF& image, const Shape& source, const Shape& target,
                    const std::vector<Shape>& shapes, double lambda = 0.0, int control_stride = 8);

struct DataRecord {
    std::string id;
    std::string split;  // "train" or "test"
    double ambiguity = 1.0;
    ImageF image;
    ExpertSet experts;
};

struct Dataset {
    int j = 0, h = 0, w = 0;
    SceneParams generator;  // parameters echoed for reproducibility
    std::vector<DataRecord> records;

    std::vector<const DataRecord*> split(const std::string& tag) const;
};

// `scenes` synthetic scenes, 80/20 train/test by scene index, ambiguity
// cycling through `ambiguity_levels` so both splits see every level.
Dataset generate_dataset(int scenes, uint64_t seed, const SceneParams& base,
                         const std::vector<double>& ambiguity_levels = {0.5, 1.0, 2.0});

// Grows the train split to `train_count` records: originals pass through,
// new records warp a base scene onto a virtual shape drawn from the SSM.
// The test split is copied untouched.
Dataset augment(const Dataset& base, const StatisticalShapeModel& ssm, int train_count,
                RngStream& rng);

// Directory layout: manifest.json, images/<id>.f32 (raw little-endian
// float32), shapes/<id>/{expert1..E,consensus}.csv (one "x,y" row per point).
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace cqvae
