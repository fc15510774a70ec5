#pragma once

#include <vector>

#include "cqvae/rng.hpp"
#include "cqvae/shape.hpp"

namespace cqvae {

// Per-image annotations: E expert outlines plus the consensus outline, all
// with the same point count and correspondence.
struct ExpertSet {
    std::vector<Shape> experts;
    Shape consensus;
};

// Injective assignment from ground-truth sample index k to model sample
// index l(k), with the matched distances.
struct MatchResult {
    std::vector<int> model_for_gt;    // model_for_gt[k] = l(k)
    std::vector<double> distances;    // distance of pair k
    double total_cost = 0.0;
};

// Uniform draw from the standard simplex (Dirichlet with all-ones
// concentration): E exponential(1) variates, normalized. Normalizing plain
// uniforms instead would pile mass toward the center.
std::vector<double> sample_simplex(int e, RngStream& rng);

// k_max random convex combinations of the expert shapes, each one a pointwise
// mixture sharing the experts' correspondence.
std::vector<Shape> sample_gt_shapes(const ExpertSet& experts, int k_max, RngStream& rng);

// Euclidean norm of the flattened 2J-dimensional difference.
double shape_distance(const Shape& a, const Shape& b);

// Pairwise distances, rows = ground-truth samples, cols = model samples.
std::vector<std::vector<double>> distance_matrix(const std::vector<Shape>& model_shapes,
                                                 const std::vector<Shape>& gt_shapes);

// Repeatedly fix the globally minimum-distance unmatched (gt, model) pair
// until every ground-truth sample is matched; ties break toward the smaller
// gt index, then the smaller model index. Requires at least as many model
// samples as ground-truth samples; the surplus stays unmatched.
MatchResult greedy_match(const std::vector<std::vector<double>>& distances);
MatchResult greedy_match(const std::vector<Shape>& model_shapes,
                         const std::vector<Shape>& gt_shapes);

// Exhaustive minimum-cost injective assignment; a test oracle only, bounded
// to k <= l <= 8.
MatchResult optimal_match_oracle(const std::vector<std::vector<double>>& distances);

}  // namespace cqvae
