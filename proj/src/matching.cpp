#include "cqvae/matching.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace cqvae {

std::vector<double> sample_simplex(int e, RngStream& rng) {
    if (e < 1) throw std::invalid_argument("sample_simplex: need at least one component");
    std::vector<double> a(static_cast<size_t>(e));
    double sum = 0.0;
    for (double& v : a) {
        v = rng.exponential();
        sum += v;
    }
    for (double& v : a) v /= sum;
    return a;
}

std::vector<Shape> sample_gt_shapes(const ExpertSet& experts, int k_max, RngStream& rng) {
    if (experts.experts.empty()) {
        throw std::invalid_argument("sample_gt_shapes: empty expert set");
    }
    if (k_max < 1) throw std::invalid_argument("sample_gt_shapes: k_max must be positive");
    const size_t j = experts.experts.front().size();
    for (const Shape& s : experts.experts) require_same_size(experts.experts.front(), s, "sample_gt_shapes");
    std::vector<Shape> out;
    out.reserve(size_t(k_max));
    for (int k = 0; k < k_max; ++k) {
        const std::vector<double> alpha = sample_simplex(int(experts.experts.size()), rng);
        Shape s(j);
        for (size_t i = 0; i < experts.experts.size(); ++i) {
            const double a = alpha[i];
            const Shape& ex = experts.experts[i];
            for (size_t p = 0; p < j; ++p) {
                s.points[p].x += a * ex.points[p].x;
                s.points[p].y += a * ex.points[p].y;
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

double shape_distance(const Shape& a, const Shape& b) {
    require_same_size(a, b, "shape_distance");
    double sq = 0.0;
    for (size_t j = 0; j < a.size(); ++j) {
        const double dx = a.points[j].x - b.points[j].x;
        const double dy = a.points[j].y - b.points[j].y;
        sq += dx * dx + dy * dy;
    }
    return std::sqrt(sq);
}

std::vector<std::vector<double>> distance_matrix(const std::vector<Shape>& model_shapes,
                                                 const std::vector<Shape>& gt_shapes) {
    std::vector<std::vector<double>> d(gt_shapes.size(), std::vector<double>(model_shapes.size()));
    for (size_t k = 0; k < gt_shapes.size(); ++k) {
        for (size_t l = 0; l < model_shapes.size(); ++l) {
            d[k][l] = shape_distance(gt_shapes[k], model_shapes[l]);
        }
    }
    return d;
}

MatchResult greedy_match(const std::vector<std::vector<double>>& distances) {
    const size_t k_max = distances.size();
    if (k_max == 0) throw std::invalid_argument("greedy_match: no ground-truth samples");
    const size_t l_max = distances.front().size();
    for (const auto& row : distances) {
        if (row.size() != l_max) throw std::invalid_argument("greedy_match: ragged distance matrix");
    }
    if (l_max < k_max) {
        throw std::invalid_argument("greedy_match: need at least as many model samples (" +
                                    std::to_string(l_max) + ") as ground-truth samples (" +
                                    std::to_string(k_max) + ")");
    }
    MatchResult res;
    res.model_for_gt.assign(k_max, -1);
    res.distances.assign(k_max, 0.0);
    std::vector<bool> gt_done(k_max, false), model_done(l_max, false);
    for (size_t round = 0; round < k_max; ++round) {
        double best = std::numeric_limits<double>::infinity();
        size_t bk = 0, bl = 0;
        for (size_t k = 0; k < k_max; ++k) {
            if (gt_done[k]) continue;
            for (size_t l = 0; l < l_max; ++l) {
                if (model_done[l]) continue;
                if (distances[k][l] < best) {  // strict: first (k,l) in scan order wins ties
                    best = distances[k][l];
                    bk = k;
                    bl = l;
                }
            }
        }
        gt_done[bk] = true;
        model_done[bl] = true;
        res.model_for_gt[bk] = int(bl);
        res.distances[bk] = best;
        res.total_cost += best;
    }
    return res;
}

MatchResult greedy_match(const std::vector<Shape>& model_shapes,
                         const std::vector<Shape>& gt_shapes) {
    return greedy_match(distance_matrix(model_shapes, gt_shapes));
}

namespace {

void search_assignments(const std::vector<std::vector<double>>& d, size_t k, double cost,
                        std::vector<int>& current, std::vector<bool>& used, double& best_cost,
                        std::vector<int>& best) {
    if (cost >= best_cost) return;
    if (k == d.size()) {
        best_cost = cost;
        best = current;
        return;
    }
    for (size_t l = 0; l < d[k].size(); ++l) {
        if (used[l]) continue;
        used[l] = true;
        current[k] = int(l);
        search_assignments(d, k + 1, cost + d[k][l], current, used, best_cost, best);
        used[l] = false;
    }
}

}  // namespace

MatchResult optimal_match_oracle(const std::vector<std::vector<double>>& distances) {
    const size_t k_max = distances.size();
    if (k_max == 0) throw std::invalid_argument("optimal_match_oracle: empty matrix");
    const size_t l_max = distances.front().size();
    for (const auto& row : distances) {
        if (row.size() != l_max) {
            throw std::invalid_argument("optimal_match_oracle: ragged distance matrix");
        }
    }
    if (l_max < k_max) {
        throw std::invalid_argument("optimal_match_oracle: need l >= k");
    }
    if (l_max > 8) {
        throw std::invalid_argument("optimal_match_oracle: exhaustive search bounded to l <= 8, got " +
                                    std::to_string(l_max));
    }
    std::vector<int> current(k_max, -1), best;
    std::vector<bool> used(l_max, false);
    double best_cost = std::numeric_limits<double>::infinity();
    search_assignments(distances, 0, 0.0, current, used, best_cost, best);
    MatchResult res;
    res.model_for_gt = best;
    res.total_cost = best_cost;
    res.distances.resize(k_max);
    for (size_t k = 0; k < k_max; ++k) res.distances[k] = distances[k][size_t(best[k])];
    return res;
}

}  // namespace cqvae
