#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace cqvae {

struct Point2 {
    double x = 0.0;
    double y = 0.0;
};

inline double point_distance(const Point2& a, const Point2& b) {
    return std::hypot(a.x - b.x, a.y - b.y);
}

// An ordered polyline of J 2D points. Point j corresponds to point j in every
// other shape drawn from the same object, which is what makes pointwise
// averages and distances meaningful.
struct Shape {
    std::vector<Point2> points;

    Shape() = default;
    explicit Shape(size_t j) : points(j) {}

    size_t size() const { return points.size(); }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(points.size() * 2);
        for (const Point2& p : points) {
            out.push_back(p.x);
            out.push_back(p.y);
        }
        return out;
    }

    static Shape from_flat(const std::vector<double>& v) {
        if (v.size() % 2 != 0) {
            throw std::invalid_argument("Shape::from_flat: odd length " + std::to_string(v.size()));
        }
        Shape s(v.size() / 2);
        for (size_t j = 0; j < s.points.size(); ++j) {
            s.points[j] = Point2{v[2 * j], v[2 * j + 1]};
        }
        return s;
    }
};

inline void require_same_size(const Shape& a, const Shape& b, const char* who) {
    if (a.size() != b.size()) {
        throw std::invalid_argument(std::string(who) + ": point counts differ (" +
                                    std::to_string(a.size()) + " vs " + std::to_string(b.size()) +
                                    ")");
    }
}

}  // namespace cqvae
