#pragma once

// Helpers shared by the test binaries: exception-message capture, throwaway
// files, and a tiny synthetic dataset that sidesteps the scene generator.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>

#include "doctest.h"

#include "cqvae/config.hpp"
#include "cqvae/data.hpp"
#include "cqvae/rng.hpp"

template <typename Fn>
std::string thrown_message(Fn&& fn) {
    try {
        fn();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

struct TempFile {
    std::string path;
    explicit TempFile(std::string p) : path(std::move(p)) {}
    ~TempFile() { std::remove(path.c_str()); }
};

inline std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Soft-edged discs with expert outlines jittered around the boundary; every
// fifth record lands in the test split.
inline cqvae::Dataset disc_dataset(int count, int h, int w, int j, int experts, long long seed) {
    using namespace cqvae;
    Dataset d;
    d.j = j;
    d.h = h;
    d.w = w;
    RngStream rng{uint64_t(seed)};
    for (int i = 0; i < count; ++i) {
        DataRecord r;
        r.id = "disc-" + std::to_string(i);
        r.split = (i % 5 == 4) ? "test" : "train";
        r.ambiguity = 1.0;

        const double cx = w * (0.4 + 0.2 * rng.uniform01());
        const double cy = h * (0.4 + 0.2 * rng.uniform01());
        const double radius = w * (0.18 + 0.1 * rng.uniform01());

        r.image = ImageF(h, w);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double dx = (x + 0.5) - cx;
                const double dy = (y + 0.5) - cy;
                const double dist = std::sqrt(dx * dx + dy * dy);
                r.image.at(y, x) = float(1.0 / (1.0 + std::exp((dist - radius) * 2.0)));
            }
        }

        const double pi2 = 6.283185307179586;
        for (int e = 0; e < experts; ++e) {
            Shape s{size_t(j)};
            for (int p = 0; p < j; ++p) {
                const double ang = pi2 * p / j;
                s.points[size_t(p)].x = cx + radius * std::cos(ang) + 0.3 * rng.normal();
                s.points[size_t(p)].y = cy + radius * std::sin(ang) + 0.3 * rng.normal();
            }
            r.experts.experts.push_back(s);
        }
        Shape consensus{size_t(j)};
        for (int p = 0; p < j; ++p) {
            double sx = 0.0, sy = 0.0;
            for (const Shape& s : r.experts.experts) {
                sx += s.points[size_t(p)].x;
                sy += s.points[size_t(p)].y;
            }
            consensus.points[size_t(p)].x = sx / experts;
            consensus.points[size_t(p)].y = sy / experts;
        }
        r.experts.consensus = consensus;
        d.records.push_back(std::move(r));
    }
    return d;
}

// A configuration small enough that a full training run takes well under a
// second, matched to disc_dataset(count, 16, 16, 6, ...).
inline cqvae::TrainConfig tiny_train_cfg() {
    cqvae::TrainConfig cfg;
    cfg.m = 2;
    cfg.n = 3;
    cfg.j = 6;
    cfg.h = 16;
    cfg.w = 16;
    cfg.enc_channels = {4, 8};
    cfg.k_max = 2;
    cfg.l_max = 3;
    cfg.batch = 4;
    cfg.epochs = 2;
    cfg.lr = 1e-3;
    cfg.tau_steps = 20;
    cfg.seed = 2024;
    cfg.eval_samples = 4;
    return cfg;
}
