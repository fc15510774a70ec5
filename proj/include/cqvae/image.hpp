#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace cqvae {

// Grayscale image, row-major float32 in [0,1]. Pixel (x, y) covers the unit
// square with center (x + 0.5, y + 0.5); shapes live in this continuous
// pixel coordinate system.
struct ImageF {
    int h = 0;
    int w = 0;
    std::vector<float> pix;

    ImageF() = default;
    ImageF(int height, int width, float fill = 0.0f)
        : h(height), w(width), pix(size_t(height) * size_t(width), fill) {
        if (height <= 0 || width <= 0) {
            throw std::invalid_argument("ImageF: nonpositive size " + std::to_string(height) + "x" +
                                        std::to_string(width));
        }
    }

    float& at(int y, int x) { return pix[size_t(y) * size_t(w) + size_t(x)]; }
    float at(int y, int x) const { return pix[size_t(y) * size_t(w) + size_t(x)]; }

    // Bilinear sample at a continuous point, clamped to the image border.
    double bilinear(double x, double y) const {
        const double fx = std::clamp(x - 0.5, 0.0, double(w - 1));
        const double fy = std::clamp(y - 0.5, 0.0, double(h - 1));
        const int x0 = std::min(int(fx), w - 2 < 0 ? 0 : w - 2);
        const int y0 = std::min(int(fy), h - 2 < 0 ? 0 : h - 2);
        const int x1 = std::min(x0 + 1, w - 1);
        const int y1 = std::min(y0 + 1, h - 1);
        const double ax = fx - x0, ay = fy - y0;
        return (1 - ax) * (1 - ay) * at(y0, x0) + ax * (1 - ay) * at(y0, x1) +
               (1 - ax) * ay * at(y1, x0) + ax * ay * at(y1, x1);
    }
};

inline ImageF gaussian_blur(const ImageF& in, double sigma) {
    if (sigma <= 0.0) return in;
    const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
    std::vector<double> k(size_t(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[size_t(i + radius)] = std::exp(-0.5 * (double(i) * i) / (sigma * sigma));
        sum += k[size_t(i + radius)];
    }
    for (double& v : k) v /= sum;

    ImageF tmp(in.h, in.w);
    for (int y = 0; y < in.h; ++y) {
        for (int x = 0; x < in.w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int xx = std::clamp(x + i, 0, in.w - 1);
                acc += k[size_t(i + radius)] * in.at(y, xx);
            }
            tmp.at(y, x) = float(acc);
        }
    }
    ImageF out(in.h, in.w);
    for (int y = 0; y < in.h; ++y) {
        for (int x = 0; x < in.w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int yy = std::clamp(y + i, 0, in.h - 1);
                acc += k[size_t(i + radius)] * tmp.at(yy, x);
            }
            out.at(y, x) = float(acc);
        }
    }
    return out;
}

// Binary 8-bit PGM, for eyeballing generated scenes.
inline void write_pgm(const ImageF& img, const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("write_pgm: cannot open " + path);
    std::fprintf(f, "P5\n%d %d\n255\n", img.w, img.h);
    for (float v : img.pix) {
        const int byte = std::clamp(int(std::lround(double(v) * 255.0)), 0, 255);
        std::fputc(byte, f);
    }
    std::fclose(f);
}

struct Rgb {
    uint8_t r = 0, g = 0, b = 0;
};

// Diverging map for variation overlays: low values red, high values blue,
// white in the middle.
inline Rgb variation_color(double t) {
    const double u = std::clamp(t, 0.0, 1.0);
    auto chan = [](double v) { return uint8_t(std::clamp(int(std::lround(v * 255.0)), 0, 255)); };
    if (u < 0.5) {
        const double s = u / 0.5;  // red -> white
        return Rgb{chan(1.0), chan(0.25 + 0.75 * s), chan(0.25 + 0.75 * s)};
    }
    const double s = (u - 0.5) / 0.5;  // white -> blue
    return Rgb{chan(1.0 - 0.75 * s), chan(1.0 - 0.75 * s), chan(1.0)};
}

inline void write_ppm(const std::vector<Rgb>& pixels, int h, int w, const std::string& path) {
    if (int(pixels.size()) != h * w) {
        throw std::invalid_argument("write_ppm: pixel count does not match size");
    }
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    std::fprintf(f, "P6\n%d %d\n255\n", w, h);
    for (const Rgb& p : pixels) {
        std::fputc(p.r, f);
        std::fputc(p.g, f);
        std::fputc(p.b, f);
    }
    std::fclose(f);
}

}  // namespace cqvae
