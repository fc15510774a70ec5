#include "cqvae/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <Eigen/Dense>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cqvae {

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;

// Smooth closed disk-like contour: a rotated superellipse with a few
// low-frequency radial harmonics. Parameter t doubles as the correspondence
// coordinate: point j of every shape sits at t = 2*pi*j/J of its own contour.
struct ContourGeometry {
    double cx, cy, rx, ry, rot, exponent;
    double harm_amp[3];
    double harm_phase[3];

    Point2 at(double t) const {
        double rho = 1.0;
        const int harm[3] = {2, 3, 4};
        for (int i = 0; i < 3; ++i) rho += harm_amp[i] * std::cos(harm[i] * t + harm_phase[i]);
        const double ct = std::cos(t), st = std::sin(t);
        const double e = 2.0 / exponent;
        const double ux = std::copysign(std::pow(std::fabs(ct), e), ct);
        const double uy = std::copysign(std::pow(std::fabs(st), e), st);
        const double x0 = rx * ux * rho;
        const double y0 = ry * uy * rho;
        const double cr = std::cos(rot), sr = std::sin(rot);
        return Point2{cx + x0 * cr - y0 * sr, cy + x0 * sr + y0 * cr};
    }
};

ContourGeometry draw_geometry(const SceneParams& p, RngStream& rng) {
    ContourGeometry g;
    g.cx = p.w * (0.5 + rng.uniform(-0.04, 0.04));
    g.cy = p.h * (0.5 + rng.uniform(-0.04, 0.04));
    g.rx = p.w * rng.uniform(0.30, 0.38);
    g.ry = p.h * rng.uniform(0.20, 0.28);
    g.rot = rng.uniform(-0.25, 0.25);
    g.exponent = rng.uniform(2.0, 3.2);
    for (int i = 0; i < 3; ++i) {
        g.harm_amp[i] = rng.uniform(0.0, i == 2 ? 0.03 : 0.05);
        g.harm_phase[i] = rng.uniform(0.0, kTau);
    }
    return g;
}

// Unsigned discrete curvature of a closed polyline: turn angle per unit
// length at each vertex.
std::vector<double> closed_curvature(const Shape& s) {
    const size_t j_max = s.size();
    std::vector<double> kappa(j_max, 0.0);
    for (size_t j = 0; j < j_max; ++j) {
        const Point2& prev = s.points[(j + j_max - 1) % j_max];
        const Point2& cur = s.points[j];
        const Point2& next = s.points[(j + 1) % j_max];
        const double ax = cur.x - prev.x, ay = cur.y - prev.y;
        const double bx = next.x - cur.x, by = next.y - cur.y;
        const double la = std::hypot(ax, ay), lb = std::hypot(bx, by);
        if (la == 0.0 || lb == 0.0) continue;
        const double cross = ax * by - ay * bx;
        const double dot = ax * bx + ay * by;
        kappa[j] = std::fabs(std::atan2(cross, dot)) / (0.5 * (la + lb));
    }
    return kappa;
}

// Outward unit normal at each vertex of a closed polyline.
std::vector<Point2> outward_normals(const Shape& s) {
    const size_t j_max = s.size();
    double cx = 0.0, cy = 0.0;
    for (const Point2& p : s.points) {
        cx += p.x / double(j_max);
        cy += p.y / double(j_max);
    }
    std::vector<Point2> normals(j_max);
    for (size_t j = 0; j < j_max; ++j) {
        const Point2& prev = s.points[(j + j_max - 1) % j_max];
        const Point2& next = s.points[(j + 1) % j_max];
        const double tx = next.x - prev.x, ty = next.y - prev.y;
        double nx = ty, ny = -tx;
        const double len = std::hypot(nx, ny);
        if (len > 0.0) {
            nx /= len;
            ny /= len;
        }
        if (nx * (s.points[j].x - cx) + ny * (s.points[j].y - cy) < 0.0) {
            nx = -nx;
            ny = -ny;
        }
        normals[j] = Point2{nx, ny};
    }
    return normals;
}

// Smooth periodic noise over the contour parameter: a short random Fourier
// series normalized to unit RMS over the sampled points.
std::vector<double> periodic_noise(int j_max, RngStream& rng) {
    const int harmonics = 5;
    std::vector<double> a(harmonics), b(harmonics);
    for (int h = 0; h < harmonics; ++h) {
        const double sd = 1.0 / double(h + 1);
        a[size_t(h)] = rng.normal(0.0, sd);
        b[size_t(h)] = rng.normal(0.0, sd);
    }
    std::vector<double> n(size_t(j_max), 0.0);
    double rms = 0.0;
    for (int j = 0; j < j_max; ++j) {
        const double t = kTau * j / j_max;
        double v = 0.0;
        for (int h = 0; h < harmonics; ++h) {
            v += a[size_t(h)] * std::cos((h + 1) * t) + b[size_t(h)] * std::sin((h + 1) * t);
        }
        n[size_t(j)] = v;
        rms += v * v;
    }
    rms = std::sqrt(rms / j_max);
    if (rms > 0.0) {
        for (double& v : n) v /= rms;
    }
    return n;
}

// Even-odd scanline fill of a closed polygon at `factor`-times supersampling,
// box-downsampled to a coverage mask in [0,1].
ImageF rasterize_mask(const Shape& contour, int h, int w, int factor) {
    const int hh = h * factor, ww = w * factor;
    std::vector<uint8_t> super(size_t(hh) * size_t(ww), 0);
    const size_t j_max = contour.size();
    std::vector<double> xs;
    for (int y = 0; y < hh; ++y) {
        const double yline = (y + 0.5) / factor;
        xs.clear();
        for (size_t j = 0; j < j_max; ++j) {
            const Point2& p1 = contour.points[j];
            const Point2& p2 = contour.points[(j + 1) % j_max];
            if ((p1.y <= yline && yline < p2.y) || (p2.y <= yline && yline < p1.y)) {
                xs.push_back(p1.x + (yline - p1.y) * (p2.x - p1.x) / (p2.y - p1.y));
            }
        }
        std::sort(xs.begin(), xs.end());
        for (size_t i = 0; i + 1 < xs.size(); i += 2) {
            const int x0 = std::max(0, int(std::ceil(xs[i] * factor - 0.5)));
            const int x1 = std::min(ww - 1, int(std::floor(xs[i + 1] * factor - 0.5)));
            for (int x = x0; x <= x1; ++x) super[size_t(y) * ww + size_t(x)] = 1;
        }
    }
    ImageF mask(h, w, 0.0f);
    const double inv = 1.0 / double(factor * factor);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int cnt = 0;
            for (int sy = 0; sy < factor; ++sy) {
                for (int sx = 0; sx < factor; ++sx) {
                    cnt += super[size_t(y * factor + sy) * ww + size_t(x * factor + sx)];
                }
            }
            mask.at(y, x) = float(cnt * inv);
        }
    }
    return mask;
}

double tps_kernel(double r) { return r > 0.0 ? r * r * std::log(r) : 0.0; }

}  // namespace

SyntheticScene generate_scene(const SceneParams& params, RngStream& rng) {
    if (params.j < 8 || params.h < 8 || params.w < 8 || params.experts < 1) {
        throw std::invalid_argument("generate_scene: parameters too small");
    }
    const ContourGeometry geom = draw_geometry(params, rng);

    Shape consensus(size_t(params.j));
    for (int j = 0; j < params.j; ++j) {
        consensus.points[size_t(j)] = geom.at(kTau * j / params.j);
    }

    // image appearance parameters
    const double bg = 0.22 + rng.uniform(0.0, 0.08);
    const double fg = 0.68 + rng.uniform(0.0, 0.12);
    double tex_amp[2], tex_fx[2], tex_fy[2], tex_ph[2];
    for (int i = 0; i < 2; ++i) {
        tex_amp[i] = rng.uniform(0.01, 0.03);
        tex_fx[i] = rng.uniform(0.5, 2.5);
        tex_fy[i] = rng.uniform(0.5, 2.5);
        tex_ph[i] = rng.uniform(0.0, kTau);
    }

    // expert annotations: consensus displaced along its outward normals by
    // smooth noise, amplified where the contour curves hardest
    const std::vector<double> kappa = closed_curvature(consensus);
    const double kappa_max = *std::max_element(kappa.begin(), kappa.end());
    const std::vector<Point2> normals = outward_normals(consensus);
    const double unit = params.noise_unit * params.w;
    const double clamp_abs = 3.0 * params.ambiguity * unit;

    ExpertSet experts;
    experts.consensus = consensus;
    for (int e = 0; e < params.experts; ++e) {
        const std::vector<double> noise = periodic_noise(params.j, rng);
        Shape s(size_t(params.j));
        for (int j = 0; j < params.j; ++j) {
            const double mod =
                0.5 + (kappa_max > 0.0 ? 1.5 * kappa[size_t(j)] / kappa_max : 0.0);
            double d = params.ambiguity * unit * mod * noise[size_t(j)];
            d = std::clamp(d, -clamp_abs, clamp_abs);
            s.points[size_t(j)] = Point2{consensus.points[size_t(j)].x + d * normals[size_t(j)].x,
                                         consensus.points[size_t(j)].y + d * normals[size_t(j)].y};
        }
        experts.experts.push_back(std::move(s));
    }

    // rendering: fill, texture, ambiguity-dependent blur and pixel noise
    ImageF img = rasterize_mask(consensus, params.h, params.w, 4);
    for (int y = 0; y < params.h; ++y) {
        for (int x = 0; x < params.w; ++x) {
            double v = bg + (fg - bg) * img.at(y, x);
            for (int i = 0; i < 2; ++i) {
                v += tex_amp[i] *
                     std::cos(kTau * (tex_fx[i] * x + tex_fy[i] * y) / params.w + tex_ph[i]);
            }
            img.at(y, x) = float(v);
        }
    }
    img = gaussian_blur(img, 0.6 + 0.6 * params.ambiguity);
    const double noise_sd = 0.01 + 0.012 * params.ambiguity;
    for (float& v : img.pix) {
        v = float(std::clamp(double(v) + rng.normal(0.0, noise_sd), 0.0, 1.0));
    }

    SyntheticScene scene;
    scene.image = std::move(img);
    scene.experts = std::move(experts);
    scene.params = params;
    return scene;
}

StatisticalShapeModel fit_ssm(const std::vector<Shape>& shapes, double variance_fraction) {
    if (shapes.size() < 2) throw std::invalid_argument("fit_ssm: need at least two shapes");
    if (!(variance_fraction > 0.0) || variance_fraction > 1.0) {
        throw std::invalid_argument("fit_ssm: variance fraction must be in (0,1]");
    }
    const size_t j_max = shapes.front().size();
    for (const Shape& s : shapes) require_same_size(shapes.front(), s, "fit_ssm");
    const int k = int(shapes.size());
    const int d = int(2 * j_max);

    Eigen::MatrixXd x(k, d);
    for (int i = 0; i < k; ++i) {
        const std::vector<double> flat = shapes[size_t(i)].flatten();
        for (int c = 0; c < d; ++c) x(i, c) = flat[size_t(c)];
    }
    const Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;
    const Eigen::MatrixXd cov = (x.adjoint() * x) / double(k - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    if (es.info() != Eigen::Success) throw std::runtime_error("fit_ssm: eigendecomposition failed");

    double total = 0.0;
    for (int i = 0; i < d; ++i) total += std::max(0.0, es.eigenvalues()(i));

    StatisticalShapeModel ssm;
    ssm.mean_shape = Shape(j_max);
    for (size_t j = 0; j < j_max; ++j) {
        ssm.mean_shape.points[j] = Point2{mean(int(2 * j)), mean(int(2 * j + 1))};
    }
    if (total <= 1e-12) return ssm;  // identical shapes: nothing to model

    double cum = 0.0;
    for (int i = d - 1; i >= 0; --i) {  // eigenvalues come back ascending
        const double lambda = std::max(0.0, es.eigenvalues()(i));
        ssm.mode_variances.push_back(lambda);
        std::vector<double> mode(static_cast<size_t>(d));
        for (int c = 0; c < d; ++c) mode[size_t(c)] = es.eigenvectors()(c, i);
        ssm.modes.push_back(std::move(mode));
        cum += lambda;
        if (cum / total >= variance_fraction) break;
    }
    return ssm;
}

Shape sample_ssm(const StatisticalShapeModel& ssm, RngStream& rng, std::vector<double>& coeffs_out) {
    coeffs_out.assign(ssm.modes.size(), 0.0);
    std::vector<double> flat = ssm.mean_shape.flatten();
    for (size_t i = 0; i < ssm.modes.size(); ++i) {
        const double sd = std::sqrt(std::max(0.0, ssm.mode_variances[i]));
        if (sd == 0.0) continue;
        double b = rng.normal(0.0, sd);
        while (std::fabs(b) > 3.0 * sd) b = rng.normal(0.0, sd);
        coeffs_out[i] = b;
        const std::vector<double>& mode = ssm.modes[i];
        for (size_t c = 0; c < flat.size(); ++c) flat[c] += b * mode[c];
    }
    return Shape::from_flat(flat);
}

Shape sample_ssm(const StatisticalShapeModel& ssm, RngStream& rng) {
    std::vector<double> unused;
    return sample_ssm(ssm, rng, unused);
}

ThinPlateSpline::ThinPlateSpline(const std::vector<Point2>& src, const std::vector<Point2>& dst,
                                 double lambda) {
    if (src.size() != dst.size()) {
        throw std::invalid_argument("ThinPlateSpline: control point counts differ");
    }
    if (src.size() < 3) throw std::invalid_argument("ThinPlateSpline: need at least 3 control points");
    if (lambda < 0.0) throw std::invalid_argument("ThinPlateSpline: lambda must be nonnegative");
    const int n = int(src.size());
    ctrl_ = src;

    Eigen::MatrixXd l(n + 3, n + 3);
    l.setZero();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            l(i, j) = tps_kernel(point_distance(src[size_t(i)], src[size_t(j)]));
        }
        l(i, i) += lambda;
        l(i, n) = 1.0;
        l(i, n + 1) = src[size_t(i)].x;
        l(i, n + 2) = src[size_t(i)].y;
        l(n, i) = 1.0;
        l(n + 1, i) = src[size_t(i)].x;
        l(n + 2, i) = src[size_t(i)].y;
    }
    Eigen::MatrixXd rhs(n + 3, 2);
    rhs.setZero();
    for (int i = 0; i < n; ++i) {
        rhs(i, 0) = dst[size_t(i)].x;
        rhs(i, 1) = dst[size_t(i)].y;
    }

    const Eigen::FullPivLU<Eigen::MatrixXd> lu(l);
    if (!lu.isInvertible()) {
        throw std::runtime_error(
            "ThinPlateSpline: degenerate control points (duplicate or collinear); "
            "use lambda > 0 or perturb the points");
    }
    const Eigen::MatrixXd coef = lu.solve(rhs);
    wx_.resize(size_t(n) + 3);
    wy_.resize(size_t(n) + 3);
    for (int i = 0; i < n + 3; ++i) {
        wx_[size_t(i)] = coef(i, 0);
        wy_[size_t(i)] = coef(i, 1);
    }
}

Point2 ThinPlateSpline::apply(const Point2& p) const {
    const size_t n = ctrl_.size();
    double x = wx_[n] + wx_[n + 1] * p.x + wx_[n + 2] * p.y;
    double y = wy_[n] + wy_[n + 1] * p.x + wy_[n + 2] * p.y;
    for (size_t i = 0; i < n; ++i) {
        const double u = tps_kernel(point_distance(p, ctrl_[i]));
        x += wx_[i] * u;
        y += wy_[i] * u;
    }
    return Point2{x, y};
}

Shape ThinPlateSpline::apply(const Shape& s) const {
    Shape out(s.size());
    for (size_t j = 0; j < s.size(); ++j) out.points[j] = apply(s.points[j]);
    return out;
}

WarpResult tps_warp(const ImageF& image, const Shape& source, const Shape& target,
                    const std::vector<Shape>& shapes, double lambda, int control_stride) {
    require_same_size(source, target, "tps_warp");
    if (control_stride < 1) throw std::invalid_argument("tps_warp: control stride must be >= 1");
    std::vector<Point2> src_ctrl, dst_ctrl;
    for (size_t j = 0; j < source.size(); j += size_t(control_stride)) {
        src_ctrl.push_back(source.points[j]);
        dst_ctrl.push_back(target.points[j]);
    }
    const ThinPlateSpline forward(src_ctrl, dst_ctrl, lambda);
    const ThinPlateSpline inverse(dst_ctrl, src_ctrl, lambda);

    WarpResult res;
    res.shapes.reserve(shapes.size());
    for (const Shape& s : shapes) res.shapes.push_back(forward.apply(s));
    res.image = ImageF(image.h, image.w);
    for (int y = 0; y < image.h; ++y) {
        for (int x = 0; x < image.w; ++x) {
            const Point2 q = inverse.apply(Point2{x + 0.5, y + 0.5});
            res.image.at(y, x) = float(image.bilinear(q.x, q.y));
        }
    }
    return res;
}

std::vector<const DataRecord*> Dataset::split(const std::string& tag) const {
    std::vector<const DataRecord*> out;
    for (const DataRecord& r : records) {
        if (r.split == tag) out.push_back(&r);
    }
    return out;
}

Dataset generate_dataset(int scenes, uint64_t seed, const SceneParams& base,
                         const std::vector<double>& ambiguity_levels) {
    if (scenes < 1) throw std::invalid_argument("generate_dataset: need at least one scene");
    if (ambiguity_levels.empty()) {
        throw std::invalid_argument("generate_dataset: need at least one ambiguity level");
    }
    Dataset ds;
    ds.j = base.j;
    ds.h = base.h;
    ds.w = base.w;
    ds.generator = base;
    const int train_count = scenes * 4 / 5;
    for (int i = 0; i < scenes; ++i) {
        SceneParams sp = base;
        sp.ambiguity = ambiguity_levels[size_t(i) % ambiguity_levels.size()];
        RngStream rng = RngStream::named(seed, "scene/" + std::to_string(i));
        SyntheticScene scene = generate_scene(sp, rng);
        DataRecord rec;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "scene_%04d", i);
        rec.id = buf;
        rec.split = i < train_count ? "train" : "test";
        rec.ambiguity = sp.ambiguity;
        rec.image = std::move(scene.image);
        rec.experts = std::move(scene.experts);
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

Dataset augment(const Dataset& base, const StatisticalShapeModel& ssm, int train_count,
                RngStream& rng) {
    std::vector<const DataRecord*> train = base.split("train");
    if (train.empty()) throw std::invalid_argument("augment: dataset has no train records");
    if (train_count < int(train.size())) {
        throw std::invalid_argument("augment: target train count " + std::to_string(train_count) +
                                    " is below the original " + std::to_string(train.size()));
    }
    Dataset out;
    out.j = base.j;
    out.h = base.h;
    out.w = base.w;
    out.generator = base.generator;
    out.records = base.records;  // originals pass through, test split untouched

    const int new_count = train_count - int(train.size());
    for (int i = 0; i < new_count; ++i) {
        const DataRecord& src = *train[size_t(i) % train.size()];
        std::vector<Shape> to_warp = src.experts.experts;
        to_warp.push_back(src.experts.consensus);
        WarpResult warped;
        bool ok = false;
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            const Shape virtual_shape = sample_ssm(ssm, rng);
            try {
                warped = tps_warp(src.image, src.experts.consensus, virtual_shape, to_warp);
                ok = true;
            } catch (const std::runtime_error&) {
                // degenerate control configuration: draw another virtual shape
            }
        }
        if (!ok) throw std::runtime_error("augment: could not find a usable virtual shape");
        DataRecord rec;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "aug_%04d", i);
        rec.id = buf;
        rec.split = "train";
        rec.ambiguity = src.ambiguity;
        rec.image = std::move(warped.image);
        for (size_t e = 0; e + 1 < warped.shapes.size(); ++e) {
            rec.experts.experts.push_back(std::move(warped.shapes[e]));
        }
        rec.experts.consensus = std::move(warped.shapes.back());
        out.records.push_back(std::move(rec));
    }
    return out;
}

namespace {

void write_shape_csv(const Shape& s, const fs::path& path) {
    FILE* f = std::fopen(path.string().c_str(), "w");
    if (!f) throw std::runtime_error("write_dataset: cannot open " + path.string());
    for (const Point2& p : s.points) std::fprintf(f, "%.17g,%.17g\n", p.x, p.y);
    std::fclose(f);
}

Shape read_shape_csv(const fs::path& path, int expect_j) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_dataset: missing shape file " + path.string());
    Shape s;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const size_t comma = line.find(',');
        if (comma == std::string::npos) {
            throw std::runtime_error("load_dataset: malformed row in " + path.string());
        }
        s.points.push_back(
            Point2{std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
    }
    if (int(s.size()) != expect_j) {
        throw std::runtime_error("load_dataset: " + path.string() + " has " +
                                 std::to_string(s.size()) + " points, expected " +
                                 std::to_string(expect_j));
    }
    return s;
}

void write_image_f32(const ImageF& img, const fs::path& path) {
    FILE* f = std::fopen(path.string().c_str(), "wb");
    if (!f) throw std::runtime_error("write_dataset: cannot open " + path.string());
    const size_t n = img.pix.size();
    if (std::fwrite(img.pix.data(), sizeof(float), n, f) != n) {
        std::fclose(f);
        throw std::runtime_error("write_dataset: short write to " + path.string());
    }
    std::fclose(f);
}

ImageF read_image_f32(const fs::path& path, int h, int w) {
    FILE* f = std::fopen(path.string().c_str(), "rb");
    if (!f) throw std::runtime_error("load_dataset: missing image file " + path.string());
    ImageF img(h, w);
    const size_t n = img.pix.size();
    const size_t got = std::fread(img.pix.data(), sizeof(float), n, f);
    std::fclose(f);
    if (got != n) {
        throw std::runtime_error("load_dataset: " + path.string() + " holds " + std::to_string(got) +
                                 " floats, expected " + std::to_string(n));
    }
    return img;
}

json params_to_json(const SceneParams& p) {
    return json{{"j", p.j},           {"h", p.h},
                {"w", p.w},           {"experts", p.experts},
                {"ambiguity", p.ambiguity}, {"noise_unit", p.noise_unit}};
}

SceneParams params_from_json(const json& j) {
    SceneParams p;
    p.j = j.at("j").get<int>();
    p.h = j.at("h").get<int>();
    p.w = j.at("w").get<int>();
    p.experts = j.at("experts").get<int>();
    p.ambiguity = j.at("ambiguity").get<double>();
    p.noise_unit = j.at("noise_unit").get<double>();
    return p;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
    const fs::path root(dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "shapes");

    json manifest;
    manifest["format_version"] = 1;
    manifest["j"] = ds.j;
    manifest["h"] = ds.h;
    manifest["w"] = ds.w;
    manifest["generator"] = params_to_json(ds.generator);
    manifest["records"] = json::array();

    for (const DataRecord& rec : ds.records) {
        const fs::path shape_dir = root / "shapes" / rec.id;
        fs::create_directories(shape_dir);
        write_image_f32(rec.image, root / "images" / (rec.id + ".f32"));
        for (size_t e = 0; e < rec.experts.experts.size(); ++e) {
            write_shape_csv(rec.experts.experts[e],
                            shape_dir / ("expert" + std::to_string(e + 1) + ".csv"));
        }
        write_shape_csv(rec.experts.consensus, shape_dir / "consensus.csv");
        manifest["records"].push_back(json{{"id", rec.id},
                                           {"split", rec.split},
                                           {"ambiguity", rec.ambiguity},
                                           {"image", "images/" + rec.id + ".f32"},
                                           {"shape_dir", "shapes/" + rec.id},
                                           {"experts", rec.experts.experts.size()}});
    }

    std::ofstream out(root / "manifest.json");
    if (!out) throw std::runtime_error("write_dataset: cannot open manifest in " + dir);
    out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream in(root / "manifest.json");
    if (!in) throw std::runtime_error("load_dataset: no manifest.json in " + dir);
    json manifest;
    in >> manifest;
    if (manifest.at("format_version").get<int>() != 1) {
        throw std::runtime_error("load_dataset: unsupported format version");
    }

    Dataset ds;
    ds.j = manifest.at("j").get<int>();
    ds.h = manifest.at("h").get<int>();
    ds.w = manifest.at("w").get<int>();
    ds.generator = params_from_json(manifest.at("generator"));

    for (const json& jr : manifest.at("records")) {
        DataRecord rec;
        rec.id = jr.at("id").get<std::string>();
        rec.split = jr.at("split").get<std::string>();
        rec.ambiguity = jr.at("ambiguity").get<double>();
        rec.image = read_image_f32(root / jr.at("image").get<std::string>(), ds.h, ds.w);
        const fs::path shape_dir = root / jr.at("shape_dir").get<std::string>();
        const int experts = jr.at("experts").get<int>();
        for (int e = 0; e < experts; ++e) {
            rec.experts.experts.push_back(
                read_shape_csv(shape_dir / ("expert" + std::to_string(e + 1) + ".csv"), ds.j));
        }
        rec.experts.consensus = read_shape_csv(shape_dir / "consensus.csv", ds.j);
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

}  // namespace cqvae
