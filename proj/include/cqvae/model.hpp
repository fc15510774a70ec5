#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cqvae/config.hpp"
#include "cqvae/image.hpp"
#include "cqvae/matching.hpp"
#include "cqvae/quantize.hpp"
#include "cqvae/rng.hpp"
#include "cqvae/shape.hpp"
#include "cqvae/tape.hpp"
#include "cqvae/tensor.hpp"

namespace cqvae {

// ---- parameter store ----

// Named parameter tensors in insertion order. The order is part of the
// contract: optimizer state and checkpoints index parameters by it.
template <typename T>
class ParamStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t) {
        if (index_.count(name)) {
            throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
        }
        index_[name] = names_.size();
        names_.push_back(name);
        tensors_.push_back(std::move(t));
        return tensors_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw std::invalid_argument("ParamStore: no parameter '" + name + "'");
        }
        return tensors_[it->second];
    }

    const Tensor<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw std::invalid_argument("ParamStore: no parameter '" + name + "'");
        }
        return tensors_[it->second];
    }

    size_t size() const { return names_.size(); }
    const std::string& name(size_t i) const { return names_[i]; }
    Tensor<T>& tensor(size_t i) { return tensors_[i]; }
    const Tensor<T>& tensor(size_t i) const { return tensors_[i]; }

    long long scalar_count() const {
        long long n = 0;
        for (const Tensor<T>& t : tensors_) n += t.numel();
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> tensors_;
    std::unordered_map<std::string, size_t> index_;
};

// ---- model description ----

struct ModelConfig {
    int m = 16;  // latent rows
    int n = 11;  // coordinates per row
    int j = 176; // contour points
    int h = 64;  // image height
    int w = 64;  // image width
    std::vector<int> enc_channels = {16, 32, 64, 128};
    double c_lo = -2.0, c_hi = 2.0;
    // hidden widths of the shape decoder MLP (the shape encoder mirrors them)
    int mlp_hidden1 = 128;
    int mlp_hidden2 = 256;

    static ModelConfig from_train(const TrainConfig& t) {
        ModelConfig c;
        c.m = t.m;
        c.n = t.n;
        c.j = t.j;
        c.h = t.h;
        c.w = t.w;
        c.enc_channels = t.enc_channels;
        c.c_lo = t.c_lo;
        c.c_hi = t.c_hi;
        c.validate();
        return c;
    }

    int conv_levels() const { return int(enc_channels.size()); }
    int feat_h() const { return h >> conv_levels(); }
    int feat_w() const { return w >> conv_levels(); }
    int flat_dim() const { return enc_channels.back() * feat_h() * feat_w(); }

    void validate() const {
        if (m < 1 || n < 2 || j < 1) {
            throw std::invalid_argument("ModelConfig: need m >= 1, n >= 2, j >= 1");
        }
        if (enc_channels.empty()) throw std::invalid_argument("ModelConfig: enc_channels empty");
        for (int c : enc_channels) {
            if (c < 1) throw std::invalid_argument("ModelConfig: enc_channels entries must be >= 1");
        }
        const int stride_total = 1 << conv_levels();
        if (h < stride_total || h % stride_total != 0 || w < stride_total ||
            w % stride_total != 0) {
            throw std::invalid_argument("ModelConfig: image " + std::to_string(h) + "x" +
                                        std::to_string(w) + " not divisible by total stride " +
                                        std::to_string(stride_total));
        }
        if (mlp_hidden1 < 1 || mlp_hidden2 < 1) {
            throw std::invalid_argument("ModelConfig: MLP hidden widths must be >= 1");
        }
        if (!(c_lo < c_hi)) throw std::invalid_argument("ModelConfig: need c_lo < c_hi");
    }
};

// Which networks a model instance carries. The shape model is the main
// image-to-shape path; the image autoencoder replaces the two shape networks
// with a transposed-convolution image decoder.
enum class NetworkSet { kShapeModel, kImageAutoencoder };

template <typename T>
struct CqModel {
    ModelConfig cfg;
    NetworkSet parts;
    CoordinateVector<T> coords;
    ParamStore<T> params;

    CqModel(ModelConfig c, NetworkSet p)
        : cfg(std::move(c)),
          parts(p),
          coords(CoordinateVector<T>::uniform(cfg.n, T(cfg.c_lo), T(cfg.c_hi))) {
        cfg.validate();
    }
};

namespace detail {

template <typename T>
Tensor<T> normal_init(Dims dims, double sd, RngStream& rng) {
    Tensor<T> t(std::move(dims));
    for (T& v : t.data) v = T(rng.normal(0.0, sd));
    return t;
}

}  // namespace detail

// Fills the parameter store. Hidden layers get scaled-normal (He) weights;
// output heads start near zero so probabilities begin near uniform and
// decoded shapes near the image center, leaving early training uncommitted.
template <typename T>
void init_params(CqModel<T>& model, RngStream& rng) {
    const ModelConfig& c = model.cfg;
    ParamStore<T>& p = model.params;
    if (p.size() != 0) throw std::invalid_argument("init_params: store already populated");
    const double head_sd = 0.01;

    int in_ch = 1;
    for (size_t i = 0; i < c.enc_channels.size(); ++i) {
        const int out_ch = c.enc_channels[i];
        const std::string tag = "enc.conv" + std::to_string(i);
        p.add(tag + ".w",
              detail::normal_init<T>(Dims{out_ch, in_ch, 3, 3}, std::sqrt(2.0 / (in_ch * 9)), rng));
        p.add(tag + ".b", Tensor<T>(Dims{out_ch}));
        in_ch = out_ch;
    }
    p.add("enc.fc.w", detail::normal_init<T>(Dims{c.flat_dim(), c.m * c.n}, head_sd, rng));
    p.add("enc.fc.b", Tensor<T>(Dims{c.m * c.n}));

    if (model.parts == NetworkSet::kShapeModel) {
        p.add("sdec.fc0.w",
              detail::normal_init<T>(Dims{c.m, c.mlp_hidden1}, std::sqrt(2.0 / c.m), rng));
        p.add("sdec.fc0.b", Tensor<T>(Dims{c.mlp_hidden1}));
        p.add("sdec.fc1.w", detail::normal_init<T>(Dims{c.mlp_hidden1, c.mlp_hidden2},
                                                   std::sqrt(2.0 / c.mlp_hidden1), rng));
        p.add("sdec.fc1.b", Tensor<T>(Dims{c.mlp_hidden2}));
        p.add("sdec.fc2.w", detail::normal_init<T>(Dims{c.mlp_hidden2, 2 * c.j}, head_sd, rng));
        p.add("sdec.fc2.b", Tensor<T>(Dims{2 * c.j}));

        p.add("senc.fc0.w",
              detail::normal_init<T>(Dims{2 * c.j, c.mlp_hidden2}, std::sqrt(2.0 / (2 * c.j)), rng));
        p.add("senc.fc0.b", Tensor<T>(Dims{c.mlp_hidden2}));
        p.add("senc.fc1.w", detail::normal_init<T>(Dims{c.mlp_hidden2, c.mlp_hidden1},
                                                   std::sqrt(2.0 / c.mlp_hidden2), rng));
        p.add("senc.fc1.b", Tensor<T>(Dims{c.mlp_hidden1}));
        p.add("senc.fc2.w", detail::normal_init<T>(Dims{c.mlp_hidden1, c.m * c.n}, head_sd, rng));
        p.add("senc.fc2.b", Tensor<T>(Dims{c.m * c.n}));
    } else {
        p.add("idec.fc.w",
              detail::normal_init<T>(Dims{c.m, c.flat_dim()}, std::sqrt(2.0 / c.m), rng));
        p.add("idec.fc.b", Tensor<T>(Dims{c.flat_dim()}));
        std::vector<int> rev(c.enc_channels.rbegin(), c.enc_channels.rend());
        for (size_t i = 0; i < rev.size(); ++i) {
            const bool last = i + 1 == rev.size();
            const int cin = rev[i];
            const int cout = last ? 1 : rev[i + 1];
            const std::string tag = "idec.tconv" + std::to_string(i);
            const double sd = last ? head_sd : std::sqrt(2.0 / (cin * 9));
            p.add(tag + ".w", detail::normal_init<T>(Dims{cin, cout, 3, 3}, sd, rng));
            p.add(tag + ".b", Tensor<T>(Dims{cout}));
        }
    }
}

// ---- graph binding ----

// A model's parameters registered as input nodes on one tape, so gradients
// can be read back by parameter name after backward().
template <typename T>
struct BoundModel {
    Tape<T>* tape = nullptr;
    const CqModel<T>* model = nullptr;
    std::unordered_map<std::string, int> node;

    int p(const std::string& name) const {
        auto it = node.find(name);
        if (it == node.end()) {
            throw std::invalid_argument("BoundModel: no parameter node '" + name + "'");
        }
        return it->second;
    }
};

template <typename T>
BoundModel<T> bind_model(Tape<T>& tape, const CqModel<T>& model) {
    BoundModel<T> b;
    b.tape = &tape;
    b.model = &model;
    for (size_t i = 0; i < model.params.size(); ++i) {
        b.node[model.params.name(i)] = tape.input(model.params.tensor(i));
    }
    return b;
}

// After backward(), adds each parameter's gradient into `grads`, which must
// be parallel to the store (same order and shapes). Parameters the loss never
// touched contribute nothing.
template <typename T>
void accumulate_param_grads(const BoundModel<T>& b, std::vector<Tensor<T>>& grads) {
    const ParamStore<T>& p = b.model->params;
    if (grads.size() != p.size()) {
        throw std::invalid_argument("accumulate_param_grads: got " + std::to_string(grads.size()) +
                                    " buffers for " + std::to_string(p.size()) + " parameters");
    }
    for (size_t i = 0; i < p.size(); ++i) {
        const int id = b.p(p.name(i));
        if (!b.tape->has_grad(id)) continue;
        const Tensor<T>& g = b.tape->grad(id);
        Tensor<T>& acc = grads[i];
        if (acc.shape != g.shape) {
            throw std::invalid_argument("accumulate_param_grads: buffer shape mismatch for '" +
                                        p.name(i) + "'");
        }
        for (size_t k = 0; k < g.data.size(); ++k) acc.data[k] += g.data[k];
    }
}

// ---- network graph builders ----

// image [1,1,H,W] -> row-stochastic [M,N] probabilities
template <typename T>
int encode_image_node(const BoundModel<T>& b, const Tensor<T>& image) {
    const ModelConfig& c = b.model->cfg;
    Tape<T>& t = *b.tape;
    if (image.shape != Dims{1, 1, c.h, c.w}) {
        throw std::invalid_argument("encode_image_node: image shape " + dims_str(image.shape) +
                                    " does not match model " + dims_str(Dims{1, 1, c.h, c.w}));
    }
    int x = t.constant(image);
    for (size_t i = 0; i < c.enc_channels.size(); ++i) {
        const std::string tag = "enc.conv" + std::to_string(i);
        x = t.relu(t.conv2d(x, b.p(tag + ".w"), b.p(tag + ".b"), 2, 1));
    }
    x = t.reshape(x, Dims{1, c.flat_dim()});
    x = t.add_rowvec(t.matmul(x, b.p("enc.fc.w")), b.p("enc.fc.b"));
    x = t.reshape(x, Dims{c.m, c.n});
    return t.softmax_last(x);
}

// latent rows [K,M] -> shapes [K,2J], coordinates squashed into (0,1)
template <typename T>
int decode_shapes_node(const BoundModel<T>& b, int zprime_rows) {
    Tape<T>& t = *b.tape;
    int x = t.relu(t.add_rowvec(t.matmul(zprime_rows, b.p("sdec.fc0.w")), b.p("sdec.fc0.b")));
    x = t.relu(t.add_rowvec(t.matmul(x, b.p("sdec.fc1.w")), b.p("sdec.fc1.b")));
    return t.sigmoid(t.add_rowvec(t.matmul(x, b.p("sdec.fc2.w")), b.p("sdec.fc2.b")));
}

// shapes [K,2J] -> row-stochastic [K*M,N]
template <typename T>
int encode_shapes_node(const BoundModel<T>& b, int shape_rows) {
    const ModelConfig& c = b.model->cfg;
    Tape<T>& t = *b.tape;
    const int k = t.value(shape_rows).shape[0];
    int x = t.relu(t.add_rowvec(t.matmul(shape_rows, b.p("senc.fc0.w")), b.p("senc.fc0.b")));
    x = t.relu(t.add_rowvec(t.matmul(x, b.p("senc.fc1.w")), b.p("senc.fc1.b")));
    x = t.add_rowvec(t.matmul(x, b.p("senc.fc2.w")), b.p("senc.fc2.b"));
    x = t.reshape(x, Dims{k * c.m, c.n});
    return t.softmax_last(x);
}

// latent row [1,M] -> image [1,1,H,W] in (0,1)
template <typename T>
int decode_image_node(const BoundModel<T>& b, int zprime_row) {
    const ModelConfig& c = b.model->cfg;
    Tape<T>& t = *b.tape;
    int x = t.relu(t.add_rowvec(t.matmul(zprime_row, b.p("idec.fc.w")), b.p("idec.fc.b")));
    x = t.reshape(x, Dims{1, c.enc_channels.back(), c.feat_h(), c.feat_w()});
    const size_t levels = c.enc_channels.size();
    for (size_t i = 0; i < levels; ++i) {
        const std::string tag = "idec.tconv" + std::to_string(i);
        x = t.conv2d_transpose(x, b.p(tag + ".w"), b.p(tag + ".b"), 2, 1, 1);
        x = (i + 1 == levels) ? t.sigmoid(x) : t.relu(x);
    }
    return x;
}

// ---- shape/image plumbing ----

// Model shapes live in [0,1]^2; dataset shapes are in pixels.
inline Shape normalize_shape(const Shape& s, int h, int w) {
    Shape out(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        out.points[i] = Point2{s.points[i].x / w, s.points[i].y / h};
    }
    return out;
}

inline Shape denormalize_shape(const Shape& s, int h, int w) {
    Shape out(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        out.points[i] = Point2{s.points[i].x * w, s.points[i].y * h};
    }
    return out;
}

template <typename T>
Tensor<T> image_tensor(const ImageF& img) {
    Tensor<T> t(Dims{1, 1, img.h, img.w});
    for (size_t i = 0; i < img.pix.size(); ++i) t.data[i] = T(img.pix[i]);
    return t;
}

template <typename T>
Tensor<T> shapes_to_rows(const std::vector<Shape>& shapes) {
    if (shapes.empty()) throw std::invalid_argument("shapes_to_rows: empty shape list");
    const int j = int(shapes[0].size());
    Tensor<T> t(Dims{int(shapes.size()), 2 * j});
    for (size_t k = 0; k < shapes.size(); ++k) {
        require_same_size(shapes[0], shapes[k], "shapes_to_rows");
        for (int i = 0; i < j; ++i) {
            t.at2(int(k), 2 * i) = T(shapes[k].points[size_t(i)].x);
            t.at2(int(k), 2 * i + 1) = T(shapes[k].points[size_t(i)].y);
        }
    }
    return t;
}

template <typename T>
std::vector<Shape> rows_to_shapes(const Tensor<T>& rows) {
    if (rows.ndim() != 2 || rows.shape[1] % 2 != 0) {
        throw std::invalid_argument("rows_to_shapes: need [K,2J], got " + dims_str(rows.shape));
    }
    std::vector<Shape> out;
    out.reserve(size_t(rows.shape[0]));
    for (int k = 0; k < rows.shape[0]; ++k) {
        std::vector<double> flat(size_t(rows.shape[1]));
        for (int i = 0; i < rows.shape[1]; ++i) flat[size_t(i)] = double(rows.at2(k, i));
        out.push_back(Shape::from_flat(flat));
    }
    return out;
}

// ---- image-autoencoder loss ----

// Squared reconstruction error plus alpha times the entropy of the latent
// probability matrix. The entropy term is what drives rows toward one-hot.
template <typename T>
T cqae_loss(const Tensor<T>& x, const Tensor<T>& xhat, const Tensor<T>& z, T alpha) {
    if (x.shape != xhat.shape) {
        throw std::invalid_argument("cqae_loss: image shapes differ, " + dims_str(x.shape) +
                                    " vs " + dims_str(xhat.shape));
    }
    T rec = T(0);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const T d = xhat.data[i] - x.data[i];
        rec += d * d;
    }
    return rec + alpha * entropy(z);
}

template <typename T>
struct CqaeGraph {
    int pi = -1;    // [M,N]
    int code = -1;  // [M,N] sampled (hard if straight-through)
    int xhat = -1;  // [1,1,H,W]
    int loss = -1;  // [1]
    T reconstruction{}, entropy_term{}, total{};
};

template <typename T>
CqaeGraph<T> build_cqae_loss(const BoundModel<T>& b, const Tensor<T>& image,
                             const Tensor<T>& noise, T tau, bool straight_through, T alpha) {
    const ModelConfig& c = b.model->cfg;
    Tape<T>& t = *b.tape;
    if (alpha < T(0)) throw std::invalid_argument("build_cqae_loss: alpha must be >= 0");
    CqaeGraph<T> g;
    g.pi = encode_image_node(b, image);
    g.code = gumbel_softmax_node(t, g.pi, noise, tau, straight_through);
    const int zp = t.reshape(coordinate_map_node(t, g.code, b.model->coords), Dims{1, c.m});
    g.xhat = decode_image_node(b, zp);
    const int rec = t.sum_all(t.square(t.sub(g.xhat, t.constant(image))));
    const int ent = entropy_node(t, g.pi);
    g.loss = t.add(rec, t.scale(ent, alpha));
    g.reconstruction = t.value(rec).data[0];
    g.entropy_term = t.value(ent).data[0];
    g.total = t.value(g.loss).data[0];
    if (!std::isfinite(double(g.total))) {
        throw std::runtime_error("image-autoencoder loss: non-finite value");
    }
    return g;
}

// ---- shape-model objective ----

// Everything one loss evaluation depends on, with the stochastic pieces
// (Gumbel noise, ground-truth draws) pinned as data so the same evaluation
// can be replayed, e.g. under finite differences.
template <typename T>
struct ObjectiveInputs {
    Tensor<T> image;               // [1,1,H,W]
    Tensor<T> noise;               // [l_max*M, N] Gumbel noise
    T tau = T(1);
    bool straight_through = true;
    std::vector<Shape> gt_samples; // normalized coordinates; may be empty
    Shape consensus;               // normalized coordinates
    T alpha = T(1);
    T beta = T(1);
    // When set, overrides greedy matching; finite-difference checks pin the
    // assignment so the loss stays smooth under parameter perturbation.
    const std::vector<int>* fixed_assignment = nullptr;
};

template <typename T>
struct ObjectiveGraph {
    int pi = -1;       // [M,N]
    int sampled = -1;  // [l_max*M, N]
    int shapes = -1;   // [l_max, 2J]
    int best = -1;     // [1, 2J]
    int loss = -1;     // [1]
    // forward values of the four terms; all nonnegative, optimum zero
    T kl{}, shape_ae{}, regression{}, best_err{}, total{};
    std::vector<int> assignment;       // model sample chosen for each gt sample
    std::vector<Shape> sampled_shapes; // decoded samples, normalized
};

// Minimized training loss:
//   KL(q(z|x) || uniform)
//   + alpha * mean-over-samples categorical cross-entropy of the shape
//     encoder against each sampled code
//   + sum over ground-truth samples of squared distance to their matched
//     model sample
//   + beta * squared distance from the deterministic best shape to the
//     consensus.
// Throws std::runtime_error naming the term if any value is non-finite.
template <typename T>
ObjectiveGraph<T> build_objective(const BoundModel<T>& b, const ObjectiveInputs<T>& in) {
    const ModelConfig& c = b.model->cfg;
    Tape<T>& t = *b.tape;
    if (in.alpha < T(0) || in.beta < T(0)) {
        throw std::invalid_argument("build_objective: loss weights must be >= 0");
    }
    if (in.noise.ndim() != 2 || in.noise.shape[1] != c.n || in.noise.shape[0] % c.m != 0 ||
        in.noise.shape[0] < c.m) {
        throw std::invalid_argument("build_objective: noise shape " + dims_str(in.noise.shape) +
                                    " is not [l_max*" + std::to_string(c.m) + "," +
                                    std::to_string(c.n) + "]");
    }
    const int l_max = in.noise.shape[0] / c.m;
    if (int(in.consensus.size()) != c.j) {
        throw std::invalid_argument("build_objective: consensus has " +
                                    std::to_string(in.consensus.size()) + " points, model wants " +
                                    std::to_string(c.j));
    }
    for (const Shape& s : in.gt_samples) {
        if (int(s.size()) != c.j) {
            throw std::invalid_argument("build_objective: ground-truth sample has " +
                                        std::to_string(s.size()) + " points, model wants " +
                                        std::to_string(c.j));
        }
    }

    ObjectiveGraph<T> g;
    g.pi = encode_image_node(b, in.image);

    // one probability matrix per sample, stacked to [l_max*M, N]
    int pi_rep = g.pi;
    for (int i = 1; i < l_max; ++i) pi_rep = t.concat(pi_rep, g.pi, 0);
    g.sampled = gumbel_softmax_node(t, pi_rep, in.noise, in.tau, in.straight_through);
    const int zp = t.reshape(coordinate_map_node(t, g.sampled, b.model->coords),
                             Dims{l_max, c.m});
    g.shapes = decode_shapes_node(b, zp);
    g.sampled_shapes = rows_to_shapes(t.value(g.shapes));

    // deterministic path: expected coordinates from the full matrix
    const int zp_best = t.reshape(coordinate_map_node(t, g.pi, b.model->coords), Dims{1, c.m});
    g.best = decode_shapes_node(b, zp_best);

    // term 1: KL to the uniform prior
    const int kl = kl_uniform_node(t, g.pi);

    // term 2: shape-autoencoder cross-entropy against the sampled codes
    const int pihat = encode_shapes_node(b, g.shapes);
    const std::vector<int> code_rows = argmax_rows(t.value(g.sampled));
    const int picked = t.gather_last(t.log_eps(pihat, T(kLogGuard)), code_rows);
    const int shape_ae = t.scale(t.sum_all(picked), T(-1) / T(l_max));

    // term 3: matched squared distances to the ground-truth samples
    int reg = -1;
    if (!in.gt_samples.empty()) {
        if (in.fixed_assignment) {
            if (int(in.fixed_assignment->size()) != int(in.gt_samples.size())) {
                throw std::invalid_argument("build_objective: fixed assignment size mismatch");
            }
            g.assignment = *in.fixed_assignment;
            for (int l : g.assignment) {
                if (l < 0 || l >= l_max) {
                    throw std::invalid_argument("build_objective: fixed assignment out of range");
                }
            }
        } else {
            g.assignment = greedy_match(g.sampled_shapes, in.gt_samples).model_for_gt;
        }
        Tensor<T> sel(Dims{int(in.gt_samples.size()), l_max});
        for (size_t k = 0; k < g.assignment.size(); ++k) {
            sel.at2(int(k), g.assignment[k]) = T(1);
        }
        const int matched = t.matmul(t.constant(sel), g.shapes);
        const int targets = t.constant(shapes_to_rows<T>(in.gt_samples));
        reg = t.sum_all(t.square(t.sub(matched, targets)));
    }

    // term 4: best shape against the consensus
    const int best_err =
        t.sum_all(t.square(t.sub(g.best, t.constant(shapes_to_rows<T>({in.consensus})))));

    int loss = t.add(kl, t.scale(shape_ae, in.alpha));
    if (reg >= 0) loss = t.add(loss, reg);
    loss = t.add(loss, t.scale(best_err, in.beta));
    g.loss = loss;

    g.kl = t.value(kl).data[0];
    g.shape_ae = t.value(shape_ae).data[0];
    g.regression = reg >= 0 ? t.value(reg).data[0] : T(0);
    g.best_err = t.value(best_err).data[0];
    g.total = t.value(loss).data[0];

    const std::pair<const char*, T> terms[] = {{"kl", g.kl},
                                               {"shape-autoencoder", g.shape_ae},
                                               {"regression", g.regression},
                                               {"best-shape", g.best_err},
                                               {"total", g.total}};
    for (const auto& [name, v] : terms) {
        if (!std::isfinite(double(v))) {
            throw std::runtime_error(std::string("objective: non-finite ") + name + " term");
        }
    }
    return g;
}

// ---- plain inference wrappers ----

template <typename T>
Tensor<T> encode_probabilities(const CqModel<T>& model, const Tensor<T>& image) {
    Tape<T> tape;
    BoundModel<T> b = bind_model(tape, model);
    return tape.value(encode_image_node(b, image));
}

// Deterministic estimate: decode the expected coordinates of the full
// probability matrix; no sampling, so identical inputs give identical shapes.
template <typename T>
Shape best_shape(const CqModel<T>& model, const Tensor<T>& image) {
    Tape<T> tape;
    BoundModel<T> b = bind_model(tape, model);
    const int pi = encode_image_node(b, image);
    const int zp =
        tape.reshape(coordinate_map_node(tape, pi, model.coords), Dims{1, model.cfg.m});
    const int s = decode_shapes_node(b, zp);
    return rows_to_shapes(tape.value(s))[0];
}

// Decodes the given one-hot codes in one pass. Used by random-code sampling.
template <typename T>
std::vector<Shape> decode_codes(const CqModel<T>& model, const std::vector<Tensor<T>>& codes) {
    if (codes.empty()) throw std::invalid_argument("decode_codes: empty code list");
    const ModelConfig& c = model.cfg;
    Tensor<T> zp(Dims{int(codes.size()), c.m});
    for (size_t i = 0; i < codes.size(); ++i) {
        if (codes[i].shape != Dims{c.m, c.n} || !is_latent_code(codes[i])) {
            throw std::invalid_argument("decode_codes: entry " + std::to_string(i) +
                                        " is not an MxN one-hot code");
        }
        const std::vector<T> row = coordinate_map(codes[i], model.coords);
        for (int k = 0; k < c.m; ++k) zp.at2(int(i), k) = row[size_t(k)];
    }
    Tape<T> tape;
    BoundModel<T> b = bind_model(tape, model);
    return rows_to_shapes(tape.value(decode_shapes_node(b, tape.constant(zp))));
}

// l_max shapes decoded from independently drawn hard codes. Adding Gumbel
// noise to the log-probabilities and taking the row argmax samples each
// categorical row exactly, so no temperature is involved.
template <typename T>
std::vector<Shape> sample_shapes(const CqModel<T>& model, const Tensor<T>& image, int l_max,
                                 RngStream& rng) {
    if (l_max < 1) throw std::invalid_argument("sample_shapes: l_max must be >= 1");
    const Tensor<T> pi = encode_probabilities(model, image);
    Tensor<T> logp = pi;
    for (T& v : logp.data) v = std::log(v + T(kLogGuard));
    std::vector<Tensor<T>> codes;
    codes.reserve(size_t(l_max));
    for (int l = 0; l < l_max; ++l) {
        Tensor<T> perturbed = logp;
        for (T& v : perturbed.data) v += T(rng.gumbel());
        codes.push_back(harden(perturbed));
    }
    return decode_codes(model, codes);
}

}  // namespace cqvae
