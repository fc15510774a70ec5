#include "cqvae/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>

#include "cqvae/metrics.hpp"
#include "cqvae/quantize.hpp"

namespace cqvae {

// ---- optimizer ----

void AdamState::init_like(const ParamStore<float>& params) {
    m.clear();
    v.clear();
    t = 0;
    for (size_t i = 0; i < params.size(); ++i) {
        m.emplace_back(params.tensor(i).shape);
        v.emplace_back(params.tensor(i).shape);
    }
}

void AdamState::step(ParamStore<float>& params, const std::vector<Tensorf>& grads, double lr) {
    if (m.size() != params.size() || grads.size() != params.size()) {
        throw std::invalid_argument("AdamState::step: buffer count mismatch");
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, double(t));
    const double bc2 = 1.0 - std::pow(beta2, double(t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensorf& p = params.tensor(i);
        const Tensorf& g = grads[i];
        if (g.shape != p.shape || m[i].shape != p.shape) {
            throw std::invalid_argument("AdamState::step: shape mismatch for parameter " +
                                        std::to_string(i));
        }
        for (size_t k = 0; k < p.data.size(); ++k) {
            const double gk = double(g.data[k]);
            const double mk = beta1 * double(m[i].data[k]) + (1.0 - beta1) * gk;
            const double vk = beta2 * double(v[i].data[k]) + (1.0 - beta2) * gk * gk;
            m[i].data[k] = float(mk);
            v[i].data[k] = float(vk);
            p.data[k] = float(double(p.data[k]) - lr * (mk / bc1) / (std::sqrt(vk / bc2) + eps));
        }
    }
}

// ---- shared helpers ----

namespace {

struct Example {
    std::string id;
    Tensorf image;
    ExpertSet experts_norm;  // all shapes scaled into [0,1]^2
};

std::vector<Example> collect_examples(const Dataset& data, const char* tag,
                                      const TrainConfig& cfg) {
    std::vector<Example> out;
    for (const DataRecord* r : data.split(tag)) {
        if (r->image.h != cfg.h || r->image.w != cfg.w) {
            throw std::invalid_argument("trainer: record " + r->id + " is " +
                                        std::to_string(r->image.h) + "x" +
                                        std::to_string(r->image.w) + " but config wants " +
                                        std::to_string(cfg.h) + "x" + std::to_string(cfg.w));
        }
        if (int(r->experts.consensus.size()) != cfg.j) {
            throw std::invalid_argument("trainer: record " + r->id + " has " +
                                        std::to_string(r->experts.consensus.size()) +
                                        " contour points but config wants " +
                                        std::to_string(cfg.j));
        }
        Example ex;
        ex.id = r->id;
        ex.image = image_tensor<float>(r->image);
        for (const Shape& s : r->experts.experts) {
            ex.experts_norm.experts.push_back(normalize_shape(s, cfg.h, cfg.w));
        }
        ex.experts_norm.consensus = normalize_shape(r->experts.consensus, cfg.h, cfg.w);
        out.push_back(std::move(ex));
    }
    return out;
}

void shuffle_indices(std::vector<size_t>& idx, RngStream& rng) {
    for (size_t i = idx.size(); i > 1; --i) {
        std::swap(idx[i - 1], idx[size_t(rng.uniform_int(int(i)))]);
    }
}

std::vector<Tensorf> zero_grads_like(const ParamStore<float>& p) {
    std::vector<Tensorf> g;
    g.reserve(p.size());
    for (size_t i = 0; i < p.size(); ++i) g.emplace_back(p.tensor(i).shape);
    return g;
}

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

double row_max_mean_of(const Tensorf& pi) {
    const int m = pi.shape[0], n = pi.shape[1];
    double acc = 0.0;
    for (int r = 0; r < m; ++r) {
        float mx = pi.at2(r, 0);
        for (int c = 1; c < n; ++c) mx = std::max(mx, pi.at2(r, c));
        acc += double(mx);
    }
    return acc / m;
}

void require_same_geometry(const TrainConfig& a, const TrainConfig& b) {
    std::string bad;
    if (a.m != b.m) bad += " m";
    if (a.n != b.n) bad += " n";
    if (a.j != b.j) bad += " j";
    if (a.h != b.h) bad += " h";
    if (a.w != b.w) bad += " w";
    if (a.enc_channels != b.enc_channels) bad += " enc_channels";
    if (a.c_lo != b.c_lo) bad += " c_lo";
    if (a.c_hi != b.c_hi) bad += " c_hi";
    if (!bad.empty()) {
        throw std::runtime_error("checkpoint model geometry differs from config in:" + bad);
    }
}

// Streams used by both trainers, in checkpoint order.
struct Streams {
    RngStream gumbel, gt, shuffle;

    explicit Streams(uint64_t seed)
        : gumbel(RngStream::named(seed, "gumbel")),
          gt(RngStream::named(seed, "gt-sampling")),
          shuffle(RngStream::named(seed, "data")) {}

    std::vector<std::pair<std::string, std::string>> save() const {
        return {{"gumbel", gumbel.save_state()},
                {"gt-sampling", gt.save_state()},
                {"data", shuffle.save_state()}};
    }

    void load(const CheckpointData& ckpt) {
        const std::pair<const char*, RngStream*> wanted[] = {
            {"gumbel", &gumbel}, {"gt-sampling", &gt}, {"data", &shuffle}};
        for (const auto& [name, stream] : wanted) {
            const std::string* s = ckpt.find_rng(name);
            if (!s) throw std::runtime_error(std::string("checkpoint: missing RNG state '") +
                                             name + "'");
            stream->load_state(*s);
        }
    }
};

long long meta_ll(const CheckpointData& ckpt, const std::string& key) {
    const std::string* s = ckpt.find_meta(key);
    if (!s) throw std::runtime_error("checkpoint: missing meta '" + key + "'");
    try {
        return std::stoll(*s);
    } catch (const std::exception&) {
        throw std::runtime_error("checkpoint: malformed meta '" + key + "'");
    }
}

void load_params_from(const CheckpointData& ckpt, ParamStore<float>& params) {
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensorf* t = ckpt.find_tensor(params.name(i));
        if (!t) {
            throw std::runtime_error("checkpoint: missing tensor '" + params.name(i) + "'");
        }
        if (t->shape != params.tensor(i).shape) {
            throw std::runtime_error("checkpoint: tensor '" + params.name(i) + "' has shape " +
                                     dims_str(t->shape) + ", model wants " +
                                     dims_str(params.tensor(i).shape));
        }
        params.tensor(i) = *t;
    }
}

void load_adam_from(const CheckpointData& ckpt, const ParamStore<float>& params,
                    AdamState& adam) {
    adam.init_like(params);
    for (size_t i = 0; i < params.size(); ++i) {
        const Tensorf* tm = ckpt.find_tensor("adam.m." + params.name(i));
        const Tensorf* tv = ckpt.find_tensor("adam.v." + params.name(i));
        if (!tm || !tv) {
            throw std::runtime_error("checkpoint: missing optimizer moments for '" +
                                     params.name(i) + "'");
        }
        if (tm->shape != params.tensor(i).shape || tv->shape != params.tensor(i).shape) {
            throw std::runtime_error("checkpoint: optimizer moment shape mismatch for '" +
                                     params.name(i) + "'");
        }
        adam.m[i] = *tm;
        adam.v[i] = *tv;
    }
    adam.t = meta_ll(ckpt, "adam.t");
}

double validation_bias(const CqModel<float>& model, const std::vector<Example>& val) {
    if (val.empty()) return 0.0;
    double acc = 0.0;
    for (const Example& ex : val) {
        acc += bias(best_shape(model, ex.image), ex.experts_norm.consensus);
    }
    return acc / double(val.size());
}

double validation_reconstruction(const CqModel<float>& model, const std::vector<Example>& val) {
    if (val.empty()) return 0.0;
    double acc = 0.0;
    for (const Example& ex : val) {
        Tape<float> tape;
        BoundModel<float> b = bind_model(tape, model);
        const int pi = encode_image_node(b, ex.image);
        const int zp = tape.reshape(coordinate_map_node(tape, pi, model.coords),
                                    Dims{1, model.cfg.m});
        const int xhat = decode_image_node(b, zp);
        const int rec = tape.sum_all(tape.square(tape.sub(xhat, tape.constant(ex.image))));
        acc += double(tape.value(rec).data[0]);
    }
    return acc / double(val.size());
}

}  // namespace

// ---- checkpoint plumbing ----

CheckpointData make_checkpoint(const CqModel<float>& model, const AdamState& adam,
                               const std::vector<std::pair<std::string, std::string>>& rng_states,
                               int epoch, long long steps, const TrainConfig& cfg) {
    CheckpointData ckpt;
    ckpt.config_text = serialize_train_config(cfg);
    ckpt.meta = {{"epoch", std::to_string(epoch)},
                 {"steps", std::to_string(steps)},
                 {"adam.t", std::to_string(adam.t)}};
    ckpt.rng_states = rng_states;
    const ParamStore<float>& p = model.params;
    for (size_t i = 0; i < p.size(); ++i) ckpt.tensors.emplace_back(p.name(i), p.tensor(i));
    if (adam.m.size() == p.size()) {
        for (size_t i = 0; i < p.size(); ++i) {
            ckpt.tensors.emplace_back("adam.m." + p.name(i), adam.m[i]);
            ckpt.tensors.emplace_back("adam.v." + p.name(i), adam.v[i]);
        }
    }
    return ckpt;
}

TrainConfig config_from_checkpoint(const CheckpointData& ckpt) {
    return parse_train_config(ckpt.config_text);
}

CqModel<float> model_from_checkpoint(const CheckpointData& ckpt) {
    const TrainConfig cfg = config_from_checkpoint(ckpt);
    const bool has_shape = ckpt.find_tensor("sdec.fc0.w") != nullptr;
    const bool has_image = ckpt.find_tensor("idec.fc.w") != nullptr;
    if (!has_shape && !has_image) {
        throw std::runtime_error("checkpoint: holds no decoder tensors");
    }
    CqModel<float> model(ModelConfig::from_train(cfg),
                         has_shape ? NetworkSet::kShapeModel : NetworkSet::kImageAutoencoder);
    RngStream scratch(0);
    init_params(model, scratch);
    load_params_from(ckpt, model.params);
    return model;
}

// ---- trainers ----

namespace {

// Everything the two training loops share: batching, optimizer stepping,
// per-epoch checkpointing, divergence recovery. The per-image work and the
// CSV row rendering differ between the loops and are passed in.
template <typename PerImage, typename EndOfEpoch>
TrainOutcome run_training(const Dataset& data, const TrainConfig& cfg, std::ostream& metrics,
                          const std::string& checkpoint_path, const std::string& resume_from,
                          CqModel<float>& model, const char* header, PerImage per_image,
                          EndOfEpoch end_of_epoch) {
    config_validate(cfg);
    const std::vector<Example> train = collect_examples(data, "train", cfg);
    const std::vector<Example> val = collect_examples(data, "test", cfg);
    if (train.empty()) throw std::invalid_argument("trainer: dataset has no train records");

    RngStream init_rng = RngStream::named(uint64_t(cfg.seed), "init");
    init_params(model, init_rng);
    AdamState adam;
    adam.init_like(model.params);
    Streams streams(uint64_t(cfg.seed));
    int epoch0 = 0;
    long long steps = 0;

    if (!resume_from.empty()) {
        const CheckpointData ckpt = read_checkpoint(resume_from);
        require_same_geometry(cfg, config_from_checkpoint(ckpt));
        load_params_from(ckpt, model.params);
        load_adam_from(ckpt, model.params, adam);
        streams.load(ckpt);
        epoch0 = int(meta_ll(ckpt, "epoch"));
        steps = meta_ll(ckpt, "steps");
    }

    metrics << header;
    TrainOutcome outcome;
    outcome.epochs_completed = epoch0;
    outcome.steps = steps;

    // The file at checkpoint_path always holds the last state that finished
    // an epoch cleanly, so a divergence later simply stops updating it.
    write_checkpoint(make_checkpoint(model, adam, streams.save(), epoch0, steps, cfg),
                     checkpoint_path);

    for (int epoch = epoch0; epoch < cfg.epochs; ++epoch) {
        // Re-derived from identity every epoch so a resumed run visits the
        // same order as an uninterrupted one.
        std::vector<size_t> order(train.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        shuffle_indices(order, streams.shuffle);
        EpochStats stats;
        stats.epoch = epoch;
        try {
            for (size_t start = 0; start < order.size(); start += size_t(cfg.batch)) {
                const size_t stop = std::min(order.size(), start + size_t(cfg.batch));
                const double tau = tau_at_step(cfg, steps);
                std::vector<Tensorf> grads = zero_grads_like(model.params);
                for (size_t i = start; i < stop; ++i) {
                    per_image(train[order[i]], model, tau, streams, grads, stats);
                }
                const float inv = 1.0f / float(stop - start);
                for (Tensorf& g : grads) {
                    for (float& v : g.data) v *= inv;
                }
                adam.step(model.params, grads, cfg.lr);
                ++steps;
                stats.tau = tau;
            }
        } catch (const std::runtime_error& e) {
            outcome.diverged = true;
            outcome.divergence_message =
                "epoch " + std::to_string(epoch) + ": " + std::string(e.what());
            return outcome;
        }
        const double inv_n = 1.0 / double(train.size());
        stats.loss *= inv_n;
        stats.kl *= inv_n;
        stats.shape_ae *= inv_n;
        stats.regression *= inv_n;
        stats.best_err *= inv_n;
        stats.reconstruction *= inv_n;
        stats.entropy_mean *= inv_n;
        stats.row_max_mean *= inv_n;
        end_of_epoch(model, val, stats);
        metrics << stats.epoch << "," << fmt(stats.loss);
        if (model.parts == NetworkSet::kShapeModel) {
            metrics << "," << fmt(stats.kl) << "," << fmt(stats.shape_ae) << ","
                    << fmt(stats.regression) << "," << fmt(stats.best_err) << ","
                    << fmt(stats.entropy_mean) << "," << fmt(stats.row_max_mean) << ","
                    << fmt(stats.val_bias) << "," << fmt(stats.tau) << "\n";
        } else {
            metrics << "," << fmt(stats.reconstruction) << "," << fmt(stats.entropy_mean) << ","
                    << fmt(stats.row_max_mean) << "," << fmt(stats.val_rec) << ","
                    << fmt(stats.tau) << "\n";
        }
        metrics.flush();
        outcome.history.push_back(stats);
        outcome.epochs_completed = epoch + 1;
        outcome.steps = steps;
        write_checkpoint(make_checkpoint(model, adam, streams.save(), epoch + 1, steps, cfg),
                         checkpoint_path);
        if (cfg.max_steps > 0 && steps >= cfg.max_steps) break;
    }
    return outcome;
}

}  // namespace

TrainOutcome train_shape_model(const Dataset& data, const TrainConfig& cfg, std::ostream& metrics,
                               const std::string& checkpoint_path,
                               const std::string& resume_from) {
    CqModel<float> model(ModelConfig::from_train(cfg), NetworkSet::kShapeModel);
    const char* header =
        "epoch,loss,kl,shape_ae,regression,best_shape,entropy,row_max,val_bias,tau\n";
    auto per_image = [&cfg](const Example& ex, CqModel<float>& m, double tau, Streams& streams,
                            std::vector<Tensorf>& grads, EpochStats& stats) {
        Tape<float> tape;
        BoundModel<float> b = bind_model(tape, m);
        ObjectiveInputs<float> in;
        in.image = ex.image;
        in.noise = gumbel_noise<float>(Dims{cfg.l_max * cfg.m, cfg.n}, streams.gumbel);
        in.tau = float(tau);
        in.straight_through = cfg.straight_through;
        in.gt_samples = sample_gt_shapes(ex.experts_norm, cfg.k_max, streams.gt);
        in.consensus = ex.experts_norm.consensus;
        in.alpha = float(cfg.alpha);
        in.beta = float(cfg.beta);
        const ObjectiveGraph<float> g = build_objective(b, in);
        tape.backward(g.loss);
        accumulate_param_grads(b, grads);
        stats.loss += double(g.total);
        stats.kl += double(g.kl);
        stats.shape_ae += double(g.shape_ae);
        stats.regression += double(g.regression);
        stats.best_err += double(g.best_err);
        const Tensorf& piv = tape.value(g.pi);
        stats.entropy_mean += double(entropy(piv));
        stats.row_max_mean += row_max_mean_of(piv);
    };
    auto end_of_epoch = [](const CqModel<float>& m, const std::vector<Example>& val,
                           EpochStats& stats) { stats.val_bias = validation_bias(m, val); };
    return run_training(data, cfg, metrics, checkpoint_path, resume_from, model, header,
                        per_image, end_of_epoch);
}

TrainOutcome train_image_autoencoder(const Dataset& data, const TrainConfig& cfg,
                                     std::ostream& metrics, const std::string& checkpoint_path,
                                     const std::string& resume_from) {
    CqModel<float> model(ModelConfig::from_train(cfg), NetworkSet::kImageAutoencoder);
    const char* header = "epoch,loss,reconstruction,entropy,row_max,val_rec,tau\n";
    auto per_image = [&cfg](const Example& ex, CqModel<float>& m, double tau, Streams& streams,
                            std::vector<Tensorf>& grads, EpochStats& stats) {
        Tape<float> tape;
        BoundModel<float> b = bind_model(tape, m);
        const Tensorf noise = gumbel_noise<float>(Dims{cfg.m, cfg.n}, streams.gumbel);
        const CqaeGraph<float> g = build_cqae_loss(b, ex.image, noise, float(tau),
                                                   cfg.straight_through, float(cfg.alpha_cqae));
        tape.backward(g.loss);
        accumulate_param_grads(b, grads);
        stats.loss += double(g.total);
        stats.reconstruction += double(g.reconstruction);
        const Tensorf& piv = tape.value(g.pi);
        stats.entropy_mean += double(entropy(piv));
        stats.row_max_mean += row_max_mean_of(piv);
    };
    auto end_of_epoch = [](const CqModel<float>& m, const std::vector<Example>& val,
                           EpochStats& stats) {
        stats.val_rec = validation_reconstruction(m, val);
    };
    return run_training(data, cfg, metrics, checkpoint_path, resume_from, model, header,
                        per_image, end_of_epoch);
}

}  // namespace cqvae
