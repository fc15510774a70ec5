#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "cqvae/checkpoint.hpp"
#include "cqvae/config.hpp"
#include "cqvae/data.hpp"
#include "cqvae/model.hpp"

namespace cqvae {

// Adaptive-moment gradient descent with bias correction. Moment buffers are
// parallel to the parameter store; `t` counts completed steps.
struct AdamState {
    std::vector<Tensorf> m, v;
    long long t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void init_like(const ParamStore<float>& params);
    void step(ParamStore<float>& params, const std::vector<Tensorf>& grads, double lr);
};

// One per-epoch metrics row. The two trainers fill the fields that apply to
// them and leave the rest zero: the shape model uses the four objective
// terms and val_bias, the image autoencoder uses reconstruction and val_rec.
struct EpochStats {
    int epoch = 0;
    double loss = 0;
    double kl = 0, shape_ae = 0, regression = 0, best_err = 0;
    double reconstruction = 0;
    double entropy_mean = 0;   // mean latent entropy per train image (nats)
    double row_max_mean = 0;   // mean over rows of the max probability
    double val_bias = 0;       // mean best-shape bias on the test split, normalized units
    double val_rec = 0;        // mean squared reconstruction error on the test split
    double tau = 0;
};

struct TrainOutcome {
    bool diverged = false;
    std::string divergence_message;
    int epochs_completed = 0;
    long long steps = 0;
    std::vector<EpochStats> history;
};

// Trains the image-to-shape model on the dataset's train split, logging one
// CSV row per epoch to `metrics` and writing a checkpoint to checkpoint_path
// after every epoch. On divergence (any non-finite loss term) the last
// epoch's checkpoint is restored to disk and the outcome says so.
// `resume_from` continues from a checkpoint written by this function; the
// stored model geometry must match cfg.
TrainOutcome train_shape_model(const Dataset& data, const TrainConfig& cfg, std::ostream& metrics,
                               const std::string& checkpoint_path,
                               const std::string& resume_from = "");

// Same loop for the image autoencoder (reconstruction + entropy loss).
TrainOutcome train_image_autoencoder(const Dataset& data, const TrainConfig& cfg,
                                     std::ostream& metrics, const std::string& checkpoint_path,
                                     const std::string& resume_from = "");

// ---- checkpoint plumbing shared with the CLI ----

CheckpointData make_checkpoint(const CqModel<float>& model, const AdamState& adam,
                               const std::vector<std::pair<std::string, std::string>>& rng_states,
                               int epoch, long long steps, const TrainConfig& cfg);

// Rebuilds the model (and optionally optimizer/RNG state) from a checkpoint.
// Throws std::runtime_error if tensors are missing or shaped differently
// than the stored config implies.
CqModel<float> model_from_checkpoint(const CheckpointData& ckpt);
TrainConfig config_from_checkpoint(const CheckpointData& ckpt);

}  // namespace cqvae
