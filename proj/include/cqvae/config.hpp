#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cqvae {

// Every knob a run needs, shared by all subcommands. Serialized as a plain
// "key = value" text file; parse(serialize(cfg)) reproduces cfg exactly
// (reals are printed with 17 significant digits).
struct TrainConfig {
    // latent and image geometry
    int m = 16;  // latent dimensions (rows of z)
    int n = 11;  // quantized coordinates per dimension (columns of z)
    int j = 176; // contour points per shape
    int h = 64;  // image height
    int w = 64;  // image width

    // coordinate vector endpoints (n evenly spaced values)
    double c_lo = -2.0;
    double c_hi = 2.0;

    // encoder channel widths, one conv block (stride 2) per entry; the image
    // decoder mirrors the list in reverse
    std::vector<int> enc_channels = {16, 32, 64, 128};

    // loss weights
    double alpha = 1.0;       // shape-autoencoder cross-entropy weight
    double beta = 1.0;        // best-shape term weight
    double alpha_cqae = 1.0;  // entropy weight in the image-autoencoder loss

    // Gumbel-softmax temperature schedule: exponential decay from tau_start
    // to tau_end over tau_steps optimizer steps, then constant
    double tau_start = 1.0;
    double tau_end = 0.3;
    int tau_steps = 3000;

    // shape sampling-and-matching sizes
    int k_max = 8;   // ground-truth samples per image
    int l_max = 12;  // model samples per image
    bool straight_through = true;

    // optimization
    double lr = 1e-3;
    int batch = 16;
    int epochs = 30;
    long long max_steps = 0;  // stop at the first epoch boundary reaching this (0 = off)
    long long seed = 1234;

    // dataset generation
    int gen_scenes = 100;      // synthetic scenes to render
    int gen_train_count = 0;   // grow train split to this size via warping (0 = off)
    int experts = 3;           // simulated annotators per scene
    double noise_unit = 0.02;  // expert displacement unit, fraction of image width
    std::vector<double> ambiguity_levels = {0.5, 1.0, 2.0};  // cycled across scenes

    // evaluation
    int eval_samples = 64;   // hard latent samples per image for shape variation
    int heatmap_count = 4;   // test images to render variation heatmaps for

    // paths
    std::string data_dir = "data";
    std::string out_dir = "run";
};

// Assign one field by its config-file key. Throws std::invalid_argument for
// an unknown key or an unparsable value. Used by both the file parser and
// command-line overrides, so the two can never drift apart.
void config_set(TrainConfig& cfg, const std::string& key, const std::string& value);

// Parse "key = value" text. '#' starts a comment, blank lines are skipped,
// a repeated key is an error. Does not validate cross-field invariants;
// call config_validate once overrides are applied.
TrainConfig parse_train_config(const std::string& text);

// Fixed-order, comment-annotated rendering; stable across runs.
std::string serialize_train_config(const TrainConfig& cfg);

// Throws std::invalid_argument listing every violated invariant
// (l_max >= k_max >= 1, n >= 2, positive temperatures, image size divisible
// by the conv stack's total stride, and so on).
void config_validate(const TrainConfig& cfg);

TrainConfig load_train_config(const std::string& path);
void save_train_config(const TrainConfig& cfg, const std::string& path);

// Temperature after `step` optimizer steps under cfg's schedule.
double tau_at_step(const TrainConfig& cfg, long long step);

}  // namespace cqvae
