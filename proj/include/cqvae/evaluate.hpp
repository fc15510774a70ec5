#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "cqvae/config.hpp"
#include "cqvae/data.hpp"
#include "cqvae/metrics.hpp"
#include "cqvae/model.hpp"

namespace cqvae {

// Per-image evaluation results. All distances and variations are in
// normalized units (fraction of image extent), so "bias below 1% of image
// width" reads directly as bias_best < 0.01.
struct EvalRow {
    std::string id;
    double ambiguity = 0.0;
    bool ok = false;
    std::string error;
    double var_gt = 0.0;       // shape variation of the expert annotations
    double var_model = 0.0;    // shape variation of sampled model shapes
    double entropy_nats = 0.0; // latent entropy of q(z|x), summed over rows
    double bias_best = 0.0;    // best-shape distance to the consensus
    VariationReport gt_report, model_report;  // per-point detail for heatmaps
    Shape best;                               // normalized coordinates
};

struct CorrelationCell {
    std::string x, y;      // series names
    double value = 0.0;    // meaningless when degenerate
    bool degenerate = false;
    std::string note;
};

struct EvalSummary {
    std::vector<EvalRow> rows;                  // one per test record
    std::vector<CorrelationCell> correlations;  // the four headline pairs
    int failed = 0;
};

// Evaluates the model on the dataset's test split. Per-image failures are
// recorded in the row (and echoed to errlog when given) and the run
// continues; degenerate correlations (zero variance) are flagged, not fatal.
// Sampling uses a stream named after each record id, so results do not
// depend on evaluation order.
EvalSummary evaluate_model(const CqModel<float>& model, const Dataset& data,
                           const TrainConfig& cfg, std::ostream* errlog = nullptr);

// Writes records.csv, correlations.json, and per-image heatmap CSV/PPM pairs
// (ground-truth side and model side) for the first cfg.heatmap_count
// evaluable records. `data` supplies the underlay images.
void write_eval_outputs(const EvalSummary& summary, const Dataset& data, const TrainConfig& cfg,
                        const std::string& out_dir);

}  // namespace cqvae
