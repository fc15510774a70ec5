// Command-line entry point. Subcommands cover the full workflow: generate a
// synthetic dataset, train the shape model (or the image-autoencoder
// variant), draw shapes from a checkpoint, and evaluate a checkpoint against
// a test split. Every command materializes its effective configuration and
// the build version inside its output directory so runs are reproducible
// from the artifacts alone.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
// error, 3 training divergence.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "cqvae/checkpoint.hpp"
#include "cqvae/config.hpp"
#include "cqvae/data.hpp"
#include "cqvae/evaluate.hpp"
#include "cqvae/image.hpp"
#include "cqvae/metrics.hpp"
#include "cqvae/model.hpp"
#include "cqvae/rng.hpp"
#include "cqvae/shape.hpp"
#include "cqvae/tensor.hpp"
#include "cqvae/trainer.hpp"

#ifndef CQVAE_VERSION
#define CQVAE_VERSION "v0.0.0-unknown"
#endif

namespace {

using namespace cqvae;

std::string real_str(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::string trimmed(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

// Overrides gathered from the command line, applied to a base config in a
// fixed order: config file first, then typed flags, then raw --set pairs.
struct Overrides {
    std::string config_file;
    std::vector<std::pair<std::string, std::string>> typed;
    std::vector<std::string> sets;
};

void apply_overrides(TrainConfig& cfg, const Overrides& ov) {
    for (const auto& kv : ov.typed) config_set(cfg, kv.first, kv.second);
    for (const std::string& s : ov.sets) {
        const size_t eq = s.find('=');
        if (eq == std::string::npos || trimmed(s.substr(0, eq)).empty()) {
            throw std::invalid_argument("--set expects key=value, got '" + s + "'");
        }
        config_set(cfg, trimmed(s.substr(0, eq)), trimmed(s.substr(eq + 1)));
    }
}

// Base config for commands that start from defaults (generate, train, cqae).
TrainConfig assemble_config(const Overrides& ov) {
    TrainConfig cfg = ov.config_file.empty() ? TrainConfig{} : load_train_config(ov.config_file);
    apply_overrides(cfg, ov);
    return cfg;
}

// Register a typed flag that funnels into config_set, so flag parsing and
// file parsing can never disagree about a value's format.
void opt_int(CLI::App* cmd, Overrides& ov, const std::string& flag, const std::string& key,
             const std::string& help) {
    cmd->add_option_function<long long>(
        flag, [&ov, key](const long long& v) { ov.typed.emplace_back(key, std::to_string(v)); },
        help);
}

void opt_real(CLI::App* cmd, Overrides& ov, const std::string& flag, const std::string& key,
              const std::string& help) {
    cmd->add_option_function<double>(
        flag, [&ov, key](const double& v) { ov.typed.emplace_back(key, real_str(v)); }, help);
}

void opt_str(CLI::App* cmd, Overrides& ov, const std::string& flag, const std::string& key,
             const std::string& help) {
    cmd->add_option_function<std::string>(
        flag, [&ov, key](const std::string& v) { ov.typed.emplace_back(key, v); }, help);
}

void add_set_option(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--set", ov.sets, "extra key=value override, applied last (repeatable)");
}

void add_config_option(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--config", ov.config_file,
                    "key = value config file, applied before any flags");
}

// Every command drops the effective config and the build version into its
// output directory.
void prepare_run_dir(const std::string& dir, const TrainConfig& cfg) {
    std::filesystem::create_directories(dir);
    save_train_config(cfg, dir + "/config.cfg");
    std::ofstream v(dir + "/version.txt");
    if (!v) throw std::runtime_error("cannot write " + dir + "/version.txt");
    v << CQVAE_VERSION << "\n";
}

int usage_fail(const char* cmd, const std::exception& e) {
    std::cerr << "cqvae " << cmd << ": " << e.what() << "\n";
    return 1;
}

int run_fail(const char* cmd, const std::exception& e) {
    std::cerr << "cqvae " << cmd << ": " << e.what() << "\n";
    return 2;
}

// Mirrors every character written to the metrics file onto the console so
// long trainings show live per-epoch progress.
class TeeBuf : public std::streambuf {
public:
    TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

protected:
    int overflow(int c) override {
        if (traits_type::eq_int_type(c, traits_type::eof())) return traits_type::not_eof(c);
        const char ch = traits_type::to_char_type(c);
        const bool ok = a_->sputc(ch) != traits_type::eof() && b_->sputc(ch) != traits_type::eof();
        return ok ? c : traits_type::eof();
    }
    int sync() override {
        const int ra = a_->pubsync();
        const int rb = b_->pubsync();
        return (ra == 0 && rb == 0) ? 0 : -1;
    }

private:
    std::streambuf* a_;
    std::streambuf* b_;
};

void write_points_csv(const Shape& s, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const Point2& p : s.points) out << real_str(p.x) << "," << real_str(p.y) << "\n";
    if (!out) throw std::runtime_error("failed writing " + path);
}

// Stamp a shape's points (pixel coordinates) onto an RGB canvas as small
// crosses. Pixel (x, y) has its center at (x + 0.5, y + 0.5).
void plot_shape(std::vector<Rgb>& canvas, int h, int w, const Shape& s, Rgb color) {
    static const int offs[5][2] = {{0, 0}, {1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (const Point2& p : s.points) {
        const int x = int(std::lround(p.x - 0.5));
        const int y = int(std::lround(p.y - 0.5));
        for (const auto& d : offs) {
            const int xx = x + d[0], yy = y + d[1];
            if (xx >= 0 && xx < w && yy >= 0 && yy < h) {
                canvas[size_t(yy) * size_t(w) + size_t(xx)] = color;
            }
        }
    }
}

// ---- generate ----

int cmd_generate(const Overrides& ov, bool sweep) {
    TrainConfig cfg;
    try {
        cfg = assemble_config(ov);
        config_validate(cfg);
    } catch (const std::exception& e) {
        return usage_fail("generate", e);
    }
    try {
        prepare_run_dir(cfg.data_dir, cfg);

        SceneParams base;
        base.j = cfg.j;
        base.h = cfg.h;
        base.w = cfg.w;
        base.experts = cfg.experts;
        base.noise_unit = cfg.noise_unit;
        Dataset ds = generate_dataset(cfg.gen_scenes, uint64_t(cfg.seed), base,
                                      cfg.ambiguity_levels);
        if (cfg.gen_train_count > 0) {
            std::vector<Shape> consensus;
            for (const DataRecord* r : ds.split("train")) consensus.push_back(r->experts.consensus);
            const StatisticalShapeModel ssm = fit_ssm(consensus, 0.98);
            RngStream rng = RngStream::named(uint64_t(cfg.seed), "data/augment");
            ds = augment(ds, ssm, cfg.gen_train_count, rng);
        }
        write_dataset(ds, cfg.data_dir);

        const size_t train = ds.split("train").size();
        const size_t test = ds.split("test").size();
        double mean_var = 0.0;
        for (const DataRecord& r : ds.records) mean_var += shape_variation(r.experts.experts).scalar;
        mean_var /= double(ds.records.size());

        std::cout << "dataset: " << cfg.data_dir << "\n";
        std::cout << "records: " << ds.records.size() << " (train " << train << ", test " << test
                  << ")\n";
        std::cout << "geometry: " << ds.j << " points per shape, " << ds.h << "x" << ds.w
                  << " pixels, " << cfg.experts << " annotators\n";
        char line[96];
        std::snprintf(line, sizeof(line), "mean annotation variation: %.6g px\n", mean_var);
        std::cout << line;

        if (sweep) {
            // Per-ambiguity-level table of annotation spread, to confirm that
            // the ambiguity knob actually controls annotator disagreement.
            std::map<double, std::pair<int, double>> groups;
            for (const DataRecord& r : ds.records) {
                auto& g = groups[r.ambiguity];
                g.first += 1;
                g.second += shape_variation(r.experts.experts).scalar;
            }
            std::cout << "\nambiguity  records  mean annotation variation (px)\n";
            for (const auto& [level, g] : groups) {
                std::snprintf(line, sizeof(line), "%-9.4g  %-7d  %.6g\n", level, g.first,
                              g.second / double(g.first));
                std::cout << line;
            }
        }
        return 0;
    } catch (const std::exception& e) {
        return run_fail("generate", e);
    }
}

// ---- train / cqae ----

int cmd_train(const char* name, const Overrides& ov, bool image_autoencoder, bool resume) {
    TrainConfig cfg;
    try {
        cfg = assemble_config(ov);
        config_validate(cfg);
    } catch (const std::exception& e) {
        return usage_fail(name, e);
    }
    try {
        Dataset ds = load_dataset(cfg.data_dir);
        if (cfg.j != ds.j || cfg.h != ds.h || cfg.w != ds.w) {
            std::cerr << "cqvae " << name << ": adopting dataset geometry j=" << ds.j
                      << " h=" << ds.h << " w=" << ds.w << " (config had j=" << cfg.j
                      << " h=" << cfg.h << " w=" << cfg.w << ")\n";
            cfg.j = ds.j;
            cfg.h = ds.h;
            cfg.w = ds.w;
        }
        if (cfg.max_steps > 0) {
            // Each epoch runs at least one step, so this many epochs always
            // reach the cap; the trainer stops at the first epoch boundary
            // with max_steps done.
            const long long cap = std::min<long long>(cfg.max_steps, 1000000000LL);
            cfg.epochs = int(std::max<long long>(cfg.epochs, cap));
        }
        config_validate(cfg);
        prepare_run_dir(cfg.out_dir, cfg);

        const std::string ckpt_path = cfg.out_dir + "/model.ckpt";
        const std::string metrics_path = cfg.out_dir + "/metrics.csv";
        std::string resume_from;
        if (resume) {
            if (!std::filesystem::exists(ckpt_path)) {
                throw std::runtime_error("resume requested but no checkpoint at " + ckpt_path);
            }
            resume_from = ckpt_path;
        }
        // A resumed run appends, starting with a fresh header line that marks
        // the resume point.
        std::ofstream metrics_file(metrics_path, resume ? std::ios::app : std::ios::trunc);
        if (!metrics_file) throw std::runtime_error("cannot write " + metrics_path);
        TeeBuf tee(metrics_file.rdbuf(), std::cout.rdbuf());
        std::ostream metrics(&tee);

        const TrainOutcome out = image_autoencoder
                                     ? train_image_autoencoder(ds, cfg, metrics, ckpt_path,
                                                               resume_from)
                                     : train_shape_model(ds, cfg, metrics, ckpt_path, resume_from);
        metrics.flush();
        if (out.diverged) {
            std::cerr << "cqvae " << name << ": training diverged: " << out.divergence_message
                      << "\n"
                      << "last clean state kept at " << ckpt_path << "\n";
            return 3;
        }
        std::cout << "completed " << out.epochs_completed << " epochs, " << out.steps
                  << " steps\n";
        if (!out.history.empty()) {
            char line[64];
            std::snprintf(line, sizeof(line), "final loss %.6g\n", out.history.back().loss);
            std::cout << line;
        }
        std::cout << "checkpoint: " << ckpt_path << "\n";
        return 0;
    } catch (const std::exception& e) {
        return run_fail(name, e);
    }
}

// ---- sample ----

int cmd_sample(const Overrides& ov, const std::string& run_dir, int count,
               const std::string& image_id) {
    if (count < 1) {
        std::cerr << "cqvae sample: --count must be >= 1\n";
        return 1;
    }
    TrainConfig cfg;
    CheckpointData ckpt;
    try {
        ckpt = read_checkpoint(run_dir + "/model.ckpt");
        cfg = config_from_checkpoint(ckpt);
        cfg.out_dir = run_dir + "/samples";
        apply_overrides(cfg, ov);
        config_validate(cfg);
    } catch (const std::invalid_argument& e) {
        return usage_fail("sample", e);
    } catch (const std::exception& e) {
        return run_fail("sample", e);
    }
    try {
        const CqModel<float> model = model_from_checkpoint(ckpt);
        if (model.parts != NetworkSet::kShapeModel) {
            throw std::runtime_error(
                "checkpoint holds an image autoencoder; sampling needs a shape model");
        }
        prepare_run_dir(cfg.out_dir, cfg);

        std::vector<Shape> shapes;  // normalized [0,1] coordinates
        const DataRecord* rec = nullptr;
        Dataset ds;
        if (image_id.empty()) {
            // Random-code mode: decode hard codes drawn uniformly at random.
            RngStream rng = RngStream::named(uint64_t(cfg.seed), "sample/codes");
            std::vector<Tensorf> codes;
            codes.reserve(size_t(count));
            for (int k = 0; k < count; ++k) {
                Tensorf code(Dims{cfg.m, cfg.n});
                for (int r = 0; r < cfg.m; ++r) code.at2(r, rng.uniform_int(cfg.n)) = 1.0f;
                codes.push_back(std::move(code));
            }
            shapes = decode_codes(model, codes);
        } else {
            ds = load_dataset(cfg.data_dir);
            for (const DataRecord& r : ds.records) {
                if (r.id == image_id) {
                    rec = &r;
                    break;
                }
            }
            if (!rec) {
                throw std::runtime_error("record '" + image_id + "' not found in " + cfg.data_dir);
            }
            RngStream rng = RngStream::named(uint64_t(cfg.seed), "gumbel/sample/" + image_id);
            shapes = sample_shapes(model, image_tensor<float>(rec->image), count, rng);
        }

        std::vector<Rgb> canvas(size_t(cfg.h) * size_t(cfg.w), Rgb{0, 0, 0});
        if (rec) {
            for (size_t i = 0; i < rec->image.pix.size(); ++i) {
                const int v =
                    std::clamp(int(std::lround(double(rec->image.pix[i]) * 255.0)), 0, 255);
                canvas[i] = Rgb{uint8_t(v), uint8_t(v), uint8_t(v)};
            }
        }
        for (int k = 0; k < count; ++k) {
            const Shape px = denormalize_shape(shapes[size_t(k)], cfg.h, cfg.w);
            char fname[48];
            std::snprintf(fname, sizeof(fname), "/shape_%03d.csv", k);
            write_points_csv(px, cfg.out_dir + fname);
            const double t = count == 1 ? 0.5 : double(k) / double(count - 1);
            plot_shape(canvas, cfg.h, cfg.w, px, variation_color(t));
        }
        write_ppm(canvas, cfg.h, cfg.w, cfg.out_dir + "/overlay.ppm");

        std::cout << "wrote " << count << (image_id.empty() ? " random-code" : " posterior")
                  << " shapes and overlay.ppm to " << cfg.out_dir << "\n";
        return 0;
    } catch (const std::exception& e) {
        return run_fail("sample", e);
    }
}

// ---- evaluate ----

void print_eval_summary(const EvalSummary& summary) {
    std::cout << "evaluated " << summary.rows.size() << " test records (" << summary.failed
              << " failed)\n";
    for (const CorrelationCell& c : summary.correlations) {
        std::cout << "corr(" << c.x << ", " << c.y << ") = ";
        if (c.degenerate) {
            std::cout << "degenerate (" << c.note << ")\n";
        } else {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.4f", c.value);
            std::cout << buf << "\n";
        }
    }
}

int cmd_evaluate(const Overrides& ov, const std::string& run_dir, int seeds) {
    if (seeds < 1) {
        std::cerr << "cqvae evaluate: --seeds must be >= 1\n";
        return 1;
    }
    TrainConfig cfg;
    CheckpointData ckpt;
    try {
        ckpt = read_checkpoint(run_dir + "/model.ckpt");
        cfg = config_from_checkpoint(ckpt);
        cfg.out_dir = run_dir + "/eval";
        apply_overrides(cfg, ov);
        config_validate(cfg);
    } catch (const std::invalid_argument& e) {
        return usage_fail("evaluate", e);
    } catch (const std::exception& e) {
        return run_fail("evaluate", e);
    }
    try {
        const Dataset ds = load_dataset(cfg.data_dir);
        prepare_run_dir(cfg.out_dir, cfg);

        if (seeds == 1) {
            const CqModel<float> model = model_from_checkpoint(ckpt);
            if (model.parts != NetworkSet::kShapeModel) {
                throw std::runtime_error(
                    "checkpoint holds an image autoencoder; evaluation needs a shape model");
            }
            const EvalSummary summary = evaluate_model(model, ds, cfg, &std::cerr);
            write_eval_outputs(summary, ds, cfg, cfg.out_dir);
            print_eval_summary(summary);
            std::cout << "outputs: " << cfg.out_dir << "\n";
            return 0;
        }

        // Ensemble mode: train `seeds` fresh models on the same data with
        // consecutive seeds and report how much the best shapes move across
        // them, a cheap stand-in for ensemble variance.
        std::cout << "ensemble: training " << seeds << " models with seeds " << cfg.seed << ".."
                  << cfg.seed + seeds - 1 << "\n";
        std::vector<EvalSummary> summaries;
        for (int i = 0; i < seeds; ++i) {
            TrainConfig ci = cfg;
            ci.seed = cfg.seed + i;
            ci.out_dir = cfg.out_dir + "/seeds/" + std::to_string(i);
            prepare_run_dir(ci.out_dir, ci);
            const std::string ckpt_path = ci.out_dir + "/model.ckpt";
            std::ofstream metrics(ci.out_dir + "/metrics.csv");
            if (!metrics) throw std::runtime_error("cannot write " + ci.out_dir + "/metrics.csv");
            const TrainOutcome out = train_shape_model(ds, ci, metrics, ckpt_path);
            if (out.diverged) {
                std::cerr << "cqvae evaluate: seed " << ci.seed
                          << " diverged: " << out.divergence_message << "\n";
                return 3;
            }
            const CqModel<float> mi = model_from_checkpoint(read_checkpoint(ckpt_path));
            EvalSummary si = evaluate_model(mi, ds, ci, &std::cerr);
            write_eval_outputs(si, ds, ci, ci.out_dir + "/eval");
            std::cout << "seed " << ci.seed << ": " << out.epochs_completed << " epochs, "
                      << si.rows.size() << " records evaluated (" << si.failed << " failed)\n";
            summaries.push_back(std::move(si));
        }

        // Cross-seed variation of the best shape, per record (normalized
        // coordinates). Records that failed under any seed are skipped.
        const std::string cross_path = cfg.out_dir + "/cross_seed.csv";
        std::ofstream cross(cross_path);
        if (!cross) throw std::runtime_error("cannot write " + cross_path);
        cross << "id,ambiguity,seeds,var_best\n";
        double total = 0.0;
        int counted = 0, skipped = 0;
        for (const EvalRow& r0 : summaries[0].rows) {
            std::vector<Shape> bests;
            for (const EvalSummary& s : summaries) {
                for (const EvalRow& r : s.rows) {
                    if (r.id == r0.id && r.ok) {
                        bests.push_back(r.best);
                        break;
                    }
                }
            }
            if (int(bests.size()) != seeds) {
                ++skipped;
                continue;
            }
            const double var = shape_variation(bests).scalar;
            cross << r0.id << "," << real_str(r0.ambiguity) << "," << seeds << ","
                  << real_str(var) << "\n";
            total += var;
            ++counted;
        }
        if (!cross) throw std::runtime_error("failed writing " + cross_path);

        if (counted == 0) {
            std::cout << "cross-seed variation: no record evaluated cleanly under every seed\n";
        } else {
            char buf[96];
            std::snprintf(buf, sizeof(buf),
                          "cross-seed best-shape variation: mean %.6g over %d records",
                          total / double(counted), counted);
            std::cout << buf;
            if (skipped > 0) std::cout << " (" << skipped << " skipped)";
            if (total == 0.0) std::cout << " (zero variance across seeds)";
            std::cout << "\n";
        }
        std::cout << "outputs: " << cfg.out_dir << "\n";
        return 0;
    } catch (const std::exception& e) {
        return run_fail("evaluate", e);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic-shape uncertainty toolkit: generate data, train, sample, evaluate"};
    app.set_version_flag("--version", CQVAE_VERSION);
    app.require_subcommand(1);

    // generate
    Overrides gen_ov;
    bool gen_sweep = false;
    CLI::App* gen = app.add_subcommand(
        "generate", "render a synthetic dataset of annotated scenes (80/20 train/test)");
    add_config_option(gen, gen_ov);
    opt_str(gen, gen_ov, "--out", "data_dir", "dataset output directory");
    opt_int(gen, gen_ov, "--scenes", "gen_scenes", "number of scenes to render");
    opt_int(gen, gen_ov, "--seed", "seed", "root random seed");
    opt_int(gen, gen_ov, "--experts", "experts", "simulated annotators per scene");
    opt_real(gen, gen_ov, "--noise-unit", "noise_unit",
             "annotator displacement unit, fraction of image width");
    opt_str(gen, gen_ov, "--ambiguity", "ambiguity_levels",
            "comma-separated ambiguity levels cycled across scenes");
    opt_int(gen, gen_ov, "--train-count", "gen_train_count",
            "grow the train split to this many records by warping originals");
    gen->add_flag("--sweep", gen_sweep, "print a per-ambiguity-level annotation variation table");
    add_set_option(gen, gen_ov);

    // train / cqae share their flag set
    Overrides train_ov, cqae_ov;
    bool train_resume = false, cqae_resume = false;
    CLI::App* train = app.add_subcommand("train", "train the shape model on a dataset");
    CLI::App* cqae = app.add_subcommand(
        "cqae", "train the image-autoencoder variant (no shape networks)");
    struct TrainFlags {
        CLI::App* cmd;
        Overrides* ov;
        bool* resume;
    };
    for (const TrainFlags& t : {TrainFlags{train, &train_ov, &train_resume},
                                TrainFlags{cqae, &cqae_ov, &cqae_resume}}) {
        add_config_option(t.cmd, *t.ov);
        opt_str(t.cmd, *t.ov, "--data", "data_dir", "dataset directory (from `generate`)");
        opt_str(t.cmd, *t.ov, "--out", "out_dir", "run output directory");
        opt_int(t.cmd, *t.ov, "--steps", "max_steps",
                "run whole epochs until this many optimizer steps are done");
        opt_int(t.cmd, *t.ov, "--epochs", "epochs", "number of training epochs");
        opt_int(t.cmd, *t.ov, "--batch", "batch", "minibatch size");
        opt_int(t.cmd, *t.ov, "--m", "m", "latent rows");
        opt_int(t.cmd, *t.ov, "--n", "n", "quantized coordinates per latent row");
        opt_int(t.cmd, *t.ov, "--seed", "seed", "root random seed");
        opt_real(t.cmd, *t.ov, "--lr", "lr", "learning rate");
        opt_real(t.cmd, *t.ov, "--alpha", "alpha", "shape-autoencoder loss weight");
        opt_real(t.cmd, *t.ov, "--beta", "beta", "best-shape loss weight");
        t.cmd->add_flag("--resume", *t.resume,
                        "continue from the checkpoint in the output directory "
                        "(metrics.csv gains a fresh header block)");
        add_set_option(t.cmd, *t.ov);
    }

    // sample
    Overrides sample_ov;
    std::string sample_run, sample_image;
    int sample_count = 8;
    CLI::App* sample = app.add_subcommand(
        "sample", "draw shapes from a trained checkpoint, as CSV files plus one overlay image");
    sample->add_option("--run", sample_run, "run directory containing model.ckpt")->required();
    sample->add_option("--count", sample_count, "number of shapes to draw");
    sample->add_option("--image", sample_image,
                       "dataset record id to condition on (default: unconditional random codes)");
    opt_str(sample, sample_ov, "--data", "data_dir", "dataset directory for --image lookups");
    opt_str(sample, sample_ov, "--out", "out_dir",
            "output directory (default: <run>/samples)");
    opt_int(sample, sample_ov, "--seed", "seed", "sampling seed (default: the training seed)");
    add_set_option(sample, sample_ov);

    // evaluate
    Overrides eval_ov;
    std::string eval_run;
    int eval_seeds = 1;
    CLI::App* eval = app.add_subcommand(
        "evaluate", "score a checkpoint on the test split and write records, correlations "
                    "and variation heatmaps");
    eval->add_option("--run", eval_run, "run directory containing model.ckpt")->required();
    eval->add_option("--seeds", eval_seeds,
                     "train and evaluate this many fresh seeds and report cross-seed "
                     "best-shape variance (1 = evaluate the checkpoint as-is)");
    opt_str(eval, eval_ov, "--data", "data_dir", "dataset directory (default: from checkpoint)");
    opt_str(eval, eval_ov, "--out", "out_dir", "output directory (default: <run>/eval)");
    opt_int(eval, eval_ov, "--eval-samples", "eval_samples",
            "latent samples per image for shape variation");
    opt_int(eval, eval_ov, "--heatmaps", "heatmap_count",
            "number of test images to render variation heatmaps for");
    opt_int(eval, eval_ov, "--seed", "seed", "evaluation seed (default: the training seed)");
    add_set_option(eval, eval_ov);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (app.got_subcommand(gen)) return cmd_generate(gen_ov, gen_sweep);
    if (app.got_subcommand(train)) return cmd_train("train", train_ov, false, train_resume);
    if (app.got_subcommand(cqae)) return cmd_train("cqae", cqae_ov, true, cqae_resume);
    if (app.got_subcommand(sample)) return cmd_sample(sample_ov, sample_run, sample_count,
                                                      sample_image);
    if (app.got_subcommand(eval)) return cmd_evaluate(eval_ov, eval_run, eval_seeds);
    return 1;
}
