#include "cqvae/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <system_error>

#include "json.hpp"

#include "cqvae/image.hpp"
#include "cqvae/quantize.hpp"

namespace cqvae {

namespace {

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::string csv_safe(std::string s) {
    for (char& c : s) {
        if (c == ',' || c == '\n' || c == '\r') c = ' ';
    }
    return s;
}

CorrelationCell make_cell(const std::string& x_name, const std::vector<double>& xs,
                          const std::string& y_name, const std::vector<double>& ys) {
    CorrelationCell cell;
    cell.x = x_name;
    cell.y = y_name;
    if (xs.size() < 2) {
        cell.degenerate = true;
        cell.note = "fewer than two evaluable records";
        return cell;
    }
    try {
        cell.value = correlation(xs, ys, x_name, y_name);
    } catch (const std::invalid_argument& e) {
        cell.degenerate = true;
        cell.note = e.what();
    }
    return cell;
}

void paint_point(std::vector<Rgb>& pix, int h, int w, double xn, double yn, const Rgb& color) {
    const int cx = std::clamp(int(std::floor(xn * w)), 0, w - 1);
    const int cy = std::clamp(int(std::floor(yn * h)), 0, h - 1);
    const int offsets[5][2] = {{0, 0}, {1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (const auto& o : offsets) {
        const int x = cx + o[0], y = cy + o[1];
        if (x < 0 || x >= w || y < 0 || y >= h) continue;
        pix[size_t(y) * w + x] = color;
    }
}

void write_heatmap_pair(const EvalRow& row, const ImageF& image, const std::string& stem) {
    double vmax = 0.0;
    for (double v : row.gt_report.per_point) vmax = std::max(vmax, v);
    for (double v : row.model_report.per_point) vmax = std::max(vmax, v);

    const struct {
        const char* side;
        const VariationReport* report;
    } sides[] = {{"gt", &row.gt_report}, {"model", &row.model_report}};

    for (const auto& s : sides) {
        const std::string csv_path = stem + "_" + s.side + ".csv";
        std::ofstream csv(csv_path);
        if (!csv) throw std::runtime_error("cannot write heatmap csv: " + csv_path);
        csv << "point,x,y,variation\n";
        const Shape& mean = s.report->mean_shape;
        for (size_t j = 0; j < mean.size(); ++j) {
            csv << j << "," << fmt(mean.points[j].x * image.w) << ","
                << fmt(mean.points[j].y * image.h) << "," << fmt(s.report->per_point[j]) << "\n";
        }
        if (!csv) throw std::runtime_error("failed writing heatmap csv: " + csv_path);

        std::vector<Rgb> pix(size_t(image.h) * size_t(image.w));
        for (size_t i = 0; i < pix.size(); ++i) {
            const uint8_t g =
                uint8_t(std::clamp(int(std::lround(double(image.pix[i]) * 255.0)), 0, 255));
            pix[i] = Rgb{g, g, g};
        }
        for (size_t j = 0; j < mean.size(); ++j) {
            const double t = vmax > 0.0 ? s.report->per_point[j] / vmax : 0.0;
            paint_point(pix, image.h, image.w, mean.points[j].x, mean.points[j].y,
                        variation_color(t));
        }
        write_ppm(pix, image.h, image.w, stem + "_" + s.side + ".ppm");
    }
}

}  // namespace

EvalSummary evaluate_model(const CqModel<float>& model, const Dataset& data,
                           const TrainConfig& cfg, std::ostream* errlog) {
    config_validate(cfg);
    EvalSummary summary;
    for (const DataRecord* r : data.split("test")) {
        EvalRow row;
        row.id = r->id;
        row.ambiguity = r->ambiguity;
        try {
            if (r->image.h != cfg.h || r->image.w != cfg.w) {
                throw std::invalid_argument("image is " + std::to_string(r->image.h) + "x" +
                                            std::to_string(r->image.w) + ", model wants " +
                                            std::to_string(cfg.h) + "x" + std::to_string(cfg.w));
            }
            const Tensorf image = image_tensor<float>(r->image);

            std::vector<Shape> experts_norm;
            experts_norm.reserve(r->experts.experts.size());
            for (const Shape& s : r->experts.experts) {
                experts_norm.push_back(normalize_shape(s, cfg.h, cfg.w));
            }
            row.gt_report = shape_variation(experts_norm);
            row.var_gt = row.gt_report.scalar;

            const Tensorf pi = encode_probabilities(model, image);
            row.entropy_nats = double(entropy(pi));

            RngStream sampler = RngStream::named(uint64_t(cfg.seed), "gumbel/eval/" + r->id);
            const std::vector<Shape> samples =
                sample_shapes(model, image, cfg.eval_samples, sampler);
            row.model_report = shape_variation(samples);
            row.var_model = row.model_report.scalar;

            row.best = best_shape(model, image);
            row.bias_best = bias(row.best, normalize_shape(r->experts.consensus, cfg.h, cfg.w));
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
            ++summary.failed;
            if (errlog) (*errlog) << "evaluate: record " << r->id << " failed: " << e.what()
                                  << "\n";
        }
        summary.rows.push_back(std::move(row));
    }

    std::vector<double> var_gt, var_model, ent, bias_v;
    for (const EvalRow& row : summary.rows) {
        if (!row.ok) continue;
        var_gt.push_back(row.var_gt);
        var_model.push_back(row.var_model);
        ent.push_back(row.entropy_nats);
        bias_v.push_back(row.bias_best);
    }
    summary.correlations.push_back(make_cell("var_model", var_model, "var_gt", var_gt));
    summary.correlations.push_back(make_cell("entropy", ent, "var_gt", var_gt));
    summary.correlations.push_back(make_cell("bias", bias_v, "var_model", var_model));
    summary.correlations.push_back(make_cell("bias", bias_v, "entropy", ent));
    return summary;
}

void write_eval_outputs(const EvalSummary& summary, const Dataset& data, const TrainConfig& cfg,
                        const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);  // failures surface as open errors below
    const std::string records_path = out_dir + "/records.csv";
    std::ofstream csv(records_path);
    if (!csv) throw std::runtime_error("cannot write " + records_path);
    csv << "id,ambiguity,ok,var_gt,var_model,entropy,bias_best,error\n";
    for (const EvalRow& row : summary.rows) {
        csv << row.id << "," << fmt(row.ambiguity) << "," << (row.ok ? 1 : 0) << ","
            << fmt(row.var_gt) << "," << fmt(row.var_model) << "," << fmt(row.entropy_nats) << ","
            << fmt(row.bias_best) << "," << csv_safe(row.error) << "\n";
    }
    if (!csv) throw std::runtime_error("failed writing " + records_path);
    csv.close();

    nlohmann::ordered_json corr = nlohmann::ordered_json::array();
    for (const CorrelationCell& cell : summary.correlations) {
        nlohmann::ordered_json item;
        item["x"] = cell.x;
        item["y"] = cell.y;
        if (cell.degenerate) {
            item["value"] = nullptr;
        } else {
            item["value"] = cell.value;
        }
        item["degenerate"] = cell.degenerate;
        item["note"] = cell.note;
        corr.push_back(item);
    }
    nlohmann::ordered_json doc;
    doc["evaluated"] = int(summary.rows.size()) - summary.failed;
    doc["failed"] = summary.failed;
    doc["correlations"] = corr;
    const std::string json_path = out_dir + "/correlations.json";
    std::ofstream js(json_path);
    if (!js) throw std::runtime_error("cannot write " + json_path);
    js << doc.dump(2) << "\n";
    if (!js) throw std::runtime_error("failed writing " + json_path);
    js.close();

    int emitted = 0;
    for (const EvalRow& row : summary.rows) {
        if (emitted >= cfg.heatmap_count) break;
        if (!row.ok) continue;
        const DataRecord* rec = nullptr;
        for (const DataRecord& r : data.records) {
            if (r.id == row.id) {
                rec = &r;
                break;
            }
        }
        if (!rec) continue;
        write_heatmap_pair(row, rec->image, out_dir + "/heatmap_" + row.id);
        ++emitted;
    }
}

}  // namespace cqvae
