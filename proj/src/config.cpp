#include "cqvae/config.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cqvae {

namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

[[noreturn]] void bad_value(const std::string& key, const char* want, const std::string& got) {
    throw std::invalid_argument("config key '" + key + "': expected " + want + ", got '" + got +
                                "'");
}

long long parse_int(const std::string& key, const std::string& v) {
    size_t pos = 0;
    long long x = 0;
    try {
        x = std::stoll(v, &pos);
    } catch (const std::exception&) {
        bad_value(key, "an integer", v);
    }
    if (pos != v.size()) bad_value(key, "an integer", v);
    return x;
}

double parse_real(const std::string& key, const std::string& v) {
    size_t pos = 0;
    double x = 0.0;
    try {
        x = std::stod(v, &pos);
    } catch (const std::exception&) {
        bad_value(key, "a real number", v);
    }
    if (pos != v.size()) bad_value(key, "a real number", v);
    return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad_value(key, "true or false", v);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) bad_value(key, "comma-separated integers", v);
        out.push_back(int(parse_int(key, item)));
    }
    if (out.empty()) bad_value(key, "comma-separated integers", v);
    return out;
}

std::vector<double> parse_real_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) bad_value(key, "comma-separated real numbers", v);
        out.push_back(parse_real(key, item));
    }
    if (out.empty()) bad_value(key, "comma-separated real numbers", v);
    return out;
}

std::string real_str(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

std::string int_list_str(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::string real_list_str(const std::vector<double>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += real_str(v[i]);
    }
    return out;
}

}  // namespace

void config_set(TrainConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "m") cfg.m = int(parse_int(key, value));
    else if (key == "n") cfg.n = int(parse_int(key, value));
    else if (key == "j") cfg.j = int(parse_int(key, value));
    else if (key == "h") cfg.h = int(parse_int(key, value));
    else if (key == "w") cfg.w = int(parse_int(key, value));
    else if (key == "c_lo") cfg.c_lo = parse_real(key, value);
    else if (key == "c_hi") cfg.c_hi = parse_real(key, value);
    else if (key == "enc_channels") cfg.enc_channels = parse_int_list(key, value);
    else if (key == "alpha") cfg.alpha = parse_real(key, value);
    else if (key == "beta") cfg.beta = parse_real(key, value);
    else if (key == "alpha_cqae") cfg.alpha_cqae = parse_real(key, value);
    else if (key == "tau_start") cfg.tau_start = parse_real(key, value);
    else if (key == "tau_end") cfg.tau_end = parse_real(key, value);
    else if (key == "tau_steps") cfg.tau_steps = int(parse_int(key, value));
    else if (key == "k_max") cfg.k_max = int(parse_int(key, value));
    else if (key == "l_max") cfg.l_max = int(parse_int(key, value));
    else if (key == "straight_through") cfg.straight_through = parse_bool(key, value);
    else if (key == "lr") cfg.lr = parse_real(key, value);
    else if (key == "batch") cfg.batch = int(parse_int(key, value));
    else if (key == "epochs") cfg.epochs = int(parse_int(key, value));
    else if (key == "max_steps") cfg.max_steps = parse_int(key, value);
    else if (key == "seed") cfg.seed = parse_int(key, value);
    else if (key == "gen_scenes") cfg.gen_scenes = int(parse_int(key, value));
    else if (key == "gen_train_count") cfg.gen_train_count = int(parse_int(key, value));
    else if (key == "experts") cfg.experts = int(parse_int(key, value));
    else if (key == "noise_unit") cfg.noise_unit = parse_real(key, value);
    else if (key == "ambiguity_levels") cfg.ambiguity_levels = parse_real_list(key, value);
    else if (key == "eval_samples") cfg.eval_samples = int(parse_int(key, value));
    else if (key == "heatmap_count") cfg.heatmap_count = int(parse_int(key, value));
    else if (key == "data_dir") cfg.data_dir = value;
    else if (key == "out_dir") cfg.out_dir = value;
    else throw std::invalid_argument("unknown config key '" + key + "'");
}

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig cfg;
    std::set<std::string> seen;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected 'key = value', got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
        }
        if (!seen.insert(key).second) {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": duplicate key '" + key + "'");
        }
        config_set(cfg, key, value);
    }
    return cfg;
}

std::string serialize_train_config(const TrainConfig& cfg) {
    std::ostringstream os;
    os << "# latent and image geometry\n";
    os << "m = " << cfg.m << "\n";
    os << "n = " << cfg.n << "\n";
    os << "j = " << cfg.j << "\n";
    os << "h = " << cfg.h << "\n";
    os << "w = " << cfg.w << "\n";
    os << "c_lo = " << real_str(cfg.c_lo) << "\n";
    os << "c_hi = " << real_str(cfg.c_hi) << "\n";
    os << "enc_channels = " << int_list_str(cfg.enc_channels) << "\n";
    os << "\n# loss weights\n";
    os << "alpha = " << real_str(cfg.alpha) << "\n";
    os << "beta = " << real_str(cfg.beta) << "\n";
    os << "alpha_cqae = " << real_str(cfg.alpha_cqae) << "\n";
    os << "\n# temperature schedule and sampling\n";
    os << "tau_start = " << real_str(cfg.tau_start) << "\n";
    os << "tau_end = " << real_str(cfg.tau_end) << "\n";
    os << "tau_steps = " << cfg.tau_steps << "\n";
    os << "k_max = " << cfg.k_max << "\n";
    os << "l_max = " << cfg.l_max << "\n";
    os << "straight_through = " << (cfg.straight_through ? "true" : "false") << "\n";
    os << "\n# optimization\n";
    os << "lr = " << real_str(cfg.lr) << "\n";
    os << "batch = " << cfg.batch << "\n";
    os << "epochs = " << cfg.epochs << "\n";
    os << "max_steps = " << cfg.max_steps << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "\n# dataset generation\n";
    os << "gen_scenes = " << cfg.gen_scenes << "\n";
    os << "gen_train_count = " << cfg.gen_train_count << "\n";
    os << "experts = " << cfg.experts << "\n";
    os << "noise_unit = " << real_str(cfg.noise_unit) << "\n";
    os << "ambiguity_levels = " << real_list_str(cfg.ambiguity_levels) << "\n";
    os << "\n# evaluation\n";
    os << "eval_samples = " << cfg.eval_samples << "\n";
    os << "heatmap_count = " << cfg.heatmap_count << "\n";
    os << "\n# paths\n";
    os << "data_dir = " << cfg.data_dir << "\n";
    os << "out_dir = " << cfg.out_dir << "\n";
    return os.str();
}

void config_validate(const TrainConfig& cfg) {
    std::vector<std::string> bad;
    if (cfg.m < 1) bad.push_back("m must be >= 1");
    if (cfg.n < 2) bad.push_back("n must be >= 2");
    if (cfg.j < 1) bad.push_back("j must be >= 1");
    if (!(cfg.c_lo < cfg.c_hi)) bad.push_back("c_lo must be < c_hi");
    if (cfg.enc_channels.empty()) bad.push_back("enc_channels must not be empty");
    for (int c : cfg.enc_channels) {
        if (c < 1) {
            bad.push_back("enc_channels entries must be >= 1");
            break;
        }
    }
    if (!cfg.enc_channels.empty()) {
        const int total_stride = 1 << int(cfg.enc_channels.size());
        if (cfg.h < total_stride || cfg.h % total_stride != 0) {
            bad.push_back("h must be a positive multiple of " + std::to_string(total_stride) +
                          " (2^len(enc_channels))");
        }
        if (cfg.w < total_stride || cfg.w % total_stride != 0) {
            bad.push_back("w must be a positive multiple of " + std::to_string(total_stride) +
                          " (2^len(enc_channels))");
        }
    }
    if (cfg.alpha < 0) bad.push_back("alpha must be >= 0");
    if (cfg.beta < 0) bad.push_back("beta must be >= 0");
    if (cfg.alpha_cqae < 0) bad.push_back("alpha_cqae must be >= 0");
    if (!(cfg.tau_start > 0)) bad.push_back("tau_start must be > 0");
    if (!(cfg.tau_end > 0)) bad.push_back("tau_end must be > 0");
    if (cfg.tau_steps < 1) bad.push_back("tau_steps must be >= 1");
    if (cfg.k_max < 1) bad.push_back("k_max must be >= 1");
    if (cfg.l_max < cfg.k_max) bad.push_back("l_max must be >= k_max");
    if (!(cfg.lr > 0)) bad.push_back("lr must be > 0");
    if (cfg.batch < 1) bad.push_back("batch must be >= 1");
    if (cfg.epochs < 0) bad.push_back("epochs must be >= 0");
    if (cfg.max_steps < 0) bad.push_back("max_steps must be >= 0");
    if (cfg.gen_scenes < 1) bad.push_back("gen_scenes must be >= 1");
    if (cfg.gen_train_count < 0) bad.push_back("gen_train_count must be >= 0");
    if (cfg.experts < 1) bad.push_back("experts must be >= 1");
    if (cfg.noise_unit < 0) bad.push_back("noise_unit must be >= 0");
    if (cfg.ambiguity_levels.empty()) bad.push_back("ambiguity_levels must not be empty");
    for (double a : cfg.ambiguity_levels) {
        if (a < 0) {
            bad.push_back("ambiguity_levels entries must be >= 0");
            break;
        }
    }
    if (cfg.eval_samples < 2) bad.push_back("eval_samples must be >= 2");
    if (cfg.heatmap_count < 0) bad.push_back("heatmap_count must be >= 0");
    if (!bad.empty()) {
        std::string msg = "invalid config: ";
        for (size_t i = 0; i < bad.size(); ++i) {
            if (i) msg += "; ";
            msg += bad[i];
        }
        throw std::invalid_argument(msg);
    }
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

void save_train_config(const TrainConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config file: " + path);
    out << serialize_train_config(cfg);
    if (!out) throw std::runtime_error("failed writing config file: " + path);
}

double tau_at_step(const TrainConfig& cfg, long long step) {
    if (step < 0) step = 0;
    if (step >= cfg.tau_steps) return cfg.tau_end;
    const double t = double(step) / double(cfg.tau_steps);
    return cfg.tau_start * std::pow(cfg.tau_end / cfg.tau_start, t);
}

}  // namespace cqvae
