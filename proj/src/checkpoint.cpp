#include "cqvae/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace cqvae {

namespace {

constexpr char kMagic[4] = {'C', 'Q', 'V', 'K'};
constexpr uint32_t kVersion = 1;
// Caps that no valid checkpoint approaches; they turn corrupted length
// fields into immediate errors instead of gigabyte allocations.
constexpr uint32_t kMaxString = 1u << 24;
constexpr uint32_t kMaxCount = 1u << 20;
constexpr uint32_t kMaxDims = 8;

struct FileCloser {
    std::FILE* f;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};

void put_u32(std::FILE* f, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    if (std::fwrite(b, 1, 4, f) != 4) throw std::runtime_error("checkpoint: write failed");
}

uint32_t get_u32(std::FILE* f) {
    unsigned char b[4];
    if (std::fread(b, 1, 4, f) != 4) throw std::runtime_error("checkpoint: truncated file");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

void put_string(std::FILE* f, const std::string& s) {
    if (s.size() >= kMaxString) throw std::runtime_error("checkpoint: string too long");
    put_u32(f, uint32_t(s.size()));
    if (!s.empty() && std::fwrite(s.data(), 1, s.size(), f) != s.size()) {
        throw std::runtime_error("checkpoint: write failed");
    }
}

std::string get_string(std::FILE* f) {
    const uint32_t len = get_u32(f);
    if (len >= kMaxString) throw std::runtime_error("checkpoint: corrupt string length");
    std::string s(len, '\0');
    if (len && std::fread(s.data(), 1, len, f) != len) {
        throw std::runtime_error("checkpoint: truncated file");
    }
    return s;
}

void put_floats(std::FILE* f, const float* data, size_t count) {
    static_assert(sizeof(float) == 4, "float must be 4 bytes");
    if (count && std::fwrite(data, sizeof(float), count, f) != count) {
        throw std::runtime_error("checkpoint: write failed");
    }
}

void get_floats(std::FILE* f, float* data, size_t count) {
    if (count && std::fread(data, sizeof(float), count, f) != count) {
        throw std::runtime_error("checkpoint: truncated file");
    }
}

}  // namespace

const std::string* CheckpointData::find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta) {
        if (k == key) return &v;
    }
    return nullptr;
}

const std::string* CheckpointData::find_rng(const std::string& name) const {
    for (const auto& [k, v] : rng_states) {
        if (k == name) return &v;
    }
    return nullptr;
}

const Tensorf* CheckpointData::find_tensor(const std::string& name) const {
    for (const auto& [k, v] : tensors) {
        if (k == name) return &v;
    }
    return nullptr;
}

void write_checkpoint(const CheckpointData& ckpt, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    FileCloser closer{f};
    if (std::fwrite(kMagic, 1, 4, f) != 4) throw std::runtime_error("checkpoint: write failed");
    put_u32(f, kVersion);
    put_string(f, ckpt.config_text);
    put_u32(f, uint32_t(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
        put_string(f, k);
        put_string(f, v);
    }
    put_u32(f, uint32_t(ckpt.rng_states.size()));
    for (const auto& [k, v] : ckpt.rng_states) {
        put_string(f, k);
        put_string(f, v);
    }
    put_u32(f, uint32_t(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        put_string(f, name);
        put_u32(f, uint32_t(t.ndim()));
        for (int d : t.shape) put_u32(f, uint32_t(d));
        put_floats(f, t.ptr(), t.data.size());
    }
    if (std::fflush(f) != 0) throw std::runtime_error("checkpoint: flush failed: " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
    FileCloser closer{f};
    char magic[4];
    if (std::fread(magic, 1, 4, f) != 4 || std::string(magic, 4) != std::string(kMagic, 4)) {
        throw std::runtime_error("checkpoint: bad magic in " + path);
    }
    const uint32_t version = get_u32(f);
    if (version != kVersion) {
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                                 " in " + path + " (expected " + std::to_string(kVersion) + ")");
    }
    CheckpointData ckpt;
    ckpt.config_text = get_string(f);
    const uint32_t n_meta = get_u32(f);
    if (n_meta >= kMaxCount) throw std::runtime_error("checkpoint: corrupt meta count");
    for (uint32_t i = 0; i < n_meta; ++i) {
        std::string k = get_string(f);
        std::string v = get_string(f);
        ckpt.meta.emplace_back(std::move(k), std::move(v));
    }
    const uint32_t n_rng = get_u32(f);
    if (n_rng >= kMaxCount) throw std::runtime_error("checkpoint: corrupt rng count");
    for (uint32_t i = 0; i < n_rng; ++i) {
        std::string k = get_string(f);
        std::string v = get_string(f);
        ckpt.rng_states.emplace_back(std::move(k), std::move(v));
    }
    const uint32_t n_tensors = get_u32(f);
    if (n_tensors >= kMaxCount) throw std::runtime_error("checkpoint: corrupt tensor count");
    for (uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = get_string(f);
        const uint32_t ndim = get_u32(f);
        if (ndim == 0 || ndim > kMaxDims) {
            throw std::runtime_error("checkpoint: corrupt rank for tensor '" + name + "'");
        }
        Dims dims(ndim);
        long long numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            const uint32_t v = get_u32(f);
            if (v == 0 || v > (1u << 28)) {
                throw std::runtime_error("checkpoint: corrupt dim for tensor '" + name + "'");
            }
            dims[d] = int(v);
            numel *= v;
        }
        if (numel > (1ll << 31)) {
            throw std::runtime_error("checkpoint: tensor '" + name + "' too large");
        }
        Tensorf t(dims);
        get_floats(f, t.ptr(), t.data.size());
        ckpt.tensors.emplace_back(std::move(name), std::move(t));
    }
    return ckpt;
}

}  // namespace cqvae
