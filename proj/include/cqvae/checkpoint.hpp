#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cqvae/tensor.hpp"

namespace cqvae {

// On-disk training snapshot. Binary layout (all integers little-endian
// uint32, floats little-endian IEEE float32):
//
//   magic "CQVK" | version | config length + bytes
//   | meta count | {key length + bytes, value length + bytes} ...
//   | rng count  | {name length + bytes, state length + bytes} ...
//   | tensor count | {name length + bytes, ndim, dims..., float data} ...
//
// meta carries small counters (epoch, optimizer step); rng states are the
// serialized streams so training resumes mid-sequence; tensors hold model
// parameters and optimizer moments.
struct CheckpointData {
    std::string config_text;
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::pair<std::string, std::string>> rng_states;
    std::vector<std::pair<std::string, Tensorf>> tensors;

    const std::string* find_meta(const std::string& key) const;
    const std::string* find_rng(const std::string& name) const;
    const Tensorf* find_tensor(const std::string& name) const;
};

void write_checkpoint(const CheckpointData& ckpt, const std::string& path);

// Throws std::runtime_error on a missing file, wrong magic, or an
// unsupported version.
CheckpointData read_checkpoint(const std::string& path);

}  // namespace cqvae
