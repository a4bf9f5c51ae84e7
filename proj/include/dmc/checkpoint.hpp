#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dmc/mlp.hpp"

namespace dmc::core {

// Versioned binary tensor container: header (magic, version, tag, tensor
// count) followed by named tensors as (name, rank, dims, little-endian f64
// data). A small named-scalar meta section carries reconstruction info.
// Adapter tensors live under the "adapter/" name prefix.
struct Checkpoint {
    std::string tag;
    std::map<std::string, double> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
    double meta_at(const std::string& key) const;
    bool has_meta(const std::string& key) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Mlp round-trip inside a checkpoint, including attached adapters.
void mlp_to_checkpoint(const Mlp& net, Checkpoint& ckpt, const std::string& prefix = "");
Mlp mlp_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix = "");

} // namespace dmc::core
