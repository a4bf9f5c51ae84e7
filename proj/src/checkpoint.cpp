#include "dmc/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "dmc/errors.hpp"
#include "binio.hpp"

namespace dmc::core {

namespace {

constexpr char kMagic[4] = {'D', 'M', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;

} // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

double Checkpoint::meta_at(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("checkpoint: missing meta key '" + key + "'");
    return it->second;
}

bool Checkpoint::has_meta(const std::string& key) const { return meta.count(key) > 0; }

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("checkpoint: cannot open for writing: " + path);
    os.write(kMagic, 4);
    binio::write_u32(os, kVersion);
    binio::write_string(os, ckpt.tag);
    binio::write_u32(os, static_cast<std::uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
        binio::write_string(os, k);
        binio::write_f64(os, v);
    }
    binio::write_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        binio::write_string(os, name);
        const auto& shape = t.shape();
        binio::write_u32(os, static_cast<std::uint32_t>(shape.size()));
        for (int d : shape) binio::write_u32(os, static_cast<std::uint32_t>(d));
        for (double v : t.values()) binio::write_f64(os, v);
    }
    if (!os) throw FormatError("checkpoint: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint: cannot open for reading: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic in " + path);
    const std::uint32_t version = binio::read_u32(is);
    if (version != kVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.tag = binio::read_string(is);
    const std::uint32_t n_meta = binio::read_u32(is);
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string key = binio::read_string(is);
        ckpt.meta[key] = binio::read_f64(is);
    }
    const std::uint32_t n_tensors = binio::read_u32(is);
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = binio::read_string(is);
        const std::uint32_t rank = binio::read_u32(is);
        if (rank > 8) throw FormatError("checkpoint: implausible tensor rank");
        std::vector<int> shape(rank);
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<int>(binio::read_u32(is));
            if (shape[d] <= 0) throw FormatError("checkpoint: non-positive dimension");
            total *= static_cast<std::size_t>(shape[d]);
        }
        std::vector<double> data(total);
        for (std::size_t j = 0; j < total; ++j) data[j] = binio::read_f64(is);
        ckpt.tensors.emplace_back(std::move(name), Tensor::from(shape, data));
    }
    return ckpt;
}

void mlp_to_checkpoint(const Mlp& net, Checkpoint& ckpt, const std::string& prefix) {
    ckpt.meta[prefix + "num_layers"] = static_cast<double>(net.layer_count());
    ckpt.meta[prefix + "time_embed_dim"] = static_cast<double>(net.time_embed_dim());
    ckpt.meta[prefix + "activation"] =
        net.activation() == Activation::Tanh ? 1.0 : 0.0;
    for (const auto& [name, tensor] : net.named_tensors())
        ckpt.tensors.emplace_back(prefix + name, tensor);
    if (net.has_lora()) {
        ckpt.meta[prefix + "lora_rank"] = static_cast<double>(net.lora_rank());
        ckpt.meta[prefix + "lora_alpha"] = net.lora_alpha();
    }
}

Mlp mlp_from_checkpoint(const Checkpoint& ckpt, const std::string& prefix) {
    const int num_layers = static_cast<int>(ckpt.meta_at(prefix + "num_layers"));
    const int time_dim = static_cast<int>(ckpt.meta_at(prefix + "time_embed_dim"));
    const Activation act =
        ckpt.meta_at(prefix + "activation") > 0.5 ? Activation::Tanh : Activation::Softplus;
    if (num_layers < 1) throw FormatError("checkpoint: invalid layer count");
    std::vector<int> widths;
    widths.reserve(static_cast<std::size_t>(num_layers) + 1);
    for (int i = 0; i < num_layers; ++i) {
        const Tensor* w = ckpt.find(prefix + "layers/" + std::to_string(i) + "/weight");
        if (w == nullptr) throw FormatError("checkpoint: missing layer weight " + std::to_string(i));
        if (i == 0) widths.push_back(w->shape()[0]);
        widths.push_back(w->shape()[1]);
    }
    Rng init_rng(0); // weights are overwritten below; the init draw is discarded
    Mlp net(widths, time_dim, act, init_rng);
    for (int i = 0; i < num_layers; ++i) {
        const std::string base = prefix + "layers/" + std::to_string(i) + "/";
        const Tensor* w = ckpt.find(base + "weight");
        const Tensor* b = ckpt.find(base + "bias");
        if (w == nullptr || b == nullptr)
            throw FormatError("checkpoint: missing tensors for layer " + std::to_string(i));
        net.layers_mut()[static_cast<std::size_t>(i)].weight.mutable_values() = w->values();
        net.layers_mut()[static_cast<std::size_t>(i)].bias.mutable_values() = b->values();
    }
    if (ckpt.has_meta(prefix + "lora_rank")) {
        const int rank = static_cast<int>(ckpt.meta_at(prefix + "lora_rank"));
        const double alpha = ckpt.meta_at(prefix + "lora_alpha");
        net.attach_lora(rank, alpha, init_rng);
        for (int i = 0; i < num_layers; ++i) {
            const std::string base = prefix + "adapter/" + std::to_string(i) + "/";
            const Tensor* down = ckpt.find(base + "down");
            const Tensor* up = ckpt.find(base + "up");
            if (down == nullptr || up == nullptr)
                throw FormatError("checkpoint: missing adapter tensors for layer " + std::to_string(i));
            auto& lora = net.layers_mut()[static_cast<std::size_t>(i)].lora;
            lora->down.mutable_values() = down->values();
            lora->up.mutable_values() = up->values();
        }
    }
    return net;
}

} // namespace dmc::core
