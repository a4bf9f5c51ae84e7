#include "dmc/mlp.hpp"

#include <cmath>

namespace dmc::core {

namespace {

Tensor copy_leaf(const Tensor& t) {
    Tensor c = Tensor::from(t.shape(), t.values(), t.requires_grad());
    return c;
}

} // namespace

Mlp::Mlp(std::vector<int> widths, int time_embed_dim, Activation act, Rng& rng)
    : widths_(std::move(widths)), time_embed_dim_(time_embed_dim), act_(act) {
    if (widths_.size() < 2) throw ContractError("Mlp: need at least input and output widths");
    if (time_embed_dim_ < 0 || time_embed_dim_ >= widths_.front())
        throw ContractError("Mlp: time embedding must fit inside the input width");
    for (size_t i = 0; i + 1 < widths_.size(); ++i) {
        int in = widths_[i], out = widths_[i + 1];
        double stddev = 1.0 / std::sqrt(static_cast<double>(in));
        Layer layer;
        layer.weight = Tensor::randn({in, out}, rng, stddev, true);
        layer.bias = Tensor::zeros({out}, true);
        layers_.push_back(std::move(layer));
    }
}

int Mlp::input_dim() const { return widths_.front() - time_embed_dim_; }

int Mlp::output_dim() const { return widths_.back(); }

std::vector<double> Mlp::time_embedding(double t, int dim) {
    std::vector<double> emb(static_cast<size_t>(dim));
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
        emb[static_cast<size_t>(2 * i)] = std::sin(t * freq);
        emb[static_cast<size_t>(2 * i + 1)] = std::cos(t * freq);
    }
    if (dim % 2 == 1) emb.back() = std::sin(t);
    return emb;
}

Tensor Mlp::forward(const Tensor& rows, const std::vector<double>* ts) const {
    if (layers_.empty()) throw ContractError("Mlp::forward: uninitialized network");
    if (rows.rank() != 2)
        throw DimensionError("Mlp::forward: expected [batch, features] input");
    const int batch = rows.dim(0);
    if (rows.dim(1) != input_dim())
        throw DimensionError("Mlp::forward: layer 0 expects " + std::to_string(input_dim()) +
                             " features, got " + std::to_string(rows.dim(1)));

    Tensor x = rows;
    if (time_embed_dim_ > 0) {
        if (ts == nullptr || static_cast<int>(ts->size()) != batch)
            throw ContractError("Mlp::forward: one step index per row required");
        std::vector<double> emb(static_cast<size_t>(batch) * time_embed_dim_);
        for (int i = 0; i < batch; ++i) {
            auto e = time_embedding((*ts)[static_cast<size_t>(i)], time_embed_dim_);
            std::copy(e.begin(), e.end(), emb.begin() + static_cast<size_t>(i) * time_embed_dim_);
        }
        x = concat_cols(x, Tensor::from({batch, time_embed_dim_}, std::move(emb)));
    }

    for (size_t li = 0; li < layers_.size(); ++li) {
        const Layer& layer = layers_[li];
        if (x.dim(1) != layer.weight.dim(0))
            throw DimensionError("Mlp::forward: layer " + std::to_string(li) + " expects " +
                                 std::to_string(layer.weight.dim(0)) + " inputs, got " +
                                 std::to_string(x.dim(1)));
        Tensor y = add_rowvec(matmul(x, layer.weight), layer.bias);
        if (layer.lora) {
            const LoraAdapter& ad = *layer.lora;
            Tensor delta = matmul(matmul(x, ad.down), ad.up);
            y = add(y, scale(delta, ad.alpha / ad.rank));
        }
        if (li + 1 < layers_.size())
            x = act_ == Activation::Softplus ? softplus(y) : core::tanh(y);
        else
            x = y;
    }
    return x;
}

Tensor Mlp::forward(const Tensor& rows, double t) const {
    std::vector<double> ts(static_cast<size_t>(rows.dim(0)), t);
    return forward(rows, &ts);
}

void Mlp::attach_lora(int rank, double alpha, Rng& rng) {
    if (has_lora()) throw ContractError("attach_lora: adapters already attached");
    for (auto& layer : layers_) {
        int in = layer.weight.dim(0), out = layer.weight.dim(1);
        if (rank < 1 || rank > std::min(in, out))
            throw ContractError("attach_lora: rank " + std::to_string(rank) +
                                " exceeds layer dims " + std::to_string(in) + "x" +
                                std::to_string(out));
        LoraAdapter ad;
        ad.down = Tensor::randn({in, rank}, rng, 0.01, true);
        ad.up = Tensor::zeros({rank, out}, true); // zero init keeps outputs unchanged
        ad.rank = rank;
        ad.alpha = alpha;
        layer.lora = std::move(ad);
    }
}

void Mlp::merge_lora() {
    for (auto& layer : layers_) {
        if (!layer.lora) continue;
        const LoraAdapter& ad = *layer.lora;
        NoGradGuard ng;
        Tensor delta = scale(matmul(ad.down, ad.up), ad.alpha / ad.rank);
        auto& w = layer.weight.mutable_values();
        const auto& d = delta.values();
        for (size_t i = 0; i < w.size(); ++i) w[i] += d[i];
        layer.lora.reset();
    }
}

bool Mlp::has_lora() const {
    for (const auto& layer : layers_)
        if (layer.lora) return true;
    return false;
}

int Mlp::lora_rank() const { return layers_.empty() || !layers_[0].lora ? 0 : layers_[0].lora->rank; }

double Mlp::lora_alpha() const {
    return layers_.empty() || !layers_[0].lora ? 0.0 : layers_[0].lora->alpha;
}

void Mlp::freeze_base() {
    for (auto& layer : layers_) {
        layer.weight.set_requires_grad(false);
        layer.bias.set_requires_grad(false);
    }
    base_frozen_ = true;
}

void Mlp::unfreeze_base() {
    for (auto& layer : layers_) {
        layer.weight.set_requires_grad(true);
        layer.bias.set_requires_grad(true);
    }
    base_frozen_ = false;
}

std::vector<Tensor> Mlp::trainable_params() const {
    std::vector<Tensor> out;
    for (const auto& layer : layers_) {
        if (layer.weight.requires_grad()) out.push_back(layer.weight);
        if (layer.bias.requires_grad()) out.push_back(layer.bias);
        if (layer.lora) {
            if (layer.lora->down.requires_grad()) out.push_back(layer.lora->down);
            if (layer.lora->up.requires_grad()) out.push_back(layer.lora->up);
        }
    }
    return out;
}

std::vector<Tensor> Mlp::all_params() const {
    std::vector<Tensor> out;
    for (const auto& layer : layers_) {
        out.push_back(layer.weight);
        out.push_back(layer.bias);
        if (layer.lora) {
            out.push_back(layer.lora->down);
            out.push_back(layer.lora->up);
        }
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> Mlp::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < layers_.size(); ++i) {
        out.emplace_back("layers/" + std::to_string(i) + "/weight", layers_[i].weight);
        out.emplace_back("layers/" + std::to_string(i) + "/bias", layers_[i].bias);
        if (layers_[i].lora) {
            out.emplace_back("adapter/" + std::to_string(i) + "/down", layers_[i].lora->down);
            out.emplace_back("adapter/" + std::to_string(i) + "/up", layers_[i].lora->up);
        }
    }
    return out;
}

Mlp Mlp::clone() const {
    Mlp c;
    c.widths_ = widths_;
    c.time_embed_dim_ = time_embed_dim_;
    c.act_ = act_;
    c.base_frozen_ = base_frozen_;
    for (const auto& layer : layers_) {
        Layer cl;
        cl.weight = copy_leaf(layer.weight);
        cl.bias = copy_leaf(layer.bias);
        if (layer.lora) {
            LoraAdapter ad;
            ad.down = copy_leaf(layer.lora->down);
            ad.up = copy_leaf(layer.lora->up);
            ad.rank = layer.lora->rank;
            ad.alpha = layer.lora->alpha;
            cl.lora = std::move(ad);
        }
        c.layers_.push_back(std::move(cl));
    }
    return c;
}

} // namespace dmc::core
