#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dmc/tensor.hpp"

namespace dmc::core {

enum class Activation { Softplus, Tanh };

// Low-rank adapter on one linear layer. With up == 0 the adapted layer is
// exactly the base layer; merged weights are base + (alpha/rank) * down * up
// (weights stored input-major, [in,out]).
struct LoraAdapter {
    Tensor down; // [in, rank]
    Tensor up;   // [rank, out]
    int rank = 0;
    double alpha = 1.0;
};

// Fully-connected network over row batches, with an optional sinusoidal
// embedding of a (possibly fractional) denoising-step index appended to the
// input features.
class Mlp {
public:
    Mlp() = default;

    // widths = {input, hidden..., output}; input includes time_embed_dim.
    Mlp(std::vector<int> widths, int time_embed_dim, Activation act, Rng& rng);

    // rows: [B, input_dim()]. ts, when the net has a time embedding, holds one
    // step index per row.
    Tensor forward(const Tensor& rows, const std::vector<double>* ts = nullptr) const;
    Tensor forward(const Tensor& rows, double t) const;

    int input_dim() const;  // feature dim excluding the time embedding
    int output_dim() const;
    const std::vector<int>& widths() const { return widths_; }
    int time_embed_dim() const { return time_embed_dim_; }
    Activation activation() const { return act_; }
    int layer_count() const { return static_cast<int>(layers_.size()); }

    void attach_lora(int rank, double alpha, Rng& rng);
    void merge_lora();
    bool has_lora() const;
    int lora_rank() const;
    double lora_alpha() const;

    // Base weights stop receiving gradients; adapters (if any) keep training.
    void freeze_base();
    void unfreeze_base();
    bool base_frozen() const { return base_frozen_; }

    std::vector<Tensor> trainable_params() const;
    std::vector<Tensor> all_params() const;
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;

    Mlp clone() const; // deep copy, fresh tape leaves

    static std::vector<double> time_embedding(double t, int dim);

    struct Layer {
        Tensor weight; // [in, out]
        Tensor bias;   // [out]
        std::optional<LoraAdapter> lora;
    };
    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& layers_mut() { return layers_; }

private:
    std::vector<Layer> layers_;
    std::vector<int> widths_;
    int time_embed_dim_ = 0;
    Activation act_ = Activation::Softplus;
    bool base_frozen_ = false;
};

} // namespace dmc::core
