#pragma once

#include <string>
#include <vector>

#include "lmdet/attention.hpp"
#include "lmdet/layers.hpp"
#include "lmdet/param_store.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

struct EncoderConfig {
    int patch_size = 4;
    int embed_dim = 32;  // stage s runs at embed_dim * 2^s channels
    std::vector<int> depths{2, 2, 2, 2};
    std::vector<int> heads{1, 2, 4, 8};
    int window = 4;
    int in_channels = 1;
    int mlp_ratio = 4;
    std::vector<std::string> domains;

    void validate() const;
    // Inputs must tile cleanly through the embed and all three merges.
    int required_divisor() const { return patch_size * 8; }
    int stage_channels(int s) const { return embed_dim << s; }
    int stage_stride(int s) const { return patch_size << s; }
};

/// Flattens non-overlapping patch_size x patch_size patches and projects
/// them to embed_dim, then layer-normalizes.
template <class T>
struct PatchEmbed {
    int patch = 4;
    int divisor = 32;
    Linear<T> proj;
    LayerNorm<T> norm;
    Tensor<T> operator()(const Tensor<T>& image) const;
};

/// Concatenates 2x2 neighborhoods (4C), layer-normalizes, projects to 2C.
template <class T>
struct PatchMerge {
    LayerNorm<T> norm;
    Linear<T> reduce;
    Tensor<T> operator()(const Tensor<T>& x) const;
};

/// Four stages of domain-adaptive blocks; stage outputs are recorded after
/// each stage's block stack and before its merge, so the pyramid carries
/// channels embed_dim * [1,2,4,8] at strides patch_size * [1,2,4,8].
template <class T>
struct Encoder {
    EncoderConfig cfg;
    PatchEmbed<T> embed;
    std::vector<std::vector<TransformerBlock<T>>> stages;
    std::vector<PatchMerge<T>> merges;

    std::vector<Tensor<T>> encode(const Tensor<T>& image, const std::string& domain) const;
};

template <class T>
Encoder<T> make_encoder(ParamStore<T>& store, const EncoderConfig& cfg, Rng& rng);

/// Adds a domain to every block, copying the donor domain's parameters.
template <class T>
void add_encoder_domain(ParamStore<T>& store, Encoder<T>& enc, const std::string& domain,
                        const std::string& donor);

}  // namespace lmdet
