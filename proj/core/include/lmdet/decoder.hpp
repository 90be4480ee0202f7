#pragma once

#include <map>
#include <string>
#include <vector>

#include "lmdet/layers.hpp"
#include "lmdet/param_store.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

/// Domain-adaptive convolution: a per-domain depthwise 3x3 (padding 1)
/// followed by a shared pointwise 1x1 to out_channels, shared batch norm,
/// and ReLU.
template <class T>
struct Dac {
    int in_channels = 0;
    int out_channels = 0;
    std::map<std::string, Conv2d<T>> channel_wise;
    Conv2d<T> point_wise;
    BatchNorm<T> bn;

    Tensor<T> forward(const Tensor<T>& x, const std::string& domain, bool training);
};

template <class T>
Dac<T> make_dac(ParamStore<T>& store, const std::string& name, int in_channels,
                int out_channels, const std::vector<std::string>& domains, Rng& rng);

template <class T>
void add_dac_domain(ParamStore<T>& store, Dac<T>& dac, const std::string& name,
                    const std::string& domain, const std::string& donor);

/// U-Net style decoder over the four-scale pyramid: from the deepest map,
/// repeat {upsample x2, concatenate the skip, two dac ops down to the skip
/// width}; then upsample x4 to input resolution, apply the domain's 1x1
/// head, and squash with sigmoid.
template <class T>
struct Decoder {
    int base_dim = 0;  // pyramid stage-0 width
    std::map<std::string, int> landmarks;
    std::vector<Dac<T>> dacs;  // two per scale, deepest first
    std::map<std::string, Conv2d<T>> heads;

    Tensor<T> decode(const std::vector<Tensor<T>>& pyramid, const std::string& domain,
                     bool training);
};

template <class T>
Decoder<T> make_decoder(ParamStore<T>& store, int base_dim,
                        const std::map<std::string, int>& landmarks, Rng& rng);

/// Per-domain guidance net: bilinear x4 downsample, five dilated 3x3 convs
/// (ReLU after each), a 1x1 head to the domain's landmark count, sigmoid,
/// and bilinear x4 upsample back to input resolution.
template <class T>
struct Guidance {
    int width = 16;
    std::vector<int> dilations{1, 2, 4, 8, 16};
    std::map<std::string, std::vector<Conv2d<T>>> stacks;  // 5 convs + head per domain

    Tensor<T> forward(const Tensor<T>& image, const std::string& domain) const;
    // One output pixel of the dilated stack sees this many low-res pixels.
    int receptive_field() const;
};

template <class T>
Guidance<T> make_guidance(ParamStore<T>& store, int in_channels, int width,
                          const std::map<std::string, int>& landmarks, Rng& rng);

/// Adds a domain to decoder or guidance. Same-shape parameters copy the
/// donor's values; the 1x1 heads are freshly initialized when the landmark
/// counts differ.
template <class T>
void add_decoder_domain(ParamStore<T>& store, Decoder<T>& dec, const std::string& domain,
                        const std::string& donor, int num_landmarks, Rng& rng);

template <class T>
void add_guidance_domain(ParamStore<T>& store, Guidance<T>& g, const std::string& domain,
                         const std::string& donor, int num_landmarks, Rng& rng);

}  // namespace lmdet
