#pragma once

#include <string>

#include "lmdet/ops.hpp"
#include "lmdet/param_store.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

struct Conv2dSpec {
    int in_channels = 0;
    int out_channels = 0;
    int kernel_h = 1;
    int kernel_w = 1;
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;

    void validate() const;
    bool depthwise() const {
        return groups == in_channels && groups == out_channels;
    }
    bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && groups == 1; }
    int out_extent(int in, int kernel) const {
        return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
    }
};

/// Grouped, strided, dilated cross-correlation over channels-last maps.
/// weight layout: [kernel_h, kernel_w, in_channels/groups, out_channels],
/// bias [out_channels]. Point-wise convs route through the matmul primitive.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dSpec& spec, const Tensor<T>& weight,
                 const Tensor<T>& bias);

/// align_corners=false bilinear resampling of [B,H,W,C].
template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w);

template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int factor);

enum class Act { relu, gelu, sigmoid };

template <class T>
Tensor<T> activation(const Tensor<T>& x, Act kind);

template <class T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]
    Tensor<T> operator()(const Tensor<T>& x) const {
        return ops::add_suffix(ops::matmul(x, weight), bias);
    }
};

template <class T>
struct LayerNorm {
    Tensor<T> gamma;
    Tensor<T> beta;
    T eps = T(1e-5);
    Tensor<T> operator()(const Tensor<T>& x) const {
        return ops::layer_norm(x, gamma, beta, eps);
    }
};

/// Per-channel normalization over batch and spatial axes with running
/// statistics. Train mode normalizes by the batch statistics (biased
/// variance) and folds them into the running buffers (unbiased variance,
/// momentum 0.1); eval mode bakes the running statistics into an affine map,
/// so gradients in eval mode flow to the input only.
template <class T>
struct BatchNorm {
    Tensor<T> gamma;
    Tensor<T> beta;
    Tensor<T> running_mean;
    Tensor<T> running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    Tensor<T> forward(const Tensor<T>& x, bool training);
};

template <class T>
struct Conv2d {
    Conv2dSpec spec;
    Tensor<T> weight;
    Tensor<T> bias;
    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, spec, weight, bias); }
};

// Factories register parameters/buffers under "<name>/..." and return a view
// sharing the store's tensors. Linear weights draw truncated normal(std),
// conv weights draw normal with He scaling for the ReLU stacks they feed.
template <class T>
Linear<T> make_linear(ParamStore<T>& store, const std::string& name, int in, int out, Rng& rng,
                      double init_std = 0.02);
template <class T>
LayerNorm<T> make_layer_norm(ParamStore<T>& store, const std::string& name, int channels);
template <class T>
BatchNorm<T> make_batch_norm(ParamStore<T>& store, const std::string& name, int channels);
template <class T>
Conv2d<T> make_conv2d(ParamStore<T>& store, const std::string& name, Conv2dSpec spec, Rng& rng);

}  // namespace lmdet
