#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lmdet/decoder.hpp"
#include "lmdet/encoder.hpp"
#include "lmdet/param_store.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

enum class SpacingRule { fixed_mm, wrist_pair, pixel };

/// How pixel distances convert to physical units. fixed_mm multiplies by a
/// constant; wrist_pair divides 50 mm by the ground-truth distance between
/// two named landmarks; pixel leaves distances as they are.
struct SpacingSpec {
    SpacingRule rule = SpacingRule::pixel;
    double mm_per_pixel = 1.0;
    int wrist_a = -1;  // landmark indices, 0-based
    int wrist_b = -1;

    static SpacingSpec fixed(double mm);
    static SpacingSpec wrist(int a, int b);
    static SpacingSpec pixels();
};

struct DomainSpec {
    std::string name;
    int id = 0;
    int num_landmarks = 0;
    SpacingSpec spacing;
    std::vector<double> sdr_thresholds;  // strictly increasing, positive
    double id_threshold = 0.0;

    void validate() const;
};

/// Ordered landmark coordinates tied to the image geometry they live in.
/// Coordinates are continuous (row, col) pixel-center positions; the valid
/// extent is [-0.5, size - 0.5] per axis, which rescaling maps onto itself.
struct LandmarkSet {
    int height = 0;
    int width = 0;
    std::vector<std::pair<double, double>> coords;

    void validate() const;
};

enum class HeatmapRole { guidance, fine, fused, target };

template <class T>
struct HeatmapStack {
    Tensor<T> scores;  // [H, W, N]
    HeatmapRole role = HeatmapRole::fused;
};

/// One Gaussian per landmark on the integer pixel grid, amplitude
/// 1/(sqrt(2*pi)*sigma) at the landmark, no truncation window.
/// normalize_peak rescales every channel's amplitude to 1.
template <class T>
HeatmapStack<T> gaussian_target(const LandmarkSet& landmarks, int height, int width,
                                double sigma, bool normalize_peak = false);

/// Targets for a same-geometry batch, stacked to [B, H, W, N].
template <class T>
Tensor<T> batch_targets(const std::vector<LandmarkSet>& sets, int height, int width,
                        double sigma, bool normalize_peak = false);

/// Per-channel location of the maximum score; ties go to the smallest row,
/// then the smallest column.
template <class T>
LandmarkSet decode_landmarks(const HeatmapStack<T>& heatmap);

/// Pixel-center remapping into a new geometry: (i + 0.5) * scale - 0.5.
LandmarkSet rescale_coords(const LandmarkSet& coords, int to_height, int to_width);

/// One image's stack out of a batched [B, H, W, N] map.
template <class T>
HeatmapStack<T> slice_stack(const Tensor<T>& batch, int b, HeatmapRole role);

template <class T>
HeatmapStack<T> resize_stack(const HeatmapStack<T>& stack, int out_h, int out_w);

struct NetworkConfig {
    EncoderConfig encoder;  // domain list is filled from the DomainSpecs
    int guidance_width = 16;
    double sigma = 3.0;

    void validate() const;
};

NetworkConfig toy_network_config();
NetworkConfig paper_network_config();

template <class T>
struct NetworkOutput {
    Tensor<T> fused;
    Tensor<T> fine;
    Tensor<T> guidance;
};

/// The full detector: hierarchical encoder, dac decoder, and guidance net
/// over one shared parameter store. The fused heatmap is the elementwise
/// product of the guidance and fine heatmaps.
template <class T>
struct Network {
    NetworkConfig cfg;
    ParamStore<T> store;
    std::map<std::string, DomainSpec> domains;
    Encoder<T> encoder;
    Decoder<T> decoder;
    Guidance<T> guidance;

    Network() = default;
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    NetworkOutput<T> forward(const Tensor<T>& image, const std::string& domain,
                             bool training);
    void add_domain(const DomainSpec& spec, const std::string& donor, Rng& rng);
};

template <class T>
Network<T> make_network(const NetworkConfig& cfg, const std::vector<DomainSpec>& specs,
                        Rng& rng);

}  // namespace lmdet
