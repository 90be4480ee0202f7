#include "lmdet/model.hpp"

#include <cmath>
#include <cstring>

#include "lmdet/layers.hpp"
#include "lmdet/ops.hpp"

namespace lmdet {

SpacingSpec SpacingSpec::fixed(double mm) {
    SpacingSpec s;
    s.rule = SpacingRule::fixed_mm;
    s.mm_per_pixel = mm;
    return s;
}

SpacingSpec SpacingSpec::wrist(int a, int b) {
    SpacingSpec s;
    s.rule = SpacingRule::wrist_pair;
    s.wrist_a = a;
    s.wrist_b = b;
    return s;
}

SpacingSpec SpacingSpec::pixels() { return SpacingSpec{}; }

void DomainSpec::validate() const {
    if (name.empty()) throw ContractError("domain: empty name");
    if (name.find('/') != std::string::npos)
        throw ContractError("domain: name '" + name + "' must not contain '/'");
    if (num_landmarks < 1)
        throw ContractError("domain '" + name + "': landmark count must be >= 1");
    if (sdr_thresholds.empty())
        throw ContractError("domain '" + name + "': no sdr thresholds");
    double prev = 0.0;
    for (double t : sdr_thresholds) {
        if (!(t > prev))
            throw ContractError("domain '" + name +
                                "': sdr thresholds must be positive and strictly increasing");
        prev = t;
    }
    if (!(id_threshold > 0.0))
        throw ContractError("domain '" + name + "': identification threshold must be > 0");
    switch (spacing.rule) {
        case SpacingRule::fixed_mm:
            if (!(spacing.mm_per_pixel > 0.0))
                throw ContractError("domain '" + name + "': mm per pixel must be > 0");
            break;
        case SpacingRule::wrist_pair:
            if (spacing.wrist_a < 0 || spacing.wrist_b < 0 ||
                spacing.wrist_a >= num_landmarks || spacing.wrist_b >= num_landmarks ||
                spacing.wrist_a == spacing.wrist_b)
                throw ContractError("domain '" + name + "': wrist endpoints must be two distinct landmark indices");
            break;
        case SpacingRule::pixel:
            break;
    }
}

void LandmarkSet::validate() const {
    if (height < 1 || width < 1)
        throw ContractError("landmarks: non-positive geometry " + std::to_string(height) +
                            "x" + std::to_string(width));
    for (std::size_t n = 0; n < coords.size(); ++n) {
        const auto [r, c] = coords[n];
        if (!std::isfinite(r) || !std::isfinite(c) || r < -0.5 ||
            r > static_cast<double>(height) - 0.5 || c < -0.5 ||
            c > static_cast<double>(width) - 0.5)
            throw ContractError("landmark " + std::to_string(n + 1) + " at (" +
                                std::to_string(r) + ", " + std::to_string(c) +
                                ") is outside " + std::to_string(height) + "x" +
                                std::to_string(width));
    }
}

template <class T>
HeatmapStack<T> gaussian_target(const LandmarkSet& landmarks, int height, int width,
                                double sigma, bool normalize_peak) {
    if (!(sigma > 0.0)) throw ContractError("gaussian_target: sigma must be > 0");
    if (landmarks.height != height || landmarks.width != width)
        throw ContractError("gaussian_target: landmarks live in " +
                            std::to_string(landmarks.height) + "x" +
                            std::to_string(landmarks.width) + ", target is " +
                            std::to_string(height) + "x" + std::to_string(width));
    landmarks.validate();
    const int n = static_cast<int>(landmarks.coords.size());
    if (n < 1) throw ContractError("gaussian_target: empty landmark set");

    const double amp =
        normalize_peak ? 1.0 : 1.0 / (std::sqrt(2.0 * 3.14159265358979323846) * sigma);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    std::vector<T> out(static_cast<std::size_t>(height) * width * n);
    for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j)
            for (int k = 0; k < n; ++k) {
                const double dr = i - landmarks.coords[static_cast<std::size_t>(k)].first;
                const double dc = j - landmarks.coords[static_cast<std::size_t>(k)].second;
                out[(static_cast<std::size_t>(i) * width + j) * n + k] =
                    static_cast<T>(amp * std::exp(-(dr * dr + dc * dc) * inv));
            }
    return {Tensor<T>::from({height, width, n}, std::move(out)), HeatmapRole::target};
}

template <class T>
Tensor<T> batch_targets(const std::vector<LandmarkSet>& sets, int height, int width,
                        double sigma, bool normalize_peak) {
    if (sets.empty()) throw ContractError("batch_targets: empty batch");
    const int n = static_cast<int>(sets[0].coords.size());
    const std::size_t per = static_cast<std::size_t>(height) * width * n;
    std::vector<T> out(per * sets.size());
    for (std::size_t b = 0; b < sets.size(); ++b) {
        if (static_cast<int>(sets[b].coords.size()) != n)
            throw ContractError("batch_targets: landmark counts differ within the batch");
        auto one = gaussian_target<T>(sets[b], height, width, sigma, normalize_peak);
        std::memcpy(out.data() + b * per, one.scores.values().data(), per * sizeof(T));
    }
    return Tensor<T>::from({static_cast<int>(sets.size()), height, width, n},
                           std::move(out));
}

template <class T>
LandmarkSet decode_landmarks(const HeatmapStack<T>& heatmap) {
    const auto& t = heatmap.scores;
    if (t.rank() != 3) throw ShapeError("decode_landmarks: want [H,W,N], got " + shape_str(t.shape()));
    const int h = t.dim(0), w = t.dim(1), n = t.dim(2);
    LandmarkSet out;
    out.height = h;
    out.width = w;
    out.coords.resize(static_cast<std::size_t>(n));
    const auto& v = t.values();
    for (int k = 0; k < n; ++k) {
        T best = v[static_cast<std::size_t>(k)];
        int bi = 0, bj = 0;
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const T x = v[(static_cast<std::size_t>(i) * w + j) * n + k];
                if (x > best) {
                    best = x;
                    bi = i;
                    bj = j;
                }
            }
        out.coords[static_cast<std::size_t>(k)] = {static_cast<double>(bi),
                                                   static_cast<double>(bj)};
    }
    return out;
}

LandmarkSet rescale_coords(const LandmarkSet& coords, int to_height, int to_width) {
    coords.validate();
    if (to_height < 1 || to_width < 1)
        throw ContractError("rescale_coords: non-positive target geometry");
    const double sr = static_cast<double>(to_height) / coords.height;
    const double sc = static_cast<double>(to_width) / coords.width;
    LandmarkSet out;
    out.height = to_height;
    out.width = to_width;
    out.coords.reserve(coords.coords.size());
    for (const auto& [r, c] : coords.coords)
        out.coords.emplace_back((r + 0.5) * sr - 0.5, (c + 0.5) * sc - 0.5);
    return out;
}

template <class T>
HeatmapStack<T> slice_stack(const Tensor<T>& batch, int b, HeatmapRole role) {
    if (batch.rank() != 4)
        throw ShapeError("slice_stack: want [B,H,W,N], got " + shape_str(batch.shape()));
    if (b < 0 || b >= batch.dim(0))
        throw ContractError("slice_stack: index " + std::to_string(b) + " out of batch " +
                            std::to_string(batch.dim(0)));
    const std::size_t per =
        static_cast<std::size_t>(batch.dim(1)) * batch.dim(2) * batch.dim(3);
    std::vector<T> v(batch.values().begin() + static_cast<std::ptrdiff_t>(per) * b,
                     batch.values().begin() + static_cast<std::ptrdiff_t>(per) * (b + 1));
    return {Tensor<T>::from({batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(v)), role};
}

template <class T>
HeatmapStack<T> resize_stack(const HeatmapStack<T>& stack, int out_h, int out_w) {
    const auto& t = stack.scores;
    if (t.rank() != 3) throw ShapeError("resize_stack: want [H,W,N], got " + shape_str(t.shape()));
    auto wide = resize_bilinear(
        ops::reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)}), out_h, out_w);
    return {ops::reshape(wide, {out_h, out_w, t.dim(2)}), stack.role};
}

void NetworkConfig::validate() const {
    if (guidance_width < 1) throw ContractError("network: guidance width must be >= 1");
    if (!(sigma > 0.0)) throw ContractError("network: sigma must be > 0");
}

NetworkConfig toy_network_config() {
    NetworkConfig cfg;
    cfg.encoder.embed_dim = 32;
    cfg.encoder.depths = {2, 2, 2, 2};
    cfg.encoder.heads = {1, 2, 4, 8};
    cfg.encoder.window = 4;
    cfg.guidance_width = 16;
    return cfg;
}

NetworkConfig paper_network_config() {
    NetworkConfig cfg;
    cfg.encoder.embed_dim = 128;
    cfg.encoder.depths = {2, 2, 18, 2};
    cfg.encoder.heads = {4, 8, 16, 32};
    cfg.encoder.window = 8;
    cfg.guidance_width = 64;
    return cfg;
}

template <class T>
NetworkOutput<T> Network<T>::forward(const Tensor<T>& image, const std::string& domain,
                                     bool training) {
    if (!domains.count(domain))
        throw ContractError("network: unregistered domain '" + domain + "'");
    if (image.rank() != 4 || image.dim(3) != cfg.encoder.in_channels)
        throw ShapeError("network: want [B,H,W," +
                         std::to_string(cfg.encoder.in_channels) + "], got " +
                         shape_str(image.shape()));
    auto fine = decoder.decode(encoder.encode(image, domain), domain, training);
    auto coarse = guidance.forward(image, domain);
    auto fused = ops::mul(coarse, fine);
    return {std::move(fused), std::move(fine), std::move(coarse)};
}

template <class T>
void Network<T>::add_domain(const DomainSpec& spec, const std::string& donor, Rng& rng) {
    spec.validate();
    if (domains.count(spec.name))
        throw ContractError("network: domain '" + spec.name + "' already registered");
    if (!domains.count(donor))
        throw ContractError("network: donor '" + donor + "' not registered");
    add_encoder_domain(store, encoder, spec.name, donor);
    add_decoder_domain(store, decoder, spec.name, donor, spec.num_landmarks, rng);
    add_guidance_domain(store, guidance, spec.name, donor, spec.num_landmarks, rng);
    cfg.encoder.domains.push_back(spec.name);
    domains.emplace(spec.name, spec);
}

template <class T>
Network<T> make_network(const NetworkConfig& cfg, const std::vector<DomainSpec>& specs,
                        Rng& rng) {
    cfg.validate();
    if (specs.empty()) throw ContractError("network: need at least one domain");
    Network<T> net;
    net.cfg = cfg;
    net.cfg.encoder.domains.clear();
    std::map<std::string, int> landmarks;
    for (const auto& s : specs) {
        s.validate();
        if (net.domains.count(s.name))
            throw ContractError("network: duplicate domain '" + s.name + "'");
        net.cfg.encoder.domains.push_back(s.name);
        landmarks.emplace(s.name, s.num_landmarks);
        net.domains.emplace(s.name, s);
    }
    net.cfg.encoder.validate();
    net.encoder = make_encoder(net.store, net.cfg.encoder, rng);
    net.decoder = make_decoder(net.store, net.cfg.encoder.embed_dim, landmarks, rng);
    net.guidance = make_guidance(net.store, net.cfg.encoder.in_channels,
                                 net.cfg.guidance_width, landmarks, rng);
    return net;
}

#define LMDET_INSTANTIATE_MODEL(T)                                                        \
    template HeatmapStack<T> gaussian_target<T>(const LandmarkSet&, int, int, double,    \
                                                bool);                                    \
    template Tensor<T> batch_targets<T>(const std::vector<LandmarkSet>&, int, int,       \
                                        double, bool);                                    \
    template LandmarkSet decode_landmarks<T>(const HeatmapStack<T>&);                     \
    template HeatmapStack<T> slice_stack<T>(const Tensor<T>&, int, HeatmapRole);          \
    template HeatmapStack<T> resize_stack<T>(const HeatmapStack<T>&, int, int);           \
    template struct Network<T>;                                                           \
    template Network<T> make_network<T>(const NetworkConfig&,                             \
                                        const std::vector<DomainSpec>&, Rng&);

LMDET_INSTANTIATE_MODEL(float)
LMDET_INSTANTIATE_MODEL(double)

}  // namespace lmdet
