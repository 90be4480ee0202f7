#include "lmdet/encoder.hpp"

#include <algorithm>

#include "lmdet/ops.hpp"

namespace lmdet {

void EncoderConfig::validate() const {
    if (depths.size() != 4 || heads.size() != 4)
        throw ContractError("encoder: want 4 stages, got " + std::to_string(depths.size()) +
                            " depths / " + std::to_string(heads.size()) + " head counts");
    if (patch_size < 1 || embed_dim < 1 || window < 1 || in_channels < 1 || mlp_ratio < 1)
        throw ContractError("encoder: non-positive config field");
    for (int s = 0; s < 4; ++s) {
        if (depths[static_cast<std::size_t>(s)] < 1)
            throw ContractError("encoder: stage " + std::to_string(s) + " depth must be >= 1");
        if (heads[static_cast<std::size_t>(s)] < 1 ||
            stage_channels(s) % heads[static_cast<std::size_t>(s)] != 0)
            throw ContractError("encoder: stage " + std::to_string(s) + " heads " +
                                std::to_string(heads[static_cast<std::size_t>(s)]) +
                                " do not divide " + std::to_string(stage_channels(s)) +
                                " channels");
    }
}

template <class T>
Tensor<T> PatchEmbed<T>::operator()(const Tensor<T>& image) const {
    if (image.rank() != 4)
        throw ShapeError("patch_embed: want [B,H,W,C], got " + shape_str(image.shape()));
    if (image.dim(1) % divisor != 0 || image.dim(2) % divisor != 0)
        throw ContractError("patch_embed: input " + std::to_string(image.dim(1)) + "x" +
                            std::to_string(image.dim(2)) + " must be divisible by " +
                            std::to_string(divisor));
    return norm(proj(ops::space_to_depth(image, patch)));
}

template <class T>
Tensor<T> PatchMerge<T>::operator()(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
        throw ShapeError("patch_merge: want even [B,h,w,C], got " + shape_str(x.shape()));
    return reduce(norm(ops::space_to_depth(x, 2)));
}

template <class T>
std::vector<Tensor<T>> Encoder<T>::encode(const Tensor<T>& image,
                                          const std::string& domain) const {
    std::vector<Tensor<T>> pyramid;
    pyramid.reserve(4);
    Tensor<T> x = embed(image);
    for (std::size_t s = 0; s < stages.size(); ++s) {
        for (const auto& blk : stages[s]) x = blk.forward(x, domain);
        pyramid.push_back(x);
        if (s + 1 < stages.size()) x = merges[s](x);
    }
    return pyramid;
}

template <class T>
Encoder<T> make_encoder(ParamStore<T>& store, const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    Encoder<T> enc;
    enc.cfg = cfg;

    enc.embed.patch = cfg.patch_size;
    enc.embed.divisor = cfg.required_divisor();
    enc.embed.proj = make_linear(store, "embed/proj",
                                 cfg.patch_size * cfg.patch_size * cfg.in_channels,
                                 cfg.embed_dim, rng);
    enc.embed.norm = make_layer_norm(store, "embed/norm", cfg.embed_dim);

    enc.stages.resize(4);
    for (int s = 0; s < 4; ++s) {
        const int dim = cfg.stage_channels(s);
        for (int j = 0; j < cfg.depths[static_cast<std::size_t>(s)]; ++j) {
            const int shift = j % 2 == 0 ? 0 : cfg.window / 2;
            enc.stages[static_cast<std::size_t>(s)].push_back(make_transformer_block(
                store, "enc/s" + std::to_string(s) + "/b" + std::to_string(j), dim,
                cfg.heads[static_cast<std::size_t>(s)], cfg.window, shift, cfg.domains, rng,
                cfg.mlp_ratio));
        }
        if (s < 3) {
            PatchMerge<T> m;
            m.norm = make_layer_norm(store, "enc/m" + std::to_string(s) + "/norm", 4 * dim);
            m.reduce =
                make_linear(store, "enc/m" + std::to_string(s) + "/reduce", 4 * dim, 2 * dim,
                            rng);
            enc.merges.push_back(std::move(m));
        }
    }
    return enc;
}

template <class T>
void add_encoder_domain(ParamStore<T>& store, Encoder<T>& enc, const std::string& domain,
                        const std::string& donor) {
    if (std::find(enc.cfg.domains.begin(), enc.cfg.domains.end(), domain) !=
        enc.cfg.domains.end())
        throw ContractError("encoder: domain '" + domain + "' already registered");
    for (std::size_t s = 0; s < enc.stages.size(); ++s)
        for (std::size_t j = 0; j < enc.stages[s].size(); ++j)
            add_block_domain(store, enc.stages[s][j],
                             "enc/s" + std::to_string(s) + "/b" + std::to_string(j), domain,
                             donor);
    enc.cfg.domains.push_back(domain);
}

#define LMDET_INSTANTIATE_ENCODER(T)                                                     \
    template struct PatchEmbed<T>;                                                      \
    template struct PatchMerge<T>;                                                      \
    template struct Encoder<T>;                                                         \
    template Encoder<T> make_encoder(ParamStore<T>&, const EncoderConfig&, Rng&);       \
    template void add_encoder_domain(ParamStore<T>&, Encoder<T>&, const std::string&,   \
                                     const std::string&);

LMDET_INSTANTIATE_ENCODER(float)
LMDET_INSTANTIATE_ENCODER(double)

#undef LMDET_INSTANTIATE_ENCODER

}  // namespace lmdet
