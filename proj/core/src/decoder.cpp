#include "lmdet/decoder.hpp"

#include "lmdet/ops.hpp"

namespace lmdet {

namespace {

template <class T>
Conv2d<T> register_conv_copy(ParamStore<T>& store, const std::string& name,
                             const Conv2d<T>& src) {
    Conv2d<T> c;
    c.spec = src.spec;
    c.weight = store.add_param(name + "/weight", src.weight.clone_values());
    c.bias = store.add_param(name + "/bias", src.bias.clone_values());
    return c;
}

}  // namespace

template <class T>
Tensor<T> Dac<T>::forward(const Tensor<T>& x, const std::string& domain, bool training) {
    auto it = channel_wise.find(domain);
    if (it == channel_wise.end())
        throw ContractError("dac: unregistered domain '" + domain + "'");
    return ops::relu(bn.forward(point_wise(it->second(x)), training));
}

template <class T>
Dac<T> make_dac(ParamStore<T>& store, const std::string& name, int in_channels,
                int out_channels, const std::vector<std::string>& domains, Rng& rng) {
    Dac<T> d;
    d.in_channels = in_channels;
    d.out_channels = out_channels;
    const Conv2dSpec cw{.in_channels = in_channels, .out_channels = in_channels, .kernel_h = 3,
                        .kernel_w = 3, .padding = 1, .groups = in_channels};
    for (const auto& dom : domains)
        d.channel_wise.emplace(dom,
                               make_conv2d(store, "domain/" + dom + "/" + name + "/cw", cw, rng));
    d.point_wise = make_conv2d(store, name + "/pw",
                               {.in_channels = in_channels, .out_channels = out_channels,
                                .kernel_h = 1, .kernel_w = 1},
                               rng);
    d.bn = make_batch_norm(store, name + "/bn", out_channels);
    return d;
}

template <class T>
void add_dac_domain(ParamStore<T>& store, Dac<T>& dac, const std::string& name,
                    const std::string& domain, const std::string& donor) {
    auto it = dac.channel_wise.find(donor);
    if (it == dac.channel_wise.end())
        throw ContractError("dac: donor '" + donor + "' not registered");
    if (dac.channel_wise.count(domain))
        throw ContractError("dac: domain '" + domain + "' already registered");
    dac.channel_wise.emplace(
        domain, register_conv_copy(store, "domain/" + domain + "/" + name + "/cw", it->second));
}

template <class T>
Tensor<T> Decoder<T>::decode(const std::vector<Tensor<T>>& pyramid, const std::string& domain,
                             bool training) {
    if (pyramid.size() != 4)
        throw ShapeError("decode: want a 4-scale pyramid, got " +
                         std::to_string(pyramid.size()));
    for (int s = 0; s < 4; ++s)
        if (pyramid[static_cast<std::size_t>(s)].dim(3) != (base_dim << s))
            throw ShapeError("decode: stage " + std::to_string(s) + " has " +
                             std::to_string(pyramid[static_cast<std::size_t>(s)].dim(3)) +
                             " channels, expected " + std::to_string(base_dim << s));
    auto hit = heads.find(domain);
    if (hit == heads.end()) throw ContractError("decode: unregistered domain '" + domain + "'");

    Tensor<T> x = pyramid[3];
    std::size_t di = 0;
    for (int s = 2; s >= 0; --s) {
        x = upsample_bilinear(x, 2);
        x = ops::concat_last(x, pyramid[static_cast<std::size_t>(s)]);
        x = dacs[di++].forward(x, domain, training);
        x = dacs[di++].forward(x, domain, training);
    }
    x = upsample_bilinear(x, 4);
    return ops::sigmoid(hit->second(x));
}

template <class T>
Decoder<T> make_decoder(ParamStore<T>& store, int base_dim,
                        const std::map<std::string, int>& landmarks, Rng& rng) {
    if (base_dim < 1) throw ContractError("decoder: base_dim must be >= 1");
    Decoder<T> dec;
    dec.base_dim = base_dim;
    dec.landmarks = landmarks;
    std::vector<std::string> domains;
    for (const auto& [d, n] : landmarks) {
        if (n < 1)
            throw ContractError("decoder: domain '" + d + "' needs a positive landmark count");
        domains.push_back(d);
    }
    for (int s = 2; s >= 0; --s) {
        const int cs = base_dim << s;
        const std::string base = "dec/u" + std::to_string(s);
        dec.dacs.push_back(make_dac(store, base + "/dac0", 3 * cs, cs, domains, rng));
        dec.dacs.push_back(make_dac(store, base + "/dac1", cs, cs, domains, rng));
    }
    for (const auto& [d, n] : landmarks)
        dec.heads.emplace(d, make_conv2d(store, "domain/" + d + "/dec/head",
                                         {.in_channels = base_dim, .out_channels = n,
                                          .kernel_h = 1, .kernel_w = 1},
                                         rng));
    return dec;
}

template <class T>
Tensor<T> Guidance<T>::forward(const Tensor<T>& image, const std::string& domain) const {
    auto it = stacks.find(domain);
    if (it == stacks.end())
        throw ContractError("guidance: unregistered domain '" + domain + "'");
    if (image.rank() != 4 || image.dim(1) % 4 != 0 || image.dim(2) % 4 != 0)
        throw ContractError("guidance: image extent must be divisible by 4, got " +
                            shape_str(image.shape()));
    Tensor<T> x = resize_bilinear(image, image.dim(1) / 4, image.dim(2) / 4);
    const auto& convs = it->second;
    for (std::size_t i = 0; i + 1 < convs.size(); ++i) x = ops::relu(convs[i](x));
    return upsample_bilinear(ops::sigmoid(convs.back()(x)), 4);
}

template <class T>
int Guidance<T>::receptive_field() const {
    int rf = 1;
    for (int d : dilations) rf += 2 * d;
    return rf;
}

template <class T>
Guidance<T> make_guidance(ParamStore<T>& store, int in_channels, int width,
                          const std::map<std::string, int>& landmarks, Rng& rng) {
    if (in_channels < 1 || width < 1) throw ContractError("guidance: non-positive config");
    Guidance<T> g;
    g.width = width;
    for (const auto& [d, n] : landmarks) {
        if (n < 1)
            throw ContractError("guidance: domain '" + d + "' needs a positive landmark count");
        std::vector<Conv2d<T>> convs;
        for (std::size_t i = 0; i < g.dilations.size(); ++i) {
            const int dil = g.dilations[i];
            convs.push_back(make_conv2d(store,
                                        "domain/" + d + "/guide/c" + std::to_string(i),
                                        {.in_channels = i == 0 ? in_channels : width,
                                         .out_channels = width, .kernel_h = 3, .kernel_w = 3,
                                         .padding = dil, .dilation = dil},
                                        rng));
        }
        convs.push_back(make_conv2d(store, "domain/" + d + "/guide/head",
                                    {.in_channels = width, .out_channels = n, .kernel_h = 1,
                                     .kernel_w = 1},
                                    rng));
        g.stacks.emplace(d, std::move(convs));
    }
    return g;
}

template <class T>
void add_decoder_domain(ParamStore<T>& store, Decoder<T>& dec, const std::string& domain,
                        const std::string& donor, int num_landmarks, Rng& rng) {
    auto dit = dec.landmarks.find(donor);
    if (dit == dec.landmarks.end())
        throw ContractError("decoder: donor '" + donor + "' not registered");
    if (dec.landmarks.count(domain))
        throw ContractError("decoder: domain '" + domain + "' already registered");
    std::size_t di = 0;
    for (int s = 2; s >= 0; --s) {
        const std::string base = "dec/u" + std::to_string(s);
        add_dac_domain(store, dec.dacs[di++], base + "/dac0", domain, donor);
        add_dac_domain(store, dec.dacs[di++], base + "/dac1", domain, donor);
    }
    const std::string head_name = "domain/" + domain + "/dec/head";
    if (dit->second == num_landmarks) {
        dec.heads.emplace(domain, register_conv_copy(store, head_name, dec.heads.at(donor)));
    } else {
        dec.heads.emplace(domain, make_conv2d(store, head_name,
                                              {.in_channels = dec.base_dim,
                                               .out_channels = num_landmarks, .kernel_h = 1,
                                               .kernel_w = 1},
                                              rng));
    }
    dec.landmarks.emplace(domain, num_landmarks);
}

template <class T>
void add_guidance_domain(ParamStore<T>& store, Guidance<T>& g, const std::string& domain,
                         const std::string& donor, int num_landmarks, Rng& rng) {
    auto it = g.stacks.find(donor);
    if (it == g.stacks.end())
        throw ContractError("guidance: donor '" + donor + "' not registered");
    if (g.stacks.count(domain))
        throw ContractError("guidance: domain '" + domain + "' already registered");
    std::vector<Conv2d<T>> convs;
    for (std::size_t i = 0; i + 1 < it->second.size(); ++i)
        convs.push_back(register_conv_copy(store,
                                           "domain/" + domain + "/guide/c" + std::to_string(i),
                                           it->second[i]));
    const auto& donor_head = it->second.back();
    const std::string head_name = "domain/" + domain + "/guide/head";
    if (donor_head.spec.out_channels == num_landmarks) {
        convs.push_back(register_conv_copy(store, head_name, donor_head));
    } else {
        convs.push_back(make_conv2d(store, head_name,
                                    {.in_channels = g.width, .out_channels = num_landmarks,
                                     .kernel_h = 1, .kernel_w = 1},
                                    rng));
    }
    g.stacks.emplace(domain, std::move(convs));
}

#define LMDET_INSTANTIATE_DECODER(T)                                                          \
    template struct Dac<T>;                                                                   \
    template Dac<T> make_dac(ParamStore<T>&, const std::string&, int, int,                    \
                             const std::vector<std::string>&, Rng&);                          \
    template void add_dac_domain(ParamStore<T>&, Dac<T>&, const std::string&,                 \
                                 const std::string&, const std::string&);                     \
    template struct Decoder<T>;                                                               \
    template Decoder<T> make_decoder(ParamStore<T>&, int, const std::map<std::string, int>&,  \
                                     Rng&);                                                   \
    template struct Guidance<T>;                                                              \
    template Guidance<T> make_guidance(ParamStore<T>&, int, int,                              \
                                       const std::map<std::string, int>&, Rng&);              \
    template void add_decoder_domain(ParamStore<T>&, Decoder<T>&, const std::string&,         \
                                     const std::string&, int, Rng&);                          \
    template void add_guidance_domain(ParamStore<T>&, Guidance<T>&, const std::string&,       \
                                      const std::string&, int, Rng&);

LMDET_INSTANTIATE_DECODER(float)
LMDET_INSTANTIATE_DECODER(double)

#undef LMDET_INSTANTIATE_DECODER

}  // namespace lmdet
