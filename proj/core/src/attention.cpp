#include "lmdet/attention.hpp"

#include <cmath>
#include <cstring>

namespace lmdet {

namespace {

constexpr double kMaskValue = -1e9;

// Region id of a shifted-map coordinate: the three slices are the body,
// the band that stays in place, and the band wrapped around by the shift.
int region(int r, int extent, int window, int shift) {
    if (r < extent - window) return 0;
    if (r < extent - shift) return 1;
    return 2;
}

std::shared_ptr<const std::vector<int>> relative_index(int eff, int table_window) {
    const int n = eff * eff;
    const int span = 2 * table_window - 1;
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i) {
        const int yi = i / eff, xi = i % eff;
        for (int j = 0; j < n; ++j) {
            const int yj = j / eff, xj = j % eff;
            (*idx)[static_cast<std::size_t>(i) * n + j] =
                (yi - yj + table_window - 1) * span + (xi - xj + table_window - 1);
        }
    }
    return idx;
}

}  // namespace

template <class T>
Windows<T> window_partition(const Tensor<T>& x, int window, int shift) {
    if (x.rank() != 4)
        throw ShapeError("window_partition: want [B,H,W,C], got " + shape_str(x.shape()));
    const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (window < 1 || H % window != 0 || W % window != 0)
        throw ShapeError("window_partition: window " + std::to_string(window) +
                         " does not tile " + shape_str(x.shape()));
    if (shift < 0 || shift >= window)
        throw ContractError("window_partition: shift " + std::to_string(shift) +
                            " outside [0, window)");
    const int gh = H / window, gw = W / window;
    const int nw = gh * gw;
    const int N = window * window;

    auto src = std::make_shared<std::vector<std::int64_t>>(x.size());
    std::size_t o = 0;
    for (int b = 0; b < B; ++b)
        for (int wy = 0; wy < gh; ++wy)
            for (int wx = 0; wx < gw; ++wx)
                for (int ty = 0; ty < window; ++ty) {
                    const int sy = (wy * window + ty + shift) % H;
                    for (int tx = 0; tx < window; ++tx) {
                        const int sx = (wx * window + tx + shift) % W;
                        const std::int64_t base =
                            ((static_cast<std::int64_t>(b) * H + sy) * W + sx) * C;
                        for (int c = 0; c < C; ++c) (*src)[o++] = base + c;
                    }
                }

    Windows<T> out;
    out.tokens = ops::gather_flat(x, src, {B * nw, N, C}, "window_partition");
    out.batch = B;
    out.grid_h = gh;
    out.grid_w = gw;

    if (shift > 0) {
        Tensor<T> mask = Tensor<T>::zeros({nw, N, N});
        T* pm = mask.data();
        std::vector<int> ids(static_cast<std::size_t>(N));
        for (int wy = 0; wy < gh; ++wy)
            for (int wx = 0; wx < gw; ++wx) {
                for (int ty = 0; ty < window; ++ty)
                    for (int tx = 0; tx < window; ++tx)
                        ids[static_cast<std::size_t>(ty * window + tx)] =
                            3 * region(wy * window + ty, H, window, shift) +
                            region(wx * window + tx, W, window, shift);
                T* wm = pm + static_cast<std::size_t>(wy * gw + wx) * N * N;
                for (int i = 0; i < N; ++i)
                    for (int j = 0; j < N; ++j)
                        if (ids[static_cast<std::size_t>(i)] != ids[static_cast<std::size_t>(j)])
                            wm[static_cast<std::size_t>(i) * N + j] = static_cast<T>(kMaskValue);
            }
        out.mask = std::move(mask);
    }
    return out;
}

template <class T>
Tensor<T> window_reverse(const Tensor<T>& tokens, int window, int shift, int batch, int h,
                         int w) {
    if (tokens.rank() != 3)
        throw ShapeError("window_reverse: want [Bn,N,C], got " + shape_str(tokens.shape()));
    const int N = tokens.dim(1), C = tokens.dim(2);
    if (N != window * window || window < 1 || h % window != 0 || w % window != 0)
        throw ShapeError("window_reverse: window " + std::to_string(window) +
                         " inconsistent with " + shape_str(tokens.shape()));
    const int gh = h / window, gw = w / window;
    const int nw = gh * gw;
    if (tokens.dim(0) != batch * nw)
        throw ShapeError("window_reverse: " + std::to_string(tokens.dim(0)) +
                         " windows, expected " + std::to_string(batch * nw));

    auto src = std::make_shared<std::vector<std::int64_t>>(tokens.size());
    std::size_t o = 0;
    for (int b = 0; b < batch; ++b)
        for (int y = 0; y < h; ++y) {
            const int sy = (y - shift + h) % h;
            const int wy = sy / window, ty = sy % window;
            for (int x = 0; x < w; ++x) {
                const int sx = (x - shift + w) % w;
                const int wx = sx / window, tx = sx % window;
                const std::int64_t base =
                    ((static_cast<std::int64_t>(b) * nw + wy * gw + wx) * N + ty * window + tx) *
                    C;
                for (int c = 0; c < C; ++c) (*src)[o++] = base + c;
            }
        }
    return ops::gather_flat(tokens, src, {batch, h, w, C}, "window_reverse");
}

template <class T>
Tensor<T> msa(const Tensor<T>& tokens, const WindowAttention<T>& p, const std::string* domain,
              const std::optional<Tensor<T>>& mask, int eff_window) {
    if (tokens.rank() != 3)
        throw ShapeError("msa: want [Bn,N,C], got " + shape_str(tokens.shape()));
    const int Bn = tokens.dim(0), N = tokens.dim(1), C = tokens.dim(2);
    if (N != eff_window * eff_window || eff_window > p.window)
        throw ShapeError("msa: " + std::to_string(N) + " tokens do not form a window of " +
                         std::to_string(eff_window));
    if (C % p.heads != 0)
        throw ShapeError("msa: heads " + std::to_string(p.heads) + " do not divide dim " +
                         std::to_string(C));
    const int hd = C / p.heads;

    const Linear<T>* q_proj = &p.query;
    if (domain) {
        auto it = p.domain_query.find(*domain);
        if (it == p.domain_query.end())
            throw ContractError("msa: unregistered domain '" + *domain + "'");
        q_proj = &it->second;
    }

    auto split_heads = [&](const Tensor<T>& t) {
        return ops::permute(ops::reshape(t, {Bn, N, p.heads, hd}), {0, 2, 1, 3});
    };
    auto q = split_heads((*q_proj)(tokens));
    auto k = split_heads(p.key(tokens));
    auto v = split_heads(p.value(tokens));

    auto attn = ops::scale(ops::matmul(q, k, true),
                           static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));

    auto bias = ops::permute(
        ops::reshape(ops::gather_rows(p.bias_table, relative_index(eff_window, p.window)),
                     {N, N, p.heads}),
        {2, 0, 1});
    attn = ops::add_suffix(attn, bias);

    if (mask) {
        if (mask->rank() != 3 || mask->dim(1) != N || mask->dim(2) != N ||
            Bn % mask->dim(0) != 0)
            throw ShapeError("msa: mask " + shape_str(mask->shape()) + " does not tile attn [" +
                             std::to_string(Bn) + "," + std::to_string(N) + "," +
                             std::to_string(N) + "]");
        const int nw = mask->dim(0);
        Tensor<T> tiled = Tensor<T>::zeros({Bn, p.heads, N, N});
        const std::size_t block = static_cast<std::size_t>(N) * N;
        for (int bi = 0; bi < Bn; ++bi) {
            const T* src = mask->data() + static_cast<std::size_t>(bi % nw) * block;
            for (int h = 0; h < p.heads; ++h)
                std::memcpy(tiled.data() + (static_cast<std::size_t>(bi) * p.heads + h) * block,
                            src, block * sizeof(T));
        }
        attn = ops::add(attn, tiled);
    }

    attn = ops::softmax_last(attn);
    auto out = ops::reshape(ops::permute(ops::matmul(attn, v), {0, 2, 1, 3}), {Bn, N, C});
    return p.proj(out);
}

namespace {

// Window covering the whole map makes shifting a no-op, so drop it.
template <class T>
Tensor<T> windowed_msa(const Tensor<T>& x, const WindowAttention<T>& p, int window, int shift,
                       const std::string* domain) {
    const int h = x.dim(1), w = x.dim(2);
    const int eff = std::min(window, std::min(h, w));
    const int s = (eff >= h && eff >= w) ? 0 : (shift % eff);
    auto win = window_partition(x, eff, s);
    auto y = msa(win.tokens, p, domain, win.mask, eff);
    return window_reverse(y, eff, s, win.batch, h, w);
}

}  // namespace

template <class T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& x) const {
    auto yh = ops::add(windowed_msa<T>(ln1(x), attn, window, shift, nullptr), x);
    auto mlp = fc2(ops::gelu(fc1(ln2(yh))));
    return ops::add(mlp, yh);
}

template <class T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& x, const std::string& domain) const {
    auto it = domains.find(domain);
    if (it == domains.end())
        throw ContractError("transformer block: unregistered domain '" + domain + "'");
    auto msa_out = windowed_msa<T>(ln1(x), attn, window, shift, &domain);
    auto yh = ops::add(ops::mul_suffix(msa_out, it->second.d1), x);
    auto mlp = fc2(ops::gelu(fc1(ln2(yh))));
    return ops::mul_suffix(ops::add(mlp, yh), it->second.d2);
}

template <class T>
TransformerBlock<T> make_transformer_block(ParamStore<T>& store, const std::string& name,
                                           int dim, int heads, int window, int shift,
                                           const std::vector<std::string>& domains, Rng& rng,
                                           int mlp_ratio) {
    if (dim < 1 || heads < 1 || dim % heads != 0)
        throw ContractError("transformer block: heads " + std::to_string(heads) +
                            " must divide dim " + std::to_string(dim));
    if (window < 1 || shift < 0 || shift >= window)
        throw ContractError("transformer block: bad window/shift " + std::to_string(window) +
                            "/" + std::to_string(shift));

    TransformerBlock<T> blk;
    blk.dim = dim;
    blk.window = window;
    blk.shift = shift;
    blk.ln1 = make_layer_norm(store, name + "/ln1", dim);

    auto& a = blk.attn;
    a.heads = heads;
    a.window = window;
    const auto wq = rng.template trunc_normal_vec<T>(static_cast<std::size_t>(dim) * dim, 0.02);
    a.query.weight =
        store.add_param(name + "/attn/query/weight", Tensor<T>::from({dim, dim}, wq));
    a.query.bias = store.add_param(name + "/attn/query/bias", Tensor<T>::zeros({dim}));
    for (const auto& d : domains) {
        Linear<T> q;
        q.weight = store.add_param("domain/" + d + "/" + name + "/attn/query/weight",
                                   Tensor<T>::from({dim, dim}, wq));
        q.bias = store.add_param("domain/" + d + "/" + name + "/attn/query/bias",
                                 Tensor<T>::zeros({dim}));
        a.domain_query.emplace(d, std::move(q));
    }
    a.key = make_linear(store, name + "/attn/key", dim, dim, rng);
    a.value = make_linear(store, name + "/attn/value", dim, dim, rng);
    a.proj = make_linear(store, name + "/attn/proj", dim, dim, rng);
    const int span = 2 * window - 1;
    a.bias_table = store.add_param(
        name + "/attn/bias_table",
        Tensor<T>::from({span * span, heads},
                        rng.template trunc_normal_vec<T>(
                            static_cast<std::size_t>(span) * span * heads, 0.02)));

    blk.ln2 = make_layer_norm(store, name + "/ln2", dim);
    blk.fc1 = make_linear(store, name + "/mlp/fc1", dim, dim * mlp_ratio, rng);
    blk.fc2 = make_linear(store, name + "/mlp/fc2", dim * mlp_ratio, dim, rng);

    for (const auto& d : domains) {
        DomainScale<T> s;
        s.d1 = store.add_param("domain/" + d + "/" + name + "/d1", Tensor<T>::full({dim}, T(1)));
        s.d2 = store.add_param("domain/" + d + "/" + name + "/d2", Tensor<T>::full({dim}, T(1)));
        blk.domains.emplace(d, std::move(s));
    }
    return blk;
}

template <class T>
void add_block_domain(ParamStore<T>& store, TransformerBlock<T>& block, const std::string& name,
                      const std::string& domain, const std::string& donor) {
    auto dit = block.domains.find(donor);
    auto qit = block.attn.domain_query.find(donor);
    if (dit == block.domains.end() || qit == block.attn.domain_query.end())
        throw ContractError("add domain: donor '" + donor + "' not registered");
    if (block.domains.count(domain))
        throw ContractError("add domain: '" + domain + "' already registered");

    const std::string prefix = "domain/" + domain + "/" + name;
    Linear<T> q;
    q.weight = store.add_param(prefix + "/attn/query/weight", qit->second.weight.clone_values());
    q.bias = store.add_param(prefix + "/attn/query/bias", qit->second.bias.clone_values());
    block.attn.domain_query.emplace(domain, std::move(q));

    DomainScale<T> s;
    s.d1 = store.add_param(prefix + "/d1", dit->second.d1.clone_values());
    s.d2 = store.add_param(prefix + "/d2", dit->second.d2.clone_values());
    block.domains.emplace(domain, std::move(s));
}

#define LMDET_INSTANTIATE_ATTENTION(T)                                                        \
    template struct Windows<T>;                                                               \
    template Windows<T> window_partition(const Tensor<T>&, int, int);                         \
    template Tensor<T> window_reverse(const Tensor<T>&, int, int, int, int, int);             \
    template struct WindowAttention<T>;                                                       \
    template Tensor<T> msa(const Tensor<T>&, const WindowAttention<T>&, const std::string*,   \
                           const std::optional<Tensor<T>>&, int);                             \
    template struct DomainScale<T>;                                                           \
    template struct TransformerBlock<T>;                                                      \
    template TransformerBlock<T> make_transformer_block(ParamStore<T>&, const std::string&,   \
                                                        int, int, int, int,                  \
                                                        const std::vector<std::string>&,     \
                                                        Rng&, int);                           \
    template void add_block_domain(ParamStore<T>&, TransformerBlock<T>&, const std::string&, \
                                   const std::string&, const std::string&);

LMDET_INSTANTIATE_ATTENTION(float)
LMDET_INSTANTIATE_ATTENTION(double)

#undef LMDET_INSTANTIATE_ATTENTION

}  // namespace lmdet
