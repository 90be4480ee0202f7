#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lmdet/layers.hpp"
#include "lmdet/ops.hpp"
#include "lmdet/param_store.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

namespace lmdet {

/// Non-overlapping window tiles of a cyclically shifted feature map.
/// `mask` is present only for shifted partitions: [nW, N, N] additive logits
/// (0 for token pairs from the same image region, -1e9 across the wrap seam).
template <class T>
struct Windows {
    Tensor<T> tokens;  // [B*nW, window*window, C]
    std::optional<Tensor<T>> mask;
    int batch = 0;
    int grid_h = 0;
    int grid_w = 0;
};

template <class T>
Windows<T> window_partition(const Tensor<T>& x, int window, int shift);

/// Inverse of window_partition for the same (window, shift, B, H, W).
template <class T>
Tensor<T> window_reverse(const Tensor<T>& tokens, int window, int shift, int batch, int h,
                         int w);

/// Multi-head window attention parameters. Key, value, output projection and
/// the relative position bias table are shared across domains; each domain
/// owns its query projection. `query` is the basic (domain-free) query.
/// The bias table covers relative offsets of a `window`-sized tile; smaller
/// effective windows index a centered subrange of the same table.
template <class T>
struct WindowAttention {
    int heads = 1;
    int window = 1;
    Linear<T> query;
    std::map<std::string, Linear<T>> domain_query;
    Linear<T> key;
    Linear<T> value;
    Linear<T> proj;
    Tensor<T> bias_table;  // [(2*window-1)^2, heads]
};

/// Scaled dot-product attention over window tokens [Bn, N, C] with relative
/// position bias; N must equal eff_window^2. `domain` null selects the basic
/// query, otherwise that domain's query (unregistered domain is a contract
/// error). `mask` from window_partition suppresses cross-region pairs.
template <class T>
Tensor<T> msa(const Tensor<T>& tokens, const WindowAttention<T>& p, const std::string* domain,
              const std::optional<Tensor<T>>& mask, int eff_window);

/// Per-domain diagonal scales of the two block branches, stored as vectors
/// of length C.
template <class T>
struct DomainScale {
    Tensor<T> d1;
    Tensor<T> d2;
};

/// Windowed transformer block.
/// Basic form:   yh = MSA(LN(x)) + x;          y = MLP(LN(yh)) + yh.
/// Domain form:  yh = d1 * MSA_qd(LN(x)) + x;  y = d2 * (MLP(LN(yh)) + yh)
/// where d1 scales only the attention branch and d2 scales the whole
/// MLP-plus-residual sum. Maps whose extent is smaller than `window` shrink
/// the window to the extent; a window covering the whole map drops the shift.
template <class T>
struct TransformerBlock {
    int dim = 1;
    int window = 1;
    int shift = 0;
    WindowAttention<T> attn;
    LayerNorm<T> ln1;
    LayerNorm<T> ln2;
    Linear<T> fc1;
    Linear<T> fc2;
    std::map<std::string, DomainScale<T>> domains;

    Tensor<T> forward(const Tensor<T>& x) const;
    Tensor<T> forward(const Tensor<T>& x, const std::string& domain) const;
};

/// Registers all block parameters under `name` (shared) and
/// "domain/<d>/<name>" (per domain). Every query projection, basic and
/// per-domain, starts from one common draw; diagonal scales start at ones,
/// so the domain form initially equals the basic form.
template <class T>
TransformerBlock<T> make_transformer_block(ParamStore<T>& store, const std::string& name,
                                           int dim, int heads, int window, int shift,
                                           const std::vector<std::string>& domains, Rng& rng,
                                           int mlp_ratio = 4);

/// Adds one more domain to an existing block, copying the donor domain's
/// current query and diagonal values.
template <class T>
void add_block_domain(ParamStore<T>& store, TransformerBlock<T>& block,
                      const std::string& name, const std::string& domain,
                      const std::string& donor);

}  // namespace lmdet
