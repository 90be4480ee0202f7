#include "lmdet/layers.hpp"

#include <cmath>
#include <cstring>

namespace lmdet {

void Conv2dSpec::validate() const {
    if (in_channels < 1 || out_channels < 1 || kernel_h < 1 || kernel_w < 1 || stride < 1 ||
        padding < 0 || dilation < 1 || groups < 1)
        throw ContractError("conv2d: non-positive field in spec");
    if (in_channels % groups != 0 || out_channels % groups != 0)
        throw ContractError("conv2d: groups " + std::to_string(groups) +
                            " must divide channels " + std::to_string(in_channels) + "/" +
                            std::to_string(out_channels));
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dSpec& spec, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
    spec.validate();
    if (x.rank() != 4)
        throw ShapeError("conv2d: want [B,H,W,C], got " + shape_str(x.shape()));
    const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (C != spec.in_channels)
        throw ShapeError("conv2d: input has " + std::to_string(C) + " channels, spec wants " +
                         std::to_string(spec.in_channels));
    const int cin_pg = spec.in_channels / spec.groups;
    const int cout = spec.out_channels;
    const Shape want_w{spec.kernel_h, spec.kernel_w, cin_pg, cout};
    if (!shape_eq(weight.shape(), want_w))
        throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + ", expected " +
                         shape_str(want_w));
    if (!shape_eq(bias.shape(), Shape{cout}))
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + ", expected [" +
                         std::to_string(cout) + "]");
    const int Ho = spec.out_extent(H, spec.kernel_h);
    const int Wo = spec.out_extent(W, spec.kernel_w);
    if (Ho < 1 || Wo < 1)
        throw ShapeError("conv2d: zero-size output from " + shape_str(x.shape()));

    if (spec.pointwise() && spec.stride == 1 && spec.padding == 0 && spec.dilation == 1) {
        auto flat = ops::reshape(x, {B * H * W, C});
        auto w2 = ops::reshape(weight, {C, cout});
        auto y = ops::add_suffix(ops::matmul(flat, w2), bias);
        return ops::reshape(y, {B, H, W, cout});
    }

    Tensor<T> out = Tensor<T>::zeros({B, Ho, Wo, cout});
    const int cout_pg = cout / spec.groups;
    const T* px = x.data();
    const T* pw = weight.data();
    const T* pb = bias.data();
    T* po = out.data();
    for (int b = 0; b < B; ++b)
        for (int ho = 0; ho < Ho; ++ho)
            for (int wo = 0; wo < Wo; ++wo) {
                T* orow = po + ((static_cast<std::size_t>(b) * Ho + ho) * Wo + wo) * cout;
                std::memcpy(orow, pb, sizeof(T) * static_cast<std::size_t>(cout));
                for (int ki = 0; ki < spec.kernel_h; ++ki) {
                    const int hi = ho * spec.stride - spec.padding + ki * spec.dilation;
                    if (hi < 0 || hi >= H) continue;
                    for (int kj = 0; kj < spec.kernel_w; ++kj) {
                        const int wi = wo * spec.stride - spec.padding + kj * spec.dilation;
                        if (wi < 0 || wi >= W) continue;
                        const T* xrow =
                            px + ((static_cast<std::size_t>(b) * H + hi) * W + wi) * C;
                        const T* wrow =
                            pw + (static_cast<std::size_t>(ki) * spec.kernel_w + kj) * cin_pg *
                                     cout;
                        for (int g = 0; g < spec.groups; ++g)
                            for (int ci = 0; ci < cin_pg; ++ci) {
                                const T xv = xrow[g * cin_pg + ci];
                                const T* wc = wrow + static_cast<std::size_t>(ci) * cout +
                                              g * cout_pg;
                                T* oc = orow + g * cout_pg;
                                for (int co = 0; co < cout_pg; ++co) oc[co] += xv * wc[co];
                            }
                    }
                }
            }

    ops::attach_op(out, "conv2d", {x, weight, bias}, [spec, B, H, W, C, Ho, Wo, cin_pg, cout,
                                                      cout_pg](Node<T>& nd) {
        const T* g = nd.out_grad->data();
        Tensor<T>& tx = nd.inputs[0];
        Tensor<T>& tw = nd.inputs[1];
        Tensor<T>& tb = nd.inputs[2];
        if (tb.requires_grad()) {
            T* gb = tb.grad().data();
            const std::size_t pixels = static_cast<std::size_t>(B) * Ho * Wo;
            for (std::size_t pix = 0; pix < pixels; ++pix)
                for (int co = 0; co < cout; ++co) gb[co] += g[pix * cout + co];
        }
        const bool need_x = tx.requires_grad();
        const bool need_w = tw.requires_grad();
        if (!need_x && !need_w) return;
        const T* px = tx.data();
        const T* pw = tw.data();
        T* gx = need_x ? tx.grad().data() : nullptr;
        T* gw = need_w ? tw.grad().data() : nullptr;
        for (int b = 0; b < B; ++b)
            for (int ho = 0; ho < Ho; ++ho)
                for (int wo = 0; wo < Wo; ++wo) {
                    const T* grow =
                        g + ((static_cast<std::size_t>(b) * Ho + ho) * Wo + wo) * cout;
                    for (int ki = 0; ki < spec.kernel_h; ++ki) {
                        const int hi = ho * spec.stride - spec.padding + ki * spec.dilation;
                        if (hi < 0 || hi >= H) continue;
                        for (int kj = 0; kj < spec.kernel_w; ++kj) {
                            const int wi = wo * spec.stride - spec.padding + kj * spec.dilation;
                            if (wi < 0 || wi >= W) continue;
                            const std::size_t xoff =
                                ((static_cast<std::size_t>(b) * H + hi) * W + wi) * C;
                            const std::size_t woff =
                                (static_cast<std::size_t>(ki) * spec.kernel_w + kj) * cin_pg *
                                cout;
                            for (int gi = 0; gi < spec.groups; ++gi)
                                for (int ci = 0; ci < cin_pg; ++ci) {
                                    const std::size_t xcur = xoff + gi * cin_pg + ci;
                                    const std::size_t wcur =
                                        woff + static_cast<std::size_t>(ci) * cout +
                                        gi * cout_pg;
                                    const T* gc = grow + gi * cout_pg;
                                    if (need_w) {
                                        const T xv = px[xcur];
                                        for (int co = 0; co < cout_pg; ++co)
                                            gw[wcur + co] += xv * gc[co];
                                    }
                                    if (need_x) {
                                        T acc = T(0);
                                        for (int co = 0; co < cout_pg; ++co)
                                            acc += pw[wcur + co] * gc[co];
                                        gx[xcur] += acc;
                                    }
                                }
                        }
                    }
                }
    });
    return out;
}

namespace {

struct Axis {
    std::vector<int> lo, hi;
    std::vector<double> frac;
};

Axis resample_axis(int in, int out) {
    Axis a;
    a.lo.resize(static_cast<std::size_t>(out));
    a.hi.resize(static_cast<std::size_t>(out));
    a.frac.resize(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double s = (o + 0.5) * scale - 0.5;
        if (s < 0) s = 0;
        const int lo = static_cast<int>(s);
        a.lo[static_cast<std::size_t>(o)] = lo;
        a.hi[static_cast<std::size_t>(o)] = std::min(lo + 1, in - 1);
        a.frac[static_cast<std::size_t>(o)] = s - lo;
    }
    return a;
}

}  // namespace

template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
    if (x.rank() != 4)
        throw ShapeError("resize_bilinear: want [B,H,W,C], got " + shape_str(x.shape()));
    if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: non-positive output size");
    const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    auto ay = std::make_shared<Axis>(resample_axis(H, out_h));
    auto ax = std::make_shared<Axis>(resample_axis(W, out_w));

    Tensor<T> out = Tensor<T>::zeros({B, out_h, out_w, C});
    const T* px = x.data();
    T* po = out.data();
    for (int b = 0; b < B; ++b)
        for (int oy = 0; oy < out_h; ++oy) {
            const int y0 = ay->lo[static_cast<std::size_t>(oy)];
            const int y1 = ay->hi[static_cast<std::size_t>(oy)];
            const T fy = static_cast<T>(ay->frac[static_cast<std::size_t>(oy)]);
            for (int ox = 0; ox < out_w; ++ox) {
                const int x0 = ax->lo[static_cast<std::size_t>(ox)];
                const int x1 = ax->hi[static_cast<std::size_t>(ox)];
                const T fx = static_cast<T>(ax->frac[static_cast<std::size_t>(ox)]);
                const T* p00 = px + ((static_cast<std::size_t>(b) * H + y0) * W + x0) * C;
                const T* p01 = px + ((static_cast<std::size_t>(b) * H + y0) * W + x1) * C;
                const T* p10 = px + ((static_cast<std::size_t>(b) * H + y1) * W + x0) * C;
                const T* p11 = px + ((static_cast<std::size_t>(b) * H + y1) * W + x1) * C;
                T* orow =
                    po + ((static_cast<std::size_t>(b) * out_h + oy) * out_w + ox) * C;
                for (int c = 0; c < C; ++c)
                    orow[c] = (T(1) - fy) * ((T(1) - fx) * p00[c] + fx * p01[c]) +
                              fy * ((T(1) - fx) * p10[c] + fx * p11[c]);
            }
        }

    ops::attach_op(out, "resize_bilinear", {x}, [ay, ax, B, H, W, C, out_h, out_w](Node<T>& nd) {
        const T* g = nd.out_grad->data();
        T* gx = nd.inputs[0].grad().data();
        for (int b = 0; b < B; ++b)
            for (int oy = 0; oy < out_h; ++oy) {
                const int y0 = ay->lo[static_cast<std::size_t>(oy)];
                const int y1 = ay->hi[static_cast<std::size_t>(oy)];
                const T fy = static_cast<T>(ay->frac[static_cast<std::size_t>(oy)]);
                for (int ox = 0; ox < out_w; ++ox) {
                    const int x0 = ax->lo[static_cast<std::size_t>(ox)];
                    const int x1 = ax->hi[static_cast<std::size_t>(ox)];
                    const T fx = static_cast<T>(ax->frac[static_cast<std::size_t>(ox)]);
                    const T* grow =
                        g + ((static_cast<std::size_t>(b) * out_h + oy) * out_w + ox) * C;
                    T* g00 = gx + ((static_cast<std::size_t>(b) * H + y0) * W + x0) * C;
                    T* g01 = gx + ((static_cast<std::size_t>(b) * H + y0) * W + x1) * C;
                    T* g10 = gx + ((static_cast<std::size_t>(b) * H + y1) * W + x0) * C;
                    T* g11 = gx + ((static_cast<std::size_t>(b) * H + y1) * W + x1) * C;
                    for (int c = 0; c < C; ++c) {
                        const T gv = grow[c];
                        g00[c] += (T(1) - fy) * (T(1) - fx) * gv;
                        g01[c] += (T(1) - fy) * fx * gv;
                        g10[c] += fy * (T(1) - fx) * gv;
                        g11[c] += fy * fx * gv;
                    }
                }
            }
    });
    return out;
}

template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int factor) {
    if (factor < 1) throw ContractError("upsample_bilinear: factor must be >= 1");
    if (factor == 1) return x;
    return resize_bilinear(x, x.dim(1) * factor, x.dim(2) * factor);
}

template <class T>
Tensor<T> activation(const Tensor<T>& x, Act kind) {
    switch (kind) {
        case Act::relu: return ops::relu(x);
        case Act::gelu: return ops::gelu(x);
        case Act::sigmoid: return ops::sigmoid(x);
    }
    throw ContractError("activation: unknown kind");
}

template <class T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, bool training) {
    const int C = x.dim(x.rank() - 1);
    if (!shape_eq(gamma.shape(), Shape{C}))
        throw ShapeError("batch_norm: " + std::to_string(C) + " channels vs affine " +
                         shape_str(gamma.shape()));
    const std::size_t Cs = static_cast<std::size_t>(C);
    const std::size_t rows = x.size() / Cs;

    if (!training) {
        std::vector<T> sc(Cs), sh(Cs);
        for (std::size_t c = 0; c < Cs; ++c) {
            sc[c] = gamma.values()[c] / std::sqrt(running_var.values()[c] + eps);
            sh[c] = beta.values()[c] - running_mean.values()[c] * sc[c];
        }
        auto scale_t = Tensor<T>::from({C}, std::move(sc));
        auto shift_t = Tensor<T>::from({C}, std::move(sh));
        return ops::add_suffix(ops::mul_suffix(x, scale_t), shift_t);
    }

    if (x.rank() < 2 || x.dim(0) < 2)
        throw ContractError("batch_norm: train mode needs batch >= 2, got " +
                            shape_str(x.shape()));

    std::vector<T> mean(Cs), var(Cs);
    const T* px = x.data();
    for (std::size_t c = 0; c < Cs; ++c) {
        long double m = 0.0L;
        for (std::size_t r = 0; r < rows; ++r) m += static_cast<long double>(px[r * Cs + c]);
        m /= static_cast<long double>(rows);
        long double v = 0.0L;
        for (std::size_t r = 0; r < rows; ++r) {
            const long double d = static_cast<long double>(px[r * Cs + c]) - m;
            v += d * d;
        }
        mean[c] = static_cast<T>(m);
        var[c] = static_cast<T>(v / static_cast<long double>(rows));
    }

    // Fold batch statistics into the running buffers (outside the graph);
    // the running variance gets the unbiased correction.
    const T unbias = rows > 1 ? static_cast<T>(rows) / static_cast<T>(rows - 1) : T(1);
    for (std::size_t c = 0; c < Cs; ++c) {
        running_mean.values()[c] =
            (T(1) - momentum) * running_mean.values()[c] + momentum * mean[c];
        running_var.values()[c] =
            (T(1) - momentum) * running_var.values()[c] + momentum * var[c] * unbias;
    }

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    auto inv_std = std::make_shared<std::vector<T>>(Cs);
    const T* pg = gamma.data();
    const T* pb = beta.data();
    T* po = out.data();
    for (std::size_t c = 0; c < Cs; ++c)
        (*inv_std)[c] = T(1) / std::sqrt(var[c] + eps);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < Cs; ++c) {
            const T h = (px[r * Cs + c] - mean[c]) * (*inv_std)[c];
            (*xhat)[r * Cs + c] = h;
            po[r * Cs + c] = pg[c] * h + pb[c];
        }

    ops::attach_op(out, "batch_norm", {x, gamma, beta}, [xhat, inv_std, rows, Cs](Node<T>& nd) {
        const T* g = nd.out_grad->data();
        const T* h = xhat->data();
        const T* pg = nd.inputs[1].data();
        if (nd.inputs[1].requires_grad() || nd.inputs[2].requires_grad()) {
            T* ggamma = nd.inputs[1].requires_grad() ? nd.inputs[1].grad().data() : nullptr;
            T* gbeta = nd.inputs[2].requires_grad() ? nd.inputs[2].grad().data() : nullptr;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < Cs; ++c) {
                    const T gv = g[r * Cs + c];
                    if (ggamma) ggamma[c] += gv * h[r * Cs + c];
                    if (gbeta) gbeta[c] += gv;
                }
        }
        if (nd.inputs[0].requires_grad()) {
            T* gx = nd.inputs[0].grad().data();
            std::vector<long double> s1(Cs, 0.0L), s2(Cs, 0.0L);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < Cs; ++c) {
                    const long double gh = static_cast<long double>(g[r * Cs + c]) *
                                           static_cast<long double>(pg[c]);
                    s1[c] += gh;
                    s2[c] += gh * static_cast<long double>(h[r * Cs + c]);
                }
            const long double R = static_cast<long double>(rows);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < Cs; ++c) {
                    const T gh = g[r * Cs + c] * pg[c];
                    gx[r * Cs + c] += (*inv_std)[c] * (gh - static_cast<T>(s1[c] / R) -
                                                       h[r * Cs + c] * static_cast<T>(s2[c] / R));
                }
        }
    });
    return out;
}

template <class T>
Linear<T> make_linear(ParamStore<T>& store, const std::string& name, int in, int out, Rng& rng,
                      double init_std) {
    Linear<T> l;
    l.weight = store.add_param(
        name + "/weight",
        Tensor<T>::from({in, out},
                        rng.trunc_normal_vec<T>(static_cast<std::size_t>(in) * out, init_std)));
    l.bias = store.add_param(name + "/bias",
                             Tensor<T>::zeros({out}));
    return l;
}

template <class T>
LayerNorm<T> make_layer_norm(ParamStore<T>& store, const std::string& name, int channels) {
    LayerNorm<T> ln;
    ln.gamma = store.add_param(name + "/gamma", Tensor<T>::full({channels}, T(1)));
    ln.beta = store.add_param(name + "/beta", Tensor<T>::zeros({channels}));
    return ln;
}

template <class T>
BatchNorm<T> make_batch_norm(ParamStore<T>& store, const std::string& name, int channels) {
    BatchNorm<T> bn;
    bn.gamma = store.add_param(name + "/gamma", Tensor<T>::full({channels}, T(1)));
    bn.beta = store.add_param(name + "/beta", Tensor<T>::zeros({channels}));
    bn.running_mean = store.add_buffer(name + "/running_mean", Tensor<T>::zeros({channels}));
    bn.running_var = store.add_buffer(name + "/running_var", Tensor<T>::full({channels}, T(1)));
    return bn;
}

template <class T>
Conv2d<T> make_conv2d(ParamStore<T>& store, const std::string& name, Conv2dSpec spec, Rng& rng) {
    spec.validate();
    const int cin_pg = spec.in_channels / spec.groups;
    const std::size_t n = static_cast<std::size_t>(spec.kernel_h) * spec.kernel_w * cin_pg *
                          spec.out_channels;
    const double fan_in = static_cast<double>(spec.kernel_h) * spec.kernel_w * cin_pg;
    const double std_he = std::sqrt(2.0 / fan_in);
    std::vector<T> w(n);
    for (auto& v : w) v = static_cast<T>(rng.normal() * std_he);
    Conv2d<T> c;
    c.spec = spec;
    c.weight = store.add_param(
        name + "/weight",
        Tensor<T>::from({spec.kernel_h, spec.kernel_w, cin_pg, spec.out_channels}, std::move(w)));
    c.bias = store.add_param(name + "/bias", Tensor<T>::zeros({spec.out_channels}));
    return c;
}

#define LMDET_INSTANTIATE_LAYERS(T)                                                           \
    template Tensor<T> conv2d(const Tensor<T>&, const Conv2dSpec&, const Tensor<T>&,          \
                              const Tensor<T>&);                                              \
    template Tensor<T> resize_bilinear(const Tensor<T>&, int, int);                           \
    template Tensor<T> upsample_bilinear(const Tensor<T>&, int);                              \
    template Tensor<T> activation(const Tensor<T>&, Act);                                     \
    template struct Linear<T>;                                                                \
    template struct LayerNorm<T>;                                                             \
    template struct BatchNorm<T>;                                                             \
    template struct Conv2d<T>;                                                                \
    template Linear<T> make_linear(ParamStore<T>&, const std::string&, int, int, Rng&,        \
                                   double);                                                   \
    template LayerNorm<T> make_layer_norm(ParamStore<T>&, const std::string&, int);           \
    template BatchNorm<T> make_batch_norm(ParamStore<T>&, const std::string&, int);           \
    template Conv2d<T> make_conv2d(ParamStore<T>&, const std::string&, Conv2dSpec, Rng&);

LMDET_INSTANTIATE_LAYERS(float)
LMDET_INSTANTIATE_LAYERS(double)

#undef LMDET_INSTANTIATE_LAYERS

}  // namespace lmdet
