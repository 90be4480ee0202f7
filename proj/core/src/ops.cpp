#include "lmdet/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>

namespace lmdet::ops {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using CMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
bool any_requires_grad(const std::vector<Tensor<T>>& ts) {
    for (const auto& t : ts)
        if (t.requires_grad()) return true;
    return false;
}

template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!shape_eq(a.shape(), b.shape()))
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

template <class T>
void check_suffix(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    bool ok = bs.size() <= as.size();
    if (ok)
        for (std::size_t i = 0; i < bs.size(); ++i)
            ok = ok && as[as.size() - bs.size() + i] == bs[i];
    if (!ok)
        throw ShapeError(std::string(op) + ": " + shape_str(bs) + " is not a suffix of " +
                         shape_str(as));
}

}  // namespace

template <class T>
void attach_op(Tensor<T>& out, const char* op,
               std::type_identity_t<std::vector<Tensor<T>>> inputs,
               std::type_identity_t<std::function<void(Node<T>&)>> backward) {
    if (!grad_recording_enabled() || !any_requires_grad(inputs)) return;
    auto node = std::make_shared<Node<T>>();
    node->op = op;
    node->inputs = std::move(inputs);
    node->out_shape = out.shape();
    node->out_grad = out.grad_storage();  // shared with downstream consumers
    node->backward = std::move(backward);
    out.attach_node(std::move(node));
}

// ---- elementwise ----

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    attach_op(out, "add", {a, b}, [](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        for (int k = 0; k < 2; ++k) {
            if (!nd.inputs[k].requires_grad()) continue;
            std::vector<T>& gi = nd.inputs[k].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    attach_op(out, "sub", {a, b}, [](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        if (nd.inputs[0].requires_grad()) {
            std::vector<T>& ga = nd.inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (nd.inputs[1].requires_grad()) {
            std::vector<T>& gb = nd.inputs[1].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    attach_op(out, "mul", {a, b}, [](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        const T* pa = nd.inputs[0].data();
        const T* pb = nd.inputs[1].data();
        if (nd.inputs[0].requires_grad()) {
            std::vector<T>& ga = nd.inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[i];
        }
        if (nd.inputs[1].requires_grad()) {
            std::vector<T>& gb = nd.inputs[1].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * pa[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> add_suffix(const Tensor<T>& a, const Tensor<T>& b) {
    check_suffix(a, b, "add_suffix");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::size_t n = a.size();
    const std::size_t sn = b.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i % sn];
    attach_op(out, "add_suffix", {a, b}, [sn](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        if (nd.inputs[0].requires_grad()) {
            std::vector<T>& ga = nd.inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (nd.inputs[1].requires_grad()) {
            std::vector<T>& gb = nd.inputs[1].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % sn] += g[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> mul_suffix(const Tensor<T>& a, const Tensor<T>& b) {
    check_suffix(a, b, "mul_suffix");
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::size_t n = a.size();
    const std::size_t sn = b.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i % sn];
    attach_op(out, "mul_suffix", {a, b}, [sn](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        const T* pa = nd.inputs[0].data();
        const T* pb = nd.inputs[1].data();
        if (nd.inputs[0].requires_grad()) {
            std::vector<T>& ga = nd.inputs[0].grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * pb[i % sn];
        }
        if (nd.inputs[1].requires_grad()) {
            std::vector<T>& gb = nd.inputs[1].grad();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i % sn] += g[i] * pa[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = c * pa[i];
    attach_op(out, "scale", {a}, [c](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        std::vector<T>& ga = nd.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
    return out;
}

// ---- matmul ----

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
    const int ar = a.rank();
    const int br = b.rank();
    if (ar < 2 || br < 2)
        throw ShapeError("matmul: ranks must be >= 2, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const std::int64_t m = a.dim(ar - 2);
    const std::int64_t k = a.dim(ar - 1);
    const std::int64_t bk = transpose_b ? b.dim(br - 1) : b.dim(br - 2);
    const std::int64_t n = transpose_b ? b.dim(br - 2) : b.dim(br - 1);
    if (bk != k)
        throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
    if (br != 2) {
        bool ok = br == ar;
        if (ok)
            for (int i = 0; i < ar - 2; ++i) ok = ok && a.dim(i) == b.dim(i);
        if (!ok)
            throw ShapeError("matmul: batch dims differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }

    Shape out_shape = a.shape();
    out_shape.back() = static_cast<int>(n);
    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));

    const std::int64_t batch = static_cast<std::int64_t>(a.size()) / (m * k);
    const std::int64_t b_stride = br == 2 ? 0 : k * n;

    for (std::int64_t bi = 0; bi < batch; ++bi) {
        CMatMap<T> A(a.data() + bi * m * k, m, k);
        MatMap<T> C(out.data() + bi * m * n, m, n);
        const T* bp = b.data() + bi * b_stride;
        if (transpose_b) {
            CMatMap<T> B(bp, n, k);
            C.noalias() = A * B.transpose();
        } else {
            CMatMap<T> B(bp, k, n);
            C.noalias() = A * B;
        }
    }

    attach_op(out, "matmul", {a, b}, [m, k, n, batch, b_stride, transpose_b](Node<T>& nd) {
        const T* g = nd.out_grad->data();
        Tensor<T>& ta = nd.inputs[0];
        Tensor<T>& tb = nd.inputs[1];
        if (ta.requires_grad()) {
            T* ga = ta.grad().data();
            for (std::int64_t bi = 0; bi < batch; ++bi) {
                CMatMap<T> G(g + bi * m * n, m, n);
                MatMap<T> GA(ga + bi * m * k, m, k);
                const T* bp = tb.data() + bi * b_stride;
                if (transpose_b) {
                    CMatMap<T> B(bp, n, k);
                    GA.noalias() += G * B;
                } else {
                    CMatMap<T> B(bp, k, n);
                    GA.noalias() += G * B.transpose();
                }
            }
        }
        if (tb.requires_grad()) {
            T* gb = tb.grad().data();
            // b_stride == 0 (shared rank-2 b) accumulates over batches in a
            // fixed sequential order, keeping runs bit-reproducible.
            for (std::int64_t bi = 0; bi < batch; ++bi) {
                CMatMap<T> G(g + bi * m * n, m, n);
                CMatMap<T> A(ta.data() + bi * m * k, m, k);
                T* gbp = gb + bi * b_stride;
                if (transpose_b) {
                    MatMap<T> GB(gbp, n, k);
                    GB.noalias() += G.transpose() * A;
                } else {
                    MatMap<T> GB(gbp, k, n);
                    GB.noalias() += A.transpose() * G;
                }
            }
        }
    });
    return out;
}

// ---- layout ----

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    Tensor<T> out = a.aliased_with_shape(std::move(shape));
    attach_op(out, "reshape", {a}, [](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        std::vector<T>& ga = nd.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return out;
}

template <class T>
Tensor<T> gather_flat(const Tensor<T>& x, std::shared_ptr<const std::vector<std::int64_t>> src,
                      Shape out_shape, const char* opname) {
    if (!src) throw ContractError(std::string(opname) + ": null index");
    if (shape_numel(out_shape) != src->size())
        throw ShapeError(std::string(opname) + ": index count " + std::to_string(src->size()) +
                         " does not fill " + shape_str(out_shape));
    const std::int64_t xn = static_cast<std::int64_t>(x.size());
    for (std::int64_t s : *src)
        if (s < 0 || s >= xn)
            throw ShapeError(std::string(opname) + ": index " + std::to_string(s) +
                             " out of range for " + shape_str(x.shape()));

    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
    const T* px = x.data();
    T* po = out.data();
    const std::vector<std::int64_t>& idx = *src;
    for (std::size_t i = 0; i < idx.size(); ++i) po[i] = px[idx[i]];

    attach_op(out, opname, {x}, [src](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        std::vector<T>& gx = nd.inputs[0].grad();
        const std::vector<std::int64_t>& idx = *src;
        for (std::size_t i = 0; i < idx.size(); ++i) gx[static_cast<std::size_t>(idx[i])] += g[i];
    });
    return out;
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& axes) {
    const int r = a.rank();
    if (static_cast<int>(axes.size()) != r)
        throw ShapeError("permute: got " + std::to_string(axes.size()) + " axes for rank " +
                         std::to_string(r));
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int ax : axes) {
        if (ax < 0 || ax >= r || seen[static_cast<std::size_t>(ax)])
            throw ShapeError("permute: invalid axis order for rank " + std::to_string(r));
        seen[static_cast<std::size_t>(ax)] = true;
    }

    std::vector<std::int64_t> astr(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        astr[static_cast<std::size_t>(i)] =
            astr[static_cast<std::size_t>(i + 1)] * a.dim(i + 1);

    Shape out_shape(static_cast<std::size_t>(r));
    std::vector<std::int64_t> src_stride(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        out_shape[static_cast<std::size_t>(i)] = a.dim(axes[static_cast<std::size_t>(i)]);
        src_stride[static_cast<std::size_t>(i)] = astr[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    }

    auto src = std::make_shared<std::vector<std::int64_t>>(a.size());
    // Odometer walk over the output index space; carries update the source
    // offset incrementally instead of a div/mod chain per element.
    std::vector<std::int64_t> coord(static_cast<std::size_t>(r), 0);
    std::int64_t off = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        (*src)[i] = off;
        for (int d = r - 1; d >= 0; --d) {
            auto du = static_cast<std::size_t>(d);
            ++coord[du];
            off += src_stride[du];
            if (coord[du] < out_shape[du]) break;
            off -= src_stride[du] * coord[du];
            coord[du] = 0;
        }
    }
    return gather_flat(a, std::move(src), std::move(out_shape), "permute");
}

template <class T>
Tensor<T> concat_last(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank() || a.rank() < 1)
        throw ShapeError("concat_last: rank mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const int r = a.rank();
    for (int i = 0; i < r - 1; ++i)
        if (a.dim(i) != b.dim(i))
            throw ShapeError("concat_last: leading dims differ, " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    const std::size_t al = static_cast<std::size_t>(a.dim(r - 1));
    const std::size_t bl = static_cast<std::size_t>(b.dim(r - 1));
    const std::size_t rows = a.size() / al;

    Shape out_shape = a.shape();
    out_shape.back() = static_cast<int>(al + bl);
    Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
    const std::size_t ol = al + bl;
    for (std::size_t row = 0; row < rows; ++row) {
        std::memcpy(out.data() + row * ol, a.data() + row * al, al * sizeof(T));
        std::memcpy(out.data() + row * ol + al, b.data() + row * bl, bl * sizeof(T));
    }
    attach_op(out, "concat_last", {a, b}, [rows, al, bl, ol](Node<T>& nd) {
        const T* g = nd.out_grad->data();
        if (nd.inputs[0].requires_grad()) {
            T* ga = nd.inputs[0].grad().data();
            for (std::size_t row = 0; row < rows; ++row)
                for (std::size_t i = 0; i < al; ++i) ga[row * al + i] += g[row * ol + i];
        }
        if (nd.inputs[1].requires_grad()) {
            T* gb = nd.inputs[1].grad().data();
            for (std::size_t row = 0; row < rows; ++row)
                for (std::size_t i = 0; i < bl; ++i) gb[row * bl + i] += g[row * ol + al + i];
        }
    });
    return out;
}

template <class T>
Tensor<T> space_to_depth(const Tensor<T>& a, int factor) {
    if (a.rank() != 4)
        throw ShapeError("space_to_depth: want [B,H,W,C], got " + shape_str(a.shape()));
    const int B = a.dim(0), H = a.dim(1), W = a.dim(2), C = a.dim(3);
    if (factor < 1 || H % factor != 0 || W % factor != 0)
        throw ShapeError("space_to_depth: factor " + std::to_string(factor) +
                         " does not divide " + shape_str(a.shape()));
    const int Ho = H / factor, Wo = W / factor;
    Shape out_shape{B, Ho, Wo, factor * factor * C};

    auto src = std::make_shared<std::vector<std::int64_t>>(a.size());
    std::size_t i = 0;
    for (int b = 0; b < B; ++b)
        for (int ho = 0; ho < Ho; ++ho)
            for (int wo = 0; wo < Wo; ++wo)
                for (int fi = 0; fi < factor; ++fi)
                    for (int fj = 0; fj < factor; ++fj)
                        for (int c = 0; c < C; ++c)
                            (*src)[i++] =
                                ((static_cast<std::int64_t>(b) * H + ho * factor + fi) * W +
                                 wo * factor + fj) *
                                    C +
                                c;
    return gather_flat(a, std::move(src), std::move(out_shape), "space_to_depth");
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::shared_ptr<const std::vector<int>> index) {
    if (!index) throw ContractError("gather_rows: null index");
    if (table.rank() != 2)
        throw ShapeError("gather_rows: table must be rank 2, got " + shape_str(table.shape()));
    const int R = table.dim(0), C = table.dim(1);
    for (int ix : *index)
        if (ix < 0 || ix >= R)
            throw ShapeError("gather_rows: row " + std::to_string(ix) + " out of range for " +
                             shape_str(table.shape()));

    const std::size_t N = index->size();
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(N), C});
    const std::size_t cs = static_cast<std::size_t>(C);
    for (std::size_t i = 0; i < N; ++i)
        std::memcpy(out.data() + i * cs, table.data() + static_cast<std::size_t>((*index)[i]) * cs,
                    cs * sizeof(T));

    attach_op(out, "gather_rows", {table}, [index, cs](Node<T>& nd) {
        const T* g = nd.out_grad->data();
        T* gt = nd.inputs[0].grad().data();
        const std::vector<int>& idx = *index;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            T* dst = gt + static_cast<std::size_t>(idx[i]) * cs;
            const T* srcg = g + i * cs;
            for (std::size_t c = 0; c < cs; ++c) dst[c] += srcg[c];
        }
    });
    return out;
}

// ---- activations ----

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
    attach_op(out, "relu", {a}, [](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        const T* pa = nd.inputs[0].data();
        std::vector<T>& ga = nd.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (pa[i] > T(0)) ga[i] += g[i];
    });
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = pa[i];
        if (x >= T(0)) {
            po[i] = T(1) / (T(1) + std::exp(-x));
        } else {
            const T e = std::exp(x);
            po[i] = e / (T(1) + e);
        }
    }
    auto yvals = out.data_storage();
    attach_op(out, "sigmoid", {a}, [yvals](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        const std::vector<T>& y = *yvals;
        std::vector<T>& ga = nd.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
    });
    return out;
}

template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
    // tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    constexpr T kAlpha = T(0.7978845608028654);
    constexpr T kBeta = T(0.044715);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = pa[i];
        const T t = std::tanh(kAlpha * (x + kBeta * x * x * x));
        po[i] = T(0.5) * x * (T(1) + t);
    }
    attach_op(out, "gelu", {a}, [](Node<T>& nd) {
        const std::vector<T>& g = *nd.out_grad;
        const T* pa = nd.inputs[0].data();
        std::vector<T>& ga = nd.inputs[0].grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T x = pa[i];
            const T t = std::tanh(kAlpha * (x + kBeta * x * x * x));
            const T du = kAlpha * (T(1) + T(3) * kBeta * x * x);
            ga[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du);
        }
    });
    return out;
}

template <class T>
Tensor<T> softmax_last(const Tensor<T>& a) {
    if (a.rank() < 1) throw ShapeError("softmax_last: rank 0 input");
    const std::size_t L = static_cast<std::size_t>(a.dim(a.rank() - 1));
    const std::size_t rows = a.size() / L;
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const T* pa = a.data();
    T* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = pa + r * L;
        T* y = po + r * L;
        T m = x[0];
        for (std::size_t i = 1; i < L; ++i) m = std::max(m, x[i]);
        long double s = 0.0L;
        for (std::size_t i = 0; i < L; ++i) {
            y[i] = std::exp(x[i] - m);
            s += static_cast<long double>(y[i]);
        }
        const T inv = static_cast<T>(1.0L / s);
        for (std::size_t i = 0; i < L; ++i) y[i] *= inv;
    }
    auto yvals = out.data_storage();
    attach_op(out, "softmax_last", {a}, [yvals, L, rows](Node<T>& nd) {
        const T* g = nd.out_grad->data();
        const T* y = yvals->data();
        T* ga = nd.inputs[0].grad().data();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g + r * L;
            const T* yr = y + r * L;
            T* gar = ga + r * L;
            long double dot = 0.0L;
            for (std::size_t i = 0; i < L; ++i)
                dot += static_cast<long double>(gr[i]) * static_cast<long double>(yr[i]);
            const T d = static_cast<T>(dot);
            for (std::size_t i = 0; i < L; ++i) gar[i] += yr[i] * (gr[i] - d);
        }
    });
    return out;
}

// ---- reductions ----

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    long double acc = 0.0L;
    const T* pa = a.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<long double>(pa[i]);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    attach_op(out, "sum_all", {a}, [](Node<T>& nd) {
        const T g = (*nd.out_grad)[0];
        std::vector<T>& ga = nd.inputs[0].grad();
        for (auto& v : ga) v += g;
    });
    return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    long double acc = 0.0L;
    const T* pa = a.data();
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<long double>(pa[i]);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<long double>(n)));
    attach_op(out, "mean_all", {a}, [n](Node<T>& nd) {
        const T g = (*nd.out_grad)[0] / static_cast<T>(n);
        std::vector<T>& ga = nd.inputs[0].grad();
        for (auto& v : ga) v += g;
    });
    return out;
}

// ---- normalization ----

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (x.rank() < 1) throw ShapeError("layer_norm: rank 0 input");
    const int C = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        throw ShapeError("layer_norm: affine shapes " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match channels of " +
                         shape_str(x.shape()));

    const std::size_t L = static_cast<std::size_t>(C);
    const std::size_t rows = x.size() / L;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<T>>(x.size());
    auto inv_std = std::make_shared<std::vector<T>>(rows);

    const T* px = x.data();
    const T* pg = gamma.data();
    const T* pb = beta.data();
    T* po = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = px + r * L;
        long double mean = 0.0L;
        for (std::size_t i = 0; i < L; ++i) mean += static_cast<long double>(xr[i]);
        mean /= static_cast<long double>(L);
        long double var = 0.0L;
        for (std::size_t i = 0; i < L; ++i) {
            const long double d = static_cast<long double>(xr[i]) - mean;
            var += d * d;
        }
        var /= static_cast<long double>(L);
        const T mu = static_cast<T>(mean);
        const T inv = T(1) / std::sqrt(static_cast<T>(var) + eps);
        (*inv_std)[r] = inv;
        T* hr = xhat->data() + r * L;
        T* yr = po + r * L;
        for (std::size_t i = 0; i < L; ++i) {
            hr[i] = (xr[i] - mu) * inv;
            yr[i] = pg[i] * hr[i] + pb[i];
        }
    }

    attach_op(out, "layer_norm", {x, gamma, beta}, [xhat, inv_std, L, rows](Node<T>& nd) {
        const T* g = nd.out_grad->data();
        const T* h = xhat->data();
        const T* pg = nd.inputs[1].data();
        if (nd.inputs[1].requires_grad() || nd.inputs[2].requires_grad()) {
            T* ggamma = nd.inputs[1].requires_grad() ? nd.inputs[1].grad().data() : nullptr;
            T* gbeta = nd.inputs[2].requires_grad() ? nd.inputs[2].grad().data() : nullptr;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t i = 0; i < L; ++i) {
                    const T gi = g[r * L + i];
                    if (ggamma) ggamma[i] += gi * h[r * L + i];
                    if (gbeta) gbeta[i] += gi;
                }
        }
        if (nd.inputs[0].requires_grad()) {
            T* gx = nd.inputs[0].grad().data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* gr = g + r * L;
                const T* hr = h + r * L;
                long double m1 = 0.0L, m2 = 0.0L;
                for (std::size_t i = 0; i < L; ++i) {
                    const long double gh = static_cast<long double>(gr[i]) *
                                           static_cast<long double>(pg[i]);
                    m1 += gh;
                    m2 += gh * static_cast<long double>(hr[i]);
                }
                const T a1 = static_cast<T>(m1 / static_cast<long double>(L));
                const T a2 = static_cast<T>(m2 / static_cast<long double>(L));
                const T inv = (*inv_std)[r];
                for (std::size_t i = 0; i < L; ++i)
                    gx[r * L + i] += inv * (gr[i] * pg[i] - a1 - hr[i] * a2);
            }
        }
    });
    return out;
}

// ---- explicit instantiations ----

#define LMDET_INSTANTIATE_OPS(T)                                                              \
    template void attach_op<T>(Tensor<T>&, const char*, std::vector<Tensor<T>>,               \
                               std::function<void(Node<T>&)>);                                \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> add_suffix(const Tensor<T>&, const Tensor<T>&);                        \
    template Tensor<T> mul_suffix(const Tensor<T>&, const Tensor<T>&);                        \
    template Tensor<T> scale(const Tensor<T>&, T);                                            \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                      \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                      \
    template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                    \
    template Tensor<T> concat_last(const Tensor<T>&, const Tensor<T>&);                       \
    template Tensor<T> space_to_depth(const Tensor<T>&, int);                                 \
    template Tensor<T> gather_rows(const Tensor<T>&, std::shared_ptr<const std::vector<int>>); \
    template Tensor<T> gather_flat(const Tensor<T>&,                                          \
                                   std::shared_ptr<const std::vector<std::int64_t>>, Shape,   \
                                   const char*);                                              \
    template Tensor<T> relu(const Tensor<T>&);                                                \
    template Tensor<T> sigmoid(const Tensor<T>&);                                             \
    template Tensor<T> gelu(const Tensor<T>&);                                                \
    template Tensor<T> softmax_last(const Tensor<T>&);                                        \
    template Tensor<T> sum_all(const Tensor<T>&);                                             \
    template Tensor<T> mean_all(const Tensor<T>&);                                            \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);

LMDET_INSTANTIATE_OPS(float)
LMDET_INSTANTIATE_OPS(double)

#undef LMDET_INSTANTIATE_OPS

}  // namespace lmdet::ops
