#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "lmdet/grad_check.hpp"
#include "lmdet/layers.hpp"
#include "lmdet/param_store.hpp"
#include "lmdet/rng.hpp"
#include "lmdet/tensor.hpp"

using namespace lmdet;
namespace op = lmdet::ops;

namespace {

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return Tensor<T>::from(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> random_param(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    auto t = random_tensor<T>(std::move(shape), rng, lo, hi);
    t.set_requires_grad(true);
    return t;
}

// Direct per-output-element accumulation, written independently of the
// layer's tap-major loop. Long double accumulation keeps the oracle itself
// out of the error budget.
template <class T>
std::vector<T> conv_oracle(const Tensor<T>& x, const Conv2dSpec& s, const Tensor<T>& w,
                           const Tensor<T>& b) {
    const int B = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int Ho = s.out_extent(H, s.kernel_h);
    const int Wo = s.out_extent(W, s.kernel_w);
    const int cin_pg = s.in_channels / s.groups;
    const int cout_pg = s.out_channels / s.groups;
    std::vector<T> out(static_cast<std::size_t>(B) * Ho * Wo * s.out_channels);
    for (int bb = 0; bb < B; ++bb)
        for (int ho = 0; ho < Ho; ++ho)
            for (int wo = 0; wo < Wo; ++wo)
                for (int co = 0; co < s.out_channels; ++co) {
                    const int g = co / cout_pg;
                    long double acc = static_cast<long double>(b.values()[co]);
                    for (int ki = 0; ki < s.kernel_h; ++ki)
                        for (int kj = 0; kj < s.kernel_w; ++kj) {
                            const int hi = ho * s.stride - s.padding + ki * s.dilation;
                            const int wi = wo * s.stride - s.padding + kj * s.dilation;
                            if (hi < 0 || hi >= H || wi < 0 || wi >= W) continue;
                            for (int ci = 0; ci < cin_pg; ++ci) {
                                const T xv =
                                    x.values()[((static_cast<std::size_t>(bb) * H + hi) * W +
                                                wi) *
                                                   s.in_channels +
                                               g * cin_pg + ci];
                                const T wv =
                                    w.values()[((static_cast<std::size_t>(ki) * s.kernel_w +
                                                 kj) *
                                                    cin_pg +
                                                ci) *
                                                   s.out_channels +
                                               co];
                                acc += static_cast<long double>(xv) *
                                       static_cast<long double>(wv);
                            }
                        }
                    out[((static_cast<std::size_t>(bb) * Ho + ho) * Wo + wo) *
                            s.out_channels +
                        co] = static_cast<T>(acc);
                }
    return out;
}

double gelu_ref(double x) {
    return 0.5 * x *
           (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)));
}

}  // namespace

TEST_CASE("conv2d ones kernel counts kernel overlap") {
    Conv2dSpec s{.in_channels = 1, .out_channels = 1, .kernel_h = 3, .kernel_w = 3,
                 .padding = 1};
    auto x = Tensor<double>::full({1, 3, 3, 1}, 1.0);
    auto w = Tensor<double>::full({3, 3, 1, 1}, 1.0);
    auto b = Tensor<double>::zeros({1});
    auto y = conv2d(x, s, w, b);
    REQUIRE(shape_eq(y.shape(), {1, 3, 3, 1}));
    const std::vector<double> want{4, 6, 4, 6, 9, 6, 4, 6, 4};
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(y.values()[i] == want[i]);
}

TEST_CASE("conv2d dilation widens the receptive span") {
    Conv2dSpec s{.in_channels = 1, .out_channels = 1, .kernel_h = 3, .kernel_w = 3,
                 .dilation = 2};
    // Kernel 3 at dilation 2 spans 5 pixels, so a 5x5 input yields one output
    // summing the taps at rows/cols {0,2,4}.
    CHECK(s.out_extent(5, 3) == 1);
    CHECK(s.out_extent(7, 3) == 3);
    std::vector<double> xv(25);
    for (int i = 0; i < 25; ++i) xv[static_cast<std::size_t>(i)] = i;
    auto x = Tensor<double>::from({1, 5, 5, 1}, std::move(xv));
    auto w = Tensor<double>::full({3, 3, 1, 1}, 1.0);
    auto b = Tensor<double>::zeros({1});
    auto y = conv2d(x, s, w, b);
    REQUIRE(shape_eq(y.shape(), {1, 1, 1, 1}));
    double want = 0;
    for (int i : {0, 2, 4})
        for (int j : {0, 2, 4}) want += x.values()[static_cast<std::size_t>(i * 5 + j)];
    CHECK(y.item() == want);
}

TEST_CASE("conv2d matches a direct nested-loop oracle") {
    const std::vector<Conv2dSpec> configs{
        {.in_channels = 3, .out_channels = 5, .kernel_h = 3, .kernel_w = 3, .padding = 1},
        {.in_channels = 6, .out_channels = 4, .kernel_h = 1, .kernel_w = 1},
        {.in_channels = 4, .out_channels = 4, .kernel_h = 3, .kernel_w = 3, .padding = 1,
         .groups = 4},
        {.in_channels = 4, .out_channels = 6, .kernel_h = 3, .kernel_w = 3, .padding = 1,
         .groups = 2},
        {.in_channels = 3, .out_channels = 2, .kernel_h = 3, .kernel_w = 3, .stride = 2,
         .padding = 1},
        {.in_channels = 2, .out_channels = 3, .kernel_h = 3, .kernel_w = 3, .padding = 2,
         .dilation = 2},
        {.in_channels = 2, .out_channels = 2, .kernel_h = 1, .kernel_w = 3, .padding = 1},
    };
    Rng rng(99);
    for (const auto& s : configs) {
        CAPTURE(s.kernel_h);
        CAPTURE(s.groups);
        CAPTURE(s.stride);
        CAPTURE(s.dilation);
        const int cin_pg = s.in_channels / s.groups;
        auto x = random_tensor<double>({2, 7, 6, s.in_channels}, rng);
        auto w = random_tensor<double>({s.kernel_h, s.kernel_w, cin_pg, s.out_channels}, rng);
        auto b = random_tensor<double>({s.out_channels}, rng);
        auto y = conv2d(x, s, w, b);
        auto want = conv_oracle(x, s, w, b);
        REQUIRE(y.size() == want.size());
        for (std::size_t i = 0; i < want.size(); ++i)
            CHECK(y.values()[i] == doctest::Approx(want[i]).epsilon(1e-12));

        auto xf = Tensor<float>::from(x.shape(), std::vector<float>(x.values().begin(),
                                                                    x.values().end()));
        auto wf = Tensor<float>::from(w.shape(), std::vector<float>(w.values().begin(),
                                                                    w.values().end()));
        auto bf = Tensor<float>::from(b.shape(), std::vector<float>(b.values().begin(),
                                                                    b.values().end()));
        auto yf = conv2d(xf, s, wf, bf);
        auto wantf = conv_oracle(xf, s, wf, bf);
        for (std::size_t i = 0; i < wantf.size(); ++i)
            CHECK(yf.values()[i] == doctest::Approx(wantf[i]).epsilon(1e-5));
    }
}

TEST_CASE("conv weight counts: depthwise vs dense") {
    Rng rng(3);
    ParamStore<double> store;
    const int C = 8, k = 3;
    auto dw = make_conv2d(store, "dw",
                          {.in_channels = C, .out_channels = C, .kernel_h = k, .kernel_w = k,
                           .padding = 1, .groups = C},
                          rng);
    CHECK(dw.weight.size() == static_cast<std::size_t>(k * k * C));
    CHECK(dw.bias.size() == static_cast<std::size_t>(C));

    const int cin = 8, cout = 5;
    auto dense = make_conv2d(store, "dense",
                             {.in_channels = cin, .out_channels = cout, .kernel_h = k,
                              .kernel_w = k, .padding = 1},
                             rng);
    CHECK(dense.weight.size() == static_cast<std::size_t>(k * k * cin * cout));
    CHECK(dense.bias.size() == static_cast<std::size_t>(cout));
    CHECK(store.total_param_count() ==
          static_cast<std::size_t>(k * k * C + C + k * k * cin * cout + cout));
}

TEST_CASE("conv2d gradients, general path") {
    Rng rng(11);
    Conv2dSpec s{.in_channels = 4, .out_channels = 4, .kernel_h = 3, .kernel_w = 3,
                 .stride = 2, .padding = 1, .groups = 2};
    auto x = random_param<double>({2, 5, 4, 4}, rng);
    auto w = random_param<double>({3, 3, 2, 4}, rng);
    auto b = random_param<double>({4}, rng);
    auto f = [&]() { return op::mean_all(conv2d(x, s, w, b)); };
    CHECK(grad_check<double>(f, {x, w, b}, 1e-5).max_err < 1e-6);
}

TEST_CASE("conv2d gradients, point-wise path") {
    Rng rng(12);
    Conv2dSpec s{.in_channels = 3, .out_channels = 5, .kernel_h = 1, .kernel_w = 1};
    auto x = random_param<double>({2, 3, 3, 3}, rng);
    auto w = random_param<double>({1, 1, 3, 5}, rng);
    auto b = random_param<double>({5}, rng);
    auto f = [&]() { return op::mean_all(conv2d(x, s, w, b)); };
    CHECK(grad_check<double>(f, {x, w, b}, 1e-5).max_err < 1e-6);
}

TEST_CASE("conv2d rejects bad configurations") {
    auto x = Tensor<double>::zeros({1, 4, 4, 3});
    Conv2dSpec s{.in_channels = 2, .out_channels = 2, .kernel_h = 3, .kernel_w = 3};
    auto w = Tensor<double>::zeros({3, 3, 2, 2});
    auto b = Tensor<double>::zeros({2});
    CHECK_THROWS_AS(conv2d(x, s, w, b), ShapeError);  // channel mismatch

    Conv2dSpec big{.in_channels = 3, .out_channels = 2, .kernel_h = 5, .kernel_w = 5};
    auto wb = Tensor<double>::zeros({5, 5, 3, 2});
    CHECK_THROWS_AS(conv2d(x, big, wb, b), ShapeError);  // zero-size output

    Conv2dSpec badg{.in_channels = 3, .out_channels = 2, .kernel_h = 1, .kernel_w = 1,
                    .groups = 2};
    CHECK_THROWS_AS(badg.validate(), ContractError);

    Conv2dSpec s3{.in_channels = 3, .out_channels = 2, .kernel_h = 3, .kernel_w = 3};
    auto wrong = Tensor<double>::zeros({3, 3, 3, 3});
    CHECK_THROWS_AS(conv2d(x, s3, wrong, b), ShapeError);  // weight shape
}

TEST_CASE("batch_norm eval with unit statistics is near identity") {
    Rng rng(21);
    ParamStore<double> store;
    auto bn = make_batch_norm(store, "bn", 3);
    auto x = random_tensor<double>({2, 2, 2, 3}, rng);
    auto y = bn.forward(x, false);
    for (std::size_t i = 0; i < x.size(); ++i)
        CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-4));
}

TEST_CASE("batch_norm eval applies running statistics as an affine map") {
    ParamStore<double> store;
    auto bn = make_batch_norm(store, "bn", 2);
    bn.running_mean.values() = {1.0, -2.0};
    bn.running_var.values() = {4.0, 0.25};
    bn.gamma.values() = {2.0, 3.0};
    bn.beta.values() = {0.5, -1.0};
    auto x = Tensor<double>::from({2, 2}, {1.0, -2.0, 3.0, 0.0});
    auto y = bn.forward(x, false);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c) {
            const double xv = x.values()[static_cast<std::size_t>(r * 2 + c)];
            const double want = bn.gamma.values()[static_cast<std::size_t>(c)] *
                                    (xv - bn.running_mean.values()[static_cast<std::size_t>(c)]) /
                                    std::sqrt(bn.running_var.values()[static_cast<std::size_t>(c)] +
                                              1e-5) +
                                bn.beta.values()[static_cast<std::size_t>(c)];
            CHECK(y.values()[static_cast<std::size_t>(r * 2 + c)] ==
                  doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("batch_norm train on a constant batch outputs the shift") {
    ParamStore<double> store;
    auto bn = make_batch_norm(store, "bn", 2);
    bn.beta.values() = {0.5, -0.25};
    auto x = Tensor<double>::full({4, 3, 3, 2}, 7.0);
    auto y = bn.forward(x, true);
    for (std::size_t i = 0; i < y.size(); ++i)
        CHECK(y.values()[i] == doctest::Approx(i % 2 == 0 ? 0.5 : -0.25).epsilon(1e-12));
}

TEST_CASE("batch_norm train rejects a batch of one") {
    ParamStore<double> store;
    auto bn = make_batch_norm(store, "bn", 2);
    auto x = Tensor<double>::zeros({1, 3, 3, 2});
    CHECK_THROWS_AS(bn.forward(x, true), ContractError);
}

TEST_CASE("batch_norm train and eval converge over repeated identical batches") {
    Rng rng(31);
    ParamStore<float> store;
    auto bn = make_batch_norm(store, "bn", 3);
    auto x = random_tensor<float>({4, 32, 32, 3}, rng, 0.0, 1.0);
    NoGradGuard guard;
    Tensor<float> train_out = bn.forward(x, true);
    for (int i = 0; i < 99; ++i) train_out = bn.forward(x, true);
    auto eval_out = bn.forward(x, false);
    double gap = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        gap = std::max(gap, std::abs(static_cast<double>(train_out.values()[i]) -
                                     static_cast<double>(eval_out.values()[i])));
    CHECK(gap < 1e-3);
}

TEST_CASE("batch_norm train-mode gradients") {
    Rng rng(41);
    ParamStore<double> store;
    auto bn = make_batch_norm(store, "bn", 2);
    auto x = random_param<double>({3, 2, 2, 2}, rng);
    auto f = [&]() {
        auto y = bn.forward(x, true);
        auto two = op::mul(y, y);
        return op::mean_all(op::add(two, y));
    };
    CHECK(grad_check<double>(f, {x, bn.gamma, bn.beta}, 1e-5).max_err < 1e-4);
}

TEST_CASE("batch_norm eval mode propagates gradients to the input only") {
    Rng rng(51);
    ParamStore<double> store;
    auto bn = make_batch_norm(store, "bn", 2);
    auto x = random_param<double>({2, 2}, rng);
    auto loss = op::mean_all(bn.forward(x, false));
    backward(loss);
    bool any = false;
    for (double g : x.grad()) any = any || g != 0.0;
    CHECK(any);
    for (double g : bn.gamma.grad()) CHECK(g == 0.0);
    for (double g : bn.beta.grad()) CHECK(g == 0.0);
}

TEST_CASE("linear layer examples") {
    Linear<double> ident;
    ident.weight = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    ident.bias = Tensor<double>::zeros({2});
    auto x = Tensor<double>::from({1, 2}, {3.0, -4.0});
    auto y = ident(x);
    CHECK(y.values()[0] == 3.0);
    CHECK(y.values()[1] == -4.0);

    Linear<double> l;
    l.weight = Tensor<double>::from({2, 1}, {1.0, 1.0});
    l.bias = Tensor<double>::from({1}, {1.0});
    auto z = l(Tensor<double>::from({1, 2}, {1.0, 1.0}));
    CHECK(z.item() == 3.0);
}

TEST_CASE("linear matches matmul plus bias oracle and trains") {
    Rng rng(61);
    ParamStore<double> store;
    auto l = make_linear(store, "l", 4, 3, rng);
    auto x = random_param<double>({5, 4}, rng);
    auto y = l(x);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 3; ++c) {
            long double acc = l.bias.values()[static_cast<std::size_t>(c)];
            for (int k = 0; k < 4; ++k)
                acc += static_cast<long double>(x.values()[static_cast<std::size_t>(r * 4 + k)]) *
                       l.weight.values()[static_cast<std::size_t>(k * 3 + c)];
            CHECK(y.values()[static_cast<std::size_t>(r * 3 + c)] ==
                  doctest::Approx(static_cast<double>(acc)).epsilon(1e-6));
        }
    auto f = [&]() { return op::mean_all(op::mul(l(x), l(x))); };
    CHECK(grad_check<double>(f, {x, l.weight, l.bias}, 1e-5).max_err < 1e-6);
}

TEST_CASE("activation dispatch") {
    auto x = Tensor<double>::from({4}, {-1.0, 2.0, 0.0, 1.0});
    auto r = activation(x, Act::relu);
    CHECK(r.values()[0] == 0.0);
    CHECK(r.values()[1] == 2.0);
    auto s = activation(Tensor<double>::from({1}, {0.0}), Act::sigmoid);
    CHECK(s.item() == 0.5);
    auto g = activation(x, Act::gelu);
    CHECK(g.values()[2] == 0.0);
    CHECK(g.values()[3] == doctest::Approx(gelu_ref(1.0)).epsilon(1e-12));
}

TEST_CASE("sigmoid stays strictly inside (0,1) across its working range") {
    std::vector<float> grid;
    for (double v = -15.0; v <= 15.0; v += 0.5) grid.push_back(static_cast<float>(v));
    const int n = static_cast<int>(grid.size());
    auto x = Tensor<float>::from({n}, std::move(grid));
    auto y = activation(x, Act::sigmoid);
    for (float v : y.values()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
}

TEST_CASE("gelu grid properties") {
    // gelu dips below zero near x = -0.75 (minimum about -0.17), so global
    // monotonicity over [-5,5] does not hold; check the true shape instead:
    // bounded below, zero at zero, monotone right of the minimum, asymptotic
    // to x for large x.
    double prev = gelu_ref(-0.7);
    for (double v = -0.7; v <= 5.0; v += 0.05) {
        auto y = activation(Tensor<double>::from({1}, {v}), Act::gelu);
        CHECK(y.item() >= prev - 1e-12);
        prev = y.item();
    }
    for (double v = -5.0; v <= 5.0; v += 0.1) {
        auto y = activation(Tensor<double>::from({1}, {v}), Act::gelu);
        CHECK(y.item() >= -0.2);
    }
    auto tail = activation(Tensor<double>::from({1}, {5.0}), Act::gelu);
    CHECK(tail.item() == doctest::Approx(5.0).epsilon(1e-4));
}

TEST_CASE("upsample factor 1 returns the input unchanged") {
    auto x = Tensor<double>::from({1, 2, 2, 1}, {1, 2, 3, 4});
    auto y = upsample_bilinear(x, 1);
    CHECK(y.data() == x.data());
}

TEST_CASE("bilinear resize of a constant image is constant") {
    auto x = Tensor<double>::full({1, 3, 3, 2}, 2.5);
    for (int f : {2, 3}) {
        auto y = upsample_bilinear(x, f);
        REQUIRE(shape_eq(y.shape(), {1, 3 * f, 3 * f, 2}));
        for (double v : y.values()) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));
    }
}

TEST_CASE("bilinear upsample of a two-pixel row") {
    auto x = Tensor<double>::from({1, 1, 2, 1}, {0.0, 1.0});
    auto y = upsample_bilinear(x, 2);
    REQUIRE(shape_eq(y.shape(), {1, 2, 4, 1}));
    const std::vector<double> want{0.0, 0.25, 0.75, 1.0};
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 4; ++c)
            CHECK(y.values()[static_cast<std::size_t>(r * 4 + c)] ==
                  doctest::Approx(want[static_cast<std::size_t>(c)]).epsilon(1e-12));
    for (int c = 0; c + 1 < 4; ++c)
        CHECK(y.values()[static_cast<std::size_t>(c)] <=
              y.values()[static_cast<std::size_t>(c + 1)]);
}

TEST_CASE("bilinear halving averages 2x2 blocks") {
    Rng rng(71);
    auto x = random_tensor<double>({1, 4, 6, 2}, rng);
    auto y = resize_bilinear(x, 2, 3);
    for (int oy = 0; oy < 2; ++oy)
        for (int ox = 0; ox < 3; ++ox)
            for (int c = 0; c < 2; ++c) {
                double want = 0.0;
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        want += x.values()[
                            ((static_cast<std::size_t>(2 * oy + dy)) * 6 + (2 * ox + dx)) * 2 +
                            static_cast<std::size_t>(c)];
                want /= 4.0;
                CHECK(y.values()[(static_cast<std::size_t>(oy) * 3 + ox) * 2 +
                                 static_cast<std::size_t>(c)] ==
                      doctest::Approx(want).epsilon(1e-12));
            }
}

TEST_CASE("bilinear resize gradients") {
    Rng rng(81);
    auto x = random_param<double>({1, 3, 4, 2}, rng);
    auto up = [&]() { return op::mean_all(op::mul(upsample_bilinear(x, 2), upsample_bilinear(x, 2))); };
    CHECK(grad_check<double>(up, {x}, 1e-5).max_err < 1e-6);
    auto down = [&]() { return op::mean_all(op::mul(resize_bilinear(x, 2, 2), resize_bilinear(x, 2, 2))); };
    CHECK(grad_check<double>(down, {x}, 1e-5).max_err < 1e-6);
    CHECK_THROWS_AS(resize_bilinear(x, 0, 2), ShapeError);
}
