#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <numeric>

#include "lmdet/grad_check.hpp"
#include "lmdet/ops.hpp"
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

// Independent dense product: plain triple loop, no library calls.
template <class T>
std::vector<T> matmul_oracle(const std::vector<T>& a, const std::vector<T>& b, int m, int k,
                             int n) {
    std::vector<T> c(static_cast<std::size_t>(m) * n, T(0));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    return c;
}

long double kahan_sum(const std::vector<float>& v) {
    long double s = 0.0L, c = 0.0L;
    for (float x : v) {
        const long double y = static_cast<long double>(x) - c;
        const long double t = s + y;
        c = (t - s) - y;
        s = t;
    }
    return s;
}

}  // namespace

TEST_CASE("matmul identity and hand examples") {
    auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    auto r = op::matmul(a, eye);
    CHECK(r.values() == std::vector<double>{1, 2, 3, 4});

    auto row = Tensor<double>::from({1, 2}, {1, 2});
    auto ones = Tensor<double>::from({2, 1}, {1, 1});
    CHECK(op::matmul(row, ones).item() == doctest::Approx(3.0));
}

TEST_CASE("matmul matches triple-loop oracle") {
    Rng rng(7);
    auto a = random_tensor<double>({3, 4}, rng);
    auto b = random_tensor<double>({4, 2}, rng);
    auto r = op::matmul(a, b);
    auto want = matmul_oracle(a.values(), b.values(), 3, 4, 2);
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(r.values()[i] == doctest::Approx(want[i]).epsilon(1e-12));

    auto af = random_tensor<float>({5, 9}, rng);
    auto bf = random_tensor<float>({9, 6}, rng);
    auto rf = op::matmul(af, bf);
    auto wantf = matmul_oracle(af.values(), bf.values(), 5, 9, 6);
    for (std::size_t i = 0; i < wantf.size(); ++i)
        CHECK(rf.values()[i] == doctest::Approx(wantf[i]).epsilon(1e-6));
}

TEST_CASE("matmul batched and transposed forms") {
    Rng rng(11);
    auto a = random_tensor<double>({2, 3, 3, 4}, rng);
    auto b = random_tensor<double>({2, 3, 4, 2}, rng);
    auto r = op::matmul(a, b);
    REQUIRE(r.shape() == Shape{2, 3, 3, 2});
    for (int bi = 0; bi < 6; ++bi) {
        std::vector<double> sa(a.data() + bi * 12, a.data() + (bi + 1) * 12);
        std::vector<double> sb(b.data() + bi * 8, b.data() + (bi + 1) * 8);
        auto want = matmul_oracle(sa, sb, 3, 4, 2);
        for (int i = 0; i < 6; ++i)
            CHECK(r.values()[bi * 6 + i] == doctest::Approx(want[i]).epsilon(1e-12));
    }

    // b shared across the batch, last two axes swapped
    auto bt = random_tensor<double>({2, 4}, rng);
    auto rt = op::matmul(a, bt, /*transpose_b=*/true);
    REQUIRE(rt.shape() == Shape{2, 3, 3, 2});
    std::vector<double> btr(8);  // [4,2] from [2,4]
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j) btr[j * 2 + i] = bt.values()[i * 4 + j];
    for (int bi = 0; bi < 6; ++bi) {
        std::vector<double> sa(a.data() + bi * 12, a.data() + (bi + 1) * 12);
        auto want = matmul_oracle(sa, btr, 3, 4, 2);
        for (int i = 0; i < 6; ++i)
            CHECK(rt.values()[bi * 6 + i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    auto a = Tensor<float>::zeros({2, 3});
    auto b = Tensor<float>::zeros({4, 2});
    try {
        op::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("backward of sum of squares") {
    auto x = Tensor<double>::param({3}, {1, 2, 3});
    auto loss = op::sum_all(op::mul(x, x));
    backward(loss);
    CHECK(x.grad() == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward of a constant function gives zero grads") {
    auto x = Tensor<double>::param({3}, {1, 2, 3});
    auto loss = op::sum_all(op::sub(x, x));
    backward(loss);
    CHECK(x.grad() == std::vector<double>{0, 0, 0});
}

TEST_CASE("backward requires scalar loss") {
    auto x = Tensor<double>::param({3}, {1, 2, 3});
    auto y = op::mul(x, x);
    CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("two-layer perceptron gradients match finite differences") {
    Rng rng(101);
    auto x = random_param<double>({2, 4}, rng);
    auto w1 = random_param<double>({4, 8}, rng, -0.5, 0.5);
    auto b1 = random_param<double>({8}, rng, -0.1, 0.1);
    auto w2 = random_param<double>({8, 3}, rng, -0.5, 0.5);
    auto b2 = random_param<double>({3}, rng, -0.1, 0.1);

    auto loss_fn = [&]() {
        auto h = op::gelu(op::add_suffix(op::matmul(x, w1), b1));
        auto y = op::add_suffix(op::matmul(h, w2), b2);
        return op::mean_all(op::mul(y, y));
    };
    auto report = grad_check<double>(loss_fn, {x, w1, b1, w2, b2}, 1e-4);
    CHECK(report.max_err < 1e-4);
    CHECK(report.coords == 2 * 4 + 4 * 8 + 8 + 8 * 3 + 3);
}

TEST_CASE("grad_check on a quadratic is near-exact") {
    Rng rng(5);
    auto x = random_param<double>({6}, rng);
    auto f = [&]() { return op::sum_all(op::mul(x, x)); };
    CHECK(grad_check<double>(f, {x}, 1e-5).max_err < 1e-6);
}

TEST_CASE("grad_check on a linear map is near-exact") {
    Rng rng(6);
    auto x = random_param<double>({5}, rng);
    auto f = [&]() { return op::sum_all(op::scale(x, 3.0)); };
    CHECK(grad_check<double>(f, {x}, 1e-5).max_err < 1e-9);
}

TEST_CASE("backward is linear in the loss") {
    Rng rng(13);
    auto x0 = random_tensor<double>({10}, rng);

    auto run = [&](double a, double b) {
        auto x = x0.clone_values();
        x.set_requires_grad(true);
        auto f = op::sum_all(op::mul(x, x));
        auto g = op::sum_all(op::gelu(x));
        auto loss = op::add(op::scale(f, a), op::scale(g, b));
        backward(loss);
        return x.grad();
    };
    auto gf = run(1.0, 0.0);
    auto gg = run(0.0, 1.0);
    auto gmix = run(2.0, 3.0);
    for (std::size_t i = 0; i < gmix.size(); ++i)
        CHECK(std::abs(gmix[i] - (2.0 * gf[i] + 3.0 * gg[i])) < 1e-10);
}

TEST_CASE("forward and backward are bit-deterministic") {
    auto run = [&]() {
        Rng rng(99);
        auto x = random_tensor<float>({4, 16}, rng);
        auto w = random_tensor<float>({16, 16}, rng, -0.3, 0.3);
        w.set_requires_grad(true);
        auto y = op::softmax_last(op::matmul(op::gelu(op::matmul(x, w)), w, true));
        auto loss = op::mean_all(op::mul(y, y));
        backward(loss);
        std::pair<std::vector<float>, std::vector<float>> out{y.values(), w.grad()};
        release_graph(loss);
        return out;
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(std::memcmp(r1.first.data(), r2.first.data(), r1.first.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(r1.second.data(), r2.second.data(), r1.second.size() * sizeof(float)) == 0);
}

TEST_CASE("reductions match a compensated-summation oracle") {
    Rng rng(17);
    for (int trial = 0; trial < 25; ++trial) {
        const auto n = static_cast<std::size_t>(rng.uniform_int(1, 50000));
        std::vector<float> v(n);
        for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
        auto t = Tensor<float>::from({static_cast<int>(n)}, v);
        const long double want = kahan_sum(v);
        const double got = static_cast<double>(op::sum_all(t).item());
        const double ref = std::max(1.0, std::abs(static_cast<double>(want)));
        CHECK(std::abs(got - static_cast<double>(want)) / ref < 1e-6);
        const double gotm = static_cast<double>(op::mean_all(t).item());
        CHECK(std::abs(gotm - static_cast<double>(want) / static_cast<double>(n)) < 1e-6);
    }
}

TEST_CASE("suffix broadcast ops") {
    auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor<double>::from({3}, {10, 20, 30});
    CHECK(op::add_suffix(a, b).values() == std::vector<double>{11, 22, 33, 14, 25, 36});
    CHECK(op::mul_suffix(a, b).values() == std::vector<double>{10, 40, 90, 40, 100, 180});
    CHECK_THROWS_AS(op::add_suffix(a, Tensor<double>::zeros({2})), ShapeError);

    Rng rng(23);
    auto x = random_param<double>({2, 4, 3}, rng);
    auto s = random_param<double>({3}, rng);
    auto f = [&]() { return op::mean_all(op::mul(op::mul_suffix(x, s), op::add_suffix(x, s))); };
    CHECK(grad_check<double>(f, {x, s}, 1e-5).max_err < 1e-6);
}

TEST_CASE("permute transposes and round-trips") {
    auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto t = op::permute(a, {1, 0});
    REQUIRE(t.shape() == Shape{3, 2});
    CHECK(t.values() == std::vector<double>{1, 4, 2, 5, 3, 6});

    Rng rng(29);
    auto x = random_tensor<float>({2, 3, 4, 5}, rng);
    auto p = op::permute(x, {2, 0, 3, 1});
    auto back = op::permute(p, {1, 3, 0, 2});  // inverse of {2,0,3,1}
    REQUIRE(back.shape() == x.shape());
    CHECK(std::memcmp(back.data(), x.data(), x.size() * sizeof(float)) == 0);

    CHECK_THROWS_AS(op::permute(a, {0, 0}), ShapeError);
}

TEST_CASE("space_to_depth flattens each patch row-major") {
    // 1x4x4x1 image holding 0..15
    std::vector<double> v(16);
    std::iota(v.begin(), v.end(), 0.0);
    auto x = Tensor<double>::from({1, 4, 4, 1}, v);
    auto y = op::space_to_depth(x, 2);
    REQUIRE(y.shape() == Shape{1, 2, 2, 4});
    CHECK(y.values() ==
          std::vector<double>{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15});
    CHECK_THROWS_AS(op::space_to_depth(x, 3), ShapeError);
}

TEST_CASE("concat_last stitches channels and routes grads") {
    auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto b = Tensor<double>::from({2, 1}, {9, 8});
    auto c = op::concat_last(a, b);
    REQUIRE(c.shape() == Shape{2, 3});
    CHECK(c.values() == std::vector<double>{1, 2, 9, 3, 4, 8});

    Rng rng(31);
    auto x = random_param<double>({2, 3}, rng);
    auto y = random_param<double>({2, 2}, rng);
    auto f = [&]() {
        auto cc = op::concat_last(x, y);
        return op::mean_all(op::mul(cc, cc));
    };
    CHECK(grad_check<double>(f, {x, y}, 1e-5).max_err < 1e-6);
}

TEST_CASE("gather_rows accumulates grads for repeated rows") {
    auto table = Tensor<double>::param({3, 2}, {1, 2, 3, 4, 5, 6});
    auto idx = std::make_shared<std::vector<int>>(std::vector<int>{2, 0, 2});
    auto out = op::gather_rows(table, idx);
    REQUIRE(out.shape() == Shape{3, 2});
    CHECK(out.values() == std::vector<double>{5, 6, 1, 2, 5, 6});
    auto loss = op::sum_all(out);
    backward(loss);
    CHECK(table.grad() == std::vector<double>{1, 1, 0, 0, 2, 2});

    auto bad = std::make_shared<std::vector<int>>(std::vector<int>{3});
    CHECK_THROWS_AS(op::gather_rows(table, bad), ShapeError);
}

TEST_CASE("reshape shares storage and passes grads through") {
    auto x = Tensor<double>::param({2, 3}, {1, 2, 3, 4, 5, 6});
    auto y = op::reshape(x, {3, 2});
    CHECK(y.data_storage().get() == x.data_storage().get());
    auto loss = op::sum_all(op::mul(y, y));
    backward(loss);
    CHECK(x.grad() == std::vector<double>{2, 4, 6, 8, 10, 12});
    CHECK_THROWS_AS(op::reshape(x, Shape{4, 2}), ShapeError);
}

TEST_CASE("activation values") {
    auto x = Tensor<double>::from({5}, {-100, -1, 0, 1, 100});
    auto s = op::sigmoid(x);
    CHECK(s.values()[2] == doctest::Approx(0.5));
    CHECK(s.values()[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(s.values()[4] == doctest::Approx(1.0));
    for (double v : s.values()) CHECK(std::isfinite(v));

    auto g = op::gelu(x);
    CHECK(g.values()[2] == doctest::Approx(0.0));
    CHECK(g.values()[3] == doctest::Approx(0.8411919906).epsilon(1e-9));

    auto r = op::relu(x);
    CHECK(r.values() == std::vector<double>{0, 0, 0, 1, 100});
}

TEST_CASE("softmax rows normalize and match direct oracle") {
    Rng rng(37);
    auto x = random_tensor<double>({4, 7}, rng, -3.0, 3.0);
    auto y = op::softmax_last(x);
    for (int r = 0; r < 4; ++r) {
        double s = 0, oracle_den = 0;
        for (int i = 0; i < 7; ++i) oracle_den += std::exp(x.values()[r * 7 + i]);
        for (int i = 0; i < 7; ++i) {
            s += y.values()[r * 7 + i];
            const double want = std::exp(x.values()[r * 7 + i]) / oracle_den;
            CHECK(y.values()[r * 7 + i] == doctest::Approx(want).epsilon(1e-12));
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("activation gradients match finite differences") {
    Rng rng(41);
    // offsets keep relu away from its kink
    auto x = random_param<double>({3, 6}, rng, 0.2, 1.2);
    auto w = random_param<double>({3, 6}, rng, -1.2, -0.2);

    auto f_relu = [&]() { return op::mean_all(op::relu(op::mul(x, w))); };
    CHECK(grad_check<double>(f_relu, {x, w}, 1e-5).max_err < 1e-6);

    auto f_sig = [&]() { return op::mean_all(op::sigmoid(op::mul(x, w))); };
    CHECK(grad_check<double>(f_sig, {x, w}, 1e-4).max_err < 1e-4);

    auto f_gelu = [&]() { return op::mean_all(op::gelu(op::mul(x, w))); };
    CHECK(grad_check<double>(f_gelu, {x, w}, 1e-4).max_err < 1e-4);

    auto f_soft = [&]() {
        auto y = op::softmax_last(op::mul(x, w));
        return op::mean_all(op::mul(y, y));
    };
    CHECK(grad_check<double>(f_soft, {x, w}, 1e-4).max_err < 1e-4);
}

TEST_CASE("layer_norm matches a directly computed oracle") {
    Rng rng(43);
    auto x = random_param<double>({2, 5}, rng, -2.0, 2.0);
    auto gamma = random_param<double>({5}, rng, 0.5, 1.5);
    auto beta = random_param<double>({5}, rng, -0.5, 0.5);
    const double eps = 1e-5;
    auto y = op::layer_norm(x, gamma, beta, eps);
    for (int r = 0; r < 2; ++r) {
        double mu = 0;
        for (int i = 0; i < 5; ++i) mu += x.values()[r * 5 + i];
        mu /= 5;
        double var = 0;
        for (int i = 0; i < 5; ++i) {
            const double d = x.values()[r * 5 + i] - mu;
            var += d * d;
        }
        var /= 5;
        for (int i = 0; i < 5; ++i) {
            const double want =
                gamma.values()[i] * (x.values()[r * 5 + i] - mu) / std::sqrt(var + eps) +
                beta.values()[i];
            CHECK(y.values()[r * 5 + i] == doctest::Approx(want).epsilon(1e-10));
        }
    }

    auto f = [&]() {
        auto z = op::layer_norm(x, gamma, beta, eps);
        return op::mean_all(op::mul(z, z));
    };
    CHECK(grad_check<double>(f, {x, gamma, beta}, 1e-4).max_err < 1e-4);
}

TEST_CASE("NoGradGuard suppresses graph recording") {
    auto x = Tensor<double>::param({3}, {1, 2, 3});
    NoGradGuard guard;
    auto y = op::mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node() == nullptr);
}

TEST_CASE("release_graph leaves a harmless stub") {
    auto x = Tensor<double>::param({3}, {1, 2, 3});
    auto loss = op::sum_all(op::mul(x, x));
    release_graph(loss);
    backward(loss);  // nothing reachable any more
    CHECK(x.grad() == std::vector<double>{0, 0, 0});
}

TEST_CASE("param store namespaces and ordering") {
    ParamStore<float> store;
    store.add_param("patch/weight", Tensor<float>::zeros({4, 8}));
    store.add_param("domain/head/q", Tensor<float>::zeros({8}));
    store.add_param("domain/hand/q", Tensor<float>::zeros({8}));
    store.add_param("stage0/block0/w", Tensor<float>::zeros({3}));

    CHECK(store.params().size() == 4);
    CHECK(store.params()[0].name == "patch/weight");
    CHECK(store.total_param_count() == 32 + 8 + 8 + 3);
    CHECK(ParamStore<float>::domain_of("domain/head/q") == "head");
    CHECK(ParamStore<float>::domain_of("patch/weight").empty());
    CHECK(store.param_names_with_prefix("domain/hand/") ==
          std::vector<std::string>{"domain/hand/q"});
    CHECK(store.find_param("domain/head/q") != nullptr);
    CHECK(store.find_param("missing") == nullptr);
    CHECK_THROWS_AS(store.add_param("patch/weight", Tensor<float>::zeros({1})), ContractError);

    // registered params expose zeroed grads before any backward pass
    CHECK(store.params()[1].tensor.grad_if_any() != nullptr);
}

TEST_CASE("rng state save and restore resumes the stream") {
    Rng a(1234);
    for (int i = 0; i < 100; ++i) a.normal();
    const std::string state = a.save_state();
    Rng b(1);
    b.load_state(state);
    for (int i = 0; i < 50; ++i) {
        CHECK(a.normal() == b.normal());
        CHECK(a.uniform() == b.uniform());
    }
    CHECK_THROWS_AS(b.load_state("not a state"), DataError);
}

TEST_CASE("tensor construction contracts") {
    CHECK_THROWS_AS(Tensor<float>::from({2, 2}, {1.f, 2.f}), ShapeError);
    CHECK_THROWS_AS(Tensor<float>::zeros({0, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor<float>::from({2}, {1.f, 2.f}).item(), ContractError);
}
