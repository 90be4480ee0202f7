#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <string>
#include <vector>

#include "lmdet/encoder.hpp"
#include "lmdet/grad_check.hpp"
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

EncoderConfig toy_config(std::vector<std::string> domains) {
    EncoderConfig cfg;
    cfg.embed_dim = 32;
    cfg.depths = {2, 2, 2, 2};
    cfg.heads = {1, 2, 4, 8};
    cfg.window = 4;
    cfg.domains = std::move(domains);
    return cfg;
}

}  // namespace

TEST_CASE("patch embedding projects 4x4 patches to the embed width") {
    Rng rng(1);
    ParamStore<double> store;
    auto cfg = toy_config({"a"});
    auto enc = make_encoder(store, cfg, rng);
    auto img = random_tensor<double>({2, 64, 64, 1}, rng);
    auto tok = enc.embed(img);
    CHECK(shape_eq(tok.shape(), {2, 16, 16, 32}));
}

TEST_CASE("patch embedding at paper geometry") {
    Rng rng(2);
    ParamStore<float> store;
    PatchEmbed<float> pe;
    pe.patch = 4;
    pe.divisor = 32;
    pe.proj = make_linear(store, "proj", 16, 128, rng);
    pe.norm = make_layer_norm(store, "norm", 128);
    auto img = Tensor<float>::zeros({1, 512, 512, 1});
    auto tok = pe(img);
    CHECK(shape_eq(tok.shape(), {1, 128, 128, 128}));
}

TEST_CASE("zero projection maps any image to zero tokens") {
    Rng rng(3);
    ParamStore<double> store;
    PatchEmbed<double> pe;
    pe.patch = 4;
    pe.divisor = 32;
    pe.proj.weight = Tensor<double>::zeros({16, 8});
    pe.proj.bias = Tensor<double>::zeros({8});
    pe.norm = make_layer_norm(store, "norm", 8);
    auto img = Tensor<double>::full({1, 32, 32, 1}, 3.5);
    auto tok = pe(img);
    for (double v : tok.values()) CHECK(v == 0.0);
}

TEST_CASE("patch embedding names the required divisor on bad input") {
    Rng rng(4);
    ParamStore<double> store;
    auto enc = make_encoder(store, toy_config({"a"}), rng);
    auto img = Tensor<double>::zeros({1, 48, 64, 1});
    try {
        enc.embed(img);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("32") != std::string::npos);
    }
}

TEST_CASE("patch merging halves the grid and doubles the channels") {
    Rng rng(5);
    ParamStore<double> store;
    PatchMerge<double> m;
    m.norm = make_layer_norm(store, "norm", 128);
    m.reduce = make_linear(store, "reduce", 128, 64, rng);
    auto x = random_tensor<double>({1, 16, 16, 32}, rng);
    auto y = m(x);
    CHECK(shape_eq(y.shape(), {1, 8, 8, 64}));
    CHECK(x.dim(1) * x.dim(2) == 4 * y.dim(1) * y.dim(2));
    auto odd = random_tensor<double>({1, 5, 6, 32}, rng);
    CHECK_THROWS_AS(m(odd), ShapeError);
}

TEST_CASE("encode produces the four-scale pyramid") {
    Rng rng(6);
    ParamStore<double> store;
    auto enc = make_encoder(store, toy_config({"a"}), rng);
    auto img = random_tensor<double>({1, 64, 64, 1}, rng);
    auto pyr = enc.encode(img, "a");
    REQUIRE(pyr.size() == 4);
    CHECK(shape_eq(pyr[0].shape(), {1, 16, 16, 32}));
    CHECK(shape_eq(pyr[1].shape(), {1, 8, 8, 64}));
    CHECK(shape_eq(pyr[2].shape(), {1, 4, 4, 128}));
    CHECK(shape_eq(pyr[3].shape(), {1, 2, 2, 256}));
    for (int s = 0; s < 4; ++s) {
        CHECK(enc.cfg.stage_channels(s) == pyr[static_cast<std::size_t>(s)].dim(3));
        CHECK(64 / enc.cfg.stage_stride(s) == pyr[static_cast<std::size_t>(s)].dim(1));
    }
}

TEST_CASE("encode is deterministic") {
    Rng rng(7);
    ParamStore<float> store;
    auto enc = make_encoder(store, toy_config({"a"}), rng);
    auto img = random_tensor<float>({1, 64, 64, 1}, rng);
    NoGradGuard guard;
    auto p1 = enc.encode(img, "a");
    auto p2 = enc.encode(img, "a");
    for (int s = 0; s < 4; ++s)
        for (std::size_t i = 0; i < p1[static_cast<std::size_t>(s)].size(); ++i)
            CHECK(p1[static_cast<std::size_t>(s)].values()[i] ==
                  p2[static_cast<std::size_t>(s)].values()[i]);
}

TEST_CASE("tied domains yield identical pyramids at initialization") {
    Rng rng(8);
    ParamStore<double> store;
    auto enc = make_encoder(store, toy_config({"a", "b"}), rng);
    auto img = random_tensor<double>({1, 64, 64, 1}, rng);
    NoGradGuard guard;
    auto pa = enc.encode(img, "a");
    auto pb = enc.encode(img, "b");
    for (int s = 0; s < 4; ++s)
        for (std::size_t i = 0; i < pa[static_cast<std::size_t>(s)].size(); ++i)
            CHECK(pa[static_cast<std::size_t>(s)].values()[i] ==
                  pb[static_cast<std::size_t>(s)].values()[i]);
}

TEST_CASE("a domain-a encode touches no domain-b gradients") {
    Rng rng(9);
    ParamStore<double> store;
    auto enc = make_encoder(store, toy_config({"a", "b"}), rng);
    auto img = random_tensor<double>({1, 64, 64, 1}, rng);
    auto pyr = enc.encode(img, "a");
    auto loss = op::mean_all(op::mul(pyr[3], pyr[3]));
    for (int s = 2; s >= 0; --s)
        loss = op::add(loss, op::mean_all(op::mul(pyr[static_cast<std::size_t>(s)],
                                                  pyr[static_cast<std::size_t>(s)])));
    backward(loss);
    bool a_nonzero = false;
    for (const auto& e : store.params()) {
        const auto* g = e.tensor.grad_if_any();
        double mag = 0;
        if (g)
            for (double v : *g) mag += std::abs(v);
        const auto d = ParamStore<double>::domain_of(e.name);
        if (d == "b") CHECK(mag == 0.0);
        if (d == "a") a_nonzero = a_nonzero || mag > 0;
    }
    CHECK(a_nonzero);
    release_graph(loss);
}

TEST_CASE("adding an encoder domain reproduces the donor and extends the config") {
    Rng rng(10);
    ParamStore<double> store;
    auto enc = make_encoder(store, toy_config({"a"}), rng);
    const std::size_t before = store.total_param_count();
    add_encoder_domain(store, enc, "c", "a");
    // Per block: query weight+bias and the two diagonal vectors.
    std::size_t want = 0;
    for (int s = 0; s < 4; ++s) {
        const int dim = enc.cfg.stage_channels(s);
        want += 2 * static_cast<std::size_t>(dim * dim + dim + 2 * dim);
    }
    CHECK(store.total_param_count() - before == want);
    CHECK(enc.cfg.domains.size() == 2);
    CHECK_THROWS_AS(add_encoder_domain(store, enc, "c", "a"), ContractError);

    auto img = random_tensor<double>({1, 64, 64, 1}, rng);
    NoGradGuard guard;
    auto pa = enc.encode(img, "a");
    auto pc = enc.encode(img, "c");
    for (std::size_t i = 0; i < pa[0].size(); ++i)
        CHECK(pc[0].values()[i] == pa[0].values()[i]);
}

TEST_CASE("encoder config validation") {
    EncoderConfig bad = toy_config({"a"});
    bad.depths = {2, 2, 2};
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = toy_config({"a"});
    bad.depths[1] = 0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = toy_config({"a"});
    bad.heads = {3, 2, 4, 8};  // 3 does not divide 32
    CHECK_THROWS_AS(bad.validate(), ContractError);

    EncoderConfig paper;
    paper.embed_dim = 128;
    paper.depths = {2, 2, 18, 2};
    paper.heads = {4, 8, 16, 32};
    paper.window = 8;
    paper.domains = {"head", "hand", "chest"};
    paper.validate();
    CHECK(paper.stage_channels(3) == 1024);
    CHECK(paper.stage_stride(3) == 32);
}

TEST_CASE("gradients flow from the deepest stage back to the image") {
    Rng rng(11);
    ParamStore<double> store;
    EncoderConfig cfg = toy_config({"a"});
    cfg.embed_dim = 8;
    cfg.heads = {1, 2, 4, 8};
    cfg.depths = {1, 1, 1, 1};
    auto enc = make_encoder(store, cfg, rng);
    auto img = random_tensor<double>({1, 32, 32, 1}, rng);
    img.set_requires_grad(true);
    auto pyr = enc.encode(img, "a");
    auto loss = op::mean_all(op::mul(pyr[3], pyr[3]));
    backward(loss);
    double mag = 0;
    for (double v : img.grad()) mag += std::abs(v);
    CHECK(mag > 0);
    release_graph(loss);
}
