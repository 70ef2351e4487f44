#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "grad_check.hpp"
#include "mg/moe.hpp"

using namespace mg;

namespace {

Tensor randn(std::size_t r, std::size_t c, std::mt19937_64& rng, real std = 1.0) {
    Tensor t({r, c});
    std::normal_distribution<real> d(0.0, std);
    for (real& v : t.vec()) v = d(rng);
    return t;
}

Tensor gate_rows(const std::vector<std::pair<real, real>>& g) {
    Tensor t({g.size(), 2});
    for (std::size_t i = 0; i < g.size(); ++i) {
        t.at(i, 0) = g[i].first;
        t.at(i, 1) = g[i].second;
    }
    return t;
}

}  // namespace

TEST_CASE("capacity formula") {
    CHECK(expert_capacity(1.0, 8, 2) == 4);
    CHECK(expert_capacity(1.5, 10, 2) == 8);
    CHECK(expert_capacity(2.0, 10, 2) == 10);
    CHECK(expert_capacity(1.5, 1, 2) == 1);
}

TEST_CASE("zero router: uniform gates, tie toward expert 0") {
    std::mt19937_64 rng(1);
    Tensor x = randn(6, 4, rng);
    Tensor wg = Tensor::zeros({2, 4});
    Tensor gates = softmax(matmul(x, transpose(wg)), 1);
    for (std::size_t t = 0; t < 6; ++t) {
        CHECK(gates.at(t, 0) == 0.5);
        CHECK(gates.at(t, 1) == 0.5);
    }
    DispatchPlan plan = route(gates, RouterConfig{1, 2.0});
    for (std::size_t t = 0; t < 6; ++t) {
        REQUIRE(plan.selected_experts[t].size() == 1);
        CHECK(plan.selected_experts[t][0] == 0);
    }
    CHECK(plan.kept[0].size() == 6);
    CHECK(plan.kept[1].empty());
}

TEST_CASE("dispatch hand simulation: L=8 CF=1 all prefer expert 0") {
    std::vector<std::pair<real, real>> g(8, {0.9, 0.1});
    DispatchPlan plan = route(gate_rows(g), RouterConfig{1, 1.0});
    CHECK(plan.capacity == 4);
    REQUIRE(plan.kept[0].size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(plan.kept[0][i] == i);
    CHECK(plan.dropped_assignments_per_expert[0] == 4);
    REQUIRE(plan.fully_dropped.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) CHECK(plan.fully_dropped[i] == 4 + i);
}

TEST_CASE("capacity law: randomized property sweep") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<std::size_t> len(1, 40);
    std::uniform_real_distribution<real> cfd(0.25, 2.5);
    std::uniform_real_distribution<real> gd(1e-6, 1.0);
    for (int iter = 0; iter < 2000; ++iter) {
        std::size_t L = len(rng);
        RouterConfig cfg{1 + static_cast<std::size_t>(iter % 2), cfd(rng)};
        Tensor gates({L, 2});
        for (std::size_t t = 0; t < L; ++t) {
            real a = gd(rng), b = gd(rng);
            gates.at(t, 0) = a / (a + b);
            gates.at(t, 1) = b / (a + b);
        }
        DispatchPlan plan = route(gates, cfg);
        std::size_t cap = expert_capacity(cfg.capacity_factor, L, 2);
        CHECK(plan.capacity == cap);
        std::size_t kept_total = 0, dropped_total = 0, selected_total = 0;
        for (std::size_t e = 0; e < 2; ++e) {
            CHECK(plan.kept[e].size() <= cap);
            kept_total += plan.kept[e].size();
            dropped_total += plan.dropped_assignments_per_expert[e];
        }
        for (std::size_t t = 0; t < L; ++t) selected_total += plan.selected_experts[t].size();
        CHECK(kept_total + dropped_total == selected_total);  // exact partition
    }
}

TEST_CASE("expert with zero B equals its base FFN bit-exactly") {
    std::mt19937_64 rng(3);
    PlainFFN base(8, rng);
    Expert ex(base, 4, 16.0, rng);
    Tensor x = randn(5, 8, rng);
    Tensor from_base = base.forward(x);
    Tensor from_expert = ex.forward(x);
    for (std::size_t i = 0; i < from_base.size(); ++i)
        CHECK(from_expert.at(i) == from_base.at(i));
}

TEST_CASE("lora against an explicit dense-matrix oracle") {
    std::mt19937_64 rng(4);
    Linear base(6, 5, rng);
    LoRALinear lora(base, 3, 16.0, rng);
    std::normal_distribution<real> d(0.0, 0.3);
    for (real& v : lora.lora_a.vec()) v = d(rng);
    for (real& v : lora.lora_b.vec()) v = d(rng);
    Tensor x = randn(4, 6, rng);

    // dense W' = W + (alpha/r) * B * A
    real s = lora.alpha / static_cast<real>(lora.rank);
    Tensor wdense({5, 6});
    for (std::size_t o = 0; o < 5; ++o)
        for (std::size_t i = 0; i < 6; ++i) {
            real acc = base.w.at(o, i);
            for (std::size_t k = 0; k < 3; ++k)
                acc += s * lora.lora_b.at(o, k) * lora.lora_a.at(k, i);
            wdense.at(o, i) = acc;
        }
    Tensor want = linear(x, wdense, base.b);
    Tensor got = lora.forward(x);
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(got.at(i) == doctest::Approx(want.at(i)).epsilon(1e-10));
}

TEST_CASE("alpha equal to rank gives unit scaling") {
    std::mt19937_64 rng(5);
    Linear base(4, 4, rng);
    for (real& v : base.w.vec()) v = 0;
    for (real& v : base.b.vec()) v = 0;
    LoRALinear lora(base, 2, 2.0, rng);
    lora.lora_a.vec() = {1, 0, 0, 0, 0, 1, 0, 0};  // [2x4]
    lora.lora_b.vec() = {1, 0, 0, 1, 0, 0, 0, 0};  // [4x2]
    Tensor x({1, 4});
    x.vec() = {1, 2, 3, 4};
    Tensor y = lora.forward(x);  // (alpha/r)=1, so y = B*A*x
    CHECK(y.at(0) == 1.0);
    CHECK(y.at(1) == 2.0);
    CHECK(y.at(2) == 0.0);
}

TEST_CASE("dense-equivalence oracle under top-2 no-drop routing") {
    std::mt19937_64 rng(6);
    MoELayer layer(8, RouterConfig{2, 2.0}, 4, 16.0, rng);
    std::normal_distribution<real> d(0.0, 0.2);
    for (real& v : layer.router_w.vec()) v = d(rng);
    for (auto& ex : layer.experts) {
        for (real& v : ex.fc1.lora_b.vec()) v = d(rng);
        for (real& v : ex.fc2.lora_b.vec()) v = d(rng);
    }
    for (int iter = 0; iter < 50; ++iter) {
        Tensor x = randn(7, 8, rng);
        Tensor out = layer.forward(x);
        Tensor gates = softmax(matmul(x, transpose(layer.router_w)), 1);
        Tensor e0 = layer.experts[0].forward(x);
        Tensor e1 = layer.experts[1].forward(x);
        for (std::size_t t = 0; t < 7; ++t)
            for (std::size_t j = 0; j < 8; ++j) {
                real want = gates.at(t, 0) * e0.at(t, j) + gates.at(t, 1) * e1.at(t, j);
                CHECK(std::abs(out.at(t * 8 + j) - want) < 1e-10);
            }
    }
}

TEST_CASE("single token top-1 combine uses un-renormalized gate") {
    std::mt19937_64 rng(7);
    MoELayer layer(4, RouterConfig{1, 2.0}, 2, 16.0, rng);
    // force gate (0.9, 0.1): softmax(z0-z1 = ln 9)
    layer.router_w.vec() = std::vector<real>(8, 0.0);
    layer.router_w.at(0, 0) = std::log(9.0);
    Tensor x({1, 4});
    x.vec() = {1, 0, 0, 0};
    Tensor out = layer.forward(x);
    Tensor e0 = layer.experts[0].forward(x);
    for (std::size_t j = 0; j < 4; ++j)
        CHECK(out.at(j) == doctest::Approx(0.9 * e0.at(j)).epsilon(1e-12));
}

TEST_CASE("dropped tokens pass through as identity") {
    std::mt19937_64 rng(8);
    MoELayer layer(4, RouterConfig{1, 0.5}, 2, 16.0, rng);
    // zero router: everything prefers expert 0; capacity ceil(0.5*6/2)=2
    layer.router_w.vec() = std::vector<real>(8, 0.0);
    Tensor x = randn(6, 4, rng);
    Tensor out = layer.forward(x);
    REQUIRE(layer.last_plan.fully_dropped.size() == 4);
    for (std::size_t t : layer.last_plan.fully_dropped)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(out.at(t * 4 + j) == x.at(t, j));
}

TEST_CASE("load stats recount and fraction normalization") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<real> gd(1e-6, 1.0);
    std::vector<DispatchPlan> plans;
    std::size_t brute_kept[2] = {0, 0};
    for (int p = 0; p < 40; ++p) {
        std::size_t L = 25;
        Tensor gates({L, 2});
        for (std::size_t t = 0; t < L; ++t) {
            real a = gd(rng), b = gd(rng);
            gates.at(t, 0) = a / (a + b);
            gates.at(t, 1) = b / (a + b);
        }
        DispatchPlan plan = route(gates, RouterConfig{1, 1.5});
        for (std::size_t e = 0; e < 2; ++e) brute_kept[e] += plan.kept[e].size();
        plans.push_back(plan);
    }
    std::vector<ExpertLoad> loads = expert_load_stats(plans);
    CHECK(loads[0].kept == brute_kept[0]);
    CHECK(loads[1].kept == brute_kept[1]);
    CHECK(std::abs(loads[0].fraction + loads[1].fraction - 1.0) < 1e-12);

    // top-2 no-drop: every expert sees every token
    Tensor g2 = gate_rows(std::vector<std::pair<real, real>>(10, {0.3, 0.7}));
    DispatchPlan p2 = route(g2, RouterConfig{2, 2.0});
    std::vector<ExpertLoad> l2 = expert_load_stats({p2});
    CHECK(l2[0].kept == 10);
    CHECK(l2[1].kept == 10);
}

TEST_CASE("router gradient flows: finite differences on W_g") {
    std::mt19937_64 rng(10);
    MoELayer layer(6, RouterConfig{2, 2.0}, 2, 16.0, rng);
    std::normal_distribution<real> d(0.0, 0.3);
    for (real& v : layer.router_w.vec()) v = d(rng);
    for (auto& ex : layer.experts)
        for (real& v : ex.fc1.lora_b.vec()) v = d(rng);
    Tensor x = randn(4, 6, rng);
    auto res = mgtest::grad_check(
        [&] { return sum_all(mul(layer.forward(x), layer.forward(x))); },
        {layer.router_w, x});
    CHECK(res.max_rel < 1e-4);
}

TEST_CASE("plan determinism") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<real> gd(1e-6, 1.0);
    Tensor gates({12, 2});
    for (std::size_t t = 0; t < 12; ++t) {
        real a = gd(rng), b = gd(rng);
        gates.at(t, 0) = a / (a + b);
        gates.at(t, 1) = b / (a + b);
    }
    DispatchPlan p1 = route(gates, RouterConfig{1, 1.0});
    DispatchPlan p2 = route(gates, RouterConfig{1, 1.0});
    CHECK(p1.kept == p2.kept);
    CHECK(p1.fully_dropped == p2.fully_dropped);
    CHECK(p1.selected_experts == p2.selected_experts);
}

TEST_CASE("moe layer built from two source ffns keeps them per expert") {
    std::mt19937_64 rng(12);
    PlainFFN vl(6, rng), ground(6, rng);
    MoELayer layer(vl, ground, RouterConfig{2, 2.0}, 4, 16.0, rng);
    Tensor x = randn(3, 6, rng);
    Tensor want0 = vl.forward(x);
    Tensor want1 = ground.forward(x);
    Tensor got0 = layer.experts[0].forward(x);
    Tensor got1 = layer.experts[1].forward(x);
    for (std::size_t i = 0; i < want0.size(); ++i) {
        CHECK(got0.at(i) == want0.at(i));  // bit-exact: zero-B LoRA
        CHECK(got1.at(i) == want1.at(i));
    }
    // router starts at zero
    for (real v : layer.router_w.vec()) CHECK(v == 0.0);
}
