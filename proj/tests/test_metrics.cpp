#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <map>
#include <random>

#include "mg/metrics.hpp"

using namespace mg;

TEST_CASE("dice coefficient basics") {
    Mask a(4, 4), b(4, 4);
    CHECK(dice_coeff(a, b) == 1.0);  // empty vs empty

    a.at(0, 0) = 1;
    a.at(0, 1) = 1;
    b.at(0, 1) = 1;
    b.at(0, 2) = 1;
    CHECK(dice_coeff(a, b) == doctest::Approx(0.5).epsilon(1e-15));

    Mask c(3, 3);
    CHECK_THROWS(dice_coeff(a, c));
}

TEST_CASE("mdice matches an independent pixel-loop recount, 1000 cases") {
    std::mt19937_64 rng(1);
    std::bernoulli_distribution bit(0.3);
    std::uniform_int_distribution<int> clsd(0, 4);
    std::vector<Mask> preds, gts;
    std::vector<int> classes;
    for (int i = 0; i < 1000; ++i) {
        Mask p(8, 8), g(8, 8);
        for (auto& v : p.data) v = bit(rng) ? 1 : 0;
        for (auto& v : g.data) v = bit(rng) ? 1 : 0;
        preds.push_back(p);
        gts.push_back(g);
        classes.push_back(clsd(rng));
    }
    DiceReport rep = mdice(preds, gts, classes);

    // brute-force recount, independent loop structure
    std::map<int, std::pair<double, int>> acc;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        std::size_t inter = 0, np = 0, ng = 0;
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x) {
                bool pp = preds[i].at(y, x) != 0;
                bool gg = gts[i].at(y, x) != 0;
                np += pp;
                ng += gg;
                inter += pp && gg;
            }
        double d = (np + ng == 0) ? 1.0 : 2.0 * inter / double(np + ng);
        acc[classes[i]].first += d;
        acc[classes[i]].second += 1;
    }
    double mean = 0;
    for (auto& [cls, sn] : acc) {
        double per = sn.first / sn.second;
        CHECK(std::abs(rep.per_class.at(cls) - per) < 1e-12);
        mean += per;
    }
    mean /= acc.size();
    CHECK(std::abs(rep.mean - mean) < 1e-12);
}

TEST_CASE("token precision recall pinned examples") {
    std::vector<int> a = {5, 9, 12};
    auto [p1, r1] = token_precision_recall(a, a);
    CHECK(p1 == 1.0);
    CHECK(r1 == 1.0);

    // pred contains gt plus as many junk tokens
    std::vector<int> pred = {5, 9, 12, 100, 101, 102};
    auto [p2, r2] = token_precision_recall(pred, a);
    CHECK(p2 == 0.5);
    CHECK(r2 == 1.0);

    auto [p3, r3] = token_precision_recall({}, a);
    CHECK(p3 == 0.0);
    CHECK(r3 == 0.0);
}

TEST_CASE("token precision recall matches a multiset recount, 1000 cases") {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> tok(0, 9), len(0, 8);
    for (int iter = 0; iter < 1000; ++iter) {
        std::vector<int> pred, gt;
        for (int i = len(rng); i > 0; --i) pred.push_back(tok(rng));
        for (int i = len(rng); i > 0; --i) gt.push_back(tok(rng));
        auto [p, r] = token_precision_recall(pred, gt);

        // brute force multiset intersection
        std::map<int, int> cp, cg;
        for (int t : pred) ++cp[t];
        for (int t : gt) ++cg[t];
        int hit = 0;
        for (auto& [t, n] : cp) hit += std::min(n, cg.count(t) ? cg[t] : 0);
        double wp, wr;
        if (pred.empty() && gt.empty()) {
            wp = wr = 1.0;
        } else if (pred.empty()) {
            wp = wr = 0.0;
        } else {
            wp = double(hit) / pred.size();
            wr = gt.empty() ? 1.0 : double(hit) / gt.size();
        }
        CHECK(std::abs(p - wp) < 1e-12);
        CHECK(std::abs(r - wr) < 1e-12);
    }
}

TEST_CASE("closed accuracy pinned examples") {
    std::vector<std::vector<int>> g = {{1}, {2}, {3}, {4}};
    CHECK(closed_accuracy(g, g) == 1.0);
    std::vector<std::vector<int>> wrong = {{9}, {9}, {9}, {9}};
    CHECK(closed_accuracy(wrong, g) == 0.0);
    std::vector<std::vector<int>> mixed = {{1}, {2}, {3}, {9}};
    CHECK(closed_accuracy(mixed, g) == 0.75);
    CHECK_THROWS(closed_accuracy({{1}}, g));
}

TEST_CASE("routing report: fractions, recount, tie-rule symmetry") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<real> gd(1e-6, 1.0);
    std::vector<std::vector<DispatchPlan>> per_layer(2);
    std::size_t brute[2][2] = {{0, 0}, {0, 0}};
    for (std::size_t layer = 0; layer < 2; ++layer)
        for (int p = 0; p < 30; ++p) {
            std::size_t L = 20;
            Tensor gates({L, 2});
            for (std::size_t t = 0; t < L; ++t) {
                real a = gd(rng), b = gd(rng);
                gates.at(t, 0) = a / (a + b);
                gates.at(t, 1) = b / (a + b);
            }
            DispatchPlan plan = route(gates, RouterConfig{1, 1.5});
            for (std::size_t e = 0; e < 2; ++e) brute[layer][e] += plan.kept[e].size();
            per_layer[layer].push_back(plan);
        }
    std::vector<RoutingRow> rows = routing_report(per_layer);
    REQUIRE(rows.size() == 4);
    for (std::size_t layer = 0; layer < 2; ++layer) {
        real frac = 0;
        for (const RoutingRow& r : rows)
            if (r.layer == layer) {
                CHECK(r.kept == brute[layer][r.expert]);
                frac += r.fraction;
            }
        CHECK(std::abs(frac - 1.0) < 1e-12);
    }

    // symmetric router: tie rule sends everything to expert 0
    Tensor sym({10, 2});
    for (std::size_t t = 0; t < 10; ++t) sym.at(t, 0) = sym.at(t, 1) = 0.5;
    DispatchPlan tied = route(sym, RouterConfig{1, 2.0});
    std::vector<RoutingRow> trows = routing_report({{tied}});
    CHECK(trows[0].fraction == 1.0);
    CHECK(trows[1].fraction == 0.0);
}

TEST_CASE("evaluation: deterministic and weight-preserving") {
    ModelConfig mc;
    mc.c_llm = 16;
    mc.c_v = 12;
    mc.c_p = 8;
    mc.m_samples = 4;
    MultimodalModel model = MultimodalModel::build(mc, 13);
    std::map<std::string, std::vector<real>> before;
    for (const auto& [name, t] : model.params()) before[name] = t.vec();

    EvalOptions opts;
    opts.n_vqa = 6;
    opts.n_region = 4;
    opts.n_grounding = 4;
    opts.n_zeroshot = 3;
    EvalReport a = evaluate(model, opts);
    EvalReport b = evaluate(model, opts);

    CHECK(a.closed_acc == b.closed_acc);
    CHECK(a.token_precision == b.token_precision);
    CHECK(a.token_recall == b.token_recall);
    CHECK(a.grounding.mean == b.grounding.mean);
    CHECK(a.zeroshot_dice == b.zeroshot_dice);

    for (const auto& [name, t] : model.params())
        CHECK(t.vec() == before[name]);  // evaluation never mutates weights

    // report formatting mentions every headline metric
    std::string text = format_report(a);
    CHECK(text.find("closed_accuracy") != std::string::npos);
    CHECK(text.find("mdice seen") != std::string::npos);
    CHECK(text.find("mdice zeroshot") != std::string::npos);
}
