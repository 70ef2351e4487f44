#include "mg/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mg {

LoRALinear::LoRALinear(const Linear& base_layer, std::size_t r, real alpha_,
                       std::mt19937_64& rng)
    : base(base_layer), alpha(alpha_), rank(r) {
    std::size_t out_dim = base.w.rows(), in_dim = base.w.cols();
    if (r < 1 || r > std::min(in_dim, out_dim))
        throw std::invalid_argument("lora: rank out of range for layer dims");
    lora_a = Tensor::randn({r, in_dim}, rng, kInitStd);
    lora_b = Tensor::zeros({out_dim, r});
}

Tensor LoRALinear::forward(const Tensor& x) const {
    Tensor y = base.forward(x);
    Tensor delta = linear(linear(x, lora_a, Tensor()), lora_b, Tensor());
    return add(y, scale(delta, alpha / static_cast<real>(rank)));
}

void LoRALinear::collect(const std::string& prefix, ParamList& out) const {
    base.collect(prefix + ".base", out);
    param(out, prefix + ".lora_a", lora_a);
    param(out, prefix + ".lora_b", lora_b);
}

Expert::Expert(const PlainFFN& base, std::size_t r, real alpha, std::mt19937_64& rng)
    : fc1(base.fc1, r, alpha, rng), fc2(base.fc2, r, alpha, rng) {}

void Expert::collect(const std::string& prefix, ParamList& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

std::size_t expert_capacity(real capacity_factor, std::size_t num_tokens,
                            std::size_t num_experts) {
    return static_cast<std::size_t>(
        std::ceil(capacity_factor * static_cast<real>(num_tokens) /
                  static_cast<real>(num_experts)));
}

DispatchPlan route(const Tensor& gates, const RouterConfig& cfg) {
    std::size_t L = gates.rows(), E = gates.cols();
    if (cfg.top_k < 1 || cfg.top_k > E)
        throw std::invalid_argument("route: top_k out of range");
    if (cfg.capacity_factor <= 0.0)
        throw std::invalid_argument("route: capacity factor must be positive");

    DispatchPlan plan;
    plan.num_tokens = L;
    plan.num_experts = E;
    plan.capacity = expert_capacity(cfg.capacity_factor, L, E);
    plan.gates = gates.vec();
    plan.selected_experts.resize(L);
    plan.kept.resize(E);
    plan.dropped_assignments_per_expert.assign(E, 0);

    for (std::size_t t = 0; t < L; ++t) {
        std::vector<std::size_t> order(E);
        std::iota(order.begin(), order.end(), 0);
        // stable sort by descending gate; ties keep ascending expert index
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) {
                             return gates.at(t, a) > gates.at(t, b);
                         });
        plan.selected_experts[t].assign(order.begin(),
                                        order.begin() + static_cast<long>(cfg.top_k));
    }
    for (std::size_t t = 0; t < L; ++t) {
        bool any_kept = false;
        for (std::size_t e : plan.selected_experts[t]) {
            if (plan.kept[e].size() < plan.capacity) {
                plan.kept[e].push_back(t);
                any_kept = true;
            } else {
                ++plan.dropped_assignments_per_expert[e];
            }
        }
        if (!any_kept) plan.fully_dropped.push_back(t);
    }
    return plan;
}

std::vector<ExpertLoad> expert_load_stats(const std::vector<DispatchPlan>& plans) {
    if (plans.empty())
        throw std::invalid_argument("expert_load_stats: no plans");
    std::size_t E = plans[0].num_experts;
    std::vector<ExpertLoad> stats(E);
    std::size_t total_kept = 0;
    for (const DispatchPlan& p : plans) {
        if (p.num_experts != E)
            throw std::invalid_argument("expert_load_stats: expert count mismatch");
        for (std::size_t e = 0; e < E; ++e) {
            stats[e].kept += p.kept[e].size();
            stats[e].dropped += p.dropped_assignments_per_expert[e];
            total_kept += p.kept[e].size();
            if (!p.origin.empty()) {
                for (std::size_t t : p.kept[e]) {
                    if (p.origin[t] == 0) ++stats[e].image_kept;
                    else ++stats[e].text_kept;
                }
            }
        }
    }
    for (ExpertLoad& s : stats)
        s.fraction = total_kept ? static_cast<real>(s.kept) / static_cast<real>(total_kept)
                                : 0.0;
    return stats;
}

MoELayer::MoELayer(std::size_t dim, RouterConfig cfg, std::size_t lora_r,
                   real lora_alpha, std::mt19937_64& rng)
    : config(cfg) {
    router_w = Tensor::zeros({kNumExperts, dim});
    for (auto& e : experts)
        e = Expert(PlainFFN(dim, rng), lora_r, lora_alpha, rng);
}

MoELayer::MoELayer(const PlainFFN& expert_vl, const PlainFFN& expert_ground,
                   RouterConfig cfg, std::size_t lora_r, real lora_alpha,
                   std::mt19937_64& rng)
    : config(cfg) {
    std::size_t dim = expert_vl.fc1.w.cols();
    if (expert_ground.fc1.w.cols() != dim ||
        expert_ground.fc1.w.rows() != expert_vl.fc1.w.rows())
        throw std::invalid_argument("moe: source FFN topologies differ");
    router_w = Tensor::zeros({kNumExperts, dim});
    experts[0] = Expert(expert_vl, lora_r, lora_alpha, rng);
    experts[1] = Expert(expert_ground, lora_r, lora_alpha, rng);
}

Tensor MoELayer::forward(const Tensor& x) {
    std::size_t L = x.rows();
    Tensor gate_logits = linear(x, router_w, Tensor());
    Tensor gates = softmax(gate_logits, 1);
    DispatchPlan plan = route(gates, config);
    plan.origin = token_origin;

    std::vector<Tensor> contributions;
    for (std::size_t e = 0; e < kNumExperts; ++e) {
        const auto& kept = plan.kept[e];
        if (kept.empty()) continue;
        Tensor xe = gather_rows(x, kept);
        Tensor ye = experts[e].forward(xe);
        std::vector<std::pair<std::size_t, std::size_t>> rc;
        rc.reserve(kept.size());
        for (std::size_t t : kept) rc.emplace_back(t, e);
        Tensor ge = gather_entries(gates, rc);
        contributions.push_back(scatter_rows(kept, row_scale(ye, ge), L));
    }
    if (!plan.fully_dropped.empty()) {
        // capacity-overflow tokens pass through unchanged
        contributions.push_back(
            scatter_rows(plan.fully_dropped, gather_rows(x, plan.fully_dropped), L));
    }
    Tensor out = contributions[0];
    for (std::size_t i = 1; i < contributions.size(); ++i)
        out = add(out, contributions[i]);

    last_plan = plan;
    if (record_plans) plans.push_back(std::move(plan));
    return out;
}

void MoELayer::collect(const std::string& prefix, ParamList& out) const {
    param(out, prefix + ".router.weight", router_w);
    experts[0].collect(prefix + ".expert0", out);
    experts[1].collect(prefix + ".expert1", out);
}

}  // namespace mg
