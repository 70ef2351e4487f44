#pragma once

// Two-expert mixture-of-experts FFN slot: softmax router, top-k dispatch
// with a capacity cap, LoRA-adapted experts, gate-weighted combine.

#include <cstdint>
#include <vector>

#include "mg/nn.hpp"

namespace mg {

// Frozen base projection plus low-rank update (alpha/r) * B * A.
// B starts at zero, so the adapted layer equals the base at init.
struct LoRALinear {
    Linear base;
    Tensor lora_a;  // [r x in]
    Tensor lora_b;  // [out x r]
    real alpha = 16.0;
    std::size_t rank = 8;

    LoRALinear() = default;
    LoRALinear(const Linear& base_layer, std::size_t r, real alpha_,
               std::mt19937_64& rng);

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out) const;
};

struct Expert {
    LoRALinear fc1, fc2;

    Expert() = default;
    // Wraps an existing FFN's projections as frozen bases.
    Expert(const PlainFFN& base, std::size_t r, real alpha, std::mt19937_64& rng);

    Tensor forward(const Tensor& x) const {
        return fc2.forward(gelu(fc1.forward(x)));
    }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct RouterConfig {
    std::size_t top_k = 1;
    real capacity_factor = 1.5;
};

struct DispatchPlan {
    std::size_t num_tokens = 0;
    std::size_t num_experts = 2;
    std::size_t capacity = 0;
    std::vector<real> gates;                      // row-major [tokens x experts]
    std::vector<std::vector<std::size_t>> selected_experts;  // per token, rank order
    std::vector<std::vector<std::size_t>> kept;   // per expert, admission order
    std::vector<std::size_t> dropped_assignments_per_expert;
    std::vector<std::size_t> fully_dropped;       // tokens with no kept assignment
    std::vector<std::uint8_t> origin;             // optional: 0 = image, 1 = text

    real gate(std::size_t token, std::size_t expert) const {
        return gates[token * num_experts + expert];
    }
};

std::size_t expert_capacity(real capacity_factor, std::size_t num_tokens,
                            std::size_t num_experts);

// Builds the dispatch plan from gate probabilities (plain values, no grad).
// Ties in expert selection break toward the lower expert index; capacity
// admission is by ascending token position.
DispatchPlan route(const Tensor& gates, const RouterConfig& cfg);

struct ExpertLoad {
    std::size_t kept = 0;
    std::size_t dropped = 0;
    std::size_t image_kept = 0;
    std::size_t text_kept = 0;
    real fraction = 0.0;  // of all kept assignments
};

std::vector<ExpertLoad> expert_load_stats(const std::vector<DispatchPlan>& plans);

class MoELayer : public FeedForward {
public:
    static constexpr std::size_t kNumExperts = 2;

    MoELayer() = default;
    // Fresh layer with randomly initialized expert bases (joint-training baseline).
    MoELayer(std::size_t dim, RouterConfig cfg, std::size_t lora_r, real lora_alpha,
             std::mt19937_64& rng);
    // Stage-IV assembly: expert bases copied from two source FFNs, zero-B LoRA,
    // router weights zero-initialized.
    MoELayer(const PlainFFN& expert_vl, const PlainFFN& expert_ground,
             RouterConfig cfg, std::size_t lora_r, real lora_alpha,
             std::mt19937_64& rng);

    Tensor forward(const Tensor& x) override;
    void collect(const std::string& prefix, ParamList& out) const override;

    RouterConfig config;
    Tensor router_w;  // [2 x dim]
    Expert experts[kNumExperts];

    // set before forward to tag routing stats with token origins
    std::vector<std::uint8_t> token_origin;
    bool record_plans = false;
    std::vector<DispatchPlan> plans;
    DispatchPlan last_plan;
};

}  // namespace mg
