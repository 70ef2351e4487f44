#pragma once

// Evaluation metrics (mDice, token precision/recall, closed-set accuracy),
// routing reports, and the synthetic eval harness.

#include <map>
#include <string>
#include <vector>

#include "mg/model.hpp"
#include "mg/moe.hpp"

namespace mg {

// 2|P∩G| / (|P|+|G|); empty∩empty counts as 1.
real dice_coeff(const Mask& pred, const Mask& gt);

struct DiceReport {
    std::map<int, real> per_class;  // class id -> mean dice over its samples
    real mean = 0.0;                // mean over classes present
};
DiceReport mdice(const std::vector<Mask>& pred, const std::vector<Mask>& gt,
                 const std::vector<int>& classes);

// multiset token overlap; empty pred -> precision 0 (both 1 when gt empty too)
std::pair<real, real> token_precision_recall(const std::vector<int>& pred,
                                             const std::vector<int>& gt);

real closed_accuracy(const std::vector<std::vector<int>>& preds,
                     const std::vector<std::vector<int>>& gts);

struct RoutingRow {
    std::size_t layer = 0;
    std::size_t expert = 0;
    std::size_t kept = 0;
    std::size_t dropped = 0;
    real fraction = 0.0;     // of kept assignments within the layer
    real image_fraction = 0.0;
    real text_fraction = 0.0;
};

// Aggregates recorded dispatch plans per MoE layer.
std::vector<RoutingRow> routing_report(const std::vector<std::vector<DispatchPlan>>& per_layer);
std::string format_routing(const std::vector<RoutingRow>& rows);

struct EvalOptions {
    std::size_t n_vqa = 100;
    std::size_t n_region = 60;
    std::size_t n_grounding = 60;
    std::size_t n_zeroshot = 40;
    std::uint64_t seed = 123;
    bool zeroshot = true;
};

struct EvalReport {
    real closed_acc = 0.0;
    std::size_t n_closed = 0;
    real token_precision = 0.0;
    real token_recall = 0.0;
    DiceReport grounding;   // seen classes
    real zeroshot_dice = 0.0;
    std::vector<RoutingRow> routing;
    real mean_score() const { return 0.5 * (closed_acc + grounding.mean); }
};

EvalReport evaluate(MultimodalModel& model, const EvalOptions& opts);

// one metric per line: name, class, value
std::string format_report(const EvalReport& report);

}  // namespace mg
