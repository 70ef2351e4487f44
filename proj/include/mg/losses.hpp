#pragma once

// Training losses: token cross-entropy, mask BCE-with-logits, soft dice,
// and their weighted combination.

#include "mg/tensor.hpp"

namespace mg {

struct LossWeights {
    real reg = 1.0;
    real bce = 2.0;
    real dice = 0.5;
};

// mean per-pixel BCE with logits; gt entries must be 0/1.
Tensor bce_loss(const Tensor& mask_logits, const Tensor& gt_mask);

// 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), p = sigmoid(logits), eps = 1.
Tensor dice_loss(const Tensor& mask_logits, const Tensor& gt_mask);

// weighted sum; pass undefined tensors for absent terms (they contribute 0).
Tensor combined_loss(const Tensor& l_reg, const Tensor& l_bce, const Tensor& l_dice,
                     const LossWeights& w);

}  // namespace mg
