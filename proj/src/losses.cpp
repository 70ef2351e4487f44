#include "mg/losses.hpp"

#include <stdexcept>

namespace mg {

Tensor bce_loss(const Tensor& mask_logits, const Tensor& gt_mask) {
    if (mask_logits.shape() != gt_mask.shape())
        throw std::invalid_argument("bce_loss: logits/mask shape mismatch");
    // log(1+e^z) - g*z, with softplus carrying the stabilization
    Tensor per_pixel = sub(softplus(mask_logits), mul(gt_mask, mask_logits));
    return mean_all(per_pixel);
}

Tensor dice_loss(const Tensor& mask_logits, const Tensor& gt_mask) {
    if (mask_logits.shape() != gt_mask.shape())
        throw std::invalid_argument("dice_loss: logits/mask shape mismatch");
    constexpr real eps = 1.0;
    Tensor p = sigmoid(mask_logits);
    Tensor inter = sum_all(mul(p, gt_mask));
    Tensor denom = shift(add(sum_all(p), sum_all(gt_mask)), eps);
    Tensor ratio = divide(shift(scale(inter, 2.0), eps), denom);
    return shift(scale(ratio, -1.0), 1.0);
}

Tensor combined_loss(const Tensor& l_reg, const Tensor& l_bce, const Tensor& l_dice,
                     const LossWeights& w) {
    Tensor total = Tensor::scalar(0.0);
    if (l_reg.defined()) total = add(total, scale(l_reg, w.reg));
    if (l_bce.defined()) total = add(total, scale(l_bce, w.bce));
    if (l_dice.defined()) total = add(total, scale(l_dice, w.dice));
    return total;
}

}  // namespace mg
