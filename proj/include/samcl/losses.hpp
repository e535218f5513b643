#pragma once

// Training loss for mask prediction: focal + 10 * dice + mse, where the
// mse term penalizes the gap between the predicted IoU and the IoU of the
// thresholded mask against ground truth.

#include <vector>

#include "samcl/errors.hpp"
#include "samcl/metrics.hpp"
#include "samcl/tensor.hpp"

namespace samcl {

inline constexpr double kFocalGamma = 2.0;
inline constexpr double kFocalAlpha = 0.25;
inline constexpr double kDiceSmooth = 1.0;
inline constexpr double kDiceWeight = 10.0;

// Binary mask from logits; positive logits count as foreground.
inline Tensor threshold_logits(const Tensor& logits) {
    Tensor out = Tensor::zeros(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out.data()[i] = logits.data()[i] > 0.0 ? 1.0 : 0.0;
    }
    return out;
}

// Mean focal loss with alpha on the positive class. Uses softplus so a
// saturated logit never produces log(0).
inline Tensor focal_loss(const Tensor& logits, const Tensor& gt) {
    detail::require_same_shape(logits, gt, "focal_loss");
    Tensor p = sigmoid(logits);
    Tensor one_minus_p = scalar_add(scalar_mul(p, -1.0), 1.0);
    Tensor log_p_neg = softplus(scalar_mul(logits, -1.0));    // -log(p)
    Tensor log_q_neg = softplus(logits);                      // -log(1-p)
    Tensor pos = mul(gt, mul(mul(one_minus_p, one_minus_p), log_p_neg));
    Tensor neg_mask = scalar_add(scalar_mul(gt, -1.0), 1.0);
    Tensor neg = mul(neg_mask, mul(mul(p, p), log_q_neg));
    return mean(add(scalar_mul(pos, kFocalAlpha), scalar_mul(neg, 1.0 - kFocalAlpha)));
}

// Soft dice loss on probabilities: 1 - (2*sum(p*g)+s) / (sum(p)+sum(g)+s).
inline Tensor dice_loss(const Tensor& logits, const Tensor& gt) {
    detail::require_same_shape(logits, gt, "dice_loss");
    Tensor p = sigmoid(logits);
    Tensor inter = sum(mul(p, gt));
    Tensor denom = scalar_add(add(sum(p), sum(gt)), kDiceSmooth);
    Tensor ratio = divide(scalar_add(scalar_mul(inter, 2.0), kDiceSmooth), denom);
    return scalar_add(scalar_mul(ratio, -1.0), 1.0);
}

// Squared error between the IoU prediction and the measured IoU of the
// thresholded mask. The measured IoU is a constant w.r.t. the graph.
inline Tensor iou_mse_loss(const Tensor& logits, const Tensor& gt, const Tensor& predicted_iou) {
    const double actual = iou_binary(threshold_logits(logits), gt);
    Tensor diff = scalar_add(predicted_iou, -actual);
    return mul(diff, diff);
}

inline Tensor loss_seg(const Tensor& mask_logits, const Tensor& gt_mask, const Tensor& predicted_iou) {
    detail::require_same_shape(mask_logits, gt_mask, "loss_seg");
    detail::require_binary_mask(gt_mask, "loss_seg gt");
    if (predicted_iou.size() != 1) {
        throw dimension_error("loss_seg: predicted_iou " + shape_str(predicted_iou.shape()) +
                              " is not scalar");
    }
    Tensor focal = focal_loss(mask_logits, gt_mask);
    Tensor dice = dice_loss(mask_logits, gt_mask);
    Tensor mse = iou_mse_loss(mask_logits, gt_mask, predicted_iou);
    return add(add(focal, scalar_mul(dice, kDiceWeight)), mse);
}

} // namespace samcl
