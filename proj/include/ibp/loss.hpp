#pragma once

#include "ibp/tensor.hpp"

namespace ibp {

/// A scalar loss together with its gradient with respect to the argument.
struct LossValue {
    double value = 0.0;
    Tensor grad;
};

/// Main loss and additional-loss bookkeeping for one batch.
struct LossReport {
    double main_loss = 0.0;
    double aux_loss = 0.0;  // 0 when no regularizer is active
    Tensor dy;              // dL/d(predictions or logits)
    Tensor aux_seed;        // initializer of the extra pass
};

enum class LossKind { nll_softmax, squared };

// Main losses average over the batch: for a batch of B rows the gradient of
// row b carries a 1/B factor.

/// Softmax followed by negative log-likelihood, taken on the logits.
/// Gradient w.r.t. logits is (softmax(logits) - labels) / B.
LossValue nll_softmax_loss(const Tensor& logits, const Tensor& labels);

/// L = mean_b 0.5 * ||pred_b - label_b||^2; gradient (pred - labels) / B.
LossValue squared_loss(const Tensor& pred, const Tensor& labels);

// Additional losses. `dy0` is the input gradient of the batch-mean main loss,
// so row b equals g_b / B with g_b the per-sample input gradient. The
// additional losses are batch means of per-sample penalties on g_b; the
// returned seed is the gradient with respect to the argument as passed.

/// Loss IBP penalty mean_b (1/r)||g_b||_r^r. Seed: sign(dy0) for r = 1,
/// g = B * dy0 for r = 2. For B = 1 this is (1/r)||dy0||_r^r with seed
/// sign(dy0) or dy0.
LossValue aux_loss_lp(const Tensor& dy0, int r);

/// Penalty mean_b (1/r)||t_b||_r^r on the linearized-pass output t at the
/// prediction layer. Seed: sign(t) / B or t / B.
LossValue aux_loss_direction(const Tensor& pred_jvp, int r);

/// Loss-sensitivity penalty sum_b dy0_b . tangent_b (the mean over samples of
/// g_b . tangent_b). Seed: tangent.
LossValue aux_loss_dot(const Tensor& dy0, const Tensor& tangent);

}  // namespace ibp
