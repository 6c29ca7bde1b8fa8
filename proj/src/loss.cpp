#include "ibp/loss.hpp"

#include <algorithm>
#include <cmath>

namespace ibp {

namespace {

std::size_t batch_of(const Tensor& t) { return t.rank() == 0 ? 1 : t.dim(0); }

void require_r(int r) {
    if (r != 1 && r != 2) throw ConfigError("additional loss exponent r must be 1 or 2");
}

}  // namespace

LossValue nll_softmax_loss(const Tensor& logits, const Tensor& labels) {
    require_same_shape(logits, labels, "nll_softmax_loss");
    if (!all_finite(logits)) throw NumericError("nll_softmax_loss: non-finite logits");
    const std::size_t batch = batch_of(logits), n = logits.size() / batch;
    const double inv_batch = 1.0 / static_cast<double>(batch);
    LossValue out{0.0, Tensor(logits.shape())};
    for (std::size_t b = 0; b < batch; ++b) {
        const double* z = logits.raw() + b * n;
        const double* l = labels.raw() + b * n;
        double* g = out.grad.raw() + b * n;
        const double top = *std::max_element(z, z + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += std::exp(z[j] - top);
        const double log_total = std::log(total);
        for (std::size_t j = 0; j < n; ++j) {
            const double log_p = z[j] - top - log_total;
            if (l[j] != 0.0) out.value -= l[j] * log_p;
            g[j] = (std::exp(log_p) - l[j]) * inv_batch;
        }
    }
    out.value *= inv_batch;
    return out;
}

LossValue squared_loss(const Tensor& pred, const Tensor& labels) {
    require_same_shape(pred, labels, "squared_loss");
    const double inv_batch = 1.0 / static_cast<double>(batch_of(pred));
    LossValue out{0.0, Tensor(pred.shape())};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - labels[i];
        out.value += 0.5 * d * d;
        out.grad[i] = d * inv_batch;
    }
    out.value *= inv_batch;
    return out;
}

LossValue aux_loss_lp(const Tensor& dy0, int r) {
    require_r(r);
    const double batch = static_cast<double>(batch_of(dy0));
    if (r == 1) {
        // sum_b ||g_b||_1 / B == ||dy0||_1
        return {lp_norm(dy0, 1), sign(dy0)};
    }
    Tensor g = dy0 * batch;
    return {lp_norm(g, 2) / batch, std::move(g)};
}

LossValue aux_loss_direction(const Tensor& pred_jvp, int r) {
    require_r(r);
    const double inv_batch = 1.0 / static_cast<double>(batch_of(pred_jvp));
    Tensor seed = r == 1 ? sign(pred_jvp) : pred_jvp;
    seed *= inv_batch;
    return {lp_norm(pred_jvp, r) * inv_batch, std::move(seed)};
}

LossValue aux_loss_dot(const Tensor& dy0, const Tensor& tangent) {
    require_same_shape(dy0, tangent, "aux_loss_dot");
    return {dot(dy0, tangent), tangent};
}

}  // namespace ibp
