#pragma once

#include <optional>
#include <string_view>
#include <utility>
#include <vector>

#include "ibp/loss.hpp"
#include "ibp/network.hpp"

namespace ibp {

enum class Algorithm { bp, loss_ibp, pred_ibp, tbp, fast_tbp, at, fast_at };

std::string_view to_string(Algorithm algo);
Algorithm algorithm_from_string(std::string_view name);
bool uses_beta(Algorithm algo);
bool uses_epsilon(Algorithm algo);
bool uses_tangents(Algorithm algo);

struct TrainConfig {
    Algorithm algo = Algorithm::bp;
    double learning_rate = 0.1;  // alpha
    double beta = 0.0;           // weight of the additional loss
    double epsilon = 0.0;        // adversarial step
    int r = 1;                   // exponent of the additional loss
    double momentum = 0.9;
    double decay = 0.98;  // gamma: alpha_t = alpha * gamma^epoch
    std::size_t epochs = 80;
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
    /// Leave the softmax Jacobian out of the linearized passes. Unset means
    /// the per-algorithm default: on for pred-ibp and tbp, off otherwise.
    std::optional<bool> skip_softmax;
    LossKind loss = LossKind::nll_softmax;
    /// Adversarial inputs are clamped to this range when set.
    std::optional<std::pair<double, double>> clip;

    bool effective_skip_softmax() const;
    /// Throws ConfigError when a hyperparameter is out of range.
    void validate() const;
};

/// Per-layer gradients; tensors of weightless layers stay empty. The
/// auxiliary gradient has no bias part.
struct LayerGrads {
    Tensor dw;
    Tensor db;
    Tensor dw_aux;
};

struct GradientSet {
    std::vector<LayerGrads> layers;

    static GradientSet zeros_like(const Network& net);
    bool all_finite() const;
};

struct Batch {
    Tensor x;       // B x input shape
    Tensor labels;  // B x classes, one-hot
    /// One batched tangent tensor (shaped like x) per transformation.
    std::vector<Tensor> tangents;
};

struct StepResult {
    double loss = 0.0;
    double aux_loss = 0.0;
    GradientSet grads;
};

// Every step leaves the final tape in `tape` for inspection. `rng` feeds
// dropout masks; forward passes after the first one reuse the masks.

StepResult step_bp(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape);
StepResult step_loss_ibp(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape);
StepResult step_pred_ibp(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape);
StepResult step_tbp(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape);
StepResult step_fast_tbp(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape);
StepResult step_at(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape);
StepResult step_fast_at(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape);

/// Dispatches on cfg.algo.
StepResult train_step(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape);

// --- building blocks --------------------------------------------------------

/// Forward pass plus main loss. Sets the backward seed at the scores the loss
/// is taken on (pre-softmax for nll) and returns that tape index.
struct ForwardLoss {
    double loss = 0.0;
    std::size_t index = 0;
    Tensor seed;
};
ForwardLoss forward_with_loss(Network& net, const Tensor& x, const Tensor& labels, LossKind kind,
                              const ForwardContext& ctx, Tape& tape);

/// Backward from the loss index; input_grad selects whether dy_0 is computed.
void backward_from_loss(const Network& net, Tape& tape, const ForwardLoss& fl, bool input_grad);

/// dw, db += contributions of the current tape (dw_i = y_{i-1}^T dy_i).
void accumulate_main_grads(const Network& net, const Tape& tape, GradientSet& grads);

/// Third pass seeded at the input with `seed`, then
/// dw_aux_i += d~y_{i-1}^T dy_i for every weighted layer.
void third_pass(const Network& net, Tape& tape, const Tensor& seed, GradientSet& grads);

enum class TangentLoss {
    prediction_lp,     // (1/r)||t_K||_r^r on the linearized prediction output
    loss_sensitivity,  // t . dL/d(scores): the loss derivative along the tangent
};

/// Linearized forward pass from `seed`, the chosen penalty on its output, a
/// linearized backward pass, and dw_aux_i += ~y_{i-1}^T d~y_i. Returns the
/// penalty value.
double tangent_pass(const Network& net, Tape& tape, std::size_t loss_index, const Tensor& seed,
                    TangentLoss penalty, int r, bool skip_softmax, GradientSet& grads);

/// x + epsilon * sign(grad), optionally clamped.
Tensor adversarial_input(const Tensor& x, const Tensor& grad, double epsilon,
                         const std::optional<std::pair<double, double>>& clip = std::nullopt);

// --- optimizer --------------------------------------------------------------

/// Classical momentum: v <- m v + (dw + beta dw_aux); w <- w - alpha_t v,
/// with alpha_t = alpha * gamma^epoch. Biases use db only.
class SgdMomentum {
public:
    explicit SgdMomentum(const Network& net);

    void update(Network& net, const GradientSet& grads, const TrainConfig& cfg, std::size_t epoch);
    static double learning_rate_at(const TrainConfig& cfg, std::size_t epoch);

private:
    std::vector<Tensor> vw_;
    std::vector<Tensor> vb_;
};

}  // namespace ibp
