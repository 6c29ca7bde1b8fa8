#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ibp/training.hpp"

namespace ibp {

/// Outcome of one verification. `max_error` is the largest error measure the
/// check uses (relative or absolute, see `detail`); `layer`/`index` locate
/// the worst parameter when the check compares weights.
struct CheckReport {
    std::string name;
    double max_error = 0.0;
    double tolerance = 0.0;
    std::size_t layer = 0;
    std::size_t index = 0;
    std::size_t compared = 0;
    std::size_t masked = 0;  // coordinates skipped at non-differentiable points
    bool pass = false;
    std::string detail;
};

/// Central difference (f(x + h) - f(x - h)) / 2h.
double central_difference(const std::function<double(double)>& f, double x, double h);

/// FD derivative of `loss` with respect to every weight and bias of `net`,
/// perturbing one scalar at a time in place. Results land in dw and db.
GradientSet fd_weight_grad(Network& net, const std::function<double(Network&)>& loss, double h = 1e-5);

// --- forward-only functionals ------------------------------------------------
// These only call Network::forward_to in evaluation mode; none touches the
// layers' vjp/jvp code.

/// Batch-mean softmax NLL of the network output on x (no dropout).
double oracle_nll(Network& net, const Tensor& x, const Tensor& labels);

/// (softmax(z) - l) / B at the current weights, computed from logits.
Tensor oracle_logit_seed(Network& net, const Tensor& x, const Tensor& labels);

/// Input gradient of sum_b c_b . z_b(x_b) by central differences in x, with
/// z the scores at tape index `end`.
Tensor oracle_input_grad(Network& net, const Tensor& x, const Tensor& c, std::size_t end, double h);

/// Directional derivative of the scores at tape index `end` along v, per
/// sample, by central differences with step h / ||v_b|| for sample b.
Tensor oracle_directional(Network& net, const Tensor& x, const Tensor& v, std::size_t end, double h);

// --- gradient checks ---------------------------------------------------------

struct GradCheckOptions {
    double h_weight = 1e-3;  // outer step over weights for the additional losses
    double h_main = 1e-5;    // step for main-loss derivatives
    double h_input = 1e-3;   // inner step over inputs
    double kink_threshold = 1e-7;
    /// FD is repeated at h, h/2, ..., (ladder steps); a coordinate uses the
    /// first three consecutive estimates agreeing to tol/3 and is masked when
    /// there are none.
    std::size_t ladder = 5;
    /// Relative errors use max(|a|, |b|, floor * max|b|) as denominator.
    double floor = 1e-3;
    /// Largest share of coordinates that may be skipped as non-differentiable.
    double max_masked_share = 0.05;
};

/// Runs one training step of cfg.algo (rng state is copied, weights are not
/// updated) and compares dw/db and dw_aux with finite differences of the
/// algorithm's declared losses. dw/db use tolerance 1e-6; dw_aux uses 1e-6
/// for r = 2 and for the dot penalty, 1e-4 for r = 1.
std::vector<CheckReport> check_algorithm_gradients(Network& net, const Batch& batch, const TrainConfig& cfg,
                                                   const GradCheckOptions& opt = {});

/// jvp == bias-free forward on linear layers (exact), jvp == vjp on relu,
/// sigmoid and softmax (1e-12) and the adjoint identity
/// <u, J v> == <J^T u, v> (1e-10 relative) on every layer.
std::vector<CheckReport> check_theorems(Network& net, const Tensor& x, std::uint64_t seed);

/// Fast TBP (third pass seeded by the tangent) against the four-pass route
/// with the loss-sensitivity penalty, per weight to 1e-10.
CheckReport check_fast_tbp_equivalence(Network& net, const Batch& batch, const Tensor& tangent);
/// TBP with the single tangent g = per-sample input gradient against
/// Prediction IBP, to 1e-12.
CheckReport check_tbp_pred_ibp_equivalence(Network& net, const Batch& batch, int r);

struct NoiseInjectionResult {
    double p = 0.0;
    double grad_sq = 0.0;      // ||grad_x L||^2, closed form
    double hessian_fd = 0.0;   // Tr(H) by Richardson-extrapolated second differences
    double hessian_formula = 0.0;
    double monte_carlo = 0.0;  // 2 (E[L(x + mu)] - L(x)) / sigma^2
};

/// Single linear neuron p = w.x + b with L = -[l ln|p| + (1 - l) ln|1 - p|].
double neuron_loss(const std::vector<double>& w, double b, const std::vector<double>& x, double label);

/// Throws NumericError when p is within 1e-6 of 0 or 1.
NoiseInjectionResult noise_injection(const std::vector<double>& w, double b, const std::vector<double>& x,
                                     double label, double sigma, std::size_t pairs, std::uint64_t seed);

/// analytic == FD trace to 1e-6 relative, MC within `mc_tolerance` relative.
CheckReport check_noise_injection(const std::vector<double>& w, double b, const std::vector<double>& x,
                                  double label, double sigma = 0.01, std::size_t pairs = 1000000,
                                  std::uint64_t seed = 1, double mc_tolerance = 0.05);

/// r(eps) = |L(x*(eps)) - L(x) - eps ||g||_1| for each eps. `loss` evaluates
/// the objective at an input, `grad` is its gradient at x.
std::vector<double> first_order_residuals(const std::function<double(const Tensor&)>& loss, const Tensor& x,
                                          const Tensor& grad, const std::vector<double>& eps_list);

/// Requires eps_list strictly decreasing and r(eps)/eps strictly decreasing.
CheckReport check_fast_at_firstorder(Network& net, const Batch& batch, const std::vector<double>& eps_list);

/// Fast AT gradients against a BP step at x*(eps), bitwise.
CheckReport check_fast_at_matches_bp(Network& net, const Batch& batch, double epsilon);

// --- fixed suite ---------------------------------------------------------------

/// 1 x 6 x 6 -> conv 4 3x3 pad 1 -> relu -> maxpool 3/2 -> fc 16 -> relu ->
/// fc 4 -> softmax, He-initialized from `seed`.
Network tiny_oracle_net(std::uint64_t seed);
/// A batch for the tiny net: Gaussian inputs, labels cycling over classes,
/// and `tangents` Gaussian tangent tensors.
Batch tiny_oracle_batch(std::uint64_t seed, std::size_t batch = 4, std::size_t tangents = 2);
/// A network containing every layer kind, for the linearization checks.
Network theorem_net(std::uint64_t seed);

/// Gradient checks for every algorithm, linearization and equivalence checks,
/// Fast AT checks and the noise-injection identity.
std::vector<CheckReport> run_gradcheck_suite(std::uint64_t seed);

}  // namespace ibp
