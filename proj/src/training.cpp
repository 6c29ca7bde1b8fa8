#include "ibp/training.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace ibp {

namespace {

constexpr std::string_view kAlgoNames[] = {"bp", "loss-ibp", "pred-ibp", "tbp", "fast-tbp", "at", "fast-at"};

std::size_t last_weighted(const Network& net) {
    for (std::size_t i = net.size(); i > 0; --i)
        if (net.layer(i - 1).has_weights()) return i - 1;
    return net.size();
}

// Lowest tape index whose gradient the weight updates read: dy[first + 1].
std::size_t backward_stop(const Network& net) {
    const std::size_t first = net.first_weighted();
    return first < net.size() ? first + 1 : net.size();
}

void check_finite(const StepResult& r, std::string_view algo) {
    if (!std::isfinite(r.loss) || !std::isfinite(r.aux_loss) || !r.grads.all_finite()) {
        throw NumericError(std::string(algo) + " step produced non-finite values (loss " +
                           std::to_string(r.loss) + ", aux " + std::to_string(r.aux_loss) + ")");
    }
}

ForwardContext train_ctx(Rng& rng, bool reuse) { return ForwardContext{Mode::train, &rng, reuse}; }

void require_tangents(const Batch& batch) {
    for (const Tensor& t : batch.tangents) {
        if (t.shape() != batch.x.shape()) {
            throw DimensionError("tangent shape " + to_string(t.shape()) + " does not match input " +
                                 to_string(batch.x.shape()));
        }
    }
}

// input gradient of the batch-mean loss -> per-sample input gradient g_b
Tensor per_sample_grad(const Tensor& dy0) { return dy0 * static_cast<double>(dy0.dim(0)); }

}  // namespace

std::string_view to_string(Algorithm algo) { return kAlgoNames[static_cast<std::size_t>(algo)]; }

Algorithm algorithm_from_string(std::string_view name) {
    for (std::size_t i = 0; i < std::size(kAlgoNames); ++i)
        if (kAlgoNames[i] == name) return static_cast<Algorithm>(i);
    throw ConfigError("unknown algorithm '" + std::string(name) + "'");
}

bool uses_beta(Algorithm a) {
    return a == Algorithm::loss_ibp || a == Algorithm::pred_ibp || a == Algorithm::tbp ||
           a == Algorithm::fast_tbp;
}
bool uses_epsilon(Algorithm a) { return a == Algorithm::at || a == Algorithm::fast_at; }
bool uses_tangents(Algorithm a) { return a == Algorithm::tbp || a == Algorithm::fast_tbp; }

bool TrainConfig::effective_skip_softmax() const {
    if (skip_softmax) return *skip_softmax;
    return algo == Algorithm::pred_ibp || algo == Algorithm::tbp;
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError(what); };
    if (!(learning_rate > 0.0)) fail("learning rate must be > 0");
    if (!(beta >= 0.0)) fail("beta must be >= 0");
    if (!(epsilon >= 0.0)) fail("epsilon must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
    if (!(decay > 0.0 && decay <= 1.0)) fail("decay must lie in (0, 1]");
    if (r != 1 && r != 2) fail("r must be 1 or 2");
    if (batch_size == 0) fail("batch size must be positive");
    if (clip && !(clip->first < clip->second)) fail("clip range is empty");
}

GradientSet GradientSet::zeros_like(const Network& net) {
    GradientSet g;
    g.layers.resize(net.size());
    for (std::size_t i = 0; i < net.size(); ++i) {
        const Layer& l = net.layer(i);
        if (!l.has_weights()) continue;
        g.layers[i].dw = Tensor(l.weights().shape());
        g.layers[i].db = Tensor(l.bias().shape());
        g.layers[i].dw_aux = Tensor(l.weights().shape());
    }
    return g;
}

bool GradientSet::all_finite() const {
    return std::all_of(layers.begin(), layers.end(), [](const LayerGrads& g) {
        return ibp::all_finite(g.dw) && ibp::all_finite(g.db) && ibp::all_finite(g.dw_aux);
    });
}

// --- building blocks --------------------------------------------------------

ForwardLoss forward_with_loss(Network& net, const Tensor& x, const Tensor& labels, LossKind kind,
                              const ForwardContext& ctx, Tape& tape) {
    net.forward(x, ctx, tape);
    ForwardLoss out;
    LossValue lv;
    if (kind == LossKind::nll_softmax) {
        out.index = net.logits_index();
        lv = nll_softmax_loss(tape.y[out.index], labels);
    } else {
        out.index = net.size();
        lv = squared_loss(tape.y[out.index], labels);
    }
    out.loss = lv.value;
    out.seed = std::move(lv.grad);
    return out;
}

void backward_from_loss(const Network& net, Tape& tape, const ForwardLoss& fl, bool input_grad) {
    const std::size_t stop = input_grad ? 0 : std::min(backward_stop(net), fl.index);
    net.backward(tape, fl.index, fl.seed, stop);
}

void accumulate_main_grads(const Network& net, const Tape& tape, GradientSet& grads) {
    for (std::size_t i = 0; i < net.size(); ++i) {
        const Layer& l = net.layer(i);
        if (!l.has_weights()) continue;
        l.accumulate_main_grad(tape.dy.at(i + 1), grads.layers[i].dw, &grads.layers[i].db);
    }
}

void third_pass(const Network& net, Tape& tape, const Tensor& seed, GradientSet& grads) {
    const std::size_t end = last_weighted(net);
    if (end >= net.size()) return;
    net.linearized_forward(tape.dty, seed, end);
    for (std::size_t i = 0; i <= end; ++i) {
        const Layer& l = net.layer(i);
        if (!l.has_weights()) continue;
        l.accumulate_weight_grad(tape.dty[i], tape.dy.at(i + 1), grads.layers[i].dw_aux);
    }
}

double tangent_pass(const Network& net, Tape& tape, std::size_t loss_index, const Tensor& seed,
                    TangentLoss penalty, int r, bool skip_softmax, GradientSet& grads) {
    std::size_t end = loss_index;
    if (penalty == TangentLoss::prediction_lp && net.ends_with_softmax())
        end = skip_softmax ? net.logits_index() : net.size();
    net.linearized_forward(tape.tangent_y, seed, end);

    LossValue aux;
    if (penalty == TangentLoss::prediction_lp) {
        aux = aux_loss_direction(tape.tangent_y[end], r);
    } else {
        aux = {dot(tape.tangent_y[end], tape.dy.at(end)), tape.dy.at(end)};
    }

    tape.tangent_dy.assign(net.size() + 1, Tensor());
    tape.tangent_dy[end] = std::move(aux.grad);
    const std::size_t stop = std::min(backward_stop(net), end);
    for (std::size_t i = end; i > stop; --i) tape.tangent_dy[i - 1] = net.layer(i - 1).vjp(tape.tangent_dy[i]);

    for (std::size_t i = 0; i < end; ++i) {
        const Layer& l = net.layer(i);
        if (!l.has_weights()) continue;
        l.accumulate_weight_grad(tape.tangent_y[i], tape.tangent_dy[i + 1], grads.layers[i].dw_aux);
    }
    return aux.value;
}

Tensor adversarial_input(const Tensor& x, const Tensor& grad, double epsilon,
                         const std::optional<std::pair<double, double>>& clip) {
    require_same_shape(x, grad, "adversarial_input");
    Tensor out = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
        out[i] = x[i] + epsilon * s;
        if (clip) out[i] = std::clamp(out[i], clip->first, clip->second);
    }
    return out;
}

// --- steps ------------------------------------------------------------------

StepResult step_bp(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape) {
    StepResult res{0.0, 0.0, GradientSet::zeros_like(net)};
    ForwardLoss fl = forward_with_loss(net, batch.x, batch.labels, cfg.loss, train_ctx(rng, false), tape);
    backward_from_loss(net, tape, fl, false);
    accumulate_main_grads(net, tape, res.grads);
    res.loss = fl.loss;
    check_finite(res, "bp");
    return res;
}

StepResult step_loss_ibp(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape) {
    StepResult res{0.0, 0.0, GradientSet::zeros_like(net)};
    ForwardLoss fl = forward_with_loss(net, batch.x, batch.labels, cfg.loss, train_ctx(rng, false), tape);
    backward_from_loss(net, tape, fl, true);
    accumulate_main_grads(net, tape, res.grads);
    LossValue aux = aux_loss_lp(tape.dy[0], cfg.r);
    third_pass(net, tape, aux.grad, res.grads);
    res.loss = fl.loss;
    res.aux_loss = aux.value;
    check_finite(res, "loss-ibp");
    return res;
}

StepResult step_pred_ibp(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape) {
    StepResult res{0.0, 0.0, GradientSet::zeros_like(net)};
    ForwardLoss fl = forward_with_loss(net, batch.x, batch.labels, cfg.loss, train_ctx(rng, false), tape);
    backward_from_loss(net, tape, fl, true);
    accumulate_main_grads(net, tape, res.grads);
    res.aux_loss = tangent_pass(net, tape, fl.index, per_sample_grad(tape.dy[0]), TangentLoss::prediction_lp,
                                cfg.r, cfg.effective_skip_softmax(), res.grads);
    res.loss = fl.loss;
    check_finite(res, "pred-ibp");
    return res;
}

StepResult step_tbp(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape) {
    require_tangents(batch);
    StepResult res{0.0, 0.0, GradientSet::zeros_like(net)};
    ForwardLoss fl = forward_with_loss(net, batch.x, batch.labels, cfg.loss, train_ctx(rng, false), tape);
    backward_from_loss(net, tape, fl, false);
    accumulate_main_grads(net, tape, res.grads);
    for (const Tensor& t : batch.tangents) {
        res.aux_loss += tangent_pass(net, tape, fl.index, t, TangentLoss::prediction_lp, cfg.r,
                                     cfg.effective_skip_softmax(), res.grads);
    }
    res.loss = fl.loss;
    check_finite(res, "tbp");
    return res;
}

StepResult step_fast_tbp(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape) {
    require_tangents(batch);
    StepResult res{0.0, 0.0, GradientSet::zeros_like(net)};
    ForwardLoss fl = forward_with_loss(net, batch.x, batch.labels, cfg.loss, train_ctx(rng, false), tape);
    backward_from_loss(net, tape, fl, true);
    accumulate_main_grads(net, tape, res.grads);
    for (const Tensor& t : batch.tangents) {
        LossValue aux = aux_loss_dot(tape.dy[0], t);
        third_pass(net, tape, aux.grad, res.grads);
        res.aux_loss += aux.value;
    }
    res.loss = fl.loss;
    check_finite(res, "fast-tbp");
    return res;
}

StepResult step_at(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape) {
    StepResult res{0.0, 0.0, GradientSet::zeros_like(net)};
    ForwardLoss clean = forward_with_loss(net, batch.x, batch.labels, cfg.loss, train_ctx(rng, false), tape);
    backward_from_loss(net, tape, clean, true);
    accumulate_main_grads(net, tape, res.grads);

    const Tensor x_adv = adversarial_input(batch.x, tape.dy[0], cfg.epsilon, cfg.clip);
    GradientSet adv_grads = GradientSet::zeros_like(net);
    ForwardLoss adv = forward_with_loss(net, x_adv, batch.labels, cfg.loss, train_ctx(rng, true), tape);
    backward_from_loss(net, tape, adv, false);
    accumulate_main_grads(net, tape, adv_grads);

    for (std::size_t i = 0; i < net.size(); ++i) {
        LayerGrads& g = res.grads.layers[i];
        if (g.dw.empty()) continue;
        (g.dw += adv_grads.layers[i].dw) *= 0.5;
        (g.db += adv_grads.layers[i].db) *= 0.5;
    }
    res.loss = 0.5 * (clean.loss + adv.loss);
    check_finite(res, "at");
    return res;
}

StepResult step_fast_at(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape) {
    StepResult res{0.0, 0.0, GradientSet::zeros_like(net)};
    ForwardLoss clean = forward_with_loss(net, batch.x, batch.labels, cfg.loss, train_ctx(rng, false), tape);
    backward_from_loss(net, tape, clean, true);
    const Tensor x_adv = adversarial_input(batch.x, tape.dy[0], cfg.epsilon, cfg.clip);

    ForwardLoss adv = forward_with_loss(net, x_adv, batch.labels, cfg.loss, train_ctx(rng, true), tape);
    backward_from_loss(net, tape, adv, false);
    accumulate_main_grads(net, tape, res.grads);
    res.loss = adv.loss;
    check_finite(res, "fast-at");
    return res;
}

StepResult train_step(Network& net, const Batch& batch, const TrainConfig& cfg, Rng& rng, Tape& tape) {
    switch (cfg.algo) {
        case Algorithm::bp: return step_bp(net, batch, cfg, rng, tape);
        case Algorithm::loss_ibp: return step_loss_ibp(net, batch, cfg, rng, tape);
        case Algorithm::pred_ibp: return step_pred_ibp(net, batch, cfg, rng, tape);
        case Algorithm::tbp: return step_tbp(net, batch, cfg, rng, tape);
        case Algorithm::fast_tbp: return step_fast_tbp(net, batch, cfg, rng, tape);
        case Algorithm::at: return step_at(net, batch, cfg, rng, tape);
        case Algorithm::fast_at: return step_fast_at(net, batch, cfg, rng, tape);
    }
    throw ConfigError("unknown algorithm");
}

// --- optimizer --------------------------------------------------------------

SgdMomentum::SgdMomentum(const Network& net) : vw_(net.size()), vb_(net.size()) {
    for (std::size_t i = 0; i < net.size(); ++i) {
        if (!net.layer(i).has_weights()) continue;
        vw_[i] = Tensor(net.layer(i).weights().shape());
        vb_[i] = Tensor(net.layer(i).bias().shape());
    }
}

double SgdMomentum::learning_rate_at(const TrainConfig& cfg, std::size_t epoch) {
    return cfg.learning_rate * std::pow(cfg.decay, static_cast<double>(epoch));
}

void SgdMomentum::update(Network& net, const GradientSet& grads, const TrainConfig& cfg, std::size_t epoch) {
    if (grads.layers.size() != net.size()) throw DimensionError("gradient set does not match network");
    if (!grads.all_finite()) throw NumericError("sgd update: non-finite gradients");
    const double lr = learning_rate_at(cfg, epoch);
    const bool with_aux = cfg.beta != 0.0;
    for (std::size_t i = 0; i < net.size(); ++i) {
        Layer& l = net.layer(i);
        if (!l.has_weights()) continue;
        const LayerGrads& g = grads.layers[i];
        Tensor& vw = vw_[i];
        Tensor& vb = vb_[i];
        Tensor& w = l.weights();
        Tensor& b = l.bias();
        for (std::size_t k = 0; k < w.size(); ++k) {
            double step = g.dw[k];
            if (with_aux) step += cfg.beta * g.dw_aux[k];
            vw[k] = cfg.momentum * vw[k] + step;
            w[k] -= lr * vw[k];
        }
        for (std::size_t k = 0; k < b.size(); ++k) {
            vb[k] = cfg.momentum * vb[k] + g.db[k];
            b[k] -= lr * vb[k];
        }
    }
}

}  // namespace ibp
