#include "ibp/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>

namespace ibp {

namespace {

constexpr ForwardContext kEval{Mode::eval, nullptr, false};

CheckReport make_report(std::string name, double tol) {
    CheckReport r;
    r.name = std::move(name);
    r.tolerance = tol;
    return r;
}

std::size_t batch_of(const Tensor& t) { return t.dim(0); }

// One compared tensor: analytic value and FD estimates at h, h/2, h/4, ...
struct Slot {
    const Tensor* analytic;  // null means "expected zero"
    std::vector<const Tensor*> fd;
    std::size_t layer;
};

CheckReport compare_slots(std::string name, const std::vector<Slot>& slots, double tol, const GradCheckOptions& opt) {
    CheckReport rep;
    rep.name = std::move(name);
    rep.tolerance = tol;
    double scale = 0.0;
    for (const Slot& s : slots) scale = std::max(scale, max_abs(*s.fd.back()));
    const double floor = std::max(opt.floor * scale, 1e-300);
    const double agree = tol / 3.0;
    auto rel = [floor](double x, double y) { return std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}); };
    for (const Slot& s : slots) {
        for (std::size_t k = 0; k < s.fd.front()->size(); ++k) {
            const double a = s.analytic ? (*s.analytic)[k] : 0.0;
            ++rep.compared;
            // three consecutive steps that agree did not straddle a kink
            std::optional<double> f;
            for (std::size_t j = 0; j + 2 < s.fd.size() && !f; ++j) {
                const double f0 = (*s.fd[j])[k], f1 = (*s.fd[j + 1])[k], f2 = (*s.fd[j + 2])[k];
                if (rel(f0, f1) <= agree && rel(f1, f2) <= agree) f = f2;
            }
            if (!f) {
                ++rep.masked;
                continue;
            }
            const double e = rel(a, *f);
            if (e > rep.max_error) {
                rep.max_error = e;
                rep.layer = s.layer;
                rep.index = k;
            }
        }
    }
    const bool few_masked =
        static_cast<double>(rep.masked) <= opt.max_masked_share * static_cast<double>(rep.compared);
    rep.pass = rep.max_error <= tol && few_masked;
    std::ostringstream d;
    d << "relative error, floor " << opt.floor << " x max|fd| = " << floor;
    if (!few_masked) d << "; too many kink-masked coordinates";
    rep.detail = d.str();
    return rep;
}

double nll_rows(const Tensor& logits, const Tensor& labels) {
    const std::size_t B = batch_of(logits), n = logits.size() / B;
    double total = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* z = logits.raw() + b * n;
        const double* l = labels.raw() + b * n;
        double top = z[0];
        for (std::size_t j = 1; j < n; ++j) top = std::max(top, z[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] - top);
        const double lse = top + std::log(s);
        for (std::size_t j = 0; j < n; ++j) total -= l[j] * (z[j] - lse);
    }
    return total / static_cast<double>(B);
}

std::size_t scores_index(const Network& net) { return net.ends_with_softmax() ? net.size() - 1 : net.size(); }

// (1/r) sum |t|^r with signs frozen where the base value is within `kink` of 0
double frozen_lp(const Tensor& t, const Tensor& base, int r, double kink) {
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (r == 2) {
            s += 0.5 * t[i] * t[i];
        } else if (std::abs(base[i]) < kink) {
            s += (base[i] > 0.0 ? 1.0 : (base[i] < 0.0 ? -1.0 : 0.0)) * t[i];
        } else {
            s += std::abs(t[i]);
        }
    }
    return s;
}

Tensor sign_with_threshold(const Tensor& g, double rel) {
    const double cut = rel * max_abs(g);
    Tensor s(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) s[i] = g[i] > cut ? 1.0 : (g[i] < -cut ? -1.0 : 0.0);
    return s;
}

std::vector<GradientSet> fd_ladder(Network& net, const std::function<double(Network&)>& loss, double h,
                                   std::size_t steps) {
    std::vector<GradientSet> out;
    for (std::size_t j = 0; j < std::max<std::size_t>(steps, 3); ++j, h *= 0.5) out.push_back(fd_weight_grad(net, loss, h));
    return out;
}

std::vector<const Tensor*> pick(const std::vector<GradientSet>& fd, std::size_t layer, bool bias) {
    std::vector<const Tensor*> out;
    for (const GradientSet& g : fd) out.push_back(bias ? &g.layers[layer].db : &g.layers[layer].dw);
    return out;
}

GradientSet gradients_of(Network& net, const Batch& batch, const TrainConfig& cfg) {
    Rng rng(cfg.seed);
    Tape tape;
    return train_step(net, batch, cfg, rng, tape).grads;
}

}  // namespace

double central_difference(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

GradientSet fd_weight_grad(Network& net, const std::function<double(Network&)>& loss, double h) {
    GradientSet g = GradientSet::zeros_like(net);
    for (std::size_t i = 0; i < net.size(); ++i) {
        Layer& l = net.layer(i);
        if (!l.has_weights()) continue;
        for (auto [param, out] : {std::pair{&l.weights(), &g.layers[i].dw}, std::pair{&l.bias(), &g.layers[i].db}}) {
            for (std::size_t k = 0; k < param->size(); ++k) {
                const double keep = (*param)[k];
                (*param)[k] = keep + h;
                const double up = loss(net);
                (*param)[k] = keep - h;
                const double down = loss(net);
                (*param)[k] = keep;
                (*out)[k] = (up - down) / (2.0 * h);
            }
        }
    }
    return g;
}

double oracle_nll(Network& net, const Tensor& x, const Tensor& labels) {
    return nll_rows(net.forward_to(x, kEval, scores_index(net)), labels);
}

Tensor oracle_logit_seed(Network& net, const Tensor& x, const Tensor& labels) {
    Tensor z = net.forward_to(x, kEval, scores_index(net));
    const std::size_t B = batch_of(z), n = z.size() / B;
    for (std::size_t b = 0; b < B; ++b) {
        double* r = z.raw() + b * n;
        const double top = *std::max_element(r, r + n);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(r[j] - top);
        for (std::size_t j = 0; j < n; ++j)
            r[j] = (std::exp(r[j] - top) / s - labels[b * n + j]) / static_cast<double>(B);
    }
    return z;
}

Tensor oracle_input_grad(Network& net, const Tensor& x, const Tensor& c, std::size_t end, double h) {
    const std::size_t B = batch_of(x), d = x.stride0(), n = c.stride0();
    Tensor g(x.shape());
    Tensor xp = x;
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t b = 0; b < B; ++b) xp[b * d + j] = x[b * d + j] + h;
        const Tensor up = net.forward_to(xp, kEval, end);
        for (std::size_t b = 0; b < B; ++b) xp[b * d + j] = x[b * d + j] - h;
        const Tensor down = net.forward_to(xp, kEval, end);
        for (std::size_t b = 0; b < B; ++b) {
            xp[b * d + j] = x[b * d + j];
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += c[b * n + k] * (up[b * n + k] - down[b * n + k]);
            g[b * d + j] = s / (2.0 * h);
        }
    }
    return g;
}

Tensor oracle_directional(Network& net, const Tensor& x, const Tensor& v, std::size_t end, double h) {
    require_same_shape(x, v, "oracle_directional");
    // every sample moves by h in input space: step h / ||v_b||
    const std::size_t B = batch_of(x), d = x.stride0();
    std::vector<double> step(B, h);
    Tensor xp = x, xm = x;
    for (std::size_t b = 0; b < B; ++b) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += v[b * d + j] * v[b * d + j];
        if (ss > 0.0) step[b] = h / std::sqrt(ss);
        for (std::size_t j = 0; j < d; ++j) {
            xp[b * d + j] += step[b] * v[b * d + j];
            xm[b * d + j] -= step[b] * v[b * d + j];
        }
    }
    Tensor out = net.forward_to(xp, kEval, end) - net.forward_to(xm, kEval, end);
    const std::size_t n = out.stride0();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < n; ++k) out[b * n + k] /= 2.0 * step[b];
    return out;
}

// --- gradient checks ---------------------------------------------------------

std::vector<CheckReport> check_algorithm_gradients(Network& net, const Batch& batch, const TrainConfig& cfg,
                                                   const GradCheckOptions& opt) {
    cfg.validate();
    const std::string tag = std::string(to_string(cfg.algo)) + (uses_beta(cfg.algo) && cfg.algo != Algorithm::fast_tbp
                                                                    ? " r=" + std::to_string(cfg.r)
                                                                    : std::string());
    const GradientSet analytic = gradients_of(net, batch, cfg);
    const Tensor& x = batch.x;
    const Tensor& labels = batch.labels;
    const std::size_t B = batch_of(x);
    const std::size_t li = scores_index(net);

    // state frozen at the current weights
    const Tensor c = oracle_logit_seed(net, x, labels);
    const Tensor g0 = oracle_input_grad(net, x, c, li, opt.h_input);
    const Tensor per_sample = g0 * static_cast<double>(B);
    const bool skip = cfg.effective_skip_softmax();
    const std::size_t pred_end = net.ends_with_softmax() && !skip ? net.size() : li;
    Tensor x_adv = x;
    if (uses_epsilon(cfg.algo)) x_adv.add_scaled(sign_with_threshold(g0, 1e-9), cfg.epsilon);

    std::function<double(Network&)> main_loss = [&](Network& n) { return oracle_nll(n, x, labels); };
    if (cfg.algo == Algorithm::at)
        main_loss = [&](Network& n) { return 0.5 * (oracle_nll(n, x, labels) + oracle_nll(n, x_adv, labels)); };
    if (cfg.algo == Algorithm::fast_at) main_loss = [&](Network& n) { return oracle_nll(n, x_adv, labels); };

    std::vector<CheckReport> out;
    {
        const std::vector<GradientSet> fd = fd_ladder(net, main_loss, opt.h_main, opt.ladder);
        std::vector<Slot> slots;
        for (std::size_t i = 0; i < net.size(); ++i) {
            if (!net.layer(i).has_weights()) continue;
            slots.push_back({&analytic.layers[i].dw, pick(fd, i, false), i});
            slots.push_back({&analytic.layers[i].db, pick(fd, i, true), i});
        }
        out.push_back(compare_slots(tag + " dw", slots, 1e-6, opt));
    }

    std::function<double(Network&)> aux_loss;
    std::vector<Tensor> pred_base;
    double tol = 1e-6;
    switch (cfg.algo) {
        case Algorithm::loss_ibp:
            tol = cfg.r == 1 ? 1e-4 : 1e-6;
            aux_loss = [&](Network& n) {
                const Tensor dy0 = oracle_input_grad(n, x, c, li, opt.h_input);
                // r = 2: mean_b 0.5 ||B dy0_b||^2
                return cfg.r == 1 ? frozen_lp(dy0, g0, 1, opt.kink_threshold)
                                  : frozen_lp(dy0, g0, 2, 0.0) * static_cast<double>(B);
            };
            break;
        case Algorithm::pred_ibp:
        case Algorithm::tbp: {
            tol = cfg.r == 1 ? 1e-4 : 1e-6;
            const std::vector<Tensor> dirs =
                cfg.algo == Algorithm::pred_ibp ? std::vector<Tensor>{per_sample} : batch.tangents;
            for (const Tensor& v : dirs) pred_base.push_back(oracle_directional(net, x, v, pred_end, opt.h_input));
            aux_loss = [&, dirs](Network& n) {
                double s = 0.0;
                for (std::size_t k = 0; k < dirs.size(); ++k)
                    s += frozen_lp(oracle_directional(n, x, dirs[k], pred_end, opt.h_input), pred_base[k], cfg.r,
                                   opt.kink_threshold);
                return s / static_cast<double>(B);
            };
            break;
        }
        case Algorithm::fast_tbp:
            aux_loss = [&](Network& n) {
                double s = 0.0;
                for (const Tensor& t : batch.tangents) s += dot(c, oracle_directional(n, x, t, li, opt.h_input));
                return s;
            };
            break;
        default:
            break;
    }
    if (aux_loss) {
        const std::vector<GradientSet> fd = fd_ladder(net, aux_loss, opt.h_weight, opt.ladder);
        std::vector<Slot> slots;
        for (std::size_t i = 0; i < net.size(); ++i) {
            if (!net.layer(i).has_weights()) continue;
            slots.push_back({&analytic.layers[i].dw_aux, pick(fd, i, false), i});
            slots.push_back({nullptr, pick(fd, i, true), i});
        }
        out.push_back(compare_slots(tag + " dw_aux", slots, tol, opt));
    }
    return out;
}

std::vector<CheckReport> check_theorems(Network& net, const Tensor& x, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "theorem-forward"));
    Tape tape;
    net.forward(x, ForwardContext{Mode::train, &rng, false}, tape);
    Rng draw(derive_seed(seed, "theorem-vectors"));
    const std::size_t B = batch_of(x);

    CheckReport t1 = make_report("linear jvp equals bias-free forward", 0.0);
    CheckReport t2 = make_report("pointwise jvp equals vjp", 1e-12);
    CheckReport adj = make_report("adjoint identity <u, Jv> = <J^T u, v>", 1e-10);
    for (std::size_t i = 0; i < net.size(); ++i) {
        const Layer& l = net.layer(i);
        Shape in = l.input_shape(), out = l.output_shape();
        in.insert(in.begin(), B);
        out.insert(out.begin(), B);
        const Tensor v = gaussian_fill(in, 0.0, 1.0, draw);
        const Tensor u = gaussian_fill(out, 0.0, 1.0, draw);
        const Tensor jv = l.jvp(v);
        const Tensor ju = l.vjp(u);

        const double a = dot(u, jv), b = dot(ju, v);
        const double e = std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
        ++adj.compared;
        if (e > adj.max_error) {
            adj.max_error = e;
            adj.layer = i;
        }

        if (l.kind() == LayerKind::fully_connected || l.kind() == LayerKind::conv2d) {
            auto copy = l.clone();
            copy->bias().fill(0.0);
            const Tensor f = copy->forward(v, kEval);
            ++t1.compared;
            for (std::size_t k = 0; k < f.size(); ++k) {
                const double d = std::abs(f[k] - jv[k]);
                if (d > t1.max_error) {
                    t1.max_error = d;
                    t1.layer = i;
                    t1.index = k;
                }
            }
        }
        if (l.kind() == LayerKind::relu || l.kind() == LayerKind::sigmoid || l.kind() == LayerKind::softmax) {
            const Tensor jt = l.vjp(v);
            ++t2.compared;
            const double scale = std::max(1.0, max_abs(jv));
            for (std::size_t k = 0; k < jv.size(); ++k) {
                const double d = std::abs(jv[k] - jt[k]) / scale;
                if (d > t2.max_error) {
                    t2.max_error = d;
                    t2.layer = i;
                    t2.index = k;
                }
            }
        }
    }
    t1.detail = "max |jvp - forward without bias|, must be exactly 0";
    t2.detail = "max |jvp(v) - vjp(v)| / max(1, max|jvp|)";
    adj.detail = "|a - b| / max(|a|, |b|, 1) per layer";
    for (CheckReport* r : {&t1, &t2, &adj}) r->pass = r->compared > 0 && r->max_error <= r->tolerance;
    return {t1, t2, adj};
}

namespace {

CheckReport compare_exact(std::string name, const Network& net, const GradientSet& a, const GradientSet& b,
                          double tol, bool aux) {
    CheckReport rep = make_report(std::move(name), tol);
    double scale = 0.0;
    for (std::size_t i = 0; i < net.size(); ++i)
        if (net.layer(i).has_weights()) scale = std::max(scale, max_abs(aux ? b.layers[i].dw_aux : b.layers[i].dw));
    const double floor = std::max(1e-3 * scale, 1e-300);
    for (std::size_t i = 0; i < net.size(); ++i) {
        if (!net.layer(i).has_weights()) continue;
        const Tensor& ta = aux ? a.layers[i].dw_aux : a.layers[i].dw;
        const Tensor& tb = aux ? b.layers[i].dw_aux : b.layers[i].dw;
        for (std::size_t k = 0; k < ta.size(); ++k) {
            ++rep.compared;
            const double e = std::abs(ta[k] - tb[k]) / std::max({std::abs(ta[k]), std::abs(tb[k]), floor});
            if (e > rep.max_error) {
                rep.max_error = e;
                rep.layer = i;
                rep.index = k;
            }
        }
    }
    rep.pass = rep.max_error <= tol;
    rep.detail = "relative error per weight, floor 1e-3 x max|w grad|";
    return rep;
}

}  // namespace

CheckReport check_fast_tbp_equivalence(Network& net, const Batch& batch, const Tensor& tangent) {
    Rng rng(1);
    Tape tape;
    const ForwardLoss fl =
        forward_with_loss(net, batch.x, batch.labels, LossKind::nll_softmax, ForwardContext{Mode::train, &rng, false}, tape);
    backward_from_loss(net, tape, fl, true);

    GradientSet fast = GradientSet::zeros_like(net);
    const LossValue aux = aux_loss_dot(tape.dy[0], tangent);
    third_pass(net, tape, aux.grad, fast);

    GradientSet four = GradientSet::zeros_like(net);
    const double value = tangent_pass(net, tape, fl.index, tangent, TangentLoss::loss_sensitivity, 1, false, four);

    CheckReport rep = compare_exact("fast TBP vs four-pass TBP", net, fast, four, 1e-10, true);
    const double dv = std::abs(value - aux.value) / std::max({std::abs(value), std::abs(aux.value), 1e-300});
    if (!(dv <= 1e-10) && !(value == 0.0 && aux.value == 0.0)) {
        rep.pass = false;
        rep.detail += "; penalty values differ";
    }
    return rep;
}

CheckReport check_tbp_pred_ibp_equivalence(Network& net, const Batch& batch, int r) {
    TrainConfig cfg;
    cfg.algo = Algorithm::pred_ibp;
    cfg.r = r;
    Rng rng(cfg.seed);
    Tape tape;
    const StepResult pred = step_pred_ibp(net, batch, cfg, rng, tape);
    Batch with_grad{batch.x, batch.labels, {tape.dy[0] * static_cast<double>(batch_of(batch.x))}};
    cfg.algo = Algorithm::tbp;
    Rng rng2(cfg.seed);
    const StepResult tbp = step_tbp(net, with_grad, cfg, rng2, tape);
    CheckReport rep =
        compare_exact("TBP(tangent = input gradient) vs pred-IBP r=" + std::to_string(r), net, tbp.grads, pred.grads,
                      1e-12, true);
    if (pred.aux_loss != tbp.aux_loss) {
        rep.pass = false;
        rep.detail += "; penalty values differ";
    }
    return rep;
}

// --- noise injection -----------------------------------------------------------

double neuron_loss(const std::vector<double>& w, double b, const std::vector<double>& x, double label) {
    double p = b;
    for (std::size_t i = 0; i < w.size(); ++i) p += w[i] * x[i];
    return -(label * std::log(std::abs(p)) + (1.0 - label) * std::log(std::abs(1.0 - p)));
}

NoiseInjectionResult noise_injection(const std::vector<double>& w, double b, const std::vector<double>& x,
                                     double label, double sigma, std::size_t pairs, std::uint64_t seed) {
    if (w.size() != x.size()) throw DimensionError("noise_injection: weight and input sizes differ");
    NoiseInjectionResult res;
    double p = b;
    for (std::size_t i = 0; i < w.size(); ++i) p += w[i] * x[i];
    if (std::abs(p) < 1e-6 || std::abs(1.0 - p) < 1e-6)
        throw NumericError("noise_injection: p = " + std::to_string(p) + " is at a singularity of the loss");
    res.p = p;
    const double q = 1.0 - p;
    for (double wi : w) {
        const double d = wi * (p - label) / (p * q);
        res.grad_sq += d * d;
        res.hessian_formula += wi * wi * (p * p - 2.0 * p * label + label) / (p * p * q * q);
    }

    const double l0 = neuron_loss(w, b, x, label);
    std::vector<double> xp = x;
    auto second = [&](std::size_t i, double h) {
        xp[i] = x[i] + h;
        const double up = neuron_loss(w, b, xp, label);
        xp[i] = x[i] - h;
        const double down = neuron_loss(w, b, xp, label);
        xp[i] = x[i];
        return (up - 2.0 * l0 + down) / (h * h);
    };
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] == 0.0) continue;
        const double h = 1e-2 * std::min(std::abs(p), std::abs(q)) / std::abs(w[i]);
        res.hessian_fd += (4.0 * second(i, 0.5 * h) - second(i, h)) / 3.0;
    }

    Rng rng(derive_seed(seed, "noise-injection"));
    std::vector<double> xm = x;
    double acc = 0.0;
    for (std::size_t s = 0; s < pairs; ++s) {
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double mu = sigma * rng.normal();
            xp[i] = x[i] + mu;
            xm[i] = x[i] - mu;
        }
        acc += 0.5 * (neuron_loss(w, b, xp, label) + neuron_loss(w, b, xm, label)) - l0;
    }
    res.monte_carlo = pairs == 0 ? 0.0 : 2.0 * acc / (static_cast<double>(pairs) * sigma * sigma);
    return res;
}

CheckReport check_noise_injection(const std::vector<double>& w, double b, const std::vector<double>& x,
                                  double label, double sigma, std::size_t pairs, std::uint64_t seed,
                                  double mc_tolerance) {
    const NoiseInjectionResult r = noise_injection(w, b, x, label, sigma, pairs, seed);
    CheckReport rep = make_report("noise injection", 1e-6);
    rep.compared = w.size();
    const double denom = std::max(r.grad_sq, 1e-300);
    rep.max_error = r.grad_sq == 0.0 ? std::abs(r.hessian_fd) : std::abs(r.grad_sq - r.hessian_fd) / denom;
    const double mc_err = r.grad_sq == 0.0 ? std::abs(r.monte_carlo) : std::abs(r.monte_carlo - r.grad_sq) / denom;
    rep.pass = rep.max_error <= 1e-6 && mc_err <= mc_tolerance;
    std::ostringstream d;
    d << "p=" << r.p << " |grad|^2=" << r.grad_sq << " trH(fd)=" << r.hessian_fd << " mc=" << r.monte_carlo
      << " mc rel err=" << mc_err << " (tol " << mc_tolerance << ")";
    rep.detail = d.str();
    return rep;
}

// --- fast AT ---------------------------------------------------------------------

std::vector<double> first_order_residuals(const std::function<double(const Tensor&)>& loss, const Tensor& x,
                                          const Tensor& grad, const std::vector<double>& eps_list) {
    const double l0 = loss(x);
    const double g1 = lp_norm(grad, 1);
    std::vector<double> out;
    for (double eps : eps_list) {
        const Tensor xs = adversarial_input(x, grad, eps);
        out.push_back(std::abs(loss(xs) - l0 - eps * g1));
    }
    return out;
}

CheckReport check_fast_at_firstorder(Network& net, const Batch& batch, const std::vector<double>& eps_list) {
    CheckReport rep = make_report("fast AT first-order residual", 0.0);
    for (std::size_t i = 1; i < eps_list.size(); ++i)
        if (!(eps_list[i] < eps_list[i - 1])) throw ConfigError("eps list must be strictly decreasing");
    Tape tape;
    const ForwardLoss fl = forward_with_loss(net, batch.x, batch.labels, LossKind::nll_softmax, kEval, tape);
    backward_from_loss(net, tape, fl, true);
    const Tensor grad = tape.dy[0];
    const auto res = first_order_residuals([&](const Tensor& in) { return oracle_nll(net, in, batch.labels); },
                                           batch.x, grad, eps_list);
    rep.pass = true;
    std::ostringstream d;
    d << "r/eps:";
    double prev = 0.0;
    for (std::size_t i = 0; i < res.size(); ++i) {
        const double ratio = res[i] / eps_list[i];
        d << ' ' << ratio;
        if (i > 0 && !(ratio < prev)) rep.pass = false;
        rep.max_error = std::max(rep.max_error, ratio);
        prev = ratio;
        ++rep.compared;
    }
    rep.detail = d.str();
    return rep;
}

CheckReport check_fast_at_matches_bp(Network& net, const Batch& batch, double epsilon) {
    TrainConfig cfg;
    cfg.algo = Algorithm::fast_at;
    cfg.epsilon = epsilon;
    Rng rng(cfg.seed);
    Tape tape;
    const StepResult fast = step_fast_at(net, batch, cfg, rng, tape);

    Tape t0;
    const ForwardLoss fl = forward_with_loss(net, batch.x, batch.labels, cfg.loss, kEval, t0);
    backward_from_loss(net, t0, fl, true);
    Batch adv{adversarial_input(batch.x, t0.dy[0], epsilon), batch.labels, {}};
    cfg.algo = Algorithm::bp;
    Rng rng2(cfg.seed);
    const StepResult bp = step_bp(net, adv, cfg, rng2, tape);

    CheckReport rep = make_report("fast AT equals BP at x*", 0.0);
    for (std::size_t i = 0; i < net.size(); ++i) {
        if (!net.layer(i).has_weights()) continue;
        for (auto [a, b] : {std::pair{&fast.grads.layers[i].dw, &bp.grads.layers[i].dw},
                            std::pair{&fast.grads.layers[i].db, &bp.grads.layers[i].db}})
            for (std::size_t k = 0; k < a->size(); ++k) {
                ++rep.compared;
                rep.max_error = std::max(rep.max_error, std::abs((*a)[k] - (*b)[k]));
            }
    }
    rep.pass = rep.max_error == 0.0 && fast.loss == bp.loss;
    rep.detail = "bitwise comparison of dw, db and loss";
    return rep;
}

// --- fixed suite -------------------------------------------------------------------

Network tiny_oracle_net(std::uint64_t seed) {
    Network net({1, 6, 6}, {LayerSpec::conv(4, 3, 1), LayerSpec::activation(LayerKind::relu), LayerSpec::max_pool(3, 2),
                            LayerSpec::fully_connected(16), LayerSpec::activation(LayerKind::relu),
                            LayerSpec::fully_connected(4), LayerSpec::activation(LayerKind::softmax)});
    Rng rng(derive_seed(seed, "oracle-init"));
    net.init_weights(rng);
    // non-zero biases so that the bias-free rules are actually exercised
    for (std::size_t i = 0; i < net.size(); ++i)
        if (net.layer(i).has_weights()) net.layer(i).bias() = gaussian_fill(net.layer(i).bias().shape(), 0.0, 0.1, rng);
    return net;
}

Batch tiny_oracle_batch(std::uint64_t seed, std::size_t batch, std::size_t tangents) {
    Rng rng(derive_seed(seed, "oracle-batch"));
    Batch b;
    b.x = gaussian_fill({batch, 1, 6, 6}, 0.0, 1.0, rng);
    b.labels = Tensor({batch, 4});
    for (std::size_t i = 0; i < batch; ++i) b.labels[i * 4 + i % 4] = 1.0;
    for (std::size_t t = 0; t < tangents; ++t) b.tangents.push_back(gaussian_fill({batch, 1, 6, 6}, 0.0, 1.0, rng));
    return b;
}

Network theorem_net(std::uint64_t seed) {
    Network net({2, 8, 8}, {LayerSpec::conv(3, 3, 1), LayerSpec::activation(LayerKind::relu), LayerSpec::max_pool(2, 2),
                            LayerSpec::conv(4, 3, 1), LayerSpec::activation(LayerKind::sigmoid),
                            LayerSpec::mean_pool(2, 2), LayerSpec::fully_connected(12), LayerSpec::dropout(0.5),
                            LayerSpec::fully_connected(5), LayerSpec::activation(LayerKind::softmax)});
    Rng rng(derive_seed(seed, "theorem-init"));
    net.init_weights(rng);
    for (std::size_t i = 0; i < net.size(); ++i)
        if (net.layer(i).has_weights()) net.layer(i).bias() = gaussian_fill(net.layer(i).bias().shape(), 0.0, 0.1, rng);
    return net;
}

std::vector<CheckReport> run_gradcheck_suite(std::uint64_t seed) {
    std::vector<CheckReport> out;
    auto append = [&out](std::vector<CheckReport> v) { out.insert(out.end(), v.begin(), v.end()); };

    Network net = tiny_oracle_net(seed);
    const Batch batch = tiny_oracle_batch(seed);

    std::vector<TrainConfig> configs;
    auto add = [&configs](Algorithm a, int r, double beta, double eps) {
        TrainConfig c;
        c.algo = a;
        c.r = r;
        c.beta = beta;
        c.epsilon = eps;
        configs.push_back(c);
    };
    add(Algorithm::bp, 1, 0.0, 0.0);
    for (int r : {1, 2}) {
        add(Algorithm::loss_ibp, r, 1.0, 0.0);
        add(Algorithm::pred_ibp, r, 1.0, 0.0);
        add(Algorithm::tbp, r, 1.0, 0.0);
    }
    add(Algorithm::fast_tbp, 1, 1.0, 0.0);
    add(Algorithm::at, 1, 0.0, 0.05);
    add(Algorithm::fast_at, 1, 0.0, 0.05);
    for (const TrainConfig& c : configs) append(check_algorithm_gradients(net, batch, c));

    Network tnet = theorem_net(seed);
    Rng xr(derive_seed(seed, "theorem-input"));
    append(check_theorems(tnet, gaussian_fill({3, 2, 8, 8}, 0.0, 1.0, xr), seed));

    for (std::size_t t = 0; t < batch.tangents.size(); ++t) {
        CheckReport r = check_fast_tbp_equivalence(net, batch, batch.tangents[t]);
        r.name += " (tangent " + std::to_string(t) + ")";
        out.push_back(r);
    }
    for (int r : {1, 2}) out.push_back(check_tbp_pred_ibp_equivalence(net, batch, r));

    out.push_back(check_fast_at_firstorder(net, batch, {1e-2, 1e-3, 1e-4}));
    out.push_back(check_fast_at_matches_bp(net, batch, 0.05));

    Rng nr(derive_seed(seed, "noise-configs"));
    CheckReport noise = make_report("noise injection (20 neurons)", 1e-6);
    noise.pass = true;
    for (int k = 0; k < 20; ++k) {
        std::vector<double> w(4), x(4);
        for (auto& v : w) v = nr.uniform(-0.5, 0.5);
        for (auto& v : x) v = nr.uniform(0.0, 1.0);
        const double target = nr.uniform(0.05, 0.95);
        double wx = 0.0;
        for (int i = 0; i < 4; ++i) wx += w[i] * x[i];
        const double label = nr.uniform() < 0.5 ? 0.0 : 1.0;
        const CheckReport r = check_noise_injection(w, target - wx, x, label, 0.01, 1000000, seed + k);
        noise.compared += 1;
        noise.max_error = std::max(noise.max_error, r.max_error);
        if (!r.pass) {
            noise.pass = false;
            noise.detail = r.detail;
        }
    }
    if (noise.pass) noise.detail = "trace identity and Monte-Carlo estimate hold for all configurations";
    out.push_back(noise);
    return out;
}

}  // namespace ibp
