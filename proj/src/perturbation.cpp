#include "ibp/perturbation.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <cstdio>
#include <ostream>

#include "ibp/loss.hpp"
#include "ibp/training.hpp"

namespace ibp {

namespace {

Tensor rows(const Tensor& t, std::size_t begin, std::size_t end) {
    Shape s = t.shape();
    s[0] = end - begin;
    const std::size_t stride = t.stride0();
    return Tensor(s, std::vector<double>(t.raw() + begin * stride, t.raw() + end * stride));
}

void put_rows(Tensor& dst, std::size_t begin, const Tensor& src) {
    std::memcpy(dst.raw() + begin * dst.stride0(), src.raw(), src.size() * sizeof(double));
}

}  // namespace

std::string format_level(double level) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", level);
    // shortest representation that round-trips
    for (int prec = 1; prec <= 17; ++prec) {
        char trial[32];
        std::snprintf(trial, sizeof(trial), "%.*g", prec, level);
        if (std::strtod(trial, nullptr) == level) return trial;
    }
    return buf;
}

std::string_view to_string(NoiseKind kind) { return kind == NoiseKind::adversarial ? "adversarial" : "gaussian"; }

NoiseKind noise_kind_from_string(std::string_view name) {
    if (name == "adversarial") return NoiseKind::adversarial;
    if (name == "gaussian") return NoiseKind::gaussian;
    throw ConfigError("unknown noise kind '" + std::string(name) + "'");
}

Tensor input_gradient(Network& net, const Tensor& x, const Tensor& labels) {
    if (!net.ends_with_softmax()) throw ConfigError("input_gradient needs a network ending in softmax");
    Tape tape;
    net.forward(x, ForwardContext{Mode::eval, nullptr, false}, tape);
    LossValue lv = nll_softmax_loss(tape.y[net.logits_index()], labels);
    lv.grad *= static_cast<double>(x.dim(0));
    net.backward(tape, net.logits_index(), std::move(lv.grad), 0);
    return std::move(tape.dy[0]);
}

Dataset adversarial_testset(Network& net, const Dataset& ds, double epsilon, std::size_t batch,
                            const std::optional<std::pair<double, double>>& clip) {
    if (ds.labels.empty()) throw ConfigError("adversarial test set needs labels");
    if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be >= 0");
    Dataset out = ds;
    if (epsilon == 0.0 && !clip) return out;
    for (std::size_t b = 0; b < ds.size(); b += batch) {
        const std::size_t e = std::min(ds.size(), b + batch);
        const Tensor x = rows(ds.images, b, e);
        const Tensor g = input_gradient(net, x, rows(ds.labels, b, e));
        put_rows(out.images, b, adversarial_input(x, g, epsilon, clip));
    }
    return out;
}

Dataset gaussian_testset(const Dataset& ds, double sigma, std::uint64_t seed) {
    if (!(sigma >= 0.0)) throw ConfigError("sigma must be >= 0");
    Dataset out = ds;
    if (sigma == 0.0) return out;
    const std::size_t stride = ds.images.stride0();
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Rng rng(derive_seed(seed, "gaussian", i));
        double* p = out.images.raw() + i * stride;
        for (std::size_t j = 0; j < stride; ++j) p[j] += sigma * rng.normal();
    }
    return out;
}

std::vector<std::size_t> predict_classes(Network& net, const Tensor& images, std::size_t batch) {
    if (batch == 0) throw ConfigError("batch must be positive");
    const std::size_t n = images.dim(0);
    std::vector<std::size_t> out;
    out.reserve(n);
    for (std::size_t b = 0; b < n; b += batch) {
        const Tensor p = net.predict(rows(images, b, std::min(n, b + batch)));
        for (std::size_t i = 0; i < p.dim(0); ++i) {
            auto r = p.row(i);
            out.push_back(static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin()));
        }
    }
    return out;
}

double test_error(Network& net, const Dataset& ds, std::size_t batch) {
    if (ds.size() == 0) throw ConfigError("test_error of an empty dataset");
    const auto pred = predict_classes(net, ds.images, batch);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != ds.label_of(i);
    return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

void validate_levels(const std::vector<double>& levels) {
    if (levels.empty() || levels.front() != 0.0) throw ConfigError("noise levels must start at 0");
    for (std::size_t i = 1; i < levels.size(); ++i)
        if (!(levels[i] > levels[i - 1])) throw ConfigError("noise levels must be strictly increasing");
}

NoiseSweep sweep(Network& net, const Dataset& ds, NoiseKind kind, const std::vector<double>& levels,
                 std::uint64_t seed, std::size_t batch) {
    validate_levels(levels);
    NoiseSweep s{kind, levels, {}, ds.size(), seed};
    for (std::size_t k = 0; k < levels.size(); ++k) {
        const double lv = levels[k];
        if (lv == 0.0) {
            s.errors.push_back(test_error(net, ds, batch));
            continue;
        }
        const Dataset noisy = kind == NoiseKind::adversarial ? adversarial_testset(net, ds, lv, batch)
                                                             : gaussian_testset(ds, lv, derive_seed(seed, "level", k));
        s.errors.push_back(test_error(net, noisy, batch));
    }
    return s;
}

void write_csv(std::ostream& out, const NoiseSweep& s) {
    out << "kind,level,error,n,seed\n";
    char err[32];
    for (std::size_t k = 0; k < s.levels.size(); ++k) {
        std::snprintf(err, sizeof(err), "%.6f", s.errors[k]);
        out << to_string(s.kind) << ',' << format_level(s.levels[k]) << ',' << err << ',' << s.n << ',' << s.seed
            << '\n';
    }
}

}  // namespace ibp
