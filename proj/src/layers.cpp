#include "ibp/layers.hpp"

#include <algorithm>
#include <cmath>

namespace ibp {

namespace {

constexpr std::string_view kKindNames[] = {"fully-connected", "conv2d",  "maxpool", "meanpool",
                                           "relu",            "sigmoid", "softmax", "dropout"};

std::size_t features(const Shape& s) { return shape_size(s); }

void require_chw(const LayerSpec& spec) {
    if (spec.input.size() != 3) {
        throw ConfigError(std::string(to_string(spec.kind)) + " expects a C x H x W input, got " +
                          to_string(spec.input));
    }
}

// ---------------------------------------------------------------------------

class FullyConnected final : public Layer {
public:
    explicit FullyConnected(const LayerSpec& spec) : Layer(spec) {
        if (spec.outputs == 0) throw ConfigError("fully-connected layer needs outputs > 0");
        in_ = features(spec.input);
        output_ = {spec.outputs};
        weights_ = Tensor({in_, spec.outputs});
        bias_ = Tensor({spec.outputs});
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<FullyConnected>(*this); }
    bool has_weights() const override { return true; }

    Tensor forward(const Tensor& x, const ForwardContext&) override {
        check_input(x, "forward");
        const std::size_t batch = x.dim(0);
        input_ = x;
        Tensor y = linear(x);
        const std::size_t out = spec_.outputs;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < out; ++j) y[b * out + j] += bias_[j];
        cached_batch_ = batch;
        return y;
    }

    Tensor vjp(const Tensor& dy) const override {
        check_output(dy, "vjp");
        const std::size_t batch = dy.dim(0);
        Tensor dx(batched(spec_.input, batch));
        gemm_nt(batch, spec_.outputs, in_, dy.raw(), weights_.raw(), dx.raw());
        return dx;
    }

    Tensor jvp(const Tensor& v) const override {
        check_input(v, "jvp");
        return linear(v);
    }

    void accumulate_main_grad(const Tensor& dy, Tensor& dw, Tensor* db) const override {
        require_cache(dy.dim(0), "main weight gradient");
        accumulate_weight_grad(input_, dy, dw);
        if (db) {
            const std::size_t out = spec_.outputs;
            for (std::size_t b = 0; b < dy.dim(0); ++b)
                for (std::size_t j = 0; j < out; ++j) (*db)[j] += dy[b * out + j];
        }
    }

    void accumulate_weight_grad(const Tensor& in, const Tensor& dy, Tensor& dw) const override {
        check_input(in, "weight gradient");
        check_output(dy, "weight gradient");
        if (in.dim(0) != dy.dim(0)) throw DimensionError("weight gradient: batch sizes differ");
        require_same_shape(dw, weights_, "weight gradient accumulator");
        gemm_tn(in_, in.dim(0), spec_.outputs, in.raw(), dy.raw(), dw.raw());
    }

    void clear_cache() override {
        input_ = Tensor();
        cached_batch_.reset();
    }

private:
    Tensor linear(const Tensor& x) const {
        const std::size_t batch = x.dim(0);
        Tensor y({batch, spec_.outputs});
        gemm_nn(batch, in_, spec_.outputs, x.raw(), weights_.raw(), y.raw());
        return y;
    }

    std::size_t in_ = 0;
    Tensor input_;
};

// ---------------------------------------------------------------------------

class Conv2d final : public Layer {
public:
    explicit Conv2d(const LayerSpec& spec) : Layer(spec) {
        require_chw(spec);
        if (spec.filters == 0 || spec.kernel_h == 0 || spec.kernel_w == 0)
            throw ConfigError("conv2d needs filters and kernel extents > 0");
        c_ = spec.input[0];
        h_ = spec.input[1];
        w_ = spec.input[2];
        g_ = {spec.pad_h, spec.pad_w, spec.stride_h, spec.stride_w};
        oh_ = conv_out_extent(h_, spec.kernel_h, g_.pad_h, g_.stride_h);
        ow_ = conv_out_extent(w_, spec.kernel_w, g_.pad_w, g_.stride_w);
        patch_ = c_ * spec.kernel_h * spec.kernel_w;
        output_ = {spec.filters, oh_, ow_};
        weights_ = Tensor({spec.filters, c_, spec.kernel_h, spec.kernel_w});
        bias_ = Tensor({spec.filters});
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }
    bool has_weights() const override { return true; }

    Tensor forward(const Tensor& x, const ForwardContext&) override {
        check_input(x, "forward");
        const std::size_t batch = x.dim(0);
        cols_ = unfold(x);
        Tensor y = apply(cols_, batch);
        const std::size_t plane = oh_ * ow_;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t f = 0; f < spec_.filters; ++f) {
                double* out = y.raw() + (b * spec_.filters + f) * plane;
                for (std::size_t p = 0; p < plane; ++p) out[p] += bias_[f];
            }
        cached_batch_ = batch;
        return y;
    }

    Tensor vjp(const Tensor& dy) const override {
        check_output(dy, "vjp");
        const std::size_t batch = dy.dim(0);
        const std::size_t plane = oh_ * ow_;
        Tensor dx(batched(spec_.input, batch));
        std::vector<double> dcols(patch_ * plane);
        for (std::size_t b = 0; b < batch; ++b) {
            std::fill(dcols.begin(), dcols.end(), 0.0);
            gemm_tn(patch_, spec_.filters, plane, weights_.raw(), dy.raw() + b * spec_.filters * plane,
                    dcols.data());
            col2im(dcols, c_, h_, w_, spec_.kernel_h, spec_.kernel_w, g_, oh_, ow_, dx.row(b));
        }
        return dx;
    }

    Tensor jvp(const Tensor& v) const override {
        check_input(v, "jvp");
        return apply(unfold(v), v.dim(0));
    }

    void accumulate_main_grad(const Tensor& dy, Tensor& dw, Tensor* db) const override {
        require_cache(dy.dim(0), "main weight gradient");
        check_output(dy, "weight gradient");
        require_same_shape(dw, weights_, "weight gradient accumulator");
        accumulate_from_cols(cols_, dy, dw);
        if (db) {
            const std::size_t plane = oh_ * ow_;
            for (std::size_t b = 0; b < dy.dim(0); ++b)
                for (std::size_t f = 0; f < spec_.filters; ++f) {
                    const double* g = dy.raw() + (b * spec_.filters + f) * plane;
                    double acc = 0.0;
                    for (std::size_t p = 0; p < plane; ++p) acc += g[p];
                    (*db)[f] += acc;
                }
        }
    }

    void accumulate_weight_grad(const Tensor& in, const Tensor& dy, Tensor& dw) const override {
        check_input(in, "weight gradient");
        check_output(dy, "weight gradient");
        if (in.dim(0) != dy.dim(0)) throw DimensionError("weight gradient: batch sizes differ");
        require_same_shape(dw, weights_, "weight gradient accumulator");
        accumulate_from_cols(unfold(in), dy, dw);
    }

    void clear_cache() override {
        cols_.clear();
        cols_.shrink_to_fit();
        cached_batch_.reset();
    }

private:
    std::vector<double> unfold(const Tensor& x) const {
        const std::size_t batch = x.dim(0);
        const std::size_t block = patch_ * oh_ * ow_;
        std::vector<double> cols(batch * block);
        for (std::size_t b = 0; b < batch; ++b) {
            im2col(x.row(b), c_, h_, w_, spec_.kernel_h, spec_.kernel_w, g_, oh_, ow_,
                   std::span<double>(cols).subspan(b * block, block));
        }
        return cols;
    }

    Tensor apply(const std::vector<double>& cols, std::size_t batch) const {
        const std::size_t plane = oh_ * ow_;
        Tensor y(batched(output_, batch));
        for (std::size_t b = 0; b < batch; ++b) {
            gemm_nn(spec_.filters, patch_, plane, weights_.raw(), cols.data() + b * patch_ * plane,
                    y.raw() + b * spec_.filters * plane);
        }
        return y;
    }

    void accumulate_from_cols(const std::vector<double>& cols, const Tensor& dy, Tensor& dw) const {
        const std::size_t plane = oh_ * ow_;
        for (std::size_t b = 0; b < dy.dim(0); ++b) {
            gemm_nt(spec_.filters, plane, patch_, dy.raw() + b * spec_.filters * plane,
                    cols.data() + b * patch_ * plane, dw.raw());
        }
    }

    std::size_t c_ = 0, h_ = 0, w_ = 0, oh_ = 0, ow_ = 0, patch_ = 0;
    ConvGeometry g_;
    std::vector<double> cols_;
};

// ---------------------------------------------------------------------------

class Pool final : public Layer {
public:
    explicit Pool(const LayerSpec& spec) : Layer(spec) {
        require_chw(spec);
        c_ = spec.input[0];
        h_ = spec.input[1];
        w_ = spec.input[2];
        if (spec.kernel_h == 0 || spec.kernel_w == 0 || spec.stride_h == 0 || spec.stride_w == 0)
            throw ConfigError("pooling window and stride must be positive");
        if (spec.kernel_h > h_ || spec.kernel_w > w_)
            throw ConfigError("pooling window larger than input " + to_string(spec.input));
        // partial windows at the bottom/right border are dropped
        oh_ = (h_ - spec.kernel_h) / spec.stride_h + 1;
        ow_ = (w_ - spec.kernel_w) / spec.stride_w + 1;
        output_ = {c_, oh_, ow_};
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Pool>(*this); }

    Tensor forward(const Tensor& x, const ForwardContext&) override {
        check_input(x, "forward");
        const std::size_t batch = x.dim(0);
        Tensor y(batched(output_, batch));
        if (kind() == LayerKind::maxpool) {
            argmax_.assign(y.size(), 0);
            for_each_window(batch, [&](std::size_t b, std::size_t out, std::size_t first,
                                       const auto& taps) {
                const double* in = x.raw() + b * in_size();
                std::uint32_t best = static_cast<std::uint32_t>(first);
                for (std::size_t t : taps(first))
                    if (in[t] > in[best]) best = static_cast<std::uint32_t>(t);
                argmax_[out] = best;
                y[out] = in[best];
            });
        } else {
            y = mean(x);
        }
        cached_batch_ = batch;
        return y;
    }

    Tensor vjp(const Tensor& dy) const override {
        check_output(dy, "vjp");
        const std::size_t batch = dy.dim(0);
        Tensor dx(batched(spec_.input, batch));
        if (kind() == LayerKind::maxpool) {
            require_cache(batch, "vjp");
            const std::size_t per = out_size();
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t o = 0; o < per; ++o)
                    dx[b * in_size() + argmax_[b * per + o]] += dy[b * per + o];
        } else {
            const double scale = 1.0 / static_cast<double>(spec_.kernel_h * spec_.kernel_w);
            for_each_window(batch, [&](std::size_t b, std::size_t out, std::size_t first,
                                       const auto& taps) {
                double* in = dx.raw() + b * in_size();
                for (std::size_t t : taps(first)) in[t] += scale * dy[out];
            });
        }
        return dx;
    }

    Tensor jvp(const Tensor& v) const override {
        check_input(v, "jvp");
        if (kind() == LayerKind::meanpool) return mean(v);
        // positions selected on the forward pass, whatever the values of v
        const std::size_t batch = v.dim(0);
        require_cache(batch, "jvp");
        Tensor y(batched(output_, batch));
        const std::size_t per = out_size();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < per; ++o) y[b * per + o] = v[b * in_size() + argmax_[b * per + o]];
        return y;
    }

    void clear_cache() override {
        argmax_.clear();
        cached_batch_.reset();
    }

    /// Flat per-sample input index chosen for each output element.
    const std::vector<std::uint32_t>& argmax() const { return argmax_; }

private:
    std::size_t in_size() const { return c_ * h_ * w_; }
    std::size_t out_size() const { return c_ * oh_ * ow_; }

    // Calls fn(batch index, flat output index, first tap, taps) per window,
    // where taps(first) yields the window's flat per-sample input indices in
    // row-major order.
    template <class Fn>
    void for_each_window(std::size_t batch, Fn&& fn) const {
        std::vector<std::size_t> buf(spec_.kernel_h * spec_.kernel_w);
        auto taps = [&](std::size_t first) -> const std::vector<std::size_t>& {
            std::size_t n = 0;
            for (std::size_t i = 0; i < spec_.kernel_h; ++i)
                for (std::size_t j = 0; j < spec_.kernel_w; ++j) buf[n++] = first + i * w_ + j;
            return buf;
        };
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < c_; ++c)
                for (std::size_t oi = 0; oi < oh_; ++oi)
                    for (std::size_t oj = 0; oj < ow_; ++oj) {
                        const std::size_t out = b * out_size() + (c * oh_ + oi) * ow_ + oj;
                        const std::size_t first = (c * h_ + oi * spec_.stride_h) * w_ + oj * spec_.stride_w;
                        fn(b, out, first, taps);
                    }
    }

    Tensor mean(const Tensor& x) const {
        const std::size_t batch = x.dim(0);
        Tensor y(batched(output_, batch));
        const double scale = 1.0 / static_cast<double>(spec_.kernel_h * spec_.kernel_w);
        for_each_window(batch, [&](std::size_t b, std::size_t out, std::size_t first, const auto& taps) {
            const double* in = x.raw() + b * in_size();
            double acc = 0.0;
            for (std::size_t t : taps(first)) acc += in[t];
            y[out] = acc * scale;
        });
        return y;
    }

    std::size_t c_ = 0, h_ = 0, w_ = 0, oh_ = 0, ow_ = 0;
    std::vector<std::uint32_t> argmax_;
};

// ---------------------------------------------------------------------------

class Elementwise final : public Layer {
public:
    explicit Elementwise(const LayerSpec& spec) : Layer(spec) { output_ = spec.input; }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Elementwise>(*this); }

    Tensor forward(const Tensor& x, const ForwardContext&) override {
        check_input(x, "forward");
        Tensor y(x.shape());
        slope_ = Tensor(x.shape());
        if (kind() == LayerKind::relu) {
            for (std::size_t i = 0; i < x.size(); ++i) {
                const bool on = x[i] > 0.0;
                y[i] = on ? x[i] : 0.0;
                slope_[i] = on ? 1.0 : 0.0;
            }
        } else {
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double s = 1.0 / (1.0 + std::exp(-x[i]));
                y[i] = s;
                slope_[i] = s * (1.0 - s);
            }
        }
        cached_batch_ = x.dim(0);
        return y;
    }

    // diagonal Jacobian: both directions scale by the cached slope
    Tensor vjp(const Tensor& dy) const override {
        check_output(dy, "vjp");
        require_cache(dy.dim(0), "vjp");
        return hadamard(dy, slope_);
    }

    Tensor jvp(const Tensor& v) const override {
        check_input(v, "jvp");
        require_cache(v.dim(0), "jvp");
        Tensor out(v.shape());
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = slope_[i] * v[i];
        return out;
    }

    void clear_cache() override {
        slope_ = Tensor();
        cached_batch_.reset();
    }

private:
    Tensor slope_;
};

// ---------------------------------------------------------------------------

class Softmax final : public Layer {
public:
    explicit Softmax(const LayerSpec& spec) : Layer(spec) { output_ = spec.input; }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Softmax>(*this); }

    Tensor forward(const Tensor& x, const ForwardContext&) override {
        check_input(x, "forward");
        const std::size_t batch = x.dim(0), n = x.stride0();
        Tensor p(x.shape());
        for (std::size_t b = 0; b < batch; ++b) {
            auto in = x.row(b);
            auto out = p.row(b);
            const double top = *std::max_element(in.begin(), in.end());
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) total += (out[j] = std::exp(in[j] - top));
            for (std::size_t j = 0; j < n; ++j) out[j] /= total;
        }
        probs_ = p;
        cached_batch_ = batch;
        return p;
    }

    // u^T J with J[j][k] = p_j (delta_jk - p_k), summed column by column
    Tensor vjp(const Tensor& dy) const override {
        check_output(dy, "vjp");
        require_cache(dy.dim(0), "vjp");
        const std::size_t batch = dy.dim(0), n = dy.stride0();
        Tensor dx(dy.shape());
        for (std::size_t b = 0; b < batch; ++b) {
            auto p = probs_.row(b);
            auto u = dy.row(b);
            auto out = dx.row(b);
            for (std::size_t k = 0; k < n; ++k) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += u[j] * p[j] * ((j == k ? 1.0 : 0.0) - p[k]);
                out[k] = acc;
            }
        }
        return dx;
    }

    // J v = p * (v - <p, v>)
    Tensor jvp(const Tensor& v) const override {
        check_input(v, "jvp");
        require_cache(v.dim(0), "jvp");
        const std::size_t batch = v.dim(0), n = v.stride0();
        Tensor out(v.shape());
        for (std::size_t b = 0; b < batch; ++b) {
            auto p = probs_.row(b);
            auto in = v.row(b);
            double mean = 0.0;
            for (std::size_t j = 0; j < n; ++j) mean += p[j] * in[j];
            auto o = out.row(b);
            for (std::size_t j = 0; j < n; ++j) o[j] = p[j] * (in[j] - mean);
        }
        return out;
    }

    void clear_cache() override {
        probs_ = Tensor();
        cached_batch_.reset();
    }

private:
    Tensor probs_;
};

// ---------------------------------------------------------------------------

class Dropout final : public Layer {
public:
    explicit Dropout(const LayerSpec& spec) : Layer(spec) {
        if (!(spec.dropout_rate >= 0.0 && spec.dropout_rate < 1.0))
            throw ConfigError("dropout rate must lie in [0, 1)");
        output_ = spec.input;
    }

    std::unique_ptr<Layer> clone() const override { return std::make_unique<Dropout>(*this); }

    Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
        check_input(x, "forward");
        if (ctx.mode == Mode::eval) {
            mask_ = Tensor();
            cached_batch_ = x.dim(0);
            return x;
        }
        const bool keep_mask = ctx.reuse_masks && mask_.shape() == x.shape();
        if (!keep_mask) {
            if (!ctx.rng) throw StateError("dropout in training mode needs an rng");
            mask_ = Tensor(x.shape());
            const double keep = 1.0 - spec_.dropout_rate;
            for (double& m : mask_.data()) m = ctx.rng->uniform() < keep ? 1.0 / keep : 0.0;
        }
        cached_batch_ = x.dim(0);
        return hadamard(x, mask_);
    }

    Tensor vjp(const Tensor& dy) const override {
        check_output(dy, "vjp");
        require_cache(dy.dim(0), "vjp");
        return mask_.empty() ? dy : hadamard(dy, mask_);
    }

    Tensor jvp(const Tensor& v) const override {
        check_input(v, "jvp");
        require_cache(v.dim(0), "jvp");
        return mask_.empty() ? v : hadamard(v, mask_);
    }

    void clear_cache() override {
        mask_ = Tensor();
        cached_batch_.reset();
    }

private:
    Tensor mask_;
};

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(LayerKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

LayerKind layer_kind_from_string(std::string_view name) {
    for (std::size_t i = 0; i < std::size(kKindNames); ++i)
        if (kKindNames[i] == name) return static_cast<LayerKind>(i);
    throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

LayerSpec LayerSpec::fully_connected(std::size_t outputs) {
    LayerSpec s;
    s.kind = LayerKind::fully_connected;
    s.outputs = outputs;
    return s;
}

LayerSpec LayerSpec::conv(std::size_t filters, std::size_t kernel, std::size_t pad, std::size_t stride) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.filters = filters;
    s.kernel_h = s.kernel_w = kernel;
    s.pad_h = s.pad_w = pad;
    s.stride_h = s.stride_w = stride;
    return s;
}

LayerSpec LayerSpec::max_pool(std::size_t window, std::size_t stride) {
    LayerSpec s;
    s.kind = LayerKind::maxpool;
    s.kernel_h = s.kernel_w = window;
    s.stride_h = s.stride_w = stride;
    return s;
}

LayerSpec LayerSpec::mean_pool(std::size_t window, std::size_t stride) {
    LayerSpec s = max_pool(window, stride);
    s.kind = LayerKind::meanpool;
    return s;
}

LayerSpec LayerSpec::activation(LayerKind kind) {
    LayerSpec s;
    s.kind = kind;
    return s;
}

LayerSpec LayerSpec::dropout(double rate) {
    LayerSpec s;
    s.kind = LayerKind::dropout;
    s.dropout_rate = rate;
    return s;
}

Layer::Layer(LayerSpec spec) : spec_(std::move(spec)) {
    if (spec_.input.empty() || shape_size(spec_.input) == 0)
        throw ConfigError(std::string(to_string(spec_.kind)) + " layer has an empty input shape");
}

void Layer::accumulate_main_grad(const Tensor&, Tensor&, Tensor*) const {}
void Layer::accumulate_weight_grad(const Tensor&, const Tensor&, Tensor&) const {}

Shape Layer::batched(const Shape& per_sample, std::size_t batch) const {
    Shape s{batch};
    s.insert(s.end(), per_sample.begin(), per_sample.end());
    return s;
}

void Layer::check_input(const Tensor& x, const char* op) const {
    if (x.rank() == 0 || x.size() != x.dim(0) * shape_size(spec_.input) ||
        Shape(x.shape().begin() + 1, x.shape().end()) != spec_.input) {
        // a flat [B x features] view is also accepted for fully-connected inputs
        if (!(kind() == LayerKind::fully_connected && x.rank() == 2 &&
              x.dim(1) == shape_size(spec_.input))) {
            throw DimensionError(std::string(to_string(kind())) + " " + op + ": expected batch x " +
                                 to_string(spec_.input) + ", got " + to_string(x.shape()));
        }
    }
}

void Layer::check_output(const Tensor& dy, const char* op) const {
    if (dy.rank() == 0 || Shape(dy.shape().begin() + 1, dy.shape().end()) != output_) {
        throw DimensionError(std::string(to_string(kind())) + " " + op + ": expected batch x " +
                             to_string(output_) + ", got " + to_string(dy.shape()));
    }
}

void Layer::require_cache(std::size_t batch, const char* op) const {
    if (!cached_batch_) {
        throw StateError(std::string(to_string(kind())) + " " + op + " called before forward");
    }
    if (*cached_batch_ != batch) {
        throw DimensionError(std::string(to_string(kind())) + " " + op + ": cached batch " +
                             std::to_string(*cached_batch_) + " vs " + std::to_string(batch));
    }
}

std::unique_ptr<Layer> make_layer(const LayerSpec& spec) {
    switch (spec.kind) {
        case LayerKind::fully_connected: return std::make_unique<FullyConnected>(spec);
        case LayerKind::conv2d: return std::make_unique<Conv2d>(spec);
        case LayerKind::maxpool:
        case LayerKind::meanpool: return std::make_unique<Pool>(spec);
        case LayerKind::relu:
        case LayerKind::sigmoid: return std::make_unique<Elementwise>(spec);
        case LayerKind::softmax: return std::make_unique<Softmax>(spec);
        case LayerKind::dropout: return std::make_unique<Dropout>(spec);
    }
    throw ConfigError("unknown layer kind");
}

void init_weights(Layer& layer, Rng& rng) {
    if (!layer.has_weights()) return;
    Tensor& w = layer.weights();
    const std::size_t fan_in = layer.kind() == LayerKind::conv2d ? w.size() / w.dim(0) : w.dim(0);
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : w.data()) v = stddev * rng.normal();
    layer.bias().fill(0.0);
}

}  // namespace ibp
