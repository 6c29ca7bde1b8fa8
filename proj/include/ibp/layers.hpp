#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ibp/tensor.hpp"

namespace ibp {

enum class LayerKind : std::uint32_t {
    fully_connected = 0,
    conv2d = 1,
    maxpool = 2,
    meanpool = 3,
    relu = 4,
    sigmoid = 5,
    softmax = 6,
    dropout = 7,
};

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

/// Layer geometry. `input` is the per-sample shape (no batch axis); the
/// network builder fills it from the previous layer's output.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    Shape input;
    std::size_t outputs = 0;  // fully_connected
    std::size_t filters = 0;  // conv2d
    std::size_t kernel_h = 0, kernel_w = 0;  // conv2d filter or pooling window
    std::size_t pad_h = 0, pad_w = 0;
    std::size_t stride_h = 1, stride_w = 1;
    double dropout_rate = 0.0;

    static LayerSpec fully_connected(std::size_t outputs);
    static LayerSpec conv(std::size_t filters, std::size_t kernel, std::size_t pad = 0, std::size_t stride = 1);
    static LayerSpec max_pool(std::size_t window, std::size_t stride);
    static LayerSpec mean_pool(std::size_t window, std::size_t stride);
    static LayerSpec activation(LayerKind kind);
    static LayerSpec dropout(double rate);

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class Mode { train, eval };

struct ForwardContext {
    Mode mode = Mode::train;
    Rng* rng = nullptr;  // dropout draws; required in train mode
    /// Dropout keeps the mask from the previous training-mode forward call
    /// instead of drawing a new one.
    bool reuse_masks = false;
};

/// One transformation y_i = f_i(y_{i-1}; w_i) of a sequential network.
///
/// All tensors are batched: the leading axis is the sample index and the
/// remaining axes match input_shape() / output_shape(). forward() caches
/// what the derivative passes need (inputs, argmax positions, dropout mask,
/// softmax outputs). vjp() and jvp() then apply the transposed and the plain
/// Jacobian at that cached point; for layers with weights the jvp is the
/// forward map without the bias.
class Layer {
public:
    explicit Layer(LayerSpec spec);
    virtual ~Layer() = default;

    const LayerSpec& spec() const { return spec_; }
    LayerKind kind() const { return spec_.kind; }
    const Shape& input_shape() const { return spec_.input; }
    const Shape& output_shape() const { return output_; }

    virtual std::unique_ptr<Layer> clone() const = 0;

    virtual Tensor forward(const Tensor& x, const ForwardContext& ctx) = 0;
    virtual Tensor vjp(const Tensor& dy) const = 0;
    virtual Tensor jvp(const Tensor& v) const = 0;

    virtual bool has_weights() const { return false; }
    Tensor& weights() { return weights_; }
    const Tensor& weights() const { return weights_; }
    Tensor& bias() { return bias_; }
    const Tensor& bias() const { return bias_; }

    /// dw += sum_b y_prev[b]^T . dy[b] using the input cached by forward();
    /// db += sum_b dy[b] when db is non-null.
    virtual void accumulate_main_grad(const Tensor& dy, Tensor& dw, Tensor* db) const;
    /// dw += sum_b in[b]^T . dy[b] for an arbitrary input-shaped tensor; with
    /// in = d~y_{i-1} this is the auxiliary gradient of the third pass.
    virtual void accumulate_weight_grad(const Tensor& in, const Tensor& dy, Tensor& dw) const;

    /// Drops per-batch caches (used before reusing a layer for another batch
    /// when state must not leak, e.g. in tests).
    virtual void clear_cache() {}

protected:
    void check_input(const Tensor& x, const char* op) const;
    void check_output(const Tensor& dy, const char* op) const;
    void require_cache(std::size_t batch, const char* op) const;
    Shape batched(const Shape& per_sample, std::size_t batch) const;

    LayerSpec spec_;
    Shape output_;
    Tensor weights_;
    Tensor bias_;
    std::optional<std::size_t> cached_batch_;
};

std::unique_ptr<Layer> make_layer(const LayerSpec& spec);

/// Samples He-style Gaussian weights (stddev sqrt(2 / fan_in)) and zero biases.
void init_weights(Layer& layer, Rng& rng);

}  // namespace ibp
