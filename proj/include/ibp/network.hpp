#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <vector>

#include "ibp/layers.hpp"

namespace ibp {

/// Per-batch record of the passes over a network with K layers.
///
/// Index i refers to y_i, the input of layer i (y_0 = x, y_K = output).
/// `dy[i]` is dL/dy_i from the backward pass, `dty[i]` the third-pass
/// (linearized forward, bias-free) activation seeded at the input, and
/// `tangent_y` / `tangent_dy` hold the linearized forward/backward passes
/// used by the tangent-propagation family. Entries that a pass did not
/// reach are left empty.
struct Tape {
    std::vector<Tensor> y;
    std::vector<Tensor> dy;
    std::vector<Tensor> dty;
    std::vector<Tensor> tangent_y;
    std::vector<Tensor> tangent_dy;

    void reset(std::size_t layers);
};

class Network {
public:
    Network() = default;
    /// Chains `layers` starting from the per-sample `input` shape; weights
    /// start at zero until init_weights() is called.
    Network(Shape input, const std::vector<LayerSpec>& layers);

    Network(const Network& other);
    Network& operator=(const Network& other);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    /// He-normal weights, zero biases, drawn layer by layer from `rng`.
    void init_weights(Rng& rng);

    std::size_t size() const { return layers_.size(); }
    Layer& layer(std::size_t i) { return *layers_.at(i); }
    const Layer& layer(std::size_t i) const { return *layers_.at(i); }
    const Shape& input_shape() const { return input_; }
    const Shape& output_shape() const;
    std::vector<LayerSpec> specs() const;

    bool ends_with_softmax() const;
    /// Index into Tape::y of the pre-softmax scores (K - 1 when the last layer
    /// is a softmax, K otherwise).
    std::size_t logits_index() const;
    /// Smallest layer index carrying weights (size() when there is none).
    std::size_t first_weighted() const;
    std::size_t parameter_count() const;

    /// Runs every layer, storing y_0..y_K in the tape. Returns y_K.
    const Tensor& forward(const Tensor& x, const ForwardContext& ctx, Tape& tape);
    /// Forward pass up to `end` (exclusive layer index) without a tape.
    Tensor forward_to(const Tensor& x, const ForwardContext& ctx, std::size_t end);
    /// Evaluation-mode forward pass of the whole network.
    Tensor predict(const Tensor& x);

    /// Backward pass: tape.dy[from] = seed, then dy[i] = vjp_i(dy[i+1]) for
    /// i = from-1 down to `stop`.
    void backward(Tape& tape, std::size_t from, Tensor seed, std::size_t stop) const;
    /// Jacobian-vector chain: out[0] = seed, out[i+1] = jvp_i(out[i]) for i < end.
    void linearized_forward(std::vector<Tensor>& out, Tensor seed, std::size_t end) const;

    void clear_caches();

    void save(std::ostream& out) const;
    void save(const std::filesystem::path& path) const;
    static Network load(std::istream& in);
    static Network load(const std::filesystem::path& path);

private:
    Shape input_;
    std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace ibp
