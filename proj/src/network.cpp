#include "ibp/network.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace ibp {

void Tape::reset(std::size_t layers) {
    for (auto* v : {&y, &dy, &dty, &tangent_y, &tangent_dy}) {
        v->clear();
        v->resize(layers + 1);
    }
}

Network::Network(Shape input, const std::vector<LayerSpec>& layers) : input_(std::move(input)) {
    Shape current = input_;
    for (LayerSpec spec : layers) {
        spec.input = current;
        layers_.push_back(make_layer(spec));
        current = layers_.back()->output_shape();
    }
}

Network::Network(const Network& other) : input_(other.input_) {
    layers_.reserve(other.layers_.size());
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Network& Network::operator=(const Network& other) {
    if (this != &other) {
        Network copy(other);
        *this = std::move(copy);
    }
    return *this;
}

void Network::init_weights(Rng& rng) {
    for (auto& l : layers_) ibp::init_weights(*l, rng);
}

const Shape& Network::output_shape() const {
    return layers_.empty() ? input_ : layers_.back()->output_shape();
}

std::vector<LayerSpec> Network::specs() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers_) out.push_back(l->spec());
    return out;
}

bool Network::ends_with_softmax() const {
    return !layers_.empty() && layers_.back()->kind() == LayerKind::softmax;
}

std::size_t Network::logits_index() const { return ends_with_softmax() ? size() - 1 : size(); }

std::size_t Network::first_weighted() const {
    for (std::size_t i = 0; i < layers_.size(); ++i)
        if (layers_[i]->has_weights()) return i;
    return layers_.size();
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_)
        if (l->has_weights()) n += l->weights().size() + l->bias().size();
    return n;
}

const Tensor& Network::forward(const Tensor& x, const ForwardContext& ctx, Tape& tape) {
    tape.reset(size());
    tape.y[0] = x;
    for (std::size_t i = 0; i < size(); ++i) tape.y[i + 1] = layers_[i]->forward(tape.y[i], ctx);
    return tape.y.back();
}

Tensor Network::forward_to(const Tensor& x, const ForwardContext& ctx, std::size_t end) {
    Tensor y = x;
    for (std::size_t i = 0; i < end; ++i) y = layers_[i]->forward(y, ctx);
    return y;
}

Tensor Network::predict(const Tensor& x) {
    return forward_to(x, ForwardContext{Mode::eval, nullptr, false}, size());
}

void Network::backward(Tape& tape, std::size_t from, Tensor seed, std::size_t stop) const {
    if (tape.dy.size() != size() + 1) throw StateError("backward: tape has no forward pass");
    tape.dy[from] = std::move(seed);
    for (std::size_t i = from; i > stop; --i) tape.dy[i - 1] = layers_[i - 1]->vjp(tape.dy[i]);
}

void Network::linearized_forward(std::vector<Tensor>& out, Tensor seed, std::size_t end) const {
    out.resize(size() + 1);
    out[0] = std::move(seed);
    for (std::size_t i = 0; i < end; ++i) out[i + 1] = layers_[i]->jvp(out[i]);
}

void Network::clear_caches() {
    for (auto& l : layers_) l->clear_cache();
}

// --- model file -------------------------------------------------------------
// "IBPNET1", u32 layer count, u32 input rank, u64 input extents, then per
// layer: u32 kind, u64 outputs, filters, kernel_h, kernel_w, pad_h, pad_w,
// stride_h, stride_w, f64 dropout rate. Weight and bias blobs follow for each
// layer with weights, in declaration order. All values little-endian.

namespace {

constexpr char kMagic[] = {'I', 'B', 'P', 'N', 'E', 'T', '1'};

template <class T>
void put(std::ostream& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get(std::istream& in, const char* what) {
    unsigned char bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T)))
        throw FormatError(std::string("model file truncated while reading ") + what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

}  // namespace

void Network::save(std::ostream& out) const {
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(input_.size()));
    for (std::size_t e : input_) put<std::uint64_t>(out, e);
    for (const auto& l : layers_) {
        const LayerSpec& s = l->spec();
        put<std::uint32_t>(out, static_cast<std::uint32_t>(s.kind));
        for (std::size_t v : {s.outputs, s.filters, s.kernel_h, s.kernel_w, s.pad_h, s.pad_w, s.stride_h,
                              s.stride_w})
            put<std::uint64_t>(out, v);
        put<double>(out, s.dropout_rate);
    }
    for (const auto& l : layers_) {
        if (!l->has_weights()) continue;
        for (double v : l->weights().data()) put<double>(out, v);
        for (double v : l->bias().data()) put<double>(out, v);
    }
    if (!out) throw FormatError("failed writing model file");
}

void Network::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + path.string() + " for writing");
    save(out);
}

Network Network::load(std::istream& in) {
    char magic[sizeof(kMagic)];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError("not an IBPNET1 model file (bad magic at offset 0)");
    const auto count = get<std::uint32_t>(in, "layer count");
    const auto rank = get<std::uint32_t>(in, "input rank");
    if (rank == 0 || rank > 8) throw FormatError("implausible input rank " + std::to_string(rank));
    Shape input(rank);
    for (auto& e : input) e = static_cast<std::size_t>(get<std::uint64_t>(in, "input shape"));
    std::vector<LayerSpec> specs(count);
    for (auto& s : specs) {
        const auto kind = get<std::uint32_t>(in, "layer kind");
        if (kind > static_cast<std::uint32_t>(LayerKind::dropout))
            throw FormatError("unknown layer kind code " + std::to_string(kind));
        s.kind = static_cast<LayerKind>(kind);
        for (std::size_t* field : {&s.outputs, &s.filters, &s.kernel_h, &s.kernel_w, &s.pad_h, &s.pad_w,
                                   &s.stride_h, &s.stride_w})
            *field = static_cast<std::size_t>(get<std::uint64_t>(in, "layer spec"));
        s.dropout_rate = get<double>(in, "dropout rate");
    }
    Network net(std::move(input), specs);
    for (auto& l : net.layers_) {
        if (!l->has_weights()) continue;
        for (double& v : l->weights().data()) v = get<double>(in, "weights");
        for (double& v : l->bias().data()) v = get<double>(in, "biases");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after model data");
    return net;
}

Network Network::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open model file " + path.string());
    return load(in);
}

}  // namespace ibp
