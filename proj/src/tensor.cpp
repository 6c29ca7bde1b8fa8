#include "ibp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace ibp {

std::string to_string(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
        throw DimensionError("tensor shape " + to_string(shape_) + " does not match " +
                             std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        if (r.size() != cols) throw DimensionError("ragged matrix literal");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
}

std::size_t Tensor::stride0() const {
    if (shape_.empty()) return 1;
    return shape_[0] ? data_.size() / shape_[0] : 0;
}

std::span<double> Tensor::row(std::size_t i) {
    std::size_t s = stride0();
    return std::span<double>(data_).subspan(i * s, s);
}

std::span<const double> Tensor::row(std::size_t i) const {
    std::size_t s = stride0();
    return std::span<const double>(data_).subspan(i * s, s);
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
        throw DimensionError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()));
    }
}

Tensor& Tensor::operator+=(const Tensor& other) {
    require_same_shape(*this, other, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    require_same_shape(*this, other, "subtract");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double scale) {
    for (double& v : data_) v *= scale;
    return *this;
}

Tensor& Tensor::add_scaled(const Tensor& other, double scale) {
    require_same_shape(*this, other, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += scale * other.data_[i];
    return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }
Tensor operator*(double s, Tensor a) { return a *= s; }

double dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double sum(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.data()) acc += v;
    return acc;
}

double max_abs(const Tensor& t) {
    double m = 0.0;
    for (double v : t.data()) m = std::max(m, std::abs(v));
    return m;
}

bool all_finite(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor sign(const Tensor& t) {
    Tensor out(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i] > 0.0 ? 1.0 : (t[i] < 0.0 ? -1.0 : 0.0);
    return out;
}

double lp_norm(const Tensor& t, int r) {
    double acc = 0.0;
    if (r == 1) {
        for (double v : t.data()) acc += std::abs(v);
        return acc;
    }
    if (r == 2) {
        for (double v : t.data()) acc += v * v;
        return 0.5 * acc;
    }
    throw ConfigError("lp_norm: r must be 1 or 2, got " + std::to_string(r));
}

Tensor gaussian_fill(const Shape& shape, double mean, double stddev, Rng& rng) {
    Tensor out(shape);
    for (double& v : out.data()) v = mean + stddev * rng.normal();
    return out;
}

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            // four partial sums keep the reduction pipelined
            double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
            std::size_t p = 0;
            for (; p + 4 <= k; p += 4) {
                s0 += ai[p] * bj[p];
                s1 += ai[p + 1] * bj[p + 1];
                s2 += ai[p + 2] * bj[p + 2];
                s3 += ai[p + 3] * bj[p + 3];
            }
            for (; p < k; ++p) s0 += ai[p] * bj[p];
            c[i * n + j] += (s0 + s1) + (s2 + s3);
        }
    }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* ap = a + p * m;
        const double* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double api = ap[i];
            if (api == 0.0) continue;
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    // a rank-1 left operand is treated as a single row
    const bool row_vector = a.rank() == 1;
    if ((a.rank() != 2 && !row_vector) || b.rank() != 2) {
        throw DimensionError("matmul expects matrices, got " + to_string(a.shape()) + " and " +
                             to_string(b.shape()));
    }
    const std::size_t m = row_vector ? 1 : a.dim(0);
    const std::size_t k = row_vector ? a.dim(0) : a.dim(1);
    if (k != b.dim(0)) {
        throw DimensionError("matmul inner extents differ: " + to_string(a.shape()) + " x " +
                             to_string(b.shape()));
    }
    const std::size_t n = b.dim(1);
    Tensor c(row_vector ? Shape{n} : Shape{m, n});
    gemm_nn(m, k, n, a.raw(), b.raw(), c.raw());
    return c;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose expects a matrix, got " + to_string(a.shape()));
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor t({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    return t;
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t pad, std::size_t stride) {
    if (stride == 0) throw ConfigError("stride must be positive");
    const std::size_t padded = in + 2 * pad;
    if (kernel == 0 || kernel > padded) {
        throw ConfigError("kernel " + std::to_string(kernel) + " does not fit padded extent " +
                          std::to_string(padded));
    }
    if ((padded - kernel) % stride != 0) {
        throw ConfigError("window sweep is not integral: (" + std::to_string(padded) + " - " +
                          std::to_string(kernel) + ") / " + std::to_string(stride));
    }
    return (padded - kernel) / stride + 1;
}

void im2col(std::span<const double> image, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, const ConvGeometry& g, std::size_t oh, std::size_t ow,
            std::span<double> cols) {
    const std::size_t plane = oh * ow;
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        const double* src = image.data() + c * h * w;
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
                double* dst = cols.data() + row * plane;
                for (std::size_t oi = 0; oi < oh; ++oi) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.stride_h + ki) -
                                              static_cast<std::ptrdiff_t>(g.pad_h);
                    double* out = dst + oi * ow;
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) {
                        std::fill(out, out + ow, 0.0);
                        continue;
                    }
                    const double* line = src + static_cast<std::size_t>(ii) * w;
                    for (std::size_t oj = 0; oj < ow; ++oj) {
                        const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * g.stride_w + kj) -
                                                  static_cast<std::ptrdiff_t>(g.pad_w);
                        out[oj] = (jj < 0 || jj >= static_cast<std::ptrdiff_t>(w))
                                      ? 0.0
                                      : line[static_cast<std::size_t>(jj)];
                    }
                }
            }
        }
    }
}

void col2im(std::span<const double> cols, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, const ConvGeometry& g, std::size_t oh, std::size_t ow,
            std::span<double> image) {
    const std::size_t plane = oh * ow;
    std::size_t row = 0;
    for (std::size_t c = 0; c < channels; ++c) {
        double* dst = image.data() + c * h * w;
        for (std::size_t ki = 0; ki < kh; ++ki) {
            for (std::size_t kj = 0; kj < kw; ++kj, ++row) {
                const double* src = cols.data() + row * plane;
                for (std::size_t oi = 0; oi < oh; ++oi) {
                    const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.stride_h + ki) -
                                              static_cast<std::ptrdiff_t>(g.pad_h);
                    if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(h)) continue;
                    double* line = dst + static_cast<std::size_t>(ii) * w;
                    const double* in = src + oi * ow;
                    for (std::size_t oj = 0; oj < ow; ++oj) {
                        const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * g.stride_w + kj) -
                                                  static_cast<std::ptrdiff_t>(g.pad_w);
                        if (jj >= 0 && jj < static_cast<std::ptrdiff_t>(w))
                            line[static_cast<std::size_t>(jj)] += in[oj];
                    }
                }
            }
        }
    }
}

Tensor conv2d(const Tensor& input, const Tensor& filters, const ConvGeometry& g) {
    if (input.rank() != 3 || filters.rank() != 4) {
        throw DimensionError("conv2d expects C x H x W input and F x C x kh x kw filters, got " +
                             to_string(input.shape()) + " and " + to_string(filters.shape()));
    }
    const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const std::size_t f = filters.dim(0), kh = filters.dim(2), kw = filters.dim(3);
    if (filters.dim(1) != c) {
        throw DimensionError("conv2d channel mismatch: input " + to_string(input.shape()) +
                             ", filters " + to_string(filters.shape()));
    }
    const std::size_t oh = conv_out_extent(h, kh, g.pad_h, g.stride_h);
    const std::size_t ow = conv_out_extent(w, kw, g.pad_w, g.stride_w);
    std::vector<double> cols(c * kh * kw * oh * ow);
    im2col(input.data(), c, h, w, kh, kw, g, oh, ow, cols);
    Tensor out({f, oh, ow});
    gemm_nn(f, c * kh * kw, oh * ow, filters.raw(), cols.data(), out.raw());
    return out;
}

}  // namespace ibp
