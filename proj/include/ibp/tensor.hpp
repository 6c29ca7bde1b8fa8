#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "ibp/errors.hpp"
#include "ibp/rng.hpp"

namespace ibp {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major array of doubles. The leading extent is the batch
/// dimension wherever a tensor holds per-sample data.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    /// Rank-1 tensor from a literal list.
    static Tensor vector(std::initializer_list<double> values);
    /// Rank-2 tensor from nested literal rows.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }
    double* raw() { return data_.data(); }
    const double* raw() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// Element count of one leading-axis slice (one sample of a batch).
    std::size_t stride0() const;
    std::span<double> row(std::size_t i);
    std::span<const double> row(std::size_t i) const;

    Tensor reshaped(Shape shape) const;
    void fill(double value);

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double scale);
    /// this += scale * other
    Tensor& add_scaled(const Tensor& other, double scale);

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);
Tensor operator*(double s, Tensor a);

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

double dot(const Tensor& a, const Tensor& b);
double sum(const Tensor& t);
double max_abs(const Tensor& t);
bool all_finite(const Tensor& t);
Tensor hadamard(const Tensor& a, const Tensor& b);

/// Maps negatives to -1, positives to +1 and exact zeros to 0.
Tensor sign(const Tensor& t);
/// (1/r) * sum |t_i|^r for r in {1, 2}.
double lp_norm(const Tensor& t, int r);

Tensor gaussian_fill(const Shape& shape, double mean, double stddev, Rng& rng);

// --- matrix products on raw row-major buffers -------------------------------
// All variants accumulate into c (c += ...). Loop orders keep the innermost
// loop contiguous; each output row depends only on the matching input row.

/// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
/// c[m x n] += a[m x k] * b[n x k]^T
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);
/// c[m x n] += a[k x m]^T * b[k x n]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
             double* c);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// --- 2D convolution ---------------------------------------------------------

struct ConvGeometry {
    std::size_t pad_h = 0;
    std::size_t pad_w = 0;
    std::size_t stride_h = 1;
    std::size_t stride_w = 1;
};

/// Output extent of a strided window sweep; throws ConfigError when the
/// window does not tile the padded input exactly.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t pad, std::size_t stride);

/// Unfolds one C x H x W image into a (C*kh*kw) x (oh*ow) column matrix.
/// Out-of-bounds taps read zero.
void im2col(std::span<const double> image, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, const ConvGeometry& g, std::size_t oh, std::size_t ow,
            std::span<double> cols);

/// Adjoint of im2col: scatters-and-adds columns back into an image buffer.
void col2im(std::span<const double> cols, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kh, std::size_t kw, const ConvGeometry& g, std::size_t oh, std::size_t ow,
            std::span<double> image);

/// Cross-correlation of a C x H x W input with F x C x kh x kw filters.
Tensor conv2d(const Tensor& input, const Tensor& filters, const ConvGeometry& g);

}  // namespace ibp
