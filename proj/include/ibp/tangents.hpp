#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include "ibp/tensor.hpp"

namespace ibp {

enum class TangentKind { shift_x, shift_y, scale_x, scale_y, rotation };
inline constexpr std::size_t kTangentCount = 5;

std::string_view to_string(TangentKind kind);

/// Normalized 1D Gaussian taps of radius ceil(3 sigma).
std::vector<double> gaussian_kernel(double sigma);

/// Separable Gaussian blur of a C x H x W image, zero outside the image.
Tensor gaussian_smooth(const Tensor& img, double sigma);

/// Spatial derivatives of a C x H x W image: central differences inside,
/// one-sided differences on the border rows/columns.
Tensor derivative_x(const Tensor& img);
Tensor derivative_y(const Tensor& img);

/// Tangents of one image. Each entry is d/dtheta I(p + theta * v(p)) at
/// theta = 0 for the flow v of the transformation, with p = (x, y) in pixels
/// and c = ((W-1)/2, (H-1)/2):
///   shift-x (1, 0), shift-y (0, 1), scale-x (x - cx, 0), scale-y (0, y - cy),
///   rotation (y - cy, -(x - cx)).
struct TangentSet {
    double sigma = 0.0;
    std::array<Tensor, kTangentCount> vectors;

    const Tensor& operator[](TangentKind k) const { return vectors[static_cast<std::size_t>(k)]; }
};

TangentSet tangent_vectors(const Tensor& img, double sigma);

/// Scales every sample row of t to unit Euclidean norm (zero rows stay zero).
void normalize_rows(Tensor& t);

/// Tangents for a whole N x C x H x W stack: one N x C x H x W tensor per
/// kind, in TangentKind order.
std::vector<Tensor> dataset_tangents(const Tensor& images, double sigma, bool normalize = false);

/// Key identifying a tangent computation: hash of the image bytes, sigma and
/// the normalization flag.
std::uint64_t tangent_cache_key(const Tensor& images, double sigma, bool normalize);

/// Cache file: "IBPTAN1", u64 key, u32 count, then for each tensor u32 rank,
/// u64 extents and little-endian f64 values.
void save_tangent_cache(const std::filesystem::path& path, std::uint64_t key, const std::vector<Tensor>& tangents);
/// Returns nothing when the file is absent or was written for another key.
std::optional<std::vector<Tensor>> load_tangent_cache(const std::filesystem::path& path, std::uint64_t key);

}  // namespace ibp
