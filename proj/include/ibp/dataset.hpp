#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ibp/tensor.hpp"

namespace ibp {

/// Images N x C x H x W and one-hot labels N x classes. Loaders return pixel
/// values in [0, 1] with mean_pixel = 0; normalize() subtracts a mean and
/// records it.
struct Dataset {
    Tensor images;
    Tensor labels;
    double mean_pixel = 0.0;

    std::size_t size() const { return images.rank() == 0 ? 0 : images.dim(0); }
    std::size_t classes() const { return labels.rank() < 2 ? 0 : labels.dim(1); }
    Shape sample_shape() const;
    /// Class index of sample i (position of the 1 in its label row).
    std::size_t label_of(std::size_t i) const;
    /// Rows `idx` in the given order.
    Dataset take(const std::vector<std::size_t>& idx) const;
};

/// IDX pair: images magic 2051 (u8, N x rows x cols), labels magic 2049.
Dataset load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels);
/// CIFAR-10 binary batches: records of 1 label byte + 3072 planar RGB bytes.
Dataset load_cifar10(const std::vector<std::filesystem::path>& batches);

/// Directory lookup order: explicit argument, then $IBP_DATA_DIR, then "data".
std::filesystem::path data_dir(const std::optional<std::filesystem::path>& override_dir = std::nullopt);
/// Standard file names (train-images-idx3-ubyte, t10k-labels-idx1-ubyte, ...).
Dataset load_mnist_split(const std::filesystem::path& dir, bool train);
/// data_batch_1..5.bin for train, test_batch.bin for test.
Dataset load_cifar10_split(const std::filesystem::path& dir, bool train);

double mean_pixel(const Dataset& ds);
/// x - mean for every pixel; sets ds.mean_pixel.
void normalize(Dataset& ds, double mean);
Tensor normalize(const Tensor& x, double mean);
Tensor denormalize(const Tensor& x, double mean);

/// Class-stratified draw of n samples: n / classes per class, the remainder
/// going one each to the lowest class indices. Selected indices are returned
/// in dataset order.
std::vector<std::size_t> stratified_indices(const Dataset& ds, std::size_t n, std::uint64_t seed);
Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed);

struct AugmentSpec {
    double max_shift = 2.0;  // pixels, per axis
    double min_scale = 0.7;  // per axis
    double max_scale = 1.4;
    double max_rotation_deg = 18.0;
    double fill = 0.0;  // value of samples falling outside the source image

    static AugmentSpec identity();
    void validate() const;
};

/// Scale, then rotate, then shift, all about the image center.
struct AffineParams {
    double shift_x = 0.0, shift_y = 0.0;
    double scale_x = 1.0, scale_y = 1.0;
    double angle = 0.0;  // radians; positive turns +x toward +y
};

AffineParams sample_affine(const AugmentSpec& spec, Rng& rng);

/// Bilinear warp of a C x H x W image: output pixel p reads the source at
/// c + S^-1 R(-angle) (p - shift - c); taps outside the image read `fill`.
Tensor warp(const Tensor& img, const AffineParams& t, double fill);

Tensor augment(const Tensor& img, const AugmentSpec& spec, Rng& rng);

}  // namespace ibp
