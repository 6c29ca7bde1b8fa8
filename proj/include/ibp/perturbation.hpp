#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ibp/dataset.hpp"
#include "ibp/network.hpp"

namespace ibp {

enum class NoiseKind { adversarial, gaussian };

std::string_view to_string(NoiseKind kind);
NoiseKind noise_kind_from_string(std::string_view name);

struct NoiseSweep {
    NoiseKind kind = NoiseKind::gaussian;
    std::vector<double> levels;
    std::vector<double> errors;  // fraction misclassified per level
    std::size_t n = 0;
    std::uint64_t seed = 0;
};

/// Input gradient of the per-sample softmax NLL loss (p - l, no batch
/// scaling) for every row of x, taken in evaluation mode.
Tensor input_gradient(Network& net, const Tensor& x, const Tensor& labels);

/// x + epsilon * sign(grad of the loss against the true labels). Weights are
/// left untouched.
Dataset adversarial_testset(Network& net, const Dataset& ds, double epsilon, std::size_t batch = 100,
                            const std::optional<std::pair<double, double>>& clip = std::nullopt);

/// x + N(0, sigma^2) noise; sample i draws from the stream (seed, "gaussian", i).
Dataset gaussian_testset(const Dataset& ds, double sigma, std::uint64_t seed);

/// Predicted class per sample; ties go to the lowest class index.
std::vector<std::size_t> predict_classes(Network& net, const Tensor& images, std::size_t batch = 100);
double test_error(Network& net, const Dataset& ds, std::size_t batch = 100);

/// Levels must be non-negative, strictly increasing and start at 0.
void validate_levels(const std::vector<double>& levels);

NoiseSweep sweep(Network& net, const Dataset& ds, NoiseKind kind, const std::vector<double>& levels,
                 std::uint64_t seed, std::size_t batch = 100);

/// Shortest decimal form of a level that parses back to the same double.
std::string format_level(double level);

/// Header "kind,level,error,n,seed"; errors with six decimals.
void write_csv(std::ostream& out, const NoiseSweep& s);

}  // namespace ibp
