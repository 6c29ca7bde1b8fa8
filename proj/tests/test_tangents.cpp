#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ibp/dataset.hpp"
#include "ibp/tangents.hpp"

using namespace ibp;
using Catch::Matchers::WithinAbs;
namespace fs = std::filesystem;

namespace {

Tensor image(std::size_t h, std::size_t w, double (*f)(double, double)) {
    Tensor t({1, h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) t[y * w + x] = f(static_cast<double>(x), static_cast<double>(y));
    return t;
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "ibp_test_tangents";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("gaussian kernel taps sum to one") {
    for (double sigma : {0.3, 0.9, 2.0}) {
        const auto k = gaussian_kernel(sigma);
        CHECK(k.size() == 2 * static_cast<std::size_t>(std::ceil(3.0 * sigma)) + 1);
        double s = 0.0;
        for (double v : k) s += v;
        CHECK_THAT(s, WithinAbs(1.0, 1e-15));
    }
    CHECK_THROWS_AS(gaussian_kernel(0.0), ConfigError);
    CHECK_THROWS_AS(gaussian_kernel(-1.0), ConfigError);
}

TEST_CASE("smoothing leaves a constant interior unchanged") {
    const Tensor img({1, 12, 12}, 0.7);
    const Tensor s = gaussian_smooth(img, 0.9);
    for (std::size_t y = 3; y < 9; ++y)
        for (std::size_t x = 3; x < 9; ++x) CHECK_THAT(s[y * 12 + x], WithinAbs(0.7, 1e-15));
}

TEST_CASE("a narrow kernel is the identity") {
    Rng rng(1);
    const Tensor img = gaussian_fill({2, 5, 5}, 0.0, 1.0, rng);
    const Tensor s = gaussian_smooth(img, 0.1);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK_THAT(s[i], WithinAbs(img[i], 1e-15));
}

TEST_CASE("smoothed impulse matches a dense 2D convolution") {
    const double sigma = 0.9;
    const int radius = 3;
    Tensor img({1, 9, 9});
    img[4 * 9 + 4] = 1.0;
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) norm += std::exp(-0.5 * i * i / (sigma * sigma));
    auto g2 = [&](int dy, int dx) {
        if (std::abs(dy) > radius || std::abs(dx) > radius) return 0.0;
        return std::exp(-0.5 * (dx * dx + dy * dy) / (sigma * sigma)) / (norm * norm);
    };
    const Tensor s = gaussian_smooth(img, sigma);
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 9; ++x) {
            double ref = 0.0;
            for (int yy = 0; yy < 9; ++yy)
                for (int xx = 0; xx < 9; ++xx) ref += g2(y - yy, x - xx) * img[yy * 9 + xx];
            CHECK_THAT(s[y * 9 + x], WithinAbs(ref, 1e-10));
        }
}

TEST_CASE("constant image has zero tangents") {
    const TangentSet t = tangent_vectors(Tensor({1, 10, 10}, 0.5), 0.9);
    // the zero boundary of the blur bends the border, so look inside
    for (const Tensor& v : t.vectors)
        for (std::size_t y = 4; y < 6; ++y)
            for (std::size_t x = 4; x < 6; ++x) CHECK_THAT(v[y * 10 + x], WithinAbs(0.0, 1e-14));
}

TEST_CASE("horizontal ramp has unit shift-x tangent") {
    const Tensor ramp = image(16, 16, [](double x, double) { return x; });
    const TangentSet t = tangent_vectors(ramp, 0.9);
    for (std::size_t y = 4; y < 12; ++y)
        for (std::size_t x = 4; x < 12; ++x) {
            CHECK_THAT(t[TangentKind::shift_x][y * 16 + x], WithinAbs(1.0, 1e-12));
            CHECK_THAT(t[TangentKind::shift_y][y * 16 + x], WithinAbs(0.0, 1e-12));
            CHECK_THAT(t[TangentKind::scale_x][y * 16 + x], WithinAbs(static_cast<double>(x) - 7.5, 1e-11));
        }
}

TEST_CASE("rotation tangent is the limit of small warps") {
    // On a smooth image the symmetric quotient of bilinear warps of the
    // smoothed image converges to the tangent built from the same image.
    const Tensor img = image(15, 15, [](double x, double y) { return std::sin(0.4 * x) * std::cos(0.3 * y) + 0.02 * x * y; });
    const Tensor smooth = gaussian_smooth(img, 0.9);
    const Tensor& rot = tangent_vectors(img, 0.9)[TangentKind::rotation];
    std::vector<double> errors;
    for (double theta : {0.1, 0.05, 0.025}) {
        AffineParams plus, minus;
        plus.angle = theta;
        minus.angle = -theta;
        const Tensor tp = warp(smooth, plus, 0.0), tm = warp(smooth, minus, 0.0);
        double worst = 0.0;
        for (std::size_t y = 0; y < 15; ++y)
            for (std::size_t x = 0; x < 15; ++x) {
                const double dx = static_cast<double>(x) - 7.0, dy = static_cast<double>(y) - 7.0;
                if (dx * dx + dy * dy > 16.0) continue;
                const std::size_t i = y * 15 + x;
                worst = std::max(worst, std::abs((tp[i] - tm[i]) / (2.0 * theta) - rot[i]));
            }
        errors.push_back(worst);
    }
    CHECK(errors[1] < errors[0]);
    CHECK(errors[2] < errors[1]);
    CHECK(errors[2] < 0.05);
}

TEST_CASE("radially symmetric images have no rotation tangent") {
    const Tensor img = image(15, 15, [](double x, double y) { return (x - 7) * (x - 7) + (y - 7) * (y - 7); });
    const Tensor& rot = tangent_vectors(img, 0.9)[TangentKind::rotation];
    for (std::size_t y = 4; y < 11; ++y)
        for (std::size_t x = 4; x < 11; ++x) CHECK_THAT(rot[y * 15 + x], WithinAbs(0.0, 1e-6));
}

TEST_CASE("tangents are linear in the image") {
    Rng rng(2);
    const Tensor a = gaussian_fill({1, 8, 8}, 0.0, 1.0, rng), b = gaussian_fill({1, 8, 8}, 0.0, 1.0, rng);
    const TangentSet ta = tangent_vectors(a, 0.9), tb = tangent_vectors(b, 0.9);
    const TangentSet tab = tangent_vectors(a * 2.0 + b, 0.9);
    for (std::size_t k = 0; k < kTangentCount; ++k)
        for (std::size_t i = 0; i < a.size(); ++i)
            CHECK_THAT(tab.vectors[k][i], WithinAbs(2.0 * ta.vectors[k][i] + tb.vectors[k][i], 1e-12));
}

TEST_CASE("row normalization") {
    Tensor t = Tensor::matrix({{3, 4}, {0, 0}});
    normalize_rows(t);
    CHECK_THAT(t[0], WithinAbs(0.6, 1e-15));
    CHECK_THAT(t[1], WithinAbs(0.8, 1e-15));
    CHECK(t[2] == 0.0);
    CHECK(t[3] == 0.0);
}

TEST_CASE("dataset tangents stack per-image tangents") {
    Rng rng(3);
    const Tensor imgs = gaussian_fill({3, 1, 6, 6}, 0.0, 1.0, rng);
    const auto all = dataset_tangents(imgs, 0.9);
    REQUIRE(all.size() == kTangentCount);
    const Tensor second(Shape{1, 6, 6}, std::vector<double>(imgs.row(1).begin(), imgs.row(1).end()));
    const TangentSet one = tangent_vectors(second, 0.9);
    for (std::size_t k = 0; k < kTangentCount; ++k)
        for (std::size_t i = 0; i < 36; ++i) CHECK(all[k][36 + i] == one.vectors[k][i]);

    const auto unit = dataset_tangents(imgs, 0.9, true);
    for (std::size_t b = 0; b < 3; ++b) {
        double ss = 0.0;
        for (double v : unit[4].row(b)) ss += v * v;
        CHECK_THAT(ss, WithinAbs(1.0, 1e-12));
    }
}

TEST_CASE("tangent cache round trip") {
    Rng rng(4);
    const Tensor imgs = gaussian_fill({2, 1, 5, 5}, 0.0, 1.0, rng);
    const auto tangents = dataset_tangents(imgs, 0.9);
    const std::uint64_t key = tangent_cache_key(imgs, 0.9, false);
    CHECK(key != tangent_cache_key(imgs, 0.8, false));
    CHECK(key != tangent_cache_key(imgs, 0.9, true));
    CHECK(key != tangent_cache_key(imgs * 2.0, 0.9, false));

    const fs::path path = scratch("roundtrip.cache");
    fs::remove(path);
    CHECK_FALSE(load_tangent_cache(path, key).has_value());
    save_tangent_cache(path, key, tangents);
    const auto back = load_tangent_cache(path, key);
    REQUIRE(back.has_value());
    REQUIRE(back->size() == tangents.size());
    for (std::size_t k = 0; k < tangents.size(); ++k) CHECK((*back)[k] == tangents[k]);
    CHECK_FALSE(load_tangent_cache(path, key + 1).has_value());

    const fs::path bad = scratch("bad.cache");
    std::ofstream(bad, std::ios::binary) << "NOTACACHE-----------";
    CHECK_THROWS_AS(load_tangent_cache(bad, key), FormatError);
}
