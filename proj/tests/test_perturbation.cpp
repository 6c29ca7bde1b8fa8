#include <catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <sstream>

#include "ibp/perturbation.hpp"
#include "ibp/training.hpp"

using namespace ibp;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Two Gaussian blobs in 6 dimensions centered at -0.5 and +0.5.
Dataset blobs(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset ds{Tensor({n, 1, 2, 3}), Tensor({n, 2}), 0.0};
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % 2;
        ds.labels[i * 2 + c] = 1.0;
        for (std::size_t k = 0; k < 6; ++k) ds.images[i * 6 + k] = (c ? 0.5 : -0.5) + 0.6 * rng.normal();
    }
    return ds;
}

Network linear_net(std::uint64_t seed) {
    Network net({1, 2, 3}, {LayerSpec::fully_connected(2), LayerSpec::activation(LayerKind::softmax)});
    Rng rng(seed);
    net.init_weights(rng);
    return net;
}

void train_briefly(Network& net, const Dataset& ds) {
    TrainConfig cfg;
    SgdMomentum opt(net);
    Rng rng(0);
    for (std::size_t epoch = 0; epoch < 3; ++epoch)
        for (std::size_t b = 0; b + 20 <= ds.size(); b += 20) {
            std::vector<std::size_t> idx(20);
            std::iota(idx.begin(), idx.end(), b);
            const Dataset part = ds.take(idx);
            Tape tape;
            opt.update(net, step_bp(net, Batch{part.images, part.labels, {}}, cfg, rng, tape).grads, cfg, epoch);
        }
}

}  // namespace

TEST_CASE("adversarial input example") {
    CHECK(adversarial_input(Tensor::matrix({{0.5, 0.5}}), Tensor::matrix({{0.2, -0.1}}), 0.25) ==
          Tensor::matrix({{0.75, 0.25}}));
}

TEST_CASE("zero noise leaves the set and its error unchanged") {
    const Dataset ds = blobs(50, 1);
    Network net = linear_net(2);
    CHECK(adversarial_testset(net, ds, 0.0).images == ds.images);
    CHECK(gaussian_testset(ds, 0.0, 7).images == ds.images);
    const NoiseSweep s = sweep(net, ds, NoiseKind::adversarial, {0.0, 0.1}, 1);
    CHECK(s.errors[0] == test_error(net, ds));
}

TEST_CASE("adversarial perturbation has max-norm epsilon") {
    const Dataset ds = blobs(30, 3);
    Network net = linear_net(4);
    const Dataset adv = adversarial_testset(net, ds, 0.07);
    for (std::size_t i = 0; i < ds.images.size(); ++i) CHECK_THAT(std::abs(adv.images[i] - ds.images[i]), WithinAbs(0.07, 1e-15));
}

TEST_CASE("adversarial direction follows the input gradient sign") {
    const Dataset ds = blobs(10, 5);
    Network net = linear_net(6);
    const Tensor g = input_gradient(net, ds.images, ds.labels);
    const Dataset adv = adversarial_testset(net, ds, 0.1, 3);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(adv.images[i] == ds.images[i] + 0.1 * (g[i] > 0 ? 1.0 : -1.0));
}

TEST_CASE("gaussian noise statistics and determinism") {
    Dataset ds{Tensor({100, 1, 50, 20}), Tensor({100, 2}), 0.0};
    for (std::size_t i = 0; i < 100; ++i) ds.labels[i * 2] = 1.0;
    const Dataset a = gaussian_testset(ds, 0.3, 9), b = gaussian_testset(ds, 0.3, 9), c = gaussian_testset(ds, 0.3, 10);
    CHECK(a.images == b.images);
    CHECK_FALSE(a.images == c.images);
    double ss = 0.0;
    for (double v : a.images.data()) ss += v * v;
    CHECK_THAT(ss / static_cast<double>(a.images.size()), WithinRel(0.09, 0.02));
}

TEST_CASE("sweep does not depend on the evaluation batch size or sample order") {
    const Dataset ds = blobs(64, 7);
    Network net = linear_net(8);
    train_briefly(net, ds);
    const std::vector<double> levels{0.0, 0.05, 0.2, 0.5};
    const NoiseSweep s1 = sweep(net, ds, NoiseKind::adversarial, levels, 1, 100);
    const NoiseSweep s2 = sweep(net, ds, NoiseKind::adversarial, levels, 1, 7);
    CHECK(s1.errors == s2.errors);
    CHECK(sweep(net, ds, NoiseKind::gaussian, levels, 1, 100).errors ==
          sweep(net, ds, NoiseKind::gaussian, levels, 1, 9).errors);

    std::vector<std::size_t> rev(ds.size());
    std::iota(rev.rbegin(), rev.rend(), 0);
    CHECK(sweep(net, ds.take(rev), NoiseKind::adversarial, levels, 1).errors == s1.errors);
}

TEST_CASE("adversarial error does not decrease with epsilon") {
    for (std::uint64_t seed : {11, 12, 13}) {
        const Dataset train = blobs(200, seed), test = blobs(100, seed + 100);
        Network net = linear_net(seed);
        train_briefly(net, train);
        const NoiseSweep s = sweep(net, test, NoiseKind::adversarial, {0.0, 0.05, 0.1, 0.2, 0.4, 0.8}, seed);
        CHECK(s.errors.front() < 0.3);
        for (std::size_t k = 1; k < s.errors.size(); ++k) CHECK(s.errors[k] >= s.errors[k - 1]);
        CHECK(s.errors.back() > s.errors.front());
    }
}

TEST_CASE("noise sweep CSV") {
    NoiseSweep s{NoiseKind::gaussian, {0.0, 0.1, 0.25}, {0.125, 0.5, 1.0 / 3.0}, 8, 42};
    std::ostringstream out;
    write_csv(out, s);
    CHECK(out.str() ==
          "kind,level,error,n,seed\n"
          "gaussian,0,0.125000,8,42\n"
          "gaussian,0.1,0.500000,8,42\n"
          "gaussian,0.25,0.333333,8,42\n");
    CHECK(format_level(0.3) == "0.3");
    CHECK(format_level(1e-3) == "0.001");
    CHECK(format_level(2.0) == "2");
}

TEST_CASE("noise level validation") {
    CHECK_NOTHROW(validate_levels({0.0, 0.1, 0.3}));
    CHECK_THROWS_AS(validate_levels({}), ConfigError);
    CHECK_THROWS_AS(validate_levels({0.1, 0.2}), ConfigError);
    CHECK_THROWS_AS(validate_levels({0.0, 0.2, 0.2}), ConfigError);
    CHECK_THROWS_AS(validate_levels({0.0, 0.2, 0.1}), ConfigError);
    CHECK_THROWS_AS(noise_kind_from_string("salt"), ConfigError);
}

TEST_CASE("adversarial sets need labels") {
    Dataset ds = blobs(4, 1);
    ds.labels = Tensor();
    Network net = linear_net(1);
    CHECK_THROWS_AS(adversarial_testset(net, ds, 0.1), ConfigError);
}

TEST_CASE("prediction ties go to the lowest class") {
    Network net({1, 1, 2}, {LayerSpec::fully_connected(3), LayerSpec::activation(LayerKind::softmax)});
    CHECK(predict_classes(net, Tensor({2, 1, 1, 2}, 1.0)) == std::vector<std::size_t>{0, 0});
}
