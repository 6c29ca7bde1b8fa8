#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ibp/harness.hpp"

using namespace ibp;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "ibp_test_harness" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

bool have_mnist() {
    const char* env = std::getenv("IBP_DATA_DIR");
    return env && fs::exists(fs::path(env) / "mnist" / "train-images-idx3-ubyte");
}

ExperimentConfig quick(Algorithm algo) {
    ExperimentConfig c = ExperimentConfig::from_preset("mnist-tiny");
    c.subset_size = 200;
    c.train.epochs = 2;
    c.train.algo = algo;
    return c;
}

RunRecord fake_run(Algorithm algo, double param, double error, double seconds = 1.0) {
    RunRecord r;
    r.config = ExperimentConfig::from_preset("mnist-tiny");
    r.config.train.algo = algo;
    if (uses_beta(algo)) r.config.train.beta = param;
    if (uses_epsilon(algo)) r.config.train.epsilon = param;
    EpochRecord e;
    e.epoch = 1;
    e.test_error = error;
    e.seconds = seconds;
    r.epochs.push_back(e);
    return r;
}

}  // namespace

TEST_CASE("presets carry their schedule and networks") {
    const Preset mnist = preset("mnist-paper");
    CHECK(mnist.train.learning_rate == 0.1);
    CHECK(mnist.train.momentum == 0.9);
    CHECK(mnist.train.decay == 0.98);
    CHECK(mnist.train.epochs == 80);
    CHECK(mnist.train.batch_size == 32);
    CHECK(mnist.layers[0] == LayerSpec::conv(32, 4, 0));
    CHECK(mnist.layers[2] == LayerSpec::max_pool(3, 2));
    CHECK(mnist.layers[3].filters == 64);
    CHECK(mnist.layers[6] == LayerSpec::fully_connected(256));
    const Network net(mnist.input, mnist.layers);
    CHECK(net.layer(0).output_shape() == Shape{32, 25, 25});
    CHECK(net.layer(2).output_shape() == Shape{32, 12, 12});
    CHECK(net.layer(5).output_shape() == Shape{64, 5, 5});
    CHECK(net.output_shape() == Shape{10});

    const Preset cifar = preset("cifar-paper");
    CHECK(cifar.input == Shape{3, 32, 32});
    CHECK(cifar.layers[0].kernel_h == 5);
    const Network cnet(cifar.input, cifar.layers);
    CHECK(cnet.output_shape() == Shape{10});

    const Preset tiny = preset("mnist-tiny");
    CHECK(tiny.subset_size == 1000);
    CHECK(tiny.train.epochs == 20);
    CHECK(preset_names().size() == 3);
    CHECK_THROWS_AS(preset("imagenet"), ConfigError);
}

TEST_CASE("experiment configuration validation") {
    ExperimentConfig c = ExperimentConfig::from_preset("mnist-paper");
    CHECK_NOTHROW(c.validate());
    c.dataset = "cifar10";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ExperimentConfig::from_preset("mnist-tiny");
    c.max_batches = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.max_batches.reset();
    c.train.epochs = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("aggregation statistics") {
    const std::vector<RunRecord> runs{fake_run(Algorithm::bp, 0, 0.10, 2.0), fake_run(Algorithm::bp, 0, 0.12, 4.0),
                                      fake_run(Algorithm::bp, 0, 0.17, 3.0), fake_run(Algorithm::pred_ibp, 0.3, 0.09),
                                      fake_run(Algorithm::pred_ibp, 1, 0.08), fake_run(Algorithm::pred_ibp, 1, 0.10)};
    const auto rows = aggregate(runs);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].algo == "bp");
    CHECK(rows[0].runs == 3);
    CHECK_THAT(rows[0].mean_error, WithinAbs(0.13, 1e-15));
    // deviations -0.03, -0.01, 0.04: sum of squares 0.0026 over 2
    CHECK_THAT(rows[0].std_error, WithinAbs(std::sqrt(0.0013), 1e-15));
    CHECK_THAT(rows[0].seconds_per_epoch, WithinAbs(3.0, 1e-15));
    CHECK(rows[0].best);
    CHECK(rows[1].algo == "pred-ibp");
    CHECK(rows[1].param == 0.3);
    CHECK(rows[1].std_error == 0.0);
    CHECK(rows[1].best);
    CHECK(rows[2].param == 1.0);
    CHECK_THAT(rows[2].mean_error, WithinAbs(0.09, 1e-15));
    CHECK(rows[2].best);  // tie with the 0.3 row
    const auto one = aggregate({fake_run(Algorithm::at, 0.1, 0.2)});
    CHECK(one[0].std_error == 0.0);
    CHECK(one[0].param == 0.1);

    std::ostringstream csv, text;
    write_report_csv(csv, rows);
    CHECK_THAT(csv.str(), ContainsSubstring("algo,preset,subset_size,param,runs,mean_error,std_error,seconds_per_epoch,best\n"));
    CHECK_THAT(csv.str(), ContainsSubstring("bp,mnist-tiny,1000,0,3,0.130000,"));
    write_report_text(text, rows);
    CHECK_THAT(text.str(), ContainsSubstring("13.00 +- 3.61"));
}

TEST_CASE("number lists") {
    CHECK(parse_list("0.3,1,3") == std::vector<double>{0.3, 1.0, 3.0});
    CHECK(parse_list("2") == std::vector<double>{2.0});
    CHECK_THROWS_AS(parse_list(""), ConfigError);
    CHECK_THROWS_AS(parse_list("1,,2"), ConfigError);
    CHECK_THROWS_AS(parse_list("1,x"), ConfigError);
}

TEST_CASE("missing run directories") {
    CHECK_THROWS_AS(collect_runs("/nonexistent/runs"), ConfigError);
    CHECK_THROWS_AS(collect_runs(scratch("empty")), ConfigError);
    CHECK_THROWS_AS(read_run(scratch("no-log")), FormatError);
}

TEST_CASE("a short run writes a readable run directory") {
    if (!have_mnist()) SKIP("MNIST files not available");
    const fs::path dir = scratch("short");
    ExperimentConfig cfg = quick(Algorithm::pred_ibp);
    cfg.train.beta = 0.3;
    std::size_t seen = 0;
    const RunRecord rec = run_experiment(cfg, dir, [&](const EpochRecord&) { ++seen; });
    CHECK(seen == 2);
    REQUIRE(rec.epochs.size() == 2);
    for (const auto& e : rec.epochs) {
        CHECK(e.seconds > 0.0);
        CHECK((e.test_error >= 0.0 && e.test_error <= 1.0));
        CHECK(e.aux_loss > 0.0);
    }
    CHECK(rec.epochs[1].learning_rate == 0.1 * 0.98);
    CHECK(fs::exists(dir / "model.ibpnet"));
    CHECK(fs::exists(dir / "epochs.csv"));

    const RunRecord back = read_run(dir);
    CHECK(back.config.train.algo == Algorithm::pred_ibp);
    CHECK(back.config.train.beta == 0.3);
    CHECK(back.config.subset_size == 200);
    CHECK(back.epochs.size() == 2);
    CHECK(back.epochs[1].test_error == rec.epochs[1].test_error);
    CHECK(back.epochs[1].train_loss == rec.epochs[1].train_loss);
    CHECK(back.build_id == build_id());

    std::ifstream csv(dir / "epochs.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "epoch,learning_rate,train_loss,aux_loss,test_error");

    const auto runs = collect_runs(dir.parent_path());
    CHECK(runs.size() >= 1);
    const Network net = Network::load(dir / "model.ibpnet");
    CHECK(net.specs() == build_network(cfg).specs());
}

TEST_CASE("loss ibp with beta zero reproduces bp epochs") {
    if (!have_mnist()) SKIP("MNIST files not available");
    const ExperimentConfig bp_cfg = quick(Algorithm::bp);
    ExperimentConfig ibp_cfg = quick(Algorithm::loss_ibp);
    ibp_cfg.train.beta = 0.0;
    const DataBundle data = load_data(bp_cfg);
    Network a = build_network(bp_cfg), b = build_network(ibp_cfg);
    const RunRecord ra = train(bp_cfg, data, a), rb = train(ibp_cfg, data, b);
    for (std::size_t e = 0; e < ra.epochs.size(); ++e) {
        CHECK(ra.epochs[e].train_loss == rb.epochs[e].train_loss);
        CHECK(ra.epochs[e].test_error == rb.epochs[e].test_error);
    }
}

TEST_CASE("loaded data is normalized with the full training mean") {
    if (!have_mnist()) SKIP("MNIST files not available");
    ExperimentConfig cfg = quick(Algorithm::tbp);
    const DataBundle d = load_data(cfg);
    CHECK(d.train.size() == 200);
    CHECK(d.train.mean_pixel == d.test.mean_pixel);
    CHECK(d.train.mean_pixel > 0.05);
    CHECK(d.train.mean_pixel < 0.25);
    REQUIRE(d.tangents.size() == 5);
    CHECK(d.tangents[0].shape() == d.train.images.shape());
    // tangents are reproducible
    const DataBundle again = load_data(cfg);
    CHECK(again.tangents[4] == d.tangents[4]);
}
