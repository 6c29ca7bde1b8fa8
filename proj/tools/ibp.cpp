// ibp: train, eval-noise, gradcheck and report commands.
//
// Exit codes: 0 success, 1 check failure or runtime error, 2 usage error.

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ibp/harness.hpp"
#include "ibp/oracle.hpp"
#include "ibp/perturbation.hpp"

namespace {

constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainFlags {
    std::string preset = "mnist-tiny";
    std::string algo = "bp";
    std::optional<std::string> dataset;
    std::optional<std::size_t> subset_size;
    std::optional<double> beta;
    std::optional<double> epsilon;
    std::optional<int> r;
    std::optional<std::size_t> epochs;
    std::optional<double> lr;
    std::optional<double> momentum;
    std::optional<double> gamma;
    std::optional<std::size_t> batch_size;
    std::optional<std::size_t> max_batches;
    std::uint64_t seed = 1;
    bool augment = false;
    bool normalize_tangents = false;
    std::optional<std::string> skip_softmax;
    std::optional<std::string> beta_grid;
    std::optional<std::string> clip;
    std::optional<std::string> data_dir;
    std::string out;
};

ibp::ExperimentConfig to_config(const TrainFlags& f) {
    ibp::ExperimentConfig c = ibp::ExperimentConfig::from_preset(f.preset);
    ibp::TrainConfig& t = c.train;
    t.algo = ibp::algorithm_from_string(f.algo);
    const std::string algo = f.algo;
    if ((f.beta || f.beta_grid) && !ibp::uses_beta(t.algo)) throw UsageError("--beta does not apply to --algo " + algo);
    if (f.beta && f.beta_grid) throw UsageError("--beta and --beta-grid are exclusive");
    if (f.epsilon && !ibp::uses_epsilon(t.algo)) throw UsageError("--epsilon does not apply to --algo " + algo);
    if (f.r && (!ibp::uses_beta(t.algo) || t.algo == ibp::Algorithm::fast_tbp))
        throw UsageError("--r does not apply to --algo " + algo);
    if (f.normalize_tangents && !ibp::uses_tangents(t.algo))
        throw UsageError("--normalize-tangents needs a tangent algorithm");
    if (f.clip && !ibp::uses_epsilon(t.algo)) throw UsageError("--clip does not apply to --algo " + algo);
    if (f.skip_softmax && t.algo == ibp::Algorithm::bp) throw UsageError("--skip-softmax does not apply to --algo bp");

    if (f.dataset) c.dataset = *f.dataset;
    if (f.subset_size) c.subset_size = *f.subset_size;
    if (f.beta) t.beta = *f.beta;
    if (f.epsilon) t.epsilon = *f.epsilon;
    if (f.r) t.r = *f.r;
    if (f.epochs) t.epochs = *f.epochs;
    if (f.lr) t.learning_rate = *f.lr;
    if (f.momentum) t.momentum = *f.momentum;
    if (f.gamma) t.decay = *f.gamma;
    if (f.batch_size) t.batch_size = *f.batch_size;
    if (f.skip_softmax) t.skip_softmax = *f.skip_softmax == "on";
    if (f.clip) {
        const auto v = ibp::parse_list(*f.clip);
        if (v.size() != 2) throw UsageError("--clip expects LO,HI");
        t.clip = std::pair{v[0], v[1]};
    }
    t.seed = f.seed;
    c.max_batches = f.max_batches;
    c.augment = f.augment;
    c.normalize_tangents = f.normalize_tangents;
    if (f.data_dir) c.data_dir = *f.data_dir;
    c.validate();
    return c;
}

int cmd_train(const TrainFlags& f) {
    ibp::ExperimentConfig base = to_config(f);
    std::vector<std::pair<std::filesystem::path, ibp::ExperimentConfig>> jobs;
    if (f.beta_grid) {
        for (double b : ibp::parse_list(*f.beta_grid)) {
            ibp::ExperimentConfig c = base;
            c.train.beta = b;
            c.validate();
            jobs.emplace_back(std::filesystem::path(f.out) / ("beta-" + ibp::format_level(b)), c);
        }
    } else {
        jobs.emplace_back(f.out, base);
    }
    for (const auto& [dir, cfg] : jobs) {
        std::printf("%s  algo=%s beta=%s epsilon=%s seed=%llu\n", dir.string().c_str(),
                    std::string(ibp::to_string(cfg.train.algo)).c_str(), ibp::format_level(cfg.train.beta).c_str(),
                    ibp::format_level(cfg.train.epsilon).c_str(), static_cast<unsigned long long>(cfg.train.seed));
        const std::size_t epochs = cfg.train.epochs;
        const ibp::RunRecord rec = ibp::run_experiment(cfg, dir, [epochs](const ibp::EpochRecord& e) {
            std::printf("  epoch %3zu/%zu  loss %.5f  aux %.5f  test error %.4f  %.2fs\n", e.epoch, epochs,
                        e.train_loss, e.aux_loss, e.test_error, e.seconds);
            std::fflush(stdout);
        });
        std::printf("  model %s  final test error %.4f\n", rec.model_path.c_str(), rec.final_test_error());
    }
    return 0;
}

struct NoiseFlags {
    std::string model;
    std::string noise = "adversarial";
    std::string levels = "0,0.05,0.1,0.2";
    std::uint64_t seed = 1;
    std::string dataset = "mnist";
    std::optional<std::string> data_dir;
    std::optional<std::string> out;
    std::size_t batch_size = 100;
};

int cmd_eval_noise(const NoiseFlags& f) {
    const ibp::NoiseKind kind = ibp::noise_kind_from_string(f.noise);
    const std::vector<double> levels = ibp::parse_list(f.levels);
    ibp::validate_levels(levels);
    ibp::Network net = ibp::Network::load(std::filesystem::path(f.model));

    ibp::ExperimentConfig c = ibp::ExperimentConfig::from_preset(f.dataset == "mnist" ? "mnist-tiny" : "cifar-paper");
    c.subset_size = 0;
    if (f.data_dir) c.data_dir = *f.data_dir;
    const ibp::DataBundle data = ibp::load_data(c);
    if (data.test.sample_shape() != net.input_shape())
        throw ibp::DimensionError("model input " + ibp::to_string(net.input_shape()) + " does not match " + f.dataset);

    const ibp::NoiseSweep s = ibp::sweep(net, data.test, kind, levels, f.seed, f.batch_size);
    if (f.out) {
        std::ofstream out(*f.out, std::ios::binary | std::ios::trunc);
        if (!out) throw ibp::FormatError("cannot write " + *f.out);
        ibp::write_csv(out, s);
    } else {
        ibp::write_csv(std::cout, s);
    }
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    const auto reports = ibp::run_gradcheck_suite(seed);
    bool ok = true;
    for (const auto& r : reports) {
        std::printf("%-4s  %-52s max err %-10.3g tol %-8.1g masked %zu/%zu\n", r.pass ? "ok" : "FAIL", r.name.c_str(),
                    r.max_error, r.tolerance, r.masked, r.compared);
        if (!r.pass) std::printf("      %s\n", r.detail.c_str());
        ok = ok && r.pass;
    }
    std::printf("%zu checks, %s\n", reports.size(), ok ? "all passed" : "FAILURES");
    return ok ? 0 : 1;
}

int cmd_report(const std::string& dir, const std::optional<std::string>& csv) {
    const auto rows = ibp::aggregate(ibp::collect_runs(dir));
    ibp::write_report_text(std::cout, rows);
    if (csv) {
        std::ofstream out(*csv, std::ios::binary | std::ios::trunc);
        if (!out) throw ibp::FormatError("cannot write " + *csv);
        ibp::write_report_csv(out, rows);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Invariant backpropagation experiments"};
    app.require_subcommand(1);

    TrainFlags tf;
    auto* train = app.add_subcommand("train", "train a network and write a run directory");
    train->add_option("--preset", tf.preset, "mnist-paper, cifar-paper or mnist-tiny")
        ->check(CLI::IsMember(ibp::preset_names()))
        ->capture_default_str();
    train->add_option("--algo", tf.algo, "bp, loss-ibp, pred-ibp, tbp, fast-tbp, at, fast-at")
        ->check(CLI::IsMember({"bp", "loss-ibp", "pred-ibp", "tbp", "fast-tbp", "at", "fast-at"}))
        ->capture_default_str();
    train->add_option("--dataset", tf.dataset, "mnist or cifar10 (default: from preset)")
        ->check(CLI::IsMember({"mnist", "cifar10"}));
    train->add_option("--subset-size", tf.subset_size, "stratified training subset, 0 for all");
    train->add_option("--beta", tf.beta, "weight of the additional loss");
    train->add_option("--beta-grid", tf.beta_grid, "comma-separated betas, one run each under OUT/beta-<b>");
    train->add_option("--epsilon", tf.epsilon, "adversarial step");
    train->add_option("--r", tf.r, "exponent of the additional loss")->check(CLI::IsMember({1, 2}));
    train->add_option("--epochs", tf.epochs);
    train->add_option("--lr", tf.lr, "initial learning rate");
    train->add_option("--momentum", tf.momentum);
    train->add_option("--gamma", tf.gamma, "learning rate decay per epoch");
    train->add_option("--batch-size", tf.batch_size);
    train->add_option("--max-batches", tf.max_batches, "stop each epoch after this many batches");
    train->add_option("--seed", tf.seed)->capture_default_str();
    train->add_flag("--augment", tf.augment, "random shift/scale/rotation on every access");
    train->add_flag("--normalize-tangents", tf.normalize_tangents, "scale tangents to unit length per sample");
    train->add_option("--skip-softmax", tf.skip_softmax, "leave softmax out of the extra passes")
        ->check(CLI::IsMember({"on", "off"}));
    train->add_option("--clip", tf.clip, "LO,HI range for adversarial inputs");
    train->add_option("--data-dir", tf.data_dir, "overrides IBP_DATA_DIR");
    train->add_option("--out", tf.out, "run directory")->required();

    NoiseFlags nf;
    auto* noise = app.add_subcommand("eval-noise", "error of a model under adversarial or Gaussian noise");
    noise->add_option("--model", nf.model)->required()->check(CLI::ExistingFile);
    noise->add_option("--noise", nf.noise)->check(CLI::IsMember({"adversarial", "gaussian"}))->capture_default_str();
    noise->add_option("--levels", nf.levels, "comma-separated, starting at 0")->capture_default_str();
    noise->add_option("--seed", nf.seed)->capture_default_str();
    noise->add_option("--dataset", nf.dataset)->check(CLI::IsMember({"mnist", "cifar10"}))->capture_default_str();
    noise->add_option("--data-dir", nf.data_dir, "overrides IBP_DATA_DIR");
    noise->add_option("--batch-size", nf.batch_size)->capture_default_str();
    noise->add_option("--out", nf.out, "CSV file (default: stdout)");

    std::uint64_t gc_seed = 1;
    auto* gradcheck = app.add_subcommand("gradcheck", "run the gradient and identity checks on a tiny net");
    gradcheck->add_option("--seed", gc_seed)->capture_default_str();

    std::string report_dir;
    std::optional<std::string> report_csv;
    auto* report = app.add_subcommand("report", "aggregate run directories");
    report->add_option("runs", report_dir, "directory searched for run.jsonl files")->required();
    report->add_option("--csv", report_csv, "also write the table as CSV");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*train) return cmd_train(tf);
        if (*noise) return cmd_eval_noise(nf);
        if (*gradcheck) return cmd_gradcheck(gc_seed);
        if (*report) return cmd_report(report_dir, report_csv);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return kUsage;
    } catch (const ibp::ConfigError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return kUsage;
}
