#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ibp/dataset.hpp"
#include "ibp/training.hpp"

namespace ibp {

/// A named experiment setup: network, dataset and default hyperparameters.
struct Preset {
    std::string name;
    std::string dataset;  // "mnist" or "cifar10"
    Shape input;
    std::vector<LayerSpec> layers;
    TrainConfig train;
    std::size_t subset_size = 0;  // 0: whole training split
};

/// mnist-paper, cifar-paper, mnist-tiny.
const std::vector<std::string>& preset_names();
Preset preset(std::string_view name);

struct ExperimentConfig {
    std::string preset = "mnist-tiny";
    std::string dataset = "mnist";
    TrainConfig train;
    std::size_t subset_size = 0;
    bool augment = false;
    bool normalize_tangents = false;
    double tangent_sigma = 0.9;
    std::optional<std::filesystem::path> data_dir;
    /// Cut every epoch after this many batches (timing runs).
    std::optional<std::size_t> max_batches;

    /// Preset defaults; flags are applied on top by the caller.
    static ExperimentConfig from_preset(std::string_view name);
    void validate() const;
};

/// Normalized train/test splits and, for tangent algorithms, the training
/// tangents (one N x C x H x W tensor per kind).
struct DataBundle {
    Dataset train;
    Dataset test;
    std::vector<Tensor> tangents;
};

/// Loads the dataset, draws the stratified subset and normalizes both splits
/// with the mean pixel of the full training split. Tangents are read from or
/// written to `tangent_cache` when given.
DataBundle load_data(const ExperimentConfig& cfg,
                     const std::optional<std::filesystem::path>& tangent_cache = std::nullopt);

/// Network of the preset with weights drawn from (seed, "init").
Network build_network(const ExperimentConfig& cfg);

struct EpochRecord {
    std::size_t epoch = 0;
    double learning_rate = 0.0;
    double train_loss = 0.0;  // batch mean of the main loss
    double aux_loss = 0.0;    // batch mean of the additional loss
    double test_error = 0.0;
    double seconds = 0.0;
};

struct RunRecord {
    ExperimentConfig config;
    std::vector<EpochRecord> epochs;
    std::string model_path;
    std::string build_id;

    double final_test_error() const { return epochs.empty() ? 0.0 : epochs.back().test_error; }
};

/// Trains `net` in place for cfg.train.epochs epochs.
RunRecord train(const ExperimentConfig& cfg, const DataBundle& data, Network& net,
                const std::function<void(const EpochRecord&)>& on_epoch = {});

const char* build_id();

// --- run directory ----------------------------------------------------------
// DIR/model.ibpnet    network (IBPNET1)
// DIR/run.jsonl       one "config" line, one "epoch" line per epoch, one "final" line
// DIR/epochs.csv      epoch,learning_rate,train_loss,aux_loss,test_error

void write_epochs_csv(std::ostream& out, const std::vector<EpochRecord>& epochs);
/// Runs and saves: creates DIR, streams run.jsonl while training.
RunRecord run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                         const std::function<void(const EpochRecord&)>& on_epoch = {});
RunRecord read_run(const std::filesystem::path& dir);

// --- report -------------------------------------------------------------------

struct ReportRow {
    std::string algo;
    std::string preset;
    std::size_t subset_size = 0;
    double param = 0.0;  // beta or epsilon, whichever the algorithm uses
    std::size_t runs = 0;
    double mean_error = 0.0;
    double std_error = 0.0;  // sample standard deviation, 0 for a single run
    double seconds_per_epoch = 0.0;
    bool best = false;  // lowest mean error among rows of the same algo/preset/size
};

/// Groups runs by (algo, preset, subset size, beta/epsilon) and aggregates
/// final test errors. Rows are sorted by algo, preset, size, param.
std::vector<ReportRow> aggregate(const std::vector<RunRecord>& runs);
/// Every directory below `root` (inclusive) holding a run.jsonl.
std::vector<RunRecord> collect_runs(const std::filesystem::path& root);
void write_report_text(std::ostream& out, const std::vector<ReportRow>& rows);
void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows);

/// Comma-separated doubles ("0.3,1,3").
std::vector<double> parse_list(std::string_view text);

}  // namespace ibp
