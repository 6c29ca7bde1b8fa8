#include "ibp/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "ibp/perturbation.hpp"
#include "ibp/tangents.hpp"

#ifndef IBP_BUILD_ID
#define IBP_BUILD_ID "unknown"
#endif

namespace ibp {

using nlohmann::json;

namespace {

TrainConfig paper_schedule() {
    TrainConfig t;
    t.learning_rate = 0.1;
    t.momentum = 0.9;
    t.decay = 0.98;
    t.epochs = 80;
    t.batch_size = 32;
    return t;
}

Tensor gather(const Tensor& t, std::span<const std::size_t> idx) {
    Shape s = t.shape();
    s[0] = idx.size();
    Tensor out(s);
    const std::size_t stride = t.stride0();
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::memcpy(out.raw() + i * stride, t.raw() + idx[i] * stride, stride * sizeof(double));
    return out;
}

std::filesystem::path dataset_dir(const std::filesystem::path& root, const std::string& name) {
    const auto sub = root / name;
    return std::filesystem::is_directory(sub) ? sub : root;
}

json config_json(const ExperimentConfig& c) {
    const TrainConfig& t = c.train;
    json j;
    j["preset"] = c.preset;
    j["dataset"] = c.dataset;
    j["algo"] = std::string(to_string(t.algo));
    j["learning_rate"] = t.learning_rate;
    j["beta"] = t.beta;
    j["epsilon"] = t.epsilon;
    j["r"] = t.r;
    j["momentum"] = t.momentum;
    j["gamma"] = t.decay;
    j["epochs"] = t.epochs;
    j["batch_size"] = t.batch_size;
    j["seed"] = t.seed;
    j["skip_softmax"] = t.effective_skip_softmax();
    j["clip"] = t.clip ? json::array({t.clip->first, t.clip->second}) : json(nullptr);
    j["subset_size"] = c.subset_size;
    j["augment"] = c.augment;
    j["normalize_tangents"] = c.normalize_tangents;
    j["tangent_sigma"] = c.tangent_sigma;
    j["max_batches"] = c.max_batches ? json(*c.max_batches) : json(nullptr);
    return j;
}

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.dataset = j.at("dataset").get<std::string>();
    TrainConfig& t = c.train;
    t.algo = algorithm_from_string(j.at("algo").get<std::string>());
    t.learning_rate = j.at("learning_rate").get<double>();
    t.beta = j.at("beta").get<double>();
    t.epsilon = j.at("epsilon").get<double>();
    t.r = j.at("r").get<int>();
    t.momentum = j.at("momentum").get<double>();
    t.decay = j.at("gamma").get<double>();
    t.epochs = j.at("epochs").get<std::size_t>();
    t.batch_size = j.at("batch_size").get<std::size_t>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.skip_softmax = j.at("skip_softmax").get<bool>();
    if (!j.at("clip").is_null()) t.clip = std::pair{j["clip"][0].get<double>(), j["clip"][1].get<double>()};
    c.subset_size = j.at("subset_size").get<std::size_t>();
    c.augment = j.at("augment").get<bool>();
    c.normalize_tangents = j.at("normalize_tangents").get<bool>();
    c.tangent_sigma = j.at("tangent_sigma").get<double>();
    if (!j.at("max_batches").is_null()) c.max_batches = j["max_batches"].get<std::size_t>();
    return c;
}

json epoch_json(const EpochRecord& e) {
    return {{"type", "epoch"},          {"epoch", e.epoch},           {"learning_rate", e.learning_rate},
            {"train_loss", e.train_loss}, {"aux_loss", e.aux_loss}, {"test_error", e.test_error},
            {"seconds", e.seconds}};
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

}  // namespace

const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names{"mnist-paper", "cifar-paper", "mnist-tiny"};
    return names;
}

Preset preset(std::string_view name) {
    using L = LayerSpec;
    const L relu = L::activation(LayerKind::relu), softmax = L::activation(LayerKind::softmax);
    Preset p;
    p.name = std::string(name);
    p.train = paper_schedule();
    if (name == "mnist-paper") {
        p.dataset = "mnist";
        p.input = {1, 28, 28};
        p.layers = {L::conv(32, 4, 0), relu, L::max_pool(3, 2),    L::conv(64, 5, 2), relu, L::max_pool(3, 2),
                    L::fully_connected(256), relu, L::fully_connected(10), softmax};
    } else if (name == "cifar-paper") {
        p.dataset = "cifar10";
        p.input = {3, 32, 32};
        p.subset_size = 10000;
        p.layers = {L::conv(32, 5, 0),      relu, L::max_pool(3, 2), L::conv(32, 5, 2),
                    relu,                   L::max_pool(3, 2),       L::conv(64, 5, 2), relu,
                    L::max_pool(3, 2),      L::fully_connected(256), relu,             L::fully_connected(10),
                    softmax};
    } else if (name == "mnist-tiny") {
        p.dataset = "mnist";
        p.input = {1, 28, 28};
        p.subset_size = 1000;
        p.train.epochs = 20;
        p.layers = {L::fully_connected(256), relu, L::fully_connected(10), softmax};
    } else {
        throw ConfigError("unknown preset '" + std::string(name) + "'");
    }
    return p;
}

ExperimentConfig ExperimentConfig::from_preset(std::string_view name) {
    const Preset p = ibp::preset(name);
    ExperimentConfig c;
    c.preset = p.name;
    c.dataset = p.dataset;
    c.train = p.train;
    c.subset_size = p.subset_size;
    return c;
}

void ExperimentConfig::validate() const {
    train.validate();
    const Preset p = ibp::preset(preset);
    if (dataset != p.dataset) throw ConfigError("preset " + p.name + " expects dataset " + p.dataset);
    if (!(tangent_sigma > 0.0)) throw ConfigError("tangent sigma must be > 0");
    if (max_batches && *max_batches == 0) throw ConfigError("max batches must be positive");
    if (train.epochs == 0) throw ConfigError("epochs must be positive");
}

DataBundle load_data(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& tangent_cache) {
    cfg.validate();
    const auto dir = dataset_dir(data_dir(cfg.data_dir), cfg.dataset);
    DataBundle d;
    if (cfg.dataset == "mnist") {
        d.train = load_mnist_split(dir, true);
        d.test = load_mnist_split(dir, false);
    } else {
        d.train = load_cifar10_split(dir, true);
        d.test = load_cifar10_split(dir, false);
    }
    const double mean = mean_pixel(d.train);
    if (cfg.subset_size != 0) d.train = subset(d.train, cfg.subset_size, cfg.train.seed);

    if (uses_tangents(cfg.train.algo) && !cfg.augment) {
        const std::uint64_t key = tangent_cache_key(d.train.images, cfg.tangent_sigma, cfg.normalize_tangents);
        std::optional<std::vector<Tensor>> cached;
        if (tangent_cache) cached = load_tangent_cache(*tangent_cache, key);
        if (cached) {
            d.tangents = std::move(*cached);
        } else {
            d.tangents = dataset_tangents(d.train.images, cfg.tangent_sigma, cfg.normalize_tangents);
            if (tangent_cache) save_tangent_cache(*tangent_cache, key, d.tangents);
        }
    }
    normalize(d.train, mean);
    normalize(d.test, mean);
    return d;
}

Network build_network(const ExperimentConfig& cfg) {
    const Preset p = preset(cfg.preset);
    Network net(p.input, p.layers);
    Rng rng(derive_seed(cfg.train.seed, "init"));
    net.init_weights(rng);
    return net;
}

RunRecord train(const ExperimentConfig& cfg, const DataBundle& data, Network& net,
                const std::function<void(const EpochRecord&)>& on_epoch) {
    cfg.validate();
    const TrainConfig& tc = cfg.train;
    if (data.train.sample_shape() != net.input_shape())
        throw DimensionError("training images " + to_string(data.train.sample_shape()) + " do not fit network input " +
                             to_string(net.input_shape()));
    const bool tangents = uses_tangents(tc.algo);
    if (tangents && !cfg.augment && data.tangents.size() != kTangentCount)
        throw ConfigError("tangent algorithm without precomputed tangents");

    RunRecord rec;
    rec.config = cfg;
    rec.build_id = build_id();

    const std::size_t n = data.train.size();
    std::size_t batches = (n + tc.batch_size - 1) / tc.batch_size;
    if (cfg.max_batches) batches = std::min(batches, *cfg.max_batches);
    AugmentSpec aug;
    aug.fill = -data.train.mean_pixel;

    SgdMomentum opt(net);
    Tape tape;
    std::vector<std::size_t> order(n);
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(derive_seed(tc.seed, "shuffle", epoch));
        shuffle.shuffle(std::span<std::size_t>(order));
        Rng dropout(derive_seed(tc.seed, "dropout", epoch));

        double loss = 0.0, aux = 0.0;
        const auto start = std::chrono::steady_clock::now();
        for (std::size_t b = 0; b < batches; ++b) {
            const std::span<const std::size_t> idx(order.data() + b * tc.batch_size,
                                                   std::min(tc.batch_size, n - b * tc.batch_size));
            Batch batch{gather(data.train.images, idx), gather(data.train.labels, idx), {}};
            if (cfg.augment) {
                const Shape one = data.train.sample_shape();
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    Rng ar(derive_seed(tc.seed, "augment", epoch * n + idx[i]));
                    auto row = batch.x.row(i);
                    const Tensor img = augment(Tensor(one, std::vector<double>(row.begin(), row.end())), aug, ar);
                    std::copy(img.data().begin(), img.data().end(), row.begin());
                }
            }
            if (tangents) {
                if (cfg.augment)
                    batch.tangents = dataset_tangents(denormalize(batch.x, data.train.mean_pixel), cfg.tangent_sigma,
                                                      cfg.normalize_tangents);
                else
                    for (const Tensor& t : data.tangents) batch.tangents.push_back(gather(t, idx));
            }
            const StepResult s = train_step(net, batch, tc, dropout, tape);
            opt.update(net, s.grads, tc, epoch);
            loss += s.loss;
            aux += s.aux_loss;
        }
        EpochRecord e;
        e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        e.epoch = epoch + 1;
        e.learning_rate = SgdMomentum::learning_rate_at(tc, epoch);
        e.train_loss = loss / static_cast<double>(batches);
        e.aux_loss = aux / static_cast<double>(batches);
        e.test_error = test_error(net, data.test);
        rec.epochs.push_back(e);
        if (on_epoch) on_epoch(e);
    }
    return rec;
}

const char* build_id() { return IBP_BUILD_ID; }

void write_epochs_csv(std::ostream& out, const std::vector<EpochRecord>& epochs) {
    out << "epoch,learning_rate,train_loss,aux_loss,test_error\n";
    char line[256];
    for (const EpochRecord& e : epochs) {
        std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g,%.6f\n", e.epoch, e.learning_rate, e.train_loss,
                      e.aux_loss, e.test_error);
        out << line;
    }
}

RunRecord run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir,
                         const std::function<void(const EpochRecord&)>& on_epoch) {
    std::filesystem::create_directories(dir);
    const DataBundle data = load_data(cfg, uses_tangents(cfg.train.algo) ? std::optional(dir / "tangents.cache")
                                                                          : std::nullopt);
    Network net = build_network(cfg);

    std::ofstream log(dir / "run.jsonl", std::ios::trunc);
    if (!log) throw FormatError("cannot write " + (dir / "run.jsonl").string());
    log << json{{"type", "config"}, {"build_id", build_id()}, {"config", config_json(cfg)}}.dump() << '\n';
    log.flush();

    RunRecord rec = train(cfg, data, net, [&](const EpochRecord& e) {
        log << epoch_json(e).dump() << '\n';
        log.flush();
        if (on_epoch) on_epoch(e);
    });
    rec.model_path = (dir / "model.ibpnet").string();
    net.save(dir / "model.ibpnet");
    std::ofstream csv(dir / "epochs.csv", std::ios::trunc);
    write_epochs_csv(csv, rec.epochs);
    log << json{{"type", "final"}, {"model", "model.ibpnet"}, {"test_error", rec.final_test_error()}}.dump() << '\n';
    return rec;
}

RunRecord read_run(const std::filesystem::path& dir) {
    std::ifstream in(dir / "run.jsonl");
    if (!in) throw FormatError("no run.jsonl in " + dir.string());
    RunRecord rec;
    std::string line;
    bool have_config = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError((dir / "run.jsonl").string() + ": " + e.what());
        }
        const std::string type = j.value("type", "");
        if (type == "config") {
            rec.config = config_from_json(j.at("config"));
            rec.build_id = j.value("build_id", "");
            have_config = true;
        } else if (type == "epoch") {
            EpochRecord e;
            e.epoch = j.at("epoch").get<std::size_t>();
            e.learning_rate = j.at("learning_rate").get<double>();
            e.train_loss = j.at("train_loss").get<double>();
            e.aux_loss = j.at("aux_loss").get<double>();
            e.test_error = j.at("test_error").get<double>();
            e.seconds = j.at("seconds").get<double>();
            rec.epochs.push_back(e);
        } else if (type == "final") {
            rec.model_path = (dir / j.at("model").get<std::string>()).string();
        }
    }
    if (!have_config) throw FormatError((dir / "run.jsonl").string() + ": missing config line");
    return rec;
}

std::vector<ReportRow> aggregate(const std::vector<RunRecord>& runs) {
    using Key = std::tuple<std::string, std::string, std::size_t, double>;
    struct Acc {
        std::vector<double> errors;
        double seconds = 0.0;
        std::size_t epochs = 0;
    };
    std::map<Key, Acc> groups;
    for (const RunRecord& r : runs) {
        if (r.epochs.empty()) continue;
        const TrainConfig& t = r.config.train;
        const double param = uses_beta(t.algo) ? t.beta : uses_epsilon(t.algo) ? t.epsilon : 0.0;
        Acc& a = groups[{std::string(to_string(t.algo)), r.config.preset, r.config.subset_size, param}];
        a.errors.push_back(r.final_test_error());
        for (const EpochRecord& e : r.epochs) a.seconds += e.seconds;
        a.epochs += r.epochs.size();
    }
    std::vector<ReportRow> rows;
    for (const auto& [key, a] : groups) {
        ReportRow row;
        std::tie(row.algo, row.preset, row.subset_size, row.param) = key;
        row.runs = a.errors.size();
        double s = 0.0;
        for (double e : a.errors) s += e;
        row.mean_error = s / static_cast<double>(row.runs);
        if (row.runs > 1) {
            double ss = 0.0;
            for (double e : a.errors) ss += (e - row.mean_error) * (e - row.mean_error);
            row.std_error = std::sqrt(ss / static_cast<double>(row.runs - 1));
        }
        row.seconds_per_epoch = a.seconds / static_cast<double>(a.epochs);
        rows.push_back(row);
    }
    for (ReportRow& row : rows) {
        row.best = true;
        for (const ReportRow& o : rows)
            if (o.algo == row.algo && o.preset == row.preset && o.subset_size == row.subset_size &&
                o.mean_error < row.mean_error)
                row.best = false;
    }
    return rows;
}

std::vector<RunRecord> collect_runs(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw ConfigError("run directory " + root.string() + " does not exist");
    std::vector<std::filesystem::path> dirs;
    if (std::filesystem::exists(root / "run.jsonl")) dirs.push_back(root);
    for (const auto& e : std::filesystem::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() == "run.jsonl") dirs.push_back(e.path().parent_path());
    std::sort(dirs.begin(), dirs.end());
    dirs.erase(std::unique(dirs.begin(), dirs.end()), dirs.end());
    if (dirs.empty()) throw ConfigError("no runs found under " + root.string());
    std::vector<RunRecord> runs;
    for (const auto& d : dirs) runs.push_back(read_run(d));
    return runs;
}

void write_report_text(std::ostream& out, const std::vector<ReportRow>& rows) {
    char line[256];
    std::snprintf(line, sizeof(line), "%-9s %-12s %7s %8s %5s %18s %10s\n", "algo", "preset", "size", "param", "runs",
                  "error % (mean+-sd)", "s/epoch");
    out << line;
    for (const ReportRow& r : rows) {
        const std::string err = fixed(100.0 * r.mean_error, 2) + " +- " + fixed(100.0 * r.std_error, 2);
        std::snprintf(line, sizeof(line), "%-9s %-12s %7zu %8s %5zu %18s %10.3f%s\n", r.algo.c_str(),
                      r.preset.c_str(), r.subset_size, format_level(r.param).c_str(), r.runs, err.c_str(),
                      r.seconds_per_epoch, r.best ? "  *" : "");
        out << line;
    }
}

void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
    out << "algo,preset,subset_size,param,runs,mean_error,std_error,seconds_per_epoch,best\n";
    for (const ReportRow& r : rows)
        out << r.algo << ',' << r.preset << ',' << r.subset_size << ',' << format_level(r.param) << ',' << r.runs
            << ',' << fixed(r.mean_error, 6) << ',' << fixed(r.std_error, 6) << ',' << fixed(r.seconds_per_epoch, 4)
            << ',' << (r.best ? 1 : 0) << '\n';
}

std::vector<double> parse_list(std::string_view text) {
    std::vector<double> out;
    std::stringstream ss{std::string(text)};
    std::string item;
    while (std::getline(ss, item, ',')) {
        char* end = nullptr;
        const double v = std::strtod(item.c_str(), &end);
        if (item.empty() || end != item.c_str() + item.size()) throw ConfigError("not a number list: " + std::string(text));
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("empty number list");
    return out;
}

}  // namespace ibp
