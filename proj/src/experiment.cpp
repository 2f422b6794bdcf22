#include "ltood/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "ltood/errors.hpp"
#include "ltood/graph.hpp"
#include "ltood/rng.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace ltood {
namespace {

// Seed streams for the independent random stages of one run.
constexpr std::uint64_t kStreamTestData = 0x7E57DA7AULL;
constexpr std::uint64_t kStreamPretrainData = 0x92E7DA7AULL;
constexpr std::uint64_t kStreamBackbone = 0xBBACC0ULL;
constexpr std::uint64_t kStreamGcn = 0x6C4E5EEDULL;
constexpr std::uint64_t kStreamShuffle = 0x54FFULL;

const std::vector<int> kBackboneHidden = {64, 64};

class StageTimer {
public:
    explicit StageTimer(std::vector<std::pair<std::string, double>>& sink) : sink_(sink) {}

    template <typename Fn>
    auto run(const std::string& stage, Fn&& fn) {
        const auto start = std::chrono::steady_clock::now();
        try {
            if constexpr (std::is_void_v<decltype(fn())>) {
                fn();
                record(stage, start);
            } else {
                auto out = fn();
                record(stage, start);
                return out;
            }
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(stage, e.what());
        }
    }

private:
    void record(const std::string& stage,
                std::chrono::steady_clock::time_point start) {
        const auto stop = std::chrono::steady_clock::now();
        sink_.emplace_back(stage, std::chrono::duration<double>(stop - start).count());
    }

    std::vector<std::pair<std::string, double>>& sink_;
};

std::string format_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

int levenshtein(const std::string& a, const std::string& b) {
    std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const int sub = prev[j - 1] + (a[i - 1] != b[j - 1]);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

const std::vector<std::string>& known_config_keys() {
    static const std::vector<std::string> keys = {
        "condition", "K", "n_max", "rho", "dim", "n_oe", "n_ood_test",
        "n_test_per_class", "k", "lambda", "batch_size", "seed", "out",
        "gcn_epochs", "gcn_lr0", "gcn_hidden", "gcn_layers", "gcn_head_bias",
        "backbone_epochs", "backbone_lr", "backbone_batch",
        "pretrain_epochs", "pretrain_per_class", "gaussianize_on",
        "train_data", "test_data",
    };
    return keys;
}

[[noreturn]] void unknown_key(const std::string& key) {
    int best = 1 << 20;
    std::string suggestion;
    for (const auto& known : known_config_keys()) {
        const int d = levenshtein(key, known);
        if (d < best) {
            best = d;
            suggestion = known;
        }
    }
    throw ConfigError("unknown config key '" + key + "' (did you mean '" + suggestion + "'?)");
}

int parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as integer");
    }
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as number");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as integer");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as bool");
}

void apply_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "condition") cfg.condition = condition_from_string(value);
    else if (key == "K") cfg.data.k_classes = parse_int(key, value);
    else if (key == "n_max") cfg.data.n_max = parse_int(key, value);
    else if (key == "rho") cfg.data.rho = parse_double(key, value);
    else if (key == "dim") cfg.data.dim = parse_int(key, value);
    else if (key == "n_oe") cfg.data.n_oe = parse_int(key, value);
    else if (key == "n_ood_test") cfg.data.n_ood_test = parse_int(key, value);
    else if (key == "n_test_per_class") cfg.n_test_per_class = parse_int(key, value);
    else if (key == "k") cfg.k = parse_int(key, value);
    else if (key == "lambda") cfg.lambda = parse_double(key, value);
    else if (key == "batch_size") {
        const int b = parse_int(key, value);
        if (b < 1) throw ConfigError("config key 'batch_size': must be >= 1");
        cfg.batch_size = b;
    } else if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "out") cfg.out_dir = value;
    else if (key == "gcn_epochs") cfg.gcn.epochs = parse_int(key, value);
    else if (key == "gcn_lr0") cfg.gcn.lr0 = parse_double(key, value);
    else if (key == "gcn_hidden") cfg.gcn.hidden_dim = parse_int(key, value);
    else if (key == "gcn_layers") cfg.gcn.layers = parse_int(key, value);
    else if (key == "gcn_head_bias") cfg.gcn.head_bias = parse_bool(key, value);
    else if (key == "backbone_epochs") cfg.backbone.epochs = parse_int(key, value);
    else if (key == "backbone_lr") cfg.backbone.lr = parse_double(key, value);
    else if (key == "backbone_batch") cfg.backbone.batch_size = parse_int(key, value);
    else if (key == "pretrain_epochs") cfg.pretrain_epochs = parse_int(key, value);
    else if (key == "pretrain_per_class") cfg.pretrain_per_class = parse_int(key, value);
    else if (key == "gaussianize_on") {
        if (value == "id_oe") cfg.gaussianize_with_oe = true;
        else if (value == "id") cfg.gaussianize_with_oe = false;
        else throw ConfigError("config key 'gaussianize_on': expected 'id_oe' or 'id'");
    } else if (key == "train_data") cfg.train_file = value;
    else if (key == "test_data") cfg.test_file = value;
    else unknown_key(key);
}

EmbeddingMatrix subset_rows(const EmbeddingMatrix& x, const std::vector<int>& rows) {
    EmbeddingMatrix out(static_cast<int>(rows.size()), x.cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto src = x.row(rows[r]);
        std::copy(src.begin(), src.end(),
                  out.values.begin() + static_cast<std::ptrdiff_t>(r) * x.cols);
    }
    return out;
}

}  // namespace

std::string to_string(Condition c) {
    switch (c) {
        case Condition::kScratchOe: return "scratch_oe";
        case Condition::kScratchGcn: return "scratch_gcn";
        case Condition::kPretrain: return "pretrain";
        case Condition::kPretrainGcn: return "pretrain_gcn";
        case Condition::kPretrainGau: return "pretrain_gau";
        case Condition::kPretrainGauGcn: return "pretrain_gau_gcn";
        case Condition::kPretrainGauMlp: return "pretrain_gau_mlp";
        case Condition::kKnnBaseline: return "knn_baseline";
    }
    throw SpecError("unknown condition");
}

Condition condition_from_string(const std::string& s) {
    std::string lower = s;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower == "scratch_oe") return Condition::kScratchOe;
    if (lower == "scratch_gcn") return Condition::kScratchGcn;
    if (lower == "pretrain") return Condition::kPretrain;
    if (lower == "pretrain_gcn") return Condition::kPretrainGcn;
    if (lower == "pretrain_gau") return Condition::kPretrainGau;
    if (lower == "pretrain_gau_gcn") return Condition::kPretrainGauGcn;
    if (lower == "pretrain_gau_mlp") return Condition::kPretrainGauMlp;
    if (lower == "knn_baseline") return Condition::kKnnBaseline;
    throw ConfigError("unknown condition '" + s + "'");
}

bool condition_uses_gcn(Condition c) {
    return c == Condition::kScratchGcn || c == Condition::kPretrainGcn ||
           c == Condition::kPretrainGauGcn;
}

bool condition_uses_gaussianization(Condition c) {
    return c == Condition::kPretrainGau || c == Condition::kPretrainGauGcn ||
           c == Condition::kPretrainGauMlp;
}

bool condition_uses_pretraining(Condition c) {
    return c != Condition::kScratchOe && c != Condition::kScratchGcn;
}

LabeledDataset make_train_set(const ExperimentConfig& cfg) {
    if (!cfg.train_file.empty()) return read_embeddings(cfg.train_file);
    DatasetSpec spec = cfg.data;
    spec.n_ood_test = 0;  // test rows live in the test set
    spec.seed = cfg.seed;
    return sample_synthetic(spec);
}

LabeledDataset make_test_set(const ExperimentConfig& cfg) {
    if (!cfg.test_file.empty()) return read_embeddings(cfg.test_file);
    // Balanced ID test classes plus the test OOD rows; same cluster geometry
    // because the arrangement depends only on (K, dim).
    DatasetSpec spec = cfg.data;
    spec.n_max = cfg.n_test_per_class;
    spec.rho = 1.0;
    spec.n_oe = 0;
    spec.seed = mix_seed(cfg.seed, kStreamTestData);
    return sample_synthetic(spec);
}

BackboneModel train_condition_backbone(const ExperimentConfig& cfg,
                                       const LabeledDataset& train_set) {
    BackboneTrainConfig bt = cfg.backbone;
    bt.seed = mix_seed(cfg.seed, kStreamBackbone);
    if (condition_uses_pretraining(cfg.condition)) {
        const LabeledDataset pretrain_set =
            sample_pretrain_distribution(cfg.data.k_classes, cfg.pretrain_per_class,
                                         cfg.data.dim, mix_seed(cfg.seed, kStreamPretrainData));
        BackboneModel model = make_backbone(cfg.data.dim, kBackboneHidden,
                                            pretrain_set.spec.k_classes, bt.seed);
        bt.epochs = cfg.pretrain_epochs;
        bt.lambda = 0.0;  // plain classification pre-training
        return train_backbone(std::move(model), pretrain_set, bt);
    }
    BackboneModel model =
        make_backbone(cfg.data.dim, kBackboneHidden, cfg.data.k_classes, bt.seed);
    bt.lambda = cfg.lambda;
    return train_backbone(std::move(model), train_set, bt);
}

BackboneModel apply_gaussianization(const ExperimentConfig& cfg, BackboneModel backbone,
                                    const LabeledDataset& train_set) {
    std::vector<int> rows;
    for (int i = 0; i < train_set.rows(); ++i) {
        if (is_id_role(train_set.roles[i]) ||
            (cfg.gaussianize_with_oe && train_set.roles[i] == kRoleOe)) {
            rows.push_back(i);
        }
    }
    return gaussianize(std::move(backbone), subset_rows(train_set.features, rows));
}

std::optional<GcnTrainResult> train_condition_head(const ExperimentConfig& cfg,
                                                   const BackboneModel& backbone,
                                                   const LabeledDataset& train_set) {
    if (cfg.condition == Condition::kScratchOe) return std::nullopt;

    std::vector<int> rows;
    std::vector<std::int32_t> roles;
    for (int i = 0; i < train_set.rows(); ++i) {
        if (is_id_role(train_set.roles[i]) || train_set.roles[i] == kRoleOe) {
            rows.push_back(i);
            roles.push_back(train_set.roles[i]);
        }
    }
    const EmbeddingMatrix feats =
        extract_features(backbone, subset_rows(train_set.features, rows));
    const NodeMasks masks = masks_from_roles(roles);

    GcnTrainConfig gt = cfg.gcn;
    gt.lambda = cfg.lambda;
    gt.seed = mix_seed(cfg.seed, kStreamGcn);

    if (condition_uses_gcn(cfg.condition)) {
        const NormalizedGraph graph =
            normalize_adjacency(knn_graph(cosine_similarity(feats), cfg.k));
        return train_gcn(graph, feats, masks, gt);
    }
    if (cfg.condition == Condition::kPretrainGauMlp) {
        // Parameter-matched MLP: same stack, identity aggregation.
        return train_gcn(identity_graph(feats.rows), feats, masks, gt);
    }
    // Linear classifier head for the remaining baselines.
    gt.layers = 1;
    return train_gcn(identity_graph(feats.rows), feats, masks, gt);
}

InferenceResult run_condition_inference(const ExperimentConfig& cfg,
                                        const BackboneModel& backbone, const GcnModel* head,
                                        const LabeledDataset& train_set,
                                        const LabeledDataset& test_set) {
    switch (cfg.condition) {
        case Condition::kScratchOe:
            return backbone_infer(backbone, test_set);
        case Condition::kKnnBaseline:
            return knn_infer(backbone, *head, train_set, test_set, cfg.k);
        case Condition::kScratchGcn:
        case Condition::kPretrainGcn:
        case Condition::kPretrainGauGcn:
            return inductive_infer(backbone, *head, test_set, cfg.k, cfg.batch_size,
                                   mix_seed(cfg.seed, kStreamShuffle));
        case Condition::kPretrain:
        case Condition::kPretrainGau:
        case Condition::kPretrainGauMlp:
            return head_infer(backbone, *head, test_set);
    }
    throw SpecError("unknown condition");
}

MetricsReport run_experiment(const ExperimentConfig& cfg) {
    if (cfg.out_dir.empty()) throw ConfigError("missing required key 'out'");
    fs::create_directories(cfg.out_dir);
    const fs::path out(cfg.out_dir);

    MetricsReport report;
    StageTimer timer(report.timings_s);
    try {
        timer.run("config", [&] {
            std::ofstream os(out / "config.txt");
            if (!os) throw FormatError("cannot write config.txt");
            os << config_to_text(cfg);
        });

        LabeledDataset train_set, test_set;
        timer.run("data", [&] {
            train_set = make_train_set(cfg);
            test_set = make_test_set(cfg);
        });

        BackboneModel backbone = timer.run(
            "backbone", [&] { return train_condition_backbone(cfg, train_set); });
        if (condition_uses_gaussianization(cfg.condition)) {
            backbone = timer.run("gaussianize", [&] {
                return apply_gaussianization(cfg, std::move(backbone), train_set);
            });
        }
        timer.run("checkpoint",
                  [&] { save_backbone((out / "backbone.ckpt").string(), backbone); });

        std::optional<GcnTrainResult> head = timer.run(
            "head", [&] { return train_condition_head(cfg, backbone, train_set); });
        if (head.has_value()) {
            const bool is_gcn = condition_uses_gcn(cfg.condition);
            timer.run("checkpoint", [&] {
                save_gcn((out / (is_gcn ? "gcn.ckpt" : "head.ckpt")).string(), head->model);
                write_trace_csv((out / "trace.csv").string(), head->trace);
            });
        }

        InferenceResult result = timer.run("inference", [&] {
            return run_condition_inference(cfg, backbone,
                                           head.has_value() ? &head->model : nullptr,
                                           train_set, test_set);
        });

        timer.run("metrics", [&] {
            MetricsReport metrics = compute_metrics(result, test_set, cfg.data.k_classes);
            report.fpr95 = metrics.fpr95;
            report.auroc = metrics.auroc;
            report.aupr = metrics.aupr;
            report.acc = metrics.acc;
            report.acc_head = metrics.acc_head;
            report.acc_tail = metrics.acc_tail;
            report.seed = cfg.seed;
            report.k = cfg.k;
            report.lambda = cfg.lambda;
            report.batch_size = cfg.batch_size;
            write_scores_csv((out / "scores.csv").string(), result, test_set.roles);
        });

        std::ofstream record(out / "report.json", std::ios::binary);
        record << report_record_json(cfg, report);
        std::ofstream text(out / "report.txt");
        text << report_text(cfg, report);
    } catch (const StageError& e) {
        std::ofstream marker(out / "FAILED");
        marker << e.stage << ": " << e.what() << "\n";
        throw;
    }
    return report;
}

std::string to_string(SweepAxis a) {
    switch (a) {
        case SweepAxis::kK: return "k";
        case SweepAxis::kLambda: return "lambda";
        case SweepAxis::kBatchSize: return "batch_size";
    }
    throw SpecError("unknown sweep axis");
}

SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "k") return SweepAxis::kK;
    if (s == "lambda") return SweepAxis::kLambda;
    if (s == "batch_size") return SweepAxis::kBatchSize;
    throw ConfigError("unknown sweep axis '" + s + "' (expected k, lambda or batch_size)");
}

namespace {

void apply_axis(ExperimentConfig& cfg, SweepAxis axis, double value) {
    switch (axis) {
        case SweepAxis::kK:
            cfg.k = static_cast<int>(value);
            if (cfg.k < 1) throw ConfigError("sweep value for k must be >= 1");
            return;
        case SweepAxis::kLambda:
            if (value < 0.0) throw ConfigError("sweep value for lambda must be >= 0");
            cfg.lambda = value;
            return;
        case SweepAxis::kBatchSize:
            cfg.batch_size = static_cast<int>(value);
            if (*cfg.batch_size < 1) throw ConfigError("sweep value for batch_size must be >= 1");
            return;
    }
}

std::string axis_value_label(SweepAxis axis, double value) {
    if (axis == SweepAxis::kLambda) return format_double(value);
    return std::to_string(static_cast<long long>(value));
}

}  // namespace

SweepResult run_sweep(const ExperimentConfig& base, SweepAxis axis,
                      const std::vector<double>& values,
                      const std::vector<std::uint64_t>& seeds) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
    if (base.out_dir.empty()) throw ConfigError("missing required key 'out'");
    fs::create_directories(base.out_dir);

    SweepResult result;
    result.axis = axis;
    result.values = values;
    result.seeds = seeds;

    for (double value : values) {
        for (std::uint64_t seed : seeds) {
            ExperimentConfig cfg = base;
            apply_axis(cfg, axis, value);
            cfg.seed = seed;
            cfg.data.seed = seed;
            cfg.out_dir = (fs::path(base.out_dir) /
                           (to_string(cfg.condition) + "_" + to_string(axis) + "=" +
                            axis_value_label(axis, value) + "_seed" + std::to_string(seed)))
                              .string();
            SweepCell cell;
            cell.value = value;
            cell.seed = seed;
            try {
                cell.report = run_experiment(cfg);
            } catch (const std::exception& e) {
                cell.error = e.what();
            }
            result.cells.push_back(std::move(cell));
        }
    }

    // Tidy CSV with per-value mean rows.
    const fs::path out(base.out_dir);
    std::ofstream csv(out / "sweep.csv");
    csv.precision(17);
    csv << to_string(axis) << ",seed,fpr95,auroc,aupr,acc,acc_head,acc_tail\n";
    auto write_metric_row = [&](const std::string& value_label, const std::string& seed_label,
                                const MetricsReport& r) {
        csv << value_label << "," << seed_label << "," << r.fpr95 << "," << r.auroc << ","
            << r.aupr << "," << r.acc << "," << r.acc_head << ",";
        if (r.acc_tail.has_value()) csv << *r.acc_tail;
        else csv << "na";
        csv << "\n";
    };
    for (const auto& cell : result.cells) {
        const std::string label = axis_value_label(axis, cell.value);
        if (cell.report.has_value()) {
            write_metric_row(label, std::to_string(cell.seed), *cell.report);
        } else {
            csv << label << "," << cell.seed << ",nan,nan,nan,nan,nan,nan\n";
        }
    }

    const std::vector<std::string> metric_names = {"fpr95", "auroc",    "aupr",
                                                   "acc",   "acc_head", "acc_tail"};
    std::map<std::string, std::ofstream> plots;
    for (const auto& name : metric_names) {
        auto& os = plots[name];
        os.open(out / (to_string(axis) + "_" + name + ".csv"));
        os.precision(17);
        os << to_string(axis) << "," << name << "\n";
    }
    for (double value : values) {
        std::vector<double> sums(6, 0.0);
        std::vector<int> counts(6, 0);
        for (const auto& cell : result.cells) {
            if (cell.value != value || !cell.report.has_value()) continue;
            const MetricsReport& r = *cell.report;
            const double vals[6] = {r.fpr95, r.auroc, r.aupr, r.acc, r.acc_head,
                                    r.acc_tail.value_or(0.0)};
            for (int m = 0; m < 6; ++m) {
                if (m == 5 && !r.acc_tail.has_value()) continue;
                sums[m] += vals[m];
                ++counts[m];
            }
        }
        if (counts[0] == 0) continue;
        MetricsReport mean;
        mean.fpr95 = sums[0] / counts[0];
        mean.auroc = sums[1] / counts[1];
        mean.aupr = sums[2] / counts[2];
        mean.acc = sums[3] / counts[3];
        mean.acc_head = sums[4] / counts[4];
        if (counts[5] > 0) mean.acc_tail = sums[5] / counts[5];
        write_metric_row(axis_value_label(axis, value), "mean", mean);
        const double plot_vals[6] = {mean.fpr95, mean.auroc, mean.aupr,
                                     mean.acc,   mean.acc_head, mean.acc_tail.value_or(0.0)};
        for (int m = 0; m < 6; ++m) {
            plots[metric_names[m]] << axis_value_label(axis, value) << "," << plot_vals[m]
                                   << "\n";
        }
    }

    std::ofstream failures(out / "failures.txt");
    for (const auto& cell : result.cells) {
        if (!cell.report.has_value()) {
            failures << to_string(axis) << "=" << axis_value_label(axis, cell.value) << " seed="
                     << cell.seed << ": " << cell.error << "\n";
        }
    }
    return result;
}

ExperimentConfig parse_config_text(
    const std::string& text,
    const std::vector<std::pair<std::string, std::string>>& overrides) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        // trim
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected key=value, got '" + line + "'");
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        const auto key_end = key.find_last_not_of(" \t");
        key = key.substr(0, key_end == std::string::npos ? 0 : key_end + 1);
        const auto val_start = value.find_first_not_of(" \t");
        value = val_start == std::string::npos ? "" : value.substr(val_start);
        apply_key(cfg, key, value);
    }
    for (const auto& [key, value] : overrides) apply_key(cfg, key, value);  // flags win
    cfg.data.seed = cfg.seed;
    if (cfg.out_dir.empty()) throw ConfigError("missing required key 'out'");
    validate_spec(cfg.data);
    if (cfg.k < 1) throw ConfigError("config key 'k': must be >= 1");
    if (cfg.lambda < 0.0) throw ConfigError("config key 'lambda': must be >= 0");
    if (cfg.n_test_per_class < 1)
        throw ConfigError("config key 'n_test_per_class': must be >= 1");
    return cfg;
}

ExperimentConfig parse_config(
    const std::string& path,
    const std::vector<std::pair<std::string, std::string>>& overrides) {
    if (path.empty()) return parse_config_text("", overrides);
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str(), overrides);
}

std::string config_to_text(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    os << "condition=" << to_string(cfg.condition) << "\n"
       << "K=" << cfg.data.k_classes << "\n"
       << "n_max=" << cfg.data.n_max << "\n"
       << "rho=" << cfg.data.rho << "\n"
       << "dim=" << cfg.data.dim << "\n"
       << "n_oe=" << cfg.data.n_oe << "\n"
       << "n_ood_test=" << cfg.data.n_ood_test << "\n"
       << "n_test_per_class=" << cfg.n_test_per_class << "\n"
       << "k=" << cfg.k << "\n"
       << "lambda=" << cfg.lambda << "\n";
    if (cfg.batch_size.has_value()) os << "batch_size=" << *cfg.batch_size << "\n";
    os << "seed=" << cfg.seed << "\n"
       << "gcn_epochs=" << cfg.gcn.epochs << "\n"
       << "gcn_lr0=" << cfg.gcn.lr0 << "\n"
       << "gcn_hidden=" << cfg.gcn.hidden_dim << "\n"
       << "gcn_layers=" << cfg.gcn.layers << "\n"
       << "gcn_head_bias=" << (cfg.gcn.head_bias ? "true" : "false") << "\n"
       << "backbone_epochs=" << cfg.backbone.epochs << "\n"
       << "backbone_lr=" << cfg.backbone.lr << "\n"
       << "backbone_batch=" << cfg.backbone.batch_size << "\n"
       << "pretrain_epochs=" << cfg.pretrain_epochs << "\n"
       << "pretrain_per_class=" << cfg.pretrain_per_class << "\n"
       << "gaussianize_on=" << (cfg.gaussianize_with_oe ? "id_oe" : "id") << "\n";
    if (!cfg.train_file.empty()) os << "train_data=" << cfg.train_file << "\n";
    if (!cfg.test_file.empty()) os << "test_data=" << cfg.test_file << "\n";
    if (!cfg.out_dir.empty()) os << "out=" << cfg.out_dir << "\n";
    return os.str();
}

std::string report_record_json(const ExperimentConfig& cfg, const MetricsReport& report) {
    ordered_json j;
    j["condition"] = to_string(cfg.condition);
    j["seed"] = cfg.seed;
    j["k"] = cfg.k;
    j["lambda"] = cfg.lambda;
    if (cfg.batch_size.has_value()) j["batch_size"] = *cfg.batch_size;
    else j["batch_size"] = nullptr;
    j["dataset"] = {
        {"K", cfg.data.k_classes},   {"n_max", cfg.data.n_max},
        {"rho", cfg.data.rho},       {"dim", cfg.data.dim},
        {"n_oe", cfg.data.n_oe},     {"n_ood_test", cfg.data.n_ood_test},
        {"n_test_per_class", cfg.n_test_per_class},
    };
    j["gcn"] = {
        {"layers", cfg.gcn.layers},
        {"hidden", cfg.gcn.hidden_dim},
        {"epochs", cfg.gcn.epochs},
        {"lr0", cfg.gcn.lr0},
    };
    j["backbone"] = {
        {"epochs", cfg.backbone.epochs},
        {"lr", cfg.backbone.lr},
        {"batch_size", cfg.backbone.batch_size},
        {"pretrain_epochs", cfg.pretrain_epochs},
        {"pretrain_per_class", cfg.pretrain_per_class},
    };
    j["metrics"] = {
        {"auroc", report.auroc}, {"aupr", report.aupr},
        {"fpr95", report.fpr95}, {"acc", report.acc},
        {"acc_head", report.acc_head},
    };
    if (report.acc_tail.has_value()) j["metrics"]["acc_tail"] = *report.acc_tail;
    else j["metrics"]["acc_tail"] = nullptr;
    return j.dump(2) + "\n";
}

std::string report_text(const ExperimentConfig& cfg, const MetricsReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "condition=" << to_string(cfg.condition) << "\n"
       << "seed=" << report.seed << "\n"
       << "k=" << report.k << "\n"
       << "lambda=" << report.lambda << "\n";
    if (report.batch_size.has_value()) os << "batch_size=" << *report.batch_size << "\n";
    else os << "batch_size=full\n";
    os << "auroc=" << report.auroc << "\n"
       << "aupr=" << report.aupr << "\n"
       << "fpr95=" << report.fpr95 << "\n"
       << "acc=" << report.acc << "\n"
       << "acc_head=" << report.acc_head << "\n";
    if (report.acc_tail.has_value()) os << "acc_tail=" << *report.acc_tail << "\n";
    else os << "acc_tail=na\n";
    for (const auto& [stage, seconds] : report.timings_s) {
        os << "time_" << stage << "_s=" << seconds << "\n";
    }
    return os.str();
}

std::string aggregate_reports_csv(const std::string& root_dir) {
    struct Sums {
        int runs = 0;
        double auroc = 0, aupr = 0, fpr95 = 0, acc = 0, acc_head = 0;
        double acc_tail = 0;
        int acc_tail_runs = 0;
    };
    std::map<std::string, Sums> by_condition;

    if (!fs::exists(root_dir)) throw ConfigError("no such directory: '" + root_dir + "'");
    for (const auto& entry : fs::recursive_directory_iterator(root_dir)) {
        if (!entry.is_regular_file() || entry.path().filename() != "report.json") continue;
        std::ifstream is(entry.path());
        ordered_json j;
        try {
            is >> j;
        } catch (const std::exception&) {
            continue;  // unreadable report: skip, the sweep recorded the failure
        }
        Sums& s = by_condition[j["condition"].get<std::string>()];
        ++s.runs;
        const auto& m = j["metrics"];
        s.auroc += m["auroc"].get<double>();
        s.aupr += m["aupr"].get<double>();
        s.fpr95 += m["fpr95"].get<double>();
        s.acc += m["acc"].get<double>();
        s.acc_head += m["acc_head"].get<double>();
        if (!m["acc_tail"].is_null()) {
            s.acc_tail += m["acc_tail"].get<double>();
            ++s.acc_tail_runs;
        }
    }

    std::ostringstream os;
    os.precision(17);
    os << "condition,runs,auroc,aupr,fpr95,acc,acc_head,acc_tail\n";
    for (const auto& [condition, s] : by_condition) {
        os << condition << "," << s.runs << "," << s.auroc / s.runs << "," << s.aupr / s.runs
           << "," << s.fpr95 / s.runs << "," << s.acc / s.runs << "," << s.acc_head / s.runs
           << ",";
        if (s.acc_tail_runs > 0) os << s.acc_tail / s.acc_tail_runs;
        else os << "na";
        os << "\n";
    }
    return os.str();
}

}  // namespace ltood
