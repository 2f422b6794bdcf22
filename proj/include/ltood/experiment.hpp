#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ltood/backbone.hpp"
#include "ltood/dataset.hpp"
#include "ltood/gcn.hpp"
#include "ltood/metrics.hpp"

namespace ltood {

/// Ablation conditions; each maps to one row of the pipeline ablation table.
enum class Condition {
    kScratchOe,
    kScratchGcn,
    kPretrain,
    kPretrainGcn,
    kPretrainGau,
    kPretrainGauGcn,
    kPretrainGauMlp,
    kKnnBaseline,
};

std::string to_string(Condition c);
Condition condition_from_string(const std::string& s);
bool condition_uses_gcn(Condition c);
bool condition_uses_gaussianization(Condition c);
bool condition_uses_pretraining(Condition c);

struct ExperimentConfig {
    DatasetSpec data;                // long-tailed training distribution
    int n_test_per_class = 100;      // balanced ID test set size per class
    Condition condition = Condition::kPretrainGauGcn;
    int k = 7;
    double lambda = 0.5;
    GcnTrainConfig gcn;
    BackboneTrainConfig backbone;
    int pretrain_epochs = 40;
    int pretrain_per_class = 200;
    std::optional<int> batch_size;   // batch-wise inference; absent = full graph
    bool gaussianize_with_oe = true; // recalibrate on ID+OE (vs ID only)
    std::string train_file;          // optional ingestion instead of synthesis
    std::string test_file;
    std::string out_dir;
    std::uint64_t seed = 0;
};

// --- pipeline stages (composable; run_experiment strings them together) ---

LabeledDataset make_train_set(const ExperimentConfig& cfg);
LabeledDataset make_test_set(const ExperimentConfig& cfg);

/// Scratch conditions train on the target data with the OE objective;
/// pretrain conditions train on the shifted balanced stand-in distribution.
/// No Gaussianization here.
BackboneModel train_condition_backbone(const ExperimentConfig& cfg,
                                       const LabeledDataset& train_set);

BackboneModel apply_gaussianization(const ExperimentConfig& cfg, BackboneModel backbone,
                                    const LabeledDataset& train_set);

/// Trains the per-condition classifier over extracted features: a GCN over
/// the k-NN train graph, the parameter-matched MLP, or a linear head.
/// SCRATCH_OE returns an empty result (the backbone classifier is used).
std::optional<GcnTrainResult> train_condition_head(const ExperimentConfig& cfg,
                                                   const BackboneModel& backbone,
                                                   const LabeledDataset& train_set);

InferenceResult run_condition_inference(const ExperimentConfig& cfg,
                                        const BackboneModel& backbone, const GcnModel* head,
                                        const LabeledDataset& train_set,
                                        const LabeledDataset& test_set);

/// Full pipeline: data -> backbone -> (gaussianize) -> features -> (graph +
/// head) -> inference -> metrics. Persists config.txt, trace.csv, scores.csv,
/// checkpoints, report.txt and report.json under cfg.out_dir; on failure
/// leaves a FAILED marker naming the stage and rethrows a StageError.
MetricsReport run_experiment(const ExperimentConfig& cfg);

enum class SweepAxis { kK, kLambda, kBatchSize };
std::string to_string(SweepAxis a);
SweepAxis sweep_axis_from_string(const std::string& s);

struct SweepCell {
    double value = 0.0;
    std::uint64_t seed = 0;
    std::optional<MetricsReport> report;  // empty = failed
    std::string error;
};

struct SweepResult {
    SweepAxis axis;
    std::vector<double> values;
    std::vector<std::uint64_t> seeds;
    std::vector<SweepCell> cells;  // row-major over (value, seed)
};

/// Runs the full experiment per (value, seed) into per-cell subdirectories of
/// cfg.out_dir; failing cells are recorded and the sweep continues. Emits
/// sweep.csv (tidy rows + mean rows) and per-metric plot files.
SweepResult run_sweep(const ExperimentConfig& base, SweepAxis axis,
                      const std::vector<double>& values, const std::vector<std::uint64_t>& seeds);

// --- configuration files ---

/// Flat key=value files; '#' starts a comment. Unknown keys are rejected with
/// the nearest known key named. Values given as overrides (e.g. from flags)
/// win over file values.
ExperimentConfig parse_config(const std::string& path,
                              const std::vector<std::pair<std::string, std::string>>& overrides);
ExperimentConfig parse_config_text(const std::string& text,
                                   const std::vector<std::pair<std::string, std::string>>& overrides);
std::string config_to_text(const ExperimentConfig& cfg);

/// Serialized report record (metrics + run meta, no timings): the byte-stable
/// artifact compared across reruns.
std::string report_record_json(const ExperimentConfig& cfg, const MetricsReport& report);
std::string report_text(const ExperimentConfig& cfg, const MetricsReport& report);

/// Scans run directories (recursively) for report.json files and aggregates
/// per-condition means in ablation-table column order.
std::string aggregate_reports_csv(const std::string& root_dir);

}  // namespace ltood
