#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ltood/backbone.hpp"
#include "ltood/dataset.hpp"
#include "ltood/gcn.hpp"

namespace ltood {

/// Detection scores, higher = more ID-like.
struct ScoreSet {
    std::vector<double> id_scores;
    std::vector<double> ood_scores;
};

struct AccuracyBreakdown {
    double acc = 0.0;
    double acc_head = 0.0;
    std::optional<double> acc_tail;  // absent when there are no tail classes
};

/// Maximum softmax probability, computed with max-subtraction.
double msp_score(std::span<const double> logits);

/// Negated Euclidean distance from x to its k-th nearest row of train_feats,
/// all vectors L2-normalized first.
double knn_distance_score(const EmbeddingMatrix& train_feats, std::span<const float> x, int k);

/// FPR of OOD scores at the largest threshold tau with TPR(tau) >= tpr_target
/// (ID positive, score >= tau counted as ID).
double fpr_at_tpr(const ScoreSet& scores, double tpr_target = 0.95);

/// Mann-Whitney AUROC (ties count 1/2), computed via midranks.
double auroc(const ScoreSet& scores);

/// Average precision with ID as the positive class; tied scores are grouped
/// before each precision/recall step.
double aupr(const ScoreSet& scores);

/// Overall / head / tail accuracy over ID test rows; head from
/// head_tail_split. acc_tail is empty when K == 1.
AccuracyBreakdown accuracy_report(const std::vector<int>& pred_labels,
                                  const std::vector<int>& true_labels, int k_classes);

/// Per-row inference outcome aligned with the test set rows.
struct InferenceResult {
    std::vector<double> scores;
    std::vector<int> preds;
};

ScoreSet split_scores(const InferenceResult& result, const std::vector<std::int32_t>& roles);

/// Test-graph inference for graph models: extract features in EVAL mode,
/// build one k-NN graph over the whole test set (or one per shuffled batch
/// when batch_size is set; k clips to batch-1), forward, score MSP per node.
/// Batches sort their members by original index, so batch_size == N is
/// bit-identical to the full-graph path.
InferenceResult inductive_infer(const BackboneModel& backbone, const GcnModel& gcn,
                                const LabeledDataset& test_set, int k,
                                std::optional<int> batch_size, std::uint64_t shuffle_seed);

/// Inference for graph-free heads (linear classifier or MLP).
InferenceResult head_infer(const BackboneModel& backbone, const GcnModel& head,
                           const LabeledDataset& test_set);

/// Inference straight from the backbone's own classifier.
InferenceResult backbone_infer(const BackboneModel& backbone, const LabeledDataset& test_set);

/// k-NN distance scoring against normalized ID training features; predictions
/// still come from head.
InferenceResult knn_infer(const BackboneModel& backbone, const GcnModel& head,
                          const LabeledDataset& train_set, const LabeledDataset& test_set, int k);

struct MetricsReport {
    double fpr95 = 0.0;
    double auroc = 0.0;
    double aupr = 0.0;
    double acc = 0.0;
    double acc_head = 0.0;
    std::optional<double> acc_tail;
    // meta
    std::uint64_t seed = 0;
    int k = 0;
    double lambda = 0.0;
    std::optional<int> batch_size;
    std::vector<std::pair<std::string, double>> timings_s;
};

MetricsReport compute_metrics(const InferenceResult& result, const LabeledDataset& test_set,
                              int k_classes);

void write_scores_csv(const std::string& path, const InferenceResult& result,
                      const std::vector<std::int32_t>& roles);

}  // namespace ltood
