#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ltood/graph.hpp"
#include "ltood/matrix.hpp"

namespace ltood {

/// Graph-convolutional classifier: (layers - 1) aggregation+ReLU blocks, then
/// an aggregated affine head to num_classes logits. With layers == 1 the model
/// degenerates to the head alone (a linear classifier when used with the
/// identity graph).
struct GcnModel {
    std::vector<Mat> conv_weights;  // no biases inside conv layers
    Mat head_w;
    std::vector<double> head_b;
    bool head_bias = true;
    int input_dim = 0;
    int hidden_dim = 0;
    int num_classes = 0;

    int layers() const { return static_cast<int>(conv_weights.size()) + 1; }
};

struct GcnTrainConfig {
    double lambda = 0.5;
    int epochs = 200;
    double lr0 = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int layers = 3;
    int hidden_dim = 64;
    bool head_bias = true;
    std::uint64_t seed = 0;
};

/// Training-node bookkeeping over the graph: disjoint ID/OE masks; labels
/// valid wherever id_mask is set.
struct NodeMasks {
    std::vector<std::uint8_t> id_mask;
    std::vector<std::uint8_t> oe_mask;
    std::vector<int> labels;
};

NodeMasks masks_from_roles(const std::vector<std::int32_t>& roles);

struct GcnForwardResult {
    Mat logits;   // N x K
    Mat hidden;   // N x hidden_dim (the refined embedding)
};

struct LossTerms {
    double total = 0.0;
    double ce = 0.0;
    double kl = 0.0;
};

struct GcnGradients {
    std::vector<Mat> dconv;
    Mat dhead_w;
    std::vector<double> dhead_b;
    LossTerms loss;
};

struct TraceRow {
    int epoch;
    double total, ce, kl, lr;
};

struct GcnTrainResult {
    GcnModel model;
    std::vector<TraceRow> trace;
};

GcnModel make_gcn(int input_dim, int num_classes, const GcnTrainConfig& cfg);

GcnForwardResult gcn_forward(const GcnModel& model, const NormalizedGraph& agg,
                             const EmbeddingMatrix& x);

/// gcn_forward with the aggregation replaced by identity; the MLP baseline.
GcnForwardResult mlp_forward(const GcnModel& model, const EmbeddingMatrix& x);

/// ce = mean softmax cross-entropy over ID nodes; kl = mean KL(softmax||U)
/// over OE nodes (0 when there are none); total = ce + lambda * kl.
/// Throws SpecError when no node is masked ID.
LossTerms oe_loss(const Mat& logits, const NodeMasks& masks, double lambda);

/// Analytic gradients of oe_loss(gcn_forward(...)) w.r.t. every weight.
GcnGradients gcn_backward(const GcnModel& model, const NormalizedGraph& agg,
                          const EmbeddingMatrix& x, const NodeMasks& masks, double lambda);

/// lr = 0.5 * lr0 * (1 + cos(pi * t / T)). Throws std::out_of_range for t > T.
double cosine_lr(int t, int total_steps, double lr0);

/// Full-graph Adam with cosine annealing; one step per epoch. Deterministic
/// given cfg.seed. Throws TrainError (with the epoch) on non-finite values.
GcnTrainResult train_gcn(const NormalizedGraph& agg, const EmbeddingMatrix& x,
                         const NodeMasks& masks, const GcnTrainConfig& cfg);

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace);

// Checkpoint format: magic "GGCN", version, layer dims, weights as f64.
void save_gcn(const std::string& path, const GcnModel& model);
GcnModel load_gcn(const std::string& path);

}  // namespace ltood
