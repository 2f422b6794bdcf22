#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ltood/dataset.hpp"
#include "ltood/matrix.hpp"

namespace ltood {

enum class Mode { kTrain, kEval, kRecalibrate };

struct AffineLayer {
    Mat w;                    // in x out
    std::vector<double> b;    // out
};

struct BnLayer {
    std::vector<double> gamma, beta;
    std::vector<double> running_mean, running_var;
    double eps = 1e-5;
};

/// Feed-forward stack: (affine -> BN -> ReLU) per hidden layer, then a final
/// affine classifier. The penultimate (post-ReLU) activations are the
/// extracted features.
struct BackboneModel {
    std::vector<AffineLayer> affines;  // hidden affines + final classifier
    std::vector<BnLayer> bns;          // one per hidden affine
    int input_dim = 0;
    int feature_dim = 0;
    int num_classes = 0;
    double bn_momentum = 0.1;

    int hidden_layers() const { return static_cast<int>(bns.size()); }
};

struct BackboneTrainConfig {
    double lr = 0.05;
    int epochs = 50;
    int batch_size = 128;
    double lambda = 0.5;
    std::uint64_t seed = 0;
};

struct BackboneForwardResult {
    Mat logits;
    Mat features;
};

BackboneModel make_backbone(int input_dim, const std::vector<int>& hidden_dims,
                            int num_classes, std::uint64_t seed);

/// TRAIN: normalize by batch statistics, EMA-update running statistics.
/// EVAL: normalize by running statistics.
/// RECALIBRATE: normalize by batch statistics and overwrite the running
/// statistics with them (pass the full dataset as one batch to recalibrate
/// exactly; each layer sees inputs already normalized by the new upstream
/// statistics, which matches a layer-by-layer sweep).
BackboneForwardResult backbone_forward(BackboneModel& model, const Mat& batch, Mode mode);

/// Mini-batch SGD on the composite loss: mean cross-entropy over ID rows plus
/// lambda * mean KL(softmax || uniform) over OE rows. TEST_OOD rows are
/// ignored. Throws TrainError on a non-finite loss.
BackboneModel train_backbone(BackboneModel model, const LabeledDataset& data,
                             const BackboneTrainConfig& cfg);

/// Replaces every BN layer's running statistics with the exact per-channel
/// mean/variance of its pre-BN activations over data (single recalibrate
/// pass). Weights, gamma, beta untouched. Zero-variance channels are clamped
/// by eps and reported on stderr.
BackboneModel gaussianize(BackboneModel model, const EmbeddingMatrix& data);

/// EMA flavour of the above (momentum per-batch updates over several epochs);
/// converges to gaussianize() statistics as epochs grow.
BackboneModel gaussianize_ema(BackboneModel model, const EmbeddingMatrix& data, int epochs,
                              int batch_size, double momentum, std::uint64_t seed);

/// EVAL-mode penultimate activations, narrowed to the embedding type.
EmbeddingMatrix extract_features(const BackboneModel& model, const EmbeddingMatrix& data);

/// EVAL-mode logits.
Mat backbone_logits(const BackboneModel& model, const EmbeddingMatrix& data);

// Checkpoint format: magic "GBKB", version, dims, then parameters and running
// statistics as f64 in declaration order.
void save_backbone(const std::string& path, const BackboneModel& model);
BackboneModel load_backbone(const std::string& path);

namespace detail {
/// Loss and analytic parameter gradients of one TRAIN-mode batch; exposed for
/// the finite-difference tests.
struct BackboneGradients {
    double loss = 0.0;
    std::vector<Mat> dw;
    std::vector<std::vector<double>> db;
    std::vector<std::vector<double>> dgamma, dbeta;
};
BackboneGradients backbone_loss_and_gradients(BackboneModel& model, const Mat& batch,
                                              const std::vector<std::int32_t>& roles,
                                              double lambda);
}  // namespace detail

}  // namespace ltood
