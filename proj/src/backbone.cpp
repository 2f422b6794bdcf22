#include "ltood/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>

#include "ltood/errors.hpp"
#include "ltood/rng.hpp"

namespace ltood {
namespace {

void glorot_init(Mat& w, Rng& rng) {
    const double bound = std::sqrt(6.0 / (w.rows + w.cols));
    for (double& v : w.a) v = (2.0 * rng.uniform() - 1.0) * bound;
}

Mat affine_forward(const Mat& a, const AffineLayer& layer) {
    if (a.cols != layer.w.rows) throw ShapeError("backbone: input width mismatch");
    Mat z = matmul(a, layer.w);
    for (int i = 0; i < z.rows; ++i) {
        double* row = z.a.data() + static_cast<std::size_t>(i) * z.cols;
        for (int j = 0; j < z.cols; ++j) row[j] += layer.b[j];
    }
    return z;
}

struct ForwardCache {
    std::vector<Mat> inputs;  // input to each affine (post-ReLU of previous block)
    std::vector<Mat> xhat;    // per BN layer
    std::vector<std::vector<double>> denom;
    Mat features;
    Mat logits;
};

ForwardCache forward_impl(BackboneModel& model, const Mat& batch, Mode mode) {
    if (batch.cols != model.input_dim) throw ShapeError("backbone: batch width mismatch");
    if (mode != Mode::kEval && batch.rows < 2)
        throw SpecError("backbone: batch statistics need at least 2 rows");

    ForwardCache cache;
    Mat a = batch;
    for (int l = 0; l < model.hidden_layers(); ++l) {
        cache.inputs.push_back(a);
        Mat z = affine_forward(a, model.affines[l]);
        BnLayer& bn = model.bns[l];
        const int channels = z.cols;

        std::vector<double> mu(channels, 0.0), var(channels, 0.0);
        if (mode == Mode::kEval) {
            mu = bn.running_mean;
            var = bn.running_var;
        } else {
            for (int i = 0; i < z.rows; ++i) {
                for (int c = 0; c < channels; ++c) mu[c] += z(i, c);
            }
            for (int c = 0; c < channels; ++c) mu[c] /= z.rows;
            for (int i = 0; i < z.rows; ++i) {
                for (int c = 0; c < channels; ++c) {
                    const double d = z(i, c) - mu[c];
                    var[c] += d * d;
                }
            }
            for (int c = 0; c < channels; ++c) var[c] /= z.rows;  // biased
            if (mode == Mode::kTrain) {
                const double m = model.bn_momentum;
                for (int c = 0; c < channels; ++c) {
                    bn.running_mean[c] = (1.0 - m) * bn.running_mean[c] + m * mu[c];
                    bn.running_var[c] = (1.0 - m) * bn.running_var[c] + m * var[c];
                }
            } else {  // kRecalibrate: exact statistics of this (full-data) pass
                bn.running_mean = mu;
                bn.running_var = var;
            }
        }

        std::vector<double> denom(channels);
        for (int c = 0; c < channels; ++c) denom[c] = std::sqrt(var[c] + bn.eps);

        Mat xhat(z.rows, channels);
        Mat act(z.rows, channels);
        for (int i = 0; i < z.rows; ++i) {
            for (int c = 0; c < channels; ++c) {
                const double xh = (z(i, c) - mu[c]) / denom[c];
                xhat(i, c) = xh;
                const double y = bn.gamma[c] * xh + bn.beta[c];
                act(i, c) = y > 0.0 ? y : 0.0;
            }
        }
        cache.xhat.push_back(std::move(xhat));
        cache.denom.push_back(std::move(denom));
        a = std::move(act);
    }
    cache.features = a;
    cache.inputs.push_back(a);
    cache.logits = affine_forward(a, model.affines.back());
    return cache;
}

/// Row-stable log-softmax; returns per-row log probabilities.
Mat log_softmax(const Mat& logits) {
    Mat ls(logits.rows, logits.cols);
    for (int i = 0; i < logits.rows; ++i) {
        const auto row = logits.row(i);
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double sum = 0.0;
        for (int j = 0; j < logits.cols; ++j) sum += std::exp(row[j] - mx);
        const double lse = std::log(sum);
        for (int j = 0; j < logits.cols; ++j) ls(i, j) = row[j] - mx - lse;
    }
    return ls;
}

struct BatchLoss {
    double total = 0.0, ce = 0.0, kl = 0.0;
    Mat dlogits;
};

/// Composite loss over one batch and its gradient w.r.t. the logits.
/// ID rows: mean cross-entropy. OE rows: mean KL(softmax || uniform),
/// formulated as sum_k p_k * (logp_k + log K) so the uniform case is exactly 0.
BatchLoss oe_batch_loss(const Mat& logits, const std::vector<std::int32_t>& roles,
                        double lambda) {
    const int n = logits.rows;
    const int k = logits.cols;
    const Mat ls = log_softmax(logits);
    const double log_k = std::log(static_cast<double>(k));

    int n_id = 0, n_oe = 0;
    for (std::int32_t r : roles) {
        if (is_id_role(r)) ++n_id;
        else if (r == kRoleOe) ++n_oe;
    }

    BatchLoss out;
    out.dlogits = Mat(n, k);
    for (int i = 0; i < n; ++i) {
        const std::int32_t role = roles[i];
        if (is_id_role(role)) {
            out.ce += -ls(i, role);
            for (int j = 0; j < k; ++j) {
                const double p = std::exp(ls(i, j));
                out.dlogits(i, j) = (p - (j == role ? 1.0 : 0.0)) / n_id;
            }
        } else if (role == kRoleOe) {
            double neg_entropy = 0.0;  // sum p * logp
            for (int j = 0; j < k; ++j) neg_entropy += std::exp(ls(i, j)) * ls(i, j);
            double node_kl = 0.0;
            for (int j = 0; j < k; ++j) node_kl += std::exp(ls(i, j)) * (ls(i, j) + log_k);
            out.kl += std::max(0.0, node_kl);
            const double scale = lambda / std::max(1, n_oe);
            for (int j = 0; j < k; ++j) {
                const double p = std::exp(ls(i, j));
                out.dlogits(i, j) = scale * p * (ls(i, j) - neg_entropy);
            }
        }
    }
    if (n_id > 0) out.ce /= n_id;
    if (n_oe > 0) out.kl /= n_oe;
    out.total = out.ce + lambda * out.kl;
    return out;
}

void check_finite(double v, const char* what, int epoch) {
    if (!std::isfinite(v))
        throw TrainError(std::string("backbone training diverged (") + what + ") at epoch " +
                             std::to_string(epoch),
                         epoch);
}

}  // namespace

BackboneModel make_backbone(int input_dim, const std::vector<int>& hidden_dims,
                            int num_classes, std::uint64_t seed) {
    if (input_dim < 1 || num_classes < 1 || hidden_dims.empty())
        throw SpecError("make_backbone: bad dimensions");
    BackboneModel model;
    model.input_dim = input_dim;
    model.feature_dim = hidden_dims.back();
    model.num_classes = num_classes;
    Rng rng(mix_seed(seed, 0xBB01ULL));
    int prev = input_dim;
    for (int width : hidden_dims) {
        AffineLayer aff;
        aff.w = Mat(prev, width);
        glorot_init(aff.w, rng);
        aff.b.assign(width, 0.0);
        model.affines.push_back(std::move(aff));
        BnLayer bn;
        bn.gamma.assign(width, 1.0);
        bn.beta.assign(width, 0.0);
        bn.running_mean.assign(width, 0.0);
        bn.running_var.assign(width, 1.0);
        model.bns.push_back(std::move(bn));
        prev = width;
    }
    AffineLayer head;
    head.w = Mat(prev, num_classes);
    glorot_init(head.w, rng);
    head.b.assign(num_classes, 0.0);
    model.affines.push_back(std::move(head));
    return model;
}

BackboneForwardResult backbone_forward(BackboneModel& model, const Mat& batch, Mode mode) {
    ForwardCache cache = forward_impl(model, batch, mode);
    return {std::move(cache.logits), std::move(cache.features)};
}

namespace detail {

BackboneGradients backbone_loss_and_gradients(BackboneModel& model, const Mat& batch,
                                              const std::vector<std::int32_t>& roles,
                                              double lambda) {
    ForwardCache cache = forward_impl(model, batch, Mode::kTrain);
    BatchLoss loss = oe_batch_loss(cache.logits, roles, lambda);

    const int hidden = model.hidden_layers();
    BackboneGradients g;
    g.loss = loss.total;
    g.dw.resize(model.affines.size());
    g.db.resize(model.affines.size());
    g.dgamma.resize(hidden);
    g.dbeta.resize(hidden);

    // Classifier affine.
    g.dw.back() = matmul_at_b(cache.inputs.back(), loss.dlogits);
    g.db.back().assign(model.num_classes, 0.0);
    for (int i = 0; i < loss.dlogits.rows; ++i) {
        for (int j = 0; j < model.num_classes; ++j) g.db.back()[j] += loss.dlogits(i, j);
    }
    Mat da = matmul_a_bt(loss.dlogits, model.affines.back().w);

    for (int l = hidden - 1; l >= 0; --l) {
        const BnLayer& bn = model.bns[l];
        const Mat& xhat = cache.xhat[l];
        const auto& denom = cache.denom[l];
        const int rows = xhat.rows;
        const int channels = xhat.cols;

        // ReLU: post-activation value > 0 iff the pre-activation was > 0.
        Mat dy = da;
        {
            const Mat& act = cache.inputs[l + 1];
            for (std::size_t idx = 0; idx < dy.a.size(); ++idx) {
                if (act.a[idx] <= 0.0) dy.a[idx] = 0.0;
            }
        }

        g.dgamma[l].assign(channels, 0.0);
        g.dbeta[l].assign(channels, 0.0);
        for (int i = 0; i < rows; ++i) {
            for (int c = 0; c < channels; ++c) {
                g.dgamma[l][c] += dy(i, c) * xhat(i, c);
                g.dbeta[l][c] += dy(i, c);
            }
        }

        // Batch-norm backward through the batch statistics (biased variance):
        // dz = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) / denom.
        std::vector<double> mean_dxhat(channels, 0.0), mean_dxhat_xhat(channels, 0.0);
        Mat dxhat(rows, channels);
        for (int i = 0; i < rows; ++i) {
            for (int c = 0; c < channels; ++c) {
                const double v = dy(i, c) * bn.gamma[c];
                dxhat(i, c) = v;
                mean_dxhat[c] += v;
                mean_dxhat_xhat[c] += v * xhat(i, c);
            }
        }
        for (int c = 0; c < channels; ++c) {
            mean_dxhat[c] /= rows;
            mean_dxhat_xhat[c] /= rows;
        }
        Mat dz(rows, channels);
        for (int i = 0; i < rows; ++i) {
            for (int c = 0; c < channels; ++c) {
                dz(i, c) = (dxhat(i, c) - mean_dxhat[c] - xhat(i, c) * mean_dxhat_xhat[c]) /
                           denom[c];
            }
        }

        g.dw[l] = matmul_at_b(cache.inputs[l], dz);
        g.db[l].assign(channels, 0.0);
        for (int i = 0; i < rows; ++i) {
            for (int c = 0; c < channels; ++c) g.db[l][c] += dz(i, c);
        }
        da = matmul_a_bt(dz, model.affines[l].w);
    }
    return g;
}

}  // namespace detail

BackboneModel train_backbone(BackboneModel model, const LabeledDataset& data,
                             const BackboneTrainConfig& cfg) {
    if (cfg.epochs < 1) throw SpecError("train_backbone: epochs must be >= 1");
    if (cfg.lambda < 0.0) throw SpecError("train_backbone: lambda must be >= 0");

    std::vector<int> train_rows;
    std::vector<int> class_seen(model.num_classes, 0);
    for (int i = 0; i < data.rows(); ++i) {
        if (is_id_role(data.roles[i])) {
            if (data.roles[i] >= model.num_classes)
                throw SpecError("train_backbone: label out of range");
            ++class_seen[data.roles[i]];
            train_rows.push_back(i);
        } else if (data.roles[i] == kRoleOe) {
            train_rows.push_back(i);
        }
    }
    for (int c = 0; c < model.num_classes; ++c) {
        if (class_seen[c] == 0)
            throw SpecError("train_backbone: class " + std::to_string(c) +
                            " has no training samples");
    }

    const Mat all = widen(data.features);
    Rng shuffle_rng(mix_seed(cfg.seed, 0xBB02ULL));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(train_rows);
        const int n = static_cast<int>(train_rows.size());
        int start = 0;
        while (start < n) {
            int end = std::min(n, start + cfg.batch_size);
            if (n - end == 1) end = n;  // avoid a trailing single-row batch
            const int bsz = end - start;
            Mat batch(bsz, model.input_dim);
            std::vector<std::int32_t> roles(bsz);
            for (int b = 0; b < bsz; ++b) {
                const int src = train_rows[start + b];
                for (int d = 0; d < model.input_dim; ++d) batch(b, d) = all(src, d);
                roles[b] = data.roles[src];
            }
            auto grads = detail::backbone_loss_and_gradients(model, batch, roles, cfg.lambda);
            check_finite(grads.loss, "loss", epoch);
            for (std::size_t l = 0; l < model.affines.size(); ++l) {
                for (std::size_t i = 0; i < model.affines[l].w.a.size(); ++i)
                    model.affines[l].w.a[i] -= cfg.lr * grads.dw[l].a[i];
                for (std::size_t i = 0; i < model.affines[l].b.size(); ++i)
                    model.affines[l].b[i] -= cfg.lr * grads.db[l][i];
            }
            for (int l = 0; l < model.hidden_layers(); ++l) {
                for (std::size_t c = 0; c < model.bns[l].gamma.size(); ++c) {
                    model.bns[l].gamma[c] -= cfg.lr * grads.dgamma[l][c];
                    model.bns[l].beta[c] -= cfg.lr * grads.dbeta[l][c];
                }
            }
            start = end;
        }
    }
    return model;
}

BackboneModel gaussianize(BackboneModel model, const EmbeddingMatrix& data) {
    const Mat all = widen(data);
    backbone_forward(model, all, Mode::kRecalibrate);
    for (int l = 0; l < model.hidden_layers(); ++l) {
        for (std::size_t c = 0; c < model.bns[l].running_var.size(); ++c) {
            if (model.bns[l].running_var[c] < 1e-12) {
                std::cerr << "ltood: warning: BN layer " << l << " channel " << c
                          << " has (near-)zero variance; eps-clamped\n";
            }
        }
    }
    return model;
}

BackboneModel gaussianize_ema(BackboneModel model, const EmbeddingMatrix& data, int epochs,
                              int batch_size, double momentum, std::uint64_t seed) {
    if (epochs < 1) throw SpecError("gaussianize_ema: epochs must be >= 1");
    if (batch_size < 2) throw SpecError("gaussianize_ema: batch_size must be >= 2");
    const double saved_momentum = model.bn_momentum;
    model.bn_momentum = momentum;
    const Mat all = widen(data);
    std::vector<int> rows(data.rows);
    for (int i = 0; i < data.rows; ++i) rows[i] = i;
    Rng rng(mix_seed(seed, 0xBB03ULL));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(rows);
        int start = 0;
        const int n = data.rows;
        while (start < n) {
            int end = std::min(n, start + batch_size);
            if (n - end == 1) end = n;
            Mat batch(end - start, data.cols);
            for (int b = 0; b < end - start; ++b) {
                for (int d = 0; d < data.cols; ++d) batch(b, d) = all(rows[start + b], d);
            }
            backbone_forward(model, batch, Mode::kTrain);
            start = end;
        }
    }
    model.bn_momentum = saved_momentum;
    return model;
}

EmbeddingMatrix extract_features(const BackboneModel& model, const EmbeddingMatrix& data) {
    BackboneModel local = model;  // EVAL never mutates, but keep the API const
    auto result = backbone_forward(local, widen(data), Mode::kEval);
    return narrow(result.features);
}

Mat backbone_logits(const BackboneModel& model, const EmbeddingMatrix& data) {
    BackboneModel local = model;
    return backbone_forward(local, widen(data), Mode::kEval).logits;
}

namespace {

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError("backbone checkpoint truncated");
    return v;
}

void put_vec(std::ostream& os, const std::vector<double>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void get_vec(std::istream& is, std::vector<double>& v) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw FormatError("backbone checkpoint truncated");
}

}  // namespace

void save_backbone(const std::string& path, const BackboneModel& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os.write("GBKB", 4);
    put<std::uint16_t>(os, 1);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(model.affines.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(model.input_dim));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(model.feature_dim));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(model.num_classes));
    put<double>(os, model.bn_momentum);
    for (const auto& aff : model.affines) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(aff.w.rows));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(aff.w.cols));
        put_vec(os, aff.w.a);
        put_vec(os, aff.b);
    }
    for (const auto& bn : model.bns) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(bn.gamma.size()));
        put<double>(os, bn.eps);
        put_vec(os, bn.gamma);
        put_vec(os, bn.beta);
        put_vec(os, bn.running_mean);
        put_vec(os, bn.running_var);
    }
    if (!os) throw FormatError("write to '" + path + "' failed");
}

BackboneModel load_backbone(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "GBKB", 4) != 0)
        throw FormatError("'" + path + "': bad magic bytes");
    if (get<std::uint16_t>(is) != 1) throw FormatError("'" + path + "': bad version");
    BackboneModel model;
    const auto n_aff = get<std::uint32_t>(is);
    model.input_dim = static_cast<int>(get<std::uint32_t>(is));
    model.feature_dim = static_cast<int>(get<std::uint32_t>(is));
    model.num_classes = static_cast<int>(get<std::uint32_t>(is));
    model.bn_momentum = get<double>(is);
    for (std::uint32_t l = 0; l < n_aff; ++l) {
        AffineLayer aff;
        const auto rows = get<std::uint32_t>(is);
        const auto cols = get<std::uint32_t>(is);
        aff.w = Mat(static_cast<int>(rows), static_cast<int>(cols));
        get_vec(is, aff.w.a);
        aff.b.resize(cols);
        get_vec(is, aff.b);
        model.affines.push_back(std::move(aff));
    }
    for (std::uint32_t l = 0; l + 1 < n_aff; ++l) {
        BnLayer bn;
        const auto channels = get<std::uint32_t>(is);
        bn.eps = get<double>(is);
        bn.gamma.resize(channels);
        bn.beta.resize(channels);
        bn.running_mean.resize(channels);
        bn.running_var.resize(channels);
        get_vec(is, bn.gamma);
        get_vec(is, bn.beta);
        get_vec(is, bn.running_mean);
        get_vec(is, bn.running_var);
        model.bns.push_back(std::move(bn));
    }
    return model;
}

}  // namespace ltood
