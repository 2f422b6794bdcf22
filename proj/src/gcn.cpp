#include "ltood/gcn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ltood/dataset.hpp"
#include "ltood/errors.hpp"
#include "ltood/rng.hpp"

namespace ltood {
namespace {

void glorot_init(Mat& w, Rng& rng) {
    const double bound = std::sqrt(6.0 / (w.rows + w.cols));
    for (double& v : w.a) v = (2.0 * rng.uniform() - 1.0) * bound;
}

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

struct ForwardCache {
    std::vector<Mat> h;      // h[0] = X, h[l+1] = post-ReLU of conv layer l
    std::vector<Mat> agg;    // aggregated input of each weight (conv layers + head)
    Mat logits;
};

ForwardCache forward_impl(const GcnModel& model, const NormalizedGraph& p,
                          const EmbeddingMatrix& x) {
    if (x.rows != p.n) throw ShapeError("gcn_forward: node count mismatch");
    if (x.cols != model.input_dim) throw ShapeError("gcn_forward: feature width mismatch");
    ForwardCache cache;
    cache.h.push_back(widen(x));
    for (const Mat& w : model.conv_weights) {
        Mat a = aggregate(p, cache.h.back());
        Mat z = matmul(a, w);
        for (double& v : z.a) v = v > 0.0 ? v : 0.0;
        cache.agg.push_back(std::move(a));
        cache.h.push_back(std::move(z));
    }
    Mat a = aggregate(p, cache.h.back());
    cache.logits = matmul(a, model.head_w);
    if (model.head_bias) {
        for (int i = 0; i < cache.logits.rows; ++i) {
            for (int j = 0; j < cache.logits.cols; ++j) cache.logits(i, j) += model.head_b[j];
        }
    }
    cache.agg.push_back(std::move(a));
    return cache;
}

void validate_masks(const NodeMasks& masks, int n, int k) {
    if (static_cast<int>(masks.id_mask.size()) != n ||
        static_cast<int>(masks.oe_mask.size()) != n ||
        static_cast<int>(masks.labels.size()) != n)
        throw ShapeError("node masks: length mismatch with graph");
    for (int i = 0; i < n; ++i) {
        if (masks.id_mask[i] && masks.oe_mask[i])
            throw SpecError("node masks: node " + std::to_string(i) + " is both ID and OE");
        if (masks.id_mask[i] && (masks.labels[i] < 0 || masks.labels[i] >= k))
            throw SpecError("node masks: label out of range at node " + std::to_string(i));
    }
}

bool finite(const Mat& m) {
    for (double v : m.a) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace

NodeMasks masks_from_roles(const std::vector<std::int32_t>& roles) {
    NodeMasks masks;
    const int n = static_cast<int>(roles.size());
    masks.id_mask.assign(n, 0);
    masks.oe_mask.assign(n, 0);
    masks.labels.assign(n, 0);
    for (int i = 0; i < n; ++i) {
        if (is_id_role(roles[i])) {
            masks.id_mask[i] = 1;
            masks.labels[i] = roles[i];
        } else if (roles[i] == kRoleOe) {
            masks.oe_mask[i] = 1;
        }
    }
    return masks;
}

GcnModel make_gcn(int input_dim, int num_classes, const GcnTrainConfig& cfg) {
    if (cfg.layers < 1) throw SpecError("make_gcn: layers must be >= 1");
    if (input_dim < 1 || num_classes < 1 || cfg.hidden_dim < 1)
        throw SpecError("make_gcn: bad dimensions");
    GcnModel model;
    model.input_dim = input_dim;
    model.hidden_dim = cfg.layers == 1 ? input_dim : cfg.hidden_dim;
    model.num_classes = num_classes;
    model.head_bias = cfg.head_bias;
    Rng rng(mix_seed(cfg.seed, 0x6C4EULL));
    int prev = input_dim;
    for (int l = 0; l + 1 < cfg.layers; ++l) {
        Mat w(prev, cfg.hidden_dim);
        glorot_init(w, rng);
        model.conv_weights.push_back(std::move(w));
        prev = cfg.hidden_dim;
    }
    model.head_w = Mat(prev, num_classes);
    glorot_init(model.head_w, rng);
    model.head_b.assign(num_classes, 0.0);
    return model;
}

GcnForwardResult gcn_forward(const GcnModel& model, const NormalizedGraph& agg,
                             const EmbeddingMatrix& x) {
    ForwardCache cache = forward_impl(model, agg, x);
    return {std::move(cache.logits), std::move(cache.h.back())};
}

GcnForwardResult mlp_forward(const GcnModel& model, const EmbeddingMatrix& x) {
    return gcn_forward(model, identity_graph(x.rows), x);
}

LossTerms oe_loss(const Mat& logits, const NodeMasks& masks, double lambda) {
    if (lambda < 0.0) throw SpecError("oe_loss: lambda must be >= 0");
    validate_masks(masks, logits.rows, logits.cols);
    int n_id = 0, n_oe = 0;
    for (int i = 0; i < logits.rows; ++i) {
        if (masks.id_mask[i]) ++n_id;
        if (masks.oe_mask[i]) ++n_oe;
    }
    if (n_id == 0) throw SpecError("oe_loss: at least one ID node required");

    const Mat ls = log_softmax(logits);
    const double log_k = std::log(static_cast<double>(logits.cols));
    LossTerms terms;
    for (int i = 0; i < logits.rows; ++i) {
        if (masks.id_mask[i]) {
            terms.ce += -ls(i, masks.labels[i]);
        } else if (masks.oe_mask[i]) {
            // KL(p || U) written as sum_k p_k (logp_k + logK); exactly zero
            // for a uniform softmax.
            double node_kl = 0.0;
            for (int j = 0; j < logits.cols; ++j)
                node_kl += std::exp(ls(i, j)) * (ls(i, j) + log_k);
            terms.kl += std::max(0.0, node_kl);
        }
    }
    terms.ce /= n_id;
    if (n_oe > 0) terms.kl /= n_oe;
    terms.total = terms.ce + lambda * terms.kl;
    return terms;
}

GcnGradients gcn_backward(const GcnModel& model, const NormalizedGraph& agg,
                          const EmbeddingMatrix& x, const NodeMasks& masks, double lambda) {
    ForwardCache cache = forward_impl(model, agg, x);
    validate_masks(masks, cache.logits.rows, cache.logits.cols);

    const int n = cache.logits.rows;
    const int k = cache.logits.cols;
    const Mat ls = log_softmax(cache.logits);
    const double log_k = std::log(static_cast<double>(k));

    int n_id = 0, n_oe = 0;
    for (int i = 0; i < n; ++i) {
        if (masks.id_mask[i]) ++n_id;
        if (masks.oe_mask[i]) ++n_oe;
    }
    if (n_id == 0) throw SpecError("oe_loss: at least one ID node required");

    GcnGradients g;
    Mat dlogits(n, k);
    for (int i = 0; i < n; ++i) {
        if (masks.id_mask[i]) {
            g.loss.ce += -ls(i, masks.labels[i]);
            for (int j = 0; j < k; ++j) {
                const double p = std::exp(ls(i, j));
                dlogits(i, j) = (p - (j == masks.labels[i] ? 1.0 : 0.0)) / n_id;
            }
        } else if (masks.oe_mask[i]) {
            double neg_entropy = 0.0;
            for (int j = 0; j < k; ++j) neg_entropy += std::exp(ls(i, j)) * ls(i, j);
            double node_kl = 0.0;
            for (int j = 0; j < k; ++j) node_kl += std::exp(ls(i, j)) * (ls(i, j) + log_k);
            g.loss.kl += std::max(0.0, node_kl);
            const double scale = lambda / std::max(1, n_oe);
            for (int j = 0; j < k; ++j) {
                const double p = std::exp(ls(i, j));
                dlogits(i, j) = scale * p * (ls(i, j) - neg_entropy);
            }
        }
    }
    g.loss.ce /= n_id;
    if (n_oe > 0) g.loss.kl /= n_oe;
    g.loss.total = g.loss.ce + lambda * g.loss.kl;

    // Head; the aggregation is symmetric so its transpose is itself.
    g.dhead_w = matmul_at_b(cache.agg.back(), dlogits);
    g.dhead_b.assign(k, 0.0);
    if (model.head_bias) {
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < k; ++j) g.dhead_b[j] += dlogits(i, j);
        }
    }
    Mat dh = aggregate(agg, matmul_a_bt(dlogits, model.head_w));

    g.dconv.resize(model.conv_weights.size());
    for (int l = static_cast<int>(model.conv_weights.size()) - 1; l >= 0; --l) {
        // ReLU mask from the stored post-activation values.
        const Mat& act = cache.h[l + 1];
        Mat dz = std::move(dh);
        for (std::size_t idx = 0; idx < dz.a.size(); ++idx) {
            if (act.a[idx] <= 0.0) dz.a[idx] = 0.0;
        }
        g.dconv[l] = matmul_at_b(cache.agg[l], dz);
        if (l > 0) dh = aggregate(agg, matmul_a_bt(dz, model.conv_weights[l]));
    }
    return g;
}

double cosine_lr(int t, int total_steps, double lr0) {
    if (total_steps < 1) throw std::out_of_range("cosine_lr: T must be >= 1");
    if (t < 0 || t > total_steps)
        throw std::out_of_range("cosine_lr: step " + std::to_string(t) +
                                " outside [0, " + std::to_string(total_steps) + "]");
    return 0.5 * lr0 *
           (1.0 + std::cos(3.14159265358979323846 * static_cast<double>(t) / total_steps));
}

GcnTrainResult train_gcn(const NormalizedGraph& agg, const EmbeddingMatrix& x,
                         const NodeMasks& masks, const GcnTrainConfig& cfg) {
    if (cfg.epochs < 1) throw SpecError("train_gcn: epochs must be >= 1");
    if (cfg.lr0 <= 0.0) throw SpecError("train_gcn: lr0 must be > 0");
    if (cfg.lambda < 0.0) throw SpecError("train_gcn: lambda must be >= 0");

    int num_classes = 0;
    for (int i = 0; i < static_cast<int>(masks.labels.size()); ++i) {
        if (i < static_cast<int>(masks.id_mask.size()) && masks.id_mask[i])
            num_classes = std::max(num_classes, masks.labels[i] + 1);
    }
    if (num_classes == 0) throw SpecError("train_gcn: at least one ID node required");

    GcnTrainResult result;
    result.model = make_gcn(x.cols, num_classes, cfg);
    GcnModel& model = result.model;

    // Adam state per tensor.
    std::vector<Mat> m_conv, v_conv;
    for (const Mat& w : model.conv_weights) {
        m_conv.emplace_back(w.rows, w.cols);
        v_conv.emplace_back(w.rows, w.cols);
    }
    Mat m_head(model.head_w.rows, model.head_w.cols), v_head(model.head_w.rows, model.head_w.cols);
    std::vector<double> m_b(model.head_b.size(), 0.0), v_b(model.head_b.size(), 0.0);

    auto adam_update = [&](double& w, double& m, double& v, double grad, double lr, int t) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad;
        const double mhat = m / (1.0 - std::pow(cfg.beta1, t));
        const double vhat = v / (1.0 - std::pow(cfg.beta2, t));
        w -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        GcnGradients grads = gcn_backward(model, agg, x, masks, cfg.lambda);
        if (!std::isfinite(grads.loss.total))
            throw TrainError("gcn training diverged (loss) at epoch " + std::to_string(epoch),
                             epoch);
        for (const Mat& dw : grads.dconv) {
            if (!finite(dw))
                throw TrainError("gcn training diverged (gradient) at epoch " +
                                     std::to_string(epoch),
                                 epoch);
        }
        if (!finite(grads.dhead_w))
            throw TrainError("gcn training diverged (gradient) at epoch " +
                                 std::to_string(epoch),
                             epoch);

        const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
        result.trace.push_back({epoch, grads.loss.total, grads.loss.ce, grads.loss.kl, lr});

        const int t = epoch + 1;
        for (std::size_t l = 0; l < model.conv_weights.size(); ++l) {
            for (std::size_t i = 0; i < model.conv_weights[l].a.size(); ++i) {
                adam_update(model.conv_weights[l].a[i], m_conv[l].a[i], v_conv[l].a[i],
                            grads.dconv[l].a[i], lr, t);
            }
        }
        for (std::size_t i = 0; i < model.head_w.a.size(); ++i) {
            adam_update(model.head_w.a[i], m_head.a[i], v_head.a[i], grads.dhead_w.a[i], lr, t);
        }
        if (model.head_bias) {
            for (std::size_t i = 0; i < model.head_b.size(); ++i) {
                adam_update(model.head_b[i], m_b[i], v_b[i], grads.dhead_b[i], lr, t);
            }
        }
    }
    return result;
}

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os << "epoch,total,ce,kl,lr\n";
    os.precision(17);
    for (const auto& row : trace) {
        os << row.epoch << "," << row.total << "," << row.ce << "," << row.kl << "," << row.lr
           << "\n";
    }
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
    if (!is) throw FormatError("gcn checkpoint truncated");
    return v;
}

}  // namespace

void save_gcn(const std::string& path, const GcnModel& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os.write("GGCN", 4);
    put<std::uint16_t>(os, 1);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(model.conv_weights.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(model.input_dim));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(model.hidden_dim));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(model.num_classes));
    put<std::uint8_t>(os, model.head_bias ? 1 : 0);
    for (const Mat& w : model.conv_weights) {
        put<std::uint32_t>(os, static_cast<std::uint32_t>(w.rows));
        put<std::uint32_t>(os, static_cast<std::uint32_t>(w.cols));
        os.write(reinterpret_cast<const char*>(w.a.data()),
                 static_cast<std::streamsize>(w.a.size() * sizeof(double)));
    }
    put<std::uint32_t>(os, static_cast<std::uint32_t>(model.head_w.rows));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(model.head_w.cols));
    os.write(reinterpret_cast<const char*>(model.head_w.a.data()),
             static_cast<std::streamsize>(model.head_w.a.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(model.head_b.data()),
             static_cast<std::streamsize>(model.head_b.size() * sizeof(double)));
    if (!os) throw FormatError("write to '" + path + "' failed");
}

GcnModel load_gcn(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "GGCN", 4) != 0)
        throw FormatError("'" + path + "': bad magic bytes");
    if (get<std::uint16_t>(is) != 1) throw FormatError("'" + path + "': bad version");
    GcnModel model;
    const auto n_conv = get<std::uint32_t>(is);
    model.input_dim = static_cast<int>(get<std::uint32_t>(is));
    model.hidden_dim = static_cast<int>(get<std::uint32_t>(is));
    model.num_classes = static_cast<int>(get<std::uint32_t>(is));
    model.head_bias = get<std::uint8_t>(is) != 0;
    for (std::uint32_t l = 0; l < n_conv; ++l) {
        const auto rows = get<std::uint32_t>(is);
        const auto cols = get<std::uint32_t>(is);
        Mat w(static_cast<int>(rows), static_cast<int>(cols));
        is.read(reinterpret_cast<char*>(w.a.data()),
                static_cast<std::streamsize>(w.a.size() * sizeof(double)));
        if (!is) throw FormatError("'" + path + "': truncated weights");
        model.conv_weights.push_back(std::move(w));
    }
    const auto rows = get<std::uint32_t>(is);
    const auto cols = get<std::uint32_t>(is);
    model.head_w = Mat(static_cast<int>(rows), static_cast<int>(cols));
    is.read(reinterpret_cast<char*>(model.head_w.a.data()),
            static_cast<std::streamsize>(model.head_w.a.size() * sizeof(double)));
    model.head_b.resize(cols);
    is.read(reinterpret_cast<char*>(model.head_b.data()),
            static_cast<std::streamsize>(model.head_b.size() * sizeof(double)));
    if (!is) throw FormatError("'" + path + "': truncated weights");
    return model;
}

}  // namespace ltood
