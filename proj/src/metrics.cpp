#include "ltood/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ltood/errors.hpp"
#include "ltood/graph.hpp"
#include "ltood/rng.hpp"

namespace ltood {
namespace {

void require_nonempty(const ScoreSet& scores) {
    if (scores.id_scores.empty() || scores.ood_scores.empty())
        throw MetricError("metric needs non-empty ID and OOD score vectors");
}

int argmax_row(const Mat& m, int i) {
    int best = 0;
    for (int j = 1; j < m.cols; ++j) {
        if (m(i, j) > m(i, best)) best = j;
    }
    return best;
}

InferenceResult result_from_logits(const Mat& logits) {
    InferenceResult out;
    out.scores.resize(logits.rows);
    out.preds.resize(logits.rows);
    for (int i = 0; i < logits.rows; ++i) {
        out.scores[i] = msp_score(logits.row(i));
        out.preds[i] = argmax_row(logits, i);
    }
    return out;
}

}  // namespace

double msp_score(std::span<const double> logits) {
    if (logits.empty()) throw MetricError("msp_score: empty logits");
    double mx = logits[0];
    for (double v : logits) {
        if (!std::isfinite(v)) throw MetricError("msp_score: non-finite logit");
        mx = std::max(mx, v);
    }
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    return 1.0 / sum;  // exp(mx - mx) / sum
}

double knn_distance_score(const EmbeddingMatrix& train_feats, std::span<const float> x,
                          int k) {
    const int n = train_feats.rows;
    if (k < 1 || k > n)
        throw SpecError("knn_distance_score: k must lie in [1, N], got k=" +
                        std::to_string(k));
    if (static_cast<int>(x.size()) != train_feats.cols)
        throw ShapeError("knn_distance_score: query width mismatch");

    double qn = 0.0;
    for (float v : x) qn += static_cast<double>(v) * v;
    qn = std::sqrt(qn);
    if (qn <= 1e-12) throw SpecError("knn_distance_score: zero-norm query");

    std::vector<double> dists(n);
    for (int i = 0; i < n; ++i) {
        const auto row = train_feats.row(i);
        double rn = 0.0;
        for (float v : row) rn += static_cast<double>(v) * v;
        rn = std::sqrt(rn);
        if (rn <= 1e-12)
            throw SpecError("knn_distance_score: zero-norm training row " + std::to_string(i));
        double d2 = 0.0;
        for (int c = 0; c < train_feats.cols; ++c) {
            const double diff = row[c] / rn - x[c] / qn;
            d2 += diff * diff;
        }
        dists[i] = std::sqrt(d2);
    }
    std::nth_element(dists.begin(), dists.begin() + (k - 1), dists.end());
    return -dists[k - 1];
}

double fpr_at_tpr(const ScoreSet& scores, double tpr_target) {
    require_nonempty(scores);
    if (tpr_target <= 0.0 || tpr_target > 1.0)
        throw MetricError("fpr_at_tpr: target must lie in (0, 1]");
    std::vector<double> id_sorted = scores.id_scores;
    std::sort(id_sorted.begin(), id_sorted.end(), std::greater<>());
    const auto n_id = id_sorted.size();
    // Smallest count m with m/n >= target; the threshold is the m-th largest
    // ID score (the largest tau still reaching the target TPR).
    const auto m = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(tpr_target * static_cast<double>(n_id) - 1e-12)));
    const double tau = id_sorted[m - 1];
    std::size_t fp = 0;
    for (double s : scores.ood_scores) {
        if (s >= tau) ++fp;
    }
    return static_cast<double>(fp) / scores.ood_scores.size();
}

double auroc(const ScoreSet& scores) {
    require_nonempty(scores);
    const auto n_id = scores.id_scores.size();
    const auto n_ood = scores.ood_scores.size();
    // Midrank formulation of the Mann-Whitney statistic.
    std::vector<std::pair<double, int>> all;  // (score, is_id)
    all.reserve(n_id + n_ood);
    for (double s : scores.id_scores) all.emplace_back(s, 1);
    for (double s : scores.ood_scores) all.emplace_back(s, 0);
    std::sort(all.begin(), all.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });

    double rank_sum_id = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j < all.size() && all[j].first == all[i].first) ++j;
        const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t t = i; t < j; ++t) {
            if (all[t].second) rank_sum_id += midrank;
        }
        i = j;
    }
    const double u = rank_sum_id - 0.5 * static_cast<double>(n_id) * (n_id + 1);
    return u / (static_cast<double>(n_id) * static_cast<double>(n_ood));
}

double aupr(const ScoreSet& scores) {
    require_nonempty(scores);
    std::vector<std::pair<double, int>> all;
    for (double s : scores.id_scores) all.emplace_back(s, 1);
    for (double s : scores.ood_scores) all.emplace_back(s, 0);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        return a.first > b.first;
    });

    const double total_pos = static_cast<double>(scores.id_scores.size());
    double tp = 0.0, fp = 0.0, prev_recall = 0.0, area = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        // Tied scores step together.
        while (j < all.size() && all[j].first == all[i].first) {
            if (all[j].second) tp += 1.0;
            else fp += 1.0;
            ++j;
        }
        const double recall = tp / total_pos;
        const double precision = tp + fp > 0.0 ? tp / (tp + fp) : 1.0;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return area;
}

AccuracyBreakdown accuracy_report(const std::vector<int>& pred_labels,
                                  const std::vector<int>& true_labels, int k_classes) {
    if (pred_labels.size() != true_labels.size())
        throw ShapeError("accuracy_report: label vectors differ in length");
    if (pred_labels.empty()) throw MetricError("accuracy_report: no ID samples");
    const auto [head, tail] = head_tail_split(k_classes);
    std::vector<bool> is_head(k_classes, false);
    for (int c : head) is_head[c] = true;

    int correct = 0, head_total = 0, head_correct = 0, tail_total = 0, tail_correct = 0;
    for (std::size_t i = 0; i < true_labels.size(); ++i) {
        const int truth = true_labels[i];
        if (truth < 0 || truth >= k_classes)
            throw SpecError("accuracy_report: label out of range");
        const bool ok = pred_labels[i] == truth;
        correct += ok;
        if (is_head[truth]) {
            ++head_total;
            head_correct += ok;
        } else {
            ++tail_total;
            tail_correct += ok;
        }
    }
    AccuracyBreakdown out;
    out.acc = static_cast<double>(correct) / true_labels.size();
    out.acc_head = head_total > 0 ? static_cast<double>(head_correct) / head_total : 0.0;
    if (!tail.empty() && tail_total > 0)
        out.acc_tail = static_cast<double>(tail_correct) / tail_total;
    return out;
}

ScoreSet split_scores(const InferenceResult& result, const std::vector<std::int32_t>& roles) {
    ScoreSet out;
    for (std::size_t i = 0; i < roles.size(); ++i) {
        if (is_id_role(roles[i])) out.id_scores.push_back(result.scores[i]);
        else if (roles[i] == kRoleTestOod) out.ood_scores.push_back(result.scores[i]);
    }
    return out;
}

InferenceResult inductive_infer(const BackboneModel& backbone, const GcnModel& gcn,
                                const LabeledDataset& test_set, int k,
                                std::optional<int> batch_size, std::uint64_t shuffle_seed) {
    const int n = test_set.rows();
    if (n == 0) throw MetricError("inductive_infer: empty test set");
    const EmbeddingMatrix feats = extract_features(backbone, test_set.features);

    auto infer_subset = [&](const std::vector<int>& idx) {
        EmbeddingMatrix sub(static_cast<int>(idx.size()), feats.cols);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto row = feats.row(idx[r]);
            std::copy(row.begin(), row.end(),
                      sub.values.begin() + static_cast<std::ptrdiff_t>(r) * feats.cols);
        }
        NormalizedGraph graph;
        if (sub.rows == 1) {
            graph = identity_graph(1);  // isolated node
        } else {
            const int k_eff = std::min(k, sub.rows - 1);
            graph = normalize_adjacency(knn_graph(cosine_similarity(sub), k_eff));
        }
        return gcn_forward(gcn, graph, sub).logits;
    };

    InferenceResult out;
    out.scores.resize(n);
    out.preds.resize(n);

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::vector<int>> batches;
    if (!batch_size.has_value()) {
        batches.push_back(order);
    } else {
        const int bsz = *batch_size;
        if (bsz < 1) throw SpecError("inductive_infer: batch_size must be >= 1");
        Rng rng(mix_seed(shuffle_seed, 0xEA7ULL));
        rng.shuffle(order);
        for (int start = 0; start < n; start += bsz) {
            const int end = std::min(n, start + bsz);
            std::vector<int> batch(order.begin() + start, order.begin() + end);
            // Canonical order inside a batch: membership comes from the
            // shuffle, the graph itself is index-ordered. With bsz == N this
            // reproduces the full-graph path bit-for-bit.
            std::sort(batch.begin(), batch.end());
            batches.push_back(std::move(batch));
        }
    }

    for (const auto& batch : batches) {
        const Mat logits = infer_subset(batch);
        for (std::size_t r = 0; r < batch.size(); ++r) {
            out.scores[batch[r]] = msp_score(logits.row(static_cast<int>(r)));
            out.preds[batch[r]] = argmax_row(logits, static_cast<int>(r));
        }
    }
    return out;
}

InferenceResult head_infer(const BackboneModel& backbone, const GcnModel& head,
                           const LabeledDataset& test_set) {
    if (test_set.rows() == 0) throw MetricError("head_infer: empty test set");
    const EmbeddingMatrix feats = extract_features(backbone, test_set.features);
    return result_from_logits(mlp_forward(head, feats).logits);
}

InferenceResult backbone_infer(const BackboneModel& backbone, const LabeledDataset& test_set) {
    if (test_set.rows() == 0) throw MetricError("backbone_infer: empty test set");
    return result_from_logits(backbone_logits(backbone, test_set.features));
}

InferenceResult knn_infer(const BackboneModel& backbone, const GcnModel& head,
                          const LabeledDataset& train_set, const LabeledDataset& test_set,
                          int k) {
    if (test_set.rows() == 0) throw MetricError("knn_infer: empty test set");
    const EmbeddingMatrix train_feats_all = extract_features(backbone, train_set.features);
    const auto id_rows = train_set.id_rows();
    EmbeddingMatrix ref(static_cast<int>(id_rows.size()), train_feats_all.cols);
    for (std::size_t r = 0; r < id_rows.size(); ++r) {
        const auto row = train_feats_all.row(id_rows[r]);
        std::copy(row.begin(), row.end(),
                  ref.values.begin() + static_cast<std::ptrdiff_t>(r) * ref.cols);
    }
    const int k_eff = std::min<int>(k, ref.rows);

    InferenceResult out = head_infer(backbone, head, test_set);
    const EmbeddingMatrix test_feats = extract_features(backbone, test_set.features);
    for (int i = 0; i < test_feats.rows; ++i) {
        out.scores[i] = knn_distance_score(ref, test_feats.row(i), k_eff);
    }
    return out;
}

MetricsReport compute_metrics(const InferenceResult& result, const LabeledDataset& test_set,
                              int k_classes) {
    const ScoreSet scores = split_scores(result, test_set.roles);
    std::vector<int> preds, truths;
    for (int i = 0; i < test_set.rows(); ++i) {
        if (is_id_role(test_set.roles[i])) {
            preds.push_back(result.preds[i]);
            truths.push_back(test_set.roles[i]);
        }
    }
    MetricsReport report;
    report.fpr95 = fpr_at_tpr(scores, 0.95);
    report.auroc = auroc(scores);
    report.aupr = aupr(scores);
    const AccuracyBreakdown acc = accuracy_report(preds, truths, k_classes);
    report.acc = acc.acc;
    report.acc_head = acc.acc_head;
    report.acc_tail = acc.acc_tail;
    return report;
}

void write_scores_csv(const std::string& path, const InferenceResult& result,
                      const std::vector<std::int32_t>& roles) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os << "role,score,pred,true\n";
    os.precision(17);
    for (std::size_t i = 0; i < roles.size(); ++i) {
        os << roles[i] << "," << result.scores[i] << "," << result.preds[i] << ","
           << (is_id_role(roles[i]) ? roles[i] : -1) << "\n";
    }
}

}  // namespace ltood
