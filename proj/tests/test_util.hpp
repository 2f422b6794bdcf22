#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ltood/graph.hpp"
#include "ltood/matrix.hpp"

namespace ltood::test {

/// Central finite difference of a scalar function at x.
inline double central_diff(const std::function<double(double)>& f, double x,
                           double step = 1e-5) {
    return (f(x + step) - f(x - step)) / (2.0 * step);
}

inline double rel_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

/// Dense spectral radius oracle: power iteration on A*A (PSD), so the result
/// is |lambda|_max even when the extreme eigenvalues come in +/- pairs.
inline double spectral_radius_dense(const NormalizedGraph& g, int iters = 2000) {
    const int n = g.n;
    Mat a(n, n);
    for (const auto& [i, j, w] : g.entries()) a(i, j) = w;
    Mat a2 = matmul(a, a);
    std::vector<double> v(n, 1.0 / std::sqrt(static_cast<double>(n)));
    double lam = 0.0;
    for (int it = 0; it < iters; ++it) {
        std::vector<double> next(n, 0.0);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < n; ++j) next[i] += a2(i, j) * v[j];
        }
        double norm = 0.0;
        for (double x : next) norm += x * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) return 0.0;
        lam = norm;
        for (int i = 0; i < n; ++i) v[i] = next[i] / norm;
    }
    return std::sqrt(lam);
}

/// Brute-force AUROC: mean over all (id, ood) pairs of win/tie/loss.
inline double auroc_bruteforce(const std::vector<double>& id_scores,
                               const std::vector<double>& ood_scores) {
    double total = 0.0;
    for (double s_id : id_scores) {
        for (double s_ood : ood_scores) {
            if (s_id > s_ood) total += 1.0;
            else if (s_id == s_ood) total += 0.5;
        }
    }
    return total / (static_cast<double>(id_scores.size()) * ood_scores.size());
}

/// Brute-force FPR@TPR: scan every candidate threshold.
inline double fpr_bruteforce(const std::vector<double>& id_scores,
                             const std::vector<double>& ood_scores, double tpr_target) {
    double best_tau = 0.0;
    bool found = false;
    for (double tau : id_scores) {
        std::size_t hits = 0;
        for (double s : id_scores) {
            if (s >= tau) ++hits;
        }
        const double tpr = static_cast<double>(hits) / id_scores.size();
        if (tpr >= tpr_target && (!found || tau > best_tau)) {
            best_tau = tau;
            found = true;
        }
    }
    std::size_t fp = 0;
    for (double s : ood_scores) {
        if (s >= best_tau) ++fp;
    }
    return static_cast<double>(fp) / ood_scores.size();
}

}  // namespace ltood::test
