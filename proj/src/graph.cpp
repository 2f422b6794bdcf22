#include "ltood/graph.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>

#include "ltood/errors.hpp"

namespace ltood {

std::vector<int> SparseAdjacency::degrees() const {
    std::vector<int> deg(n, 0);
    for (const auto& [i, j] : edges) ++deg[i];
    return deg;
}

std::vector<std::tuple<int, int, double>> NormalizedGraph::entries() const {
    std::vector<std::tuple<int, int, double>> out;
    out.reserve(col.size());
    for (int i = 0; i < n; ++i) {
        for (int p = row_ptr[i]; p < row_ptr[i + 1]; ++p) {
            out.emplace_back(i, col[p], weight[p]);
        }
    }
    return out;
}

Mat cosine_similarity(const EmbeddingMatrix& x) {
    const int n = x.rows;
    const int dim = x.cols;
    Mat normed(n, dim);
    for (int i = 0; i < n; ++i) {
        double norm2 = 0.0;
        const auto row = x.row(i);
        for (int d = 0; d < dim; ++d) norm2 += static_cast<double>(row[d]) * row[d];
        const double norm = std::sqrt(norm2);
        if (norm <= 1e-12)
            throw SpecError("cosine_similarity: row " + std::to_string(i) +
                            " has (near-)zero norm");
        for (int d = 0; d < dim; ++d) normed(i, d) = row[d] / norm;
    }
    Mat s(n, n);
    parallel_for(n, [&](int i) {
        const double* ri = normed.a.data() + static_cast<std::size_t>(i) * dim;
        double* srow = s.a.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* rj = normed.a.data() + static_cast<std::size_t>(j) * dim;
            double acc = 0.0;
            for (int d = 0; d < dim; ++d) acc += ri[d] * rj[d];
            srow[j] = acc;
        }
    });
    return s;
}

SparseAdjacency knn_graph(const Mat& s, int k) {
    const int n = s.rows;
    if (s.cols != n) throw ShapeError("knn_graph: similarity matrix must be square");
    SparseAdjacency adj;
    adj.n = n;
    if (n == 1) return adj;  // single node: empty adjacency
    if (k < 1 || k > n - 1)
        throw SpecError("knn_graph: k must lie in [1, N-1], got k=" + std::to_string(k) +
                        " for N=" + std::to_string(n));

    // Directed top-k picks per row, then union symmetrization.
    std::vector<std::vector<int>> picks(n);
    parallel_for(n, [&](int i) {
        std::vector<int> cand;
        cand.reserve(n - 1);
        for (int j = 0; j < n; ++j) {
            if (j != i) cand.push_back(j);
        }
        const double* srow = s.a.data() + static_cast<std::size_t>(i) * n;
        // Higher similarity first; ties go to the smaller index.
        std::partial_sort(cand.begin(), cand.begin() + k, cand.end(),
                          [srow](int a, int b) {
                              if (srow[a] != srow[b]) return srow[a] > srow[b];
                              return a < b;
                          });
        picks[i].assign(cand.begin(), cand.begin() + k);
    });

    std::set<std::pair<int, int>> edge_set;
    for (int i = 0; i < n; ++i) {
        for (int j : picks[i]) {
            edge_set.emplace(i, j);
            edge_set.emplace(j, i);
        }
    }
    adj.edges.assign(edge_set.begin(), edge_set.end());
    return adj;
}

NormalizedGraph normalize_adjacency(const SparseAdjacency& a) {
    std::vector<double> deg_tilde(a.n, 1.0);  // self-loop
    for (const auto& [i, j] : a.edges) deg_tilde[i] += 1.0;

    std::vector<double> inv_sqrt(a.n);
    for (int i = 0; i < a.n; ++i) inv_sqrt[i] = 1.0 / std::sqrt(deg_tilde[i]);

    // Edges are sorted and the diagonal is absent, so rows can be emitted in
    // order with the self-loop merged in at its sorted position.
    NormalizedGraph g;
    g.n = a.n;
    g.row_ptr.assign(a.n + 1, 0);
    g.col.reserve(a.edges.size() + a.n);
    g.weight.reserve(a.edges.size() + a.n);
    std::size_t e = 0;
    for (int i = 0; i < a.n; ++i) {
        bool placed_diag = false;
        while (e < a.edges.size() && a.edges[e].first == i) {
            const int j = a.edges[e].second;
            if (!placed_diag && j > i) {
                g.col.push_back(i);
                g.weight.push_back(inv_sqrt[i] * inv_sqrt[i]);
                placed_diag = true;
            }
            g.col.push_back(j);
            g.weight.push_back(inv_sqrt[i] * inv_sqrt[j]);
            ++e;
        }
        if (!placed_diag) {
            g.col.push_back(i);
            g.weight.push_back(inv_sqrt[i] * inv_sqrt[i]);
        }
        g.row_ptr[i + 1] = static_cast<int>(g.col.size());
    }
    return g;
}

NormalizedGraph identity_graph(int n) {
    NormalizedGraph g;
    g.n = n;
    g.row_ptr.resize(n + 1);
    g.col.resize(n);
    g.weight.assign(n, 1.0);
    for (int i = 0; i <= n; ++i) g.row_ptr[i] = i;
    for (int i = 0; i < n; ++i) g.col[i] = i;
    return g;
}

Mat aggregate(const NormalizedGraph& p, const Mat& h) {
    if (h.rows != p.n) throw ShapeError("aggregate: node count mismatch");
    Mat out(h.rows, h.cols);
    parallel_for(p.n, [&](int i) {
        double* orow = out.a.data() + static_cast<std::size_t>(i) * h.cols;
        for (int e = p.row_ptr[i]; e < p.row_ptr[i + 1]; ++e) {
            const double w = p.weight[e];
            const double* hrow = h.a.data() + static_cast<std::size_t>(p.col[e]) * h.cols;
            for (int c = 0; c < h.cols; ++c) orow[c] += w * hrow[c];
        }
    });
    return out;
}

void dump_graph(std::ostream& os, const SparseAdjacency& a, int k) {
    os << "n=" << a.n << " k=" << k << "\n";
    for (const auto& [i, j] : a.edges) os << i << " " << j << " 1\n";
}

void dump_graph(std::ostream& os, const NormalizedGraph& g, int k) {
    os << "n=" << g.n << " k=" << k << "\n";
    for (const auto& [i, j, w] : g.entries()) os << i << " " << j << " " << w << "\n";
}

}  // namespace ltood
