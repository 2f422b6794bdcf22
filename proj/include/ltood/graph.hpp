#pragma once

#include <iosfwd>
#include <vector>

#include "ltood/matrix.hpp"

namespace ltood {

/// Undirected binary adjacency. Both (i,j) and (j,i) are stored; entries are
/// sorted lexicographically and never include the diagonal.
struct SparseAdjacency {
    int n = 0;
    std::vector<std::pair<int, int>> edges;

    /// Node degrees (number of stored entries per row).
    std::vector<int> degrees() const;
};

/// Symmetrically normalized adjacency with self-loops, in CSR form with
/// column indices sorted within each row. weight(i,j) = 1/sqrt(d_i * d_j)
/// where d counts the self-loop.
struct NormalizedGraph {
    int n = 0;
    std::vector<int> row_ptr;   // size n+1
    std::vector<int> col;
    std::vector<double> weight;

    /// Flattened (row, col, weight) triples in sorted order.
    std::vector<std::tuple<int, int, double>> entries() const;
};

/// Pairwise cosine similarity of the rows of x. Throws SpecError naming the
/// first row whose norm is <= 1e-12.
Mat cosine_similarity(const EmbeddingMatrix& x);

/// Directed top-k neighbours per row of s (self excluded, ties broken toward
/// the smaller index), symmetrized by union. Throws SpecError for k outside
/// [1, N-1]; N == 1 yields the empty adjacency.
SparseAdjacency knn_graph(const Mat& s, int k);

/// D^(-1/2) (A + I) D^(-1/2).
NormalizedGraph normalize_adjacency(const SparseAdjacency& a);

/// Diagonal-only normalized graph (every node isolated); doubles as the
/// aggregation matrix that turns the GCN stack into a plain MLP.
NormalizedGraph identity_graph(int n);

/// out = P * h, rows reduced over the CSR neighbour order.
Mat aggregate(const NormalizedGraph& p, const Mat& h);

// Debug/CLI text dumps: header "n=<N> k=<k>" then sorted "i j w" lines.
void dump_graph(std::ostream& os, const SparseAdjacency& a, int k);
void dump_graph(std::ostream& os, const NormalizedGraph& g, int k);

}  // namespace ltood
