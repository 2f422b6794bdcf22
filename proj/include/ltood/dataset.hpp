#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ltood/matrix.hpp"

namespace ltood {

// Per-row role codes; ID rows carry their class label (>= 0). The in-memory
// encoding matches the file format.
constexpr std::int32_t kRoleOe = -1;
constexpr std::int32_t kRoleTestOod = -2;

inline bool is_id_role(std::int32_t r) { return r >= 0; }

struct DatasetSpec {
    int k_classes = 10;
    int n_max = 500;
    double rho = 100.0;
    int dim = 32;
    int n_oe = 1000;
    int n_ood_test = 1000;
    std::uint64_t seed = 0;
};

/// Throws SpecError if any field is out of range.
void validate_spec(const DatasetSpec& spec);

struct LabeledDataset {
    EmbeddingMatrix features;
    std::vector<std::int32_t> roles;
    DatasetSpec spec;

    int rows() const { return features.rows; }
    std::vector<int> rows_with_role(std::int32_t role) const;
    std::vector<int> id_rows() const;
};

/// counts[i] = round(n_max * rho^(-i/(K-1))), the usual exponential-decay
/// long-tail construction. counts[0] == n_max and max/min == rho up to
/// rounding. Throws SpecError if rho < 1 or any count rounds to zero.
std::vector<int> make_longtailed_counts(int k_classes, int n_max, double rho);

/// head = {0 .. ceil(K/2)-1}, tail = the rest. Classes are indexed by
/// descending frequency, so the split is purely index-based.
std::pair<std::vector<int>, std::vector<int>> head_tail_split(int k_classes);

/// Draws a synthetic dataset: K Gaussian clusters with long-tailed counts,
/// n_oe broad-background outlier rows, n_ood_test rows from a separate novel
/// cluster. Cluster geometry is a pure function of (K, dim), so datasets with
/// different seeds (e.g. train vs. test) share the same class arrangement.
LabeledDataset sample_synthetic(const DatasetSpec& spec);

/// Variant used to emulate pre-training: a different class arrangement with
/// the inputs affinely shifted, so a model trained on it carries mismatched
/// BN statistics relative to sample_synthetic data.
LabeledDataset sample_pretrain_distribution(int k_classes, int per_class, int dim,
                                            std::uint64_t seed);

// Binary embedding file (magic "GEMB"): see README for the exact layout.
void write_embeddings(const std::string& path, const EmbeddingMatrix& features,
                      const std::vector<std::int32_t>& roles);
LabeledDataset read_embeddings(const std::string& path);

// Plain-text key=value sidecar describing a generated dataset.
void write_spec_sidecar(const std::string& path, const DatasetSpec& spec);
DatasetSpec read_spec_sidecar(const std::string& path);

}  // namespace ltood
