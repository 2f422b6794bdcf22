#include "ltood/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ltood/errors.hpp"
#include "ltood/rng.hpp"

namespace ltood {
namespace {

// Geometry constants: the cluster arrangement is a pure function of (K, dim)
// so that train and test sets drawn with different seeds share classes.
constexpr std::uint64_t kTargetGeometrySeed = 0x6C746F6F642D7467ULL;
constexpr std::uint64_t kPretrainGeometrySeed = 0x6C746F6F642D7074ULL;
constexpr double kClusterSeparation = 6.0;  // min pairwise mean distance, in sigmas

// Affine transform applied to the pretrain distribution's inputs; makes the
// pretrained model's BN statistics mismatch the target data.
constexpr double kPretrainScale = 2.0;
constexpr double kPretrainShift = 1.0;

struct ClusterGeometry {
    Mat means;  // K x dim
    // OE and test OOD are isotropic shell clouds (fresh direction per
    // sample, radius + per-coordinate noise): broad zero-mean backgrounds,
    // the way the real auxiliary/test outlier sets are broad. OE spans a
    // thick annulus (a large diverse outlier pool); test OOD draws from a
    // thin shell with a different radial law and its own samples.
    double oe_radius_lo = 0.0;
    double oe_radius_hi = 0.0;
    double oe_sigma = 1.0;
    double ood_radius = 0.0;
    double ood_sigma = 1.0;
};

ClusterGeometry make_geometry(int k_classes, int dim, std::uint64_t geom_seed) {
    ClusterGeometry g;
    g.means = Mat(k_classes, dim);
    Rng rng(mix_seed(geom_seed, (static_cast<std::uint64_t>(k_classes) << 32) ^
                                    static_cast<std::uint64_t>(dim)));

    if (dim == 1) {
        // Unit directions collide in 1-D; fall back to a line arrangement.
        for (int c = 0; c < k_classes; ++c) g.means(c, 0) = kClusterSeparation * c;
    } else {
        for (int c = 0; c < k_classes; ++c) {
            double norm2 = 0.0;
            for (int d = 0; d < dim; ++d) {
                g.means(c, d) = rng.normal();
                norm2 += g.means(c, d) * g.means(c, d);
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (int d = 0; d < dim; ++d) g.means(c, d) *= inv;
        }
        double min_dist = 2.0;
        for (int i = 0; i < k_classes; ++i) {
            for (int j = i + 1; j < k_classes; ++j) {
                double d2 = 0.0;
                for (int d = 0; d < dim; ++d) {
                    const double delta = g.means(i, d) - g.means(j, d);
                    d2 += delta * delta;
                }
                min_dist = std::min(min_dist, std::sqrt(d2));
            }
        }
        const double radius =
            k_classes > 1 ? kClusterSeparation / min_dist : kClusterSeparation;
        for (int c = 0; c < k_classes; ++c) {
            for (int d = 0; d < dim; ++d) g.means(c, d) *= radius;
        }
    }

    double mean_radius = 0.0;
    for (int c = 0; c < k_classes; ++c) {
        double n2 = 0.0;
        for (int d = 0; d < dim; ++d) n2 += g.means(c, d) * g.means(c, d);
        mean_radius += std::sqrt(n2);
    }
    mean_radius /= k_classes;

    g.oe_radius_lo = 0.8 * mean_radius;
    g.oe_radius_hi = 1.7 * mean_radius;
    g.oe_sigma = 1.0;
    g.ood_radius = 1.45 * mean_radius;
    g.ood_sigma = 1.0;
    return g;
}

void append_gaussian_rows(EmbeddingMatrix& out, int& next_row, Rng& rng,
                          std::span<const double> mean, double sigma, int count) {
    for (int r = 0; r < count; ++r) {
        for (int d = 0; d < out.cols; ++d) {
            out(next_row, d) = static_cast<float>(mean[d] + sigma * rng.normal());
        }
        ++next_row;
    }
}

void append_shell_rows(EmbeddingMatrix& out, int& next_row, Rng& rng, double radius_lo,
                       double radius_hi, double sigma, int count) {
    const int dim = out.cols;
    std::vector<double> dir(dim);
    for (int r = 0; r < count; ++r) {
        double n2 = 0.0;
        for (int d = 0; d < dim; ++d) {
            dir[d] = rng.normal();
            n2 += dir[d] * dir[d];
        }
        const double radius = radius_lo + (radius_hi - radius_lo) * rng.uniform();
        const double scale = radius / std::max(std::sqrt(n2), 1e-12);
        for (int d = 0; d < dim; ++d) {
            out(next_row, d) = static_cast<float>(dir[d] * scale + sigma * rng.normal());
        }
        ++next_row;
    }
}

LabeledDataset sample_from_geometry(const ClusterGeometry& geom, const DatasetSpec& spec,
                                    const std::vector<int>& counts) {
    int total = spec.n_oe + spec.n_ood_test;
    for (int c : counts) total += c;

    LabeledDataset data;
    data.spec = spec;
    data.features = EmbeddingMatrix(total, spec.dim);
    data.roles.reserve(total);

    Rng rng(mix_seed(spec.seed, 0xD5EEDULL));
    int row = 0;
    for (int c = 0; c < spec.k_classes; ++c) {
        append_gaussian_rows(data.features, row, rng, geom.means.row(c), 1.0, counts[c]);
        data.roles.insert(data.roles.end(), counts[c], c);
    }
    append_shell_rows(data.features, row, rng, geom.oe_radius_lo, geom.oe_radius_hi,
                      geom.oe_sigma, spec.n_oe);
    data.roles.insert(data.roles.end(), spec.n_oe, kRoleOe);
    append_shell_rows(data.features, row, rng, geom.ood_radius, geom.ood_radius,
                      geom.ood_sigma, spec.n_ood_test);
    data.roles.insert(data.roles.end(), spec.n_ood_test, kRoleTestOod);
    return data;
}

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError("embedding file truncated");
    return v;
}

static_assert(sizeof(float) == 4, "payload requires 32-bit IEEE floats");

}  // namespace

void validate_spec(const DatasetSpec& spec) {
    if (spec.k_classes < 1) throw SpecError("K must be >= 1");
    if (spec.n_max < 1) throw SpecError("n_max must be >= 1");
    if (spec.rho < 1.0) throw SpecError("imbalance ratio rho must be >= 1");
    if (spec.k_classes == 1 && spec.rho != 1.0)
        throw SpecError("K = 1 requires rho = 1");
    if (spec.dim < 1) throw SpecError("dim must be >= 1");
    if (spec.n_oe < 0 || spec.n_ood_test < 0)
        throw SpecError("row counts must be non-negative");
}

std::vector<int> LabeledDataset::rows_with_role(std::int32_t role) const {
    std::vector<int> out;
    for (int i = 0; i < rows(); ++i) {
        if (roles[i] == role) out.push_back(i);
    }
    return out;
}

std::vector<int> LabeledDataset::id_rows() const {
    std::vector<int> out;
    for (int i = 0; i < rows(); ++i) {
        if (is_id_role(roles[i])) out.push_back(i);
    }
    return out;
}

std::vector<int> make_longtailed_counts(int k_classes, int n_max, double rho) {
    if (k_classes < 1) throw SpecError("K must be >= 1");
    if (n_max < 1) throw SpecError("n_max must be >= 1");
    if (rho < 1.0) throw SpecError("imbalance ratio rho must be >= 1");
    if (k_classes == 1) {
        if (rho != 1.0) throw SpecError("K = 1 requires rho = 1");
        return {n_max};
    }
    std::vector<int> counts(k_classes);
    for (int i = 0; i < k_classes; ++i) {
        const double exact =
            n_max * std::pow(rho, -static_cast<double>(i) / (k_classes - 1));
        counts[i] = static_cast<int>(std::floor(exact + 0.5));  // round half up
        if (counts[i] < 1)
            throw SpecError("rho too large for n_max: class " + std::to_string(i) +
                            " rounds to zero samples");
    }
    return counts;
}

std::pair<std::vector<int>, std::vector<int>> head_tail_split(int k_classes) {
    if (k_classes < 1) throw SpecError("K must be >= 1");
    const int head_count = (k_classes + 1) / 2;  // ceiling goes to head
    std::vector<int> head, tail;
    for (int c = 0; c < k_classes; ++c) {
        (c < head_count ? head : tail).push_back(c);
    }
    return {head, tail};
}

LabeledDataset sample_synthetic(const DatasetSpec& spec) {
    validate_spec(spec);
    const auto counts = make_longtailed_counts(spec.k_classes, spec.n_max, spec.rho);
    const auto geom = make_geometry(spec.k_classes, spec.dim, kTargetGeometrySeed);
    return sample_from_geometry(geom, spec, counts);
}

LabeledDataset sample_pretrain_distribution(int k_target, int per_class, int dim,
                                            std::uint64_t seed) {
    // Two fine-grained clusters per eventual class, sitting near the target
    // directions (a superset-style distribution: rich enough that its feature
    // map is useful for the target classes), plus a global affine shift that
    // desynchronizes the BN statistics.
    const auto target = make_geometry(k_target, dim, kTargetGeometrySeed);
    const int k_pre = 2 * k_target;

    DatasetSpec spec;
    spec.k_classes = k_pre;
    spec.n_max = per_class;
    spec.rho = 1.0;
    spec.dim = dim;
    spec.n_oe = 0;
    spec.n_ood_test = 0;
    spec.seed = seed;
    validate_spec(spec);

    ClusterGeometry geom;
    geom.means = Mat(k_pre, dim);
    Rng rng(mix_seed(kPretrainGeometrySeed,
                     (static_cast<std::uint64_t>(k_target) << 32) ^
                         static_cast<std::uint64_t>(dim)));
    for (int c = 0; c < k_target; ++c) {
        double target_norm = 0.0;
        for (int d = 0; d < dim; ++d) target_norm += target.means(c, d) * target.means(c, d);
        target_norm = std::sqrt(target_norm);
        for (int sibling = 0; sibling < 2; ++sibling) {
            std::vector<double> dir(dim);
            double n2 = 0.0;
            for (int d = 0; d < dim; ++d) {
                dir[d] = target.means(c, d) / std::max(target_norm, 1e-12) +
                         0.2 * rng.normal() / std::sqrt(static_cast<double>(dim));
                n2 += dir[d] * dir[d];
            }
            const double scale = target_norm / std::sqrt(n2);
            for (int d = 0; d < dim; ++d) geom.means(2 * c + sibling, d) = dir[d] * scale;
        }
    }

    LabeledDataset data =
        sample_from_geometry(geom, spec, std::vector<int>(k_pre, per_class));
    for (float& v : data.features.values) {
        v = static_cast<float>(kPretrainScale * v + kPretrainShift);
    }
    return data;
}

void write_embeddings(const std::string& path, const EmbeddingMatrix& features,
                      const std::vector<std::int32_t>& roles) {
    if (static_cast<int>(roles.size()) != features.rows)
        throw ShapeError("write_embeddings: roles length != row count");
    if (!features.all_finite())
        throw SpecError("write_embeddings: non-finite values");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os.write("GEMB", 4);
    write_raw<std::uint16_t>(os, 1);  // format version
    write_raw<std::uint16_t>(os, 0);  // reserved
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(features.rows));
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(features.cols));
    for (std::int32_t r : roles) write_raw<std::int32_t>(os, r);
    os.write(reinterpret_cast<const char*>(features.values.data()),
             static_cast<std::streamsize>(features.values.size() * sizeof(float)));
    if (!os) throw FormatError("write to '" + path + "' failed");
}

LabeledDataset read_embeddings(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "GEMB", 4) != 0)
        throw FormatError("'" + path + "': bad magic bytes");
    const auto version = read_raw<std::uint16_t>(is);
    if (version != 1)
        throw FormatError("'" + path + "': unsupported format version " +
                          std::to_string(version));
    read_raw<std::uint16_t>(is);  // reserved
    const auto n_rows = read_raw<std::uint32_t>(is);
    const auto n_cols = read_raw<std::uint32_t>(is);

    LabeledDataset data;
    data.roles.resize(n_rows);
    for (std::uint32_t i = 0; i < n_rows; ++i) data.roles[i] = read_raw<std::int32_t>(is);

    data.features = EmbeddingMatrix(static_cast<int>(n_rows), static_cast<int>(n_cols));
    is.read(reinterpret_cast<char*>(data.features.values.data()),
            static_cast<std::streamsize>(data.features.values.size() * sizeof(float)));
    if (!is) throw FormatError("'" + path + "': truncated payload");
    if (!data.features.all_finite())
        throw FormatError("'" + path + "': non-finite payload values");

    // Reconstruct what the file alone can tell us about the spec.
    data.spec.dim = static_cast<int>(n_cols);
    int max_label = -1;
    int n_oe = 0, n_ood = 0;
    for (std::int32_t r : data.roles) {
        if (r >= 0) max_label = std::max(max_label, r);
        else if (r == kRoleOe) ++n_oe;
        else if (r == kRoleTestOod) ++n_ood;
        else throw FormatError("'" + path + "': unknown role code " + std::to_string(r));
    }
    data.spec.k_classes = max_label + 1;
    data.spec.n_oe = n_oe;
    data.spec.n_ood_test = n_ood;
    data.spec.n_max = 0;
    data.spec.rho = 1.0;
    data.spec.seed = 0;
    return data;
}

void write_spec_sidecar(const std::string& path, const DatasetSpec& spec) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os << "K=" << spec.k_classes << "\n"
       << "rho=" << spec.rho << "\n"
       << "n_max=" << spec.n_max << "\n"
       << "dim=" << spec.dim << "\n"
       << "seed=" << spec.seed << "\n";
}

DatasetSpec read_spec_sidecar(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open '" + path + "'");
    DatasetSpec spec;
    std::string line;
    while (std::getline(is, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "K") spec.k_classes = std::stoi(value);
        else if (key == "rho") spec.rho = std::stod(value);
        else if (key == "n_max") spec.n_max = std::stoi(value);
        else if (key == "dim") spec.dim = std::stoi(value);
        else if (key == "seed") spec.seed = std::stoull(value);
        else throw FormatError("'" + path + "': unknown sidecar key '" + key + "'");
    }
    return spec;
}

}  // namespace ltood
