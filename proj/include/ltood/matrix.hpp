#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace ltood {

/// Row-major dense double matrix; the workhorse for model math.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

    double& operator()(int i, int j) { return a[static_cast<std::size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return a[static_cast<std::size_t>(i) * cols + j]; }

    std::span<double> row(int i) {
        return {a.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
    }
    std::span<const double> row(int i) const {
        return {a.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
    }
};

/// Row-major float32 matrix: the embedding substrate and on-disk payload type.
struct EmbeddingMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<float> values;

    EmbeddingMatrix() = default;
    EmbeddingMatrix(int r, int c) : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, 0.0f) {}

    float& operator()(int i, int j) { return values[static_cast<std::size_t>(i) * cols + j]; }
    float operator()(int i, int j) const { return values[static_cast<std::size_t>(i) * cols + j]; }

    std::span<const float> row(int i) const {
        return {values.data() + static_cast<std::size_t>(i) * cols, static_cast<std::size_t>(cols)};
    }

    bool all_finite() const;
};

Mat widen(const EmbeddingMatrix& x);
EmbeddingMatrix narrow(const Mat& x);

/// C = A * B.
Mat matmul(const Mat& a, const Mat& b);
/// C = A^T * B (used by weight gradients).
Mat matmul_at_b(const Mat& a, const Mat& b);
/// C = A * B^T (used by input gradients).
Mat matmul_a_bt(const Mat& a, const Mat& b);

/// Runs fn(i) for i in [0, n); rows are independent so chunked threads keep
/// results bit-identical to the serial loop.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace ltood
