#include "ltood/matrix.hpp"

#include <cmath>
#include <thread>

#include "ltood/errors.hpp"

namespace ltood {

bool EmbeddingMatrix::all_finite() const {
    for (float v : values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Mat widen(const EmbeddingMatrix& x) {
    Mat out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.values.size(); ++i) out.a[i] = x.values[i];
    return out;
}

EmbeddingMatrix narrow(const Mat& x) {
    EmbeddingMatrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.a.size(); ++i) out.values[i] = static_cast<float>(x.a[i]);
    return out;
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) throw ShapeError("matmul: inner dimensions differ");
    Mat c(a.rows, b.cols);
    // i-k-j order keeps the inner loop contiguous in both b and c.
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.a.data() + static_cast<std::size_t>(i) * a.cols;
        double* crow = c.a.data() + static_cast<std::size_t>(i) * c.cols;
        for (int k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            if (aik == 0.0) continue;
            const double* brow = b.a.data() + static_cast<std::size_t>(k) * b.cols;
            for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

Mat matmul_at_b(const Mat& a, const Mat& b) {
    if (a.rows != b.rows) throw ShapeError("matmul_at_b: row counts differ");
    Mat c(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* arow = a.a.data() + static_cast<std::size_t>(k) * a.cols;
        const double* brow = b.a.data() + static_cast<std::size_t>(k) * b.cols;
        for (int i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            if (aki == 0.0) continue;
            double* crow = c.a.data() + static_cast<std::size_t>(i) * c.cols;
            for (int j = 0; j < b.cols; ++j) crow[j] += aki * brow[j];
        }
    }
    return c;
}

Mat matmul_a_bt(const Mat& a, const Mat& b) {
    if (a.cols != b.cols) throw ShapeError("matmul_a_bt: column counts differ");
    Mat c(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = a.a.data() + static_cast<std::size_t>(i) * a.cols;
        double* crow = c.a.data() + static_cast<std::size_t>(i) * c.cols;
        for (int j = 0; j < b.rows; ++j) {
            const double* brow = b.a.data() + static_cast<std::size_t>(j) * b.cols;
            double acc = 0.0;
            for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
            crow[j] = acc;
        }
    }
    return c;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
    const unsigned hw = std::thread::hardware_concurrency();
    const int workers = static_cast<int>(hw == 0 ? 1 : hw);
    if (workers <= 1 || n < 256) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    const int chunk = (n + workers - 1) / workers;
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) {
        const int lo = w * chunk;
        const int hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        threads.emplace_back([lo, hi, &fn] {
            for (int i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : threads) t.join();
}

}  // namespace ltood
