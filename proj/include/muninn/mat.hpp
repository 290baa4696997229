#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace muninn {

// Dense row-major H x d matrix of doubles. Trajectories, noise predictions
// and sampler noise draws all share this shape.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {
        if (r < 0 || c < 0) throw std::invalid_argument("Mat: negative shape");
    }

    std::size_t size() const { return v.size(); }
    double& at(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
    double at(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j]; }
    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    double frobenius_norm() const {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    }

    double l1_norm() const {
        double s = 0.0;
        for (double x : v) s += std::abs(x);
        return s;
    }

    double max_abs() const {
        double m = 0.0;
        for (double x : v) m = std::max(m, std::abs(x));
        return m;
    }

    bool operator==(const Mat& o) const { return rows == o.rows && cols == o.cols && v == o.v; }
    bool operator!=(const Mat& o) const { return !(*this == o); }
};

inline void require_same_shape(const Mat& a, const Mat& b, const char* where) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(where) + ": shape mismatch (" + std::to_string(a.rows) + "x" +
                                    std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                                    std::to_string(b.cols) + ")");
}

inline Mat operator+(const Mat& a, const Mat& b) {
    require_same_shape(a, b, "Mat::add");
    Mat r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r.v[i] += b.v[i];
    return r;
}

inline Mat operator-(const Mat& a, const Mat& b) {
    require_same_shape(a, b, "Mat::sub");
    Mat r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r.v[i] -= b.v[i];
    return r;
}

inline Mat operator*(double s, const Mat& a) {
    Mat r = a;
    for (double& x : r.v) x *= s;
    return r;
}

// r += s*a without a temporary.
inline void axpy(Mat& r, double s, const Mat& a) {
    require_same_shape(r, a, "Mat::axpy");
    for (std::size_t i = 0; i < r.size(); ++i) r.v[i] += s * a.v[i];
}

// Trajectory values live on an H x d grid; noise predictions match that shape.
using Trajectory = Mat;
using NoisePrediction = Mat;

}  // namespace muninn
