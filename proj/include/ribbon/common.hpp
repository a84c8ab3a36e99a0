#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ribbon {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Bad input: maps to CLI exit code 2.
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A numerical procedure did not converge: maps to CLI exit code 3.
struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr double kPi = 3.14159265358979323846;

/// Planar cross product a ∧ b.
inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

/// e3 ∧ v for a planar vector: rotation by +90 degrees.
inline Vec2 perp(const Vec2& v) { return Vec2(-v.y(), v.x()); }

inline Vec3 lift(const Vec2& v) { return Vec3(v.x(), v.y(), 0.0); }

/// Composite Simpson rule on an odd number of equispaced samples.
inline double simpson(const std::vector<double>& f, double h) {
    const std::size_t n = f.size();
    if (n < 3 || n % 2 == 0)
        throw ValidationError("simpson: need an odd number (>= 3) of samples, got " + std::to_string(n));
    double s = f.front() + f.back();
    for (std::size_t i = 1; i + 1 < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f[i];
    return s * h / 3.0;
}

/// Uniform grid of n points on [a, b].
inline std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> t(n);
    for (int i = 0; i < n; ++i) t[i] = a + (b - a) * double(i) / double(n - 1);
    if (n > 0) t.back() = b;
    return t;
}

inline bool is_dyadic_grid(int n) {
    if (n < 3) return false;
    int m = n - 1;
    return (m & (m - 1)) == 0;
}

/// 4th-order first derivative of equispaced samples; one-sided stencils at the two ends.
template <class T>
std::vector<T> diff4(const std::vector<T>& f, double h) {
    const int n = int(f.size());
    if (n < 5) throw ValidationError("diff4: need at least 5 samples");
    std::vector<T> d(n);
    for (int i = 0; i < n; ++i) {
        if (i >= 2 && i <= n - 3) {
            d[i] = (f[i - 2] - 8.0 * f[i - 1] + 8.0 * f[i + 1] - f[i + 2]) / (12.0 * h);
        } else if (i < 2) {
            const int o = i;  // stencil on points 0..4, evaluated at offset o
            if (o == 0)
                d[i] = (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]) / (12.0 * h);
            else
                d[i] = (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]) / (12.0 * h);
        } else {
            const int o = n - 1 - i;
            if (o == 0)
                d[i] = (25.0 * f[n - 1] - 48.0 * f[n - 2] + 36.0 * f[n - 3] - 16.0 * f[n - 4] + 3.0 * f[n - 5]) /
                       (12.0 * h);
            else
                d[i] = (3.0 * f[n - 1] + 10.0 * f[n - 2] - 18.0 * f[n - 3] + 6.0 * f[n - 4] - f[n - 5]) /
                       (12.0 * h);
        }
    }
    return d;
}

/// 4th-order second derivative of equispaced samples; one-sided stencils at the two ends.
template <class T>
std::vector<T> diff4_2(const std::vector<T>& f, double h) {
    const int n = int(f.size());
    if (n < 6) throw ValidationError("diff4_2: need at least 6 samples");
    std::vector<T> d(n);
    const double h2 = h * h;
    for (int i = 0; i < n; ++i) {
        if (i >= 2 && i <= n - 3) {
            d[i] = (-f[i - 2] + 16.0 * f[i - 1] - 30.0 * f[i] + 16.0 * f[i + 1] - f[i + 2]) / (12.0 * h2);
        } else if (i == 0) {
            d[i] = (45.0 * f[0] - 154.0 * f[1] + 214.0 * f[2] - 156.0 * f[3] + 61.0 * f[4] - 10.0 * f[5]) /
                   (12.0 * h2);
        } else if (i == 1) {
            d[i] = (10.0 * f[0] - 15.0 * f[1] - 4.0 * f[2] + 14.0 * f[3] - 6.0 * f[4] + f[5]) / (12.0 * h2);
        } else if (i == n - 2) {
            d[i] = (10.0 * f[n - 1] - 15.0 * f[n - 2] - 4.0 * f[n - 3] + 14.0 * f[n - 4] - 6.0 * f[n - 5] +
                    f[n - 6]) /
                   (12.0 * h2);
        } else {
            d[i] = (45.0 * f[n - 1] - 154.0 * f[n - 2] + 214.0 * f[n - 3] - 156.0 * f[n - 4] + 61.0 * f[n - 5] -
                    10.0 * f[n - 6]) /
                   (12.0 * h2);
        }
    }
    return d;
}

/// Least-squares slope of log(err) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& err) {
    const int n = int(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int i = 0; i < n; ++i) {
        const double lx = std::log(x[i]), ly = std::log(err[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace ribbon
