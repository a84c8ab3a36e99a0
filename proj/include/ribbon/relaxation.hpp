#pragma once

#include "frames.hpp"
#include "limit_energy.hpp"
#include "quadform.hpp"

#include <boost/math/quadrature/gauss.hpp>

#include <Eigen/SVD>

#include <array>
#include <memory>
#include <optional>

namespace ribbon {

/// Symmetric 2x2 field on [0, l] in physical (chart) coordinates.
using SymField2 = std::function<Mat2(double)>;

/// Piecewise-linear field through samples on the reference grid.
inline SymField2 sym_field_from_samples(const ReferenceCurve& ref, std::vector<Mat2> M) {
    if (int(M.size()) != ref.size()) throw ValidationError("field samples do not match the reference grid");
    const double h = ref.h();
    const int n = ref.size();
    return [M = std::move(M), h, n](double t) {
        const double x = std::clamp(t / h, 0.0, double(n - 1));
        const int i = std::min(int(x), n - 2);
        const double f = x - i;
        return Mat2((1.0 - f) * M[i] + f * M[i + 1]);
    };
}

/// C-infinity step: 0 for x <= 0, 1 for x >= 1.
inline double smooth_step(double x) {
    if (x <= 0) return 0.0;
    if (x >= 1) return 1.0;
    const double a = std::exp(-1.0 / x), b = std::exp(-1.0 / (1.0 - x));
    return a / (a + b);
}
inline double smooth_step_deriv(double x) {
    if (x <= 0 || x >= 1) return 0.0;
    const double a = std::exp(-1.0 / x), b = std::exp(-1.0 / (1.0 - x));
    return a * b * (1.0 / (x * x) + 1.0 / ((1 - x) * (1 - x))) / ((a + b) * (a + b));
}

// ---------------------------------------------------------------------------
// Zero-determinant split along a kernel direction.

struct LaminateSplit {
    Vec3 m1 = Vec3::Zero(), m2 = Vec3::Zero();
    double s1 = 0.0, s2 = 0.0;
    double lambda = 0.0;  ///< m = lambda m1 + (1 - lambda) m2
    double q_m = 0.0, q_m1 = 0.0, q_m2 = 0.0;  ///< Q**_t at m, m1, m2
    bool in_plane = false;  ///< m in span{e2, v}: some endpoint has zero first component
};

/// True if m lies in span{e2, v}.
inline bool in_excluded_plane(const Vec3& m, const Vec3& v) {
    const Vec2 ab = plane_coefficients(v);
    return std::abs(ab(0) * m(0) + ab(1) * m(2)) <= 1e-12 * std::max(1.0, m.norm() * v.norm());
}

/// det(m + s v) = 0 has one root of each sign when det(m) and det(v) have opposite signs.
/// With strict set, m in span{e2, v} is rejected.
inline LaminateSplit split(const RelaxedDensity& rd, const MovingBasis& basis, double t, const Vec3& m, const Vec3& v,
                           bool strict = false) {
    const double d0 = det_vec(m);
    const double a = det_vec(v);
    const double scale = std::max(1.0, m.squaredNorm());
    if (std::abs(d0) <= 1e-14 * scale) throw ValidationError("split: det(m) = 0, nothing to split");
    if (!(d0 * a < 0))
        throw ValidationError("split: direction v must have det of the opposite sign to det(m) (v in V+ for det m > 0, "
                              "V- for det m < 0)");
    LaminateSplit out;
    out.in_plane = in_excluded_plane(m, v);
    if (strict && out.in_plane)
        throw ValidationError("split: m lies in span{e2, v}; the laminate endpoints would have zero first component");
    const double b = 2.0 * m.dot(det_pencil() * v);
    const double disc = b * b - 4.0 * a * d0;
    const double q = -0.5 * (b + std::copysign(std::sqrt(disc), b));
    const double r1 = q / a, r2 = d0 / q;
    out.s1 = std::max(r1, r2);
    out.s2 = std::min(r1, r2);
    out.m1 = m + out.s1 * v;
    out.m2 = m + out.s2 * v;
    out.lambda = -out.s2 / (out.s1 - out.s2);
    const Mat3 Kt = basis.K_at(t);
    auto qs = [&](const Vec3& x) {
        const double d = det_vec(x);
        return quad(Kt, x) + rd.alpha_plus * std::max(d, 0.0) + rd.alpha_minus * std::max(-d, 0.0);
    };
    out.q_m = qs(m);
    out.q_m1 = qs(out.m1);
    out.q_m2 = qs(out.m2);
    return out;
}

// ---------------------------------------------------------------------------
// Piecewise-constant approximation on the mesh l/n with zero margins.

struct CellField {
    double ell = 1.0;
    int n = 1;
    std::vector<double> v;  ///< value on cell j = [j l/n, (j+1) l/n)

    double operator()(double t) const {
        const int j = std::clamp(int(std::floor(t / ell * n)), 0, n - 1);
        return v[j];
    }
    double cell_left(int j) const { return ell * j / n; }
    double cell_mid(int j) const { return ell * (j + 0.5) / n; }
};

/// Left-node sampling on interior cells 1..n-2, forced to |u_n| >= c with the sign of u (0 counts as +).
inline CellField pc_sample_pinned(const std::function<double(double)>& u, double ell, double c, int n) {
    CellField f{ell, n, std::vector<double>(n, 0.0)};
    for (int j = 1; j + 1 < n; ++j) {
        const double x = u(f.cell_left(j));
        f.v[j] = std::abs(x) >= c ? x : (x < 0 ? -c : c);
    }
    return f;
}

inline CellField pc_sample(const std::function<double(double)>& u, double ell, int n) {
    CellField f{ell, n, std::vector<double>(n, 0.0)};
    for (int j = 1; j + 1 < n; ++j) f.v[j] = u(f.cell_left(j));
    return f;
}

/// Sign-preserving piecewise-constant approximation; requires |u| >= c except on a set of measure <= 1e-6.
inline CellField pc_approx_sign(const std::function<double(double)>& u, double ell, double c, int n,
                                int samples = 1 << 16) {
    if (!(c > 0)) throw ValidationError("pc_approx_sign: c must be positive");
    if (n < 3) throw ValidationError("pc_approx_sign: need n >= 3 so that I_n is not empty");
    const double dt = ell / samples;
    double bad = 0.0;
    for (int i = 0; i < samples; ++i)
        if (std::abs(u((i + 0.5) * dt)) < c) bad += dt;
    if (bad > 1e-6) {
        std::ostringstream os;
        os << "pc_approx_sign: |u| < c on a set of measure about " << bad;
        throw ValidationError(os.str());
    }
    return pc_sample_pinned(u, ell, c, n);
}

/// Cell averages on interior cells with the margins' mass moved inside. For n >= 8 it is spread over the
/// three cells next to each margin so that the integral and the first moment of u are both kept; otherwise
/// it is lumped into cells 1 and n-2.
/// With pin > 0, values are forced to |u_n| >= pin keeping their sign.
inline CellField pc_lumped(const std::function<double(double)>& u, double ell, int n, double pin = 0.0) {
    if (n < 3) throw ValidationError("pc approximation: need n >= 3 so that I_n is not empty");
    CellField f{ell, n, std::vector<double>(n, 0.0)};
    const double h = ell / n;
    using G = boost::math::quadrature::gauss<double, 7>;
    for (int j = 1; j + 1 < n; ++j) f.v[j] = G::integrate(u, j * h, (j + 1) * h);
    // margin mass and its first moment about the outer end
    const double m0 = G::integrate(u, 0.0, h), m1 = G::integrate([&](double t) { return t * u(t); }, 0.0, h);
    const double r0 = G::integrate(u, ell - h, ell),
                 r1 = G::integrate([&](double t) { return (ell - t) * u(t); }, ell - h, ell);
    if (n >= 8) {
        // spread over three cells so that mass and first moment are both kept:
        // x on the first cell, y on each of the next two (centres 1.5h, 2.5h, 3.5h)
        const double yl = (m1 - 1.5 * h * m0) / (3 * h), yr = (r1 - 1.5 * h * r0) / (3 * h);
        f.v[1] += m0 - 2 * yl;
        f.v[2] += yl;
        f.v[3] += yl;
        f.v[n - 2] += r0 - 2 * yr;
        f.v[n - 3] += yr;
        f.v[n - 4] += yr;
    } else {
        f.v[1] += m0;
        f.v[n - 2] += r0;
    }
    for (int j = 1; j + 1 < n; ++j) {
        double v = f.v[j] / h;
        if (pin > 0 && std::abs(v) < pin) v = v < 0 ? -pin : pin;
        f.v[j] = v;
    }
    return f;
}

// ---------------------------------------------------------------------------
// Moving-plane avoidance for piecewise-constant (A13, A23).

struct CellGenerator {
    double ell = 1.0;
    int n = 1;
    std::vector<double> a13, a23;
};

/// inf over cell j of |alpha(t) A13 + 2 beta(t) A23| for the plane span{e2, w(t)}, w(t) = L_t^{-1} v.
inline double plane_margin(const MovingBasis& mb, const Vec3& v, const CellGenerator& A, int j, int samples = 33) {
    const double h = A.ell / A.n;
    double m = std::numeric_limits<double>::infinity();
    for (int s = 0; s < samples; ++s) {
        const double t = h * (j + double(s) / (samples - 1));
        const Vec2 ab = plane_coefficients(mb.transport(v, t));
        m = std::min(m, std::abs(ab(0) * A.a13[j] + 2.0 * ab(1) * A.a23[j]));
    }
    return m;
}

inline double plane_alpha_min(const MovingBasis& mb, const Vec3& v, const CellGenerator& A, int j, int samples = 33) {
    const double h = A.ell / A.n;
    double m = std::numeric_limits<double>::infinity();
    for (int s = 0; s < samples; ++s) m = std::min(m, std::abs(plane_coefficients(mb.transport(v, h * (j + double(s) / (samples - 1))))(0)));
    return m;
}

/// Shifts interior cells so that every requested plane has margin >= scale / n.
/// planes[i] is applied on the cells where mask[j] has bit i set (all cells when mask is empty).
inline CellGenerator avoid_planes(const CellGenerator& A, const MovingBasis& mb, const std::vector<Vec3>& planes,
                                  const std::vector<unsigned>& mask = {}, double scale = 1.0) {
    CellGenerator out = A;
    const int n = A.n;
    const double target = scale / n;
    std::vector<double> r(planes.size());
    for (std::size_t i = 0; i < planes.size(); ++i) {
        r[i] = mb.min_plane_norm(planes[i]);
        if (!(r[i] > 0)) throw ValidationError("avoid_planes: plane coefficients vanish");
    }
    auto active = [&](int j, std::size_t i) { return mask.empty() || (mask[j] >> i) & 1u; };
    for (int pass = 0; pass < 4; ++pass) {
        bool changed = false;
        for (std::size_t i = 0; i < planes.size(); ++i) {
            for (int j = 1; j + 1 < n; ++j) {
                if (!active(j, i)) continue;
                if (plane_margin(mb, planes[i], out, j) >= target) continue;
                // the case shift; repeated when the cell is long compared with the variation of (alpha, beta)
                const bool shift13 = plane_alpha_min(mb, planes[i], out, j) >= 0.5 * r[i];
                const CellGenerator base = out;
                for (int k = 1; k <= 16; ++k) {
                    if (shift13) {
                        // along sign(A13), so that |A13| only grows
                        out = base;
                        out.a13[j] += (base.a13[j] < 0 ? -1.0 : 1.0) * k * 6.0 * scale / (r[i] * n);
                    } else {
                        CellGenerator hi = base, lo = base;
                        hi.a23[j] += k * 3.0 * scale / (r[i] * n);
                        lo.a23[j] -= k * 3.0 * scale / (r[i] * n);
                        const double mh = plane_margin(mb, planes[i], hi, j), ml = plane_margin(mb, planes[i], lo, j);
                        out = mh >= ml - 1e-14 ? hi : lo;
                    }
                    if (plane_margin(mb, planes[i], out, j) >= target) break;
                }
                changed = true;
            }
        }
        if (!changed) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Endpoint correction by 12 bumps in a window.

/// cos^4 bumps with unit integral, 6 knots in (a, b), for each of the two free generator entries.
struct BumpBasis {
    double a = 0.25, b = 0.75;
    static constexpr int kKnots = 6;

    double half_width() const { return (b - a) / (kKnots + 1); }
    double knot(int j) const { return a + (j + 1) * half_width(); }
    double value(int j, double t) const {
        const double hw = half_width(), u = (t - knot(j)) / hw;
        if (std::abs(u) >= 1) return 0.0;
        const double c = std::cos(0.5 * kPi * u);
        return c * c * c * c / (0.75 * hw);
    }
    double deriv(int j, double t) const {
        const double hw = half_width(), u = (t - knot(j)) / hw;
        if (std::abs(u) >= 1) return 0.0;
        const double c = std::cos(0.5 * kPi * u), s = std::sin(0.5 * kPi * u);
        return -4.0 * c * c * c * s * (0.5 * kPi / hw) / (0.75 * hw);
    }
    /// (delta a13, delta a23) and derivatives for coefficient vector x (first 6 for a13).
    Eigen::Vector4d eval(const VecX& x, double t) const {
        Eigen::Vector4d r = Eigen::Vector4d::Zero();
        if (x.size() == 0 || t <= a || t >= b) return r;
        for (int j = 0; j < kKnots; ++j) {
            const double v = value(j, t), d = deriv(j, t);
            r(0) += x(j) * v;
            r(1) += x(kKnots + j) * v;
            r(2) += x(j) * d;
            r(3) += x(kKnots + j) * d;
        }
        return r;
    }
    std::vector<double> breakpoints() const {
        std::vector<double> out;
        for (int j = 0; j <= kKnots + 1; ++j) out.push_back(a + j * half_width());
        return out;
    }
};

struct EndpointTarget {
    Mat3 R = Mat3::Identity();
    Vec3 gamma = Vec3::Zero();
};

using Vec6 = Eigen::Matrix<double, 6, 1>;

struct ShootingResult {
    VecX coeffs;
    double residual = 0.0;  ///< |R(l) - R_target|_F + |Gamma - Gamma_target|
    int iterations = 0;
};

namespace detail {

inline Vec6 endpoint_residual(const RotationPath& p, const EndpointTarget& tg) {
    Vec6 r;
    r.head<3>() = log_rotation(p.end() * tg.R.transpose());
    r.tail<3>() = p.gamma - tg.gamma;
    return r;
}
inline double endpoint_error(const RotationPath& p, const EndpointTarget& tg) {
    return (p.end() - tg.R).norm() + (p.gamma - tg.gamma).norm();
}

/// Gauss-Newton with minimum-norm steps from x0; solve(x) integrates the frame for coefficients x.
/// Throws SolverError when the Jacobian loses rank or the budget runs out.
inline ShootingResult gauss_newton(const std::function<RotationPath(const VecX&)>& solve, const EndpointTarget& tg,
                                   const VecX& x0, double tol, int max_iter) {
    ShootingResult res;
    res.coeffs = x0;
    RotationPath p = solve(res.coeffs);
    res.residual = endpoint_error(p, tg);
    const double fd = 1e-6;
    double mu = 0.0;
    while (res.residual > tol) {
        if (res.iterations >= max_iter) {
            std::ostringstream os;
            os << "endpoint correction did not reach " << tol << " in " << max_iter << " iterations (best residual "
               << res.residual << ")";
            throw SolverError(os.str());
        }
        ++res.iterations;
        const Vec6 r0 = endpoint_residual(p, tg);
        Eigen::Matrix<double, 6, Eigen::Dynamic> J(6, res.coeffs.size());
        for (int i = 0; i < res.coeffs.size(); ++i) {
            VecX xp = res.coeffs, xm = res.coeffs;
            xp(i) += fd;
            xm(i) -= fd;
            J.col(i) = (endpoint_residual(solve(xp), tg) - endpoint_residual(solve(xm), tg)) / (2 * fd);
        }
        Eigen::JacobiSVD<MatX> svd(J, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const VecX sv = svd.singularValues();
        if (sv(5) <= 1e-9 * std::max(1.0, sv(0))) {
            std::ostringstream os;
            os << "endpoint correction: Jacobian of the endpoint map is rank-deficient (singular values "
               << sv.transpose() << "); the generator is degenerate on the window";
            throw SolverError(os.str());
        }
        // Levenberg-Marquardt damping on the SVD step; mu adapts to the success of each trial
        const MatX& U = svd.matrixU();
        const MatX& V = svd.matrixV();
        const VecX ur = U.transpose() * r0;
        const double r0n = r0.norm();
        bool moved = false;
        for (int k = 0; k < 40; ++k) {
            VecX d(sv.size());
            for (int i = 0; i < sv.size(); ++i) d(i) = sv(i) / (sv(i) * sv(i) + mu) * ur(i);
            const VecX x = res.coeffs - V * d;
            RotationPath q = solve(x);
            const Vec6 rq = endpoint_residual(q, tg);
            if (rq.norm() < r0n) {
                res.coeffs = x;
                p = std::move(q);
                res.residual = endpoint_error(p, tg);
                mu = std::max(mu / 4, 1e-16);
                moved = true;
                break;
            }
            mu = std::max(mu * 8, 1e-12);
        }
        if (!moved) break;
    }
    if (res.residual > tol) {
        std::ostringstream os;
        os << "endpoint correction did not reach " << tol << " (stalled at residual " << res.residual << ")";
        throw SolverError(os.str());
    }
    return res;
}

/// Direct Gauss-Newton; on failure, continuation along the geodesic from the uncorrected endpoint to the target.
inline ShootingResult shoot(const std::function<RotationPath(const VecX&)>& solve, const EndpointTarget& tg, double tol,
                            int max_iter) {
    const VecX zero = VecX::Zero(2 * BumpBasis::kKnots);
    try {
        return gauss_newton(solve, tg, zero, tol, max_iter);
    } catch (const SolverError& e) {
        if (std::string(e.what()).find("rank-deficient") != std::string::npos) throw;
    }
    const RotationPath p0 = solve(zero);
    const Vec3 w = log_rotation(tg.R * p0.end().transpose());
    std::string last;
    for (int K : {8, 32}) {
        ShootingResult acc;
        acc.coeffs = zero;
        try {
            for (int k = 1; k <= K; ++k) {
                const double s = double(k) / K;
                const EndpointTarget sub{expm_skew(s * w) * p0.end(), p0.gamma + s * (tg.gamma - p0.gamma)};
                const auto r = gauss_newton(solve, sub, acc.coeffs, k == K ? tol : 1e-6, max_iter);
                acc.coeffs = r.coeffs;
                acc.residual = r.residual;
                acc.iterations += r.iterations;
            }
            return acc;
        } catch (const SolverError& e) {
            last = e.what();
        }
    }
    throw SolverError(last + " (also with continuation)");
}

}  // namespace detail

struct EndpointCorrection {
    SkewField A;
    BumpBasis basis;
    VecX coeffs;
    double coeff_norm = 0.0;
    double residual = 0.0;
    int iterations = 0;
};

/// A + sum of bumps in the window (A13, A23 only) matching R(l) and Gamma to tol.
inline EndpointCorrection endpoint_correct(const SkewField& A, const ReferenceCurve& ref, const EndpointTarget& target,
                                           double wa, double wb, int steps = 4096, double tol = 1e-8,
                                           int max_iter = 100) {
    if (!(0 < wa && wa < wb && wb < A.length)) throw ValidationError("endpoint_correct: window must lie inside (0, l)");
    if (!is_nondegenerate(A, ref, wa, wb))
        throw SolverError("endpoint correction: generator is degenerate on the window (Jacobian rank-deficient)");
    BumpBasis bb{wa, wb};
    auto corrected = [A, bb](const VecX& x) {
        return SkewField{A.length, [A, bb, x](double t) {
                             const Vec3 e = A(t);
                             const Eigen::Vector4d d = bb.eval(x, t);
                             return Vec3(e(0), e(1) + d(0), e(2) + d(1));
                         }};
    };
    std::vector<double> nodes = linspace(0.0, A.length, steps + 1);
    for (double b : bb.breakpoints()) nodes.push_back(b);
    std::sort(nodes.begin(), nodes.end());
    nodes.erase(std::unique(nodes.begin(), nodes.end(), [](double x, double y) { return std::abs(x - y) < 1e-13; }),
                nodes.end());
    const auto res = detail::shoot([&](const VecX& x) { return solve_frame(corrected(x), nodes); }, target, tol, max_iter);
    EndpointCorrection out;
    out.A = corrected(res.coeffs);
    out.basis = bb;
    out.coeffs = res.coeffs;
    out.coeff_norm = res.coeffs.norm();
    out.residual = res.residual;
    out.iterations = res.iterations;
    return out;
}

// ---------------------------------------------------------------------------
// Recovery fields M_n = lambda_n p_n (x) p_n.

struct RecoveryOptions {
    double theta = 0.5;   ///< transition width theta l / n^2
    double pin = 0.0;     ///< lower bound for |A13| on interior cells; 0 means max|M| / n
    bool correct = true;  ///< restore the endpoint data (only when boundary data are given)
    double window_lo = 0.25, window_hi = 0.75;  ///< correction window as fractions of l
    double tol = 1e-8;
    int max_iter = 100;
    double h_max = 0.0;  ///< frame step on smooth parts; 0 means l/512
};

struct RecoverySample {
    double lambda = 0, phi = 0, dlambda = 0, dphi = 0;
    double a13 = 0, a23 = 0, da13 = 0, da23 = 0;
    double k = 0;
    Vec2 p = Vec2::UnitX();  ///< physical unit direction
    Vec2 dp = Vec2::Zero();  ///< p' = (phi' + k) p_perp
    Mat2 M = Mat2::Zero();   ///< physical
    Mat2 MB = Mat2::Zero();  ///< components in B = (B'|N)
};

class RecoveryFields {
public:
    struct State {
        double lambda = 0, phi = 0;
    };

    int n = 0;
    double ell = 1.0;
    const ReferenceCurve* ref = nullptr;

    // Base description: piecewise (lambda, phi) with smooth transitions, or a sampled rank-one field.
    std::vector<double> bounds;    ///< state boundaries, size S + 1
    std::vector<State> states;     ///< size S
    std::vector<double> tl, tr;    ///< transition k between states k and k + 1 lives on [tl[k], tr[k]]
    std::vector<double> s_a13, s_a23;  ///< shortcut samples on the reference grid
    bool shortcut = false;
    bool zero = false;

    BumpBasis bumps;
    VecX coeffs;  ///< endpoint-correction coefficients (empty if none)

    // Diagnostics.
    double ctilde = 0.0;       ///< min |M^B_11| on I_n outside transitions
    double ctilde_all = 0.0;   ///< min |M^B_11| on all of I_n
    double c_infty = 0.0;      ///< max |m_i| over the laminate endpoints
    double correction_norm = 0.0;
    double endpoint_residual = 0.0;
    int iterations = 0;
    Vec3 v_plus = Vec3::Zero(), v_minus = Vec3::Zero();
    EndpointTarget target;

    double h_max() const { return h_max_ > 0 ? h_max_ : ell / 512.0; }
    void set_h_max(double h) { h_max_ = h; }

    RecoverySample at(double t) const {
        RecoverySample s;
        s.k = ref->k_at(t);
        if (zero) {
            fill(s, t);
            return s;
        }
        double l0, p0, dl0, dp0, a13, a23, da13, da23;
        base(t, l0, p0, dl0, dp0, a13, a23, da13, da23);
        const Eigen::Vector4d d = bumps.eval(coeffs, t);
        if (coeffs.size() && d.cwiseAbs().maxCoeff() > 0) {
            a13 += d(0);
            a23 += d(1);
            da13 += d(2);
            da23 += d(3);
            const double q = a13 * a13 + a23 * a23;
            s.lambda = q / a13;
            s.phi = std::atan(a23 / a13);
            s.dphi = (a13 * da23 - a23 * da13) / q;
            s.dlambda = (2.0 * (a13 * da13 + a23 * da23) * a13 - q * da13) / (a13 * a13);
        } else {
            s.lambda = l0;
            s.phi = p0;
            s.dlambda = dl0;
            s.dphi = dp0;
        }
        s.a13 = a13;
        s.a23 = a23;
        s.da13 = da13;
        s.da23 = da23;
        fill(s, t);
        return s;
    }

    Mat2 M(double t) const { return at(t).M; }
    double lambda(double t) const { return at(t).lambda; }
    Vec2 p(double t) const { return at(t).p; }

    SkewField generator() const {
        auto self = std::make_shared<RecoveryFields>(*this);
        return {ell, [self](double t) {
                    const auto s = self->at(t);
                    return Vec3(s.k, s.a13, s.a23);
                }};
    }

    /// Points where the fields are not smooth (or change character), including 0 and l.
    std::vector<double> breakpoints() const {
        std::vector<double> b{0.0, ell, ell / n, ell - ell / n};
        if (!zero && !shortcut) {
            b.insert(b.end(), bounds.begin(), bounds.end());
            b.insert(b.end(), tl.begin(), tl.end());
            b.insert(b.end(), tr.begin(), tr.end());
        }
        if (coeffs.size()) {
            const auto bb = bumps.breakpoints();
            b.insert(b.end(), bb.begin(), bb.end());
        }
        std::sort(b.begin(), b.end());
        b.erase(std::unique(b.begin(), b.end(), [](double x, double y) { return std::abs(x - y) < 1e-14; }), b.end());
        while (!b.empty() && b.back() > ell) b.pop_back();
        return b;
    }

    /// Frame nodes: 8 steps per transition, at most h_max elsewhere.
    std::vector<double> frame_nodes() const {
        const auto b = breakpoints();
        std::vector<double> nodes{b.front()};
        for (std::size_t i = 0; i + 1 < b.size(); ++i) {
            const double len = b[i + 1] - b[i];
            int m = std::max(1, int(std::ceil(len / h_max() - 1e-9)));
            if (in_transition(0.5 * (b[i] + b[i + 1]))) m = std::max(m, 8);
            for (int k = 1; k <= m; ++k) nodes.push_back(k == m ? b[i + 1] : b[i] + len * k / m);
        }
        return nodes;
    }

    /// int_0^l f dt by 15-point Gauss on every smooth piece (pieces no longer than h_max).
    double integrate(const std::function<double(double)>& f, double h = 0.0) const {
        const double hq = h > 0 ? h : 8.0 * h_max();
        const auto b = breakpoints();
        double sum = 0.0;
        for (std::size_t i = 0; i + 1 < b.size(); ++i) {
            const double len = b[i + 1] - b[i];
            const int m = std::max(1, int(std::ceil(len / hq - 1e-9)));
            for (int k = 0; k < m; ++k) {
                const double x0 = b[i] + len * k / m, x1 = b[i] + len * (k + 1) / m;
                sum += boost::math::quadrature::gauss<double, 15>::integrate(f, x0, x1);
            }
        }
        return sum;
    }

    bool in_transition(double t) const {
        if (zero || shortcut || tl.empty()) return false;
        auto it = std::upper_bound(tl.begin(), tl.end(), t);
        if (it == tl.begin()) return false;
        const std::size_t k = std::size_t(it - tl.begin()) - 1;
        return t < tr[k];
    }

    RotationPath solve() const { return solve_frame(generator(), frame_nodes()); }

private:
    double h_max_ = 0.0;

    void fill(RecoverySample& s, double t) const {
        const Mat2 D = ref->D_at(t);
        const Vec2 pb(std::cos(s.phi), std::sin(s.phi));
        s.p = D * pb;
        s.dp = (s.dphi + s.k) * perp(s.p);
        s.MB = s.lambda * pb * pb.transpose();
        s.M = s.lambda * s.p * s.p.transpose();
    }

    static void to_lambda_phi(double a, double b, double da, double db, double& l, double& p, double& dl,
                              double& dp) {
        const double q = a * a + b * b;
        l = q / a;
        p = std::atan(b / a);
        dp = (a * db - b * da) / q;
        dl = (2.0 * (a * da + b * db) * a - q * da) / (a * a);
    }

    /// Uncorrected fields at t as (lambda, phi) and as (a13, a23), with derivatives.
    void base(double t, double& l, double& p, double& dl, double& dp, double& a13, double& a23, double& da13,
              double& da23) const {
        if (shortcut) {
            const double h = ref->h();
            const int N = ref->size();
            const double x = std::clamp(t / h, 0.0, double(N - 1));
            const int i = std::min(int(x), N - 2);
            const double f = x - i;
            a13 = (1 - f) * s_a13[i] + f * s_a13[i + 1];
            a23 = (1 - f) * s_a23[i] + f * s_a23[i + 1];
            da13 = (s_a13[i + 1] - s_a13[i]) / h;
            da23 = (s_a23[i + 1] - s_a23[i]) / h;
            to_lambda_phi(a13, a23, da13, da23, l, p, dl, dp);
            return;
        }
        dl = dp = 0.0;
        auto it = std::upper_bound(tl.begin(), tl.end(), t);
        const State* st = &states[0];
        if (it != tl.begin()) {
            const std::size_t k = std::size_t(it - tl.begin()) - 1;
            st = &states[k + 1];
            if (t < tr[k]) {
                const double w = tr[k] - tl[k], x = (t - tl[k]) / w;
                const double S = smooth_step(x), dS = smooth_step_deriv(x) / w;
                const State &A = states[k], &B = states[k + 1];
                if ((A.lambda == 0.0) != (B.lambda == 0.0)) {
                    const bool up = A.lambda == 0.0;
                    const State& Z = up ? B : A;
                    const bool turning = up ? x < 0.5 : x >= 0.5;
                    if (turning) {
                        const double y = up ? 2 * x : 2 * x - 1;
                        const double S2 = smooth_step(y), dS2 = 2 * smooth_step_deriv(y) / w;
                        const double p0 = up ? A.phi : Z.phi, p1 = up ? Z.phi : B.phi;
                        l = dl = a13 = a23 = da13 = da23 = 0.0;
                        p = p0 + S2 * (p1 - p0);
                        dp = dS2 * (p1 - p0);
                        return;
                    }
                    const double y = up ? 2 * x - 1 : 2 * x;
                    double S2 = smooth_step(y), dS2 = 2 * smooth_step_deriv(y) / w;
                    if (!up) S2 = 1 - S2, dS2 = -dS2;
                    const double c = std::cos(Z.phi), sn = std::sin(Z.phi);
                    l = S2 * Z.lambda;
                    dl = dS2 * Z.lambda;
                    p = Z.phi;
                    dp = 0.0;
                    a13 = l * c * c;
                    a23 = l * c * sn;
                    da13 = dl * c * c;
                    da23 = dl * c * sn;
                    return;
                }
                if (A.lambda * B.lambda > 0) {
                    // same sign of A13: blend (a13, a23) linearly, which keeps their integrals
                    const double a0 = A.lambda * std::cos(A.phi) * std::cos(A.phi);
                    const double b0 = A.lambda * std::cos(A.phi) * std::sin(A.phi);
                    const double a1 = B.lambda * std::cos(B.phi) * std::cos(B.phi);
                    const double b1 = B.lambda * std::cos(B.phi) * std::sin(B.phi);
                    a13 = a0 + S * (a1 - a0);
                    a23 = b0 + S * (b1 - b0);
                    da13 = dS * (a1 - a0);
                    da23 = dS * (b1 - b0);
                    to_lambda_phi(a13, a23, da13, da23, l, p, dl, dp);
                    return;
                }
                l = A.lambda + S * (B.lambda - A.lambda);
                p = A.phi + S * (B.phi - A.phi);
                dl = dS * (B.lambda - A.lambda);
                dp = dS * (B.phi - A.phi);
                const double c = std::cos(p), sn = std::sin(p);
                a13 = l * c * c;
                a23 = l * c * sn;
                da13 = dl * c * c - 2.0 * l * c * sn * dp;
                da23 = dl * c * sn + l * std::cos(2 * p) * dp;
                return;
            }
        }
        l = st->lambda;
        p = st->phi;
        const double c = std::cos(p), sn = std::sin(p);
        a13 = l * c * c;
        a23 = l * c * sn;
        da13 = da23 = 0.0;
    }
};

namespace detail {

/// Zero-mean profiles on the interior cells: x and (3x^2 - 1)/2 in x = 2t/l - 1, discrete mean removed.
inline std::array<std::vector<double>, 2> cell_profiles(const CellField& f) {
    std::array<std::vector<double>, 2> P{std::vector<double>(f.n, 0.0), std::vector<double>(f.n, 0.0)};
    for (int q = 0; q < 2; ++q) {
        double mean = 0.0;
        for (int j = 1; j + 1 < f.n; ++j) {
            const double x = 2 * f.cell_mid(j) / f.ell - 1;
            P[q][j] = q == 0 ? x : 0.5 * (3 * x * x - 1);
            mean += P[q][j] / (f.n - 2);
        }
        for (int j = 1; j + 1 < f.n; ++j) P[q][j] -= mean;
    }
    return P;
}

/// Reweights the cell values by slowly varying zero-mean profiles so that the piecewise-constant generator
/// reaches the target translation. The changes are of the size of that defect, O(1/n^3), so the cell
/// averages and the energy are unaffected to the orders that matter; the window then only has to fix
/// what the laminate adds, which it can do with small coefficients.
inline void tune_translation(const ReferenceCurve& ref, const Vec3& target, CellField& A13, CellField& A23,
                             CellField& G) {
    const auto P = cell_profiles(A13);
    const int n = A13.n;
    double scale = 0.0;
    for (int j = 1; j + 1 < n; ++j) scale = std::max(scale, std::abs(A13.v[j]));
    using Vec4 = Eigen::Matrix<double, 4, 1>;
    // the reweighting keeps the integral of A13
    std::array<double, 2> wm{0.0, 0.0};
    double mass = 0.0;
    for (int j = 1; j + 1 < n; ++j) {
        mass += A13.v[j];
        for (int q = 0; q < 2; ++q) wm[q] += P[q][j] * A13.v[j];
    }
    for (int q = 0; q < 2; ++q) wm[q] = mass != 0.0 ? wm[q] / mass : 0.0;
    auto apply = [&](const Vec4& d, CellField& a, CellField& b, CellField& g) {
        for (int j = 1; j + 1 < n; ++j) {
            const double f = 1 + d(0) * (P[0][j] - wm[0]) + d(1) * (P[1][j] - wm[1]);
            a.v[j] = f * A13.v[j];
            g.v[j] = f * G.v[j];
            b.v[j] = f * A23.v[j] + scale * (d(2) * P[0][j] + d(3) * P[1][j]);
        }
    };
    auto residual = [&](const Vec4& d) {
        CellField a = A13, b = A23, g = G;
        apply(d, a, b, g);
        const SkewField S{A13.ell, [&ref, a, b](double t) { return Vec3(ref.k_at(t), a(t), b(t)); }};
        return Vec3(solve_frame(S, 32 * n).gamma - target);
    };
    Vec4 d = Vec4::Zero();
    Vec3 r = residual(d);
    for (int it = 0; it < 20 && r.norm() > 1e-14 * A13.ell; ++it) {
        Eigen::Matrix<double, 3, 4> J;
        for (int i = 0; i < 4; ++i) {
            Vec4 e = Vec4::Zero();
            e(i) = 1e-6;
            J.col(i) = (residual(d + e) - residual(d - e)) / 2e-6;
        }
        Vec4 x = d - J.jacobiSvd(Eigen::ComputeFullU | Eigen::ComputeFullV).solve(r);
        // keep every weight in [1/2, 3/2] so no sign flips
        auto weight_ok = [&](const Vec4& y) {
            for (int j = 1; j + 1 < n; ++j) {
                const double f = 1 + y(0) * (P[0][j] - wm[0]) + y(1) * (P[1][j] - wm[1]);
                if (f < 0.5 || f > 1.5) return false;
            }
            return true;
        };
        for (int k = 0; k < 30 && !weight_ok(x); ++k) x = 0.5 * (x + d);
        if (!weight_ok(x)) break;
        const Vec3 rx = residual(x);
        if (rx.norm() >= r.norm()) break;
        d = x;
        r = rx;
    }
    CellField a = A13, b = A23, g = G;
    apply(d, a, b, g);
    A13 = a, A23 = b, G = g;
}

/// (lambda, phi) of the rank-one matrix with first row (a13, a23) in B-components.
inline RecoveryFields::State rank_one_state(double a13, double a23) {
    if (a13 == 0.0) return {0.0, 0.0};
    return {(a13 * a13 + a23 * a23) / a13, std::atan(a23 / a13)};
}

/// Smallest |first component| over the laminate endpoints of the cells using direction v.
inline double direction_score(const RelaxedDensity& rd, const MovingBasis& mb, const Vec3& v,
                              const std::vector<Vec3>& cells, const std::vector<double>& tmid,
                              const std::vector<int>& use) {
    double score = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cells.size(); ++j) {
        if (!use[j]) continue;
        try {
            const auto s = split(rd, mb, tmid[j], cells[j], mb.transport(v, tmid[j]));
            score = std::min({score, std::abs(s.m1(0)), std::abs(s.m2(0))});
        } catch (const ValidationError&) {
            return 0.0;
        }
    }
    return score;
}

}  // namespace detail

/// Endpoint data R_A(l), Gamma_A of the generator of M (A13 = M^B_11, A23 = M^B_12).
inline EndpointTarget endpoint_of_field(const ReferenceCurve& ref, const SymField2& M, int steps = 4096) {
    SkewField A{ref.length(), [&ref, M](double t) {
                    const Mat2 MB = in_basis(M(t), ref.D_at(t));
                    return Vec3(ref.k_at(t), MB(0, 0), MB(0, 1));
                }};
    const auto p = solve_frame(A, steps);
    return {p.end(), p.gamma};
}

/// Recovery fields for M: pc approximation, plane avoidance, laminate split, smooth factorization, endpoint correction.
/// With bd null the ends are free: nothing is corrected, and endpoint_residual reports the distance to the
/// endpoint data of M itself. With bd the cell values are first reweighted towards the target translation
/// and the window correction then restores the data.
inline RecoveryFields build_recovery(const RelaxedDensity& rd, const ReferenceCurve& ref, const MovingBasis& mb,
                                     const SymField2& M, const BoundaryData* bd, int n,
                                     const RecoveryOptions& opt = {}) {
    if (n < 3) throw ValidationError("build_recovery: need n >= 3");
    const double ell = ref.length();
    RecoveryFields F;
    F.n = n;
    F.ell = ell;
    F.ref = &ref;
    F.set_h_max(opt.h_max);
    F.bumps = BumpBasis{opt.window_lo * ell, opt.window_hi * ell};
    F.target = bd ? EndpointTarget{bd->R_target(ref), bd->y_bar} : endpoint_of_field(ref, M);

    auto comps = [&](double t) {
        const Mat2 MB = in_basis(M(t), ref.D_at(t));
        return Vec3(MB(0, 0), MB(1, 1), MB(0, 1) + MB(1, 0));
    };

    // Zero field.
    double mmax = 0.0, dmax = 0.0, a13min = std::numeric_limits<double>::infinity(), mnorm = 0.0;
    for (int i = 0; i < ref.size(); ++i) {
        const Vec3 m = comps(ref.t(i));
        mmax = std::max(mmax, m.cwiseAbs().maxCoeff());
        dmax = std::max(dmax, std::abs(det_vec(m)));
        a13min = std::min(a13min, std::abs(m(0)));
        mnorm = std::max(mnorm, m.norm());
    }
    if (mmax == 0.0) {
        F.zero = true;
        F.ctilde = F.ctilde_all = 0.0;
        const auto p = F.solve();
        F.endpoint_residual = detail::endpoint_error(p, F.target);
        return F;
    }

    const double pin = opt.pin > 0 ? opt.pin : mmax / n;
    const Vec3 m0 = comps(0.0), ml = comps(ell);

    // Rank-one field with pinned A13 and p = B' at both ends: already a recovery field.
    const bool rank_one = dmax <= 1e-12 * std::max(1.0, mnorm * mnorm);
    if (rank_one && a13min >= pin && std::abs(m0(2)) <= 1e-12 && std::abs(ml(2)) <= 1e-12) {
        F.shortcut = true;
        for (int i = 0; i < ref.size(); ++i) {
            const Vec3 m = comps(ref.t(i));
            F.s_a13.push_back(m(0));
            F.s_a23.push_back(0.5 * m(2));
        }
        F.ctilde = F.ctilde_all = a13min;
    } else {
        auto A13 = pc_lumped([&](double t) { return comps(t)(0); }, ell, n, pin);
        auto A23 = pc_lumped([&](double t) { return 0.5 * comps(t)(2); }, ell, n);
        auto G = pc_lumped([&](double t) { return comps(t)(1); }, ell, n);
        if (bd && n >= 8) detail::tune_translation(ref, F.target.gamma, A13, A23, G);
        CellGenerator cg{ell, n, A13.v, A23.v};

        std::vector<Vec3> cells(n);
        std::vector<double> tmid(n);
        std::vector<int> sgn(n, 0);
        for (int j = 1; j + 1 < n; ++j) {
            tmid[j] = A13.cell_mid(j);
            // a cell that was rank-one stays rank-one: gamma follows the pinned A13
            const Vec3 orig = comps(A13.cell_left(j));
            const bool r1 = std::abs(det_vec(orig)) <= 1e-12 * std::max(1.0, orig.squaredNorm());
            cells[j] = Vec3(cg.a13[j], r1 ? cg.a23[j] * cg.a23[j] / cg.a13[j] : G.v[j], 2 * cg.a23[j]);
            const double d = det_vec(cells[j]);
            sgn[j] = r1 ? 0 : (d > 0 ? 1 : -1);
        }

        // One kernel direction per sign for the whole field.
        auto choose = [&](int sign) -> Vec3 {
            std::vector<int> use(n, 0);
            bool any = false;
            for (int j = 1; j + 1 < n; ++j)
                if (sgn[j] == sign) use[j] = 1, any = true;
            const auto& V = rd.kernel(sign);
            if (!any) return V.front();
            Vec3 best = V.front();
            double bs = -1.0;
            for (const auto& v : V) {
                const double s = detail::direction_score(rd, mb, v, cells, tmid, use);
                if (s > bs + 1e-12) bs = s, best = v;
            }
            return best;
        };
        F.v_plus = choose(+1);
        F.v_minus = choose(-1);

        // Plane avoidance for the plane each cell will be split along.
        std::vector<unsigned> mask(n, 0u);
        for (int j = 1; j + 1 < n; ++j) mask[j] = sgn[j] > 0 ? 1u : (sgn[j] < 0 ? 2u : 0u);
        cg = avoid_planes(cg, mb, {F.v_plus, F.v_minus}, mask, mmax);

        std::vector<RecoveryFields::State> st;
        std::vector<double> bnd{0.0};
        auto push = [&](RecoveryFields::State s, double right) {
            if (!st.empty() && std::abs(st.back().lambda - s.lambda) < 1e-15 && std::abs(st.back().phi - s.phi) < 1e-15) {
                bnd.back() = right;
                return;
            }
            st.push_back(s);
            bnd.push_back(right);
        };
        const double hc = ell / n;
        push({0.0, 0.0}, hc);
        double cmin = std::numeric_limits<double>::infinity(), cinf = 0.0;
        for (int j = 1; j + 1 < n; ++j) {
            const double t0 = j * hc, t1 = (j + 1) * hc;
            Vec3 m(cg.a13[j], cells[j](1), 2 * cg.a23[j]);
            if (sgn[j] == 0) m(1) = cg.a23[j] * cg.a23[j] / cg.a13[j];
            const double d = det_vec(m);
            if (sgn[j] == 0 || std::abs(d) <= 1e-14 * std::max(1.0, m.squaredNorm())) {
                push(detail::rank_one_state(m(0), 0.5 * m(2)), t1);
                cmin = std::min(cmin, std::abs(m(0)));
                cinf = std::max(cinf, m.norm());
                continue;
            }
            const Vec3 v = mb.transport(d > 0 ? F.v_plus : F.v_minus, tmid[j]);
            const auto sp = split(rd, mb, tmid[j], m, v, true);
            // m1 | m2 | m1, symmetric so that the rotation defect of a cell is third order in its length
            const auto s1 = detail::rank_one_state(sp.m1(0), 0.5 * sp.m1(2));
            push(s1, t0 + 0.5 * sp.lambda * hc);
            push(detail::rank_one_state(sp.m2(0), 0.5 * sp.m2(2)), t1 - 0.5 * sp.lambda * hc);
            push(s1, t1);
            cmin = std::min({cmin, std::abs(sp.m1(0)), std::abs(sp.m2(0))});
            cinf = std::max({cinf, sp.m1.norm(), sp.m2.norm()});
        }
        push({0.0, 0.0}, ell);
        F.states = st;
        F.bounds = bnd;
        F.ctilde = cmin;
        F.c_infty = cinf;

        const double wbase = opt.theta * ell / (double(n) * n);
        const std::size_t S = st.size();
        for (std::size_t k = 0; k + 1 < S; ++k) {
            const double b = bnd[k + 1];
            const double w = std::min({wbase, 0.5 * (bnd[k + 1] - bnd[k]), 0.5 * (bnd[k + 2] - bnd[k + 1])});
            // a ramp to or from zero turns p first and then scales lambda on a stretch of width w/2
            // centred on b, so the integral of the generator matches the sharp jump
            if (st[k].lambda == 0.0 && st[k + 1].lambda != 0.0) {
                F.tl.push_back(b - 0.75 * w);
                F.tr.push_back(b + 0.25 * w);
            } else if (st[k + 1].lambda == 0.0 && st[k].lambda != 0.0) {
                F.tl.push_back(b - 0.25 * w);
                F.tr.push_back(b + 0.75 * w);
            } else {
                F.tl.push_back(b - 0.5 * w);
                F.tr.push_back(b + 0.5 * w);
            }
        }
    }

    // Endpoint correction.
    {
        const auto p = F.solve();
        F.endpoint_residual = detail::endpoint_error(p, F.target);
    }
    if (bd && opt.correct && F.endpoint_residual > opt.tol) {
        const SkewField A0 = F.generator();
        if (!is_nondegenerate(A0, ref, F.bumps.a, F.bumps.b))
            throw SolverError("build_recovery: generator is degenerate on the correction window");
        auto solve = [&F](const VecX& x) {
            RecoveryFields G = F;
            G.coeffs = x;
            return G.solve();
        };
        const auto res = detail::shoot(solve, F.target, opt.tol, opt.max_iter);
        F.coeffs = res.coeffs;
        F.correction_norm = res.coeffs.norm();
        F.endpoint_residual = res.residual;
        F.iterations = res.iterations;
    }

    // Pinning over I_n, sampled on the frame nodes and transition midpoints.
    if (!F.zero) {
        double cpl = std::numeric_limits<double>::infinity(), call = cpl;
        const double a = ell / n, b = ell - ell / n;
        auto probe = [&](double t) {
            if (t <= a || t >= b) return;
            const double v = std::abs(F.at(t).a13);
            call = std::min(call, v);
            if (!F.in_transition(t)) cpl = std::min(cpl, v);
        };
        const auto nodes = F.frame_nodes();
        for (std::size_t i = 0; i + 1 < nodes.size(); ++i) {
            probe(nodes[i]);
            probe(0.5 * (nodes[i] + nodes[i + 1]));
        }
        F.ctilde = cpl;
        F.ctilde_all = call;
    }
    return F;
}

/// int (M_n - M)_{ab} phi dt for each test function phi; rows are (11, 12, 22).
inline std::vector<Vec3> weak_residuals(const RecoveryFields& F, const SymField2& M,
                                        const std::vector<std::function<double(double)>>& tests) {
    std::vector<Vec3> out;
    for (const auto& phi : tests) {
        Vec3 r;
        for (int c = 0; c < 3; ++c) {
            const int i = c == 2 ? 1 : 0, j = c == 0 ? 0 : 1;
            r(c) = F.integrate([&](double t) { return (F.M(t)(i, j) - M(t)(i, j)) * phi(t); });
        }
        out.push_back(r);
    }
    return out;
}

/// The four standard test functions 1, t, t^2, sin(2 pi t / l).
inline std::vector<std::function<double(double)>> standard_tests(double ell) {
    return {[](double) { return 1.0; }, [](double t) { return t; }, [](double t) { return t * t; },
            [ell](double t) { return std::sin(2 * kPi * t / ell); }};
}

}  // namespace ribbon

