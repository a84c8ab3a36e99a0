#pragma once

#include "ribbon/frames.hpp"
#include "ribbon/geometry.hpp"
#include "ribbon/relaxation.hpp"

#include <fstream>
#include <memory>
#include <sstream>

namespace ribbon {

using Mat32 = Eigen::Matrix<double, 3, 2>;

// ---------------------------------------------------------------------------
// Finite-difference stencils.

namespace detail {

/// Weights for the m-th derivative at z from samples at x (Fornberg's recursion).
inline std::vector<double> fd_weights(const std::vector<double>& x, double z, int m) {
    const int n = int(x.size());
    std::vector<std::vector<double>> c(n, std::vector<double>(m + 1, 0.0));
    double c1 = 1.0, c4 = x[0] - z;
    c[0][0] = 1.0;
    for (int i = 1; i < n; ++i) {
        const int mn = std::min(i, m);
        double c2 = 1.0;
        const double c5 = c4;
        c4 = x[i] - z;
        for (int j = 0; j < i; ++j) {
            const double c3 = x[i] - x[j];
            c2 *= c3;
            if (j == i - 1) {
                for (int k = mn; k >= 1; --k) c[i][k] = c1 * (k * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for (int k = mn; k >= 1; --k) c[j][k] = (c4 * c[j][k] - k * c[j][k - 1]) / c3;
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i) w[i] = c[i][m];
    return w;
}

/// Index window and unit-spacing weights for derivative m at index i of an n-point line (4th order).
struct Stencil {
    int first = 0;
    std::vector<double> w;
};

inline Stencil stencil(int i, int n, int m) {
    const int central = 5;
    const int size = (m == 1 || (i >= 2 && i + 2 < n)) ? central : 6;
    if (n < size) throw ValidationError("finite differences need at least 6 samples per direction");
    Stencil s;
    s.first = std::clamp(i - 2, 0, n - size);
    std::vector<double> x(size);
    for (int k = 0; k < size; ++k) x[k] = double(s.first + k);
    s.w = fd_weights(x, double(i), m);
    return s;
}

/// First and second partial derivatives of a sampled map on a tensor grid.
template <class V>
struct JetT {
    V d1, d2, d11, d12, d22;
};
using Jet = JetT<Vec3>;

template <class Fetch>
auto jet(const Fetch& f, int i, int j, int n1, int n2, double h1, double h2) {
    using V = std::decay_t<decltype(f(0, 0))>;
    const Stencil a1 = stencil(i, n1, 1), a2 = stencil(i, n1, 2);
    const Stencil b1 = stencil(j, n2, 1), b2 = stencil(j, n2, 2);
    JetT<V> J;
    J.d1.setZero();
    J.d2.setZero();
    J.d11.setZero();
    J.d12.setZero();
    J.d22.setZero();
    for (std::size_t k = 0; k < a1.w.size(); ++k) J.d1 += a1.w[k] * f(a1.first + int(k), j);
    for (std::size_t k = 0; k < a2.w.size(); ++k) J.d11 += a2.w[k] * f(a2.first + int(k), j);
    for (std::size_t k = 0; k < b1.w.size(); ++k) J.d2 += b1.w[k] * f(i, b1.first + int(k));
    for (std::size_t k = 0; k < b2.w.size(); ++k) J.d22 += b2.w[k] * f(i, b2.first + int(k));
    for (std::size_t k = 0; k < a1.w.size(); ++k)
        for (std::size_t l = 0; l < b1.w.size(); ++l)
            J.d12 += a1.w[k] * b1.w[l] * f(a1.first + int(k), b1.first + int(l));
    J.d1 /= h1;
    J.d2 /= h2;
    J.d11 /= h1 * h1;
    J.d22 /= h2 * h2;
    J.d12 /= h1 * h2;
    return J;
}

/// Chart Jacobian from the same stencils, so that maps affine in the plane are differentiated exactly.
template <class Fetch>
Mat2 jacobian(const Fetch& f, int i, int j, int n1, int n2, double h1, double h2) {
    const Stencil a1 = stencil(i, n1, 1), b1 = stencil(j, n2, 1);
    Mat2 J = Mat2::Zero();
    for (std::size_t k = 0; k < a1.w.size(); ++k) J.col(0) += a1.w[k] * f(a1.first + int(k), j);
    for (std::size_t k = 0; k < b1.w.size(); ++k) J.col(1) += b1.w[k] * f(i, b1.first + int(k));
    J.col(0) /= h1;
    J.col(1) /= h2;
    return J;
}

inline double max_abs(const Mat2& A) { return A.cwiseAbs().maxCoeff(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Ruling directions and chart width.

/// Unit ruling direction p(t) (physical) with its derivative; hints mark places where p' may peak.
struct Ruling {
    double ell = 1.0;
    std::function<std::pair<Vec2, Vec2>(double)> eval;
    std::vector<double> hints;
};

inline Ruling ruling_of(const RecoveryFields& F) {
    auto self = std::make_shared<RecoveryFields>(F);
    Ruling r;
    r.ell = F.ell;
    r.eval = [self](double t) {
        const auto s = self->at(t);
        return std::make_pair(s.p, s.dp);
    };
    const auto nodes = F.frame_nodes();
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        r.hints.push_back(nodes[i]);
        if (i + 1 < nodes.size()) r.hints.push_back(0.5 * (nodes[i] + nodes[i + 1]));
    }
    return r;
}

/// p = D(t) (cos a, sin a): a fixed angle a against B'.
inline Ruling constant_ruling(const ReferenceCurve& ref, double angle) {
    const ReferenceCurve* r = &ref;
    Ruling out;
    out.ell = ref.length();
    out.eval = [r, angle](double t) {
        const Vec2 p = r->D_at(t) * Vec2(std::cos(angle), std::sin(angle));
        return std::make_pair(p, Vec2(r->k_at(t) * perp(p)));
    };
    return out;
}

struct ChartWidth {
    double eta = 0.0;
    double c0 = 0.0;       ///< min p.B'
    double dp_max = 0.0;   ///< max |p'|
    double det_min = 0.0;  ///< min Jacobian determinant of Phi on the check grid
    int halvings = 0;
};

inline Mat2 chart_jacobian(const ReferenceCurve& ref, const Vec2& p, const Vec2& dp, double t, double s) {
    Mat2 J;
    J.col(0) = ref.T_at(t) + s * perp(dp);
    J.col(1) = perp(p);
    return J;
}

/// Half-width eta of the ruled chart Phi(t, s) = B(t) + s p_perp(t).
inline ChartWidth chart_width(const ReferenceCurve& ref, const Ruling& ruling, int samples = 2048) {
    std::vector<double> ts = linspace(0.0, ref.length(), samples + 1);
    for (double h : ruling.hints)
        if (h >= 0 && h <= ref.length()) ts.push_back(h);
    ChartWidth cw;
    cw.c0 = std::numeric_limits<double>::infinity();
    double kmax = 0.0;
    std::vector<std::pair<Vec2, Vec2>> pv(ts.size());
    for (std::size_t i = 0; i < ts.size(); ++i) {
        pv[i] = ruling.eval(ts[i]);
        cw.c0 = std::min(cw.c0, pv[i].first.dot(ref.T_at(ts[i])));
        cw.dp_max = std::max(cw.dp_max, pv[i].second.norm());
        kmax = std::max(kmax, std::abs(ref.k_at(ts[i])));
    }
    if (!(cw.c0 > 0)) {
        std::ostringstream os;
        os << "ruling direction must satisfy p.B' > 0 (min p.B' = " << cw.c0 << ")";
        throw ValidationError(os.str());
    }
    cw.eta = 0.5 * cw.c0 / std::max(1.0, cw.dp_max + kmax);
    for (; cw.halvings <= 10; ++cw.halvings) {
        cw.det_min = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < ts.size(); ++i)
            for (double s : linspace(-cw.eta, cw.eta, 9))
                cw.det_min = std::min(
                    cw.det_min, chart_jacobian(ref, pv[i].first, pv[i].second, ts[i], s).determinant());
        if (cw.det_min >= 0.25 * cw.c0) return cw;
        if (cw.halvings == 10) break;
        cw.eta *= 0.5;
    }
    throw ValidationError("chart_width: Jacobian of the ruled chart stays below c0/4 after 10 halvings");
}

// ---------------------------------------------------------------------------
// Surfaces on the (t, s) chart.

/// A map u(t, s) sampled on [0, l] x [-eta, eta] together with the chart Phi used to read it on the plane.
struct RuledSurface {
    double ell = 1.0, eta = 0.5;
    int nt = 0, ns = 0;
    double ht = 0.0, hs = 0.0;
    std::vector<double> t, s;
    std::function<Vec3(double, double)> u;
    std::function<Vec2(double, double)> Phi;
    std::function<Mat2(double, double)> dPhi;
    std::vector<Vec3> U;  ///< U[i * ns + j] = u(t_i, s_j)

    // Affine continuation past the short sides (recovery surfaces are affine near both ends).
    bool has_ends = false;
    Mat32 F0 = Mat32::Zero(), F1 = Mat32::Zero();
    Vec2 X0 = Vec2::Zero(), X1 = Vec2::Zero();
    Vec3 u0 = Vec3::Zero(), u1 = Vec3::Zero();

    const Vec3& at(int i, int j) const { return U[std::size_t(i) * ns + j]; }
    int center() const { return ns / 2; }

    /// Chart coordinates of a plane point by Newton's method, from the guess (t, s).
    Vec2 invert(const Vec2& X, Vec2 ts) const {
        for (int it = 0; it < 50; ++it) {
            const Vec2 r = Phi(ts(0), ts(1)) - X;
            if (r.norm() < 1e-15 * (1.0 + X.norm())) break;
            const Vec2 step = dPhi(ts(0), ts(1)).lu().solve(r);
            ts -= step;
            if (step.norm() < 1e-15 * (1.0 + ts.norm())) break;
        }
        if ((Phi(ts(0), ts(1)) - X).norm() > 1e-10 * (1.0 + X.norm()))
            throw SolverError("ruled chart inversion did not converge");
        return ts;
    }

    /// u at a plane point; ts returns the chart coordinates (t clamped into [0, l] on the affine ends).
    Vec3 value_at(const Vec2& X, Vec2& ts) const {
        ts = invert(X, ts);
        if (has_ends && ts(0) < 0) return u0 + F0 * (X - X0);
        if (has_ends && ts(0) > ell) return u1 + F1 * (X - X1);
        return u(ts(0), ts(1));
    }

    void sample() {
        U.resize(std::size_t(nt) * ns);
        for (int i = 0; i < nt; ++i)
            for (int j = 0; j < ns; ++j) U[std::size_t(i) * ns + j] = u(t[i], s[j]);
    }
};

struct SurfaceOptions {
    double h = 1.0 / 512.0;  ///< target grid step in both chart directions
    double eta = 0.0;        ///< chart half-width; 0 means chart_width
};

inline void make_grid(RuledSurface& S, double h) {
    S.nt = std::max(6, int(std::ceil(S.ell / h - 1e-9))) + 1;
    int half = std::max(3, int(std::ceil(S.eta / h - 1e-9)));
    S.ns = 2 * half + 1;
    S.t = linspace(0.0, S.ell, S.nt);
    S.s = linspace(-S.eta, S.eta, S.ns);
    S.s[half] = 0.0;
    S.ht = S.ell / (S.nt - 1);
    S.hs = 2.0 * S.eta / (S.ns - 1);
}

/// Generic surface from explicit maps (used for fixtures such as non-developable patches).
inline RuledSurface make_surface(double ell, double eta, double h, std::function<Vec3(double, double)> u,
                                 std::function<Vec2(double, double)> Phi, std::function<Mat2(double, double)> dPhi) {
    RuledSurface S;
    S.ell = ell;
    S.eta = eta;
    S.u = std::move(u);
    S.Phi = std::move(Phi);
    S.dPhi = std::move(dPhi);
    make_grid(S, h);
    S.sample();
    return S;
}

/// u(Phi(t, s)) = beta(t) + s F(t) p_perp(t), F = R^T (e1|e2) D^T, beta' = d1.
inline RuledSurface build_isometry(const ReferenceCurve& ref, const RotationPath& path, const Ruling& ruling,
                                   const SurfaceOptions& opt = {}) {
    RuledSurface S;
    S.ell = ref.length();
    S.eta = opt.eta > 0 ? opt.eta : chart_width(ref, ruling).eta;
    const ReferenceCurve* r = &ref;
    auto P = std::make_shared<RotationPath>(path);
    auto eval = ruling.eval;
    auto grad = [r, P](double t) -> Mat32 {
        const Mat3 Rt = P->R_at(t).transpose();
        return Rt.leftCols<2>() * r->D_at(t).transpose();
    };
    S.Phi = [r, eval](double t, double s) { return Vec2(r->B_at(t) + s * perp(eval(t).first)); };
    S.dPhi = [r, eval](double t, double s) {
        const auto [p, dp] = eval(t);
        return chart_jacobian(*r, p, dp, t, s);
    };
    S.u = [P, eval, grad](double t, double s) { return Vec3(P->y_at(t) + s * grad(t) * perp(eval(t).first)); };
    make_grid(S, opt.h);
    // one frame evaluation per ruling
    S.U.resize(std::size_t(S.nt) * S.ns);
    for (int i = 0; i < S.nt; ++i) {
        const double t = S.t[i];
        const Vec3 beta = P->y_at(t);
        const Vec3 w = grad(t) * perp(eval(t).first);
        for (int j = 0; j < S.ns; ++j) S.U[std::size_t(i) * S.ns + j] = beta + S.s[j] * w;
    }
    S.has_ends = true;
    S.F0 = grad(0.0);
    S.F1 = grad(S.ell);
    S.X0 = ref.B_at(0.0);
    S.X1 = ref.B_at(S.ell);
    S.u0 = P->y_at(0.0);
    S.u1 = P->y_at(S.ell);
    return S;
}

/// Convenience: the surface of a recovery field (frames solved, ruling from p).
inline RuledSurface build_isometry(const RecoveryFields& F, const SurfaceOptions& opt = {}) {
    return build_isometry(*F.ref, F.solve(), ruling_of(F), opt);
}

// ---------------------------------------------------------------------------
// Fundamental forms.

struct FormsAt {
    Mat2 I = Mat2::Identity(), II = Mat2::Zero();
    Mat32 grad = Mat32::Zero();
    Vec3 nu = Vec3::UnitZ();
};

/// Forms at one point from chart derivatives: grad u = (u_t|u_s) dPhi^{-1}, II = dPhi^{-T} (nu.d2u) dPhi^{-1}.
inline FormsAt forms_from_jet(const detail::Jet& J, const Mat2& dPhi) {
    FormsAt f;
    const Vec3 n = J.d1.cross(J.d2);
    if (!(n.norm() > 1e-12)) throw ValidationError("fundamental_forms: degenerate tangents");
    f.nu = n.normalized();
    Mat32 G;
    G.col(0) = J.d1;
    G.col(1) = J.d2;
    const Mat2 Ji = dPhi.inverse();
    f.grad = G * Ji;
    f.I = f.grad.transpose() * f.grad;
    Mat2 H;
    H << f.nu.dot(J.d11), f.nu.dot(J.d12), f.nu.dot(J.d12), f.nu.dot(J.d22);
    f.II = Ji.transpose() * H * Ji;
    return f;
}

struct SurfaceForms {
    int nt = 0, ns = 0;
    std::vector<Mat2> I, II;
    std::vector<Vec3> nu;
    std::vector<double> isometry, detPi;  ///< pointwise residuals
    double isometry_max = 0.0, detPi_max = 0.0;

    const Mat2& second(int i, int j) const { return II[std::size_t(i) * ns + j]; }
};

/// 4th-order finite differences on the chart grid, mapped to the plane through the differenced chart.
inline SurfaceForms fundamental_forms(const RuledSurface& S) {
    SurfaceForms out;
    out.nt = S.nt;
    out.ns = S.ns;
    const std::size_t N = std::size_t(S.nt) * S.ns;
    out.I.resize(N);
    out.II.resize(N);
    out.nu.resize(N);
    out.isometry.resize(N);
    out.detPi.resize(N);
    std::vector<Vec2> P(N);
    for (int i = 0; i < S.nt; ++i)
        for (int j = 0; j < S.ns; ++j) P[std::size_t(i) * S.ns + j] = S.Phi(S.t[i], S.s[j]);
    auto fetch = [&S](int i, int j) -> const Vec3& { return S.at(i, j); };
    auto fetchP = [&](int i, int j) -> const Vec2& { return P[std::size_t(i) * S.ns + j]; };
    for (int i = 0; i < S.nt; ++i)
        for (int j = 0; j < S.ns; ++j) {
            const auto J = detail::jet(fetch, i, j, S.nt, S.ns, S.ht, S.hs);
            const auto f = forms_from_jet(J, detail::jacobian(fetchP, i, j, S.nt, S.ns, S.ht, S.hs));
            const std::size_t k = std::size_t(i) * S.ns + j;
            out.I[k] = f.I;
            out.II[k] = f.II;
            out.nu[k] = f.nu;
            out.isometry[k] = detail::max_abs(f.I - Mat2::Identity());
            out.detPi[k] = std::abs(f.II.determinant());
            out.isometry_max = std::max(out.isometry_max, out.isometry[k]);
            out.detPi_max = std::max(out.detPi_max, out.detPi[k]);
        }
    return out;
}

/// Forms at an arbitrary chart point by local differences with steps (ht, hs); one-sided near t = 0, l.
inline FormsAt forms_at(const RuledSurface& S, double t, double s, double ht = 0.0, double hs = 0.0) {
    ht = ht > 0 ? ht : S.ht;
    hs = hs > 0 ? hs : S.hs;
    // local 7 x 5 window; position of (t, s) inside it
    int i0 = 3;
    if (t - 3 * ht < 0) i0 = 0;
    else if (t + 3 * ht > S.ell) i0 = 6;
    const double tb = t - i0 * ht;
    auto fetch = [&](int i, int j) { return S.u(tb + i * ht, s + (j - 2) * hs); };
    auto fetchP = [&](int i, int j) { return S.Phi(tb + i * ht, s + (j - 2) * hs); };
    const auto J = detail::jet(fetch, i0, 2, 7, 6, ht, hs);
    return forms_from_jet(J, detail::jacobian(fetchP, i0, 2, 7, 6, ht, hs));
}

struct SurfaceReport {
    double isometry = 0.0;      ///< max |I - Id|
    double detPi = 0.0;         ///< max |det II|
    double centerline = 0.0;    ///< max |II(t, 0) - M(t)| (0 if no target)
    double straightness = 0.0;  ///< max deviation of each ruling from a straight line
    double beta = 0.0;          ///< max |u(t, 0) - beta(t)| (0 if no path)
    bool pass = false;
};

/// Largest deviation of the sampled rulings t = const from affine functions of s.
inline double ruling_straightness(const RuledSurface& S) {
    double dev = 0.0;
    for (int i = 0; i < S.nt; ++i) {
        const Vec3 a = S.at(i, 0), b = S.at(i, S.ns - 1);
        for (int j = 0; j < S.ns; ++j) {
            const double th = (S.s[j] + S.eta) / (2.0 * S.eta);
            dev = std::max(dev, (S.at(i, j) - ((1 - th) * a + th * b)).norm());
        }
    }
    return dev;
}

/// Invariant report; M is the physical centerline target (may be empty).
inline SurfaceReport check_surface(const RuledSurface& S, const SurfaceForms& f,
                                   const std::function<Mat2(double)>& M = {}, const RotationPath* path = nullptr,
                                   double tol = 1e-6) {
    SurfaceReport r;
    r.isometry = f.isometry_max;
    r.detPi = f.detPi_max;
    r.straightness = ruling_straightness(S);
    const int jc = S.center();
    if (M)
        for (int i = 0; i < S.nt; ++i)
            r.centerline = std::max(r.centerline, detail::max_abs(f.second(i, jc) - M(S.t[i])));
    if (path)
        for (int i = 0; i < S.nt; ++i) r.beta = std::max(r.beta, (S.at(i, jc) - path->y_at(S.t[i])).norm());
    r.pass = r.isometry <= tol && r.detPi <= tol;
    return r;
}

// ---------------------------------------------------------------------------
// The strip of width eps and the scaled second fundamental form.

struct RescaledForms {
    double eps = 0.0;
    int n1 = 0, n2 = 0;
    double h1 = 0.0, h2 = 0.0;
    std::vector<double> x1, x2;
    std::vector<Vec3> Y;     ///< y(x1_i, x2_j), index i * n2 + j
    std::vector<Vec2> ts;    ///< chart coordinates of chi_eps(x)
    std::vector<Mat2> Pi;    ///< Pi_{y, eps}
    std::vector<Mat2> metric;  ///< (grad_eps y)^T grad_eps y, grad_eps y = (d1 y | d2 y / eps)
    double s_max = 0.0;      ///< max |s| used
    double consistency = -1.0;  ///< max |D^{-T} Pi D^{-1} - II_u o chi_eps|; -1 if not computed

    const Mat2& at(int i, int j) const { return Pi[std::size_t(i) * n2 + j]; }
};

/// y = u o chi_eps on a grid of Omega = (0, l) x (-1/2, 1/2) and its scaled second fundamental form.
inline RescaledForms rescaled_forms(const RuledSurface& S, const StripChart& strip, double h = 0.0,
                                    bool consistency = false) {
    const double eps = strip.eps();
    h = h > 0 ? h : S.ht;
    RescaledForms R;
    R.eps = eps;
    const int m1 = std::max(6, int(std::ceil(S.ell / h - 1e-9)));
    R.n1 = m1 + (m1 % 2) + 1;  // even number of intervals for Simpson
    R.n2 = 2 * std::max(4, int(std::ceil(0.5 * eps / h - 1e-9))) + 1;
    R.x1 = linspace(0.0, S.ell, R.n1);
    R.x2 = linspace(-0.5, 0.5, R.n2);
    R.h1 = S.ell / (R.n1 - 1);
    R.h2 = 1.0 / (R.n2 - 1);
    const std::size_t N = std::size_t(R.n1) * R.n2;
    R.Y.resize(N);
    R.ts.resize(N);
    for (int i = 0; i < R.n1; ++i) {
        Vec2 guess(R.x1[i], 0.0);
        const int jc = R.n2 / 2;
        // march outwards from the centerline so every Newton solve starts close
        for (int dir : {+1, -1}) {
            Vec2 g = guess;
            for (int j = jc; j >= 0 && j < R.n2; j += dir) {
                const Vec2 X = strip.chi(R.x1[i], R.x2[j]);
                Vec2 ts = g;
                try {
                    R.Y[std::size_t(i) * R.n2 + j] = S.value_at(X, ts);
                } catch (const SolverError&) {
                    std::ostringstream os;
                    os << "strip of width eps = " << eps << " does not fit the ruled chart (eta = " << S.eta
                       << ", reached |s| = " << R.s_max << " at x1 = " << R.x1[i] << "); use eps below about "
                       << eps * S.eta / std::max(R.s_max, S.eta);
                    throw ValidationError(os.str());
                }
                R.ts[std::size_t(i) * R.n2 + j] = ts;
                R.s_max = std::max(R.s_max, std::abs(ts(1)));
                g = ts;
            }
        }
    }
    if (R.s_max > S.eta * (1 + 1e-9)) {
        std::ostringstream os;
        os << "strip of width eps = " << eps << " leaves the ruled chart (|s| reaches " << R.s_max
           << " > eta = " << S.eta << "); use eps <= " << eps * S.eta / R.s_max;
        throw ValidationError(os.str());
    }
    R.Pi.resize(N);
    R.metric.resize(N);
    auto fetch = [&R](int i, int j) -> const Vec3& { return R.Y[std::size_t(i) * R.n2 + j]; };
    double worst = 0.0;
    for (int i = 0; i < R.n1; ++i)
        for (int j = 0; j < R.n2; ++j) {
            const auto J = detail::jet(fetch, i, j, R.n1, R.n2, R.h1, R.h2);
            const Vec3 nu = J.d1.cross(J.d2).normalized();
            Mat2 P;
            P << nu.dot(J.d11), nu.dot(J.d12) / eps, nu.dot(J.d12) / eps, nu.dot(J.d22) / (eps * eps);
            const std::size_t k = std::size_t(i) * R.n2 + j;
            R.Pi[k] = P;
            Mat32 G;
            G.col(0) = J.d1;
            G.col(1) = J.d2 / eps;
            R.metric[k] = G.transpose() * G;
            if (consistency) {
                const Mat2 Di = strip.D(R.x1[i], R.x2[j]).inverse();
                const Vec2 ts = R.ts[k];
                const double tc = std::clamp(ts(0), 0.0, S.ell);
                const Mat2 IIu = (tc == ts(0)) ? forms_at(S, ts(0), ts(1)).II : Mat2::Zero().eval();
                worst = std::max(worst, detail::max_abs(Di.transpose() * P * Di - IIu));
            }
        }
    if (consistency) R.consistency = worst;
    return R;
}

// ---------------------------------------------------------------------------
// Boundary traces.

struct BoundaryReport {
    double left = 0.0;   ///< max |grad u - (e1|e2)| along x1 = 0
    double right = 0.0;  ///< max |grad u - (d1_bar|d2_bar)| along x1 = l
    double start = 0.0;  ///< |y(0, 0)|
    double end = 0.0;    ///< |y(l, 0) - y_bar|
    bool pass = false;
    double max() const { return std::max({left, right, start, end}); }
};

/// grad u at a plane point, from one-sided chart differences near the short sides.
inline Mat32 gradient_at(const RuledSurface& S, const Vec2& X, Vec2 ts, double step) {
    ts = S.invert(X, ts);
    if (S.has_ends && ts(0) < 0) return S.F0;
    if (S.has_ends && ts(0) > S.ell) return S.F1;
    const double t = ts(0), s = ts(1);
    std::vector<double> x;
    double z;
    if (t - 2 * step < 0) {
        x = {0, 1, 2, 3, 4};
        z = 0;
    } else if (t + 2 * step > S.ell) {
        x = {-4, -3, -2, -1, 0};
        z = 0;
    } else {
        x = {-2, -1, 0, 1, 2};
        z = 0;
    }
    const auto w = detail::fd_weights(x, z, 1);
    const auto ws = detail::fd_weights({-2, -1, 0, 1, 2}, 0, 1);
    Vec3 ut = Vec3::Zero(), us = Vec3::Zero();
    Mat2 J = Mat2::Zero();
    for (int k = 0; k < 5; ++k) {
        ut += w[k] * S.u(t + x[k] * step, s);
        us += ws[k] * S.u(t, s + (k - 2) * step);
        J.col(0) += w[k] * S.Phi(t + x[k] * step, s);
        J.col(1) += ws[k] * S.Phi(t, s + (k - 2) * step);
    }
    Mat32 G;
    G.col(0) = ut;
    G.col(1) = us;
    return G * J.inverse();
}

inline BoundaryReport check_boundary_conditions(const RuledSurface& S, const StripChart& strip,
                                                const BoundaryData& bd, double tol = 1e-8, int samples = 33) {
    BoundaryReport r;
    const double step = 1e-4 * S.ell;
    Mat32 E = Mat32::Zero();
    E(0, 0) = E(1, 1) = 1.0;
    Mat32 Dbar;
    Dbar.col(0) = bd.d_bar(0);
    Dbar.col(1) = bd.d_bar(1);
    for (double x2 : linspace(-0.5, 0.5, samples)) {
        const Vec2 XL = strip.chi(0.0, x2), XR = strip.chi(S.ell, x2);
        const Mat32 GL = gradient_at(S, XL, Vec2(0.0, 0.0), step);
        const Mat32 GR = gradient_at(S, XR, Vec2(S.ell, 0.0), step);
        r.left = std::max(r.left, (GL - E).cwiseAbs().maxCoeff());
        r.right = std::max(r.right, (GR - Dbar).cwiseAbs().maxCoeff());
    }
    Vec2 g(0.0, 0.0);
    r.start = S.value_at(strip.chi(0.0, 0.0), g).norm();
    g = Vec2(S.ell, 0.0);
    r.end = (S.value_at(strip.chi(S.ell, 0.0), g) - bd.y_bar).norm();
    r.pass = r.max() <= tol;
    return r;
}

// ---------------------------------------------------------------------------
// Mesh export.

inline void write_obj(const RuledSurface& S, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write " + path);
    os.precision(17);
    os << "# ribbon surface " << S.nt << " x " << S.ns << "\n";
    for (const auto& p : S.U) os << "v " << p(0) << ' ' << p(1) << ' ' << p(2) << "\n";
    for (int i = 0; i + 1 < S.nt; ++i)
        for (int j = 0; j + 1 < S.ns; ++j) {
            const int a = i * S.ns + j + 1;  // OBJ indices start at 1
            os << "f " << a << ' ' << a + S.ns << ' ' << a + S.ns + 1 << ' ' << a + 1 << "\n";
        }
}

/// Legacy ASCII structured grid; cell data are corner averages of the pointwise residuals.
inline void write_vtk(const RuledSurface& S, const SurfaceForms& f, const std::string& path,
                      const std::string& stamp = "") {
    std::ofstream os(path);
    if (!os) throw ValidationError("cannot write " + path);
    os.precision(17);
    os << "# vtk DataFile Version 3.0\n";
    os << "ribbon surface" << (stamp.empty() ? "" : " " + stamp) << "\n";
    os << "ASCII\nDATASET STRUCTURED_GRID\n";
    os << "DIMENSIONS " << S.ns << ' ' << S.nt << " 1\n";
    os << "POINTS " << S.U.size() << " double\n";
    for (const auto& p : S.U) os << p(0) << ' ' << p(1) << ' ' << p(2) << "\n";
    const int cells = (S.nt - 1) * (S.ns - 1);
    os << "CELL_DATA " << cells << "\n";
    for (const auto& [name, v] : {std::make_pair("isometry_residual", &f.isometry), std::make_pair("detPi", &f.detPi)}) {
        os << "SCALARS " << name << " double 1\nLOOKUP_TABLE default\n";
        for (int i = 0; i + 1 < S.nt; ++i)
            for (int j = 0; j + 1 < S.ns; ++j) {
                auto q = [&](int a, int b) { return (*v)[std::size_t(a) * S.ns + b]; };
                os << 0.25 * (q(i, j) + q(i + 1, j) + q(i, j + 1) + q(i + 1, j + 1)) << "\n";
            }
    }
}

}  // namespace ribbon
