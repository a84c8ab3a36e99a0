#pragma once

#include "common.hpp"
#include "geometry.hpp"

#include <algorithm>
#include <sstream>

namespace ribbon {

// ---------------------------------------------------------------------------
// so(3) helpers

inline Mat3 hat(const Vec3& a) {
    Mat3 W;
    W << 0.0, -a(2), a(1), a(2), 0.0, -a(0), -a(1), a(0), 0.0;
    return W;
}

inline Vec3 vee(const Mat3& W) { return Vec3(W(2, 1), W(0, 2), W(1, 0)); }

/// Rodrigues formula; Taylor series below 1e-4 rad.
inline Mat3 expm_skew(const Vec3& w) {
    const double th2 = w.squaredNorm();
    const double th = std::sqrt(th2);
    double a, b;
    if (th < 1e-4) {
        a = 1.0 - th2 / 6.0 + th2 * th2 / 120.0;
        b = 0.5 - th2 / 24.0 + th2 * th2 / 720.0;
    } else {
        a = std::sin(th) / th;
        b = (1.0 - std::cos(th)) / th2;
    }
    const Mat3 W = hat(w);
    return Mat3::Identity() + a * W + b * W * W;
}

/// Right Jacobian of exp: exp(w + d) = exp(w) exp(J_r(w) d) + O(|d|^2).
inline Mat3 right_jacobian(const Vec3& w) {
    const double th2 = w.squaredNorm();
    const double th = std::sqrt(th2);
    double b, c;
    if (th < 1e-4) {
        b = 0.5 - th2 / 24.0 + th2 * th2 / 720.0;
        c = 1.0 / 6.0 - th2 / 120.0 + th2 * th2 / 5040.0;
    } else {
        b = (1.0 - std::cos(th)) / th2;
        c = (th - std::sin(th)) / (th2 * th);
    }
    const Mat3 W = hat(w);
    return Mat3::Identity() - b * W + c * W * W;
}

/// Rotation vector of R (inverse of expm_skew for angles below pi).
inline Vec3 log_rotation(const Mat3& R) {
    const double c = std::clamp(0.5 * (R.trace() - 1.0), -1.0, 1.0);
    const double th = std::acos(c);
    const Vec3 v = vee(R - R.transpose());
    if (th < 1e-6) return 0.5 * v;
    if (kPi - th < 1e-6) {
        // near pi: axis from the symmetric part
        const Mat3 S = 0.5 * (R + Mat3::Identity());
        int j = 0;
        S.diagonal().maxCoeff(&j);
        Vec3 axis = S.col(j).normalized();
        if (axis.dot(v) < 0) axis = -axis;
        return th * axis;
    }
    return th / (2.0 * std::sin(th)) * v;
}

/// Vector form of the generator A = [[0,k,a13],[-k,0,a23],[-a13,-a23,0]].
inline Vec3 generator_vee(double k, double a13, double a23) { return Vec3(-a23, a13, -k); }
inline Mat3 generator(double k, double a13, double a23) { return hat(generator_vee(k, a13, a23)); }

inline Mat3 embed(const Mat2& B) {
    Mat3 F = Mat3::Identity();
    F.topLeftCorner<2, 2>() = B;
    return F;
}

// ---------------------------------------------------------------------------

/// Skew generator field: fixed A12 = k and free entries A13, A23, evaluated at any t.
struct SkewField {
    double length = 1.0;
    std::function<Vec3(double)> eval;  ///< (k, a13, a23)

    Vec3 operator()(double t) const { return eval(t); }
    Vec3 vee_at(double t) const {
        const Vec3 e = eval(t);
        return generator_vee(e(0), e(1), e(2));
    }

    static SkewField constant(double ell, double k, double a13, double a23) {
        return {ell, [=](double) { return Vec3(k, a13, a23); }};
    }

    /// Piecewise-linear nodal a13, a23 on the reference grid, k from the reference curve.
    static SkewField from_samples(const ReferenceCurve& ref, std::vector<double> a13, std::vector<double> a23) {
        if (int(a13.size()) != ref.size() || int(a23.size()) != ref.size())
            throw ValidationError("generator samples do not match the reference grid");
        const double h = ref.h();
        const int n = ref.size();
        const ReferenceCurve* r = &ref;
        auto lerp = [h, n](const std::vector<double>& v, double t) {
            double x = std::clamp(t / h, 0.0, double(n - 1));
            int i = std::min(int(x), n - 2);
            double f = x - i;
            return (1.0 - f) * v[i] + f * v[i + 1];
        };
        return {ref.length(), [=](double t) { return Vec3(r->k_at(t), lerp(a13, t), lerp(a23, t)); }};
    }
};

/// R(t) solving R' = A R, R(0) = I, at the given nodes, with Gamma = int R^T e1.
struct RotationPath {
    SkewField A;
    std::vector<double> t;
    std::vector<Mat3> R;
    std::vector<Vec3> y;  ///< cumulative int_0^t R^T e1
    Vec3 gamma = Vec3::Zero();

    const Mat3& end() const { return R.back(); }

    /// R at an arbitrary time, by one partial Magnus step from the preceding node.
    Mat3 R_at(double s) const {
        const int i = node_before(s);
        return magnus_step(A, t[i], s - t[i]) * R[i];
    }
    /// int_0^s R^T e1.
    Vec3 y_at(double s) const {
        const int i = node_before(s);
        const double h = s - t[i];
        if (h == 0.0) return y[i];
        const Mat3 Rs = magnus_step(A, t[i], h) * R[i];
        return y[i] + segment_integral(A, t[i], s, R[i], Rs);
    }

    int node_before(double s) const {
        auto it = std::upper_bound(t.begin(), t.end(), s);
        int i = int(it - t.begin()) - 1;
        return std::clamp(i, 0, int(t.size()) - 2);
    }

    /// exp of the 4th-order two-point Gauss Magnus generator over [t0, t0 + h].
    static Mat3 magnus_step(const SkewField& A, double t0, double h) {
        if (h == 0.0) return Mat3::Identity();
        static const double c = std::sqrt(3.0) / 6.0;
        const Vec3 a1 = A.vee_at(t0 + (0.5 - c) * h);
        const Vec3 a2 = A.vee_at(t0 + (0.5 + c) * h);
        const Vec3 w = 0.5 * h * (a1 + a2) + (std::sqrt(3.0) / 12.0) * h * h * a2.cross(a1);
        return expm_skew(w);
    }

    /// Endpoint-corrected trapezoid for int R^T e1 over one step (4th order).
    static Vec3 segment_integral(const SkewField& A, double ta, double tb, const Mat3& Ra, const Mat3& Rb) {
        const double h = tb - ta;
        const Vec3 fa = Ra.transpose().col(0), fb = Rb.transpose().col(0);
        const Vec3 dfa = -Ra.transpose() * hat(A.vee_at(ta)).col(0);
        const Vec3 dfb = -Rb.transpose() * hat(A.vee_at(tb)).col(0);
        return 0.5 * h * (fa + fb) + h * h / 12.0 * (dfa - dfb);
    }
};

inline RotationPath solve_frame(const SkewField& A, std::vector<double> nodes) {
    if (nodes.size() < 2) throw ValidationError("solve_frame: need at least two nodes");
    RotationPath p;
    p.A = A;
    p.t = std::move(nodes);
    const int n = int(p.t.size());
    p.R.resize(n);
    p.y.resize(n);
    p.R[0] = Mat3::Identity();
    p.y[0] = Vec3::Zero();
    for (int i = 0; i + 1 < n; ++i) {
        const double h = p.t[i + 1] - p.t[i];
        p.R[i + 1] = RotationPath::magnus_step(A, p.t[i], h) * p.R[i];
        p.y[i + 1] = p.y[i] + RotationPath::segment_integral(A, p.t[i], p.t[i + 1], p.R[i], p.R[i + 1]);
    }
    p.gamma = p.y.back();
    return p;
}

/// Uniform nodes: `intervals` steps on [0, length].
inline RotationPath solve_frame(const SkewField& A, int intervals) {
    return solve_frame(A, linspace(0.0, A.length, intervals + 1));
}

inline Vec3 gamma_endpoint(const RotationPath& path) { return path.gamma; }

inline double orthogonality_drift(const RotationPath& path) {
    double e = 0.0;
    for (const auto& R : path.R) e = std::max(e, (R.transpose() * R - Mat3::Identity()).norm());
    return e;
}

// ---------------------------------------------------------------------------

/// Affine boundary data: y(l) = y_bar and R_bar^T = (d1bar | d2bar | d3bar).
struct BoundaryData {
    Vec3 y_bar = Vec3::Zero();
    Mat3 R_bar = Mat3::Identity();
    std::string warning;

    Vec3 d_bar(int i) const { return R_bar.transpose().col(i); }

    /// R_A(l) required by admissibility: R_A^T(l) = R_bar^T (B'(l)|N(l)|e3).
    Mat3 R_target(const ReferenceCurve& ref) const {
        return (R_bar.transpose() * embed(ref.D_at(ref.length()))).transpose();
    }

    void validate(const ReferenceCurve& ref) const {
        if ((R_bar.transpose() * R_bar - Mat3::Identity()).norm() > 1e-9 || R_bar.determinant() < 0)
            throw ValidationError("boundary data: R_bar is not a rotation");
        if (y_bar.norm() > ref.length() * (1 + 1e-12))
            throw ValidationError("boundary data: |y_bar| exceeds the strip length");
    }

    /// True unless (y_bar, R_bar) are the end data of the undeformed strip, y_bar = chi(l, 0) and R_bar = I.
    /// On the flat rectangle this is the condition y_bar != chi(l, 0) or R_bar^T != (D1|D2|e3)(l).
    bool nondegenerate(const ReferenceCurve& ref, double tol = 1e-12) const {
        const Vec3 end = lift(ref.B_at(ref.length()));
        return (y_bar - end).norm() > tol || (R_bar - Mat3::Identity()).norm() > tol;
    }

    /// End data of the undeformed strip.
    static BoundaryData trivial(const ReferenceCurve& ref) {
        BoundaryData bd;
        bd.y_bar = lift(ref.B_at(ref.length()));
        bd.R_bar = Mat3::Identity();
        return bd;
    }
};

/// Half-twist gluing of the rectangle: y_bar = 0, d1bar = e1, d2bar = -e2.
inline BoundaryData moebius_preset(const ReferenceCurve& ref) {
    BoundaryData bd;
    bd.y_bar = Vec3::Zero();
    Mat3 Rt;
    Rt.col(0) = Vec3::UnitX();
    Rt.col(1) = -Vec3::UnitY();
    Rt.col(2) = Rt.col(0).cross(Rt.col(1));
    bd.R_bar = Rt.transpose();
    if (ref.kind() != CurveSpec::Kind::Flat)
        bd.warning = "moebius preset is defined for the flat rectangle; reference curve is not flat";
    return bd;
}

struct AdmissibilityReport {
    double k_residual = 0.0;
    double rotation_residual = 0.0;
    double translation_residual = 0.0;
    bool pass = false;
};

inline AdmissibilityReport is_admissible(const SkewField& A, const RotationPath& path, const ReferenceCurve& ref,
                                         const BoundaryData& bd, double tol) {
    AdmissibilityReport r;
    for (int i = 0; i < ref.size(); ++i) r.k_residual = std::max(r.k_residual, std::abs(A(ref.t(i))(0) - ref.k(i)));
    r.rotation_residual = (path.end() - bd.R_target(ref)).norm();
    r.translation_residual = (path.gamma - bd.y_bar).norm();
    r.pass = r.k_residual <= tol && r.rotation_residual <= tol && r.translation_residual <= tol;
    return r;
}

inline AdmissibilityReport is_admissible(const SkewField& A, const ReferenceCurve& ref, const BoundaryData& bd,
                                         double tol, int substeps = 4) {
    return is_admissible(A, solve_frame(A, (ref.size() - 1) * substeps), ref, bd, tol);
}

/// True iff {|a13| > 1e-12} u {|a23| > 1e-12} meets the window in more than one grid cell.
inline bool is_nondegenerate(const SkewField& A, const ReferenceCurve& ref, double a, double b) {
    const double h = ref.h();
    const int m = std::max(2, int(std::ceil((b - a) / h)) * 4);
    const double dt = (b - a) / m;
    double measure = 0.0;
    for (int j = 0; j < m; ++j) {
        const Vec3 e = A(a + (j + 0.5) * dt);
        if (std::abs(e(1)) > 1e-12 || std::abs(e(2)) > 1e-12) measure += dt;
    }
    return measure > h * (1 + 1e-9);
}

// ---------------------------------------------------------------------------

struct FramedCurve {
    std::vector<double> t;
    std::vector<Vec3> y, d1, d2, d3;
    std::vector<double> mu, tau;
    RotationPath path;
};

/// Framed curve from (mu, tau) on the reference grid; the flag selects the sign of d2 relative to d3 ^ d1.
inline FramedCurve framed_curve_from(const std::vector<double>& mu, const std::vector<double>& tau,
                                     const ReferenceCurve& ref, int substeps = 4, int sign = +1) {
    // With the tubular chart D = (B'|N), so M^B = [[mu, tau], [tau, gamma]] and A13 = mu, A23 = tau.
    const SkewField A = SkewField::from_samples(ref, mu, tau);
    FramedCurve fc;
    fc.path = solve_frame(A, (ref.size() - 1) * substeps);
    fc.t = ref.grid();
    fc.mu = mu;
    fc.tau = tau;
    const int n = ref.size();
    fc.y.resize(n);
    fc.d1.resize(n);
    fc.d2.resize(n);
    fc.d3.resize(n);
    for (int i = 0; i < n; ++i) {
        const Mat3& R = fc.path.R[i * substeps];
        const Mat2 D = ref.D(i);
        const double D12 = D.col(0).dot(D.col(1));
        const double alpha = std::sqrt(std::max(0.0, D.col(1).squaredNorm() - D12 * D12));
        fc.d1[i] = R.transpose().col(0);
        const Vec3 d3hat = R.transpose().col(2);
        fc.d2[i] = D12 * fc.d1[i] + double(sign) * alpha * d3hat.cross(fc.d1[i]);
        const Vec3 c = fc.d1[i].cross(fc.d2[i]);
        if (c.norm() < 1e-12) {
            std::ostringstream os;
            os << "frame collapse: |d1 ^ d2| < 1e-12 at t = " << fc.t[i];
            throw SolverError(os.str());
        }
        fc.d3[i] = c.normalized();
        fc.y[i] = fc.path.y[i * substeps];
    }
    return fc;
}

/// Boundary data met by a framed curve: y_bar = y(l) and R_bar with R_target = R(l).
inline BoundaryData end_data(const FramedCurve& fc, const ReferenceCurve& ref) {
    BoundaryData bd;
    bd.y_bar = fc.path.gamma;
    bd.R_bar = embed(ref.D_at(ref.length())) * fc.path.end();
    return bd;
}

struct MembershipReport {
    double tangent = 0.0;      ///< |y' - d1|
    double normal = 0.0;       ///< |d3 - d1^d2/|d1^d2||
    double metric = 0.0;       ///< |d_a . d_b - D_a . D_b|
    double curvature = 0.0;    ///< |d1' . (d3 ^ d1) - k|
    double start = 0.0;        ///< y(0) and d_i(0) = D_i(0)
    double end_translation = 0.0;
    double end_rotation = 0.0;
    bool pass = false;
};

inline MembershipReport check_A0_membership(const FramedCurve& fc, const ReferenceCurve& ref,
                                            const BoundaryData& bd, double tol) {
    if (int(fc.t.size()) != ref.size()) throw ValidationError("framed curve grid does not match reference grid");
    MembershipReport r;
    const double h = ref.h();
    const auto yp = diff4(fc.y, h);
    const auto d1p = diff4(fc.d1, h);
    const int n = ref.size();
    for (int i = 0; i < n; ++i) {
        const Mat2 D = ref.D(i);
        r.tangent = std::max(r.tangent, (yp[i] - fc.d1[i]).norm());
        const Vec3 c = fc.d1[i].cross(fc.d2[i]);
        r.normal = std::max(r.normal, (fc.d3[i] - c / c.norm()).norm());
        const Vec3* d[2] = {&fc.d1[i], &fc.d2[i]};
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                r.metric = std::max(r.metric, std::abs(d[a]->dot(*d[b]) - D.col(a).dot(D.col(b))));
        r.curvature = std::max(r.curvature, std::abs(d1p[i].dot(fc.d3[i].cross(fc.d1[i])) - ref.k(i)));
    }
    const Mat3 F0 = embed(ref.D(0));
    Mat3 start;
    start << fc.d1[0], fc.d2[0], fc.d3[0];
    r.start = fc.y[0].norm() + (start - F0).norm();
    r.end_translation = (fc.y[n - 1] - bd.y_bar).norm();
    Eigen::Matrix<double, 3, 2> got, want;
    got << fc.d1[n - 1], fc.d2[n - 1];
    want = bd.R_bar.transpose().leftCols<2>() * ref.D(n - 1);
    r.end_rotation = (got - want).norm();
    r.pass = r.tangent <= tol && r.normal <= tol && r.metric <= tol && r.curvature <= tol && r.start <= tol &&
             r.end_translation <= tol && r.end_rotation <= tol;
    return r;
}

}  // namespace ribbon
