#pragma once

#include "common.hpp"

#include <math.h>  // boost 1.74 pchip calls unqualified isnan

#include <boost/math/interpolators/pchip.hpp>
#include <boost/math/quadrature/gauss.hpp>
#include <unsupported/Eigen/Splines>

#include <algorithm>
#include <memory>
#include <sstream>

namespace ribbon {

struct CurveSpec {
    enum class Kind { Flat, Arc, Spline };
    Kind kind = Kind::Flat;
    double length = 1.0;  // ignored for splines (length comes from the control polygon)
    double radius = 1.0;  // arcs only
    std::vector<Vec2> points;  // spline control points
    int grid = 257;
    double chart_bound = 1.0;  // declared upper bound on the strip width

    static CurveSpec flat(double ell, int grid = 257) {
        CurveSpec s;
        s.kind = Kind::Flat;
        s.length = ell;
        s.grid = grid;
        return s;
    }
    static CurveSpec arc(double radius, double ell, int grid = 257) {
        CurveSpec s;
        s.kind = Kind::Arc;
        s.radius = radius;
        s.length = ell;
        s.grid = grid;
        return s;
    }
    static CurveSpec spline(std::vector<Vec2> pts, int grid = 257) {
        CurveSpec s;
        s.kind = Kind::Spline;
        s.points = std::move(pts);
        s.grid = grid;
        return s;
    }
};

namespace detail {

/// C² cubic interpolating spline (quadratic for three points) through control points, re-parametrized by arc length.
class ArcLengthSpline {
public:
    using Spline = Eigen::Spline<double, 2, Eigen::Dynamic>;

    explicit ArcLengthSpline(const std::vector<Vec2>& pts) {
        if (pts.size() < 3) throw ValidationError("spline curve needs at least 3 control points");
        Eigen::MatrixXd P(2, pts.size());
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (i > 0 && (pts[i] - pts[i - 1]).norm() < 1e-12) {
                std::ostringstream os;
                os << "degenerate spline: control points " << i - 1 << " and " << i << " coincide";
                throw ValidationError(os.str());
            }
            P.col(i) = pts[i];
        }
        Eigen::RowVectorXd knots;
        Eigen::ChordLengths(P, knots);
        spline_ = Eigen::SplineFitting<Spline>::Interpolate(P, std::min<int>(3, int(pts.size()) - 1), knots);

        // Rigid motion so that the curve starts at the origin with unit tangent e1.
        origin_ = point(0.0);
        Vec2 d0 = raw_derivs(0.0, 1).col(1);
        if (d0.norm() < 1e-10) throw ValidationError("degenerate spline: vanishing tangent at t=0");
        d0.normalize();
        rot_ << d0.x(), d0.y(), -d0.y(), d0.x();

        // Cumulative arc length on a fine parameter grid.
        const int m = 4096;
        std::vector<double> u(m + 1), s(m + 1);
        s[0] = 0.0;
        u[0] = 0.0;
        for (int j = 1; j <= m; ++j) {
            u[j] = double(j) / m;
            s[j] = s[j - 1] + seg_length(u[j - 1], u[j]);
            const double sp = speed(u[j]);
            if (sp < 1e-10) {
                std::ostringstream os;
                os << "degenerate spline: |d chi/dx1| vanishes near arc length " << s[j];
                throw ValidationError(os.str());
            }
        }
        length_ = s[m];
        u_tab_ = u;
        s_tab_ = s;
        std::vector<double> ss = s, uu = u;
        inverse_ = std::make_shared<boost::math::interpolators::pchip<std::vector<double>>>(std::move(ss),
                                                                                          std::move(uu));
    }

    double length() const { return length_; }

    /// Parameter u(t) solving s(u) = t; pchip guess polished by Newton.
    double param(double t) const {
        t = std::clamp(t, 0.0, length_);
        double u = std::clamp((*inverse_)(t), 0.0, 1.0);
        for (int it = 0; it < 8; ++it) {
            const double r = arclen(u) - t;
            if (std::abs(r) < 1e-15 * std::max(1.0, length_)) break;
            u = std::clamp(u - r / speed(u), 0.0, 1.0);
        }
        return u;
    }

    Vec2 B(double t) const { return rot_ * (point(param(t)) - origin_); }
    Vec2 T(double t) const {
        const auto d = raw_derivs(param(t), 1);
        return rot_ * d.col(1).normalized();
    }
    double k(double t) const {
        const auto d = raw_derivs(param(t), 2);
        const Vec2 c1 = d.col(1), c2 = d.col(2);
        return cross2(c1, c2) / std::pow(c1.norm(), 3);
    }

private:
    Vec2 point(double u) const { return spline_(u); }
    Eigen::Matrix<double, 2, Eigen::Dynamic> raw_derivs(double u, int order) const {
        return spline_.derivatives(u, order);
    }
    double speed(double u) const { return raw_derivs(u, 1).col(1).norm(); }
    double seg_length(double a, double b) const {
        // intervals are at most 1/4096 of the parameter range: a fixed 20-point rule is exact to roundoff
        if (!(b > a)) return 0.0;
        auto f = [this](double u) { return speed(u); };
        return boost::math::quadrature::gauss<double, 20>::integrate(f, a, b);
    }
    double arclen(double u) const {
        const int m = int(u_tab_.size()) - 1;
        int j = std::clamp(int(std::floor(u * m)), 0, m - 1);
        return s_tab_[j] + seg_length(u_tab_[j], u);
    }

    Spline spline_;
    Vec2 origin_ = Vec2::Zero();
    Mat2 rot_ = Mat2::Identity();
    double length_ = 0.0;
    std::vector<double> u_tab_, s_tab_;
    std::shared_ptr<boost::math::interpolators::pchip<std::vector<double>>> inverse_;
};

}  // namespace detail

/// Planar reference midline B(t), arc-length parametrized, with the tubular chart
/// chi(x1, x2) = B(x1) + x2 N(x1). Immutable after construction.
class ReferenceCurve {
public:
    static ReferenceCurve build(const CurveSpec& spec) {
        ReferenceCurve c;
        c.spec_ = spec;
        if (!is_dyadic_grid(spec.grid))
            throw ValidationError("grid size must be 2^p + 1 with p >= 1, got " + std::to_string(spec.grid));
        switch (spec.kind) {
        case CurveSpec::Kind::Flat:
            if (!(spec.length > 0)) throw ValidationError("curve length must be positive");
            c.length_ = spec.length;
            break;
        case CurveSpec::Kind::Arc:
            if (!(spec.length > 0)) throw ValidationError("curve length must be positive");
            if (!(spec.radius > 0)) throw ValidationError("arc radius must be positive");
            if (spec.length >= 2 * kPi * spec.radius) {
                std::ostringstream os;
                os << "circular arc is not injective: length " << spec.length << " closes the circle at t = "
                   << 2 * kPi * spec.radius;
                throw ValidationError(os.str());
            }
            c.length_ = spec.length;
            break;
        case CurveSpec::Kind::Spline:
            c.spline_ = std::make_shared<detail::ArcLengthSpline>(spec.points);
            c.length_ = c.spline_->length();
            break;
        }
        const int n = spec.grid;
        c.t_ = linspace(0.0, c.length_, n);
        c.B_.resize(n);
        c.T_.resize(n);
        c.N_.resize(n);
        c.k_.resize(n);
        for (int i = 0; i < n; ++i) {
            c.B_[i] = c.B_at(c.t_[i]);
            c.T_[i] = c.T_at(c.t_[i]);
            c.N_[i] = perp(c.T_[i]);
            c.k_[i] = c.k_at(c.t_[i]);
        }
        if (spec.kind == CurveSpec::Kind::Spline) c.check_injective();
        c.kmax_ = 0.0;
        for (double k : c.k_) c.kmax_ = std::max(c.kmax_, std::abs(k));
        c.eps_max_ = spec.chart_bound;
        if (c.kmax_ > 0) c.eps_max_ = std::min(c.eps_max_, 0.5 / c.kmax_);
        const double worst = 0.5 * c.eps_max_ * c.kmax_;
        c.c_ = std::min(1.0 - worst, 1.0 / (1.0 + worst));
        return c;
    }

    CurveSpec::Kind kind() const { return spec_.kind; }
    const CurveSpec& spec() const { return spec_; }
    double length() const { return length_; }
    int size() const { return int(t_.size()); }
    double h() const { return length_ / double(size() - 1); }
    double t(int i) const { return t_[i]; }
    const std::vector<double>& grid() const { return t_; }

    const Vec2& B(int i) const { return B_[i]; }
    const Vec2& T(int i) const { return T_[i]; }  ///< B'
    const Vec2& N(int i) const { return N_[i]; }
    double k(int i) const { return k_[i]; }
    Mat2 D(int i) const { return frame(T_[i]); }
    double detD(int i) const { return D(i).determinant(); }

    /// Continuous evaluation; outside [0, l] the curve is continued (straight line for splines).
    Vec2 B_at(double t) const {
        switch (spec_.kind) {
        case CurveSpec::Kind::Flat: return Vec2(t, 0.0);
        case CurveSpec::Kind::Arc: {
            const double R = spec_.radius;
            return Vec2(R * std::sin(t / R), R * (1.0 - std::cos(t / R)));
        }
        case CurveSpec::Kind::Spline:
            if (t < 0) return t * spline_->T(0.0);
            if (t > length_) return spline_->B(length_) + (t - length_) * spline_->T(length_);
            return spline_->B(t);
        }
        return Vec2::Zero();
    }
    Vec2 T_at(double t) const {
        switch (spec_.kind) {
        case CurveSpec::Kind::Flat: return Vec2(1.0, 0.0);
        case CurveSpec::Kind::Arc: return Vec2(std::cos(t / spec_.radius), std::sin(t / spec_.radius));
        case CurveSpec::Kind::Spline: return spline_->T(std::clamp(t, 0.0, length_));
        }
        return Vec2::UnitX();
    }
    Vec2 N_at(double t) const { return perp(T_at(t)); }
    double k_at(double t) const {
        switch (spec_.kind) {
        case CurveSpec::Kind::Flat: return 0.0;
        case CurveSpec::Kind::Arc: return 1.0 / spec_.radius;
        case CurveSpec::Kind::Spline: return (t < 0 || t > length_) ? 0.0 : spline_->k(t);
        }
        return 0.0;
    }
    /// D(t) = grad chi(t, 0) = (B' | N).
    Mat2 D_at(double t) const { return frame(T_at(t)); }

    double kmax() const { return kmax_; }
    double eps_max() const { return eps_max_; }
    /// Recorded constant with c <= det D^eps <= 1/c for all eps <= eps_max.
    double c_bound() const { return c_; }

private:
    static Mat2 frame(const Vec2& T) {
        Mat2 D;
        D.col(0) = T;
        D.col(1) = perp(T);
        return D;
    }

    void check_injective() const {
        // Segment intersection test on the sampled polyline.
        const int n = size();
        for (int i = 0; i + 1 < n; ++i) {
            for (int j = i + 2; j + 1 < n; ++j) {
                const Vec2 p = B_[i], r = B_[i + 1] - B_[i];
                const Vec2 q = B_[j], s = B_[j + 1] - B_[j];
                const double den = cross2(r, s);
                if (std::abs(den) < 1e-300) continue;
                const double a = cross2(q - p, s) / den, b = cross2(q - p, r) / den;
                if (a >= 0 && a <= 1 && b >= 0 && b <= 1) {
                    std::ostringstream os;
                    os << "reference curve is not injective: samples near t = " << t_[i] << " and t = " << t_[j]
                       << " cross";
                    throw ValidationError(os.str());
                }
            }
        }
    }

    CurveSpec spec_;
    double length_ = 0.0;
    std::vector<double> t_;
    std::vector<Vec2> B_, T_, N_;
    std::vector<double> k_;
    double kmax_ = 0.0, eps_max_ = 0.0, c_ = 1.0;
    std::shared_ptr<detail::ArcLengthSpline> spline_;
};

/// Dual directors D^a = D^{-T} e_a.
inline std::pair<Vec2, Vec2> dual_directors(const Mat2& D) {
    const double det = D.determinant();
    if (!(det > 0)) throw ValidationError("dual_directors: det D must be positive");
    const Mat2 Dit = D.inverse().transpose();
    return {Dit.col(0), Dit.col(1)};
}

/// Scaled chart chi_eps = chi o rho_eps on the strip (0, l) x (-1/2, 1/2).
class StripChart {
public:
    StripChart(const ReferenceCurve& ref, double eps) : ref_(&ref), eps_(eps) {
        if (!(eps > 0)) throw ValidationError("strip width epsilon must be positive");
        if (eps > ref.eps_max() * (1 + 1e-12)) {
            std::ostringstream os;
            os << "epsilon = " << eps << " exceeds eps_max = " << ref.eps_max();
            if (ref.kmax() > 0) {
                int imax = 0;
                for (int i = 0; i < ref.size(); ++i)
                    if (std::abs(ref.k(i)) > std::abs(ref.k(imax))) imax = i;
                os << "; the chart overlaps on the side x2 = " << (ref.k(imax) > 0 ? "+1/2" : "-1/2")
                   << " near x1 = " << ref.t(imax) << " (curvature radius " << 1.0 / std::abs(ref.k(imax))
                   << ")";
            } else {
                os << " (declared chart bound)";
            }
            throw ValidationError(os.str());
        }
    }

    double eps() const { return eps_; }
    const ReferenceCurve& ref() const { return *ref_; }

    Vec2 chi(double x1, double x2) const { return ref_->B_at(x1) + eps_ * x2 * ref_->N_at(x1); }

    /// D^eps(x) = (grad chi)(x1, eps x2) = ((1 - eps x2 k) B' | N).
    Mat2 D(double x1, double x2) const {
        Mat2 D;
        D.col(0) = (1.0 - eps_ * x2 * ref_->k_at(x1)) * ref_->T_at(x1);
        D.col(1) = ref_->N_at(x1);
        return D;
    }

private:
    const ReferenceCurve* ref_;
    double eps_;
};

}  // namespace ribbon
