#pragma once

#include "frames.hpp"
#include "quadform.hpp"

namespace ribbon {

/// Natural curvature Pi0(x1), linearly interpolated from a table; optionally an
/// epsilon family Pi0_eps(x1, x2, eps) used by the strip energy only.
class Frustration {
public:
    Frustration() = default;

    static Frustration constant(const Mat2& P) {
        Frustration f;
        f.t_ = {0.0};
        f.P_ = {P};
        return f;
    }
    static Frustration table(std::vector<double> t, std::vector<Mat2> P) {
        if (t.size() != P.size() || t.empty()) throw ValidationError("frustration table: size mismatch");
        for (std::size_t i = 1; i < t.size(); ++i)
            if (!(t[i] > t[i - 1])) throw ValidationError("frustration table: times must increase");
        Frustration f;
        f.t_ = std::move(t);
        f.P_ = std::move(P);
        return f;
    }

    void set_family(std::function<Mat2(double, double, double)> fam) { family_ = std::move(fam); }

    bool is_zero() const {
        if (family_) return false;
        for (const auto& P : P_)
            if (P.norm() != 0.0) return false;
        return true;
    }

    Mat2 at(double x1) const {
        if (P_.empty()) return Mat2::Zero();
        if (P_.size() == 1 || x1 <= t_.front()) return P_.front();
        if (x1 >= t_.back()) return P_.back();
        const auto it = std::upper_bound(t_.begin(), t_.end(), x1);
        const std::size_t i = std::size_t(it - t_.begin()) - 1;
        const double f = (x1 - t_[i]) / (t_[i + 1] - t_[i]);
        return (1.0 - f) * P_[i] + f * P_[i + 1];
    }

    Mat2 at_eps(double x1, double x2, double eps) const { return family_ ? family_(x1, x2, eps) : at(x1); }

private:
    std::vector<double> t_;
    std::vector<Mat2> P_;
    std::function<Mat2(double, double, double)> family_;
};

enum class Branch { Interior, DetPositive, DetNegative, Boundary };

inline const char* to_string(Branch b) {
    switch (b) {
    case Branch::Interior: return "interior";
    case Branch::DetPositive: return "det-positive";
    case Branch::DetNegative: return "det-negative";
    case Branch::Boundary: return "boundary";
    }
    return "?";
}

struct LimitDensityValue {
    double value = 0.0;
    double gamma_star = 0.0;
    Branch branch = Branch::Interior;
};

/// Minimizes Q(a + gamma b - p) + alpha+ det(a + gamma b)^+ + alpha- det(a + gamma b)^- over gamma.
/// det is affine in gamma (b rank-one), so the objective is convex and piecewise quadratic.
inline LimitDensityValue minimize_gamma(const RelaxedDensity& rd, const Vec3& a, const Vec3& b, const Vec3& p) {
    const Mat3 Dm = det_pencil();
    const double c2 = quad(rd.K, b);
    const double c1 = 2.0 * b.dot(rd.K * (a - p));
    const double d0 = det_vec(a);
    const double d1 = 2.0 * a.dot(Dm * b);  // det(b) enters at gamma^2 and vanishes for rank-one b
    const double d2 = det_vec(b);
    if (std::abs(d2) > 1e-12 * std::max(1.0, b.squaredNorm()))
        throw ValidationError("minimize_gamma: gamma direction must be rank-one");
    const double ap = rd.alpha_plus, am = rd.alpha_minus;
    auto f = [&](double g) {
        const Vec3 m = a + g * b;
        return rd.q_star(m) - rd.Q(m) + rd.Q(Vec3(m - p));
    };
    auto detg = [&](double g) { return d0 + d1 * g; };
    const double scale = std::max({1.0, std::abs(d0), std::abs(d1)});

    LimitDensityValue out;
    if (std::abs(d1) <= 1e-14 * scale) {
        const double g = d0 >= 0 ? -(c1 + ap * d1) / (2.0 * c2) : -(c1 - am * d1) / (2.0 * c2);
        out.gamma_star = g;
        out.value = f(g);
        out.branch = Branch::Interior;
        return out;
    }
    const double gp = -(c1 + ap * d1) / (2.0 * c2);
    const double gm = -(c1 - am * d1) / (2.0 * c2);
    const double g0 = -d0 / d1;
    const double tol = 1e-12 * scale;
    if (detg(gp) > tol) {
        out.gamma_star = gp;
        out.branch = Branch::DetPositive;
    } else if (detg(gm) < -tol) {
        out.gamma_star = gm;
        out.branch = Branch::DetNegative;
    } else {
        out.gamma_star = g0;
        out.branch = Branch::Boundary;
    }
    out.value = f(out.gamma_star);
    return out;
}

/// Limit density at x1: min over gamma of Q**-type integrand for
/// M = mu D1 (x) D1 + tau (D1 (x) D2 + D2 (x) D1) + gamma D2 (x) D2, times det D.
inline LimitDensityValue qbar(const RelaxedDensity& rd, const ReferenceCurve& ref, const Frustration& frus, double x1,
                              double mu, double tau) {
    if (x1 < -1e-12 || x1 > ref.length() * (1 + 1e-12)) throw ValidationError("qbar: x1 outside [0, l]");
    const Mat2 D = ref.D_at(x1);
    const auto [D1, D2] = dual_directors(D);
    const Mat2 Di = D.inverse();
    const Mat2 P = Di.transpose() * frus.at(x1) * Di;
    const Mat2 A = mu * D1 * D1.transpose() + tau * (D1 * D2.transpose() + D2 * D1.transpose());
    const Mat2 B = D2 * D2.transpose();
    LimitDensityValue v = minimize_gamma(rd, to_vec(A), to_vec(B), to_vec(P));
    v.value *= D.determinant();
    return v;
}

struct LimitTrace {
    std::vector<double> t, mu, tau, gamma_star, qbar;
    std::vector<Branch> branch;
    double J = 0.0;
};

inline LimitTrace limit_functional(const RelaxedDensity& rd, const ReferenceCurve& ref, const Frustration& frus,
                                   const std::vector<double>& mu, const std::vector<double>& tau) {
    const int n = ref.size();
    if (int(mu.size()) != n || int(tau.size()) != n)
        throw ValidationError("limit_functional: curve samples do not match the reference grid");
    LimitTrace tr;
    tr.t = ref.grid();
    tr.mu = mu;
    tr.tau = tau;
    tr.gamma_star.resize(n);
    tr.qbar.resize(n);
    tr.branch.resize(n);
    for (int i = 0; i < n; ++i) {
        const auto v = qbar(rd, ref, frus, ref.t(i), mu[i], tau[i]);
        tr.gamma_star[i] = v.gamma_star;
        tr.qbar[i] = v.value;
        tr.branch[i] = v.branch;
    }
    tr.J = simpson(tr.qbar, ref.h());
    return tr;
}

inline LimitTrace limit_functional(const RelaxedDensity& rd, const ReferenceCurve& ref, const Frustration& frus,
                                   const FramedCurve& fc) {
    if (fc.t.size() != ref.grid().size()) throw ValidationError("limit_functional: framed curve grid mismatch");
    return limit_functional(rd, ref, frus, fc.mu, fc.tau);
}

}  // namespace ribbon
