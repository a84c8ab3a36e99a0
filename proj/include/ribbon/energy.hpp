#pragma once

#include "ribbon/limit_energy.hpp"
#include "ribbon/relaxation.hpp"
#include "ribbon/ruled_surface.hpp"

#include <cmath>
#include <variant>

namespace ribbon {

/// Marker for an infinite energy value.
struct Infinite {};
using EnergyValue = std::variant<double, Infinite>;

inline bool is_infinite(const EnergyValue& v) { return std::holds_alternative<Infinite>(v); }
inline double finite_value(const EnergyValue& v) {
    if (is_infinite(v)) throw ValidationError("energy value is infinite");
    return std::get<double>(v);
}

// ---------------------------------------------------------------------------
// Strip energy.

/// Tensor Simpson rule of Q(D^{-T}(Pi_{y,eps} - Pi0_eps)D^{-1}) det D over Omega.
inline double strip_energy(const RescaledForms& R, const StripChart& strip, const RelaxedDensity& rd,
                           const Frustration& frus) {
    if (R.n1 < 3 || R.n2 < 3 || R.n1 % 2 == 0 || R.n2 % 2 == 0 || R.Pi.size() != std::size_t(R.n1) * R.n2)
        throw ValidationError("strip_energy: grid is not a Simpson grid matching the rescaled forms");
    if (std::abs(R.eps - strip.eps()) > 1e-15 * strip.eps())
        throw ValidationError("strip_energy: rescaled forms were computed for a different eps");
    const double eps = strip.eps();
    std::vector<double> rows(R.n1), col(R.n2);
    for (int i = 0; i < R.n1; ++i) {
        for (int j = 0; j < R.n2; ++j) {
            const Mat2 D = strip.D(R.x1[i], R.x2[j]);
            const Mat2 Di = D.inverse();
            const Mat2 X = Di.transpose() * (R.at(i, j) - frus.at_eps(R.x1[i], R.x2[j], eps)) * Di;
            col[j] = rd.Q(X) * D.determinant();
        }
        rows[i] = simpson(col, R.h2);
    }
    return simpson(rows, R.h1);
}

/// Convenience: rescaled forms on a grid of step h, then the strip energy.
inline double strip_energy(const RuledSurface& S, const StripChart& strip, const RelaxedDensity& rd,
                           const Frustration& frus, double h = 0.0) {
    return strip_energy(rescaled_forms(S, strip, h), strip, rd, frus);
}

// ---------------------------------------------------------------------------
// Centerline functionals.

/// int Q(M) det D when M is rank one everywhere (|det M| <= tol), infinite otherwise.
inline EnergyValue f_hat(const RelaxedDensity& rd, const ReferenceCurve& ref, const SymField2& M,
                         int samples = 4097, double tol = 1e-8) {
    std::vector<double> f(samples);
    const auto t = linspace(0.0, ref.length(), samples);
    for (int i = 0; i < samples; ++i) {
        const Mat2 m = M(t[i]);
        if (std::abs(m.determinant()) > tol) return Infinite{};
        f[i] = rd.Q(m) * ref.D_at(t[i]).determinant();
    }
    return simpson(f, t[1] - t[0]);
}

/// Same for a recovery field, integrated piece by piece across its transitions.
inline EnergyValue f_hat(const RelaxedDensity& rd, const RecoveryFields& F, double tol = 1e-8) {
    for (double t : F.frame_nodes())
        if (std::abs(F.M(t).determinant()) > tol) return Infinite{};
    const ReferenceCurve& ref = *F.ref;
    return F.integrate([&](double t) { return rd.Q(F.M(t)) * ref.D_at(t).determinant(); });
}

/// int (Q + alpha+ det^+ + alpha- det^-)(M) det D.
inline double f_relaxed(const RelaxedDensity& rd, const ReferenceCurve& ref, const SymField2& M,
                        int samples = 4097) {
    std::vector<double> f(samples);
    const auto t = linspace(0.0, ref.length(), samples);
    for (int i = 0; i < samples; ++i) f[i] = rd.q_star(M(t[i])) * ref.D_at(t[i]).determinant();
    return simpson(f, t[1] - t[0]);
}

inline double f_relaxed(const RelaxedDensity& rd, const RecoveryFields& F) {
    const ReferenceCurve& ref = *F.ref;
    return F.integrate([&](double t) { return rd.q_star(F.M(t)) * ref.D_at(t).determinant(); });
}

/// Physical M = mu D1 (x) D1 + tau (D1 (x) D2 + D2 (x) D1) + gamma D2 (x) D2 on the reference grid.
inline SymField2 limit_field(const ReferenceCurve& ref, const LimitTrace& tr) {
    std::vector<Mat2> M(ref.size());
    for (int i = 0; i < ref.size(); ++i) {
        const auto [D1, D2] = dual_directors(ref.D(i));
        M[i] = tr.mu[i] * D1 * D1.transpose() + tr.tau[i] * (D1 * D2.transpose() + D2 * D1.transpose()) +
               tr.gamma_star[i] * D2 * D2.transpose();
    }
    return sym_field_from_samples(ref, std::move(M));
}

// ---------------------------------------------------------------------------
// Sweep over strip widths.

enum class Coupling { Linear, Sqrt };

struct SweepOptions {
    Coupling coupling = Coupling::Linear;
    double eps0 = 1.0;         ///< n = round(eps0 / eps) (linear) or round(sqrt(eps0 / eps)) (sqrt)
    int n_min = 3;
    double h_per_eps = 1.0 / 16.0;  ///< grid step on Omega and on the chart, relative to eps
    double h_max = 0.0;        ///< cap on the grid step; 0 means none
    RecoveryOptions recovery;
};

struct EnergyEntry {
    double eps = 0.0;
    int n = 0;
    double J_eps = 0.0, gap = 0.0;
    double eta = 0.0;
};

struct EnergyReport {
    double J_limit = 0.0;
    std::vector<EnergyEntry> entries;
    double slope = 0.0;  ///< log-log slope of |gap| against eps (0 if fewer than two positive gaps)

    bool monotone(double tol = 0.0) const {
        for (std::size_t i = 1; i < entries.size(); ++i)
            if (std::abs(entries[i].gap) > std::abs(entries[i - 1].gap) + tol) return false;
        return true;
    }
};

inline int coupled_n(const SweepOptions& opt, double eps) {
    const double r = opt.eps0 / eps;
    const int n = int(std::lround(opt.coupling == Coupling::Linear ? r : std::sqrt(r)));
    return std::max(opt.n_min, n);
}

/// Recovery strips for each eps: recovery field M_n of the limit data, its frames and ruled surface, and
/// the strip energy J_eps of y = u o chi_eps, compared with the limit value.
inline EnergyReport gamma_sweep(const RelaxedDensity& rd, const ReferenceCurve& ref, const Frustration& frus,
                                const FramedCurve& fc, const BoundaryData& bd, const std::vector<double>& eps_list,
                                const SweepOptions& opt = {}) {
    const auto trace = limit_functional(rd, ref, frus, fc);
    EnergyReport rep;
    rep.J_limit = trace.J;
    const SymField2 M = limit_field(ref, trace);
    const MovingBasis mb(rd, ref);

    std::vector<Mat2> MB(ref.size());
    bool all_zero = true;
    for (int i = 0; i < ref.size(); ++i) {
        MB[i] = in_basis(M(ref.t(i)), ref.D(i));
        if (MB[i].cwiseAbs().maxCoeff() > 1e-14) all_zero = false;
    }
    std::vector<double> a13(ref.size()), a23(ref.size());
    for (int i = 0; i < ref.size(); ++i) {
        a13[i] = MB[i](0, 0);
        a23[i] = MB[i](0, 1);
    }
    const bool degenerate = !is_nondegenerate(SkewField::from_samples(ref, a13, a23), ref, 0.0, ref.length());
    if (degenerate && !frus.is_zero())
        throw ValidationError("gamma_sweep: degenerate limit frame with nonzero natural curvature is not supported");

    for (double eps : eps_list) {
        EnergyEntry e;
        e.eps = eps;
        e.n = coupled_n(opt, eps);
        double h = opt.h_per_eps * eps;
        if (opt.h_max > 0) h = std::min(h, opt.h_max);
        const StripChart strip(ref, eps);
        if (degenerate && all_zero) {
            // the identity strip y = chi_eps: Pi_{y,eps} = 0
            e.J_eps = 0.0;
        } else {
            RecoveryOptions ro = opt.recovery;
            ro.h_max = ro.h_max > 0 ? ro.h_max : 0.5 * h;
            const auto F = build_recovery(rd, ref, mb, M, &bd, e.n, ro);
            SurfaceOptions so;
            so.h = h;
            const auto S = build_isometry(F, so);
            e.eta = S.eta;
            e.J_eps = strip_energy(S, strip, rd, frus, h);
        }
        e.gap = e.J_eps - rep.J_limit;
        rep.entries.push_back(e);
    }
    std::vector<double> x, g;
    for (const auto& e : rep.entries)
        if (std::abs(e.gap) > 0) {
            x.push_back(e.eps);
            g.push_back(std::abs(e.gap));
        }
    if (x.size() >= 2) rep.slope = loglog_slope(x, g);
    return rep;
}

}  // namespace ribbon
