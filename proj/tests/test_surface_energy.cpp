#include "ribbon/energy.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace ribbon;

namespace {

Mat2 e11() {
    Mat2 m;
    m << 1, 0, 0, 0;
    return m;
}

// Cylinder of unit radius over the flat unit strip, rulings along N.
struct Cylinder {
    ReferenceCurve ref = ReferenceCurve::build(CurveSpec::flat(1.0, 129));
    RotationPath path = solve_frame(SkewField::constant(1.0, 0.0, 1.0, 0.0), 512);
    RuledSurface surface(double h) const {
        SurfaceOptions o;
        o.h = h;
        return build_isometry(ref, path, constant_ruling(ref, 0.0), o);
    }
};

std::size_t count_prefix(const std::string& file, const std::string& prefix) {
    std::ifstream is(file);
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line))
        if (line.rfind(prefix, 0) == 0) ++n;
    return n;
}

}  // namespace

// ---------------------------------------------------------------- chart

TEST(ChartWidth, Examples) {
    const auto flat = ReferenceCurve::build(CurveSpec::flat(1.0, 65));
    auto cw = chart_width(flat, constant_ruling(flat, 0.0));
    EXPECT_NEAR(cw.eta, 0.5, 1e-15);
    EXPECT_NEAR(cw.c0, 1.0, 1e-15);
    EXPECT_NEAR(cw.det_min, 1.0, 1e-15);

    cw = chart_width(flat, constant_ruling(flat, kPi / 4));
    EXPECT_NEAR(cw.c0, std::sqrt(0.5), 1e-14);
    EXPECT_NEAR(cw.det_min, std::sqrt(0.5), 1e-14);
    EXPECT_NEAR(cw.eta, 0.5 * std::sqrt(0.5), 1e-14);

    // arc of radius 2: |p'| + |k| = 1, det = 1 - s k >= 3/4
    const auto arc = ReferenceCurve::build(CurveSpec::arc(2.0, 1.0, 65));
    cw = chart_width(arc, constant_ruling(arc, 0.0));
    EXPECT_NEAR(cw.eta, 0.5, 1e-12);
    EXPECT_NEAR(cw.det_min, 0.75, 1e-12);
    EXPECT_EQ(cw.halvings, 0);

    EXPECT_THROW(chart_width(flat, constant_ruling(flat, kPi)), ValidationError);
    EXPECT_THROW(chart_width(flat, constant_ruling(flat, kPi / 2 + 0.1)), ValidationError);
}

TEST(ChartWidth, JacobianMatchesDifferences) {
    const auto arc = ReferenceCurve::build(CurveSpec::arc(1.5, 2.0, 129));
    const auto ru = constant_ruling(arc, 0.3);
    const auto Phi = [&](double t, double s) { return Vec2(arc.B_at(t) + s * perp(ru.eval(t).first)); };
    for (double t : {0.3, 1.0, 1.7})
        for (double s : {-0.2, 0.0, 0.2}) {
            const auto [p, dp] = ru.eval(t);
            const Mat2 J = chart_jacobian(arc, p, dp, t, s);
            const double h = 1e-6;
            Mat2 fd;
            fd.col(0) = (Phi(t + h, s) - Phi(t - h, s)) / (2 * h);
            fd.col(1) = (Phi(t, s + h) - Phi(t, s - h)) / (2 * h);
            EXPECT_LT((J - fd).norm(), 1e-7);
        }
}

// ---------------------------------------------------------------- surfaces

TEST(RuledSurface, FlatIdentity) {
    const auto ref = ReferenceCurve::build(CurveSpec::flat(1.0, 65));
    const auto path = solve_frame(SkewField::constant(1.0, 0.0, 0.0, 0.0), 64);
    SurfaceOptions o;
    o.h = 1.0 / 64;
    const auto S = build_isometry(ref, path, constant_ruling(ref, 0.3), o);
    for (int i = 0; i < S.nt; i += 7)
        for (int j = 0; j < S.ns; j += 5) {
            const Vec2 X = S.Phi(S.t[i], S.s[j]);
            EXPECT_LT((S.at(i, j) - Vec3(X(0), X(1), 0.0)).norm(), 1e-14);
        }
    const auto f = fundamental_forms(S);
    const auto r = check_surface(S, f, [](double) { return Mat2::Zero().eval(); }, &path);
    EXPECT_LT(r.isometry, 1e-11);
    EXPECT_LT(r.detPi, 1e-20);
    EXPECT_LT(r.centerline, 1e-9);
    EXPECT_LT(r.straightness, 1e-14);
    EXPECT_LT(r.beta, 1e-14);
    EXPECT_TRUE(r.pass);
}

TEST(RuledSurface, CylinderFormsConverge) {
    const Cylinder c;
    std::vector<double> hs, iso;
    for (double h : {1.0 / 32, 1.0 / 64, 1.0 / 128}) {
        const auto S = c.surface(h);
        // every point lies on the unit cylinder about an axis parallel to e2 through (0, 0, +-1)
        double dist = 1e300;
        for (double sgn : {1.0, -1.0}) {
            double d = 0.0;
            for (const auto& p : S.U) d = std::max(d, std::abs(std::hypot(p(0), p(2) - sgn) - 1.0));
            dist = std::min(dist, d);
        }
        EXPECT_LT(dist, 1e-12);
        const auto f = fundamental_forms(S);
        const auto r = check_surface(S, f, [](double) { return e11(); }, &c.path);
        EXPECT_LT(r.centerline, 1e-5);
        EXPECT_LT(r.straightness, 1e-13);
        EXPECT_LT(r.beta, 1e-13);
        EXPECT_LT(r.detPi, 1e-6);
        hs.push_back(h);
        iso.push_back(r.isometry);
    }
    EXPECT_LT(iso.back(), 1e-8);
    EXPECT_GE(loglog_slope(hs, iso), 3.5);
}

TEST(RuledSurface, SphereIsNotAnIsometry) {
    // sphere of radius 2 over the square chart: Gaussian curvature det II / det I = 1/4
    const double R = 2.0;
    const auto S = make_surface(
        1.0, 0.25, 1.0 / 64,
        [R](double t, double s) {
            return Vec3(R * std::sin(t / R) * std::cos(s / R), R * std::sin(s / R), R * std::cos(t / R) * std::cos(s / R));
        },
        [](double t, double s) { return Vec2(t, s); }, [](double, double) { return Mat2::Identity().eval(); });
    const auto f = fundamental_forms(S);
    const auto r = check_surface(S, f);
    EXPECT_FALSE(r.pass);
    EXPECT_GT(r.isometry, 1e-3);
    EXPECT_GT(r.detPi, 0.2);
    const std::size_t k = std::size_t(S.nt / 2) * S.ns + S.center();
    EXPECT_NEAR(f.II[k].determinant() / f.I[k].determinant(), 1.0 / (R * R), 1e-6);
}

TEST(RuledSurface, RecoverySurfaceInvariants) {
    const auto rd = RelaxedDensity::make(isotropic_K());
    const auto ref = ReferenceCurve::build(CurveSpec::flat(8.0, 257));
    const MovingBasis mb(rd, ref);
    const SymField2 M = [](double) {
        Mat2 m;
        m << 1.0, 0.0, 0.0, 0.05;
        return m;
    };
    RecoveryOptions o;
    o.theta = 2.0;
    o.h_max = 0.001;
    const auto F = build_recovery(rd, ref, mb, M, nullptr, 8, o);
    const auto path = F.solve();
    const auto ru = ruling_of(F);
    const auto cw = chart_width(ref, ru);
    const auto S = build_isometry(ref, path, ru);
    const auto f = fundamental_forms(S);
    const auto r = check_surface(S, f, [&](double t) { return F.M(t); }, &path);
    EXPECT_LE(r.isometry, 1e-6);
    EXPECT_LE(r.detPi, 1e-6);
    EXPECT_TRUE(r.pass);
    EXPECT_LE(r.centerline, 1e-4);
    EXPECT_LT(r.straightness, 1e-12);
    EXPECT_LT(r.beta, 1e-12);

    const StripChart strip(ref, 1.8 * cw.eta * cw.c0);
    const auto R = rescaled_forms(S, strip, 1.0 / 512, true);
    EXPECT_LE(R.consistency, 1e-4);
    EXPECT_LE(R.s_max, S.eta);
    for (const auto& g : R.metric) {
        EXPECT_NEAR(g(0, 0), 1.0, 1e-6);
        EXPECT_NEAR(g(0, 1), 0.0, 1e-6);
    }
    EXPECT_THROW(rescaled_forms(S, StripChart(ref, 4.0 * cw.eta), 1.0 / 64), ValidationError);
}

// ---------------------------------------------------------------- boundary traces

TEST(BoundaryTraces, CylinderAndMismatch) {
    const Cylinder c;
    const auto S = c.surface(1.0 / 128);
    const StripChart strip(c.ref, 0.1);
    BoundaryData bd;
    bd.R_bar = c.path.end();
    bd.y_bar = c.path.gamma;
    const auto b = check_boundary_conditions(S, strip, bd);
    EXPECT_TRUE(b.pass) << b.left << " " << b.right << " " << b.start << " " << b.end;
    EXPECT_LT(b.max(), 1e-8);

    const auto m = check_boundary_conditions(S, strip, moebius_preset(c.ref));
    EXPECT_FALSE(m.pass);
    EXPECT_LT(m.left, 1e-8);
    EXPECT_GT(m.right, 0.1);
}

TEST(BoundaryTraces, CurvedRecoveryWithBoundaryData) {
    const auto rd = RelaxedDensity::make(orthotropic_K(2.0, 1.0, 0.6, 0.3));
    const auto ref = ReferenceCurve::build(CurveSpec::arc(1.5, 2.0, 129));
    const MovingBasis mb(rd, ref);
    const SymField2 M = [&ref](double t) {
        Mat2 MB;
        MB << 1.2 + 0.2 * std::sin(t), 0.3, 0.3, 0.5 - 0.2 * t;
        const Mat2 D = ref.D_at(t);
        return Mat2(D * MB * D.transpose());
    };
    const auto tg = endpoint_of_field(ref, M);
    BoundaryData bd;
    bd.R_bar = (tg.R.transpose() * embed(ref.D_at(ref.length())).transpose()).transpose();
    bd.y_bar = tg.gamma;
    RecoveryOptions o;
    o.h_max = 0.001;
    const auto F = build_recovery(rd, ref, mb, M, &bd, 16, o);
    const auto S = build_isometry(F);
    const auto cw = chart_width(ref, ruling_of(F));
    const StripChart strip(ref, std::min(ref.eps_max(), 1.8 * cw.eta * cw.c0));
    const auto b = check_boundary_conditions(S, strip, bd);
    EXPECT_TRUE(b.pass) << b.left << " " << b.right << " " << b.start << " " << b.end;
}

// ---------------------------------------------------------------- strip energy

TEST(StripEnergy, CylinderMatchesLimitAndFrustrationShift) {
    const auto rd = RelaxedDensity::make(isotropic_K());
    const Cylinder c;
    const auto S = c.surface(1.0 / 256);
    const StripChart strip(c.ref, 0.1);
    const auto R = rescaled_forms(S, strip, 1.0 / 256);
    // flat reference: det D = 1, Pi = e1 (x) e1 everywhere
    EXPECT_NEAR(strip_energy(R, strip, rd, Frustration()), rd.Q(e11()), 1e-6);
    EXPECT_NEAR(strip_energy(R, strip, rd, Frustration::constant(e11())), 0.0, 1e-6);
    Mat2 P;
    P << 0.3, -0.2, -0.2, 0.7;
    EXPECT_NEAR(strip_energy(R, strip, rd, Frustration::constant(P)), rd.Q(Mat2(e11() - P)), 1e-6);

    const StripChart other(c.ref, 0.05);
    EXPECT_THROW(strip_energy(R, other, rd, Frustration()), ValidationError);
}

TEST(StripEnergy, CentrelineFunctionals) {
    const auto rd = RelaxedDensity::make(isotropic_K());
    const auto flat = ReferenceCurve::build(CurveSpec::flat(1.0, 65));
    const SymField2 I = [](double) { return Mat2::Identity().eval(); };
    const SymField2 R1 = [](double) { return e11(); };
    EXPECT_TRUE(is_infinite(f_hat(rd, flat, I)));
    EXPECT_THROW(finite_value(f_hat(rd, flat, I)), ValidationError);
    EXPECT_NEAR(f_relaxed(rd, flat, I), rd.q_star(Mat2(Mat2::Identity())), 1e-12);
    EXPECT_NEAR(f_relaxed(rd, flat, I), 4.0, 1e-12);
    EXPECT_NEAR(finite_value(f_hat(rd, flat, R1)), rd.Q(e11()), 1e-12);
    EXPECT_NEAR(finite_value(f_hat(rd, flat, R1)), f_relaxed(rd, flat, R1), 1e-12);

    // on an arc det D varies: compare with a direct quadrature of (1 - 0 k) = 1 and Q
    const auto arc = ReferenceCurve::build(CurveSpec::arc(2.0, 1.0, 65));
    const SymField2 R1a = [&arc](double t) {
        const Vec2 T = arc.T_at(t);
        return Mat2(T * T.transpose());
    };
    EXPECT_NEAR(finite_value(f_hat(rd, arc, R1a)), rd.Q(e11()), 1e-10);

    // recovery fields are rank one, so f_hat of M_n equals f_relaxed of M_n
    const MovingBasis mb(rd, flat);
    const auto F = build_recovery(rd, flat, mb, I, nullptr, 8);
    EXPECT_NEAR(finite_value(f_hat(rd, F)), f_relaxed(rd, F), 1e-10);
}

// ---------------------------------------------------------------- sweeps

TEST(GammaSweep, CouplingRule) {
    SweepOptions o;
    o.eps0 = 1.0;
    EXPECT_EQ(coupled_n(o, 0.1), 10);
    EXPECT_EQ(coupled_n(o, 0.5), 3);
    o.coupling = Coupling::Sqrt;
    EXPECT_EQ(coupled_n(o, 0.01), 10);
}

TEST(GammaSweep, StraightStripIsZero) {
    const auto rd = RelaxedDensity::make(isotropic_K());
    const auto ref = ReferenceCurve::build(CurveSpec::flat(1.0, 65));
    const std::vector<double> zero(ref.size(), 0.0);
    const auto fc = framed_curve_from(zero, zero, ref);
    const auto rep = gamma_sweep(rd, ref, Frustration(), fc, end_data(fc, ref), {0.2, 0.1});
    EXPECT_EQ(rep.J_limit, 0.0);
    for (const auto& e : rep.entries) EXPECT_EQ(e.J_eps, 0.0);
    EXPECT_THROW(gamma_sweep(rd, ref, Frustration::constant(e11()), fc, end_data(fc, ref), {0.1}), ValidationError);
}

TEST(GammaSweep, CylinderGapVanishes) {
    const auto rd = RelaxedDensity::make(isotropic_K());
    const auto ref = ReferenceCurve::build(CurveSpec::flat(1.0, 257));
    const std::vector<double> mu(ref.size(), 1.0), tau(ref.size(), 0.0);
    const auto fc = framed_curve_from(mu, tau, ref);
    SweepOptions o;
    o.eps0 = 0.8;
    o.h_max = 1.0 / 512;
    const auto rep = gamma_sweep(rd, ref, Frustration(), fc, end_data(fc, ref), {0.2, 0.1}, o);
    EXPECT_NEAR(rep.J_limit, 1.0, 1e-12);
    for (const auto& e : rep.entries) EXPECT_LT(std::abs(e.gap), 1e-6);
}

// ---------------------------------------------------------------- export

TEST(Export, ObjAndVtk) {
    const Cylinder c;
    const auto S = c.surface(1.0 / 16);
    const auto f = fundamental_forms(S);
    const auto dir = std::filesystem::temp_directory_path();
    const std::string obj = (dir / "ribbon_test_surface.obj").string();
    const std::string vtk = (dir / "ribbon_test_surface.vtk").string();
    write_obj(S, obj);
    write_vtk(S, f, vtk, "stamp");
    EXPECT_EQ(count_prefix(obj, "v "), std::size_t(S.nt) * S.ns);
    EXPECT_EQ(count_prefix(obj, "f "), std::size_t(S.nt - 1) * (S.ns - 1));
    EXPECT_EQ(count_prefix(vtk, "DATASET STRUCTURED_GRID"), 1u);
    EXPECT_EQ(count_prefix(vtk, "CELL_DATA " + std::to_string((S.nt - 1) * (S.ns - 1))), 1u);
    EXPECT_EQ(count_prefix(vtk, "SCALARS isometry_residual"), 1u);
    EXPECT_EQ(count_prefix(vtk, "SCALARS detPi"), 1u);
    EXPECT_THROW(write_obj(S, "/nonexistent/dir/x.obj"), ValidationError);
    std::filesystem::remove(obj);
    std::filesystem::remove(vtk);
}
