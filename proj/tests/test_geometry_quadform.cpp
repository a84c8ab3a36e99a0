#include "ribbon/geometry.hpp"
#include "ribbon/quadform.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace ribbon;

namespace {

// Largest alpha on a 1e-4 grid with K + sign*alpha*D positive semidefinite.
double alpha_scan(const Mat3& K, int sign, double step = 1e-4, double amax = 10.0) {
    double best = 0.0;
    for (double a = step; a <= amax; a += step) {
        Eigen::SelfAdjointEigenSolver<Mat3> es(K + sign * a * det_pencil());
        if (es.eigenvalues()(0) >= -1e-12) best = a;
        else break;
    }
    return best;
}

Mat2 random_sym(std::mt19937& g) {
    std::normal_distribution<double> n;
    Mat2 M;
    M << n(g), 0, 0, n(g);
    M(0, 1) = M(1, 0) = n(g);
    return M;
}

}  // namespace

TEST(Geometry, FlatRectangle) {
    auto ref = ReferenceCurve::build(CurveSpec::flat(1.0));
    for (int i = 0; i < ref.size(); ++i) {
        EXPECT_EQ(ref.k(i), 0.0);
        EXPECT_NEAR((ref.D(i) - Mat2::Identity()).norm(), 0.0, 1e-15);
        EXPECT_NEAR(ref.B(i).x(), ref.t(i), 1e-15);
    }
}

TEST(Geometry, ArcCurvatureAndFrames) {
    auto ref = ReferenceCurve::build(CurveSpec::arc(2.0, 1.0));
    EXPECT_NEAR(ref.B(0).norm(), 0.0, 1e-15);
    EXPECT_NEAR((ref.T(0) - Vec2(1, 0)).norm(), 0.0, 1e-15);
    std::vector<Vec2> B(ref.size());
    for (int i = 0; i < ref.size(); ++i) B[i] = ref.B(i);
    const auto Bpp = diff4_2(B, ref.h());
    for (int i = 0; i < ref.size(); ++i) {
        EXPECT_NEAR(ref.k(i), 0.5, 1e-15);
        EXPECT_NEAR(std::abs(ref.T(i).norm() - 1.0), 0.0, 1e-14);
        EXPECT_NEAR(ref.N(i).dot(ref.T(i)), 0.0, 1e-15);
        EXPECT_NEAR(Bpp[i].dot(ref.N(i)), ref.k(i), 1e-7);
        EXPECT_NEAR(ref.detD(i), 1.0, 1e-14);
    }
}

TEST(Geometry, SplineIsArcLength) {
    auto ref = ReferenceCurve::build(CurveSpec::spline({Vec2(0, 0), Vec2(0.5, 0.1), Vec2(1, 0)}));
    EXPECT_NEAR(ref.B(0).norm(), 0.0, 1e-14);
    EXPECT_NEAR((ref.T(0) - Vec2(1, 0)).norm(), 0.0, 1e-12);
    // chord over delta equals delta (1 - k^2 delta^2 / 24) + O(delta^4) for an arc-length curve
    const double delta = 1e-3;
    double worst = 0.0;
    for (int i = 0; i + 1 < ref.size(); i += 4) {
        const double t = ref.t(i);
        const double chord = (ref.B_at(t + delta) - ref.B_at(t)).norm();
        const double k = ref.k_at(t + 0.5 * delta);
        worst = std::max(worst, std::abs(chord / delta + k * k * delta * delta / 24.0 - 1.0));
    }
    EXPECT_LE(worst, 1e-10);
    // curvature against second differences of the samples
    std::vector<Vec2> B(ref.size());
    for (int i = 0; i < ref.size(); ++i) B[i] = ref.B(i);
    const auto Bpp = diff4_2(B, ref.h());
    for (int i = 8; i + 8 < ref.size(); ++i) EXPECT_NEAR(Bpp[i].dot(ref.N(i)), ref.k(i), 1e-4);
}

TEST(Geometry, DegenerateSpecsRejected) {
    EXPECT_THROW(ReferenceCurve::build(CurveSpec::arc(1.0, 7.0)), ValidationError);
    EXPECT_THROW(ReferenceCurve::build(CurveSpec::spline({Vec2(0, 0), Vec2(0, 0), Vec2(1, 0)})), ValidationError);
    EXPECT_THROW(ReferenceCurve::build(CurveSpec::flat(1.0, 100)), ValidationError);
    // figure eight
    EXPECT_THROW(ReferenceCurve::build(CurveSpec::spline(
                     {Vec2(0, 0), Vec2(1, 1), Vec2(2, 0), Vec2(1, -1), Vec2(0, 0.01), Vec2(-1, 1)})),
                 ValidationError);
}

TEST(Geometry, DualDirectors) {
    auto [a1, a2] = dual_directors(Mat2::Identity());
    EXPECT_EQ(a1, Vec2(1, 0));
    EXPECT_EQ(a2, Vec2(0, 1));
    Mat2 D;
    D << 1, 0, 0, 2;
    std::tie(a1, a2) = dual_directors(D);
    EXPECT_NEAR((a2 - Vec2(0, 0.5)).norm(), 0, 1e-15);
    // directors D1 = (1, 1), D2 = (0, 1)
    D << 1, 0, 1, 1;
    std::tie(a1, a2) = dual_directors(D);
    EXPECT_NEAR((a1 - Vec2(1, 0)).norm(), 0, 1e-15);
    EXPECT_NEAR((a2 - Vec2(-1, 1)).norm(), 0, 1e-15);
    EXPECT_NEAR(a1.dot(D.col(0)), 1, 1e-15);
    EXPECT_NEAR(a1.dot(D.col(1)), 0, 1e-15);
    EXPECT_NEAR(a2.dot(D.col(1)), 1, 1e-15);
    EXPECT_THROW(dual_directors(Mat2::Zero()), ValidationError);
}

TEST(Geometry, StripChart) {
    auto flat = ReferenceCurve::build(CurveSpec::flat(1.0));
    StripChart sf(flat, 0.1);
    EXPECT_NEAR((sf.chi(0.3, 0.4) - Vec2(0.3, 0.04)).norm(), 0, 1e-15);

    auto arc = ReferenceCurve::build(CurveSpec::arc(2.0, 1.0));
    StripChart sc(arc, 0.1);
    for (double x1 : {0.0, 0.3, 1.0}) {
        EXPECT_NEAR(sc.D(x1, 0.5).determinant(), 0.975, 1e-14);
        EXPECT_NEAR(sc.D(x1, -0.5).determinant(), 1.025, 1e-14);
        // polar oracle: chi_eps in polar coordinates about the centre (0, 2)
        const Vec2 c(0, 2);
        const Vec2 r = sc.chi(x1, 0.5) - c;
        EXPECT_NEAR(r.norm(), 2.0 - 0.05, 1e-14);
        // columns against central differences of chi_eps
        const double d = 1e-6;
        const Vec2 c1 = (sc.chi(x1 + d, 0.2) - sc.chi(x1 - d, 0.2)) / (2 * d);
        const Vec2 c2 = (sc.chi(x1, 0.2 + d) - sc.chi(x1, 0.2 - d)) / (2 * d) / sc.eps();
        EXPECT_NEAR((c1 - sc.D(x1, 0.2).col(0)).norm(), 0, 1e-8);
        EXPECT_NEAR((c2 - sc.D(x1, 0.2).col(1)).norm(), 0, 1e-8);
    }
    EXPECT_THROW(StripChart(arc, 5.0), ValidationError);
    EXPECT_LE(arc.c_bound(), 0.975);
}

TEST(Quadform, AlphaAgainstGridScan) {
    struct Case {
        Mat3 K;
        double ap, am;
    };
    const std::vector<Case> cases = {{isotropic_K(), 2, 2},
                                     {Vec3(1, 1, 0.125).asDiagonal(), 0.5, 2},
                                     {Vec3(1, 4, 1).asDiagonal(), 4, 4}};
    for (const auto& c : cases) {
        const double ap = compute_alpha(c.K, +1), am = compute_alpha(c.K, -1);
        EXPECT_NEAR(ap, c.ap, 1e-10);
        EXPECT_NEAR(am, c.am, 1e-10);
        EXPECT_NEAR(alpha_scan(c.K, +1), ap, 1.01e-4);
        EXPECT_NEAR(alpha_scan(c.K, -1), am, 1.01e-4);
    }
    EXPECT_THROW(compute_alpha(Vec3(1, -1, 1).asDiagonal(), +1), ValidationError);
}

TEST(Quadform, Kernels) {
    const auto Vp = zero_eigenspace(isotropic_K(), 2.0, +1);
    ASSERT_EQ(Vp.size(), 2u);
    Eigen::Matrix<double, 3, 2> W;
    W << Vp[0], Vp[1];
    // span equals span{(1,-1,0), (0,0,1)}: projector comparison
    Eigen::Matrix<double, 3, 2> E;
    E << 1 / std::sqrt(2.0), 0, -1 / std::sqrt(2.0), 0, 0, 1;
    EXPECT_NEAR((W * W.transpose() - E * E.transpose()).norm(), 0, 1e-12);
    EXPECT_NEAR(Vp[0].dot(Vp[1]), 0, 1e-14);
    for (const auto& v : Vp) {
        EXPECT_LT(det_vec(v), 0);
        EXPECT_LE(((isotropic_K() + 2.0 * det_pencil()) * v).norm(), 1e-8);
    }
    const auto Vm = zero_eigenspace(isotropic_K(), 2.0, -1);
    ASSERT_EQ(Vm.size(), 1u);
    EXPECT_NEAR((Vm[0] - Vec3(1, 1, 0) / std::sqrt(2.0)).norm(), 0, 1e-12);
    EXPECT_NEAR(det_vec(Vm[0]), 0.5, 1e-12);

    const Mat3 K = Vec3(1, 1, 0.125).asDiagonal();
    const auto V = zero_eigenspace(K, 0.5, +1);
    ASSERT_EQ(V.size(), 1u);
    EXPECT_NEAR(std::abs(V[0](2)), 1.0, 1e-12);

    EXPECT_THROW(zero_eigenspace(isotropic_K(), 1.0, +1), ValidationError);
}

TEST(Quadform, RelaxedDensityProperties) {
    const auto rd = RelaxedDensity::make(isotropic_K());
    EXPECT_NEAR(rd.q_star(Mat2(Mat2::Identity())), 4.0, 1e-14);
    EXPECT_NEAR(rd.q_star(Vec3(0, 0, 2)), 4.0, 1e-14);
    EXPECT_EQ(rd.q_star(Vec3(Vec3::Zero())), 0.0);
    for (int s : {+1, -1})
        for (const auto& v : rd.kernel(s)) EXPECT_GT((v - Vec3(0, 1, 0)).norm(), 1e-3);

    std::mt19937 g(7);
    const Mat3 K = Vec3(1, 1, 0.125).asDiagonal();
    for (const Mat3& KK : {isotropic_K(), K}) {
        const auto r = RelaxedDensity::make(KK);
        bool violated_p = false, violated_m = false;
        for (int j = 0; j < 2000; ++j) {
            const Mat2 M = random_sym(g);
            const Vec3 m = to_vec(M);
            EXPECT_NEAR(det_vec(m), M.determinant(), 1e-14);
            const double q = r.Q(m), d = det_vec(m), n2 = M.squaredNorm();
            if (j < 100) {
                EXPECT_GE(q + r.alpha_plus * d, -1e-9 * n2);
                EXPECT_GE(q - r.alpha_minus * d, -1e-9 * n2);
            }
            // probe near the kernels for the over-sized constant
            std::normal_distribution<double> nd(0.0, 1e-3);
            const Vec3 vp = r.V_plus[0] + Vec3(nd(g), nd(g), nd(g));
            const Vec3 vm = r.V_minus[0] + Vec3(nd(g), nd(g), nd(g));
            violated_p |= r.Q(vp) + 1.001 * r.alpha_plus * det_vec(vp) < 0;
            violated_m |= r.Q(vm) - 1.001 * r.alpha_minus * det_vec(vm) < 0;
            const double cmin = Eigen::SelfAdjointEigenSolver<Mat3>(KK).eigenvalues()(0);
            EXPECT_GE(r.q_star(m), cmin * m.squaredNorm() - 1e-12);
        }
        EXPECT_TRUE(violated_p);
        EXPECT_TRUE(violated_m);
    }
}

TEST(Quadform, MovingBasis) {
    const auto rd = RelaxedDensity::make(isotropic_K());
    auto flat = ReferenceCurve::build(CurveSpec::flat(1.0, 33));
    MovingBasis fb(rd, flat);
    for (int i = 0; i < flat.size(); ++i)
        for (int s : {+1, -1})
            for (std::size_t j = 0; j < rd.kernel(s).size(); ++j)
                EXPECT_NEAR((fb.w(s, i)[j] - rd.kernel(s)[j]).norm(), 0, 1e-15);
    // plane span{e2, (1,-1,0)} is {z = 0}
    const Vec2 ab = plane_coefficients(Vec3(1, -1, 0));
    EXPECT_NEAR(std::abs(ab.normalized()(1)), 1.0, 1e-15);
    EXPECT_NEAR(ab(0), 0.0, 1e-15);

    const Mat3 Kan = K_from_entries({2.0, 1.0, 0.7, 0.3, 0.1, -0.2});
    const auto ra = RelaxedDensity::make(Kan);
    auto arc = ReferenceCurve::build(CurveSpec::arc(2.0, 3.0, 65));
    MovingBasis mb(ra, arc);
    std::mt19937 g(3);
    for (int i = 0; i < arc.size(); ++i) {
        const Mat2 M = random_sym(g);
        const Mat2 B = mb.basis_at(arc.t(i));
        const Mat2 C = in_basis(M, B);
        EXPECT_NEAR((from_basis(C, B) - M).norm(), 0, 1e-12);
        EXPECT_NEAR(quad(mb.K_t(i), to_vec(C)), ra.Q(M), 1e-10 * std::max(1.0, ra.Q(M)));
        EXPECT_NEAR(C.determinant(), M.determinant(), 1e-12);
        if (i > 0) {
            for (int s : {+1, -1}) {
                const Vec3 a = mb.w(s, i)[0], b = mb.w(s, i - 1)[0];
                EXPECT_LE(std::acos(std::clamp(a.dot(b) / (a.norm() * b.norm()), -1.0, 1.0)), 4 * arc.h());
            }
        }
    }
    EXPECT_GT(mb.plane_bound(+1), 0);
    EXPECT_GT(mb.plane_bound(-1), 0);
}

TEST(Quadform, Orthotropic) {
    const Mat3 K = orthotropic_K(2.0, 1.0, 0.4, 0.3);
    const auto rd = RelaxedDensity::make(K);
    EXPECT_GT(rd.alpha_plus, 0);
    EXPECT_GT(rd.alpha_minus, 0);
    // nu12 = 0 decouples: D11 = E1, D22 = E2, D66 = G
    const Mat3 K0 = orthotropic_K(2.0, 1.0, 0.4, 0.0);
    EXPECT_NEAR((K0 - Vec3(2.0, 1.0, 0.4).asDiagonal().toDenseMatrix()).norm(), 0, 1e-15);
    EXPECT_THROW(orthotropic_K(1.0, 1.0, 1.0, 1.5), ValidationError);
}
