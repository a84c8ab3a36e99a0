#pragma once

#include "common.hpp"
#include "geometry.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <limits>
#include <sstream>

namespace ribbon {

// Symmetric 2x2 matrices are handled in vector form m = (M11, M22, 2 M12).

inline Vec3 to_vec(const Mat2& M) { return Vec3(M(0, 0), M(1, 1), M(0, 1) + M(1, 0)); }

inline Mat2 to_mat(const Vec3& m) {
    Mat2 M;
    M << m(0), 0.5 * m(2), 0.5 * m(2), m(1);
    return M;
}

/// det M = m1 m2 - m3^2 / 4.
inline double det_vec(const Vec3& m) { return m(0) * m(1) - 0.25 * m(2) * m(2); }

/// The determinant pencil: det(m) = <D m, m>.
inline Mat3 det_pencil() {
    Mat3 D;
    D << 0.0, 0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, -0.25;
    return D;
}

/// Q(M) = |M|^2.
inline Mat3 isotropic_K() { return Vec3(1.0, 1.0, 0.5).asDiagonal(); }

/// K from its six independent entries (K11, K22, K33, K12, K13, K23).
inline Mat3 K_from_entries(const std::array<double, 6>& e) {
    Mat3 K;
    K << e[0], e[3], e[4], e[3], e[1], e[5], e[4], e[5], e[2];
    return K;
}

/// Orthotropic plate bending form Q = D11 M11^2 + 2 D12 M11 M22 + D22 M22^2 + 4 D66 M12^2,
/// with D11 = E1/(1 - nu12 nu21), D22 = E2/(1 - nu12 nu21), D12 = nu12 D22, D66 = G
/// and nu21 = nu12 E2 / E1. The common factor h^3/12 is dropped.
inline Mat3 orthotropic_K(double E1, double E2, double G, double nu12) {
    if (!(E1 > 0 && E2 > 0 && G > 0)) throw ValidationError("orthotropic moduli must be positive");
    const double nu21 = nu12 * E2 / E1;
    const double den = 1.0 - nu12 * nu21;
    if (!(den > 0)) throw ValidationError("orthotropic constants violate nu12 nu21 < 1");
    const double D11 = E1 / den, D22 = E2 / den, D12 = nu12 * E2 / den;
    Mat3 K;
    K << D11, D12, 0.0, D12, D22, 0.0, 0.0, 0.0, G;
    return K;
}

inline double quad(const Mat3& K, const Vec3& m) { return m.dot(K * m); }

/// Largest alpha with K + sign * alpha * D positive semidefinite, via Cholesky whitening.
inline double compute_alpha(const Mat3& K, int sign) {
    if ((K - K.transpose()).norm() > 1e-12 * std::max(1.0, K.norm()))
        throw ValidationError("material tensor K must be symmetric");
    Eigen::LLT<Mat3> llt(K);
    if (llt.info() != Eigen::Success) throw ValidationError("material tensor K is not positive definite");
    const Mat3 L = llt.matrixL();
    const Mat3 Linv = L.inverse();
    const Mat3 S = Linv * (double(sign) * det_pencil()) * Linv.transpose();
    Eigen::SelfAdjointEigenSolver<Mat3> es(0.5 * (S + S.transpose()));
    const double lmin = es.eigenvalues()(0);
    if (!(lmin < 0)) throw ValidationError("compute_alpha: pencil has no negative direction");
    return 1.0 / -lmin;
}

/// Orthonormal basis of ker(K + sign * alpha * D). In the two-dimensional case the basis is
/// rotated to diagonalize det restricted to the kernel, largest |det| first.
inline std::vector<Vec3> zero_eigenspace(const Mat3& K, double alpha, int sign) {
    const Mat3 P = K + double(sign) * alpha * det_pencil();
    Eigen::SelfAdjointEigenSolver<Mat3> es(P);
    const Vec3 ev = es.eigenvalues();
    if (ev(0) > 1e-6)
        throw ValidationError("zero_eigenspace: smallest eigenvalue " + std::to_string(ev(0)) +
                              " is not zero; alpha is inconsistent with K");
    const double knorm = Eigen::SelfAdjointEigenSolver<Mat3>(K).eigenvalues().cwiseAbs().maxCoeff();
    const double zero = 1e-8 * knorm;
    std::vector<Vec3> basis;
    for (int i = 0; i < 3; ++i)
        if (std::abs(ev(i)) <= zero) basis.push_back(es.eigenvectors().col(i));
    if (basis.empty()) basis.push_back(es.eigenvectors().col(0));
    if (basis.size() == 2) {
        Mat2 R;
        const Mat3 D = det_pencil();
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) R(a, b) = basis[a].dot(D * basis[b]);
        Eigen::SelfAdjointEigenSolver<Mat2> es2(R);
        // det has a fixed sign on the kernel; order by |det| decreasing
        int first = std::abs(es2.eigenvalues()(0)) >= std::abs(es2.eigenvalues()(1)) ? 0 : 1;
        std::vector<Vec3> rotated;
        for (int j : {first, 1 - first}) {
            const Vec2 c = es2.eigenvectors().col(j);
            rotated.push_back((c(0) * basis[0] + c(1) * basis[1]).normalized());
        }
        basis = rotated;
    }
    for (auto& v : basis) {
        // deterministic sign: first component with |.| > 1e-12 is positive
        for (int i = 0; i < 3; ++i) {
            if (std::abs(v(i)) > 1e-12) {
                if (v(i) < 0) v = -v;
                break;
            }
        }
        const double d = det_vec(v);
        if (sign > 0 ? !(d < 0) : !(d > 0))
            throw ValidationError("zero_eigenspace: kernel vector has det of the wrong sign");
    }
    return basis;
}

/// Material tensor with its relaxation constants and kernels.
struct RelaxedDensity {
    Mat3 K = isotropic_K();
    double alpha_plus = 0.0, alpha_minus = 0.0;
    std::vector<Vec3> V_plus, V_minus;

    static RelaxedDensity make(const Mat3& K) {
        RelaxedDensity rd;
        rd.K = 0.5 * (K + K.transpose());
        rd.alpha_plus = compute_alpha(rd.K, +1);
        rd.alpha_minus = compute_alpha(rd.K, -1);
        rd.V_plus = zero_eigenspace(rd.K, rd.alpha_plus, +1);
        rd.V_minus = zero_eigenspace(rd.K, rd.alpha_minus, -1);
        return rd;
    }

    double Q(const Vec3& m) const { return quad(K, m); }
    double Q(const Mat2& M) const { return Q(to_vec(M)); }

    /// Q** = Q + alpha+ (det)^+ + alpha- (det)^-.
    double q_star(const Vec3& m) const {
        const double d = det_vec(m);
        return Q(m) + alpha_plus * std::max(d, 0.0) + alpha_minus * std::max(-d, 0.0);
    }
    double q_star(const Mat2& M) const { return q_star(to_vec(M)); }

    const std::vector<Vec3>& kernel(int sign) const { return sign > 0 ? V_plus : V_minus; }
    double alpha(int sign) const { return sign > 0 ? alpha_plus : alpha_minus; }
};

/// Linear map c -> vec(B C B^T) on vector forms, i.e. L_t for an orthonormal basis B = (B'|N).
inline Mat3 congruence_matrix(const Mat2& B) {
    Mat3 T;
    const Vec3 basis[3] = {Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
    for (int j = 0; j < 3; ++j) T.col(j) = to_vec(B * to_mat(basis[j]) * B.transpose());
    return T;
}

/// M^B: components of M in the basis B (orthonormal), i.e. L_t^{-1}(M).
inline Mat2 in_basis(const Mat2& M, const Mat2& B) { return B.transpose() * M * B; }
/// L_t(C) = B^{-T} C B^{-1}.
inline Mat2 from_basis(const Mat2& C, const Mat2& B) {
    const Mat2 Bi = B.inverse();
    return Bi.transpose() * C * Bi;
}

/// Plane span{e2, w} written as {alpha x + beta z = 0}: (alpha, beta) = (w3, -w1).
inline Vec2 plane_coefficients(const Vec3& w) { return Vec2(w(2), -w(0)); }

/// Moving basis B(t) = (B'(t)|N(t)) with transported tensor K_t and kernel vectors.
class MovingBasis {
public:
    MovingBasis(const RelaxedDensity& rd, const ReferenceCurve& ref) : rd_(&rd), ref_(&ref) {
        const int n = ref.size();
        K_t_.resize(n);
        w_plus_.resize(n);
        w_minus_.resize(n);
        for (int i = 0; i < n; ++i) {
            K_t_[i] = K_at(ref.t(i));
            w_plus_[i] = transported(rd.V_plus, ref.t(i));
            w_minus_[i] = transported(rd.V_minus, ref.t(i));
        }
        r_plus_ = min_plane_norm(rd.V_plus);
        r_minus_ = min_plane_norm(rd.V_minus);
    }

    const RelaxedDensity& density() const { return *rd_; }
    const ReferenceCurve& ref() const { return *ref_; }

    Mat2 basis_at(double t) const { return ref_->D_at(t); }
    /// Matrix of Q_t(C) = Q(L_t C) in vector form.
    Mat3 K_at(double t) const {
        const Mat3 T = congruence_matrix(basis_at(t));
        return T.transpose() * rd_->K * T;
    }
    /// w(t) = L_t^{-1}(v).
    Vec3 transport(const Vec3& v, double t) const {
        return to_vec(in_basis(to_mat(v), basis_at(t)));
    }
    std::vector<Vec3> transported(const std::vector<Vec3>& V, double t) const {
        std::vector<Vec3> out;
        for (const auto& v : V) out.push_back(transport(v, t));
        return out;
    }

    const Mat3& K_t(int i) const { return K_t_[i]; }
    const std::vector<Vec3>& w(int sign, int i) const { return sign > 0 ? w_plus_[i] : w_minus_[i]; }

    /// Lower bound r on |(alpha, beta)(t)| for the transported direction v (sampled in t).
    double plane_bound(int sign) const { return sign > 0 ? r_plus_ : r_minus_; }

    double min_plane_norm(const Vec3& v) const {
        double r = std::numeric_limits<double>::infinity();
        for (int i = 0; i < ref_->size(); ++i) {
            const double nn = plane_coefficients(transport(v, ref_->t(i))).norm();
            if (nn < 1e-8) {
                std::ostringstream os;
                os << "degenerate plane span{e2, w(t)} at t = " << ref_->t(i);
                throw ValidationError(os.str());
            }
            r = std::min(r, nn);
        }
        return r;
    }

private:
    double min_plane_norm(const std::vector<Vec3>& V) const {
        double r = std::numeric_limits<double>::infinity();
        for (const auto& v : V) r = std::min(r, min_plane_norm(v));
        return r;
    }

    const RelaxedDensity* rd_;
    const ReferenceCurve* ref_;
    std::vector<Mat3> K_t_;
    std::vector<std::vector<Vec3>> w_plus_, w_minus_;
    double r_plus_ = 0.0, r_minus_ = 0.0;
};

}  // namespace ribbon
