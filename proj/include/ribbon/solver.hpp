#pragma once

#include "ribbon/frames.hpp"
#include "ribbon/limit_energy.hpp"

#include <ceres/ceres.h>

#include <memory>
#include <random>

namespace ribbon {

using Vec6 = Eigen::Matrix<double, 6, 1>;

/// Nodal (mu, tau) on the reference grid.
struct DesignVector {
    std::vector<double> mu, tau;

    static DesignVector zeros(int n) { return {std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)}; }
    VecX pack() const {
        const int n = int(mu.size());
        VecX x(2 * n);
        for (int i = 0; i < n; ++i) x(i) = mu[i], x(n + i) = tau[i];
        return x;
    }
    static DesignVector unpack(const VecX& x) {
        const int n = int(x.size() / 2);
        DesignVector dv = zeros(n);
        for (int i = 0; i < n; ++i) dv.mu[i] = x(i), dv.tau[i] = x(n + i);
        return dv;
    }
};

/// Moebius seed: tau = pi / l, mu a small sinusoid.
inline DesignVector moebius_seed(const ReferenceCurve& ref, double amplitude = 0.1) {
    DesignVector dv = DesignVector::zeros(ref.size());
    for (int i = 0; i < ref.size(); ++i) {
        dv.tau[i] = kPi / ref.length();
        dv.mu[i] = amplitude * std::sin(2.0 * kPi * ref.t(i) / ref.length());
    }
    return dv;
}

enum class GradientMode { FiniteDifference, Adjoint };

struct ObjectiveValue {
    double value = 0.0;  ///< J + lambda.r + rho/2 |r|^2
    double J = 0.0;
    Vec6 residual = Vec6::Zero();  ///< (log(R(l) R_target^T), Gamma - y_bar)
    VecX gradient;
    bool barrier = false;  ///< frame collapse: value is the barrier constant
};

/// Limit energy plus an augmented-Lagrangian term for the endpoint conditions.
class Objective {
public:
    static constexpr double kBarrier = 1e9;

    Objective(const RelaxedDensity& rd, const ReferenceCurve& ref, const Frustration& frus, const BoundaryData& bd,
              int substeps = 4)
        : rd_(std::make_shared<const RelaxedDensity>(rd)), ref_(std::make_shared<const ReferenceCurve>(ref)),
          frus_(std::make_shared<const Frustration>(frus)), bd_(bd), substeps_(substeps), target_(bd.R_target(ref)) {
    }

    int size() const { return 2 * ref_->size(); }
    const ReferenceCurve& ref() const { return *ref_; }

    FramedCurve curve(const DesignVector& dv) const { return framed_curve_from(dv.mu, dv.tau, *ref_, substeps_); }

    Vec6 residual(const RotationPath& p) const {
        Vec6 r;
        r.head<3>() = log_rotation(p.end() * target_.transpose());
        r.tail<3>() = p.gamma - bd_.y_bar;
        return r;
    }

    ObjectiveValue eval(const VecX& x, double rho, const Vec6& lambda, bool gradient,
                        GradientMode mode = GradientMode::Adjoint) const {
        ObjectiveValue out = value_only(x, rho, lambda);
        if (!gradient || out.barrier) return out;
        if (mode == GradientMode::FiniteDifference) {
            out.gradient = fd_gradient(x, rho, lambda);
        } else {
            out.gradient = adjoint_gradient(x, rho, lambda, out.residual);
        }
        return out;
    }

    VecX fd_gradient(const VecX& x, double rho, const Vec6& lambda, double step = 1e-6) const {
        VecX g(x.size());
        for (int i = 0; i < x.size(); ++i) {
            VecX xp = x, xm = x;
            const double h = step * std::max(1.0, std::abs(x(i)));
            xp(i) += h;
            xm(i) -= h;
            g(i) = (value_only(xp, rho, lambda).value - value_only(xm, rho, lambda).value) / (2 * h);
        }
        return g;
    }

    /// J of the piecewise-linear (mu, tau): 2-point Gauss per cell, so that the energy sees the same
    /// curve as the frame (a nodal rule lets odd-even oscillations through); gradient optional.
    double energy(const DesignVector& dv, VecX* grad = nullptr) const {
        const int n = ref_->size();
        const double h = ref_->h();
        static const double c = 0.5 / std::sqrt(3.0);
        double J = 0.0;
        if (grad) *grad = VecX::Zero(2 * n);
        for (int i = 0; i + 1 < n; ++i)
            for (double f : {0.5 - c, 0.5 + c}) {
                const double t = ref_->t(i) + f * h;
                const double mu = (1 - f) * dv.mu[i] + f * dv.mu[i + 1];
                const double tau = (1 - f) * dv.tau[i] + f * dv.tau[i + 1];
                J += 0.5 * h * qbar(*rd_, *ref_, *frus_, t, mu, tau).value;
                if (!grad) continue;
                const double dm = 1e-6 * std::max(1.0, std::abs(mu)), dt = 1e-6 * std::max(1.0, std::abs(tau));
                const double qm = (qbar(*rd_, *ref_, *frus_, t, mu + dm, tau).value -
                                   qbar(*rd_, *ref_, *frus_, t, mu - dm, tau).value) / (2 * dm);
                const double qt = (qbar(*rd_, *ref_, *frus_, t, mu, tau + dt).value -
                                   qbar(*rd_, *ref_, *frus_, t, mu, tau - dt).value) / (2 * dt);
                (*grad)(i) += 0.5 * h * (1 - f) * qm;
                (*grad)(i + 1) += 0.5 * h * f * qm;
                (*grad)(n + i) += 0.5 * h * (1 - f) * qt;
                (*grad)(n + i + 1) += 0.5 * h * f * qt;
            }
        return J;
    }

    /// dJ/dx by the chain rule through the interpolation, plus the residual Jacobian from the first variation
    /// of the frame: delta R(l) R(l)^T = hat(R(l) int R^T da) and delta Gamma = int (Gamma - y) x (R^T da).
    VecX adjoint_gradient(const VecX& x, double rho, const Vec6& lambda, const Vec6& r) const {
        const DesignVector dv = DesignVector::unpack(x);
        VecX g;
        energy(dv, &g);
        const MatX Jr = residual_jacobian(dv, r);
        g += Jr.transpose() * (lambda + rho * r);
        return g;
    }

    /// 6 x 2n Jacobian of the endpoint residual (variational formula, 3-point Gauss per frame step).
    MatX residual_jacobian(const DesignVector& dv, const Vec6& r) const {
        const int n = ref_->size();
        const SkewField A = SkewField::from_samples(*ref_, dv.mu, dv.tau);
        const RotationPath p = solve_frame(A, (n - 1) * substeps_);
        const double h = ref_->h();
        Eigen::Matrix<double, 3, Eigen::Dynamic> Xi = Eigen::MatrixXd::Zero(3, 2 * n);
        Eigen::Matrix<double, 3, Eigen::Dynamic> G = Eigen::MatrixXd::Zero(3, 2 * n);
        static const double gx[3] = {-std::sqrt(0.6), 0.0, std::sqrt(0.6)};
        static const double gw[3] = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};
        for (std::size_t k = 0; k + 1 < p.t.size(); ++k) {
            const double a = p.t[k], b = p.t[k + 1];
            for (int q = 0; q < 3; ++q) {
                const double s = 0.5 * (a + b) + 0.5 * (b - a) * gx[q];
                const double wq = 0.5 * (b - a) * gw[q];
                const Mat3 Rs = p.R_at(s);
                const Vec3 e1 = Rs.transpose().col(0), e2 = Rs.transpose().col(1);
                const Vec3 arm = p.gamma - p.y_at(s);
                const double xs = std::clamp(s / h, 0.0, double(n - 1));
                const int i0 = std::min(int(xs), n - 2);
                const double f = xs - i0;
                for (int side = 0; side < 2; ++side) {
                    const int i = i0 + side;
                    const double phi = wq * (side ? f : 1.0 - f);
                    // mu_i moves a13: da = phi e2 in the vee convention; tau_i moves a23: da = -phi e1
                    Xi.col(i) += phi * e2;
                    G.col(i) += phi * arm.cross(e2);
                    Xi.col(n + i) -= phi * e1;
                    G.col(n + i) -= phi * arm.cross(e1);
                }
            }
        }
        const Mat3 Jl_inv = right_jacobian(r.head<3>()).transpose().inverse();
        MatX Jr(6, 2 * n);
        Jr.topRows<3>() = Jl_inv * p.end() * Xi;
        Jr.bottomRows<3>() = G;
        return Jr;
    }

    ObjectiveValue value_only(const VecX& x, double rho, const Vec6& lambda) const {
        ObjectiveValue out;
        const DesignVector dv = DesignVector::unpack(x);
        FramedCurve fc;
        try {
            fc = curve(dv);
        } catch (const SolverError&) {
            out.barrier = true;
            out.value = kBarrier * (1.0 + x.squaredNorm());
            return out;
        }
        out.J = energy(dv);
        out.residual = residual(fc.path);
        out.value = out.J + lambda.dot(out.residual) + 0.5 * rho * out.residual.squaredNorm();
        return out;
    }

private:
    // owned copies, so temporaries may be passed in
    std::shared_ptr<const RelaxedDensity> rd_;
    std::shared_ptr<const ReferenceCurve> ref_;
    std::shared_ptr<const Frustration> frus_;
    BoundaryData bd_;
    int substeps_;
    Mat3 target_;
};

/// Value and gradient of the penalized objective for one design vector.
inline ObjectiveValue objective(const RelaxedDensity& rd, const ReferenceCurve& ref, const Frustration& frus,
                                const DesignVector& dv, const BoundaryData& bd, double penalty = 1.0,
                                GradientMode mode = GradientMode::FiniteDifference) {
    const Objective obj(rd, ref, frus, bd);
    return obj.eval(dv.pack(), penalty, Vec6::Zero(), true, mode);
}

// ---------------------------------------------------------------------------
// Minimization.

struct MinimizeOptions {
    double rho0 = 10.0;
    double rho_factor = 10.0;
    int stages = 5;
    int extra_stages = 10;  ///< multiplier updates at the final penalty if the tolerances are not met yet
    int max_iterations = 2000;  ///< per stage
    double grad_tol = 1e-6;
    double residual_tol = 1e-6;
    GradientMode mode = GradientMode::Adjoint;
    int substeps = 4;
};

struct MinimizeReport {
    FramedCurve curve;
    DesignVector design;
    LimitTrace limit;  ///< nodal trace (its J is the nodal Simpson value)
    double J = 0.0;    ///< energy of the piecewise-linear curve
    Vec6 residual = Vec6::Zero();
    double residual_norm = 0.0;
    double grad_norm = 0.0;  ///< gradient of the Lagrangian J + lambda.r at the end
    Vec6 lambda = Vec6::Zero();
    std::vector<double> trace;  ///< objective values of accepted iterations
    std::vector<int> stage;     ///< stage of each trace entry
    int barrier_hits = 0;
    int stages_run = 0;
    bool converged = false;

    /// Non-increasing objective inside every stage.
    bool monotone(double tol = 1e-12) const {
        for (std::size_t i = 1; i < trace.size(); ++i)
            if (stage[i] == stage[i - 1] && trace[i] > trace[i - 1] + tol * std::max(1.0, std::abs(trace[i - 1])))
                return false;
        return true;
    }
};

namespace detail {

class CeresObjective : public ceres::FirstOrderFunction {
public:
    CeresObjective(const Objective& obj, double rho, const Vec6& lambda, GradientMode mode, int* barrier)
        : obj_(&obj), rho_(rho), lambda_(lambda), mode_(mode), barrier_(barrier) {}

    bool Evaluate(const double* x, double* cost, double* gradient) const override {
        const VecX v = Eigen::Map<const VecX>(x, obj_->size());
        const auto r = obj_->eval(v, rho_, lambda_, gradient != nullptr, mode_);
        if (r.barrier) {
            ++*barrier_;
            return false;  // the line search backs off
        }
        *cost = r.value;
        if (gradient) Eigen::Map<VecX>(gradient, obj_->size()) = r.gradient;
        return true;
    }
    int NumParameters() const override { return obj_->size(); }

private:
    const Objective* obj_;
    double rho_;
    Vec6 lambda_;
    GradientMode mode_;
    int* barrier_;
};

class TraceCallback : public ceres::IterationCallback {
public:
    TraceCallback(MinimizeReport* rep, int stage) : rep_(rep), stage_(stage) {}
    ceres::CallbackReturnType operator()(const ceres::IterationSummary& s) override {
        if (s.step_is_successful || s.iteration == 0) {
            rep_->trace.push_back(s.cost);
            rep_->stage.push_back(stage_);
        }
        return ceres::SOLVER_CONTINUE;
    }

private:
    MinimizeReport* rep_;
    int stage_;
};

}  // namespace detail

/// L-BFGS on nodal (mu, tau) with an augmented Lagrangian for the endpoint data: the penalty grows by
/// rho_factor per stage and the multipliers are updated after every stage.
inline MinimizeReport minimize(const RelaxedDensity& rd, const ReferenceCurve& ref, const Frustration& frus,
                               const BoundaryData& bd, const DesignVector& init, const MinimizeOptions& opt = {}) {
    bd.validate(ref);
    if (int(init.mu.size()) != ref.size() || int(init.tau.size()) != ref.size())
        throw ValidationError("minimize: initial design does not match the reference grid");
    const Objective obj(rd, ref, frus, bd, opt.substeps);
    MinimizeReport rep;
    VecX x = init.pack();
    Vec6 lambda = Vec6::Zero();
    double rho = opt.rho0;
    const int total = opt.stages + opt.extra_stages;
    for (int stage = 0; stage < total; ++stage) {
        ceres::GradientProblem problem(new detail::CeresObjective(obj, rho, lambda, opt.mode, &rep.barrier_hits));
        ceres::GradientProblemSolver::Options o;
        o.line_search_direction_type = ceres::LBFGS;
        o.max_num_iterations = opt.max_iterations;
        o.gradient_tolerance = 1e-3 * opt.grad_tol;
        o.function_tolerance = 1e-16;
        o.parameter_tolerance = 1e-16;
        o.logging_type = ceres::SILENT;
        detail::TraceCallback cb(&rep, stage);
        o.callbacks.push_back(&cb);
        ceres::GradientProblemSolver::Summary summary;
        ceres::Solve(o, problem, x.data(), &summary);
        rep.stages_run = stage + 1;

        const auto v = obj.eval(x, 0.0, lambda, false);
        if (v.barrier) throw SolverError("minimize: iterate left the frame chart (barrier active at stage end)");
        lambda += rho * v.residual;
        // gradient of the Lagrangian J + lambda.r at the updated multipliers
        rep.grad_norm = obj.eval(x, 0.0, lambda, true, opt.mode).gradient.norm();
        rep.residual = v.residual;
        rep.residual_norm = v.residual.norm();
        if (stage + 1 >= opt.stages && rep.residual_norm <= opt.residual_tol && rep.grad_norm <= opt.grad_tol) {
            rep.converged = true;
            break;
        }
        if (stage + 1 < opt.stages) rho *= opt.rho_factor;
    }
    rep.lambda = lambda;
    rep.design = DesignVector::unpack(x);
    rep.curve = obj.curve(rep.design);
    rep.limit = limit_functional(rd, ref, frus, rep.curve);
    rep.J = obj.energy(rep.design);
    if (!rep.converged) {
        std::ostringstream os;
        os << "minimize: penalty continuation stalled after " << rep.stages_run << " stages (residual "
           << rep.residual_norm << ", gradient " << rep.grad_norm << ", J " << rep.J << ")";
        throw SolverError(os.str());
    }
    return rep;
}

}  // namespace ribbon
