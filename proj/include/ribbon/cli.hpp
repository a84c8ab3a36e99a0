#pragma once

#include "ribbon/energy.hpp"
#include "ribbon/io.hpp"
#include "ribbon/solver.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <iostream>
#include <sys/wait.h>
#include <unistd.h>

namespace ribbon::cli {

inline constexpr const char* kVersion = "0.1.0";

using io::json;

/// Exit codes: 0 success, 1 a check reported failure, 2 validation error, 3 solver failure.
enum Exit { kOk = 0, kCheckFailed = 1, kValidation = 2, kSolver = 3 };

/// Config files: TOML-like key = value lines, or a JSON object (nested objects become sections).
class ConfigReader : public CLI::ConfigTOML {
public:
    std::vector<CLI::ConfigItem> from_config(std::istream& is) const override {
        std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        const auto first = text.find_first_not_of(" \t\r\n");
        if (first == std::string::npos || text[first] != '{') {
            std::istringstream ss(text);
            return CLI::ConfigTOML::from_config(ss);
        }
        json j;
        try {
            j = json::parse(text);
        } catch (const json::exception& e) {
            throw ValidationError(std::string("config: ") + e.what());
        }
        std::vector<CLI::ConfigItem> out;
        flatten(j, {}, out);
        return out;
    }

private:
    static std::string scalar(const json& v) {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_number_float()) return io::fmt17(v.get<double>());
        return v.dump();
    }
    static void flatten(const json& j, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.value().is_object()) {
                auto p = parents;
                p.push_back(it.key());
                flatten(it.value(), p, out);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = it.key();
            if (it.value().is_array())
                for (const auto& v : it.value()) item.inputs.push_back(scalar(v));
            else
                item.inputs.push_back(scalar(it.value()));
            out.push_back(std::move(item));
        }
    }
};

/// Options shared by the subcommands (the fields a run is configured by).
struct RunConfig {
    std::string material, curve, pi0, bd, preset, out, report;
    bool isotropic = false, flat = false;
    double length = 1.0;
    int grid = 257;
    double tol = 1e-6;
};

namespace detail {

inline void add_material(CLI::App* s, RunConfig& c) {
    s->add_option("--material", c.material, "material JSON file")->check(CLI::ExistingFile);
    s->add_flag("--isotropic", c.isotropic, "isotropic material Q(M) = |M|^2 (default)");
}

inline void add_curve(CLI::App* s, RunConfig& c) {
    s->add_option("--curve", c.curve, "curve JSON file")->check(CLI::ExistingFile);
    s->add_flag("--flat", c.flat, "flat reference of length --length (default)");
    s->add_option("--length", c.length, "length of the flat reference")->check(CLI::PositiveNumber);
    s->add_option("--grid", c.grid, "reference grid size (>= 33)");
}

inline RelaxedDensity load_material(const RunConfig& c) {
    if (!c.material.empty() && c.isotropic) throw ValidationError("--material and --isotropic are exclusive");
    if (c.material.empty()) return RelaxedDensity::make(isotropic_K());
    return RelaxedDensity::make(io::material_from_json(io::load_json(c.material)));
}

inline ReferenceCurve load_curve(const RunConfig& c) {
    if (c.grid < 33) throw ValidationError("--grid must be at least 33");
    if (!c.curve.empty() && c.flat) throw ValidationError("--curve and --flat are exclusive");
    if (c.curve.empty()) return ReferenceCurve::build(CurveSpec::flat(c.length, c.grid));
    return ReferenceCurve::build(io::curve_from_json(io::load_json(c.curve), c.grid));
}

inline BoundaryData load_boundary(const std::string& arg, const ReferenceCurve& ref) {
    BoundaryData bd = arg == "moebius" ? moebius_preset(ref) : io::boundary_from_json(io::load_json(arg));
    bd.validate(ref);
    if (!bd.warning.empty()) std::cerr << "warning: " << bd.warning << "\n";
    return bd;
}

inline void emit(const RunConfig& c, const json& report) {
    const std::string text = io::to_text(report);
    if (c.report.empty())
        std::cout << text;
    else
        io::write_file(c.report, text);
}

inline json admissibility_json(const AdmissibilityReport& a) {
    return {{"k_residual", a.k_residual},
            {"rotation_residual", a.rotation_residual},
            {"translation_residual", a.translation_residual},
            {"pass", a.pass}};
}

inline std::string timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return buf;
}

inline json surface_json(const SurfaceReport& r, const RuledSurface& S) {
    return {{"eta", S.eta},          {"grid", json::array({S.nt, S.ns})}, {"isometry", r.isometry},
            {"detPi", r.detPi},      {"centerline", r.centerline},        {"straightness", r.straightness},
            {"beta", r.beta},        {"pass", r.pass}};
}

inline json boundary_report_json(const BoundaryReport& b) {
    return {{"left", b.left}, {"right", b.right}, {"start", b.start}, {"end", b.end}, {"pass", b.pass}};
}

inline void write_meshes(const RuledSurface& S, const SurfaceForms& f, const std::string& prefix, bool stamp) {
    write_obj(S, prefix + ".obj");
    write_vtk(S, f, prefix + ".vtk", stamp ? timestamp() : "");
}

/// Recovery field of M with frames resolved at half the surface step, then its ruled surface.
inline std::pair<RecoveryFields, RuledSurface> recovery_surface(const RelaxedDensity& rd, const ReferenceCurve& ref,
                                                                const SymField2& M, const BoundaryData* bd, int n,
                                                                double theta, double h) {
    const MovingBasis mb(rd, ref);
    RecoveryOptions ro;
    ro.theta = theta;
    ro.h_max = 0.5 * h;
    auto F = build_recovery(rd, ref, mb, M, bd, n, ro);
    SurfaceOptions so;
    so.h = h;
    auto S = build_isometry(F, so);
    if (S.eta < 4 * h)
        std::cerr << "warning: ruled chart half-width eta = " << S.eta << " is not resolved by step " << h
                  << "; expect large surface errors unless --step is well below eta\n";
    return {std::move(F), std::move(S)};
}

// ---------------------------------------------------------------------------
// Subcommands.

inline int cmd_alpha(const RunConfig& c) {
    const auto rd = load_material(c);
    auto vecs = [](const std::vector<Vec3>& V) {
        json a = json::array();
        for (const auto& v : V) a.push_back(io::to_json(v));
        return a;
    };
    emit(c, {{"alpha_plus", rd.alpha_plus},
             {"alpha_minus", rd.alpha_minus},
             {"Vplus", vecs(rd.V_plus)},
             {"Vminus", vecs(rd.V_minus)}});
    return kOk;
}

inline int cmd_curve(const RunConfig& c) {
    const auto ref = load_curve(c);
    const std::string csv = io::curve_csv(ref);
    if (c.out.empty()) {
        std::cout << csv;
        return kOk;
    }
    io::write_file(c.out, csv);
    emit(c, {{"length", ref.length()}, {"size", ref.size()}, {"kmax", ref.kmax()}, {"eps_max", ref.eps_max()}});
    return kOk;
}

inline int cmd_qbar(const RunConfig& c, double mu, double tau, double x1, const std::string& trace) {
    const auto rd = load_material(c);
    const auto ref = load_curve(c);
    const auto frus = io::frustration_from(c.pi0);
    const auto v = qbar(rd, ref, frus, x1, mu, tau);
    if (!trace.empty()) {
        const std::vector<double> m(ref.size(), mu), t(ref.size(), tau);
        io::write_file(trace, io::trace_csv(limit_functional(rd, ref, frus, m, t)));
    }
    emit(c, {{"value", v.value}, {"gamma_star", v.gamma_star}, {"branch", to_string(v.branch)}});
    return kOk;
}

struct DesignArgs {
    double mu = 0.0, tau = 0.0;
    std::string design;
};

inline std::pair<std::vector<double>, std::vector<double>> load_design(const DesignArgs& d, const ReferenceCurve& ref) {
    if (!d.design.empty()) return io::design_from_csv(ref, d.design);
    return {std::vector<double>(ref.size(), d.mu), std::vector<double>(ref.size(), d.tau)};
}

inline int cmd_frame(const RunConfig& c, const DesignArgs& d, int substeps) {
    const auto rd = load_material(c);
    const auto ref = load_curve(c);
    const auto frus = io::frustration_from(c.pi0);
    const auto [mu, tau] = load_design(d, ref);
    const auto fc = framed_curve_from(mu, tau, ref, substeps);
    if (!c.out.empty()) io::write_file(c.out, io::frame_csv(fc));
    json rep = {{"gamma", io::to_json(fc.path.gamma)},
                {"R_end", io::to_json(fc.path.end())},
                {"orthogonality_drift", orthogonality_drift(fc.path)},
                {"J", limit_functional(rd, ref, frus, fc).J},
                {"end_data", io::boundary_to_json(end_data(fc, ref))}};
    if (!c.bd.empty()) {
        const auto bd = load_boundary(c.bd, ref);
        rep["admissible"] = admissibility_json(
            is_admissible(SkewField::from_samples(ref, mu, tau), fc.path, ref, bd, c.tol));
    }
    emit(c, rep);
    return kOk;
}

inline int cmd_relax(const RunConfig& c, const std::string& field, int n, double theta) {
    const auto rd = load_material(c);
    const auto ref = load_curve(c);
    const SymField2 M = io::field_from(field);
    const MovingBasis mb(rd, ref);
    RecoveryOptions ro;
    ro.theta = theta;
    std::optional<BoundaryData> bd;
    if (!c.bd.empty()) bd = load_boundary(c.bd, ref);
    const auto F = build_recovery(rd, ref, mb, M, bd ? &*bd : nullptr, n, ro);
    if (!c.out.empty()) io::write_file(c.out, io::field_csv(F));
    json weak = json::array();
    for (const auto& r : weak_residuals(F, M, standard_tests(ref.length()))) weak.push_back(io::to_json(r));
    emit(c, {{"n", n},
             {"energy_M", f_relaxed(rd, ref, M)},
             {"energy_Mn", F.integrate([&](double t) { return rd.Q(F.M(t)) * ref.D_at(t).determinant(); })},
             {"weak_residuals", weak},
             {"ctilde", F.ctilde},
             {"endpoint_residual", F.endpoint_residual},
             {"correction_norm", F.correction_norm}});
    return kOk;
}

struct SurfaceArgs {
    std::string field;
    int n = 16;
    double eps = 0.0, theta = 0.5, h = 1.0 / 512.0;
    bool no_timestamp = false;
};

inline int cmd_surface(const RunConfig& c, const SurfaceArgs& a) {
    const auto rd = load_material(c);
    const auto ref = load_curve(c);
    const auto frus = io::frustration_from(c.pi0);
    const SymField2 M = io::field_from(a.field);
    std::optional<BoundaryData> bd;
    if (!c.bd.empty()) bd = load_boundary(c.bd, ref);
    const auto [F, S] = recovery_surface(rd, ref, M, bd ? &*bd : nullptr, a.n, a.theta, a.h);
    const auto f = fundamental_forms(S);
    const auto path = F.solve();
    const auto r = check_surface(S, f, [&F](double t) { return F.M(t); }, &path, c.tol);
    json rep = surface_json(r, S);
    rep["n"] = a.n;
    if (a.eps > 0) {
        const StripChart strip(ref, a.eps);
        const auto R = rescaled_forms(S, strip, std::min(a.h, a.eps / 16), true);
        rep["eps"] = a.eps;
        rep["s_max"] = R.s_max;
        rep["consistency"] = R.consistency;
        rep["J_eps"] = strip_energy(R, strip, rd, frus);
        if (bd) rep["boundary"] = boundary_report_json(check_boundary_conditions(S, strip, *bd));
    }
    if (!c.out.empty()) write_meshes(S, f, c.out, !a.no_timestamp);
    emit(c, rep);
    return r.pass ? kOk : kCheckFailed;
}

struct SweepArgs {
    std::vector<double> eps;
    double eps0 = 1.0, mu = 0.0, tau = 0.0, mono_tol = 1e-9, h_max = 0.0, theta = 0.5;
    std::string coupling = "linear", design;
    int jobs = 1;
};

struct SweepProblem {
    RelaxedDensity rd;
    ReferenceCurve ref;
    Frustration frus;
    FramedCurve fc;
    BoundaryData bd;
    SweepOptions opt;
};

inline SweepProblem sweep_problem(const RunConfig& c, const SweepArgs& a) {
    if (c.preset == "cylinder") {
        auto ref = ReferenceCurve::build(CurveSpec::flat(1.0, 257));
        const std::vector<double> mu(ref.size(), 1.0), tau(ref.size(), 0.0);
        auto fc = framed_curve_from(mu, tau, ref);
        SweepOptions o;
        o.eps0 = 0.8;
        o.h_max = 1.0 / 512;
        auto bd = end_data(fc, ref);
        return {RelaxedDensity::make(isotropic_K()), std::move(ref), Frustration(), std::move(fc), bd, o};
    }
    if (c.preset == "laminate") {
        // long flat strip bent uniformly against the natural curvature 2c I: det M > 0, laminated recovery
        const double c0 = 1.0 / 64;
        auto ref = ReferenceCurve::build(CurveSpec::flat(256.0, 1025));
        const std::vector<double> mu(ref.size(), c0), tau(ref.size(), 0.0);
        auto fc = framed_curve_from(mu, tau, ref);
        SweepOptions o;
        o.eps0 = 3.2;
        o.recovery.theta = 100.0;
        auto bd = end_data(fc, ref);
        return {RelaxedDensity::make(isotropic_K()), std::move(ref),
                Frustration::constant(2 * c0 * Mat2::Identity()), std::move(fc), bd, o};
    }
    if (!c.preset.empty()) throw ValidationError("unknown preset '" + c.preset + "' (cylinder, laminate)");
    auto rd = load_material(c);
    auto ref = load_curve(c);
    auto frus = io::frustration_from(c.pi0);
    DesignArgs d{a.mu, a.tau, a.design};
    const auto [mu, tau] = load_design(d, ref);
    auto fc = framed_curve_from(mu, tau, ref);
    const BoundaryData bd = c.bd.empty() ? end_data(fc, ref) : load_boundary(c.bd, ref);
    SweepOptions o;
    o.eps0 = a.eps0;
    o.h_max = a.h_max;
    o.recovery.theta = a.theta;
    return {std::move(rd), std::move(ref), std::move(frus), std::move(fc), bd, o};
}

/// One sweep entry per child process, at most `jobs` at a time; results come back through pipes.
inline std::vector<EnergyEntry> sweep_in_processes(const SweepProblem& p, const std::vector<double>& eps, int jobs) {
    std::vector<EnergyEntry> out(eps.size());
    for (std::size_t b = 0; b < eps.size(); b += std::size_t(jobs)) {
        std::vector<std::pair<pid_t, int>> kids;
        for (std::size_t i = b; i < std::min(eps.size(), b + std::size_t(jobs)); ++i) {
            int fd[2];
            if (pipe(fd) != 0) throw SolverError("gamma-check: pipe failed");
            const pid_t pid = fork();
            if (pid < 0) throw SolverError("gamma-check: fork failed");
            if (pid == 0) {
                close(fd[0]);
                std::string msg;
                int code = 0;
                try {
                    const auto e = gamma_sweep(p.rd, p.ref, p.frus, p.fc, p.bd, {eps[i]}, p.opt).entries.at(0);
                    msg = io::fmt17(e.eps) + " " + std::to_string(e.n) + " " + io::fmt17(e.J_eps) + " " +
                          io::fmt17(e.gap) + " " + io::fmt17(e.eta);
                } catch (const ValidationError& e) {
                    code = kValidation;
                    msg = e.what();
                } catch (const std::exception& e) {
                    code = kSolver;
                    msg = e.what();
                }
                const std::string text = std::to_string(code) + " " + msg;
                [[maybe_unused]] const auto w = write(fd[1], text.data(), text.size());
                close(fd[1]);
                _exit(0);
            }
            close(fd[1]);
            kids.emplace_back(pid, fd[0]);
        }
        for (std::size_t k = 0; k < kids.size(); ++k) {
            std::string text;
            char buf[4096];
            ssize_t got;
            while ((got = read(kids[k].second, buf, sizeof buf)) > 0) text.append(buf, std::size_t(got));
            close(kids[k].second);
            waitpid(kids[k].first, nullptr, 0);
            std::istringstream is(text);
            int code = kSolver;
            is >> code;
            if (code != 0) {
                std::string msg;
                std::getline(is, msg);
                if (code == kValidation) throw ValidationError(msg);
                throw SolverError(msg);
            }
            EnergyEntry& e = out[b + k];
            std::string se, sj, sg, sh;
            is >> se >> e.n >> sj >> sg >> sh;
            e.eps = std::stod(se);
            e.J_eps = std::stod(sj);
            e.gap = std::stod(sg);
            e.eta = std::stod(sh);
        }
    }
    return out;
}

inline int cmd_gamma_check(const RunConfig& c, const SweepArgs& a) {
    if (a.eps.empty()) throw ValidationError("gamma-check: --eps-list is required");
    for (double e : a.eps)
        if (!(e > 0)) throw ValidationError("gamma-check: eps values must be positive");
    auto p = sweep_problem(c, a);
    if (a.coupling == "sqrt")
        p.opt.coupling = Coupling::Sqrt;
    else if (a.coupling != "linear")
        throw ValidationError("--coupling must be linear or sqrt");
    EnergyReport rep;
    if (a.jobs > 1) {
        rep.J_limit = limit_functional(p.rd, p.ref, p.frus, p.fc).J;
        rep.entries = sweep_in_processes(p, a.eps, a.jobs);
    } else {
        rep = gamma_sweep(p.rd, p.ref, p.frus, p.fc, p.bd, a.eps, p.opt);
    }
    std::vector<std::vector<double>> rows;
    json entries = json::array();
    for (const auto& e : rep.entries) {
        rows.push_back({e.eps, double(e.n), e.J_eps, rep.J_limit, e.gap});
        entries.push_back({{"eps", e.eps}, {"n", e.n}, {"J_eps", e.J_eps}, {"gap", e.gap}, {"eta", e.eta}});
    }
    const std::string csv = io::csv_text({"eps", "n", "J_eps", "J_limit", "gap"}, rows);
    const bool mono = rep.monotone(a.mono_tol);
    if (c.out.empty())
        std::cout << csv;
    else
        io::write_file(c.out, csv);
    if (!c.report.empty())
        io::write_file(c.report, io::to_text({{"J_limit", rep.J_limit}, {"entries", entries}, {"monotone", mono}}));
    if (!mono) std::cerr << "gamma-check: gaps are not monotone within " << a.mono_tol << "\n";
    return mono ? kOk : kCheckFailed;
}

struct MinimizeArgs {
    std::string seed, mesh, frame_out;
    int n = 16;
    double eps = 0.0, h = 1.0 / 512.0, theta = 0.5;
    MinimizeOptions opt;
    bool no_timestamp = false;
};

inline int cmd_minimize(const RunConfig& c, MinimizeArgs a) {
    const auto rd = load_material(c);
    const auto ref = load_curve(c);
    const auto frus = io::frustration_from(c.pi0);
    if (!c.bd.empty() && !c.preset.empty()) throw ValidationError("--bd and --preset are exclusive");
    if (!c.preset.empty() && c.preset != "moebius") throw ValidationError("unknown preset '" + c.preset + "' (moebius)");
    const std::string bd_arg = c.preset.empty() ? c.bd : c.preset;
    if (bd_arg.empty()) throw ValidationError("minimize: --bd or --preset is required");
    const auto bd = load_boundary(bd_arg, ref);

    const std::string seed = a.seed.empty() ? (bd_arg == "moebius" ? "moebius" : "zero") : a.seed;
    DesignVector init;
    if (seed == "moebius")
        init = moebius_seed(ref);
    else if (seed == "zero")
        init = DesignVector::zeros(ref.size());
    else {
        auto [m, t] = io::design_from_csv(ref, seed);
        init = {std::move(m), std::move(t)};
    }
    a.opt.residual_tol = c.tol;
    const auto rep = minimize(rd, ref, frus, bd, init, a.opt);
    if (!a.frame_out.empty()) io::write_file(a.frame_out, io::frame_csv(rep.curve));
    json out = {{"J", rep.J},
                {"J_nodal", rep.limit.J},
                {"residual_norm", rep.residual_norm},
                {"grad_norm", rep.grad_norm},
                {"stages", rep.stages_run},
                {"iterations", int(rep.trace.size())},
                {"monotone", rep.monotone()},
                {"converged", rep.converged},
                {"seed", seed}};
    if (!a.mesh.empty()) {
        const SymField2 M = limit_field(ref, rep.limit);
        const auto [F, S] = recovery_surface(rd, ref, M, &bd, a.n, a.theta, a.h);
        const auto f = fundamental_forms(S);
        const auto path = F.solve();
        json s = surface_json(check_surface(S, f, [&F](double t) { return F.M(t); }, &path), S);
        s["n"] = a.n;
        if (a.eps > 0) {
            const StripChart strip(ref, a.eps);
            s["eps"] = a.eps;
            s["J_eps"] = strip_energy(S, strip, rd, frus, std::min(a.h, a.eps / 16));
            s["boundary"] = boundary_report_json(check_boundary_conditions(S, strip, bd));
        }
        write_meshes(S, f, a.mesh, !a.no_timestamp);
        out["surface"] = s;
    }
    emit(c, out);
    return kOk;
}

// ---------------------------------------------------------------------------
// Self-test: small closed-form examples.

inline int self_test(std::ostream& os) {
    int failed = 0;
    auto check = [&](const std::string& name, bool ok) {
        os << (ok ? "PASS " : "FAIL ") << name << "\n";
        failed += ok ? 0 : 1;
    };
    auto run = [&](const std::string& name, const std::function<bool()>& f) {
        try {
            check(name, f());
        } catch (const std::exception& e) {
            os << "FAIL " << name << " (" << e.what() << ")\n";
            ++failed;
        }
    };
    const auto iso = RelaxedDensity::make(isotropic_K());
    const auto flat = ReferenceCurve::build(CurveSpec::flat(1.0, 33));
    run("alpha isotropic = 2, 2", [&] {
        return std::abs(iso.alpha_plus - 2) < 1e-10 && std::abs(iso.alpha_minus - 2) < 1e-10;
    });
    run("alpha diag(1, 1, 1/8) = 1/2, 2", [&] {
        const auto rd = RelaxedDensity::make(K_from_entries({1, 1, 0.125, 0, 0, 0}));
        return std::abs(rd.alpha_plus - 0.5) < 1e-10 && std::abs(rd.alpha_minus - 2) < 1e-10;
    });
    run("qbar(1, 1) = 4 with gamma* = 1", [&] {
        const auto v = qbar(iso, flat, Frustration(), 0.5, 1.0, 1.0);
        return std::abs(v.value - 4) < 1e-12 && std::abs(v.gamma_star - 1) < 1e-12;
    });
    run("qbar(2, 1) = (mu^2 + tau^2)^2 / mu^2", [&] {
        return std::abs(qbar(iso, flat, Frustration(), 0.5, 2.0, 1.0).value - 6.25) < 1e-12;
    });
    run("frame of a constant bend closes on the circle", [&] {
        const auto p = solve_frame(SkewField::constant(2 * kPi, 0.0, 1.0, 0.0), 256);
        return (p.end() - Mat3::Identity()).norm() < 1e-8 && p.gamma.norm() < 1e-8;
    });
    run("laminate split of diag(1, -1) along (1, -1, 0)", [&] {
        const MovingBasis mb(iso, flat);
        const auto s = split(iso, mb, 0.5, Vec3(1, 1, 0), Vec3(1, -1, 0));
        return std::abs(s.s1 - 1) < 1e-14 && std::abs(s.s2 + 1) < 1e-14;
    });
    run("flat chart half-width 1/2", [&] { return std::abs(chart_width(flat, constant_ruling(flat, 0)).eta - 0.5) < 1e-15; });
    run("cylinder strip energy = 1", [&] {
        const auto path = solve_frame(SkewField::constant(1.0, 0.0, 1.0, 0.0), 256);
        SurfaceOptions o;
        o.h = 1.0 / 128;
        const auto S = build_isometry(flat, path, constant_ruling(flat, 0.0), o);
        const StripChart strip(flat, 0.1);
        return std::abs(strip_energy(S, strip, iso, Frustration(), 1.0 / 128) - 1.0) < 1e-6;
    });
    run("Moebius data penalize the straight strip", [&] {
        const auto v = objective(iso, flat, Frustration(), DesignVector::zeros(flat.size()), moebius_preset(flat));
        return v.J == 0.0 && v.value > 1.0;
    });
    os << (failed ? "self-test: " + std::to_string(failed) + " failed\n" : "self-test: all passed\n");
    return failed ? kCheckFailed : kOk;
}

}  // namespace detail

/// Replaces "--config FILE" by the options it lists. Keys given explicitly on the command line win;
/// [section] keys apply only to the subcommand of that name.
inline std::vector<std::string> expand_config(std::vector<std::string> args) {
    const auto it = std::find(args.begin(), args.end(), "--config");
    if (it == args.end()) return args;
    if (it + 1 == args.end()) throw ValidationError("--config needs a file name");
    const std::string file = *(it + 1);
    std::string sub;
    for (auto a = args.begin() + 1; a != it; ++a)
        if (!a->empty() && (*a)[0] != '-') {
            sub = *a;
            break;
        }
    std::istringstream is(io::read_text(file));
    std::vector<CLI::ConfigItem> items;
    try {
        items = ConfigReader().from_config(is);
    } catch (const CLI::ParseError& e) {
        throw ValidationError("config " + file + ": " + e.what());
    }
    std::vector<std::string> extra;
    for (const auto& item : items) {
        if (item.name == "++" || item.name == "--") continue;  // section markers
        if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == sub)) continue;
        const std::string flag = "--" + item.name;
        if (std::find(args.begin(), args.end(), flag) != args.end()) continue;
        if (item.inputs.size() == 1 && (item.inputs[0] == "true" || item.inputs[0] == "false")) {
            if (item.inputs[0] == "true") extra.push_back(flag);
            continue;
        }
        std::string value;
        for (std::size_t k = 0; k < item.inputs.size(); ++k) value += (k ? "," : "") + item.inputs[k];
        extra.push_back(flag);
        extra.push_back(value);
    }
    const auto pos = args.erase(it, it + 2);
    args.insert(pos, extra.begin(), extra.end());
    return args;
}

/// Command-line entry point; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& err = std::cerr) {
    CLI::App app{"ribbon: relaxed ribbon energies, recovery laminates, developable surfaces and the limit solver",
                 "ribbon"};
    app.set_version_flag("--version", std::string("ribbon ") + kVersion);
    bool self = false;
    app.add_flag("--self-test", self, "run the built-in example checks");
    app.require_subcommand(0, 1);

    RunConfig c;
    auto common = [&](CLI::App* s) {
        s->add_option("--config", "TOML-like key = value file or JSON object with option values");
        s->add_option("--tol", c.tol, "tolerance")->check(CLI::PositiveNumber);
        s->add_option("--report", c.report, "write the JSON report here instead of stdout");
    };

    auto* alpha = app.add_subcommand("alpha", "relaxation constants and kernels of the material");
    common(alpha);
    detail::add_material(alpha, c);

    auto* curve = app.add_subcommand("curve", "sample table of the reference curve");
    common(curve);
    detail::add_curve(curve, c);
    curve->add_option("--out", c.out, "CSV output (stdout if omitted)");

    double q_mu = 0, q_tau = 0, q_x1 = 0;
    std::string q_trace;
    auto* qb = app.add_subcommand("qbar", "limit density at one point");
    common(qb);
    detail::add_material(qb, c);
    detail::add_curve(qb, c);
    qb->add_option("--mu", q_mu)->required();
    qb->add_option("--tau", q_tau)->required();
    qb->add_option("--x1", q_x1, "arc-length position");
    qb->add_option("--pi0", c.pi0, "natural curvature P11,P12,P22 or CSV t,P11,P12,P22");
    qb->add_option("--trace", q_trace, "CSV trace for constant (mu, tau) along the grid");

    detail::DesignArgs fd;
    int substeps = 4;
    auto* fr = app.add_subcommand("frame", "frame and centreline of a (mu, tau) design");
    common(fr);
    detail::add_material(fr, c);
    detail::add_curve(fr, c);
    fr->add_option("--mu", fd.mu, "constant mu");
    fr->add_option("--tau", fd.tau, "constant tau");
    fr->add_option("--design", fd.design, "CSV t,mu,tau")->check(CLI::ExistingFile);
    fr->add_option("--substeps", substeps, "frame steps per grid cell")->check(CLI::PositiveNumber);
    fr->add_option("--pi0", c.pi0, "natural curvature");
    fr->add_option("--bd", c.bd, "boundary data JSON or 'moebius'");
    fr->add_option("--out", c.out, "frame CSV");

    std::string field;
    int rn = 16;
    double rtheta = 0.5;
    auto* rl = app.add_subcommand("relax", "laminate recovery field M_n of a field M");
    common(rl);
    detail::add_material(rl, c);
    detail::add_curve(rl, c);
    rl->add_option("--field", field, "M11,M12,M22 or CSV t,M11,M12,M22")->required();
    rl->add_option("--n", rn, "number of cells")->check(CLI::Range(3, 1 << 20));
    rl->add_option("--theta", rtheta, "transition width factor")->check(CLI::PositiveNumber);
    rl->add_option("--bd", c.bd, "boundary data JSON or 'moebius'");
    rl->add_option("--out", c.out, "CSV of M_n");

    detail::SurfaceArgs sa;
    auto* sf = app.add_subcommand("surface", "developable recovery surface of a field M");
    common(sf);
    detail::add_material(sf, c);
    detail::add_curve(sf, c);
    sf->add_option("--field", sa.field, "M11,M12,M22 or CSV t,M11,M12,M22")->required();
    sf->add_option("--n", sa.n, "number of cells")->check(CLI::Range(3, 1 << 20));
    sf->add_option("--eps", sa.eps, "strip width for the rescaled forms and J_eps")->check(CLI::PositiveNumber);
    sf->add_option("--step", sa.h, "chart grid step")->check(CLI::PositiveNumber);
    sf->add_option("--theta", sa.theta, "transition width factor")->check(CLI::PositiveNumber);
    sf->add_option("--pi0", c.pi0, "natural curvature");
    sf->add_option("--bd", c.bd, "boundary data JSON or 'moebius'");
    sf->add_option("--out", c.out, "mesh prefix (writes .obj and .vtk)");
    sf->add_flag("--no-timestamp", sa.no_timestamp, "omit the timestamp from the VTK title line");

    detail::SweepArgs ga;
    std::string eps_list;
    auto* gc = app.add_subcommand("gamma-check", "strip energies J_eps of recovery strips against the limit J");
    common(gc);
    detail::add_material(gc, c);
    detail::add_curve(gc, c);
    gc->add_option("--preset", c.preset, "cylinder or laminate");
    gc->add_option("--eps-list,--eps", eps_list, "comma-separated strip widths")->required();
    gc->add_option("--eps0", ga.eps0, "coupling constant: n = round(eps0 / eps)")->check(CLI::PositiveNumber);
    gc->add_option("--coupling", ga.coupling, "linear or sqrt");
    gc->add_option("--mu", ga.mu, "constant mu of the limit curve");
    gc->add_option("--tau", ga.tau, "constant tau of the limit curve");
    gc->add_option("--design", ga.design, "CSV t,mu,tau of the limit curve")->check(CLI::ExistingFile);
    gc->add_option("--pi0", c.pi0, "natural curvature");
    gc->add_option("--bd", c.bd, "boundary data JSON or 'moebius' (default: end data of the curve)");
    gc->add_option("--h-max", ga.h_max, "cap on the grid step")->check(CLI::NonNegativeNumber);
    gc->add_option("--theta", ga.theta, "transition width factor")->check(CLI::PositiveNumber);
    gc->add_option("--monotone-tol", ga.mono_tol, "tolerance of the monotonicity check");
    gc->add_option("--jobs", ga.jobs, "worker processes")->check(CLI::Range(1, 256));
    gc->add_option("--out", c.out, "CSV output (stdout if omitted)");

    detail::MinimizeArgs ma;
    auto* mn = app.add_subcommand("minimize", "minimize the limit energy under endpoint data");
    common(mn);
    detail::add_material(mn, c);
    detail::add_curve(mn, c);
    mn->add_option("--bd", c.bd, "boundary data JSON");
    mn->add_option("--preset", c.preset, "moebius");
    mn->add_option("--pi0", c.pi0, "natural curvature");
    mn->add_option("--seed", ma.seed, "initial design: moebius, zero or CSV t,mu,tau");
    mn->add_option("--stages", ma.opt.stages, "penalty stages")->check(CLI::PositiveNumber);
    mn->add_option("--max-iterations", ma.opt.max_iterations, "L-BFGS iterations per stage");
    mn->add_option("--grad-tol", ma.opt.grad_tol, "gradient tolerance")->check(CLI::PositiveNumber);
    mn->add_option("--out", ma.frame_out, "frame CSV of the minimizer");
    mn->add_option("--mesh", ma.mesh, "mesh prefix for the recovery surface of the minimizer");
    mn->add_option("--n", ma.n, "cells of the recovery surface")->check(CLI::Range(3, 1 << 20));
    mn->add_option("--eps", ma.eps, "strip width for J_eps of the recovery surface")->check(CLI::PositiveNumber);
    mn->add_option("--step", ma.h, "chart grid step of the recovery surface")->check(CLI::PositiveNumber);
    mn->add_flag("--no-timestamp", ma.no_timestamp, "omit the timestamp from the VTK title line");

    try {
        std::vector<std::string> args(argv, argv + argc);
        args = expand_config(std::move(args));
        std::vector<const char*> ptr;
        for (const auto& a : args) ptr.push_back(a.c_str());
        app.parse(int(ptr.size()), ptr.data());
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::CallForVersion&) {
        std::cout << "ribbon " << kVersion << "\n";
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kValidation;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kValidation;
    }

    try {
        if (self) return detail::self_test(std::cout);
        if (alpha->parsed()) return detail::cmd_alpha(c);
        if (curve->parsed()) return detail::cmd_curve(c);
        if (qb->parsed()) return detail::cmd_qbar(c, q_mu, q_tau, q_x1, q_trace);
        if (fr->parsed()) return detail::cmd_frame(c, fd, substeps);
        if (rl->parsed()) return detail::cmd_relax(c, field, rn, rtheta);
        if (sf->parsed()) return detail::cmd_surface(c, sa);
        if (gc->parsed()) {
            ga.eps = io::parse_list(eps_list);
            return detail::cmd_gamma_check(c, ga);
        }
        if (mn->parsed()) return detail::cmd_minimize(c, ma);
        err << app.help();
        return kValidation;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const SolverError& e) {
        err << "solver failure: " << e.what() << "\n";
        return kSolver;
    } catch (const nlohmann::json::exception& e) {
        err << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        err << "solver failure: " << e.what() << "\n";
        return kSolver;
    }
}

}  // namespace ribbon::cli
