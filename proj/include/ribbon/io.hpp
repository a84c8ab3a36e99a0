#pragma once

#include "ribbon/frames.hpp"
#include "ribbon/limit_energy.hpp"
#include "ribbon/relaxation.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace ribbon::io {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Output with 17 significant digits.

inline std::string fmt17(double x) {
    if (!std::isfinite(x)) return std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf");
    if (x == 0.0) x = 0.0;  // no "-0"
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

namespace detail {

inline void write_string(std::ostream& os, const std::string& s) { os << json(s).dump(); }

inline void write_json(std::ostream& os, const json& j, int indent, int level) {
    const std::string pad(std::size_t(indent * (level + 1)), ' '), end(std::size_t(indent * level), ' ');
    const char* nl = indent > 0 ? "\n" : "";
    switch (j.type()) {
    case json::value_t::object: {
        if (j.empty()) {
            os << "{}";
            return;
        }
        os << '{' << nl;
        bool first = true;
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!first) os << ',' << nl;
            first = false;
            os << pad;
            write_string(os, it.key());
            os << (indent > 0 ? ": " : ":");
            write_json(os, it.value(), indent, level + 1);
        }
        os << nl << end << '}';
        return;
    }
    case json::value_t::array: {
        // short numeric arrays stay on one line
        bool flat = j.size() <= 9;
        for (const auto& v : j) flat = flat && v.is_number();
        os << '[';
        bool first = true;
        for (const auto& v : j) {
            if (!first) os << (flat || indent == 0 ? ", " : ",");
            if (!flat) os << nl << pad;
            first = false;
            write_json(os, v, indent, level + 1);
        }
        if (!flat && !j.empty()) os << nl << end;
        os << ']';
        return;
    }
    case json::value_t::number_float: {
        const double x = j.get<double>();
        if (std::isfinite(x))
            os << fmt17(x);
        else
            os << "null";
        return;
    }
    default: os << j.dump();
    }
}

}  // namespace detail

/// JSON text with every floating-point number written with 17 significant digits.
inline std::string to_text(const json& j, int indent = 2) {
    std::ostringstream os;
    detail::write_json(os, j, indent, 0);
    os << '\n';
    return os.str();
}

inline json to_json(const Vec3& v) { return json::array({v(0), v(1), v(2)}); }
inline json to_json(const Mat3& R) {
    json a = json::array();
    for (int i = 0; i < 3; ++i) a.push_back(json::array({R(i, 0), R(i, 1), R(i, 2)}));
    return a;
}

inline void write_csv(std::ostream& os, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
    for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
    os << '\n';
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << fmt17(r[i]);
        os << '\n';
    }
}

inline void write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValidationError("cannot write " + path);
    os << text;
}

inline std::string csv_text(const std::vector<std::string>& header, const std::vector<std::vector<double>>& rows) {
    std::ostringstream os;
    write_csv(os, header, rows);
    return os.str();
}

// ---------------------------------------------------------------------------
// Input.

inline std::string read_text(const std::string& path) {
    if (!std::filesystem::exists(path)) throw ValidationError("file not found: " + path);
    std::ifstream is(path);
    if (!is) throw ValidationError("cannot read " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline json load_json(const std::string& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw ValidationError(path + ": " + e.what());
    }
}

/// Numeric CSV with a header row; columns are looked up by name.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    std::vector<double> column(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw ValidationError("CSV has no column '" + name + "'");
        const std::size_t c = std::size_t(it - header.begin());
        std::vector<double> out;
        out.reserve(rows.size());
        for (const auto& r : rows) out.push_back(r.at(c));
        return out;
    }
};

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) {
        const auto a = cur.find_first_not_of(" \t\r"), b = cur.find_last_not_of(" \t\r");
        out.push_back(a == std::string::npos ? "" : cur.substr(a, b - a + 1));
    }
    return out;
}

inline double parse_double(const std::string& s) {
    std::size_t pos = 0;
    double v;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw ValidationError("not a number: '" + s + "'");
    }
    if (pos != s.size()) throw ValidationError("not a number: '" + s + "'");
    return v;
}

inline std::vector<double> parse_list(const std::string& s) {
    std::vector<double> out;
    for (const auto& p : split(s, ','))
        if (!p.empty()) out.push_back(parse_double(p));
    return out;
}

inline CsvTable read_csv(const std::string& path) {
    std::istringstream is(read_text(path));
    CsvTable t;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (t.header.empty()) {
            t.header = split(line, ',');
            continue;
        }
        std::vector<double> r;
        for (const auto& f : split(line, ',')) r.push_back(parse_double(f));
        if (r.size() != t.header.size()) throw ValidationError(path + ": row width does not match the header");
        t.rows.push_back(std::move(r));
    }
    if (t.header.empty() || t.rows.empty()) throw ValidationError(path + ": empty CSV");
    return t;
}

/// Piecewise-linear interpolant of samples on increasing abscissae (constant beyond the ends).
template <class T>
std::function<T(double)> interpolant(std::vector<double> t, std::vector<T> v) {
    for (std::size_t i = 1; i < t.size(); ++i)
        if (!(t[i] > t[i - 1])) throw ValidationError("table abscissae must increase");
    return [t = std::move(t), v = std::move(v)](double x) -> T {
        if (t.size() == 1 || x <= t.front()) return v.front();
        if (x >= t.back()) return v.back();
        const std::size_t i = std::size_t(std::upper_bound(t.begin(), t.end(), x) - t.begin()) - 1;
        const double f = (x - t[i]) / (t[i + 1] - t[i]);
        return T((1.0 - f) * v[i] + f * v[i + 1]);
    };
}

// ---------------------------------------------------------------------------
// Domain objects.

/// {"isotropic": true}, {"K": six entries (K11, K22, K33, K12, K13, K23) or a 3x3 array},
/// or engineering constants {"E1", "E2", "G", "nu12"}.
inline Mat3 material_from_json(const json& j) {
    if (j.contains("isotropic")) {
        if (!j["isotropic"].get<bool>()) throw ValidationError("material: 'isotropic' must be true when present");
        return isotropic_K();
    }
    if (j.contains("K")) {
        const json& K = j["K"];
        std::vector<double> flat;
        std::function<void(const json&)> collect = [&](const json& a) {
            if (a.is_array())
                for (const auto& x : a) collect(x);
            else
                flat.push_back(a.get<double>());
        };
        collect(K);
        if (flat.size() == 6) {
            std::array<double, 6> e;
            std::copy(flat.begin(), flat.end(), e.begin());
            return K_from_entries(e);
        }
        if (flat.size() == 9) {
            Mat3 M;
            for (int i = 0; i < 9; ++i) M(i / 3, i % 3) = flat[std::size_t(i)];
            if ((M - M.transpose()).norm() > 1e-12 * M.norm()) throw ValidationError("material: K is not symmetric");
            return M;
        }
        throw ValidationError("material: K needs 6 independent entries or a 3x3 array");
    }
    if (j.contains("E1"))
        return orthotropic_K(j.at("E1").get<double>(), j.at("E2").get<double>(), j.at("G").get<double>(),
                             j.at("nu12").get<double>());
    throw ValidationError("material: expected 'isotropic', 'K' or engineering constants E1, E2, G, nu12");
}

/// {type: flat | arc | spline, length, parameters: {radius, points, grid, chart_bound}}.
inline CurveSpec curve_from_json(const json& j, int grid) {
    const std::string type = j.value("type", "flat");
    const json p = j.value("parameters", json::object());
    CurveSpec s;
    if (type == "flat") {
        s = CurveSpec::flat(j.at("length").get<double>(), grid);
    } else if (type == "arc") {
        s = CurveSpec::arc(p.at("radius").get<double>(), j.at("length").get<double>(), grid);
    } else if (type == "spline") {
        std::vector<Vec2> pts;
        for (const auto& q : p.at("points")) pts.emplace_back(q.at(0).get<double>(), q.at(1).get<double>());
        s = CurveSpec::spline(std::move(pts), grid);
    } else {
        throw ValidationError("curve: unknown type '" + type + "'");
    }
    if (p.contains("grid")) s.grid = p["grid"].get<int>();
    if (p.contains("chart_bound")) s.chart_bound = p["chart_bound"].get<double>();
    return s;
}

/// {y_bar: [3], R_bar: 3x3 rows}.
inline BoundaryData boundary_from_json(const json& j) {
    BoundaryData bd;
    try {
        for (int i = 0; i < 3; ++i) bd.y_bar(i) = j.at("y_bar").at(i).get<double>();
        for (int i = 0; i < 3; ++i)
            for (int k = 0; k < 3; ++k) bd.R_bar(i, k) = j.at("R_bar").at(i).at(k).get<double>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("boundary data: ") + e.what());
    }
    return bd;
}

inline json boundary_to_json(const BoundaryData& bd) { return {{"y_bar", to_json(bd.y_bar)}, {"R_bar", to_json(bd.R_bar)}}; }

/// Three numbers "P11,P12,P22" (constant) or a CSV "t,P11,P12,P22".
inline Frustration frustration_from(const std::string& arg) {
    if (arg.empty()) return Frustration();
    if (std::filesystem::exists(arg)) {
        const auto t = read_csv(arg);
        const auto a = t.column("P11"), b = t.column("P12"), c = t.column("P22");
        std::vector<Mat2> P;
        for (std::size_t i = 0; i < a.size(); ++i) P.push_back((Mat2() << a[i], b[i], b[i], c[i]).finished());
        return Frustration::table(t.column("t"), std::move(P));
    }
    const auto v = parse_list(arg);
    if (v.size() != 3) throw ValidationError("--pi0 expects P11,P12,P22 or a CSV file");
    return Frustration::constant((Mat2() << v[0], v[1], v[1], v[2]).finished());
}

/// Three numbers "M11,M12,M22" (constant) or a CSV "t,M11,M12,M22".
inline SymField2 field_from(const std::string& arg) {
    if (std::filesystem::exists(arg)) {
        const auto t = read_csv(arg);
        const auto a = t.column("M11"), b = t.column("M12"), c = t.column("M22");
        std::vector<Mat2> M;
        for (std::size_t i = 0; i < a.size(); ++i) M.push_back((Mat2() << a[i], b[i], b[i], c[i]).finished());
        return interpolant<Mat2>(t.column("t"), std::move(M));
    }
    const auto v = parse_list(arg);
    if (v.size() != 3) throw ValidationError("--field expects M11,M12,M22 or a CSV file");
    const Mat2 M = (Mat2() << v[0], v[1], v[1], v[2]).finished();
    return [M](double) { return M; };
}

/// (mu, tau) on the reference grid from a CSV "t,mu,tau" (linear interpolation).
inline std::pair<std::vector<double>, std::vector<double>> design_from_csv(const ReferenceCurve& ref,
                                                                           const std::string& path) {
    const auto t = read_csv(path);
    const auto mu = interpolant<double>(t.column("t"), t.column("mu"));
    const auto tau = interpolant<double>(t.column("t"), t.column("tau"));
    std::vector<double> m, s;
    for (double x : ref.grid()) {
        m.push_back(mu(x));
        s.push_back(tau(x));
    }
    return {m, s};
}

// ---------------------------------------------------------------------------
// Tables.

inline std::string curve_csv(const ReferenceCurve& ref) {
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < ref.size(); ++i)
        rows.push_back({ref.t(i), ref.B(i)(0), ref.B(i)(1), ref.N(i)(0), ref.N(i)(1), ref.k(i), ref.detD(i)});
    return csv_text({"t", "Bx", "By", "Nx", "Ny", "k", "detD"}, rows);
}

inline std::string trace_csv(const LimitTrace& tr) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < tr.t.size(); ++i) rows.push_back({tr.t[i], tr.mu[i], tr.tau[i], tr.gamma_star[i], tr.qbar[i]});
    return csv_text({"t", "mu", "tau", "gamma_star", "qbar"}, rows);
}

inline std::string frame_csv(const FramedCurve& fc) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < fc.t.size(); ++i) {
        std::vector<double> r{fc.t[i]};
        for (const auto* v : {&fc.y[i], &fc.d1[i], &fc.d2[i], &fc.d3[i]}) r.insert(r.end(), {(*v)(0), (*v)(1), (*v)(2)});
        r.push_back(fc.mu[i]);
        r.push_back(fc.tau[i]);
        rows.push_back(std::move(r));
    }
    return csv_text({"t", "y1", "y2", "y3", "d1x", "d1y", "d1z", "d2x", "d2y", "d2z", "d3x", "d3y", "d3z", "mu", "tau"},
                    rows);
}

/// M_n at the frame nodes of the recovery field (these resolve every transition).
inline std::string field_csv(const RecoveryFields& F) {
    std::vector<std::vector<double>> rows;
    for (double t : F.frame_nodes()) {
        const Mat2 M = F.M(t);
        rows.push_back({t, M(0, 0), M(0, 1), M(1, 1)});
    }
    return csv_text({"t", "M11", "M12", "M22"}, rows);
}

}  // namespace ribbon::io
