// Strip energies of recovery strips of a bent cylinder and of a laminated, frustrated strip.
#include "ribbon/energy.hpp"

#include <cstdio>

using namespace ribbon;

namespace {

void print(const char* name, const EnergyReport& rep) {
    std::printf("%s: J = %.10g\n  %-8s %-5s %-18s %s\n", name, rep.J_limit, "eps", "n", "J_eps", "gap");
    for (const auto& e : rep.entries) std::printf("  %-8g %-5d %-18.12g %.3e\n", e.eps, e.n, e.J_eps, e.gap);
}

}  // namespace

int main() {
    const auto rd = RelaxedDensity::make(isotropic_K());
    {
        // unit strip rolled onto a cylinder of unit radius: recovery is exact
        const auto ref = ReferenceCurve::build(CurveSpec::flat(1.0, 257));
        const std::vector<double> mu(ref.size(), 1.0), tau(ref.size(), 0.0);
        const auto fc = framed_curve_from(mu, tau, ref);
        SweepOptions o;
        o.eps0 = 0.8;
        o.h_max = 1.0 / 512;
        print("cylinder", gamma_sweep(rd, ref, Frustration(), fc, end_data(fc, ref), {0.2, 0.1, 0.05}, o));
    }
    {
        // long strip bent at c against the natural curvature 2c I: laminated recovery, gaps shrink with eps
        const double c = 1.0 / 64;
        const auto ref = ReferenceCurve::build(CurveSpec::flat(256.0, 1025));
        const std::vector<double> mu(ref.size(), c), tau(ref.size(), 0.0);
        const auto fc = framed_curve_from(mu, tau, ref);
        SweepOptions o;
        o.eps0 = 3.2;
        o.recovery.theta = 100.0;
        print("laminate", gamma_sweep(rd, ref, Frustration::constant(2 * c * Mat2::Identity()), fc, end_data(fc, ref),
                                      {0.2, 0.1, 0.05}, o));
    }
    return 0;
}
