#pragma once

// Finite-difference gradient oracle.  Runs the same graph-building code the
// model uses, in double precision, and compares analytic gradients against
// central differences coordinate by coordinate.  This is the ground truth
// every differentiable module is validated against.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "p2w/optim.hpp"
#include "p2w/rng.hpp"
#include "p2w/tensor.hpp"

namespace p2w {

struct GradCheckOptions {
    double h = 1e-5;        // central-difference step
    double rel_tol = 1e-4;  // max allowed relative error
    double abs_tol = 1e-9;  // coordinates closer than this in absolute terms
                            // pass outright; below ~1e-6 the central difference
                            // is dominated by cancellation noise, so a relative
                            // comparison there measures the oracle, not the
                            // gradient
    std::size_t max_points = 100; // coordinates sampled across all parameters
    std::uint64_t seed = 0; // coordinate-sampling seed
};

struct GradCheckReport {
    bool pass = true;
    std::size_t points_checked = 0;
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// `build` must construct a fresh scalar loss graph from the current values in
// `params` every time it is called.
inline GradCheckReport grad_check(ParamSet<double>& params,
                                  const std::function<Var<double>(ParamSet<double>&)>& build,
                                  const GradCheckOptions& opt = {}) {
    // Analytic pass.
    params.zero_grads();
    Var<double> loss = build(params);
    if (loss.numel() != 1) throw ContractViolation("grad_check: loss must be scalar");
    backward(loss);

    struct Coord {
        std::string name;
        std::size_t index;
        double analytic;
    };
    std::vector<Coord> coords;
    for (auto& [name, p] : params) {
        const auto& g = p.grad();
        for (std::size_t i = 0; i < p.numel(); ++i)
            coords.push_back({name, i, g.empty() ? 0.0 : g[i]});
    }

    // Deterministically subsample when the parameter space is larger than the
    // point budget.
    if (coords.size() > opt.max_points) {
        Rng rng(derive_seed(opt.seed, 0x67726164ULL));
        rng.shuffle(coords);
        coords.resize(opt.max_points);
    }

    GradCheckReport report;
    for (const auto& c : coords) {
        auto& val = params.get(c.name).mutable_value();
        const double orig = val[c.index];
        val[c.index] = orig + opt.h;
        const double f_plus = build(params).item();
        val[c.index] = orig - opt.h;
        const double f_minus = build(params).item();
        val[c.index] = orig;

        const double numeric = (f_plus - f_minus) / (2.0 * opt.h);
        const double abs_err = std::abs(c.analytic - numeric);
        const double denom =
            std::max({std::abs(c.analytic), std::abs(numeric), 1e-6});
        const double rel = abs_err <= opt.abs_tol ? 0.0 : abs_err / denom;
        ++report.points_checked;
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_param = c.name;
            report.worst_index = c.index;
            report.worst_analytic = c.analytic;
            report.worst_numeric = numeric;
        }
    }
    report.pass = report.max_rel_err <= opt.rel_tol;
    return report;
}

} // namespace p2w
