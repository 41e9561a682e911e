#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nrreg/deformation.hpp"
#include "nrreg/energy.hpp"
#include "nrreg/frame.hpp"
#include "nrreg/pyramid.hpp"
#include "nrreg/sobolev.hpp"

namespace nrreg {

struct RegistrationParams {
    double lambda = 1.0;
    /// Sobolev scale in domain units; unset means two node spacings of the level being solved.
    std::optional<double> sigma;
    double rho = 0.25;
    double tau0 = 1.0;
    int max_iters_per_level = 200;
    double stop_decay = 1e-6;
    int m0 = 4;
    /// Coarsest level for series and quality registrations that start from a chained or inverted guess.
    int seeded_m0 = 6;
    /// Finest level; unset means the level of the input frames.
    std::optional<int> m1;
    double lambda_reduction = 0.1;
    int K = 3;

    void validate() const {
        auto need = [](bool ok, const char *what) {
            if (!ok) throw InputError(std::string("invalid registration parameter: ") + what);
        };
        need(lambda > 0.0 && std::isfinite(lambda), "lambda must be positive");
        need(!sigma || (*sigma > 0.0 && std::isfinite(*sigma)), "sigma must be positive");
        need(rho > 0.0 && rho < 1.0, "rho must lie in (0, 1)");
        need(tau0 > 0.0 && std::isfinite(tau0), "tau0 must be positive");
        need(max_iters_per_level >= 0, "max_iters_per_level must be non-negative");
        need(stop_decay > 0.0, "stop_decay must be positive");
        need(m0 >= 1, "m0 must be at least 1");
        need(seeded_m0 >= 1, "seeded_m0 must be at least 1");
        need(!m1 || *m1 >= m0, "m0 must not exceed m1");
        need(lambda_reduction > 0.0 && lambda_reduction <= 1.0, "lambda_reduction must lie in (0, 1]");
        need(K >= 1, "K must be at least 1");
    }

    double sigma_for(int level) const { return sigma.value_or(2.0 / double(1 << level)); }

    /// Parameters for a registration started from an informed guess.
    RegistrationParams seeded() const {
        RegistrationParams p = *this;
        p.m0 = std::max(m0, seeded_m0);
        if (m1) p.m0 = std::min(p.m0, *m1);
        return p;
    }
};

enum class Termination { converged, max_iters, step_underflow };

inline const char *to_string(Termination t) {
    switch (t) {
    case Termination::converged: return "converged";
    case Termination::max_iters: return "max-iters";
    case Termination::step_underflow: return "step-underflow";
    }
    return "?";
}

/// One accepted gradient-flow step.
struct StepRecord {
    int level = 0;
    int iteration = 0;
    double tau = 0.0;
    double data = 0.0;
    double regularizer = 0.0;
    double total = 0.0;
    double previous_total = 0.0;
    /// Tangent slope Phi'(0) of the line search that accepted this step.
    double slope = 0.0;
};

struct LevelReport {
    int level = 0;
    int iterations = 0;
    Termination termination = Termination::converged;
    EnergyValue initial;
    EnergyValue final;
};

struct SolveReport {
    double lambda = 0.0;
    std::vector<LevelReport> levels;
    std::vector<StepRecord> steps;
    EnergyValue final_energy;
    Termination termination = Termination::converged;

    /// True when every level's accepted energies decrease strictly.
    bool strictly_decreasing() const {
        for (std::size_t k = 0; k < steps.size(); ++k)
            if (!(steps[k].total < steps[k].previous_total)) return false;
        return true;
    }
};

struct RegistrationResult {
    Deformation phi;
    SolveReport report;
};

class StepUnderflowError : public SolverError {
public:
    StepUnderflowError() : SolverError("no admissible step") {}
};

struct ArmijoOptions {
    double tau_min = 1e-12;
    /// Widening stops at tau_start * 2^max_widening.
    int max_widening = 10;
};

struct ArmijoStep {
    double tau = 0.0;
    double value = 0.0;
};

/// Armijo rule with widening on Phi(tau): a step is admissible when the secant slope
/// (Phi(tau) - Phi(0)) / tau is at most rho * Phi'(0). Starting from tau_start the step is doubled
/// while admissible, otherwise halved until admissible. Non-finite trial values count as
/// inadmissible.
template <class LineFn>
ArmijoStep armijo_line_search(LineFn &&phi, double phi0, double slope, double rho, double tau_start,
                              const ArmijoOptions &opt = {}) {
    if (!(slope < 0.0)) throw InputError("armijo: not a descent direction");
    if (!(rho > 0.0 && rho < 1.0)) throw InputError("armijo: rho must lie in (0, 1)");
    auto admissible = [&](double tau, double value) {
        return std::isfinite(value) && (value - phi0) / tau <= rho * slope;
    };
    double tau = tau_start;
    double value = phi(tau);
    if (admissible(tau, value)) {
        for (int k = 0; k < opt.max_widening; ++k) {
            const double wider = 2.0 * tau;
            const double v = phi(wider);
            if (!admissible(wider, v)) break;
            tau = wider;
            value = v;
        }
        return {tau, value};
    }
    while (true) {
        tau *= 0.5;
        if (tau < opt.tau_min) throw StepUnderflowError();
        value = phi(tau);
        if (admissible(tau, value)) return {tau, value};
    }
}

/// One Armijo step of phi along `direction` for an energy callable Deformation -> double.
template <class EnergyFn>
std::pair<double, Deformation> armijo_step(const Deformation &phi, const Grid<Vec2> &direction, EnergyFn &&energy_fn,
                                           double phi0, double slope, double rho, double tau_start,
                                           const ArmijoOptions &opt = {}) {
    if (!direction.same_shape(phi.field())) throw InputError("armijo: direction does not match deformation");
    auto moved = [&](double tau) {
        Deformation d = phi;
        auto &u = d.field().storage();
        const auto &v = direction.storage();
        for (std::size_t k = 0; k < u.size(); ++k) u[k] += v[k] * tau;
        return d;
    };
    const ArmijoStep step = armijo_line_search([&](double tau) { return energy_fn(moved(tau)); }, phi0, slope, rho,
                                               tau_start, opt);
    return {step.tau, moved(step.tau)};
}

namespace detail {

inline double dual_pairing(const Grid<Vec2> &a, const Grid<Vec2> &b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += dot(a[k], b[k]);
    return s;
}

inline double safe_total(const RegistrationEnergy &e, const Deformation &phi) {
    try {
        return e.evaluate(phi).total;
    } catch (const DegenerateImageError &) {
        return std::numeric_limits<double>::infinity();
    } catch (const InputError &) {
        return std::numeric_limits<double>::infinity();
    }
}

} // namespace detail

/// Explicit Euler discretisation of the Sobolev gradient flow on one level,
/// phi <- phi - tau A^-1 E'[phi], with Armijo step control. Stops once the relative energy decay
/// of an accepted step drops below stop_decay, after max_iters_per_level steps, or when no
/// admissible step exists (treated as convergence).
inline RegistrationResult gradient_flow_level(const Frame &f, const Frame &g, const Deformation &phi0,
                                              const RegistrationParams &params, int level = 0,
                                              std::optional<double> sigma = std::nullopt) {
    params.validate();
    if (!f.same_geometry(g) || !phi0.conforms_to(f)) throw InputError("gradient flow: inputs are not on a common level");
    const RegistrationEnergy energy(f, g, params.lambda);
    const SobolevMetric metric(phi0.nodes_x(), phi0.nodes_y(), phi0.spacing(),
                               sigma.value_or(params.sigma_for(log2_exact(std::max(f.width(), f.height())))));

    RegistrationResult out{phi0, {}};
    out.report.lambda = params.lambda;
    LevelReport lr;
    lr.level = level;
    lr.termination = Termination::max_iters;
    EnergyValue current;
    DualField dual = energy.first_variation(out.phi, &current);
    lr.initial = current;
    double tau = params.tau0;
    for (int it = 0; it < params.max_iters_per_level; ++it) {
        Grid<Vec2> direction = metric.apply_inverse(dual);
        for (auto &v : direction.storage()) v = -v;
        const double slope = detail::dual_pairing(dual, direction);
        if (!(slope < 0.0)) {
            lr.termination = Termination::converged;
            break;
        }
        std::pair<double, Deformation> step;
        try {
            step = armijo_step(
                out.phi, direction, [&](const Deformation &d) { return detail::safe_total(energy, d); }, current.total,
                slope, params.rho, tau);
        } catch (const StepUnderflowError &) {
            lr.termination = Termination::step_underflow;
            break;
        }
        tau = step.first;
        out.phi = std::move(step.second);
        EnergyValue next;
        dual = energy.first_variation(out.phi, &next);
        out.report.steps.push_back({level, it + 1, tau, next.data, next.regularizer, next.total, current.total, slope});
        lr.iterations = it + 1;
        const double decay = (current.total - next.total) / std::max(std::abs(current.total), 1e-300);
        current = next;
        if (decay < params.stop_decay) {
            lr.termination = Termination::converged;
            break;
        }
    }
    lr.final = current;
    out.report.levels.push_back(lr);
    out.report.final_energy = current;
    out.report.termination = lr.termination;
    return out;
}

namespace detail {

/// Node field of a w x h frame re-expressed on the grid of its size x size padded canvas; nodes
/// outside the frame copy the nearest frame node. Domain units shrink by extent / size.
inline Deformation embed_nodes(const Deformation &d, int size, double scale) {
    Deformation out(size + 1, size + 1);
    for (int j = 0; j <= size; ++j)
        for (int i = 0; i <= size; ++i)
            out.displacement(i, j) = d.displacement(std::min(i, d.nodes_x() - 1), std::min(j, d.nodes_y() - 1)) * scale;
    return out;
}

inline Deformation crop_nodes(const Deformation &d, int nodes_x, int nodes_y, double scale) {
    Deformation out(nodes_x, nodes_y);
    for (int j = 0; j < nodes_y; ++j)
        for (int i = 0; i < nodes_x; ++i) out.displacement(i, j) = d.displacement(i, j) * scale;
    return out;
}

} // namespace detail

/// Coarse-to-fine registration of f onto g (f o phi ~ g): restrict f, g and the initial guess to
/// level m0, then alternate gradient flow and prolongation up to the level of the inputs. Frames
/// that are not square powers of two are registered on a padded canvas whose extra pixels are
/// invalid.
inline RegistrationResult multilevel_register(const Frame &f, const Frame &g, const Deformation &phi_init,
                                              const RegistrationParams &params) {
    params.validate();
    if (!f.same_geometry(g)) throw InputError("register: frames differ in size");
    if (f.width() != f.height() || !is_power_of_two(f.width())) {
        if (!phi_init.conforms_to(f)) throw InputError("register: initial deformation does not conform to frames");
        const Frame fp = pad_to_power_of_two(f), gp = pad_to_power_of_two(g);
        const double scale = double(f.extent()) / double(fp.width());
        RegistrationResult r = multilevel_register(fp, gp, detail::embed_nodes(phi_init, fp.width(), scale), params);
        r.phi = detail::crop_nodes(r.phi, phi_init.nodes_x(), phi_init.nodes_y(), 1.0 / scale);
        return r;
    }
    const int finest = grid_level(f.values(), GridConvention::cell_centered);
    const int m1 = params.m1.value_or(finest);
    if (m1 != finest) throw InputError("register: frames do not match level m1");
    if (!phi_init.conforms_to(f)) throw InputError("register: initial deformation does not conform to frames");
    const int m0 = std::min(params.m0, m1);

    const Pyramid<Frame> fp = build_pyramid(f, m0, m1);
    const Pyramid<Frame> gp = build_pyramid(g, m0, m1);
    std::vector<Grid<Vec2>> phis(static_cast<std::size_t>(m1 - m0 + 1));
    phis.back() = phi_init.field();
    for (int m = m1 - 1; m >= m0; --m)
        phis[static_cast<std::size_t>(m - m0)] = restrict_nodes(phis[static_cast<std::size_t>(m + 1 - m0)]);

    RegistrationResult out;
    out.report.lambda = params.lambda;
    Deformation phi(phis.front());
    for (int m = m0; m <= m1; ++m) {
        RegistrationResult level = gradient_flow_level(fp.level(m), gp.level(m), phi, params, m, params.sigma_for(m));
        out.report.levels.push_back(level.report.levels.front());
        out.report.steps.insert(out.report.steps.end(), level.report.steps.begin(), level.report.steps.end());
        out.report.final_energy = level.report.final_energy;
        out.report.termination = level.report.termination;
        phi = m < m1 ? Deformation(prolongate_nodes(level.phi.field())) : std::move(level.phi);
    }
    out.phi = std::move(phi);
    return out;
}

} // namespace nrreg
