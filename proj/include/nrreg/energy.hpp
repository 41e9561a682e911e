#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "nrreg/deformation.hpp"
#include "nrreg/frame.hpp"
#include "nrreg/grid.hpp"

namespace nrreg {

/// Components of E[phi] = S[phi] + lambda R[phi].
struct EnergyValue {
    double total = 0.0;
    double data = 0.0;
    double regularizer = 0.0;
    double lambda = 0.0;
};

/// Nodal coefficients of the functional zeta -> <E'[phi], zeta> against the bilinear basis.
using DualField = Grid<Vec2>;

/// Tensor Gauss rule on the unit square. Order 3 uses 2x2 points, order 5 uses 3x3.
class Quadrature {
public:
    explicit Quadrature(int order = 3) : order_(order) {
        std::vector<double> pts, wts;
        if (order == 3) {
            const double d = 0.5 / std::sqrt(3.0);
            pts = {0.5 - d, 0.5 + d};
            wts = {0.5, 0.5};
        } else if (order == 5) {
            const double d = 0.5 * std::sqrt(0.6);
            pts = {0.5 - d, 0.5, 0.5 + d};
            wts = {5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};
        } else {
            throw InputError("quadrature order must be 3 or 5");
        }
        for (std::size_t j = 0; j < pts.size(); ++j)
            for (std::size_t i = 0; i < pts.size(); ++i) {
                Point p;
                p.xi = {pts[i], pts[j]};
                p.weight = wts[i] * wts[j];
                const double x = pts[i], y = pts[j];
                // Corner order: (0,0), (1,0), (0,1), (1,1).
                p.shape = {(1 - x) * (1 - y), x * (1 - y), (1 - x) * y, x * y};
                p.shape_grad = {Vec2{-(1 - y), -(1 - x)}, Vec2{(1 - y), -x}, Vec2{-y, (1 - x)}, Vec2{y, x}};
                points_.push_back(p);
            }
    }

    struct Point {
        Vec2 xi;
        double weight;
        std::array<double, 4> shape;
        std::array<Vec2, 4> shape_grad; // with respect to the reference coordinates
    };

    int order() const { return order_; }
    const std::vector<Point> &points() const { return points_; }
    std::size_t size() const { return points_.size(); }

private:
    int order_;
    std::vector<Point> points_;
};

/// Discrete objective for one image pair on the node grid conforming to the frames. The template
/// g and its quadrature samples are fixed at construction; each evaluation resamples f o phi.
class RegistrationEnergy {
public:
    RegistrationEnergy(const Frame &f, const Frame &g, double lambda, int quadrature_order = 3)
        : f_(f), g_(g), lambda_(lambda), quad_(quadrature_order) {
        if (!f.same_geometry(g)) throw InputError("energy: frames differ in size");
        if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InputError("energy: lambda must be non-negative");
        h_ = f.pixel_size();
        nq_ = quad_.size();
        const std::size_t total = f.pixel_count() * nq_;
        g_values_.resize(total);
        g_valid_.resize(total);
        for (int ey = 0; ey < f.height(); ++ey)
            for (int ex = 0; ex < f.width(); ++ex)
                for (std::size_t k = 0; k < nq_; ++k) {
                    const auto s = detail::bilinear_eval(g, point(ex, ey, k));
                    g_values_[slot(ex, ey, k)] = s.value;
                    g_valid_[slot(ex, ey, k)] = s.pixels_valid;
                }
    }

    const Frame &moving() const { return f_; }
    const Frame &fixed() const { return g_; }
    double lambda() const { return lambda_; }
    int nodes_x() const { return f_.width() + 1; }
    int nodes_y() const { return f_.height() + 1; }

    /// E, S and R at phi.
    EnergyValue evaluate(const Deformation &phi) const {
        Workspace ws;
        const double s = data_term(phi, ws, false);
        return combine(s, regularizer(phi));
    }

    /// First variation at phi; also reports the energy at phi when `value` is given.
    DualField first_variation(const Deformation &phi, EnergyValue *value = nullptr) const {
        Workspace ws;
        const double s = data_term(phi, ws, true);
        DualField dual(nodes_x(), nodes_y(), Vec2{});
        const auto &P = quad_.points();
        const double inv_wsig = 1.0 / (ws.weight * ws.sigma_f * ws.sigma_g);
        const double inv_wvar = s / (ws.weight * ws.sigma_f * ws.sigma_f);
        for (int ey = 0; ey < f_.height(); ++ey)
            for (int ex = 0; ex < f_.width(); ++ex)
                for (std::size_t k = 0; k < nq_; ++k) {
                    const std::size_t q = slot(ex, ey, k);
                    if (!ws.valid[q]) continue;
                    const double w = P[k].weight * h_ * h_;
                    const double c = -w * ((g_values_[q] - ws.mean_g) * inv_wsig + (ws.f_values[q] - ws.mean_f) * inv_wvar);
                    const Vec2 gc = ws.f_grad[q] * c;
                    add_to_corners(dual, ex, ey, P[k].shape, gc);
                }
        add_regularizer_variation(phi, dual, lambda_);
        if (value) *value = combine(s, regularizer(phi));
        return dual;
    }

    /// Variation of R alone, unscaled by lambda.
    DualField regularizer_variation(const Deformation &phi) const {
        check_grid(phi);
        DualField dual(nodes_x(), nodes_y(), Vec2{});
        add_regularizer_variation(phi, dual, 1.0);
        return dual;
    }

    /// S[phi] = -NCC[f o phi, g].
    double similarity(const Deformation &phi) const {
        Workspace ws;
        return data_term(phi, ws, false);
    }

    /// R[phi] = 1/2 sum over elements of the integrated squared Frobenius norm of Du.
    double regularizer(const Deformation &phi) const {
        check_grid(phi);
        const auto &P = quad_.points();
        const auto &u = phi.field();
        double r = 0.0;
        for (int ey = 0; ey < f_.height(); ++ey)
            for (int ex = 0; ex < f_.width(); ++ex) {
                const std::array<Vec2, 4> c = corners(u, ex, ey);
                for (const auto &p : P) {
                    Vec2 dx{}, dy{}; // rows of Du in reference coordinates
                    for (int a = 0; a < 4; ++a) {
                        dx += c[a] * p.shape_grad[a].x;
                        dy += c[a] * p.shape_grad[a].y;
                    }
                    // The reference-to-domain scaling 1/h^2 of the gradient cancels the h^2 of the
                    // element measure.
                    r += p.weight * (dot(dx, dx) + dot(dy, dy));
                }
            }
        return 0.5 * r;
    }

private:
    struct Workspace {
        std::vector<double> f_values;
        std::vector<Vec2> f_grad;
        std::vector<std::uint8_t> valid;
        double weight = 0, mean_f = 0, mean_g = 0, sigma_f = 0, sigma_g = 0;
    };

    EnergyValue combine(double s, double r) const { return {s + lambda_ * r, s, r, lambda_}; }

    Vec2 point(int ex, int ey, std::size_t k) const {
        const auto &xi = quad_.points()[k].xi;
        return {(ex + xi.x) * h_, (ey + xi.y) * h_};
    }

    std::size_t slot(int ex, int ey, std::size_t k) const {
        return (static_cast<std::size_t>(ey) * f_.width() + ex) * nq_ + k;
    }

    void check_grid(const Deformation &phi) const {
        if (phi.nodes_x() != nodes_x() || phi.nodes_y() != nodes_y())
            throw InputError("energy: deformation grid does not conform to frames");
    }

    static std::array<Vec2, 4> corners(const Grid<Vec2> &u, int ex, int ey) {
        return {u(ex, ey), u(ex + 1, ey), u(ex, ey + 1), u(ex + 1, ey + 1)};
    }

    static void add_to_corners(DualField &d, int ex, int ey, const std::array<double, 4> &shape, const Vec2 &v) {
        d(ex, ey) += v * shape[0];
        d(ex + 1, ey) += v * shape[1];
        d(ex, ey + 1) += v * shape[2];
        d(ex + 1, ey + 1) += v * shape[3];
    }

    void add_regularizer_variation(const Deformation &phi, DualField &dual, double scale) const {
        const auto &P = quad_.points();
        const auto &u = phi.field();
        for (int ey = 0; ey < f_.height(); ++ey)
            for (int ex = 0; ex < f_.width(); ++ex) {
                const std::array<Vec2, 4> c = corners(u, ex, ey);
                std::array<Vec2, 4> acc{};
                for (const auto &p : P) {
                    Vec2 dx{}, dy{};
                    for (int a = 0; a < 4; ++a) {
                        dx += c[a] * p.shape_grad[a].x;
                        dy += c[a] * p.shape_grad[a].y;
                    }
                    for (int a = 0; a < 4; ++a)
                        acc[a] += (dx * p.shape_grad[a].x + dy * p.shape_grad[a].y) * (p.weight * scale);
                }
                dual(ex, ey) += acc[0];
                dual(ex + 1, ey) += acc[1];
                dual(ex, ey + 1) += acc[2];
                dual(ex + 1, ey + 1) += acc[3];
            }
    }

    double data_term(const Deformation &phi, Workspace &ws, bool with_gradient) const {
        check_grid(phi);
        const std::size_t total = g_values_.size();
        ws.f_values.resize(total);
        ws.valid.resize(total);
        if (with_gradient) ws.f_grad.resize(total);
        const auto &P = quad_.points();
        const auto &u = phi.field();
        double sw = 0.0, sf = 0.0, sg = 0.0, fmax = 0.0, gmax = 0.0;
        for (int ey = 0; ey < f_.height(); ++ey)
            for (int ex = 0; ex < f_.width(); ++ex) {
                const std::array<Vec2, 4> c = corners(u, ex, ey);
                for (std::size_t k = 0; k < nq_; ++k) {
                    const auto &p = P[k];
                    const Vec2 disp = c[0] * p.shape[0] + c[1] * p.shape[1] + c[2] * p.shape[2] + c[3] * p.shape[3];
                    const auto e = detail::bilinear_eval(f_, point(ex, ey, k) + disp);
                    const std::size_t q = slot(ex, ey, k);
                    ws.f_values[q] = e.value;
                    if (with_gradient) ws.f_grad[q] = e.gradient;
                    const bool ok = e.pixels_valid && g_valid_[q];
                    ws.valid[q] = ok;
                    if (ok) {
                        sw += p.weight;
                        sf += p.weight * e.value;
                        sg += p.weight * g_values_[q];
                        fmax = std::max(fmax, std::abs(e.value));
                        gmax = std::max(gmax, std::abs(g_values_[q]));
                    }
                }
            }
        if (!(sw > 0.0)) throw InputError("energy: frames share no valid region");
        ws.mean_f = sf / sw;
        ws.mean_g = sg / sw;
        double vf = 0.0, vg = 0.0, cov = 0.0;
        for (int ey = 0; ey < f_.height(); ++ey)
            for (int ex = 0; ex < f_.width(); ++ex)
                for (std::size_t k = 0; k < nq_; ++k) {
                    const std::size_t q = slot(ex, ey, k);
                    if (!ws.valid[q]) continue;
                    const double w = P[k].weight;
                    const double df = ws.f_values[q] - ws.mean_f;
                    const double dg = g_values_[q] - ws.mean_g;
                    vf += w * df * df;
                    vg += w * dg * dg;
                    cov += w * df * dg;
                }
        ws.sigma_f = std::sqrt(vf / sw);
        ws.sigma_g = std::sqrt(vg / sw);
        if (!(ws.sigma_f > 1e-12 * fmax) || !(ws.sigma_g > 1e-12 * gmax)) throw DegenerateImageError();
        // Weights are kept in reference units; the common factor h^2 cancels in every ratio.
        ws.weight = sw * h_ * h_;
        const double ncc = std::clamp(cov / (sw * ws.sigma_f * ws.sigma_g), -1.0, 1.0);
        return -ncc;
    }

    Frame f_;
    Frame g_;
    double lambda_;
    Quadrature quad_;
    double h_ = 0.0;
    std::size_t nq_ = 0;
    std::vector<double> g_values_;
    std::vector<std::uint8_t> g_valid_;
};

/// NCC of the bilinear interpolants of f and g over their common valid region.
inline double ncc(const Frame &f, const Frame &g, int quadrature_order = 3) {
    return -RegistrationEnergy(f, g, 0.0, quadrature_order).similarity(Deformation::conforming(f));
}

inline double similarity(const Frame &f, const Frame &g, const Deformation &phi, int quadrature_order = 3) {
    return RegistrationEnergy(f, g, 0.0, quadrature_order).similarity(phi);
}

/// Dirichlet energy 1/2 int |D(phi - id)|^2 of the displacement.
inline double dirichlet(const Deformation &phi) {
    const auto &P = Quadrature(3).points();
    const auto &u = phi.field();
    double r = 0.0;
    for (int ey = 0; ey + 1 < phi.nodes_y(); ++ey)
        for (int ex = 0; ex + 1 < phi.nodes_x(); ++ex) {
            const Vec2 c[4] = {u(ex, ey), u(ex + 1, ey), u(ex, ey + 1), u(ex + 1, ey + 1)};
            for (const auto &p : P) {
                Vec2 dx{}, dy{};
                for (int a = 0; a < 4; ++a) {
                    dx += c[a] * p.shape_grad[a].x;
                    dy += c[a] * p.shape_grad[a].y;
                }
                r += p.weight * (dot(dx, dx) + dot(dy, dy));
            }
        }
    return 0.5 * r;
}

inline EnergyValue energy(const Frame &f, const Frame &g, const Deformation &phi, double lambda) {
    if (!(lambda > 0.0)) throw InputError("energy: lambda must be positive");
    return RegistrationEnergy(f, g, lambda).evaluate(phi);
}

inline DualField first_variation(const Frame &f, const Frame &g, const Deformation &phi, double lambda) {
    if (!(lambda > 0.0)) throw InputError("first_variation: lambda must be positive");
    return RegistrationEnergy(f, g, lambda).first_variation(phi);
}

} // namespace nrreg
