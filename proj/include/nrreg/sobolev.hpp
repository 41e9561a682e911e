#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "nrreg/energy.hpp"
#include "nrreg/grid.hpp"

namespace nrreg {

/// Matrix of the scaled H1 inner product G(a, b) = int a.b + sigma^2/2 Da:Db on a uniform bilinear
/// node grid, i.e. A = M + sigma^2/2 K with natural (Neumann) boundary conditions. Applying A^-1 to
/// a dual field is one implicit heat step of size sigma^2/2.
class SobolevMetric {
public:
    SobolevMetric(int nodes_x, int nodes_y, double spacing, double sigma, double tolerance = 1e-10)
        : nx_(nodes_x), ny_(nodes_y), tol_(tolerance), stencil_(nodes_x, nodes_y) {
        if (nodes_x < 2 || nodes_y < 2) throw InputError("sobolev: grid too small");
        if (!(sigma > 0.0) || !(spacing > 0.0)) throw InputError("sobolev: sigma must be positive");
        const double c = 0.5 * sigma * sigma;
        const Quadrature quad(3);
        // Element matrices: mass scales with h^2, stiffness is scale free in 2-D.
        std::array<std::array<double, 4>, 4> me{}, ke{};
        for (const auto &p : quad.points())
            for (int a = 0; a < 4; ++a)
                for (int b = 0; b < 4; ++b) {
                    me[a][b] += p.weight * p.shape[a] * p.shape[b] * spacing * spacing;
                    ke[a][b] += p.weight * dot(p.shape_grad[a], p.shape_grad[b]);
                }
        constexpr int ox[4] = {0, 1, 0, 1};
        constexpr int oy[4] = {0, 0, 1, 1};
        for (int ey = 0; ey + 1 < ny_; ++ey)
            for (int ex = 0; ex + 1 < nx_; ++ex)
                for (int a = 0; a < 4; ++a)
                    for (int b = 0; b < 4; ++b) {
                        const int dx = ox[b] - ox[a];
                        const int dy = oy[b] - oy[a];
                        stencil_(ex + ox[a], ey + oy[a])[(dy + 1) * 3 + (dx + 1)] += me[a][b] + c * ke[a][b];
                    }
    }

    int nodes_x() const { return nx_; }
    int nodes_y() const { return ny_; }
    int last_iterations() const { return last_iterations_; }

    /// y = A x, componentwise.
    Grid<Vec2> apply(const Grid<Vec2> &x) const {
        check(x);
        Grid<Vec2> y(nx_, ny_);
        for (int j = 0; j < ny_; ++j)
            for (int i = 0; i < nx_; ++i) y(i, j) = row(x, i, j);
        return y;
    }

    /// Solves A u = dual by Jacobi-preconditioned conjugate gradients.
    Grid<Vec2> apply_inverse(const DualField &dual) const {
        check(dual);
        const std::size_t n = dual.size();
        std::vector<double> diag(n);
        for (std::size_t k = 0; k < n; ++k) diag[k] = stencil_[k][4];

        Grid<Vec2> x(nx_, ny_, Vec2{});
        double bnorm2 = 0.0;
        for (const auto &v : dual.storage()) bnorm2 += dot(v, v);
        last_iterations_ = 0;
        if (bnorm2 == 0.0) return x;

        // Both components share the operator, so they are iterated together as independent solves.
        Grid<Vec2> r = dual, z(nx_, ny_), p(nx_, ny_);
        Vec2 rz{};
        for (std::size_t k = 0; k < n; ++k) {
            z[k] = r[k] * (1.0 / diag[k]);
            rz.x += r[k].x * z[k].x;
            rz.y += r[k].y * z[k].y;
        }
        p = z;
        const double target = tol_ * tol_ * bnorm2;
        const int max_iter = 10 * static_cast<int>(n) + 100;
        Vec2 bn{}; // per-component right-hand side norms guard against a zero component
        for (const auto &v : dual.storage()) { bn.x += v.x * v.x; bn.y += v.y * v.y; }
        bool done_x = bn.x == 0.0, done_y = bn.y == 0.0;
        for (int it = 0; it < max_iter; ++it) {
            Vec2 rr{};
            for (const auto &v : r.storage()) { rr.x += v.x * v.x; rr.y += v.y * v.y; }
            if (rr.x + rr.y <= target) { last_iterations_ = it; return x; }
            done_x = done_x || rr.x <= tol_ * tol_ * bn.x;
            done_y = done_y || rr.y <= tol_ * tol_ * bn.y;
            const Grid<Vec2> ap = apply(p);
            Vec2 pap{};
            for (std::size_t k = 0; k < n; ++k) { pap.x += p[k].x * ap[k].x; pap.y += p[k].y * ap[k].y; }
            const double ax = done_x || pap.x == 0.0 ? 0.0 : rz.x / pap.x;
            const double ay = done_y || pap.y == 0.0 ? 0.0 : rz.y / pap.y;
            Vec2 rz_new{};
            for (std::size_t k = 0; k < n; ++k) {
                x[k].x += ax * p[k].x;
                x[k].y += ay * p[k].y;
                r[k].x -= ax * ap[k].x;
                r[k].y -= ay * ap[k].y;
                z[k] = r[k] * (1.0 / diag[k]);
                rz_new.x += r[k].x * z[k].x;
                rz_new.y += r[k].y * z[k].y;
            }
            const double bx = rz.x == 0.0 ? 0.0 : rz_new.x / rz.x;
            const double by = rz.y == 0.0 ? 0.0 : rz_new.y / rz.y;
            for (std::size_t k = 0; k < n; ++k) {
                p[k].x = z[k].x + bx * p[k].x;
                p[k].y = z[k].y + by * p[k].y;
            }
            rz = rz_new;
        }
        throw SolverError("sobolev: conjugate gradients did not converge");
    }

private:
    void check(const Grid<Vec2> &g) const {
        if (g.width() != nx_ || g.height() != ny_) throw InputError("sobolev: field does not match node grid");
    }

    Vec2 row(const Grid<Vec2> &x, int i, int j) const {
        const auto &s = stencil_(i, j);
        Vec2 acc{};
        for (int dy = -1; dy <= 1; ++dy) {
            const int jj = j + dy;
            if (jj < 0 || jj >= ny_) continue;
            for (int dx = -1; dx <= 1; ++dx) {
                const int ii = i + dx;
                if (ii < 0 || ii >= nx_) continue;
                acc += x(ii, jj) * s[(dy + 1) * 3 + (dx + 1)];
            }
        }
        return acc;
    }

    int nx_;
    int ny_;
    double tol_;
    Grid<std::array<double, 9>> stencil_;
    mutable int last_iterations_ = 0;
};

/// Smoothed descent direction A^-1 dual for the metric with scale sigma (domain units).
inline Grid<Vec2> sobolev_apply_inverse(const DualField &dual, double sigma) {
    const double spacing = 1.0 / (std::max(dual.width(), dual.height()) - 1);
    return SobolevMetric(dual.width(), dual.height(), spacing, sigma).apply_inverse(dual);
}

} // namespace nrreg
