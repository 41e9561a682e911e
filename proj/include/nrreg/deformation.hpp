#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nrreg/frame.hpp"
#include "nrreg/grid.hpp"

namespace nrreg {

/// Piecewise bilinear map phi(x) = x + u(x), stored as nodal displacements u in domain units.
///
/// Node (i, j) sits at (i, j) * spacing with spacing = 1 / (max(nodes_x, nodes_y) - 1); a frame of
/// w x h pixels conforms to a (w + 1) x (h + 1) node grid, one bilinear element per pixel.
class Deformation {
public:
    Deformation() = default;
    Deformation(int nodes_x, int nodes_y) : u_(check(nodes_x), check(nodes_y), Vec2{}) {}
    explicit Deformation(Grid<Vec2> displacement) : u_(std::move(displacement)) {
        check(u_.width());
        check(u_.height());
        for (const auto &v : u_.storage())
            if (!detail::finite(v)) throw InputError("displacements must be finite");
    }

    /// Identity on the node grid conforming to `frame`.
    static Deformation conforming(const Frame &frame) { return Deformation(frame.width() + 1, frame.height() + 1); }

    int nodes_x() const { return u_.width(); }
    int nodes_y() const { return u_.height(); }
    std::size_t node_count() const { return u_.size(); }
    double spacing() const { return 1.0 / (std::max(nodes_x(), nodes_y()) - 1); }
    Vec2 node_position(int i, int j) const { return {i * spacing(), j * spacing()}; }

    Vec2 &displacement(int i, int j) { return u_(i, j); }
    const Vec2 &displacement(int i, int j) const { return u_(i, j); }
    Grid<Vec2> &field() { return u_; }
    const Grid<Vec2> &field() const { return u_; }

    /// Bilinear displacement at an arbitrary point, clamped to the node grid.
    Vec2 displacement_at(const Vec2 &p) const {
        const double inv = std::max(nodes_x(), nodes_y()) - 1;
        const double px = std::clamp(p.x * inv, 0.0, double(nodes_x() - 1));
        const double py = std::clamp(p.y * inv, 0.0, double(nodes_y() - 1));
        const int i = std::min(static_cast<int>(px), nodes_x() - 2);
        const int j = std::min(static_cast<int>(py), nodes_y() - 2);
        const double tx = px - i;
        const double ty = py - j;
        const Vec2 a = u_(i, j) + (u_(i + 1, j) - u_(i, j)) * tx;
        const Vec2 b = u_(i, j + 1) + (u_(i + 1, j + 1) - u_(i, j + 1)) * tx;
        return a + (b - a) * ty;
    }

    Vec2 operator()(const Vec2 &p) const { return p + displacement_at(p); }

    bool same_grid(const Deformation &o) const { return u_.same_shape(o.u_); }
    bool conforms_to(const Frame &f) const { return nodes_x() == f.width() + 1 && nodes_y() == f.height() + 1; }

    /// Largest nodal displacement norm.
    double max_norm() const {
        double m = 0.0;
        for (const auto &v : u_.storage()) m = std::max(m, norm(v));
        return m;
    }

    friend bool operator==(const Deformation &, const Deformation &) = default;

private:
    static int check(int n) {
        if (n < 2) throw InputError("deformation needs at least 2x2 nodes");
        return n;
    }

    Grid<Vec2> u_;
};

inline Deformation identity(int nodes_x, int nodes_y) { return Deformation(nodes_x, nodes_y); }

inline Deformation translation(int nodes_x, int nodes_y, const Vec2 &shift) {
    Deformation d(nodes_x, nodes_y);
    for (auto &v : d.field().storage()) v = shift;
    return d;
}

/// Nodal interpolant of (outer o inner): each node maps to outer(inner(node)).
inline Deformation compose(const Deformation &outer, const Deformation &inner) {
    if (!outer.same_grid(inner)) throw InputError("compose: node grids differ");
    Deformation out(inner.nodes_x(), inner.nodes_y());
    for (int j = 0; j < inner.nodes_y(); ++j)
        for (int i = 0; i < inner.nodes_x(); ++i) {
            const Vec2 x = inner.node_position(i, j);
            const Vec2 y = x + inner.displacement(i, j);
            out.displacement(i, j) = outer(y) - x;
        }
    return out;
}

/// Per-node deviation |phi(psi(x)) - x|; NaN at nodes that psi maps outside the domain of phi.
inline Grid<double> composition_residuals(const Deformation &phi, const Deformation &psi) {
    const double xmax = (phi.nodes_x() - 1) * phi.spacing(), ymax = (phi.nodes_y() - 1) * phi.spacing();
    const double slack = 1e-12 * phi.spacing();
    Grid<double> r(psi.nodes_x(), psi.nodes_y(), std::numeric_limits<double>::quiet_NaN());
    for (int j = 0; j < psi.nodes_y(); ++j)
        for (int i = 0; i < psi.nodes_x(); ++i) {
            const Vec2 x = psi.node_position(i, j);
            const Vec2 y = x + psi.displacement(i, j);
            if (y.x < -slack || y.y < -slack || y.x > xmax + slack || y.y > ymax + slack) continue;
            r(i, j) = norm(phi(y) - x);
        }
    return r;
}

/// Largest nodal deviation of (phi o psi) from the identity, over the nodes that psi maps into
/// the domain of phi.
inline double composition_residual(const Deformation &phi, const Deformation &psi) {
    double r = 0.0;
    for (double v : composition_residuals(phi, psi).storage())
        if (v > r) r = v;
    return r;
}

class InversionError : public SolverError {
public:
    explicit InversionError(double best_residual, Deformation best = {})
        : SolverError("deformation inversion did not converge (best residual " + std::to_string(best_residual) + ")"),
          residual_(best_residual), best_(std::make_shared<const Deformation>(std::move(best))) {}
    double residual() const { return residual_; }
    /// Iterate with the smallest residual.
    const Deformation &best() const { return *best_; }

private:
    double residual_;
    std::shared_ptr<const Deformation> best_;
};

struct Inversion {
    Deformation inverse;
    double residual = 0.0;
    int iterations = 0;
};

/// Numerical inverse by the fixed point psi <- psi - omega (phi o psi - id). omega starts at one
/// and is halved whenever an update would increase the residual.
inline Inversion invert(const Deformation &phi, double tol = 1e-8, int max_iter = 200) {
    if (!(tol > 0.0)) throw InputError("invert: tolerance must be positive");
    Deformation psi = phi;
    for (auto &v : psi.field().storage()) v = -v;
    double residual = composition_residual(phi, psi);
    double omega = 1.0;
    int it = 0;
    while (residual > tol && it < max_iter) {
        ++it;
        Deformation trial = psi;
        for (int j = 0; j < psi.nodes_y(); ++j)
            for (int i = 0; i < psi.nodes_x(); ++i) {
                const Vec2 x = psi.node_position(i, j);
                const Vec2 r = phi(x + psi.displacement(i, j)) - x;
                trial.displacement(i, j) -= r * omega;
            }
        const double trial_residual = composition_residual(phi, trial);
        if (trial_residual < residual) {
            psi = std::move(trial);
            residual = trial_residual;
        } else {
            omega *= 0.5;
            if (omega < 1e-6) break;
        }
    }
    if (residual > tol) throw InversionError(residual, std::move(psi));
    return {std::move(psi), residual, it};
}

enum class Interpolation { bilinear, nearest };

/// Resamples `frame` at phi(p) for every pixel centre p. Pixels whose preimage leaves the domain
/// or touches invalid input pixels are marked invalid.
inline Frame warp(const Frame &frame, const Deformation &phi, Interpolation mode = Interpolation::bilinear) {
    if (!phi.conforms_to(frame)) throw InputError("warp: deformation grid does not conform to frame");
    Frame out(frame.width(), frame.height());
    for (int y = 0; y < frame.height(); ++y)
        for (int x = 0; x < frame.width(); ++x) {
            const Vec2 q = phi(frame.pixel_center(x, y));
            const Sample s = mode == Interpolation::bilinear ? sample_bilinear(frame, q) : sample_nearest(frame, q);
            out(x, y) = s.value;
            out.set_valid(x, y, s.valid);
        }
    return out;
}

/// Translation window (pixels) and optional rotation angles (radians) for the rigid baseline.
struct RigidSearch {
    int radius_x = 10;
    int radius_y = 10;
    int center_x = 0;
    int center_y = 0;
    std::vector<double> angles{0.0};
};

struct RigidFit {
    Deformation phi;
    int shift_x = 0;
    int shift_y = 0;
    double angle = 0.0;
    double score = -std::numeric_limits<double>::infinity();
};

namespace detail {

struct Moments {
    double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
    std::size_t n = 0;

    void add(double a, double b) {
        sa += a; sb += b; saa += a * a; sbb += b * b; sab += a * b; ++n;
    }

    std::optional<double> ncc() const {
        if (n == 0) return std::nullopt;
        const double N = double(n);
        const double va = saa - sa * sa / N;
        const double vb = sbb - sb * sb / N;
        if (!(va > 0.0) || !(vb > 0.0)) return std::nullopt;
        return (sab - sa * sb / N) / std::sqrt(va * vb);
    }
};

/// Pixel-sum NCC of f(x + shift) against g(x) over the overlapping valid pixels.
inline std::optional<double> shifted_ncc(const Frame &f, const Frame &g, int dx, int dy, std::size_t min_overlap) {
    Moments m;
    const int x0 = std::max(0, -dx), x1 = std::min(g.width(), f.width() - dx);
    const int y0 = std::max(0, -dy), y1 = std::min(g.height(), f.height() - dy);
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x)
            if (g.valid(x, y) && f.valid(x + dx, y + dy)) m.add(f(x + dx, y + dy), g(x, y));
    if (m.n < min_overlap) return std::nullopt;
    return m.ncc();
}

inline Deformation rigid_field(const Frame &g, double angle, const Vec2 &shift) {
    Deformation d = Deformation::conforming(g);
    const Vec2 c = g.domain_size() * 0.5;
    const double cs = std::cos(angle), sn = std::sin(angle);
    for (int j = 0; j < d.nodes_y(); ++j)
        for (int i = 0; i < d.nodes_x(); ++i) {
            const Vec2 x = d.node_position(i, j);
            const Vec2 r = x - c + shift;
            const Vec2 y = c + Vec2{cs * r.x - sn * r.y, sn * r.x + cs * r.y};
            d.displacement(i, j) = y - x;
        }
    return d;
}

} // namespace detail

/// Exhaustive search for the rigid motion phi maximising the pixel NCC of f o phi and g. Integer
/// pixel translations are scored exactly; non-zero angles resample f bilinearly.
inline RigidFit fit_rigid(const Frame &f, const Frame &g, const RigidSearch &search = {}) {
    if (!f.same_geometry(g)) throw InputError("fit_rigid: frames differ in size");
    if (search.radius_x < 0 || search.radius_y < 0 || search.angles.empty())
        throw InputError("fit_rigid: empty search range");
    const std::size_t min_overlap = std::max<std::size_t>(4, g.pixel_count() / 4);
    RigidFit best;
    for (double angle : search.angles) {
        const Frame source = angle == 0.0 ? f : warp(f, detail::rigid_field(g, angle, {}));
        for (int dy = search.center_y - search.radius_y; dy <= search.center_y + search.radius_y; ++dy)
            for (int dx = search.center_x - search.radius_x; dx <= search.center_x + search.radius_x; ++dx) {
                const auto score = detail::shifted_ncc(source, g, dx, dy, min_overlap);
                if (score && *score > best.score) {
                    best.score = *score;
                    best.shift_x = dx;
                    best.shift_y = dy;
                    best.angle = angle;
                }
            }
    }
    if (!std::isfinite(best.score)) throw DegenerateImageError();
    // phi(x) = c + R(x + s - c): the shift is applied before rotating about the centre c.
    const Vec2 shift{best.shift_x * f.pixel_size(), best.shift_y * f.pixel_size()};
    best.phi = detail::rigid_field(g, best.angle, shift);
    return best;
}

} // namespace nrreg
