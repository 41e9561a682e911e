#pragma once

#include <string>
#include <vector>

#include "nrreg/frame.hpp"
#include "nrreg/grid.hpp"

namespace nrreg {

/// Cell-centred grids have 2^d values per side, mesh-centred grids 2^d + 1.
enum class GridConvention { cell_centered, mesh_centered };

/// Grid level d of a data set in the given convention (throws when the size matches no level).
template <class T>
int grid_level(const Grid<T> &g, GridConvention c) {
    if (g.width() != g.height()) throw InputError("multilevel grids must be square");
    const int n = c == GridConvention::cell_centered ? g.width() : g.width() - 1;
    if (!is_power_of_two(n)) throw InputError("resolution " + std::to_string(g.width()) + " matches no grid level");
    return log2_exact(n);
}

// Cell-centred transfers: prolongation copies each coarse cell into its four children,
// restriction averages the four children.

template <class T>
Grid<T> prolongate_cells(const Grid<T> &coarse) {
    grid_level(coarse, GridConvention::cell_centered);
    Grid<T> fine(coarse.width() * 2, coarse.height() * 2);
    for (int y = 0; y < fine.height(); ++y)
        for (int x = 0; x < fine.width(); ++x) fine(x, y) = coarse(x / 2, y / 2);
    return fine;
}

template <class T>
Grid<T> restrict_cells(const Grid<T> &fine) {
    if (grid_level(fine, GridConvention::cell_centered) < 1) throw InputError("cannot restrict below level 0");
    Grid<T> coarse(fine.width() / 2, fine.height() / 2);
    for (int y = 0; y < coarse.height(); ++y)
        for (int x = 0; x < coarse.width(); ++x) {
            T s = fine(2 * x, 2 * y);
            s += fine(2 * x + 1, 2 * y);
            s += fine(2 * x, 2 * y + 1);
            s += fine(2 * x + 1, 2 * y + 1);
            coarse(x, y) = s * 0.25;
        }
    return coarse;
}

// Mesh-centred transfers: prolongation keeps coarse nodes and interpolates the new ones
// bilinearly; restriction is the transpose, rescaled row-wise so constants map to constants.
// Both are tensor products of their 1-D counterparts.

template <class T>
Grid<T> prolongate_nodes(const Grid<T> &coarse) {
    grid_level(coarse, GridConvention::mesh_centered);
    const int n = 2 * (coarse.width() - 1) + 1;
    Grid<T> rows(n, coarse.height());
    for (int y = 0; y < coarse.height(); ++y)
        for (int x = 0; x < n; ++x) {
            if (x % 2 == 0) {
                rows(x, y) = coarse(x / 2, y);
            } else {
                T s = coarse(x / 2, y);
                s += coarse(x / 2 + 1, y);
                rows(x, y) = s * 0.5;
            }
        }
    Grid<T> fine(n, n);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            if (y % 2 == 0) {
                fine(x, y) = rows(x, y / 2);
            } else {
                T s = rows(x, y / 2);
                s += rows(x, y / 2 + 1);
                fine(x, y) = s * 0.5;
            }
        }
    return fine;
}

template <class T>
Grid<T> restrict_nodes(const Grid<T> &fine) {
    if (grid_level(fine, GridConvention::mesh_centered) < 1) throw InputError("cannot restrict below level 0");
    const int nf = fine.width();
    const int nc = (nf - 1) / 2 + 1;
    // 1-D row sums of the transposed prolongation: 1 + 1/2 at the ends, 1/2 + 1 + 1/2 inside.
    auto weight = [nc](int i) { return (i == 0 || i == nc - 1) ? 1.5 : 2.0; };
    auto gather = [nf](auto &&at, int i) {
        T s = at(2 * i);
        if (2 * i - 1 >= 0) { T t = at(2 * i - 1); s += t * 0.5; }
        if (2 * i + 1 < nf) { T t = at(2 * i + 1); s += t * 0.5; }
        return s;
    };
    Grid<T> rows(nc, nf);
    for (int y = 0; y < nf; ++y)
        for (int x = 0; x < nc; ++x) rows(x, y) = gather([&](int k) { return fine(k, y); }, x) * (1.0 / weight(x));
    Grid<T> coarse(nc, nc);
    for (int y = 0; y < nc; ++y)
        for (int x = 0; x < nc; ++x) coarse(x, y) = gather([&](int k) { return rows(x, k); }, y) * (1.0 / weight(y));
    return coarse;
}

/// Cell restriction of an image; coarse cells average their valid children and are invalid only
/// when no child is valid.
inline Frame restrict(const Frame &fine) {
    if (grid_level(fine.values(), GridConvention::cell_centered) < 2)
        throw InputError("cannot restrict a frame below 2x2");
    const int w = fine.width() / 2;
    Grid<double> values(w, w);
    Mask valid(w, w);
    for (int y = 0; y < w; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            int n = 0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    if (fine.valid(2 * x + dx, 2 * y + dy)) { s += fine(2 * x + dx, 2 * y + dy); ++n; }
            if (n == 0) {
                values(x, y) = 0.25 * (fine(2 * x, 2 * y) + fine(2 * x + 1, 2 * y) + fine(2 * x, 2 * y + 1) +
                                       fine(2 * x + 1, 2 * y + 1));
                valid(x, y) = 0;
            } else {
                values(x, y) = s / n;
                valid(x, y) = 1;
            }
        }
    return Frame(std::move(values), std::move(valid));
}

inline Frame prolongate(const Frame &coarse) {
    return Frame(prolongate_cells(coarse.values()), prolongate_cells(coarse.mask()));
}

/// Levels m0..m1 of a multilevel hierarchy, finest last.
template <class Data>
struct Pyramid {
    GridConvention convention = GridConvention::cell_centered;
    int m0 = 0;
    int m1 = 0;
    std::vector<Data> levels;

    const Data &level(int m) const {
        if (m < m0 || m > m1) throw InputError("pyramid level out of range");
        return levels[static_cast<std::size_t>(m - m0)];
    }
    const Data &finest() const { return levels.back(); }
    const Data &coarsest() const { return levels.front(); }
};

/// Restricts a 2^m1 x 2^m1 frame successively down to level m0.
inline Pyramid<Frame> build_pyramid(const Frame &frame, int m0, int m1) {
    const int level = grid_level(frame.values(), GridConvention::cell_centered);
    if (level != m1) throw InputError("frame resolution does not match level " + std::to_string(m1));
    if (m0 > m1 || m0 < 1) throw InputError("invalid level range");
    Pyramid<Frame> p{GridConvention::cell_centered, m0, m1, {}};
    p.levels.resize(static_cast<std::size_t>(m1 - m0 + 1));
    p.levels.back() = frame;
    for (int m = m1 - 1; m >= m0; --m)
        p.levels[static_cast<std::size_t>(m - m0)] = restrict(p.levels[static_cast<std::size_t>(m + 1 - m0)]);
    return p;
}

} // namespace nrreg
