#pragma once

#include <cmath>
#include <random>

#include "nrreg/nrreg.hpp"

namespace nrreg::fixtures {

inline Frame random_frame(int w, int h, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Frame f(w, h);
    for (auto &v : f.values().storage()) v = u(rng);
    return f;
}

/// Sum of a few low-frequency cosines, sampled at pixel centres moved by `shift`.
inline Frame smooth_frame(int size, std::uint64_t seed, int modes = 6, int max_freq = 3, Vec2 shift = {}) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> k(-max_freq, max_freq);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    struct Mode { double kx, ky, phase, amp; };
    std::vector<Mode> m;
    while (int(m.size()) < modes) {
        const int kx = k(rng), ky = k(rng);
        if (kx == 0 && ky == 0) continue;
        m.push_back({double(kx), double(ky), 2 * M_PI * u(rng), 0.5 + u(rng)});
    }
    Frame f(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const Vec2 p = f.pixel_center(x, y) + shift;
            double v = 0.0;
            for (const auto &md : m) v += md.amp * std::cos(2 * M_PI * (md.kx * p.x + md.ky * p.y) + md.phase);
            f(x, y) = v;
        }
    return f;
}

/// Smooth random displacement field with largest nodal norm `amplitude` (domain units).
inline Deformation smooth_deformation(int nx, int ny, std::uint64_t seed, double amplitude) {
    std::mt19937_64 rng(seed);
    SmoothWarp w(amplitude, 3, 2, rng);
    Deformation d(nx, ny);
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) d.displacement(i, j) = w(d.node_position(i, j));
    return d;
}

inline Grid<Vec2> random_field(int nx, int ny, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, scale);
    Grid<Vec2> g(nx, ny);
    for (auto &v : g.storage()) v = {n(rng), n(rng)};
    return g;
}

inline double max_abs_diff(const Frame &a, const Frame &b) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.pixel_count(); ++k) m = std::max(m, std::abs(a.values()[k] - b.values()[k]));
    return m;
}

} // namespace nrreg::fixtures
