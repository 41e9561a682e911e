#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <mutex>
#include <string>
#include <optional>
#include <utility>
#include <vector>

#include "nrreg/deformation.hpp"
#include "nrreg/flow.hpp"
#include "nrreg/frame.hpp"

namespace nrreg {

/// d = f_n - f_0 o phi_{0,n} with f_0 sampled by nearest neighbour. Pixels whose sample leaves the
/// domain or hits an invalid pixel are invalid.
inline Frame residual(const Frame &fn, const Frame &f0, const Deformation &phi_0n) {
    if (!fn.same_geometry(f0)) throw InputError("residual: frames differ in size");
    const Frame warped = warp(f0, phi_0n, Interpolation::nearest);
    Frame d(fn.width(), fn.height());
    for (int y = 0; y < fn.height(); ++y)
        for (int x = 0; x < fn.width(); ++x) {
            d(x, y) = fn(x, y) - warped(x, y);
            d.set_valid(x, y, fn.valid(x, y) && warped.valid(x, y));
        }
    return d;
}

/// Numerical inverse of phi_{n,0} for seeding phi_{0,n}. An inverse that misses the tolerance is
/// still returned when at most `max_fraction` of its nodes deviate by `max_residual` or more;
/// otherwise the inversion error is rethrown.
inline Deformation inverse_seed(const Deformation &phi_n0, double max_residual, double max_fraction = 0.01) {
    try {
        return invert(phi_n0).inverse;
    } catch (const InversionError &e) {
        std::size_t over = 0, counted = 0;
        for (double v : composition_residuals(phi_n0, e.best()).storage())
            if (!std::isnan(v)) ++counted, over += !(v < max_residual);
        if (counted == 0 || double(over) > max_fraction * double(counted)) throw;
        return e.best();
    }
}

/// phi_{0,n}: registration of f_0 onto f_n seeded with the numerical inverse of phi_{n,0}; up to 1%
/// of the inverse's nodes may miss by a pixel or more.
inline RegistrationResult inverse_seeded_registration(const Frame &f0, const Frame &fn, const Deformation &phi_n0,
                                                      const RegistrationParams &params) {
    return multilevel_register(f0, fn, inverse_seed(phi_n0, f0.pixel_size()), params.seeded());
}

struct PatchMetric {
    /// |patch mean| on the (w - 2p) x (h - 2p) interior; invalid where the patch touches invalid pixels.
    Frame values;
    double mean = 0.0;
};

/// d_p(i) = |mean of d over the (2p+1)^2 patch centred at i| for every interior pixel i.
inline PatchMetric patch_metric(const Frame &d, int p) {
    if (p < 0 || 2 * p + 1 > std::min(d.width(), d.height()) || d.width() - 2 * p < 2 || d.height() - 2 * p < 2)
        throw InputError("patch_metric: patch radius too large for the image");
    const int W = d.width(), H = d.height();
    // Summed-area tables of values and invalid counts.
    std::vector<double> sum(std::size_t(W + 1) * (H + 1), 0.0);
    std::vector<int> bad(std::size_t(W + 1) * (H + 1), 0);
    auto at = [W](int x, int y) { return std::size_t(y) * (W + 1) + std::size_t(x); };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const bool ok = d.valid(x, y);
            sum[at(x + 1, y + 1)] = (ok ? d(x, y) : 0.0) + sum[at(x, y + 1)] + sum[at(x + 1, y)] - sum[at(x, y)];
            bad[at(x + 1, y + 1)] = (ok ? 0 : 1) + bad[at(x, y + 1)] + bad[at(x + 1, y)] - bad[at(x, y)];
        }
    const int side = 2 * p + 1;
    const double area = double(side) * side;
    PatchMetric out{Frame(W - 2 * p, H - 2 * p), 0.0};
    std::size_t n = 0;
    for (int y = 0; y < H - 2 * p; ++y)
        for (int x = 0; x < W - 2 * p; ++x) {
            const int x1 = x + side, y1 = y + side;
            const int nbad = bad[at(x1, y1)] - bad[at(x, y1)] - bad[at(x1, y)] + bad[at(x, y)];
            if (nbad > 0) {
                out.values.set_valid(x, y, false);
                continue;
            }
            const double s = sum[at(x1, y1)] - sum[at(x, y1)] - sum[at(x1, y)] + sum[at(x, y)];
            out.values(x, y) = std::abs(s / area);
            out.mean += out.values(x, y);
            ++n;
        }
    if (n == 0) throw InputError("patch_metric: no patch free of invalid pixels");
    out.mean /= double(n);
    return out;
}

/// Mean of the valid d_p values in each of L x L blocks. When the size is not divisible by L the
/// leftover rows and columns are dropped, split evenly between both borders. Blocks without valid
/// values are NaN.
inline Grid<double> local_quality_grid(const Frame &dp, int L) {
    if (L < 1 || L > std::min(dp.width(), dp.height())) throw InputError("local_quality_grid: invalid block count");
    const int bw = dp.width() / L, bh = dp.height() / L;
    const int ox = (dp.width() - bw * L) / 2, oy = (dp.height() - bh * L) / 2;
    Grid<double> out(L, L);
    for (int by = 0; by < L; ++by)
        for (int bx = 0; bx < L; ++bx) {
            double s = 0.0;
            std::size_t n = 0;
            for (int y = oy + by * bh; y < oy + (by + 1) * bh; ++y)
                for (int x = ox + bx * bw; x < ox + (bx + 1) * bw; ++x)
                    if (dp.valid(x, y)) {
                        s += dp(x, y);
                        ++n;
                    }
            out(bx, by) = n ? s / double(n) : std::numeric_limits<double>::quiet_NaN();
        }
    return out;
}

namespace detail {

inline std::mutex &fftw_planner_lock() {
    static std::mutex m;
    return m;
}

} // namespace detail

/// Modulus of the 2-D DFT of the mean-subtracted residual (invalid pixels set to 0), with the
/// zero frequency moved to pixel (w/2, h/2). Pixel (w/2 + kx, h/2 + ky) holds frequency (kx, ky).
inline Frame power_spectrum(const Frame &d) {
    const int W = d.width(), H = d.height();
    double mean = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            if (d.valid(x, y)) {
                mean += d(x, y);
                ++n;
            }
    if (n) mean /= double(n);

    std::vector<std::complex<double>> buf(std::size_t(W) * H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) buf[std::size_t(y) * W + x] = d.valid(x, y) ? d(x, y) - mean : 0.0;
    fftw_plan plan;
    {
        std::lock_guard lock(detail::fftw_planner_lock());
        auto *data = reinterpret_cast<fftw_complex *>(buf.data());
        plan = fftw_plan_dft_2d(H, W, data, data, FFTW_FORWARD, FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard lock(detail::fftw_planner_lock());
        fftw_destroy_plan(plan);
    }
    Frame out(W, H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int sx = (x + W / 2) % W, sy = (y + H / 2) % H;
            out(sx, sy) = std::abs(buf[std::size_t(y) * W + x]);
        }
    return out;
}

struct SpotIQ {
    int kx = 0;
    int ky = 0;
    double iq = 0.0;

    double radius() const { return std::hypot(double(kx), double(ky)); }
};

struct IqOptions {
    double inner_radius = 2.0;
    double outer_radius = 6.0;
};

/// IQ of one spot: the largest modulus in its 3x3 neighbourhood over the mean modulus on the
/// annulus inner <= r <= outer around it (the neighbourhood itself excluded).
inline double iq_at(const Frame &spectrum, int kx, int ky, const IqOptions &opt = {}) {
    const int W = spectrum.width(), H = spectrum.height();
    const int cx = W / 2 + kx, cy = H / 2 + ky;
    const int r = static_cast<int>(std::ceil(opt.outer_radius));
    if (cx - r < 0 || cy - r < 0 || cx + r >= W || cy + r >= H)
        throw InputError("iq: annulus around spot (" + std::to_string(kx) + ", " + std::to_string(ky) +
                         ") leaves the spectrum");
    double peak = 0.0;
    for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) peak = std::max(peak, spectrum(cx + dx, cy + dy));
    double s = 0.0;
    std::size_t n = 0;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
            const double rr = std::hypot(double(dx), double(dy));
            if (rr < opt.inner_radius || rr > opt.outer_radius || (std::abs(dx) <= 1 && std::abs(dy) <= 1)) continue;
            s += spectrum(cx + dx, cy + dy);
            ++n;
        }
    if (n == 0) throw InputError("iq: empty annulus");
    const double background = s / double(n);
    if (!(background > 0.0)) return peak > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
    return peak / background;
}

inline std::vector<SpotIQ> iq_factor(const Frame &spectrum, const std::vector<std::pair<int, int>> &spots,
                                     const IqOptions &opt = {}) {
    std::vector<SpotIQ> out;
    out.reserve(spots.size());
    for (const auto &[kx, ky] : spots) out.push_back({kx, ky, iq_at(spectrum, kx, ky, opt)});
    return out;
}

struct SpotDetection {
    double threshold = 3.0;
    double dc_radius = 3.0;
    std::size_t max_spots = 64;
};

/// Local maxima of the spectrum whose IQ exceeds the threshold, outside a disk around DC, strongest
/// first.
inline std::vector<std::pair<int, int>> detect_spots(const Frame &spectrum, const SpotDetection &det = {},
                                                     const IqOptions &opt = {}) {
    const int W = spectrum.width(), H = spectrum.height();
    const int r = static_cast<int>(std::ceil(opt.outer_radius));
    std::vector<SpotIQ> found;
    for (int y = r; y < H - r; ++y)
        for (int x = r; x < W - r; ++x) {
            const int kx = x - W / 2, ky = y - H / 2;
            if (std::hypot(double(kx), double(ky)) <= det.dc_radius) continue;
            const double v = spectrum(x, y);
            bool is_max = true;
            for (int dy = -1; dy <= 1 && is_max; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if ((dx || dy) && spectrum(x + dx, y + dy) > v) {
                        is_max = false;
                        break;
                    }
            if (!is_max) continue;
            const double iq = iq_at(spectrum, kx, ky, opt);
            if (iq > det.threshold) found.push_back({kx, ky, iq});
        }
    std::sort(found.begin(), found.end(), [](const SpotIQ &a, const SpotIQ &b) { return a.iq > b.iq; });
    if (found.size() > det.max_spots) found.resize(det.max_spots);
    std::vector<std::pair<int, int>> out;
    for (const auto &s : found) out.emplace_back(s.kx, s.ky);
    return out;
}

struct QualityOptions {
    int p_max = 12;
    int grid_blocks = 9;
    int grid_patch_radius = 4;
    /// Spots to evaluate; detected automatically when empty.
    std::vector<std::pair<int, int>> spots;
    IqOptions iq;
    SpotDetection detection;
};

struct QualityReport {
    Frame residual;
    std::vector<std::pair<int, double>> dp_curve;
    Frame dp;
    Grid<double> local_grid;
    Frame spectrum;
    std::vector<SpotIQ> iq_spots;
    double iq_max = 0.0;
};

inline QualityReport evaluate_quality(const Frame &d, const QualityOptions &opt = {}) {
    if (opt.p_max < 1) throw InputError("quality: p_max must be at least 1");
    QualityReport q;
    q.residual = d;
    for (int p = 1; p <= opt.p_max; ++p) q.dp_curve.emplace_back(p, patch_metric(d, p).mean);
    q.dp = patch_metric(d, opt.grid_patch_radius).values;
    q.local_grid = local_quality_grid(q.dp, opt.grid_blocks);
    q.spectrum = power_spectrum(d);
    const auto spots = opt.spots.empty() ? detect_spots(q.spectrum, opt.detection, opt.iq) : opt.spots;
    q.iq_spots = iq_factor(q.spectrum, spots, opt.iq);
    for (const auto &s : q.iq_spots) q.iq_max = std::max(q.iq_max, s.iq);
    return q;
}

} // namespace nrreg
