#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "nrreg/deformation.hpp"
#include "nrreg/drift.hpp"
#include "nrreg/frame.hpp"

namespace nrreg {

/// Periodic test specimen: Gaussian atoms at lattice sites, optional periodic pores and a smooth
/// thickness modulation. Lengths are in domain units of a size x size frame.
struct LatticeSpec {
    int size = 256;
    Vec2 basis_a{1.0 / 20.0, 0.0};
    Vec2 basis_b{0.0, 1.0 / 20.0};
    /// Atom positions within a unit cell, in fractional coordinates of the basis.
    std::vector<Vec2> motif = default_motif();
    double atom_amplitude = 1.0;
    double atom_width = 1.5 / 256.0;
    double background = 0.1;
    double pore_depth = 0.0;
    double pore_radius = 2.0 / 256.0;
    Vec2 pore_center{0.5, 0.5};
    /// Relative amplitude of a low-frequency multiplicative modulation of the atom contrast.
    double thickness_variation = 0.6;
    int thickness_modes = 6;
    int thickness_max_frequency = 3;
    std::uint64_t thickness_seed = 1;

    /// Ring of eight atoms around the cell centre plus one at the cell corner.
    static std::vector<Vec2> default_motif() {
        std::vector<Vec2> m{{0.0, 0.0}};
        for (int k = 0; k < 8; ++k) {
            const double a = 2.0 * std::numbers::pi * (k + 0.5) / 8.0;
            m.push_back({0.5 + 0.3 * std::cos(a), 0.5 + 0.3 * std::sin(a)});
        }
        return m;
    }

    void validate() const {
        const double det = basis_a.x * basis_b.y - basis_a.y * basis_b.x;
        if (size < 2) throw InputError("lattice size must be at least 2");
        if (!(std::abs(det) > 1e-15)) throw InputError("lattice basis vectors are linearly dependent");
        if (!(atom_width > 0.0)) throw InputError("atom width must be positive");
        if (pore_depth != 0.0 && !(pore_radius > 0.0)) throw InputError("pore radius must be positive");
        if (thickness_variation != 0.0 && (thickness_modes < 1 || thickness_max_frequency < 1))
            throw InputError("thickness modulation needs at least one mode");
    }
};

enum class NoiseKind { none, gaussian, poisson };

struct NoiseModel {
    NoiseKind kind = NoiseKind::none;
    double sigma = 0.0;
    /// Expected counts per unit intensity for Poisson noise.
    double dose = 1.0;
};

/// Motion between consecutive frames: a rigid step, a smooth sinusoidal warp, optional scan drift
/// within each frame, acquisition noise and an optional blur that grows with the frame index.
struct MotionSpec {
    Vec2 translation_px{};
    double warp_amplitude_px = 0.0;
    int warp_modes = 3;
    int warp_max_frequency = 2;
    std::optional<DriftModel> drift;
    NoiseModel noise;
    double blur_step_px = 0.0;

    void validate() const {
        if (!detail::finite(translation_px) || !std::isfinite(warp_amplitude_px) || warp_amplitude_px < 0.0)
            throw InputError("motion amplitudes must be finite and non-negative");
        if (warp_modes < 1 || warp_max_frequency < 1) throw InputError("warp needs at least one mode");
        if (noise.kind == NoiseKind::poisson && !(noise.dose > 0.0)) throw InputError("Poisson dose must be positive");
        if (noise.kind == NoiseKind::gaussian && !(noise.sigma >= 0.0)) throw InputError("noise sigma must be >= 0");
        if (drift) drift->validate();
        if (!(blur_step_px >= 0.0)) throw InputError("blur step must be non-negative");
    }
};

/// Smooth vector field sum_m a_m sin(2 pi k_m . x + theta_m), scaled so its largest norm on a
/// dense sample of [0, 1]^2 equals `amplitude`.
class SmoothWarp {
public:
    SmoothWarp() = default;
    SmoothWarp(double amplitude, int modes, int max_frequency, std::mt19937_64 &rng) {
        if (amplitude == 0.0) return;
        std::uniform_int_distribution<int> freq(-max_frequency, max_frequency);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (int m = 0; m < modes; ++m) {
            Mode md;
            do { md.k = {double(freq(rng)), double(freq(rng))}; } while (md.k.x == 0.0 && md.k.y == 0.0);
            const double angle = 2.0 * std::numbers::pi * unit(rng);
            md.a = {std::cos(angle), std::sin(angle)};
            md.theta = 2.0 * std::numbers::pi * unit(rng);
            modes_.push_back(md);
        }
        double peak = 0.0;
        constexpr int n = 64;
        for (int j = 0; j <= n; ++j)
            for (int i = 0; i <= n; ++i) peak = std::max(peak, norm((*this)(Vec2{double(i) / n, double(j) / n})));
        for (auto &md : modes_) md.a *= amplitude / peak;
    }

    Vec2 operator()(const Vec2 &x) const {
        Vec2 v{};
        for (const auto &md : modes_) v += md.a * std::sin(2.0 * std::numbers::pi * dot(md.k, x) + md.theta);
        return v;
    }

private:
    struct Mode {
        Vec2 k, a;
        double theta = 0.0;
    };
    std::vector<Mode> modes_;
};

/// Continuous lattice intensity at a domain position.
class LatticeModel {
public:
    explicit LatticeModel(const LatticeSpec &spec) : spec_(spec) {
        spec.validate();
        const double det = spec.basis_a.x * spec.basis_b.y - spec.basis_a.y * spec.basis_b.x;
        inv_ = {spec.basis_b.y / det, -spec.basis_b.x / det, -spec.basis_a.y / det, spec.basis_a.x / det};
        const double cell = std::min(norm(spec.basis_a), norm(spec.basis_b));
        reach_ = static_cast<int>(std::ceil(5.0 * std::max(spec.atom_width, spec.pore_radius) / cell)) + 1;
        if (spec.thickness_variation != 0.0) {
            std::mt19937_64 rng(spec.thickness_seed);
            thickness_ = SmoothWarp(1.0, spec.thickness_modes, spec.thickness_max_frequency, rng);
        }
    }

    double operator()(const Vec2 &x) const {
        const Vec2 c = inv_ * x;
        const int ca = static_cast<int>(std::floor(c.x));
        const int cb = static_cast<int>(std::floor(c.y));
        const double two_w2 = 2.0 * spec_.atom_width * spec_.atom_width;
        const double two_r2 = 2.0 * spec_.pore_radius * spec_.pore_radius;
        double atoms = 0.0, pores = 0.0;
        for (int db = -reach_; db <= reach_; ++db)
            for (int da = -reach_; da <= reach_; ++da) {
                const Vec2 origin = spec_.basis_a * double(ca + da) + spec_.basis_b * double(cb + db);
                for (const auto &m : spec_.motif) {
                    const Vec2 d = x - (origin + spec_.basis_a * m.x + spec_.basis_b * m.y);
                    const double r2 = dot(d, d);
                    if (r2 < 25.0 * two_w2) atoms += std::exp(-r2 / two_w2);
                }
                if (spec_.pore_depth != 0.0) {
                    const Vec2 d = x - (origin + spec_.basis_a * spec_.pore_center.x + spec_.basis_b * spec_.pore_center.y);
                    const double r2 = dot(d, d);
                    if (r2 < 25.0 * two_r2) pores += std::exp(-r2 / two_r2);
                }
            }
        double contrast = spec_.atom_amplitude * atoms - spec_.pore_depth * pores;
        if (spec_.thickness_variation != 0.0) contrast *= 1.0 + spec_.thickness_variation * thickness_(x).x;
        return std::max(0.0, spec_.background + contrast);
    }

    const LatticeSpec &spec() const { return spec_; }

private:
    LatticeSpec spec_;
    Mat2 inv_;
    int reach_ = 1;
    SmoothWarp thickness_;
};

/// Renders the lattice on a size x size frame, optionally through a coordinate map.
inline Frame render_lattice(const LatticeSpec &spec, const std::function<Vec2(const Vec2 &)> &map = {}) {
    const LatticeModel model(spec);
    Frame out(spec.size, spec.size);
    for (int y = 0; y < spec.size; ++y)
        for (int x = 0; x < spec.size; ++x) {
            const Vec2 p = out.pixel_center(x, y);
            out(x, y) = model(map ? map(p) : p);
        }
    return out;
}

/// Integer frequency indices (relative to DC) of reciprocal-lattice spots of a size x size render,
/// up to the given order and inside the Nyquist range.
inline std::vector<std::pair<int, int>> lattice_spots(const LatticeSpec &spec, int max_order = 2) {
    spec.validate();
    const double det = spec.basis_a.x * spec.basis_b.y - spec.basis_a.y * spec.basis_b.x;
    // Rows of B^-1 are the reciprocal vectors (cycles per domain unit).
    const Vec2 ra{spec.basis_b.y / det, -spec.basis_b.x / det};
    const Vec2 rb{-spec.basis_a.y / det, spec.basis_a.x / det};
    const int nyq = spec.size / 2 - 1;
    std::set<std::pair<int, int>> spots;
    for (int h = -max_order; h <= max_order; ++h)
        for (int k = -max_order; k <= max_order; ++k) {
            if (h == 0 && k == 0) continue;
            const Vec2 q = ra * double(h) + rb * double(k);
            const int fx = static_cast<int>(std::lround(q.x)), fy = static_cast<int>(std::lround(q.y));
            if (std::abs(fx) <= nyq && std::abs(fy) <= nyq && (fx != 0 || fy != 0)) spots.insert({fx, fy});
        }
    return {spots.begin(), spots.end()};
}

struct SyntheticSeries {
    std::vector<Frame> frames;
    /// Noise-free frames in the same intensity units as `frames`.
    std::vector<Frame> clean;
    /// Total map psi_i of frame i: frame_i(x) = gt(psi_i(x)), psi_1 = id up to drift.
    std::vector<Deformation> truth;
};

namespace detail {

inline Frame gaussian_blur(const Frame &f, double sigma_px) {
    if (sigma_px <= 0.0) return f;
    const int r = static_cast<int>(std::ceil(3.0 * sigma_px));
    std::vector<double> k(2 * r + 1);
    double s = 0.0;
    for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-0.5 * i * i / (sigma_px * sigma_px));
    for (auto &v : k) v /= s;
    auto pass = [&](const Frame &in, bool horizontal) {
        Frame out = in;
        for (int y = 0; y < in.height(); ++y)
            for (int x = 0; x < in.width(); ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i) {
                    const int xx = horizontal ? std::clamp(x + i, 0, in.width() - 1) : x;
                    const int yy = horizontal ? y : std::clamp(y + i, 0, in.height() - 1);
                    acc += k[i + r] * in(xx, yy);
                }
                out(x, y) = acc;
            }
        return out;
    };
    return pass(pass(f, true), false);
}

} // namespace detail

/// Generates n frames of gt seen through accumulating motion: psi_1 = id and
/// psi_i = psi_{i-1} o m_i with m_i(x) = x + t + w_i(x). With drift, each frame additionally scans
/// through the drift matrix: frame_i(x) = gt(psi_i(M x)). Noise is applied after warping.
inline SyntheticSeries synth_series(const Frame &gt, const MotionSpec &motion, int n, std::uint64_t seed) {
    motion.validate();
    if (n < 1) throw InputError("synth_series needs at least one frame");
    const double px = gt.pixel_size();
    std::mt19937_64 motion_rng(seed);
    std::vector<SmoothWarp> warps(static_cast<std::size_t>(n));
    for (int i = 1; i < n; ++i)
        warps[static_cast<std::size_t>(i)] =
            SmoothWarp(motion.warp_amplitude_px * px, motion.warp_modes, motion.warp_max_frequency, motion_rng);
    const Vec2 step = motion.translation_px * px;
    const bool drifting = motion.drift.has_value();
    const Mat2 drift = drifting ? drift_matrix(*motion.drift) : Mat2{};

    auto psi = [&](int i, Vec2 x) {
        if (drifting) x = detail::scan_to_domain(gt, drift * detail::domain_to_scan(gt, x));
        for (int k = i; k >= 1; --k) x = x + step + warps[static_cast<std::size_t>(k)](x);
        return x;
    };

    SyntheticSeries out;
    for (int i = 0; i < n; ++i) {
        Deformation truth = Deformation::conforming(gt);
        for (int j = 0; j < truth.nodes_y(); ++j)
            for (int k = 0; k < truth.nodes_x(); ++k) {
                const Vec2 x = truth.node_position(k, j);
                truth.displacement(k, j) = psi(i, x) - x;
            }
        Frame clean(gt.width(), gt.height());
        for (int y = 0; y < gt.height(); ++y)
            for (int x = 0; x < gt.width(); ++x) {
                const Sample s = sample_bilinear(gt, psi(i, gt.pixel_center(x, y)));
                clean(x, y) = s.value;
            }
        clean = detail::gaussian_blur(clean, i * motion.blur_step_px);

        std::seed_seq seq{seed, std::uint64_t(0x9e3779b97f4a7c15ULL), std::uint64_t(i)};
        std::mt19937_64 rng(seq);
        Frame noisy = clean;
        switch (motion.noise.kind) {
        case NoiseKind::none: break;
        case NoiseKind::gaussian: {
            std::normal_distribution<double> nd(0.0, motion.noise.sigma);
            for (auto &v : noisy.values().storage()) v += nd(rng);
            break;
        }
        case NoiseKind::poisson: {
            for (auto &v : clean.values().storage()) v *= motion.noise.dose;
            auto &dst = noisy.values().storage();
            const auto &src = clean.values().storage();
            for (std::size_t k = 0; k < src.size(); ++k) {
                std::poisson_distribution<long> pd(std::max(src[k], 1e-12));
                dst[k] = double(pd(rng));
            }
            break;
        }
        }
        out.frames.push_back(std::move(noisy));
        out.clean.push_back(std::move(clean));
        out.truth.push_back(std::move(truth));
    }
    return out;
}

/// Poisson dose giving the requested ratio of clean-signal standard deviation to noise RMS.
inline double dose_for_snr(const Frame &clean, double snr) {
    const FrameStats s = stats(clean);
    if (!(s.std_dev > 0.0) || !(s.mean > 0.0)) throw DegenerateImageError();
    // signal std = dose * s.std_dev, noise rms = sqrt(dose * s.mean)
    return snr * snr * s.mean / (s.std_dev * s.std_dev);
}

struct DeformationError {
    double mean_px = 0.0;
    double max_px = 0.0;
};

/// Nodes inside the centred box covering `fraction` of each side.
inline Mask interior_region(int nodes_x, int nodes_y, double fraction = 0.8) {
    Mask m(nodes_x, nodes_y, 0);
    const double mx = 0.5 * (1.0 - fraction) * (nodes_x - 1), my = 0.5 * (1.0 - fraction) * (nodes_y - 1);
    for (int j = 0; j < nodes_y; ++j)
        for (int i = 0; i < nodes_x; ++i)
            m(i, j) = i >= mx && i <= nodes_x - 1 - mx && j >= my && j <= nodes_y - 1 - my;
    return m;
}

/// Endpoint error between two displacement fields over a node mask, in pixels.
inline DeformationError deformation_error(const Deformation &estimated, const Deformation &truth,
                                          const Mask &region = {}) {
    if (!estimated.same_grid(truth)) throw InputError("deformation_error: grids differ");
    if (!region.empty() && !region.same_shape(truth.field())) throw InputError("deformation_error: region mismatch");
    const double to_px = 1.0 / truth.spacing();
    DeformationError e;
    std::size_t n = 0;
    for (std::size_t k = 0; k < truth.node_count(); ++k) {
        if (!region.empty() && !region[k]) continue;
        const double d = norm(estimated.field()[k] - truth.field()[k]) * to_px;
        e.mean_px += d;
        e.max_px = std::max(e.max_px, d);
        ++n;
    }
    if (n == 0) throw InputError("deformation_error: empty region");
    e.mean_px /= double(n);
    return e;
}

/// Pixel mask of the centred box covering `fraction` of each side.
inline Mask interior_pixels(int width, int height, double fraction = 0.8) {
    Mask m(width, height, 0);
    const int mx = static_cast<int>(std::lround(0.5 * (1.0 - fraction) * width));
    const int my = static_cast<int>(std::lround(0.5 * (1.0 - fraction) * height));
    for (int y = my; y < height - my; ++y)
        for (int x = mx; x < width - mx; ++x) m(x, y) = 1;
    return m;
}

/// PSNR of `test` against `reference` over a pixel mask; the peak is the reference's range there.
inline double psnr(const Frame &test, const Frame &reference, const Mask &region = {}) {
    if (!test.same_geometry(reference)) throw InputError("psnr: geometry mismatch");
    double lo = INFINITY, hi = -INFINITY, se = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < reference.height(); ++y)
        for (int x = 0; x < reference.width(); ++x) {
            if (!region.empty() && !region(x, y)) continue;
            lo = std::min(lo, reference(x, y));
            hi = std::max(hi, reference(x, y));
            const double d = test(x, y) - reference(x, y);
            se += d * d;
            ++n;
        }
    if (n == 0) throw InputError("psnr: empty region");
    const double mse = se / double(n);
    return 10.0 * std::log10((hi - lo) * (hi - lo) / mse);
}

} // namespace nrreg
