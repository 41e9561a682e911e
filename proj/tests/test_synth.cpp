#include <gtest/gtest.h>

#include "support.hpp"

using namespace nrreg;

namespace {

LatticeSpec plain_lattice(int size = 64) {
    LatticeSpec s;
    s.size = size;
    s.thickness_variation = 0.0;
    return s;
}

double max_diff(const Frame &a, const Frame &b, int margin = 0) {
    double m = 0.0;
    for (int y = margin; y < a.height() - margin; ++y)
        for (int x = margin; x < a.width() - margin; ++x) m = std::max(m, std::abs(a(x, y) - b(x, y)));
    return m;
}

} // namespace

TEST(RenderLattice, ZeroAmplitudeGivesBackground) {
    LatticeSpec s = plain_lattice(32);
    s.atom_amplitude = 0.0;
    const Frame f = render_lattice(s);
    for (double v : f.values().storage()) EXPECT_EQ(v, s.background);
}

TEST(RenderLattice, SingleAtomMatchesGaussian) {
    LatticeSpec s = plain_lattice(32);
    s.basis_a = {2.0, 0.0};
    s.basis_b = {0.0, 2.0};
    s.motif = {{0.25, 0.25}};
    s.atom_width = 3.0 / 32.0;
    const Frame f = render_lattice(s);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const Vec2 d = f.pixel_center(x, y) - Vec2{0.5, 0.5};
            const double r2 = dot(d, d), w2 = 2.0 * s.atom_width * s.atom_width;
            const double want = s.background + (r2 < 25.0 * w2 ? std::exp(-r2 / w2) : 0.0);
            EXPECT_NEAR(f(x, y), want, 1e-14);
        }
}

TEST(RenderLattice, PeriodicWithoutThicknessModulation) {
    LatticeSpec s = plain_lattice(64);
    s.basis_a = {16.0 / 64.0, 0.0};
    s.basis_b = {0.0, 16.0 / 64.0};
    s.atom_width = 1.5 / 64.0;
    const Frame f = render_lattice(s);
    for (int y = 0; y < 48; ++y)
        for (int x = 0; x < 48; ++x) {
            EXPECT_NEAR(f(x + 16, y), f(x, y), 1e-12);
            EXPECT_NEAR(f(x, y + 16), f(x, y), 1e-12);
        }
    EXPECT_GT(stats(f).std_dev, 0.0);
}

TEST(RenderLattice, InvalidSpecsRejected) {
    LatticeSpec s = plain_lattice();
    s.basis_b = s.basis_a;
    EXPECT_THROW(render_lattice(s), InputError);
    s = plain_lattice();
    s.atom_width = 0.0;
    EXPECT_THROW(render_lattice(s), InputError);
}

TEST(LatticeSpots, SquareLatticeOrders) {
    const auto spots = lattice_spots(LatticeSpec{});
    EXPECT_EQ(spots.size(), 24u);
    for (std::pair<int, int> want : {std::pair{20, 0}, {0, -20}, {40, 40}, {-20, 40}})
        EXPECT_NE(std::find(spots.begin(), spots.end(), want), spots.end());
    LatticeSpec small = plain_lattice(64);
    for (const auto &[kx, ky] : lattice_spots(small)) EXPECT_TRUE(std::abs(kx) <= 31 && std::abs(ky) <= 31);
}

TEST(SynthSeries, ZeroMotionCopiesGroundTruth) {
    const Frame gt = render_lattice(plain_lattice());
    const SyntheticSeries s = synth_series(gt, MotionSpec{}, 3, 4);
    ASSERT_EQ(s.frames.size(), 3u);
    for (int i = 0; i < 3; ++i) {
        EXPECT_LE(max_diff(s.frames[i], gt), 1e-12);
        EXPECT_EQ(s.truth[i].max_norm(), 0.0);
    }
}

TEST(SynthSeries, PureTranslationShiftsByWholePixels) {
    const Frame gt = render_lattice(plain_lattice());
    MotionSpec m;
    m.translation_px = {1.0, 0.0};
    const SyntheticSeries s = synth_series(gt, m, 3, 4);
    for (int i = 0; i < 3; ++i) {
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x + i < 64; ++x) EXPECT_NEAR(s.frames[i](x, y), gt(x + i, y), 1e-12);
        EXPECT_NEAR(s.truth[i].displacement(7, 7).x, i / 64.0, 1e-15);
    }
}

TEST(SynthSeries, FramesFollowTruthMaps) {
    const Frame gt = render_lattice(plain_lattice());
    MotionSpec m;
    m.translation_px = {0.7, -0.4};
    m.warp_amplitude_px = 1.5;
    const SyntheticSeries s = synth_series(gt, m, 4, 9);
    const auto [lo, hi] = std::minmax_element(gt.values().storage().begin(), gt.values().storage().end());
    for (int i = 1; i < 4; ++i) {
        const Frame w = warp(gt, s.truth[i]);
        EXPECT_LE(max_diff(w, s.frames[i], 8), 0.02 * (*hi - *lo)) << i;
        EXPECT_GT(s.truth[i].max_norm(), s.truth[i - 1].max_norm() * 0.5);
    }
}

TEST(SynthSeries, PoissonVarianceMatchesMean) {
    LatticeSpec spec = plain_lattice(256);
    spec.atom_amplitude = 0.0;
    spec.background = 0.5;
    MotionSpec m;
    m.noise = {NoiseKind::poisson, 0.0, 100.0};
    const SyntheticSeries s = synth_series(render_lattice(spec), m, 1, 3);
    const FrameStats st = stats(s.frames[0]);
    EXPECT_NEAR(st.mean, 50.0, 0.5);
    EXPECT_NEAR(st.std_dev * st.std_dev, st.mean, 0.05 * st.mean);
    EXPECT_EQ(s.clean[0](5, 5), 50.0);
}

TEST(SynthSeries, DoseForSnrHitsTarget) {
    const Frame gt = render_lattice(LatticeSpec{});
    MotionSpec m;
    m.noise.kind = NoiseKind::poisson;
    m.noise.dose = dose_for_snr(gt, 2.0);
    const SyntheticSeries s = synth_series(gt, m, 1, 5);
    double se = 0.0;
    for (std::size_t k = 0; k < s.frames[0].values().size(); ++k) {
        const double d = s.frames[0].values()[k] - s.clean[0].values()[k];
        se += d * d;
    }
    const double snr = stats(s.clean[0]).std_dev / std::sqrt(se / double(s.frames[0].values().size()));
    EXPECT_NEAR(snr, 2.0, 0.1);
    EXPECT_THROW(dose_for_snr(Frame(8, 8, 1.0), 2.0), DegenerateImageError);
}

TEST(SynthSeries, ReproducibleFromSeed) {
    const Frame gt = render_lattice(plain_lattice());
    MotionSpec m;
    m.warp_amplitude_px = 1.0;
    m.noise = {NoiseKind::gaussian, 0.1, 1.0};
    const SyntheticSeries a = synth_series(gt, m, 3, 42), b = synth_series(gt, m, 3, 42), c = synth_series(gt, m, 3, 43);
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(a.frames[i].values(), b.frames[i].values());
        EXPECT_EQ(a.truth[i].field(), b.truth[i].field());
    }
    EXPECT_NE(a.frames[1].values(), c.frames[1].values());
}

TEST(SynthSeries, BlurGrowsWithFrameIndex) {
    const Frame gt = render_lattice(plain_lattice());
    MotionSpec m;
    m.blur_step_px = 0.8;
    const SyntheticSeries s = synth_series(gt, m, 3, 1);
    EXPECT_LE(max_diff(s.frames[0], gt), 1e-12);
    EXPECT_LT(stats(s.frames[2]).std_dev, stats(s.frames[1]).std_dev);
    EXPECT_LT(stats(s.frames[1]).std_dev, stats(gt).std_dev);
    const Frame flat = detail::gaussian_blur(Frame(16, 16, 3.0), 2.0);
    for (double v : flat.values().storage()) EXPECT_NEAR(v, 3.0, 1e-14);
}

TEST(SynthSeries, InvalidMotionRejected) {
    const Frame gt(8, 8, 1.0);
    MotionSpec m;
    m.warp_amplitude_px = -1.0;
    EXPECT_THROW(synth_series(gt, m, 2, 1), InputError);
    m = {};
    m.noise = {NoiseKind::poisson, 0.0, 0.0};
    EXPECT_THROW(synth_series(gt, m, 2, 1), InputError);
    EXPECT_THROW(synth_series(gt, MotionSpec{}, 0, 1), InputError);
}

TEST(DeformationError, ZeroAndUnitOffset) {
    const Deformation a = fixtures::smooth_deformation(17, 17, 2, 0.05);
    const DeformationError z = deformation_error(a, a);
    EXPECT_EQ(z.mean_px, 0.0);
    EXPECT_EQ(z.max_px, 0.0);
    Deformation b = a;
    for (auto &v : b.field().storage()) v += Vec2{0.6, 0.8} * (1.0 / 16.0);
    const DeformationError e = deformation_error(b, a);
    EXPECT_NEAR(e.mean_px, 1.0, 1e-12);
    EXPECT_NEAR(e.max_px, 1.0, 1e-12);
    EXPECT_THROW(deformation_error(a, identity(9, 9)), InputError);
}

TEST(DeformationError, MatchesMaskedLoopOracle) {
    const Deformation a = fixtures::smooth_deformation(21, 21, 3, 0.05), b = fixtures::smooth_deformation(21, 21, 4, 0.05);
    const Mask region = interior_region(21, 21, 0.8);
    double s = 0.0, m = 0.0;
    int n = 0;
    for (int j = 2; j <= 18; ++j)
        for (int i = 2; i <= 18; ++i) {
            const double d = norm(a.displacement(i, j) - b.displacement(i, j)) * 20.0;
            s += d, m = std::max(m, d), ++n;
        }
    EXPECT_EQ(n, 17 * 17);
    const DeformationError e = deformation_error(a, b, region);
    EXPECT_NEAR(e.mean_px, s / n, 1e-12);
    EXPECT_NEAR(e.max_px, m, 1e-12);
}

TEST(Psnr, KnownNoiseLevel) {
    Frame ref(10, 10);
    for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 10; ++x) ref(x, y) = x;
    Frame test = ref;
    for (auto &v : test.values().storage()) v += 0.9;
    EXPECT_NEAR(psnr(test, ref), 20.0, 1e-9);
    EXPECT_TRUE(std::isinf(psnr(ref, ref)));
    const Mask box = interior_pixels(10, 10, 0.6);
    EXPECT_EQ(std::count(box.storage().begin(), box.storage().end(), 1), 36);
}
