#include <gtest/gtest.h>

#include "support.hpp"

using namespace nrreg;
using fixtures::random_frame;
using fixtures::smooth_deformation;

namespace {

// Independent bilinear evaluation of a nodal field at p (clamped to the node box).
Vec2 eval_field(const Deformation &d, Vec2 p) {
    const double h = d.spacing();
    double sx = std::clamp(p.x / h, 0.0, double(d.nodes_x() - 1));
    double sy = std::clamp(p.y / h, 0.0, double(d.nodes_y() - 1));
    const int i = std::min(int(sx), d.nodes_x() - 2), j = std::min(int(sy), d.nodes_y() - 2);
    const double tx = sx - i, ty = sy - j;
    return d.displacement(i, j) * ((1 - tx) * (1 - ty)) + d.displacement(i + 1, j) * (tx * (1 - ty)) +
           d.displacement(i, j + 1) * ((1 - tx) * ty) + d.displacement(i + 1, j + 1) * (tx * ty);
}

double node_distance(const Deformation &a, const Deformation &b, int margin = 0) {
    double m = 0.0;
    for (int j = margin; j < a.nodes_y() - margin; ++j)
        for (int i = margin; i < a.nodes_x() - margin; ++i)
            m = std::max(m, norm(a.displacement(i, j) - b.displacement(i, j)));
    return m;
}

} // namespace

TEST(Identity, WarpLeavesFrameUnchanged) {
    const Frame f = random_frame(12, 9, 3);
    const Frame w = warp(f, Deformation::conforming(f));
    EXPECT_EQ(w.values(), f.values());
    EXPECT_EQ(w.valid_count(), f.pixel_count());
}

TEST(Identity, ZeroDirichletAndComposesToItself) {
    const Deformation id = identity(9, 9);
    EXPECT_EQ(dirichlet(id), 0.0);
    EXPECT_EQ(compose(id, id).field(), id.field());
    EXPECT_EQ(id.max_norm(), 0.0);
}

TEST(Compose, RightIdentity) {
    const Deformation phi = smooth_deformation(17, 17, 4, 0.03);
    EXPECT_LE(node_distance(compose(phi, identity(17, 17)), phi), 1e-15);
}

TEST(Compose, TranslationsAdd) {
    const Vec2 a{0.02, -0.01}, b{-0.005, 0.03};
    const Deformation c = compose(translation(17, 17, a), translation(17, 17, b));
    EXPECT_LE(node_distance(c, translation(17, 17, a + b), 3), 1e-15);
}

TEST(Compose, MatchesDenseEvaluationOracle) {
    const Deformation phi = smooth_deformation(17, 17, 1, 0.04), psi = smooth_deformation(17, 17, 2, 0.04);
    const Deformation c = compose(phi, psi);
    for (int j = 0; j < 17; ++j)
        for (int i = 0; i < 17; ++i) {
            const Vec2 x = c.node_position(i, j);
            const Vec2 y = x + psi.displacement(i, j);
            const Vec2 expected = y + eval_field(phi, y) - x;
            EXPECT_NEAR(c.displacement(i, j).x, expected.x, 1e-14);
            EXPECT_NEAR(c.displacement(i, j).y, expected.y, 1e-14);
        }
}

TEST(Compose, AssociativeForTranslations) {
    const auto t1 = translation(9, 9, {0.01, 0.02}), t2 = translation(9, 9, {-0.03, 0.005}),
               t3 = translation(9, 9, {0.004, -0.01});
    EXPECT_LE(node_distance(compose(compose(t1, t2), t3), compose(t1, compose(t2, t3)), 2), 1e-12);
}

TEST(Compose, GridMismatchThrows) {
    EXPECT_THROW(compose(identity(5, 5), identity(5, 6)), InputError);
}

TEST(Invert, IdentityAndTranslation) {
    const Inversion id = invert(identity(9, 9));
    EXPECT_EQ(id.inverse.max_norm(), 0.0);
    const Inversion t = invert(translation(17, 17, {0.05, -0.02}));
    EXPECT_LE(node_distance(t.inverse, translation(17, 17, {-0.05, 0.02}), 2), 1e-12);
}

TEST(Invert, SmoothFieldConvergesQuickly) {
    const Deformation phi = smooth_deformation(33, 33, 9, 0.02);
    const Inversion inv = invert(phi, 1e-8, 50);
    EXPECT_LE(inv.iterations, 50);
    EXPECT_LE(inv.residual, 1e-8);
    EXPECT_LE(composition_residual(phi, inv.inverse), 1e-8);
}

TEST(Invert, AffineMapIgnoresNodesMappedOutside) {
    Deformation phi(17, 17);
    for (int j = 0; j < 17; ++j)
        for (int i = 0; i < 17; ++i) {
            const Vec2 x = phi.node_position(i, j);
            phi.displacement(i, j) = Vec2{0.05 * x.x - 0.03 * x.y, 0.04 * x.x} + Vec2{0.12, 0.08};
        }
    const Inversion inv = invert(phi, 1e-10);
    EXPECT_LE(inv.residual, 1e-10);
    const Vec2 x = phi.node_position(12, 12);
    EXPECT_LE(norm(phi(x + inv.inverse.displacement(12, 12)) - x), 1e-10);
    const Vec2 outside = phi.node_position(0, 0) + inv.inverse.displacement(0, 0);
    EXPECT_TRUE(outside.x < 0.0 || outside.y < 0.0);
}

TEST(Invert, FoldingFieldReportsBestResidual) {
    Deformation fold(9, 9);
    for (int j = 0; j < 9; ++j)
        for (int i = 0; i < 9; ++i) fold.displacement(i, j) = {0.5 - fold.node_position(i, j).x, 0.0};
    try {
        invert(fold, 1e-8, 30);
        FAIL() << "expected InversionError";
    } catch (const InversionError &e) {
        EXPECT_GT(e.residual(), 1e-8);
        EXPECT_GE(composition_residual(fold, e.best()), e.residual());
    }
    EXPECT_THROW(invert(identity(3, 3), 0.0), InputError);
}

TEST(Warp, OnePixelTranslationShiftsAndInvalidatesEdge) {
    const Frame f = random_frame(8, 8, 5);
    const Frame w = warp(f, translation(9, 9, {f.pixel_size(), 0.0}));
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 7; ++x) {
            EXPECT_TRUE(w.valid(x, y));
            EXPECT_DOUBLE_EQ(w(x, y), f(x + 1, y));
        }
        EXPECT_FALSE(w.valid(7, y));
    }
}

TEST(Warp, MatchesPerPixelSamplingOracle) {
    const Frame f = random_frame(16, 16, 8);
    const Deformation phi = smooth_deformation(17, 17, 3, 0.05);
    const Frame w = warp(f, phi);
    const Frame n = warp(f, phi, Interpolation::nearest);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            const Vec2 p = f.pixel_center(x, y);
            const Vec2 q = p + eval_field(phi, p);
            const Sample s = sample_bilinear(f, q), t = sample_nearest(f, q);
            EXPECT_NEAR(w(x, y), s.value, 1e-13);
            EXPECT_EQ(w.valid(x, y), s.valid);
            EXPECT_EQ(n(x, y), t.value);
        }
}

TEST(Warp, PreservesConstantsOnValidRegion) {
    Frame c(16, 16, 4.5);
    c.set_valid(5, 5, false);
    const Frame w = warp(c, smooth_deformation(17, 17, 6, 0.1));
    std::size_t valid = 0;
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            if (w.valid(x, y)) {
                EXPECT_NEAR(w(x, y), 4.5, 1e-13);
                ++valid;
            }
    EXPECT_GT(valid, 0u);
}

TEST(Warp, NonConformingGridThrows) {
    EXPECT_THROW(warp(Frame(8, 8), identity(8, 8)), InputError);
}

TEST(FitRigid, IdenticalFramesGiveZeroShift) {
    const Frame f = random_frame(32, 32, 1);
    const RigidFit r = fit_rigid(f, f);
    EXPECT_EQ(r.shift_x, 0);
    EXPECT_EQ(r.shift_y, 0);
    EXPECT_NEAR(r.score, 1.0, 1e-12);
}

TEST(FitRigid, RecoversIntegerShift) {
    const Frame f = fixtures::smooth_frame(64, 2, 8, 6);
    Frame g(64, 64);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            g(x, y) = f(std::clamp(x + 3, 0, 63), std::clamp(y - 2, 0, 63));
            g.set_valid(x, y, x + 3 <= 63 && y - 2 >= 0);
        }
    const RigidFit r = fit_rigid(f, g);
    EXPECT_EQ(r.shift_x, 3);
    EXPECT_EQ(r.shift_y, -2);
    EXPECT_NEAR(r.phi.displacement(10, 10).x, 3.0 / 64.0, 1e-15);
    EXPECT_NEAR(r.phi.displacement(10, 10).y, -2.0 / 64.0, 1e-15);
}

TEST(FitRigid, NoisyLatticeWithinOnePixel) {
    LatticeSpec spec;
    const Frame gt = render_lattice(spec);
    MotionSpec m;
    m.translation_px = {4.3, -2.6};
    m.noise.kind = NoiseKind::poisson;
    m.noise.dose = dose_for_snr(gt, 2.0);
    const SyntheticSeries s = synth_series(gt, m, 2, 7);
    const RigidFit r = fit_rigid(s.frames[0], s.frames[1]);
    EXPECT_LE(std::abs(r.shift_x - 4.3), 1.0);
    EXPECT_LE(std::abs(r.shift_y + 2.6), 1.0);
}

TEST(FitRigid, ScoreNeverBelowIdentityAlignment) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const Frame f = random_frame(24, 24, seed), g = random_frame(24, 24, seed + 100);
        const RigidFit r = fit_rigid(f, g, {3, 3, 0, 0, {0.0}});
        const double id = *detail::shifted_ncc(f, g, 0, 0, 1);
        EXPECT_GE(r.score, id);
    }
}

TEST(FitRigid, EmptyRangeRejected) {
    const Frame f = random_frame(8, 8, 1);
    EXPECT_THROW(fit_rigid(f, f, {-1, 0, 0, 0, {0.0}}), InputError);
    EXPECT_THROW(fit_rigid(f, f, {1, 1, 0, 0, {}}), InputError);
}

TEST(FitRigid, OptionalRotationSearch) {
    const Frame f = fixtures::smooth_frame(64, 5, 8, 4);
    const Frame g = warp(f, detail::rigid_field(f, 0.05, {}));
    const RigidFit r = fit_rigid(f, g, {2, 2, 0, 0, {-0.05, 0.0, 0.05}});
    EXPECT_DOUBLE_EQ(r.angle, 0.05);
    EXPECT_EQ(r.shift_x, 0);
}
