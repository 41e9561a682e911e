#include <gtest/gtest.h>

#include <map>

#include "support.hpp"

using namespace nrreg;
using fixtures::random_frame;
using fixtures::smooth_frame;

namespace {

Frame filled(int w, int h, double v) { return Frame(w, h, v); }

// Registrar that returns the guess translated by a fixed offset.
PairRegistrar offset_registrar(Vec2 offset, std::atomic<int> *calls = nullptr) {
    return [offset, calls](const Frame &, const Frame &, const Deformation &guess, const RegistrationParams &p) {
        if (calls) ++*calls;
        Deformation d = guess;
        for (auto &v : d.field().storage()) v += offset;
        RegistrationResult r{d, {}};
        r.report.lambda = p.lambda;
        return r;
    };
}

double max_diff(const Frame &a, const Frame &b) {
    double m = 0.0;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x) m = std::max(m, std::abs(a(x, y) - b(x, y)));
    return m;
}

} // namespace

TEST(Fuse, IdenticalFramesReproduceInput) {
    const Frame f = random_frame(9, 7, 1);
    for (auto mode : {FusionMode::mean, FusionMode::median}) {
        const Frame r = fuse({f, f, f}, mode);
        EXPECT_LE(max_diff(r, f), 1e-15);
    }
}

TEST(Fuse, OutlierExample) {
    const std::vector<Frame> v{filled(2, 2, 0), filled(2, 2, 0), filled(2, 2, 0), filled(2, 2, 100)};
    EXPECT_EQ(fuse(v, FusionMode::median)(0, 0), 0.0);
    EXPECT_EQ(fuse(v, FusionMode::mean)(0, 0), 25.0);
    const std::vector<Frame> w{filled(2, 2, 3), filled(2, 2, 10), filled(2, 2, 1), filled(2, 2, 2)};
    EXPECT_EQ(fuse(w, FusionMode::median)(0, 0), 2.5);
}

TEST(Fuse, MatchesSortOracleAndStaysInRange) {
    std::vector<Frame> v;
    for (std::uint64_t s = 0; s < 7; ++s) v.push_back(random_frame(6, 5, s, -3.0, 8.0));
    const Frame med = fuse(v, FusionMode::median), mean = fuse(v, FusionMode::mean);
    for (int y = 0; y < 5; ++y)
        for (int x = 0; x < 6; ++x) {
            std::vector<double> s;
            for (const auto &f : v) s.push_back(f(x, y));
            std::sort(s.begin(), s.end());
            EXPECT_EQ(med(x, y), s[3]);
            EXPECT_GE(mean(x, y), s.front());
            EXPECT_LE(mean(x, y), s.back());
        }
}

TEST(Fuse, InvalidSamplesAreSkipped) {
    Frame a = filled(2, 2, 1.0), b = filled(2, 2, 5.0);
    for (int y = 0; y < 2; ++y) {
        a.set_valid(0, y, false);
        b.set_valid(0, y, false);
        b.set_valid(1, y, false);
    }
    const Frame r = fuse({a, b}, FusionMode::mean);
    EXPECT_FALSE(r.valid(0, 0));
    EXPECT_TRUE(r.valid(1, 0));
    EXPECT_EQ(r(1, 0), 1.0);
    EXPECT_THROW(fuse({a, filled(3, 2, 0.0)}, FusionMode::mean), InputError);
    EXPECT_THROW(fuse({}, FusionMode::mean), InputError);
}

TEST(Series, IdenticalFramesReproduceInput) {
    const Frame f = smooth_frame(32, 4);
    RegistrationParams p;
    p.K = 2;
    const SeriesResult r = register_series({f, f, f}, p);
    EXPECT_LE(max_diff(r.reconstruction, f), 1e-6);
    for (const auto &d : r.registration.to_reference) EXPECT_LE(d.max_norm(), 1e-6);
    EXPECT_EQ(r.registration.outer_round, 2);
}

TEST(Series, SingleRoundFusesAgainstFirstFrame) {
    std::vector<Frame> frames;
    for (std::uint64_t s = 0; s < 4; ++s) frames.push_back(random_frame(8, 8, s));
    RegistrationParams p;
    p.K = 1;
    SeriesOptions o;
    o.registrar = offset_registrar({});
    o.fusion = FusionMode::mean;
    const SeriesResult r = register_series(frames, p, o);
    ASSERT_EQ(r.registration.rounds.size(), 1u);
    EXPECT_LE(max_diff(r.reconstruction, fuse(frames, FusionMode::mean)), 1e-15);
    EXPECT_EQ(r.registration.reference.values(), frames[0].values());
    EXPECT_NEAR(r.registration.round_change[0], detail::rms_change(r.reconstruction, frames[0]), 1e-15);
}

TEST(Series, GuessesChainConsecutiveDeformations) {
    const Vec2 c{0.01, -0.005};
    const int n = 5;
    std::vector<Frame> frames(n, random_frame(16, 16, 3));
    RegistrationParams p;
    p.K = 2;
    std::map<std::pair<int, int>, Vec2> guesses;
    SeriesOptions o;
    o.registrar = offset_registrar(c);
    o.observer = [&](const PairEvent &e) {
        if (e.stage == PairStage::reference) guesses[{e.round, e.frame}] = e.guess->displacement(8, 8);
        else EXPECT_EQ(e.guess->max_norm(), 0.0);
    };
    const SeriesResult r = register_series(frames, p, o);
    for (int k = 1; k <= 2; ++k)
        for (int i = 0; i < n; ++i) {
            const Vec2 g = guesses.at({k, i});
            EXPECT_NEAR(g.x, 2 * i * c.x, 1e-15);
            EXPECT_NEAR(g.y, 2 * i * c.y, 1e-15);
        }
    for (int i = 1; i < n; ++i) EXPECT_NEAR(r.registration.consecutive[i].displacement(3, 3).x, c.x, 1e-15);
    EXPECT_NEAR(r.registration.to_reference[4].displacement(0, 0).x, 9 * c.x, 1e-15);
}

TEST(Series, LambdaScheduleAndPairCount) {
    std::vector<Frame> frames;
    for (std::uint64_t s = 0; s < 6; ++s) frames.push_back(random_frame(8, 8, s));
    RegistrationParams p;
    p.K = 3;
    p.lambda = 0.8;
    p.lambda_reduction = 0.25;
    std::atomic<int> calls{0};
    SeriesOptions o;
    o.registrar = offset_registrar({}, &calls);
    const SeriesResult r = register_series(frames, p, o);
    EXPECT_EQ(calls.load(), series_pair_count(6, 3));
    EXPECT_EQ(long(r.registration.log.size()), series_pair_count(6, 3));
    int consecutive = 0;
    for (const auto &rec : r.registration.log) {
        if (rec.stage == PairStage::consecutive) {
            ++consecutive;
            EXPECT_EQ(rec.lambda, 0.8);
        } else {
            EXPECT_EQ(rec.lambda, rec.round == 1 ? 0.8 : 0.2);
            EXPECT_EQ(rec.report.lambda, rec.lambda);
        }
    }
    EXPECT_EQ(consecutive, 5);
}

TEST(Series, ChainedGuessesStartAtSeededLevel) {
    std::vector<Frame> frames;
    for (std::uint64_t s = 0; s < 4; ++s) frames.push_back(random_frame(8, 8, s));
    RegistrationParams p;
    p.K = 2;
    p.m0 = 2;
    p.seeded_m0 = 5;
    std::vector<std::pair<bool, int>> seen;
    SeriesOptions o;
    o.registrar = [&](const Frame &, const Frame &, const Deformation &g, const RegistrationParams &q) {
        seen.emplace_back(g.max_norm() == 0.0, q.m0);
        return RegistrationResult{g, {}};
    };
    register_series(frames, p, o);
    ASSERT_EQ(long(seen.size()), series_pair_count(4, 2));
    for (int k = 0; k < 3; ++k) EXPECT_EQ(seen[std::size_t(k)].second, 2);
    for (std::size_t k = 3; k < seen.size(); ++k) EXPECT_EQ(seen[k].second, (k - 3) % 4 == 0 ? 2 : 5) << k;
}

TEST(Series, ErrorsNameTheFailingFrame) {
    std::vector<Frame> frames(4, random_frame(8, 8, 1));
    frames[2](3, 3) = 7.0;
    SeriesOptions o;
    o.registrar = [](const Frame &f, const Frame &, const Deformation &g, const RegistrationParams &) -> RegistrationResult {
        if (f(3, 3) == 7.0) throw StepUnderflowError();
        return {g, {}};
    };
    try {
        register_series(frames, {}, o);
        FAIL() << "expected SolverError";
    } catch (const SolverError &e) {
        EXPECT_NE(std::string(e.what()).find("frame 2"), std::string::npos) << e.what();
    }
    EXPECT_THROW(register_series({frames[0]}, {}), InputError);
    EXPECT_THROW(register_series({frames[0], random_frame(9, 8, 1)}, {}), InputError);
}

TEST(Series, ThreadedConsecutivePairsMatchSequential) {
    std::vector<Frame> frames;
    for (int i = 0; i < 4; ++i) frames.push_back(smooth_frame(32, 6, 6, 3, {0.004 * i, -0.003 * i}));
    RegistrationParams p;
    p.K = 1;
    SeriesOptions one, three;
    three.threads = 3;
    const SeriesResult a = register_series(frames, p, one), b = register_series(frames, p, three);
    for (int i = 1; i < 4; ++i) EXPECT_EQ(a.registration.consecutive[i].field(), b.registration.consecutive[i].field());
    EXPECT_EQ(a.reconstruction.values(), b.reconstruction.values());
}

TEST(Series, RecoversTranslatedSeries) {
    std::vector<Frame> frames;
    for (int i = 0; i < 3; ++i) frames.push_back(smooth_frame(32, 12, 6, 2, {0.02 * i, 0.0}));
    RegistrationParams p;
    p.K = 1;
    p.lambda = 0.05;
    const SeriesResult r = register_series(frames, p);
    const Vec2 d = r.registration.to_reference[2].displacement(16, 16);
    EXPECT_NEAR(d.x * 32.0, -1.28, 0.2);
    EXPECT_NEAR(d.y * 32.0, 0.0, 0.2);
}

TEST(Series, RigidRegistrarFindsIntegerShifts) {
    const Frame base = smooth_frame(64, 3, 8, 5);
    std::vector<Frame> frames;
    for (int i = 0; i < 3; ++i) frames.push_back(smooth_frame(64, 3, 8, 5, {-2.0 * i / 64.0, 1.0 * i / 64.0}));
    RegistrationParams p;
    p.K = 1;
    SeriesOptions o;
    o.registrar = rigid_registrar();
    const SeriesResult r = register_series(frames, p, o);
    EXPECT_NEAR(r.registration.to_reference[2].displacement(10, 10).x * 64.0, 4.0, 1e-12);
    EXPECT_NEAR(r.registration.to_reference[2].displacement(10, 10).y * 64.0, -2.0, 1e-12);
}

TEST(Series, ZeroVelocityUndriftIsNoOp) {
    std::vector<Frame> frames;
    for (std::uint64_t s = 0; s < 3; ++s) frames.push_back(random_frame(8, 8, s));
    SeriesOptions o;
    o.registrar = offset_registrar({});
    o.undrift = DriftModel{};
    const SeriesResult r = register_series(frames, {}, o);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(max_diff(r.registration.frames[i], frames[i]), 1e-12);
}

TEST(Extended, IdenticalFramesReproduceInput) {
    const Frame f = smooth_frame(32, 4);
    RegistrationParams p;
    const ExtendedResult r = register_series_extended({f, f, f}, p);
    EXPECT_LE(max_diff(r.reconstruction, f), 1e-6);
    ASSERT_EQ(r.denoised.size(), 3u);
    for (const auto &d : r.denoised) EXPECT_LE(max_diff(d, f), 1e-6);
}

TEST(Extended, PairCountAndLimit) {
    for (int n : {2, 3, 5, 8}) {
        std::vector<Frame> frames;
        for (int i = 0; i < n; ++i) frames.push_back(random_frame(8, 8, std::uint64_t(i)));
        std::atomic<int> calls{0};
        SeriesOptions o;
        o.registrar = offset_registrar({}, &calls);
        const ExtendedResult r = register_series_extended(frames, {}, o);
        EXPECT_EQ(calls.load(), extended_pair_count(n));
        EXPECT_EQ(long(r.log.size()), extended_pair_count(n));
    }
    for (long n = 2; n <= 16; ++n)
        EXPECT_LE(std::abs(extended_pair_count(n) - (n + 1) * series_pair_count(n, 1)), n) << n;

    std::vector<Frame> many(17, random_frame(8, 8, 1));
    SeriesOptions o;
    o.registrar = offset_registrar({});
    EXPECT_THROW(register_series_extended(many, {}, o), InputError);
    EXPECT_NO_THROW(register_series_extended(many, {}, o, {true, 16}));
}

TEST(RegisterToFrame, ReferenceFrameGetsIdentity) {
    std::vector<Frame> frames(4, random_frame(8, 8, 2));
    SeriesOptions o;
    o.registrar = offset_registrar({0.01, 0.0});
    std::vector<PairRecord> log;
    const auto phis = register_to_frame(frames, 2, {}, o, log);
    EXPECT_EQ(phis[2].max_norm(), 0.0);
    // each pass chains from its own reference: 3c, then 5c one frame further out
    EXPECT_NEAR(phis[1].displacement(1, 1).x, 0.03, 1e-15);
    EXPECT_NEAR(phis[0].displacement(1, 1).x, 0.05, 1e-15);
    EXPECT_NEAR(phis[3].displacement(1, 1).x, 0.03, 1e-15);
    EXPECT_THROW(register_to_frame(frames, 4, {}, o, log), InputError);
}
