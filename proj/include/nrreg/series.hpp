#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "nrreg/deformation.hpp"
#include "nrreg/drift.hpp"
#include "nrreg/flow.hpp"
#include "nrreg/frame.hpp"

namespace nrreg {

enum class FusionMode { mean, median };

inline const char *to_string(FusionMode m) { return m == FusionMode::mean ? "mean" : "median"; }

/// Per-pixel mean or median over the frames that are valid at that pixel. Pixels with no valid
/// frame are invalid in the output; an even number of samples gives the mean of the middle two.
inline Frame fuse(const std::vector<Frame> &warped, FusionMode mode) {
    if (warped.empty()) throw InputError("fuse: no frames");
    const Frame &first = warped.front();
    for (const auto &f : warped)
        if (!f.same_geometry(first)) throw InputError("fuse: frames differ in size");
    Frame out(first.width(), first.height());
    std::vector<double> samples;
    samples.reserve(warped.size());
    for (int y = 0; y < first.height(); ++y)
        for (int x = 0; x < first.width(); ++x) {
            samples.clear();
            for (const auto &f : warped)
                if (f.valid(x, y)) samples.push_back(f(x, y));
            if (samples.empty()) {
                out.set_valid(x, y, false);
                continue;
            }
            if (mode == FusionMode::mean) {
                double s = 0.0;
                for (double v : samples) s += v;
                out(x, y) = s / double(samples.size());
            } else {
                const std::size_t n = samples.size(), mid = n / 2;
                std::nth_element(samples.begin(), samples.begin() + mid, samples.end());
                double v = samples[mid];
                if (n % 2 == 0) v = 0.5 * (v + *std::max_element(samples.begin(), samples.begin() + mid));
                out(x, y) = v;
            }
        }
    return out;
}

/// Registers f onto g (f o phi ~ g) starting from a guess.
using PairRegistrar =
    std::function<RegistrationResult(const Frame &f, const Frame &g, const Deformation &guess, const RegistrationParams &)>;

inline PairRegistrar nonrigid_registrar() {
    return [](const Frame &f, const Frame &g, const Deformation &guess, const RegistrationParams &p) {
        return multilevel_register(f, g, guess, p);
    };
}

/// Rigid baseline: exhaustive integer-shift (and optional angle) search centred on the guess's mean
/// displacement. The returned report carries no steps.
inline PairRegistrar rigid_registrar(RigidSearch search = {}) {
    return [search](const Frame &f, const Frame &g, const Deformation &guess, const RegistrationParams &p) {
        Vec2 mean{};
        for (const auto &v : guess.field().storage()) mean += v;
        mean *= 1.0 / (double(guess.node_count()) * f.pixel_size());
        RigidSearch s = search;
        s.center_x = static_cast<int>(std::lround(mean.x));
        s.center_y = static_cast<int>(std::lround(mean.y));
        RegistrationResult r{fit_rigid(f, g, s).phi, {}};
        r.report.lambda = p.lambda;
        return r;
    };
}

enum class PairStage { consecutive, reference };

/// One pair registration inside a series run. `round` is 0 for consecutive pairs and k >= 1 for
/// registrations against the round-k reference. Frame indices are 0-based.
struct PairEvent {
    PairStage stage = PairStage::consecutive;
    int round = 0;
    int frame = 0;
    double lambda = 0.0;
    const Deformation *guess = nullptr;
    const RegistrationResult *result = nullptr;
};

struct PairRecord {
    PairStage stage = PairStage::consecutive;
    int round = 0;
    int frame = 0;
    double lambda = 0.0;
    SolveReport report;
};

struct SeriesOptions {
    FusionMode fusion = FusionMode::median;
    PairRegistrar registrar = nonrigid_registrar();
    /// Optional drift removal applied to every frame before registration.
    std::optional<DriftModel> undrift;
    /// Replace the drift model's velocity by an estimate from consecutive rigid shifts.
    bool estimate_velocity = false;
    /// Worker threads for the independent consecutive pairs; 1 keeps everything sequential.
    int threads = 1;
    std::function<void(const PairEvent &)> observer;
};

struct SeriesRegistration {
    std::vector<Frame> frames;
    /// consecutive[i] maps frame i onto frame i - 1 (identity for i = 0).
    std::vector<Deformation> consecutive;
    /// to_reference[i] maps frame i onto the reference of the last round.
    std::vector<Deformation> to_reference;
    Frame reference;
    int outer_round = 0;
    /// Reconstruction after each round; rounds[k - 1] is f^k.
    std::vector<Frame> rounds;
    /// RMS change of the reconstruction per round, against f^0 = f_1 for the first.
    std::vector<double> round_change;
    std::vector<PairRecord> log;
};

struct SeriesResult {
    Frame reconstruction;
    SeriesRegistration registration;
};

namespace detail {

template <class Fn>
auto with_frame_context(const std::string &what, Fn &&fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const SolverError &e) {
        throw SolverError(what + ": " + e.what());
    } catch (const InputError &e) {
        throw InputError(what + ": " + e.what());
    }
}

/// Runs body(i) for i in [begin, end) on up to `threads` workers; the first exception wins.
template <class Body>
void parallel_for(int begin, int end, int threads, Body &&body) {
    const int n = end - begin;
    if (threads <= 1 || n <= 1) {
        for (int i = begin; i < end; ++i) body(i);
        return;
    }
    std::atomic<int> next{begin};
    std::exception_ptr error;
    std::mutex error_lock;
    auto worker = [&] {
        for (int i = next++; i < end; i = next++) {
            try {
                body(i);
            } catch (...) {
                std::lock_guard lock(error_lock);
                if (!error) error = std::current_exception();
                next = end;
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
    for (auto &t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

inline double rms_change(const Frame &a, const Frame &b) {
    double s = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x)
            if (a.valid(x, y) && b.valid(x, y)) {
                const double d = a(x, y) - b(x, y);
                s += d * d;
                ++n;
            }
    return n ? std::sqrt(s / double(n)) : 0.0;
}

inline void check_series(const std::vector<Frame> &frames) {
    if (frames.size() < 2) throw InputError("series needs at least two frames");
    for (const auto &f : frames)
        if (!f.same_geometry(frames.front())) throw InputError("series frames differ in size");
}

inline std::vector<Frame> undrift_series(const std::vector<Frame> &frames, DriftModel model, bool estimate) {
    if (estimate) {
        Vec2 shift{};
        for (std::size_t i = 1; i < frames.size(); ++i) {
            const RigidFit fit = fit_rigid(frames[i], frames[i - 1]);
            shift += Vec2{double(fit.shift_x), double(fit.shift_y)} * frames[i].pixel_size();
        }
        shift *= 1.0 / double(frames.size() - 1);
        model.velocity = estimate_velocity(frames.front(), shift, model.frame_time(frames.front().height()));
    }
    std::vector<Frame> out;
    out.reserve(frames.size());
    for (const auto &f : frames) out.push_back(undrift(f, model));
    return out;
}

class SeriesRunner {
public:
    SeriesRunner(const RegistrationParams &params, const SeriesOptions &options) : params_(params), options_(options) {
        params_.validate();
        if (!options_.registrar) throw InputError("series: no pair registrar");
    }

    /// Step (a): phi_{i,i-1} with identity guesses, independent of each other.
    std::vector<Deformation> consecutive(const std::vector<Frame> &frames, std::vector<PairRecord> &log) const {
        const int n = static_cast<int>(frames.size());
        std::vector<Deformation> out(frames.size(), Deformation::conforming(frames.front()));
        std::vector<PairRecord> records(frames.size());
        std::mutex observer_lock;
        parallel_for(1, n, options_.threads, [&](int i) {
            const Deformation guess = Deformation::conforming(frames.front());
            const RegistrationResult r = with_frame_context("frame " + std::to_string(i) + " onto frame " +
                                                                std::to_string(i - 1),
                                                            [&] { return options_.registrar(frames[i], frames[i - 1], guess, params_); });
            if (options_.observer) {
                std::lock_guard lock(observer_lock);
                options_.observer({PairStage::consecutive, 0, i, params_.lambda, &guess, &r});
            }
            records[static_cast<std::size_t>(i)] = {PairStage::consecutive, 0, i, params_.lambda, r.report};
            out[static_cast<std::size_t>(i)] = r.phi;
        });
        log.insert(log.end(), records.begin() + 1, records.end());
        return out;
    }

    /// phi^k_{i,0} for all i: identity guess for the first frame, chained guesses after it.
    std::vector<Deformation> to_reference(const std::vector<Frame> &frames, const std::vector<Deformation> &consecutive,
                                          const Frame &reference, int round, double lambda,
                                          std::vector<PairRecord> &log) const {
        RegistrationParams first = params_;
        first.lambda = lambda;
        const RegistrationParams chained = first.seeded();
        std::vector<Deformation> out;
        out.reserve(frames.size());
        for (std::size_t i = 0; i < frames.size(); ++i) {
            const Deformation guess =
                i == 0 ? Deformation::conforming(frames.front()) : compose(consecutive[i], out.back());
            const RegistrationResult r = with_frame_context(
                "round " + std::to_string(round) + ", frame " + std::to_string(i) + " onto reference",
                [&] { return options_.registrar(frames[i], reference, guess, i == 0 ? first : chained); });
            if (options_.observer) options_.observer({PairStage::reference, round, static_cast<int>(i), lambda, &guess, &r});
            log.push_back({PairStage::reference, round, static_cast<int>(i), lambda, r.report});
            out.push_back(r.phi);
        }
        return out;
    }

    Frame fuse_warped(const std::vector<Frame> &frames, const std::vector<Deformation> &phis) const {
        std::vector<Frame> warped;
        warped.reserve(frames.size());
        for (std::size_t i = 0; i < frames.size(); ++i) warped.push_back(warp(frames[i], phis[i]));
        return fuse(warped, options_.fusion);
    }

    const RegistrationParams &params() const { return params_; }
    const SeriesOptions &options() const { return options_; }

private:
    RegistrationParams params_;
    SeriesOptions options_;
};

} // namespace detail

/// Series averaging: consecutive pairs are registered once; then for k = 1..K every frame is
/// registered onto the reference f^{k-1} (f^0 = f_1) through chained guesses and the warped
/// originals are fused into f^k. Rounds k >= 2 use lambda_reduction * lambda.
inline SeriesResult register_series(const std::vector<Frame> &input, const RegistrationParams &params,
                                    const SeriesOptions &options = {}) {
    detail::check_series(input);
    const detail::SeriesRunner run(params, options);
    SeriesResult out;
    SeriesRegistration &reg = out.registration;
    reg.frames = options.undrift ? detail::undrift_series(input, *options.undrift, options.estimate_velocity) : input;
    reg.consecutive = run.consecutive(reg.frames, reg.log);

    Frame current = reg.frames.front();
    for (int k = 1; k <= params.K; ++k) {
        const double lambda = k == 1 ? params.lambda : params.lambda_reduction * params.lambda;
        reg.reference = current;
        reg.to_reference = run.to_reference(reg.frames, reg.consecutive, reg.reference, k, lambda, reg.log);
        Frame next = run.fuse_warped(reg.frames, reg.to_reference);
        reg.round_change.push_back(detail::rms_change(next, current));
        reg.rounds.push_back(next);
        current = std::move(next);
        reg.outer_round = k;
    }
    out.reconstruction = std::move(current);
    return out;
}

struct ExtendedOptions {
    /// Run even when the series is longer than max_frames.
    bool force = false;
    int max_frames = 16;
};

struct ExtendedResult {
    Frame reconstruction;
    /// Denoised estimate of every input frame.
    std::vector<Frame> denoised;
    /// Registration of the denoised frames onto the first one.
    SeriesRegistration denoised_registration;
    std::vector<PairRecord> log;
};

/// Deformations mapping every frame onto frame j (identity at j), from single-round passes over
/// f_{j-1}..f_1 and f_{j+1}..f_n with f_j as the reference.
inline std::vector<Deformation> register_to_frame(const std::vector<Frame> &frames, int j, const RegistrationParams &params,
                                                  const SeriesOptions &options, std::vector<PairRecord> &log) {
    detail::check_series(frames);
    const int n = static_cast<int>(frames.size());
    if (j < 0 || j >= n) throw InputError("register_to_frame: reference index out of range");
    const detail::SeriesRunner run(params, options);
    std::vector<Deformation> out(frames.size(), Deformation::conforming(frames.front()));
    auto pass = [&](int step) {
        std::vector<Frame> sub;
        for (int i = j; i >= 0 && i < n; i += step) sub.push_back(frames[static_cast<std::size_t>(i)]);
        if (sub.size() < 2) return;
        const std::vector<Deformation> cons = run.consecutive(sub, log);
        const std::vector<Deformation> phis = run.to_reference(sub, cons, sub.front(), 1, params.lambda, log);
        for (std::size_t s = 1; s < sub.size(); ++s) out[static_cast<std::size_t>(j + step * int(s))] = phis[s];
    };
    pass(-1);
    pass(+1);
    return out;
}

/// Denoise every frame by registering the series onto it, register the denoised frames onto the
/// first with the reduced regularisation, and fuse the original frames through those deformations.
inline ExtendedResult register_series_extended(const std::vector<Frame> &frames, const RegistrationParams &params,
                                               const SeriesOptions &options = {}, const ExtendedOptions &ext = {}) {
    detail::check_series(frames);
    const int n = static_cast<int>(frames.size());
    if (n > ext.max_frames && !ext.force)
        throw InputError("extended series registration of " + std::to_string(n) + " frames refused (limit " +
                         std::to_string(ext.max_frames) + "); force to override");
    params.validate();
    ExtendedResult out;
    const detail::SeriesRunner run(params, options);
    for (int j = 0; j < n; ++j) {
        const std::vector<Deformation> phis = register_to_frame(frames, j, params, options, out.log);
        out.denoised.push_back(run.fuse_warped(frames, phis));
    }

    RegistrationParams fine = params;
    fine.lambda = params.lambda_reduction * params.lambda;
    fine.K = 1;
    SeriesOptions inner = options;
    inner.undrift.reset();
    SeriesResult denoised = register_series(out.denoised, fine, inner);
    out.log.insert(out.log.end(), denoised.registration.log.begin(), denoised.registration.log.end());
    out.reconstruction = run.fuse_warped(frames, denoised.registration.to_reference);
    out.denoised_registration = std::move(denoised.registration);
    return out;
}

/// Pair registrations performed by register_series with K rounds on n frames.
constexpr long series_pair_count(long n, long K) { return (n - 1) + K * n; }

/// Pair registrations performed by register_series_extended on n frames.
constexpr long extended_pair_count(long n) {
    auto pass = [](long m) { return m >= 2 ? series_pair_count(m, 1) : 0L; };
    long total = series_pair_count(n, 1);
    for (long j = 0; j < n; ++j) total += pass(j + 1) + pass(n - j);
    return total;
}

} // namespace nrreg
