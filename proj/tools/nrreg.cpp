#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nrreg/io.hpp"
#include "nrreg/nrreg.hpp"

namespace fs = std::filesystem;
using nrreg::io::json;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_input = 2;
constexpr int exit_solver = 3;

/// Records parameters, input hashes and outputs of one run.
class RunManifest {
public:
    explicit RunManifest(std::string command) { doc_ = {{"tool", "nrreg"}, {"command", std::move(command)}}; }

    json &params() { return doc_["parameters"]; }

    void input(const std::string &role, const fs::path &path) {
        doc_["inputs"][role] = {{"path", path.string()}, {"sha256", nrreg::io::sha256_file(path)}};
    }

    void output(const fs::path &path) { doc_["outputs"].push_back(path.filename().string()); }

    void write(const fs::path &dir) const { nrreg::io::write_text(dir / "manifest.json", doc_.dump(2) + "\n"); }

    json &doc() { return doc_; }

private:
    json doc_;
};

std::string index_name(const std::string &stem, std::size_t i, const std::string &ext) {
    std::ostringstream s;
    s << stem << '_' << std::setw(3) << std::setfill('0') << i << ext;
    return s.str();
}

// ---- registration parameter flags shared by the registering subcommands ----

struct ParamFlags {
    nrreg::RegistrationParams p;
    double sigma = 0.0;
    int m1 = 0;
    CLI::Option *sigma_opt = nullptr;
    CLI::Option *m1_opt = nullptr;

    void add(CLI::App &app) {
        app.add_option("--lambda", p.lambda, "regularisation weight")->capture_default_str();
        sigma_opt = app.add_option("--sigma", sigma, "Sobolev smoothing scale in domain units (default: per level)");
        app.add_option("--rho", p.rho, "Armijo acceptance ratio")->capture_default_str();
        app.add_option("--tau0", p.tau0, "initial step size")->capture_default_str();
        app.add_option("--max-iters", p.max_iters_per_level, "iteration cap per level")->capture_default_str();
        app.add_option("--stop-decay", p.stop_decay, "relative energy decay that ends a level")->capture_default_str();
        app.add_option("--m0", p.m0, "coarsest level")->capture_default_str();
        app.add_option("--seeded-m0", p.seeded_m0, "coarsest level when starting from a chained or inverted guess")
            ->capture_default_str();
        m1_opt = app.add_option("--m1", m1, "finest level (default: input resolution)");
        app.add_option("--lambda-reduction", p.lambda_reduction, "lambda factor for series rounds after the first")
            ->capture_default_str();
        app.add_option("--rounds", p.K, "outer rounds of series registration")->capture_default_str();
    }

    nrreg::RegistrationParams resolve() {
        if (sigma_opt->count()) p.sigma = sigma;
        if (m1_opt->count()) p.m1 = m1;
        p.validate();
        return p;
    }
};

json to_json(const nrreg::RegistrationParams &p) {
    json j{{"lambda", p.lambda}, {"rho", p.rho}, {"tau0", p.tau0}, {"max_iters_per_level", p.max_iters_per_level},
           {"stop_decay", p.stop_decay}, {"m0", p.m0}, {"seeded_m0", p.seeded_m0}, {"lambda_reduction", p.lambda_reduction}, {"K", p.K}};
    j["sigma"] = p.sigma ? json(*p.sigma) : json("per-level");
    j["m1"] = p.m1 ? json(*p.m1) : json("input");
    return j;
}

struct DriftFlags {
    std::vector<double> velocity;
    double line_time = 1.0;
    double flyback_time = 0.0;
    CLI::Option *velocity_opt = nullptr;

    void add(CLI::App &app, bool required) {
        velocity_opt = app.add_option("--velocity", velocity, "specimen velocity vx vy (scan units per unit time)")
                           ->expected(2);
        if (required) velocity_opt->required();
        app.add_option("--line-time", line_time, "time to scan one line")->capture_default_str();
        app.add_option("--flyback-time", flyback_time, "probe return time between lines")->capture_default_str();
    }

    nrreg::DriftModel model(int lines) const {
        nrreg::DriftModel m;
        if (velocity.size() == 2) m.velocity = {velocity[0], velocity[1]};
        m.line_time = line_time;
        m.flyback_time = flyback_time;
        m.line_height = 1.0 / double(lines - 1);
        m.validate();
        return m;
    }

    json to_json(int lines) const {
        const auto m = model(lines);
        return {{"velocity", {m.velocity.x, m.velocity.y}}, {"line_time", m.line_time},
                {"flyback_time", m.flyback_time}, {"line_height", m.line_height}};
    }
};

// ---- optional pair cache keyed by the content of a registration problem ----

fs::path cache_dir() {
    const char *env = std::getenv("NRREG_CACHE_DIR");
    return env && *env ? fs::path(env) : fs::path();
}

std::string cache_key(const std::string &kind, const nrreg::Frame &f, const nrreg::Frame &g,
                      const nrreg::Deformation &guess, const nrreg::RegistrationParams &p) {
    std::string blob = kind + "\n" + to_json(p).dump() + "\n";
    blob += nrreg::io::encode_frame(f);
    blob += nrreg::io::encode_frame(g);
    blob += nrreg::io::encode_deformation(guess);
    return nrreg::io::sha256_hex(blob);
}

nrreg::PairRegistrar cached(nrreg::PairRegistrar inner, std::string kind) {
    const fs::path dir = cache_dir();
    if (dir.empty()) return inner;
    return [inner = std::move(inner), kind = std::move(kind), dir](const nrreg::Frame &f, const nrreg::Frame &g,
                                                                  const nrreg::Deformation &guess,
                                                                  const nrreg::RegistrationParams &p) {
        const std::string key = cache_key(kind, f, g, guess, p);
        const fs::path def = dir / (key + ".def"), rep = dir / (key + ".json");
        if (fs::exists(def) && fs::exists(rep)) {
            try {
                nrreg::RegistrationResult hit{nrreg::io::read_deformation(def), {}};
                hit.report = nrreg::io::solve_report_from_json(json::parse(nrreg::io::detail::read_bytes(rep)));
                if (hit.phi.conforms_to(f)) return hit;
            } catch (const std::exception &) {
                // unreadable entries are recomputed
            }
        }
        nrreg::RegistrationResult r = inner(f, g, guess, p);
        static std::mutex write_lock;
        std::lock_guard lock(write_lock);
        const fs::path tmp = dir / (key + ".tmp");
        nrreg::io::write_deformation(tmp, r.phi);
        fs::rename(tmp, def);
        nrreg::io::write_text(tmp, nrreg::io::to_json(r.report).dump() + "\n");
        fs::rename(tmp, rep);
        return r;
    };
}

std::vector<nrreg::Frame> read_series(const fs::path &manifest, RunManifest &run) {
    std::vector<nrreg::Frame> frames;
    run.input("series", manifest);
    std::size_t i = 0;
    for (const auto &p : nrreg::io::read_series_manifest(manifest)) {
        run.input(index_name("frame", i++, ""), p);
        frames.push_back(nrreg::io::read_frame(p));
    }
    return frames;
}

// ---- subcommands ----

struct SynthCmd {
    fs::path scenario, out;
    std::optional<int> frames;
    std::optional<std::uint64_t> seed;
    std::string format = "frm";

    void add(CLI::App &app) {
        auto *c = app.add_subcommand("synth", "generate a synthetic lattice series with ground truth");
        c->add_option("--scenario", scenario, "key = value scenario file")->check(CLI::ExistingFile);
        c->add_option("--out", out, "output directory")->required();
        c->add_option("--frames", frames, "override the frame count");
        c->add_option("--seed", seed, "override the random seed");
        c->add_option("--format", format, "frame format")->check(CLI::IsMember({"frm", "png", "tif"}))->capture_default_str();
        c->callback([this] { run(); });
    }

    void run() {
        RunManifest m("synth");
        nrreg::io::Scenario sc;
        if (!scenario.empty()) {
            m.input("scenario", scenario);
            sc = nrreg::io::read_scenario(scenario);
        }
        if (frames) sc.frames = *frames;
        if (seed) sc.seed = *seed;
        if (sc.frames < 1) throw nrreg::InputError("frames must be at least 1");
        m.params() = nrreg::io::to_json(sc);
        m.params()["format"] = format;
        nrreg::Frame gt;
        const nrreg::SyntheticSeries s = nrreg::io::run_scenario(sc, &gt);
        fs::create_directories(out);
        const std::string ext = "." + format;
        nrreg::io::write_frame(out / ("ground_truth" + ext), gt);
        m.output(out / ("ground_truth" + ext));
        std::vector<fs::path> listed;
        for (std::size_t i = 0; i < s.frames.size(); ++i) {
            const fs::path fp = out / index_name("frame", i, ext), tp = out / index_name("truth", i, ".def");
            nrreg::io::write_frame(fp, s.frames[i]);
            nrreg::io::write_deformation(tp, s.truth[i]);
            listed.push_back(fp);
            m.output(fp);
            m.output(tp);
        }
        nrreg::io::write_series_manifest(out / "series.txt", listed);
        m.output(out / "series.txt");
        const auto spots = nrreg::lattice_spots(sc.lattice);
        std::ostringstream csv;
        csv << "kx,ky\n";
        for (const auto &[kx, ky] : spots) csv << kx << ',' << ky << '\n';
        nrreg::io::write_text(out / "lattice_spots.csv", csv.str());
        m.output(out / "lattice_spots.csv");
        m.write(out);
    }
};

struct PairCmd {
    fs::path source, target, guess, out;
    ParamFlags flags;

    void add(CLI::App &app) {
        auto *c = app.add_subcommand("register-pair", "register a source frame onto a target frame");
        c->add_option("--source", source, "frame f to deform")->required()->check(CLI::ExistingFile);
        c->add_option("--target", target, "frame g to match")->required()->check(CLI::ExistingFile);
        c->add_option("--guess", guess, "initial deformation")->check(CLI::ExistingFile);
        c->add_option("--out", out, "output directory")->required();
        flags.add(*c);
        c->callback([this] { run(); });
    }

    void run() {
        RunManifest m("register-pair");
        const auto p = flags.resolve();
        m.params() = to_json(p);
        m.input("source", source);
        m.input("target", target);
        const nrreg::Frame f = nrreg::io::read_frame(source), g = nrreg::io::read_frame(target);
        if (!f.same_geometry(g)) throw nrreg::InputError("source and target differ in size");
        nrreg::Deformation init = nrreg::Deformation::conforming(f);
        if (!guess.empty()) {
            m.input("guess", guess);
            init = nrreg::io::read_deformation(guess);
        }
        const auto r = cached(nrreg::nonrigid_registrar(), "nonrigid")(f, g, init, p);
        fs::create_directories(out);
        nrreg::io::write_deformation(out / "phi.def", r.phi);
        nrreg::io::write_text(out / "report.csv", nrreg::io::solve_report_csv(r.report));
        const nrreg::Frame warped = nrreg::warp(f, r.phi);
        nrreg::io::write_frame(out / "warped.frm", warped);
        nrreg::io::write_rendering(out / "warped.png", warped);
        for (const char *name : {"phi.def", "report.csv", "warped.frm", "warped.png"}) m.output(out / name);
        m.doc()["result"] = {{"termination", nrreg::to_string(r.report.termination)},
                             {"energy", nrreg::io::to_json(r.report.final_energy)}};
        m.write(out);
    }
};

struct SeriesCmd {
    fs::path series, out;
    ParamFlags flags;
    DriftFlags drift;
    bool rigid = false, undrift = false, estimate_velocity = false, extended = false, force = false;
    std::string fuse = "median";
    int threads = 1;
    int rigid_radius = 10;

    void add(CLI::App &app) {
        auto *c = app.add_subcommand("register-series", "register and fuse a frame series");
        c->add_option("--series", series, "manifest listing frame paths in acquisition order")
            ->required()
            ->check(CLI::ExistingFile);
        c->add_option("--out", out, "output directory")->required();
        flags.add(*c);
        c->add_flag("--rigid", rigid, "rigid integer-shift baseline instead of nonrigid registration");
        c->add_option("--rigid-radius", rigid_radius, "search radius of the rigid baseline in pixels")->capture_default_str();
        c->add_option("--fuse", fuse, "fusion rule")->check(CLI::IsMember({"mean", "median"}))->capture_default_str();
        c->add_flag("--undrift", undrift, "remove constant-velocity scan drift before registration");
        c->add_flag("--estimate-velocity", estimate_velocity, "estimate the drift velocity from rigid shifts");
        drift.add(*c, false);
        c->add_flag("--extended", extended, "denoise every frame by registering the series onto it first");
        c->add_flag("--force", force, "allow the extended mode on long series");
        c->add_option("--threads", threads, "worker threads for consecutive pairs")->capture_default_str()->check(
            CLI::PositiveNumber);
        c->callback([this] { run(); });
    }

    void run() {
        RunManifest m("register-series");
        const auto p = flags.resolve();
        const std::vector<nrreg::Frame> frames = read_series(series, m);
        if (extended && rigid) throw nrreg::InputError("--extended and --rigid cannot be combined");
        if (estimate_velocity && !undrift) throw nrreg::InputError("--estimate-velocity requires --undrift");
        if (undrift && !estimate_velocity && drift.velocity.size() != 2)
            throw nrreg::InputError("--undrift needs --velocity or --estimate-velocity");

        nrreg::SeriesOptions opt;
        opt.fusion = fuse == "mean" ? nrreg::FusionMode::mean : nrreg::FusionMode::median;
        opt.threads = threads;
        if (rigid) {
            nrreg::RigidSearch s;
            s.radius_x = s.radius_y = rigid_radius;
            opt.registrar = cached(nrreg::rigid_registrar(s), "rigid" + std::to_string(rigid_radius));
        } else {
            opt.registrar = cached(nrreg::nonrigid_registrar(), "nonrigid");
        }
        opt.estimate_velocity = estimate_velocity;
        json params = to_json(p);
        params["mode"] = rigid ? "rigid" : "nonrigid";
        params["fuse"] = fuse;
        params["extended"] = extended;
        params["threads"] = threads;
        if (undrift) {
            opt.undrift = drift.model(frames.front().height());
            params["undrift"] = drift.to_json(frames.front().height());
            params["undrift"]["estimate_velocity"] = estimate_velocity;
        }
        m.params() = params;

        fs::create_directories(out);
        std::vector<nrreg::PairRecord> log;
        std::vector<nrreg::Deformation> phis;
        nrreg::Frame reconstruction;
        std::vector<double> round_change;
        if (extended) {
            nrreg::ExtendedOptions ext;
            ext.force = force;
            auto r = nrreg::register_series_extended(frames, p, opt, ext);
            reconstruction = std::move(r.reconstruction);
            phis = r.denoised_registration.to_reference;
            log = std::move(r.log);
            for (std::size_t i = 0; i < r.denoised.size(); ++i) {
                nrreg::io::write_frame(out / index_name("denoised", i, ".frm"), r.denoised[i]);
                m.output(out / index_name("denoised", i, ".frm"));
            }
        } else {
            auto r = nrreg::register_series(frames, p, opt);
            reconstruction = std::move(r.reconstruction);
            phis = r.registration.to_reference;
            log = std::move(r.registration.log);
            round_change = r.registration.round_change;
        }

        nrreg::io::write_frame(out / "reconstruction.frm", reconstruction);
        nrreg::io::write_rendering(out / "reconstruction.png", reconstruction);
        m.output(out / "reconstruction.frm");
        m.output(out / "reconstruction.png");
        for (std::size_t i = 0; i < phis.size(); ++i) {
            nrreg::io::write_deformation(out / index_name("phi", i, ".def"), phis[i]);
            m.output(out / index_name("phi", i, ".def"));
        }
        std::ostringstream summary;
        summary << "stage,round,frame,lambda,iterations,termination,E\n";
        fs::create_directories(out / "reports");
        for (std::size_t k = 0; k < log.size(); ++k) {
            const auto &rec = log[k];
            int iters = 0;
            for (const auto &l : rec.report.levels) iters += l.iterations;
            summary << (rec.stage == nrreg::PairStage::consecutive ? "consecutive" : "reference") << ',' << rec.round
                    << ',' << rec.frame << ',' << nrreg::io::format_double(rec.lambda) << ',' << iters << ','
                    << nrreg::to_string(rec.report.termination) << ','
                    << nrreg::io::format_double(rec.report.final_energy.total) << '\n';
            nrreg::io::write_text(out / "reports" / index_name("pair", k, ".csv"), nrreg::io::solve_report_csv(rec.report));
        }
        nrreg::io::write_text(out / "pairs.csv", summary.str());
        m.output(out / "pairs.csv");
        m.doc()["result"] = {{"pairs", log.size()}, {"round_change", round_change}};
        m.write(out);
    }
};

struct QualityCmd {
    fs::path first, last, phi_n0, phi_0n, spots_file, out;
    ParamFlags flags;
    int p_max = 12, blocks = 9, patch_radius = 4;

    void add(CLI::App &app) {
        auto *c = app.add_subcommand("quality", "residual, d_p curve, local grid and IQ of a registration");
        c->add_option("--first", first, "frame f_0")->required()->check(CLI::ExistingFile);
        c->add_option("--last", last, "frame f_n")->required()->check(CLI::ExistingFile);
        auto *a = c->add_option("--phi-n0", phi_n0, "deformation of f_n onto f_0; inverted to seed phi_0n")
                      ->check(CLI::ExistingFile);
        auto *b = c->add_option("--phi-0n", phi_0n, "deformation of f_0 onto f_n, used as is")->check(CLI::ExistingFile);
        a->excludes(b);
        c->add_option("--spots", spots_file, "CSV of kx,ky spot frequencies (default: detected)")->check(CLI::ExistingFile);
        c->add_option("--p-max", p_max, "largest patch radius of the d_p curve")->capture_default_str();
        c->add_option("--grid", blocks, "blocks per side of the local quality grid")->capture_default_str();
        c->add_option("--grid-patch-radius", patch_radius, "patch radius of the local grid")->capture_default_str();
        c->add_option("--out", out, "output directory")->required();
        flags.add(*c);
        c->callback([this] { run(); });
    }

    static std::vector<std::pair<int, int>> read_spots(const fs::path &path) {
        std::istringstream in(nrreg::io::detail::read_bytes(path));
        std::vector<std::pair<int, int>> spots;
        std::string line;
        while (std::getline(in, line)) {
            int kx, ky;
            char comma;
            std::istringstream ls(line);
            if (ls >> kx >> comma >> ky && comma == ',') spots.emplace_back(kx, ky);
        }
        if (spots.empty()) throw nrreg::InputError("no spots in " + path.string());
        return spots;
    }

    void run() {
        RunManifest m("quality");
        const auto p = flags.resolve();
        m.input("first", first);
        m.input("last", last);
        const nrreg::Frame f0 = nrreg::io::read_frame(first), fn = nrreg::io::read_frame(last);
        if (!f0.same_geometry(fn)) throw nrreg::InputError("frames differ in size");
        nrreg::QualityOptions q;
        q.p_max = p_max;
        q.grid_blocks = blocks;
        q.grid_patch_radius = patch_radius;
        if (!spots_file.empty()) {
            m.input("spots", spots_file);
            q.spots = read_spots(spots_file);
        }
        json params = to_json(p);
        params["p_max"] = p_max;
        params["grid"] = blocks;
        params["grid_patch_radius"] = patch_radius;
        m.params() = params;

        fs::create_directories(out);
        nrreg::Deformation phi;
        if (!phi_0n.empty()) {
            m.input("phi_0n", phi_0n);
            phi = nrreg::io::read_deformation(phi_0n);
        } else {
            nrreg::Deformation seed = nrreg::Deformation::conforming(f0);
            if (!phi_n0.empty()) {
                m.input("phi_n0", phi_n0);
                seed = nrreg::inverse_seed(nrreg::io::read_deformation(phi_n0), f0.pixel_size());
            }
            const auto r = cached(nrreg::nonrigid_registrar(), "nonrigid")(f0, fn, seed, phi_n0.empty() ? p : p.seeded());
            phi = r.phi;
            nrreg::io::write_text(out / "report.csv", nrreg::io::solve_report_csv(r.report));
            m.output(out / "report.csv");
        }
        nrreg::io::write_deformation(out / "phi_0n.def", phi);
        const nrreg::QualityReport rep = nrreg::evaluate_quality(nrreg::residual(fn, f0, phi), q);
        nrreg::io::write_frame(out / "residual.frm", rep.residual);
        nrreg::io::write_text(out / "dp_curve.csv", nrreg::io::dp_curve_csv(rep));
        nrreg::io::write_text(out / "local_grid.csv", nrreg::io::local_grid_csv(rep));
        nrreg::io::write_text(out / "iq_spots.csv", nrreg::io::iq_spots_csv(rep));
        nrreg::io::write_rendering(out / "residual.png", rep.residual);
        nrreg::io::write_rendering(out / "dp.png", rep.dp);
        nrreg::io::write_rendering(out / "spectrum.png", rep.spectrum, true);
        for (const char *name : {"phi_0n.def", "residual.frm", "dp_curve.csv", "local_grid.csv", "iq_spots.csv",
                                 "residual.png", "dp.png", "spectrum.png"})
            m.output(out / name);
        m.doc()["result"] = {{"iq_max", rep.iq_max}};
        m.write(out);
    }
};

struct UndriftCmd {
    fs::path input, output;
    DriftFlags drift;

    void add(CLI::App &app) {
        auto *c = app.add_subcommand("undrift", "remove constant-velocity scan drift from one frame");
        c->add_option("--input", input, "input frame")->required()->check(CLI::ExistingFile);
        c->add_option("--output", output, "corrected frame")->required();
        drift.add(*c, true);
        c->callback([this] { run(); });
    }

    void run() {
        RunManifest m("undrift");
        m.input("input", input);
        const nrreg::Frame f = nrreg::io::read_frame(input);
        m.params() = drift.to_json(f.height());
        nrreg::io::write_frame(output, nrreg::undrift(f, drift.model(f.height())));
        m.output(output);
        const fs::path dir = output.has_parent_path() ? output.parent_path() : fs::path(".");
        nrreg::io::write_text(dir / (output.filename().string() + ".manifest.json"), m.doc().dump(2) + "\n");
    }
};

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"nonrigid registration and reconstruction of noisy image series"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "nrreg 0.1.0");
    SynthCmd synth;
    PairCmd pair;
    SeriesCmd series;
    QualityCmd quality;
    UndriftCmd undrift;
    synth.add(app);
    pair.add(app);
    series.add(app);
    quality.add(app);
    undrift.add(app);
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        app.exit(e);
        return exit_input;
    } catch (const nrreg::InputError &e) {
        std::cerr << "nrreg: input error: " << e.what() << "\n";
        return exit_input;
    } catch (const nrreg::Error &e) {
        std::cerr << "nrreg: solver error: " << e.what() << "\n";
        return exit_solver;
    } catch (const fs::filesystem_error &e) {
        std::cerr << "nrreg: " << e.what() << "\n";
        return exit_input;
    } catch (const std::exception &e) {
        std::cerr << "nrreg: internal error: " << e.what() << "\n";
        return exit_solver;
    }
    return exit_ok;
}
