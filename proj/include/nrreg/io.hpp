#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nrreg/deformation.hpp"
#include "nrreg/flow.hpp"
#include "nrreg/frame.hpp"
#include "nrreg/quality.hpp"
#include "nrreg/series.hpp"
#include "nrreg/synth.hpp"

namespace nrreg::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "raw formats assume a little-endian host");

namespace detail {

inline std::string read_bytes(const fs::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path &path, const std::string &bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !out.write(bytes.data(), std::streamsize(bytes.size()))) throw InputError("cannot write " + path.string());
}

template <class T>
void put(std::string &buf, const T &v) {
    buf.append(reinterpret_cast<const char *>(&v), sizeof(T));
}

class Reader {
public:
    Reader(std::string bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    void magic(const char (&expected)[5]) {
        need(4);
        if (bytes_.compare(pos_, 4, expected) != 0) throw InputError(what_ + ": bad magic, expected " + expected);
        pos_ += 4;
    }

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw InputError(what_ + ": truncated file");
    }

    const char *cursor() const { return bytes_.data() + pos_; }
    void skip(std::size_t n) { need(n); pos_ += n; }
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    std::string bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

inline std::string lower_extension(const fs::path &p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return char(std::tolower(c)); });
    return e;
}

} // namespace detail

// ---- raw frames: "FRM1", u32 width, u32 height, float32 values, validity bitmap (LSB first) ----

inline std::string encode_frame(const Frame &f) {
    std::string buf = "FRM1";
    detail::put(buf, std::uint32_t(f.width()));
    detail::put(buf, std::uint32_t(f.height()));
    for (double v : f.values().storage()) detail::put(buf, static_cast<float>(v));
    std::string bits((f.pixel_count() + 7) / 8, '\0');
    for (std::size_t k = 0; k < f.pixel_count(); ++k)
        if (f.mask()[k]) bits[k / 8] = char(bits[k / 8] | (1 << (k % 8)));
    return buf + bits;
}

inline Frame decode_frame(std::string bytes, const std::string &what = "frame") {
    detail::Reader r(std::move(bytes), what);
    r.magic("FRM1");
    const auto w = r.get<std::uint32_t>(), h = r.get<std::uint32_t>();
    if (w < 2 || h < 2 || w > 1u << 15 || h > 1u << 15) throw InputError(what + ": implausible frame size");
    const std::size_t n = std::size_t(w) * h;
    Grid<double> values{int(w), int(h)};
    for (std::size_t k = 0; k < n; ++k) values[k] = r.get<float>();
    r.need((n + 7) / 8);
    Mask mask{int(w), int(h)};
    const auto *bits = reinterpret_cast<const unsigned char *>(r.cursor());
    for (std::size_t k = 0; k < n; ++k) mask[k] = (bits[k / 8] >> (k % 8)) & 1;
    r.skip((n + 7) / 8);
    if (!r.at_end()) throw InputError(what + ": trailing bytes");
    return Frame(std::move(values), std::move(mask));
}

// ---- deformations: "DEF1", u32 nx, u32 ny, float64 (u_x, u_y) per node in domain units ----

inline std::string encode_deformation(const Deformation &d) {
    std::string buf = "DEF1";
    detail::put(buf, std::uint32_t(d.nodes_x()));
    detail::put(buf, std::uint32_t(d.nodes_y()));
    for (const auto &v : d.field().storage()) {
        detail::put(buf, v.x);
        detail::put(buf, v.y);
    }
    return buf;
}

inline Deformation decode_deformation(std::string bytes, const std::string &what = "deformation") {
    detail::Reader r(std::move(bytes), what);
    r.magic("DEF1");
    const auto nx = r.get<std::uint32_t>(), ny = r.get<std::uint32_t>();
    if (nx < 2 || ny < 2 || nx > 1u << 15 || ny > 1u << 15) throw InputError(what + ": implausible node grid");
    Grid<Vec2> u{int(nx), int(ny)};
    for (auto &v : u.storage()) {
        v.x = r.get<double>();
        v.y = r.get<double>();
    }
    if (!r.at_end()) throw InputError(what + ": trailing bytes");
    return Deformation(std::move(u));
}

inline void write_deformation(const fs::path &path, const Deformation &d) {
    detail::write_bytes(path, encode_deformation(d));
}

inline Deformation read_deformation(const fs::path &path) {
    return decode_deformation(detail::read_bytes(path), path.string());
}

// ---- 16-bit PNG / TIFF with a JSON sidecar holding the intensity mapping ----

inline fs::path sidecar_path(const fs::path &image) { return fs::path(image.string() + ".json"); }

inline bool is_image_path(const fs::path &p) {
    const std::string e = detail::lower_extension(p);
    return e == ".png" || e == ".tif" || e == ".tiff";
}

/// Writes intensities mapped linearly to [0, 65535]; value = offset + scale * stored. Invalid
/// pixels are stored as 0 and listed as a mask file next to the sidecar only when present.
inline void write_image16(const fs::path &path, const Frame &f) {
    double lo = INFINITY, hi = -INFINITY;
    for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x)
            if (f.valid(x, y)) {
                lo = std::min(lo, f(x, y));
                hi = std::max(hi, f(x, y));
            }
    if (!std::isfinite(lo)) lo = hi = 0.0;
    const double scale = hi > lo ? (hi - lo) / 65535.0 : 1.0;
    cv::Mat img(f.height(), f.width(), CV_16UC1);
    for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x)
            img.at<std::uint16_t>(y, x) =
                f.valid(x, y) ? std::uint16_t(std::clamp(std::lround((f(x, y) - lo) / scale), 0L, 65535L)) : 0;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), img)) throw InputError("cannot write image " + path.string());
    json side{{"offset", lo}, {"scale", scale}, {"width", f.width()}, {"height", f.height()}};
    if (f.valid_count() != f.pixel_count()) {
        std::vector<int> invalid;
        for (std::size_t k = 0; k < f.pixel_count(); ++k)
            if (!f.mask()[k]) invalid.push_back(int(k));
        side["invalid"] = invalid;
    }
    detail::write_bytes(sidecar_path(path), side.dump(2) + "\n");
}

/// Reads an 8- or 16-bit grayscale image; a sidecar, when present, restores the intensity mapping
/// and the validity mask.
inline Frame read_image(const fs::path &path) {
    const cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE | cv::IMREAD_ANYDEPTH);
    if (img.empty()) throw InputError("cannot read image " + path.string());
    double offset = 0.0, scale = 1.0;
    json side;
    if (fs::exists(sidecar_path(path))) {
        try {
            side = json::parse(detail::read_bytes(sidecar_path(path)));
            offset = side.at("offset").get<double>();
            scale = side.at("scale").get<double>();
        } catch (const json::exception &e) {
            throw InputError("bad sidecar " + sidecar_path(path).string() + ": " + e.what());
        }
    }
    Frame f(img.cols, img.rows);
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) {
            const double v = img.depth() == CV_16U ? img.at<std::uint16_t>(y, x) : img.at<std::uint8_t>(y, x);
            f(x, y) = offset + scale * v;
        }
    if (side.contains("invalid"))
        for (int k : side["invalid"].get<std::vector<int>>()) {
            if (k < 0 || std::size_t(k) >= f.pixel_count()) throw InputError("bad sidecar mask index");
            f.mask()[std::size_t(k)] = 0;
        }
    return f;
}

/// 8-bit PNG scaled to the valid range, optionally log-compressed (for spectra). Invalid pixels are black.
inline void write_rendering(const fs::path &path, const Frame &f, bool log_scale = false) {
    auto tone = [&](double v) { return log_scale ? std::log1p(std::max(v, 0.0)) : v; };
    double lo = INFINITY, hi = -INFINITY;
    for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x)
            if (f.valid(x, y)) {
                lo = std::min(lo, tone(f(x, y)));
                hi = std::max(hi, tone(f(x, y)));
            }
    cv::Mat img(f.height(), f.width(), CV_8UC1, cv::Scalar(0));
    if (std::isfinite(lo) && hi > lo)
        for (int y = 0; y < f.height(); ++y)
            for (int x = 0; x < f.width(); ++x)
                if (f.valid(x, y)) img.at<std::uint8_t>(y, x) = std::uint8_t(std::lround(255.0 * (tone(f(x, y)) - lo) / (hi - lo)));
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), img)) throw InputError("cannot write image " + path.string());
}

inline void write_frame(const fs::path &path, const Frame &f) {
    if (is_image_path(path)) return write_image16(path, f);
    detail::write_bytes(path, encode_frame(f));
}

inline Frame read_frame(const fs::path &path) {
    if (is_image_path(path)) return read_image(path);
    return decode_frame(detail::read_bytes(path), path.string());
}

// ---- series manifests: one frame path per line, '#' comments, relative to the manifest ----

inline std::vector<fs::path> read_series_manifest(const fs::path &path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open series manifest " + path.string());
    std::vector<fs::path> out;
    std::string line;
    while (std::getline(in, line)) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto b = line.find_first_not_of(" \t\r"), e = line.find_last_not_of(" \t\r");
        if (b == std::string::npos) continue;
        fs::path p = line.substr(b, e - b + 1);
        out.push_back(p.is_absolute() ? p : path.parent_path() / p);
    }
    if (out.empty()) throw InputError("series manifest " + path.string() + " lists no frames");
    return out;
}

inline void write_series_manifest(const fs::path &path, const std::vector<fs::path> &frames) {
    std::ostringstream s;
    for (const auto &f : frames) s << f.lexically_relative(path.parent_path()).generic_string() << "\n";
    detail::write_bytes(path, s.str());
}

// ---- CSV tables ----

inline std::string format_double(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

inline std::string solve_report_csv(const SolveReport &r) {
    std::ostringstream s;
    s << "level,iter,tau,S,R,E\n";
    for (const auto &st : r.steps)
        s << st.level << ',' << st.iteration << ',' << format_double(st.tau) << ',' << format_double(st.data) << ','
          << format_double(st.regularizer) << ',' << format_double(st.total) << '\n';
    return s.str();
}

inline std::string dp_curve_csv(const QualityReport &q) {
    std::ostringstream s;
    s << "p,mean_dp\n";
    for (const auto &[p, v] : q.dp_curve) s << p << ',' << format_double(v) << '\n';
    return s.str();
}

inline std::string local_grid_csv(const QualityReport &q) {
    std::ostringstream s;
    s << "block_x,block_y,mean_dp\n";
    for (int by = 0; by < q.local_grid.height(); ++by)
        for (int bx = 0; bx < q.local_grid.width(); ++bx)
            s << bx << ',' << by << ',' << format_double(q.local_grid(bx, by)) << '\n';
    return s.str();
}

inline std::string iq_spots_csv(const QualityReport &q) {
    std::ostringstream s;
    s << "kx,ky,radius,iq\n";
    for (const auto &spot : q.iq_spots)
        s << spot.kx << ',' << spot.ky << ',' << format_double(spot.radius()) << ',' << format_double(spot.iq) << '\n';
    return s.str();
}

inline void write_text(const fs::path &path, const std::string &text) { detail::write_bytes(path, text); }

// ---- solve reports as JSON (lossless, used by the pair cache) ----

inline json to_json(const EnergyValue &e) {
    return {{"total", e.total}, {"data", e.data}, {"regularizer", e.regularizer}, {"lambda", e.lambda}};
}

inline EnergyValue energy_from_json(const json &j) {
    return {j.at("total"), j.at("data"), j.at("regularizer"), j.at("lambda")};
}

inline Termination termination_from_string(const std::string &s) {
    for (auto t : {Termination::converged, Termination::max_iters, Termination::step_underflow})
        if (s == to_string(t)) return t;
    throw InputError("unknown termination reason " + s);
}

inline json to_json(const SolveReport &r) {
    json levels = json::array(), steps = json::array();
    for (const auto &l : r.levels)
        levels.push_back({{"level", l.level}, {"iterations", l.iterations}, {"termination", to_string(l.termination)},
                          {"initial", to_json(l.initial)}, {"final", to_json(l.final)}});
    for (const auto &s : r.steps)
        steps.push_back({s.level, s.iteration, s.tau, s.data, s.regularizer, s.total, s.previous_total, s.slope});
    return {{"lambda", r.lambda}, {"termination", to_string(r.termination)}, {"final", to_json(r.final_energy)},
            {"levels", levels}, {"steps", steps}};
}

inline SolveReport solve_report_from_json(const json &j) {
    SolveReport r;
    r.lambda = j.at("lambda");
    r.termination = termination_from_string(j.at("termination"));
    r.final_energy = energy_from_json(j.at("final"));
    for (const auto &l : j.at("levels"))
        r.levels.push_back({l.at("level"), l.at("iterations"), termination_from_string(l.at("termination")),
                            energy_from_json(l.at("initial")), energy_from_json(l.at("final"))});
    for (const auto &s : j.at("steps"))
        r.steps.push_back({s.at(0), s.at(1), s.at(2), s.at(3), s.at(4), s.at(5), s.at(6), s.at(7)});
    return r;
}

// ---- hashing ----

inline std::string sha256_hex(const std::string &bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), md.data(), &len) != 1)
        throw Error("sha256 failed");
    std::ostringstream s;
    for (unsigned int k = 0; k < len; ++k) s << std::hex << std::setw(2) << std::setfill('0') << int(md[k]);
    return s.str();
}

inline std::string sha256_file(const fs::path &path) { return sha256_hex(detail::read_bytes(path)); }

// ---- scenario files: "key = value" lines, '#' comments ----

struct Scenario {
    LatticeSpec lattice;
    MotionSpec motion;
    int frames = 9;
    std::uint64_t seed = 1;
    /// When set, the Poisson dose is chosen to reach this signal-to-noise ratio on the second frame.
    std::optional<double> snr;
};

namespace detail {

inline std::vector<double> numbers(const std::string &key, const std::string &value, std::size_t count) {
    std::istringstream s(value);
    std::vector<double> out;
    double v;
    while (s >> v) out.push_back(v);
    if (!s.eof() || out.size() != count)
        throw InputError("scenario key '" + key + "' expects " + std::to_string(count) + " number(s), got '" + value + "'");
    return out;
}

} // namespace detail

inline Scenario parse_scenario(const std::string &text) {
    Scenario sc;
    auto &L = sc.lattice;
    auto &M = sc.motion;
    std::optional<DriftModel> drift;
    auto px = [&](double v) { return v / double(L.size); };
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw InputError("scenario line " + std::to_string(lineno) + ": expected key = value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    // size first: pixel-valued keys depend on it
    if (kv.count("size")) L.size = int(detail::numbers("size", kv["size"], 1)[0]);
    L.atom_width = 1.5 / L.size;
    L.pore_radius = 2.0 / L.size;
    const double cell = 12.8 / L.size;
    L.basis_a = {cell, 0.0};
    L.basis_b = {0.0, cell};
    for (const auto &[key, value] : kv) {
        auto one = [&] { return detail::numbers(key, value, 1)[0]; };
        auto two = [&] {
            const auto v = detail::numbers(key, value, 2);
            return Vec2{v[0], v[1]};
        };
        if (key == "size") continue;
        else if (key == "frames") sc.frames = int(one());
        else if (key == "seed") sc.seed = std::uint64_t(one());
        else if (key == "basis_a_px") L.basis_a = two() * px(1.0);
        else if (key == "basis_b_px") L.basis_b = two() * px(1.0);
        else if (key == "atom_amplitude") L.atom_amplitude = one();
        else if (key == "atom_width_px") L.atom_width = px(one());
        else if (key == "background") L.background = one();
        else if (key == "pore_depth") L.pore_depth = one();
        else if (key == "pore_radius_px") L.pore_radius = px(one());
        else if (key == "thickness_variation") L.thickness_variation = one();
        else if (key == "thickness_modes") L.thickness_modes = int(one());
        else if (key == "thickness_max_frequency") L.thickness_max_frequency = int(one());
        else if (key == "thickness_seed") L.thickness_seed = std::uint64_t(one());
        else if (key == "translation_px") M.translation_px = two();
        else if (key == "warp_amplitude_px") M.warp_amplitude_px = one();
        else if (key == "warp_modes") M.warp_modes = int(one());
        else if (key == "warp_max_frequency") M.warp_max_frequency = int(one());
        else if (key == "blur_step_px") M.blur_step_px = one();
        else if (key == "drift_velocity") (drift ? *drift : drift.emplace()).velocity = two();
        else if (key == "line_time") (drift ? *drift : drift.emplace()).line_time = one();
        else if (key == "flyback_time") (drift ? *drift : drift.emplace()).flyback_time = one();
        else if (key == "noise") {
            if (value == "none") M.noise.kind = NoiseKind::none;
            else if (value == "gaussian") M.noise.kind = NoiseKind::gaussian;
            else if (value == "poisson") M.noise.kind = NoiseKind::poisson;
            else throw InputError("scenario: unknown noise kind '" + value + "'");
        } else if (key == "noise_sigma") M.noise.sigma = one();
        else if (key == "dose") M.noise.dose = one();
        else if (key == "snr") sc.snr = one();
        else throw InputError("scenario: unknown key '" + key + "'");
    }
    if (drift) {
        drift->line_height = 1.0 / (L.size - 1);
        M.drift = drift;
    }
    if (sc.frames < 1) throw InputError("scenario: frames must be at least 1");
    if (sc.snr && !(*sc.snr > 0.0)) throw InputError("scenario: snr must be positive");
    if (sc.snr && M.noise.kind != NoiseKind::poisson) throw InputError("scenario: snr requires poisson noise");
    L.validate();
    M.validate();
    return sc;
}

inline json to_json(const Scenario &sc) {
    const auto &L = sc.lattice;
    const auto &M = sc.motion;
    json motif = json::array();
    for (const auto &a : L.motif) motif.push_back({a.x, a.y});
    json j{{"frames", sc.frames},
           {"seed", sc.seed},
           {"lattice",
            {{"size", L.size}, {"basis_a", {L.basis_a.x, L.basis_a.y}}, {"basis_b", {L.basis_b.x, L.basis_b.y}},
             {"motif", motif}, {"atom_amplitude", L.atom_amplitude}, {"atom_width", L.atom_width},
             {"background", L.background}, {"pore_depth", L.pore_depth}, {"pore_radius", L.pore_radius},
             {"thickness_variation", L.thickness_variation}, {"thickness_modes", L.thickness_modes},
             {"thickness_max_frequency", L.thickness_max_frequency}, {"thickness_seed", L.thickness_seed}}},
           {"motion",
            {{"translation_px", {M.translation_px.x, M.translation_px.y}}, {"warp_amplitude_px", M.warp_amplitude_px},
             {"warp_modes", M.warp_modes}, {"warp_max_frequency", M.warp_max_frequency},
             {"blur_step_px", M.blur_step_px},
             {"noise", {{"kind", M.noise.kind == NoiseKind::none       ? "none"
                                 : M.noise.kind == NoiseKind::gaussian ? "gaussian"
                                                                       : "poisson"},
                        {"sigma", M.noise.sigma},
                        {"dose", M.noise.dose}}}}}};
    if (M.drift)
        j["motion"]["drift"] = {{"velocity", {M.drift->velocity.x, M.drift->velocity.y}},
                                {"line_time", M.drift->line_time},
                                {"flyback_time", M.drift->flyback_time},
                                {"line_height", M.drift->line_height}};
    if (sc.snr) j["snr"] = *sc.snr;
    return j;
}

inline Scenario read_scenario(const fs::path &path) { return parse_scenario(detail::read_bytes(path)); }

/// Renders the lattice and generates the series, resolving an SNR target into a Poisson dose.
inline SyntheticSeries run_scenario(const Scenario &sc, Frame *ground_truth = nullptr) {
    const Frame gt = render_lattice(sc.lattice);
    MotionSpec motion = sc.motion;
    if (sc.snr) {
        MotionSpec clean = motion;
        clean.noise = {};
        const SyntheticSeries probe = synth_series(gt, clean, std::min(sc.frames, 2), sc.seed);
        motion.noise.dose = dose_for_snr(probe.clean.back(), *sc.snr);
    }
    if (ground_truth) *ground_truth = gt;
    return synth_series(gt, motion, sc.frames, sc.seed);
}

} // namespace nrreg::io
