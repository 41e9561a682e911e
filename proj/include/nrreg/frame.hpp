#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "nrreg/grid.hpp"

namespace nrreg {

/// Scalar image with a per-pixel validity flag.
///
/// Pixel (i, j) is centred at ((i + 0.5) / L, (j + 0.5) / L) with L = max(width, height), so the
/// image covers the domain [0, width / L] x [0, height / L] whose longest side has length one.
/// Each pixel is one cell of that domain.
class Frame {
public:
    Frame() = default;

    Frame(int width, int height, double fill = 0.0)
        : values_(check_dim(width), check_dim(height), fill), valid_(width, height, 1) {
        if (!std::isfinite(fill)) throw InputError("frame intensities must be finite");
    }

    Frame(int width, int height, std::vector<double> values)
        : values_(check_dim(width), check_dim(height), std::move(values)), valid_(width, height, 1) {
        check_finite();
    }

    Frame(Grid<double> values, Mask valid) : values_(std::move(values)), valid_(std::move(valid)) {
        check_dim(values_.width());
        check_dim(values_.height());
        if (!values_.same_shape(valid_)) throw InputError("validity mask does not match frame size");
        check_finite();
    }

    int width() const { return values_.width(); }
    int height() const { return values_.height(); }
    std::size_t pixel_count() const { return values_.size(); }

    double &operator()(int x, int y) { return values_(x, y); }
    double operator()(int x, int y) const { return values_(x, y); }
    bool valid(int x, int y) const { return valid_(x, y) != 0; }
    void set_valid(int x, int y, bool v) { valid_(x, y) = v ? 1 : 0; }

    const Grid<double> &values() const { return values_; }
    Grid<double> &values() { return values_; }
    const Mask &mask() const { return valid_; }
    Mask &mask() { return valid_; }

    /// Number of pixels along the longest side.
    int extent() const { return std::max(width(), height()); }
    /// Side length of one pixel in domain units.
    double pixel_size() const { return 1.0 / extent(); }
    Vec2 domain_size() const { return {double(width()) / extent(), double(height()) / extent()}; }
    Vec2 pixel_center(int x, int y) const { return {(x + 0.5) / extent(), (y + 0.5) / extent()}; }

    bool contains(const Vec2 &p) const {
        const Vec2 s = domain_size();
        return p.x >= 0.0 && p.y >= 0.0 && p.x <= s.x && p.y <= s.y;
    }

    bool same_geometry(const Frame &o) const { return width() == o.width() && height() == o.height(); }

    std::size_t valid_count() const {
        return static_cast<std::size_t>(std::count(valid_.storage().begin(), valid_.storage().end(), 1));
    }

    friend bool operator==(const Frame &, const Frame &) = default;

private:
    static int check_dim(int n) {
        if (n < 2) throw InputError("frame dimensions must be at least 2x2");
        return n;
    }

    void check_finite() const {
        for (double v : values_.storage())
            if (!std::isfinite(v)) throw InputError("frame intensities must be finite");
    }

    Grid<double> values_;
    Mask valid_;
};

struct Sample {
    double value = 0.0;
    bool valid = false;
};

struct FrameStats {
    double mean = 0.0;
    double std_dev = 0.0;
};

namespace detail {

/// Clamped bilinear interpolation with the exact gradient of the interpolant (zero across a
/// clamped axis). `pixels_valid` is false when a pixel with non-zero weight is invalid.
struct BilinearEval {
    double value;
    Vec2 gradient;
    bool pixels_valid;
};

inline BilinearEval bilinear_eval(const Frame &f, const Vec2 &p) {
    const double L = f.extent();
    const int w = f.width();
    const int h = f.height();
    double px = p.x * L - 0.5;
    double py = p.y * L - 0.5;
    // Pixel centres round-trip through domain units with a few ulps of error.
    if (std::abs(px - std::round(px)) < 1e-11) px = std::round(px);
    if (std::abs(py - std::round(py)) < 1e-11) py = std::round(py);
    bool clamp_x = false;
    bool clamp_y = false;
    if (!(px > 0.0)) { px = 0.0; clamp_x = true; }
    else if (px >= w - 1) { px = w - 1; clamp_x = true; }
    if (!(py > 0.0)) { py = 0.0; clamp_y = true; }
    else if (py >= h - 1) { py = h - 1; clamp_y = true; }
    int i = std::min(static_cast<int>(px), w - 2);
    int j = std::min(static_cast<int>(py), h - 2);
    const double tx = px - i;
    const double ty = py - j;

    const auto &v = f.values();
    const double v00 = v(i, j), v10 = v(i + 1, j), v01 = v(i, j + 1), v11 = v(i + 1, j + 1);
    const double a = (1.0 - tx) * v00 + tx * v10;
    const double b = (1.0 - tx) * v01 + tx * v11;
    BilinearEval out;
    out.value = (1.0 - ty) * a + ty * b;
    out.gradient.x = clamp_x ? 0.0 : L * ((1.0 - ty) * (v10 - v00) + ty * (v11 - v01));
    out.gradient.y = clamp_y ? 0.0 : L * (b - a);

    const auto &m = f.mask();
    bool ok = true;
    if (tx < 1.0 && ty < 1.0) ok = ok && m(i, j);
    if (tx > 0.0 && ty < 1.0) ok = ok && m(i + 1, j);
    if (tx < 1.0 && ty > 0.0) ok = ok && m(i, j + 1);
    if (tx > 0.0 && ty > 0.0) ok = ok && m(i + 1, j + 1);
    out.pixels_valid = ok;
    return out;
}

inline bool finite(const Vec2 &p) { return std::isfinite(p.x) && std::isfinite(p.y); }

} // namespace detail

/// Bilinear interpolation of the pixel values; positions outside the domain are clamped to the
/// boundary and reported invalid.
inline Sample sample_bilinear(const Frame &f, const Vec2 &p) {
    if (!detail::finite(p)) throw InputError("sample position must be finite");
    const auto e = detail::bilinear_eval(f, p);
    return {e.value, e.pixels_valid && f.contains(p)};
}

/// Value of the nearest pixel; exact midpoints resolve to the smaller index.
inline Sample sample_nearest(const Frame &f, const Vec2 &p) {
    if (!detail::finite(p)) throw InputError("sample position must be finite");
    const double L = f.extent();
    const int i = std::clamp(static_cast<int>(std::ceil(p.x * L - 1.0)), 0, f.width() - 1);
    const int j = std::clamp(static_cast<int>(std::ceil(p.y * L - 1.0)), 0, f.height() - 1);
    return {f(i, j), f.valid(i, j) && f.contains(p)};
}

/// Mean and population standard deviation over the valid pixels.
inline FrameStats stats(const Frame &f) {
    double sum = 0.0;
    std::size_t n = 0;
    const auto &v = f.values().storage();
    const auto &m = f.mask().storage();
    for (std::size_t k = 0; k < v.size(); ++k)
        if (m[k]) { sum += v[k]; ++n; }
    if (n == 0) throw InputError("empty domain");
    const double mean = sum / double(n);
    double ss = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k)
        if (m[k]) { const double d = v[k] - mean; ss += d * d; }
    return {mean, std::sqrt(ss / double(n))};
}

/// Embeds a frame in the top-left corner of the smallest enclosing 2^d x 2^d canvas. Padding pixels
/// are invalid and hold the frame's mean so that interpolation near the seam stays bounded.
inline Frame pad_to_power_of_two(const Frame &f) {
    int size = 2;
    while (size < f.extent()) size *= 2;
    if (size == f.width() && size == f.height()) return f;
    double fill = 0.0;
    if (f.valid_count() > 0) fill = stats(f).mean;
    Frame out(size, size, fill);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) out.set_valid(x, y, false);
    for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x) {
            out(x, y) = f(x, y);
            out.set_valid(x, y, f.valid(x, y));
        }
    return out;
}

/// Top-left width x height window of a frame.
inline Frame crop(const Frame &f, int width, int height) {
    if (width > f.width() || height > f.height()) throw InputError("crop window exceeds frame");
    Frame out(width, height);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            out(x, y) = f(x, y);
            out.set_valid(x, y, f.valid(x, y));
        }
    return out;
}

} // namespace nrreg
