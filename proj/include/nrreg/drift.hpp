#pragma once

#include <array>
#include <cmath>

#include "nrreg/deformation.hpp"
#include "nrreg/frame.hpp"

namespace nrreg {

/// First-order model of specimen motion during a raster scan: constant velocity v while lines of
/// duration t are scanned with flyback time t_f between them; h is the line height as a fraction
/// of the frame (1 / (lines - 1)). Positions are scan coordinates in [0, 1]^2 with the first pixel
/// at the origin.
struct DriftModel {
    Vec2 velocity{};
    double line_time = 1.0;
    double flyback_time = 0.0;
    double line_height = 1.0;

    void validate() const {
        if (!(line_time > 0.0) || !(flyback_time >= 0.0) || !(line_height > 0.0 && line_height <= 1.0) ||
            !detail::finite(velocity))
            throw InputError("invalid drift model");
    }

    double frame_time(int lines) const { return lines * (line_time + flyback_time); }
};

struct Mat2 {
    double a11 = 1, a12 = 0, a21 = 0, a22 = 1;

    Vec2 operator*(const Vec2 &x) const { return {a11 * x.x + a12 * x.y, a21 * x.x + a22 * x.y}; }
    double det() const { return a11 * a22 - a12 * a21; }
    Mat2 inverse() const {
        const double d = det();
        if (d == 0.0 || !std::isfinite(d)) throw InputError("singular drift matrix");
        return {a22 / d, -a12 / d, -a21 / d, a11 / d};
    }
    friend bool operator==(const Mat2 &, const Mat2 &) = default;
};

/// Linear map M of the scan domain: the pixel at scan position x shows the specimen at M x.
inline Mat2 drift_matrix(const DriftModel &m) {
    m.validate();
    const double t = m.line_time, tf = m.flyback_time, h = m.line_height;
    const double v1 = m.velocity.x, v2 = m.velocity.y;
    return {1.0 - t * v1, -(t + tf) * v1 / h, -t * v2, 1.0 - (t + tf) * v2 / h};
}

namespace detail {

inline Vec2 domain_to_scan(const Frame &f, const Vec2 &x) {
    const double L = f.extent();
    return {(x.x * L - 0.5) / (f.width() - 1), (x.y * L - 0.5) / (f.height() - 1)};
}

inline Vec2 scan_to_domain(const Frame &f, const Vec2 &s) {
    const double L = f.extent();
    return {(s.x * (f.width() - 1) + 0.5) / L, (s.y * (f.height() - 1) + 0.5) / L};
}

inline Frame resample_linear(const Frame &f, const Mat2 &map) {
    Frame out(f.width(), f.height());
    for (int y = 0; y < f.height(); ++y)
        for (int x = 0; x < f.width(); ++x) {
            const Vec2 s = domain_to_scan(f, f.pixel_center(x, y));
            const Sample v = sample_bilinear(f, scan_to_domain(f, map * s));
            out(x, y) = v.value;
            out.set_valid(x, y, v.valid);
        }
    return out;
}

} // namespace detail

/// Forward distortion: pixel x of the result shows the input at M x.
inline Frame apply_drift(const Frame &frame, const DriftModel &model) {
    return detail::resample_linear(frame, drift_matrix(model));
}

/// Removes the distortion of a constant specimen velocity by resampling through M^-1.
inline Frame undrift(const Frame &frame, const DriftModel &model) {
    return detail::resample_linear(frame, drift_matrix(model).inverse());
}

/// Velocity (scan units per unit time) from the rigid shift between consecutive frames, where
/// f_next(x + shift) ~ f_prev(x) and `shift` is in domain units.
inline Vec2 estimate_velocity(const Frame &frame, const Vec2 &shift, double frame_time) {
    if (!(frame_time > 0.0)) throw InputError("frame time must be positive");
    const double L = frame.extent();
    return {shift.x * L / (frame.width() - 1) / frame_time, shift.y * L / (frame.height() - 1) / frame_time};
}

} // namespace nrreg
