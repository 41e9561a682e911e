#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace nrreg {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid input: wrong geometry, out-of-range parameter, unreadable file.
class InputError : public Error {
public:
    using Error::Error;
};

/// A numerical procedure could not produce an admissible result.
class SolverError : public Error {
public:
    using Error::Error;
};

/// Raised when an image has zero variance on the region of interest.
class DegenerateImageError : public InputError {
public:
    DegenerateImageError() : InputError("degenerate image") {}
};

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    constexpr Vec2 &operator+=(const Vec2 &o) { x += o.x; y += o.y; return *this; }
    constexpr Vec2 &operator-=(const Vec2 &o) { x -= o.x; y -= o.y; return *this; }
    constexpr Vec2 &operator*=(double s) { x *= s; y *= s; return *this; }
    friend constexpr Vec2 operator+(Vec2 a, const Vec2 &b) { return a += b; }
    friend constexpr Vec2 operator-(Vec2 a, const Vec2 &b) { return a -= b; }
    friend constexpr Vec2 operator-(const Vec2 &a) { return {-a.x, -a.y}; }
    friend constexpr Vec2 operator*(Vec2 a, double s) { return a *= s; }
    friend constexpr Vec2 operator*(double s, Vec2 a) { return a *= s; }
    friend constexpr bool operator==(const Vec2 &, const Vec2 &) = default;
};

constexpr double dot(const Vec2 &a, const Vec2 &b) { return a.x * b.x + a.y * b.y; }
inline double norm(const Vec2 &a) { return std::hypot(a.x, a.y); }

/// Row-major 2-D array. The storage type of images, node fields and masks.
template <class T>
class Grid {
public:
    Grid() = default;
    Grid(int width, int height, T fill = T{})
        : width_(width), height_(height),
          data_(static_cast<std::size_t>(checked(width)) * static_cast<std::size_t>(checked(height)), fill) {}
    Grid(int width, int height, std::vector<T> data) : width_(width), height_(height), data_(std::move(data)) {
        if (width < 0 || height < 0 || data_.size() != static_cast<std::size_t>(width) * height)
            throw InputError("grid data size does not match its dimensions");
    }

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T &operator()(int x, int y) { return data_[index(x, y)]; }
    const T &operator()(int x, int y) const { return data_[index(x, y)]; }
    T &operator[](std::size_t i) { return data_[i]; }
    const T &operator[](std::size_t i) const { return data_[i]; }

    std::size_t index(int x, int y) const {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T> &storage() { return data_; }
    const std::vector<T> &storage() const { return data_; }

    bool same_shape(const Grid &o) const { return width_ == o.width_ && height_ == o.height_; }
    template <class U>
    bool same_shape(const Grid<U> &o) const { return width_ == o.width() && height_ == o.height(); }

    friend bool operator==(const Grid &, const Grid &) = default;

private:
    static int checked(int n) {
        if (n < 0) throw InputError("negative grid dimension");
        return n;
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<T> data_;
};

using Mask = Grid<std::uint8_t>;

inline bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

inline int log2_exact(int n) {
    if (!is_power_of_two(n)) throw InputError("size " + std::to_string(n) + " is not a power of two");
    int d = 0;
    while ((1 << d) < n) ++d;
    return d;
}

} // namespace nrreg
