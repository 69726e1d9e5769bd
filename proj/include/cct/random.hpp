#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "cct/core.hpp"

namespace cct {

/// Counter-based generator: the n-th draw of a stream is a pure function of (key, n),
/// so records generated in any order or on any worker see identical numbers.
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key = 0) : key_(key) {}

    /// Independent stream for a named purpose and an index within it.
    static CounterRng stream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        return CounterRng(mix(mix(seed ^ h) + index * 0x9e3779b97f4a7c15ULL));
    }

    std::uint64_t next_u64() { return mix(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        // Box-Muller; the second variate is discarded to keep draws stateless.
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    Vector uniform_in(const Box& box) {
        Vector x(static_cast<Eigen::Index>(box.dim()));
        for (std::size_t i = 0; i < box.dim(); ++i)
            x[static_cast<Eigen::Index>(i)] = uniform(box.axes[i].lo, box.axes[i].hi);
        return x;
    }

    Vector normal_vector(Eigen::Index n) {
        Vector v(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
        return v;
    }

    /// Uniform sample in the unit Euclidean ball of dimension n.
    Vector unit_ball(Eigen::Index n) {
        Vector d = normal_vector(n);
        double norm = d.norm();
        while (norm == 0.0) {
            d = normal_vector(n);
            norm = d.norm();
        }
        const double r = std::pow(uniform(), 1.0 / static_cast<double>(n));
        return d * (r / norm);
    }

    std::uint64_t counter() const { return counter_; }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace cct
