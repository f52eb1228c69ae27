#pragma once

#include <cstdint>
#include <random>

#include "mixlab/matrix.hpp"

namespace mixlab {

// One master seed fans out into independent streams via fixed offsets, so the
// original and dense arms of an experiment can share (or deliberately not
// share) randomness. SplitMix64 scrambling keeps nearby seeds uncorrelated.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t offset) {
    std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (offset + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Named stream offsets used by the experiment harness.
enum class SeedStream : std::uint64_t {
    DataGen = 1,
    InitOrig = 2,
    InitDense = 3,
    BatchOrder = 4,
    Calibration = 5,
    Reference = 6,
};

class RandomStream {
public:
    explicit RandomStream(std::uint64_t seed) : gen_(seed) {}

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(gen_);
    }
    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }
    std::uint64_t uniform_index(std::uint64_t n) {  // [0, n)
        return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(gen_);
    }
    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

inline Matrix random_normal(std::size_t rows, std::size_t cols, RandomStream& rs,
                            double stddev = 1.0) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rs.normal(0.0, stddev);
    return m;
}

inline Matrix random_uniform(std::size_t rows, std::size_t cols, RandomStream& rs,
                             double lo, double hi) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rs.uniform(lo, hi);
    return m;
}

}  // namespace mixlab
