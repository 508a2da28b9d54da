#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace qbara {

// Dense row-major matrices of doubles everywhere. A length-D feature vector
// is a 1xD matrix; batches go along rows.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto exit codes: everything below except
// NumericError is a data/config problem (exit 2); NumericError is a failed
// numeric check or divergence (exit 3).
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ParamError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class CapabilityError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class StateError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

std::string shape_str(const Matrix & m);

// Product a*b with shape validation; throws ShapeError naming both shapes.
Matrix matmul(const Matrix & a, const Matrix & b);

// Sums each run of `group` adjacent columns. Adjoint of column repetition.
Matrix segment_sum_cols(const Matrix & m, Index group);

// ---------------------------------------------------------------------------
// Deterministic RNG. SplitMix64 (Steele et al., "Fast splittable pseudorandom
// number generators") drives everything: 64-bit state, one multiply-xor-shift
// mix per draw, trivially splittable. Uniform doubles take the top 53 bits;
// normals use Box-Muller. Sequences are reproducible for a fixed seed.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_unit() {
        return double(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi);
    double normal(double mean, double stddev);

    // Independent stream derived from this generator's seed and a stream id.
    Rng split(uint64_t stream) const;

private:
    uint64_t state_;
};

struct Dist {
    enum Kind : uint8_t { Zeros = 0, Uniform = 1, Normal = 2 };

    Kind kind = Zeros;
    double a = 0.0;  // lo / mean
    double b = 0.0;  // hi / stddev

    static Dist zeros() { return {}; }
    static Dist uniform(double lo, double hi) { return {Uniform, lo, hi}; }
    static Dist normal(double mean, double stddev) { return {Normal, mean, stddev}; }
};

Matrix rng_fill(Rng & rng, Index rows, Index cols, const Dist & dist);

}  // namespace qbara
