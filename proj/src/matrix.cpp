#include "qbara/matrix.hpp"

#include <cmath>

namespace qbara {

std::string shape_str(const Matrix & m) {
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

Matrix matmul(const Matrix & a, const Matrix & b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a) + " * " + shape_str(b));
    }
    return a * b;
}

Matrix segment_sum_cols(const Matrix & m, Index group) {
    if (group < 1) {
        throw ParamError("segment_sum_cols: group must be >= 1, got " + std::to_string(group));
    }
    if (m.cols() % group != 0) {
        throw ShapeError("segment_sum_cols: cols " + std::to_string(m.cols()) +
                         " not divisible by group " + std::to_string(group));
    }
    Matrix out(m.rows(), m.cols() / group);
    for (Index j = 0; j < out.cols(); ++j) {
        out.col(j) = m.middleCols(j * group, group).rowwise().sum();
    }
    return out;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * next_unit();
}

double Rng::normal(double mean, double stddev) {
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    double u1 = next_unit();
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
}

Rng Rng::split(uint64_t stream) const {
    Rng fork(state_ ^ (0x6a09e667f3bcc909ull * (stream + 1)));
    fork.next_u64();
    return fork;
}

Matrix rng_fill(Rng & rng, Index rows, Index cols, const Dist & dist) {
    if (rows < 1 || cols < 1) {
        throw ParamError("rng_fill: dimensions must be positive, got " + std::to_string(rows) +
                         "x" + std::to_string(cols));
    }
    switch (dist.kind) {
        case Dist::Zeros:
            return Matrix::Zero(rows, cols);
        case Dist::Uniform: {
            if (!(dist.b > dist.a)) {
                throw ParamError("rng_fill: uniform requires hi > lo");
            }
            Matrix out(rows, cols);
            for (Index i = 0; i < rows; ++i) {
                for (Index j = 0; j < cols; ++j) {
                    out(i, j) = rng.uniform(dist.a, dist.b);
                }
            }
            return out;
        }
        case Dist::Normal: {
            if (!(dist.b >= 0.0) || !std::isfinite(dist.b) || !std::isfinite(dist.a)) {
                throw ParamError("rng_fill: normal requires finite mean and stddev >= 0");
            }
            Matrix out(rows, cols);
            for (Index i = 0; i < rows; ++i) {
                for (Index j = 0; j < cols; ++j) {
                    out(i, j) = rng.normal(dist.a, dist.b);
                }
            }
            return out;
        }
    }
    throw ParamError("rng_fill: unknown distribution");
}

}  // namespace qbara
