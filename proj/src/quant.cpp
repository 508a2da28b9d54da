#include "qbara/quant.hpp"

#include <algorithm>
#include <cmath>

namespace qbara {

namespace {

bool allowed_bits(int bits) {
    return bits == 2 || bits == 3 || bits == 4 || bits == 8;
}

// One requantization derives alpha' = ((alpha*K + beta) - beta) / K, which is
// not always == alpha in floating point. Iterate that map to a fixed point
// (with a tie-break for the rare 2-cycle) so quantize(dequantize(quantize(W)))
// reproduces alphas exactly.
double snap_alpha(double alpha, double beta, double levels) {
    if (alpha == 0.0) {
        return 0.0;
    }
    double prev = -1.0;
    for (int i = 0; i < 64; ++i) {
        double next = ((alpha * levels + beta) - beta) / levels;
        if (next == alpha) {
            return alpha;
        }
        if (next == prev) {
            return std::min(alpha, next);
        }
        prev = alpha;
        alpha = next;
    }
    return alpha;
}

double stabilize_alpha(double alpha0, double beta, double levels) {
    double alpha = snap_alpha(alpha0, beta, levels);
    for (int i = 0; i < 16; ++i) {
        double top = alpha * levels + beta;
        double derived = snap_alpha((top - beta) / levels, beta, levels);
        if (derived == alpha) {
            return alpha;
        }
        alpha = derived;
    }
    return alpha;
}

uint8_t round_code(double x, double lo, double hi) {
    double r = std::nearbyint(x);  // default FP mode: ties to even
    r = std::clamp(r, lo, hi);
    return static_cast<uint8_t>(r - lo);  // callers offset lo back as needed
}

}  // namespace

void validate_config(const QuantConfig & cfg) {
    if (!allowed_bits(cfg.bits)) {
        throw ParamError("quantize: bits must be one of {2,3,4,8}, got " + std::to_string(cfg.bits));
    }
    if (cfg.tile_rows < 1 || cfg.tile_cols < 1) {
        throw ParamError("quantize: tile dims must be positive");
    }
}

TileQuant quantize_tile(std::span<const double> values, QuantMode mode, int bits) {
    if (!allowed_bits(bits)) {
        throw ParamError("quantize_tile: bits must be one of {2,3,4,8}, got " + std::to_string(bits));
    }
    if (values.empty()) {
        throw ParamError("quantize_tile: empty tile");
    }
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw DataError("quantize_tile: non-finite value");
        }
    }

    TileQuant out;
    out.codes.resize(values.size());

    if (mode == QuantMode::MinMax) {
        const double levels = double((1 << bits) - 1);
        double wmin = values[0];
        double wmax = values[0];
        for (double v : values) {
            wmin = std::min(wmin, v);
            wmax = std::max(wmax, v);
        }
        if (wmax == wmin) {
            out.alpha = 0.0;
            out.beta = wmin;
            return out;  // codes already zero
        }
        out.alpha = stabilize_alpha((wmax - wmin) / levels, wmin, levels);
        out.beta = wmin;
        for (size_t i = 0; i < values.size(); ++i) {
            out.codes[i] = round_code((values[i] - out.beta) / out.alpha, 0.0, levels);
        }
        return out;
    }

    // AbsMax: symmetric around zero, offset-binary storage.
    const double half = double((1 << (bits - 1)) - 1);
    double amax = 0.0;
    for (double v : values) {
        amax = std::max(amax, std::fabs(v));
    }
    out.beta = 0.0;
    if (amax == 0.0) {
        out.alpha = 0.0;
        return out;
    }
    out.alpha = stabilize_alpha(amax / half, 0.0, half);
    for (size_t i = 0; i < values.size(); ++i) {
        out.codes[i] = round_code(values[i] / out.alpha, -half, half);
    }
    return out;
}

std::vector<double> dequantize_tile(std::span<const uint8_t> codes, double alpha, double beta,
                                    QuantMode mode, int bits) {
    if (!allowed_bits(bits)) {
        throw ParamError("dequantize_tile: bits must be one of {2,3,4,8}");
    }
    const int max_code = (mode == QuantMode::MinMax) ? (1 << bits) - 1 : (1 << bits) - 2;
    const double offset = (mode == QuantMode::MinMax) ? 0.0 : double((1 << (bits - 1)) - 1);
    std::vector<double> out(codes.size());
    for (size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > max_code) {
            throw DataError("dequantize_tile: code " + std::to_string(codes[i]) +
                            " out of range for " + std::to_string(bits) + "-bit mode");
        }
        out[i] = alpha * (double(codes[i]) - offset) + beta;
    }
    return out;
}

QuantizedMatrix quantize_matrix(const Matrix & m, const QuantConfig & cfg) {
    validate_config(cfg);
    if (m.rows() % cfg.tile_rows != 0 || m.cols() % cfg.tile_cols != 0) {
        throw ShapeError("quantize_matrix: matrix " + shape_str(m) + " not divisible by tile " +
                         std::to_string(cfg.tile_rows) + "x" + std::to_string(cfg.tile_cols));
    }

    QuantizedMatrix q;
    q.rows = m.rows();
    q.cols = m.cols();
    q.config = cfg;
    q.alphas.reserve(q.tile_count());
    q.betas.reserve(q.tile_count());

    std::vector<uint8_t> all_codes;
    all_codes.reserve(size_t(m.size()));
    std::vector<double> tile(size_t(q.tile_elems()));

    for (Index tr = 0; tr < q.tile_grid_rows(); ++tr) {
        for (Index tc = 0; tc < q.tile_grid_cols(); ++tc) {
            size_t k = 0;
            for (Index i = 0; i < cfg.tile_rows; ++i) {
                for (Index j = 0; j < cfg.tile_cols; ++j) {
                    tile[k++] = m(tr * cfg.tile_rows + i, tc * cfg.tile_cols + j);
                }
            }
            TileQuant tq = quantize_tile(tile, cfg.mode, cfg.bits);
            q.alphas.push_back(tq.alpha);
            q.betas.push_back(tq.beta);
            all_codes.insert(all_codes.end(), tq.codes.begin(), tq.codes.end());
        }
    }
    q.packed = pack_codes(all_codes, cfg.bits);
    return q;
}

Matrix dequantize_matrix(const QuantizedMatrix & q) {
    const QuantConfig & cfg = q.config;
    std::vector<uint8_t> codes = unpack_codes(q.packed, cfg.bits, size_t(q.rows) * size_t(q.cols));
    Matrix out(q.rows, q.cols);
    size_t pos = 0;
    size_t t = 0;
    for (Index tr = 0; tr < q.tile_grid_rows(); ++tr) {
        for (Index tc = 0; tc < q.tile_grid_cols(); ++tc, ++t) {
            std::span<const uint8_t> tile_codes(codes.data() + pos, size_t(q.tile_elems()));
            std::vector<double> vals =
                dequantize_tile(tile_codes, q.alphas[t], q.betas[t], cfg.mode, cfg.bits);
            size_t k = 0;
            for (Index i = 0; i < cfg.tile_rows; ++i) {
                for (Index j = 0; j < cfg.tile_cols; ++j) {
                    out(tr * cfg.tile_rows + i, tc * cfg.tile_cols + j) = vals[k++];
                }
            }
            pos += size_t(q.tile_elems());
        }
    }
    return out;
}

std::vector<uint8_t> pack_codes(std::span<const uint8_t> codes, int bits) {
    if (!allowed_bits(bits)) {
        throw ParamError("pack_codes: bits must be one of {2,3,4,8}");
    }
    for (uint8_t c : codes) {
        if (c >= (1u << bits)) {
            throw DataError("pack_codes: code " + std::to_string(c) + " does not fit in " +
                            std::to_string(bits) + " bits");
        }
    }
    std::vector<uint8_t> bytes((codes.size() * size_t(bits) + 7) / 8, 0);
    size_t bitpos = 0;
    for (uint8_t c : codes) {
        size_t byte = bitpos >> 3;
        unsigned shift = unsigned(bitpos & 7);
        bytes[byte] |= uint8_t(c << shift);
        if (shift + unsigned(bits) > 8) {
            bytes[byte + 1] |= uint8_t(c >> (8 - shift));
        }
        bitpos += size_t(bits);
    }
    return bytes;
}

std::vector<uint8_t> unpack_codes(std::span<const uint8_t> bytes, int bits, size_t count) {
    if (!allowed_bits(bits)) {
        throw ParamError("unpack_codes: bits must be one of {2,3,4,8}");
    }
    if (bytes.size() < (count * size_t(bits) + 7) / 8) {
        throw DataError("unpack_codes: buffer too short for " + std::to_string(count) + " codes");
    }
    std::vector<uint8_t> codes(count);
    const unsigned mask = (1u << bits) - 1;
    size_t bitpos = 0;
    for (size_t i = 0; i < count; ++i) {
        size_t byte = bitpos >> 3;
        unsigned shift = unsigned(bitpos & 7);
        unsigned v = unsigned(bytes[byte]) >> shift;
        if (shift + unsigned(bits) > 8) {
            v |= unsigned(bytes[byte + 1]) << (8 - shift);
        }
        codes[i] = uint8_t(v & mask);
        bitpos += size_t(bits);
    }
    return codes;
}

QuantStats quantization_stats(const Matrix & m, const QuantizedMatrix & q) {
    if (m.rows() != q.rows || m.cols() != q.cols) {
        throw ShapeError("quantization_stats: matrix " + shape_str(m) + " vs quantized " +
                         std::to_string(q.rows) + "x" + std::to_string(q.cols));
    }
    Matrix deq = dequantize_matrix(q);
    QuantStats s;
    s.max_abs_err = (m - deq).cwiseAbs().maxCoeff();
    s.mse = (m - deq).squaredNorm() / double(m.size());
    s.bits_per_weight = double(q.config.bits) + 2.0 * 64.0 / double(q.tile_elems());
    return s;
}

}  // namespace qbara
