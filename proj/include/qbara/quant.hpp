#pragma once

#include "qbara/matrix.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace qbara {

// ---------------------------------------------------------------------------
// Tile-wise affine quantization: a weight matrix is cut into tile_rows x
// tile_cols rectangles and each tile is stored as a triplet (codes, alpha,
// beta) with w~ = alpha * code + beta.
//
//   MinMax: alpha = (max - min) / (2^N - 1), beta = min, codes in [0, 2^N-1].
//   AbsMax: beta = 0, alpha = absmax / (2^(N-1) - 1), signed codes in
//           [-(2^(N-1)-1), 2^(N-1)-1] stored offset-binary (code + 2^(N-1)-1).
//           The offset keeps storage at N bits; a literal 2^N-1 denominator
//           would need N+1 bits for signed codes.
//
// Rounding is round-half-to-even. A constant tile is stored exactly as
// alpha = 0, all codes 0, beta = value.
// ---------------------------------------------------------------------------

enum class QuantMode : uint8_t { MinMax = 0, AbsMax = 1 };

struct QuantConfig {
    int bits = 4;  // one of 2, 3, 4, 8
    Index tile_rows = 8;
    Index tile_cols = 8;
    QuantMode mode = QuantMode::MinMax;
};

void validate_config(const QuantConfig & cfg);

struct QuantizedMatrix {
    Index rows = 0;
    Index cols = 0;
    QuantConfig config;
    std::vector<uint8_t> packed;  // bit-packed codes, tile-major, row-major within tile
    std::vector<double> alphas;   // one per tile, tile-major
    std::vector<double> betas;

    Index tile_grid_rows() const { return rows / config.tile_rows; }
    Index tile_grid_cols() const { return cols / config.tile_cols; }
    Index tile_count() const { return tile_grid_rows() * tile_grid_cols(); }
    Index tile_elems() const { return config.tile_rows * config.tile_cols; }
};

struct TileQuant {
    std::vector<uint8_t> codes;  // unpacked, one per element
    double alpha = 0.0;
    double beta = 0.0;
};

TileQuant quantize_tile(std::span<const double> values, QuantMode mode, int bits);
std::vector<double> dequantize_tile(std::span<const uint8_t> codes, double alpha, double beta,
                                    QuantMode mode, int bits);

QuantizedMatrix quantize_matrix(const Matrix & m, const QuantConfig & cfg);
Matrix dequantize_matrix(const QuantizedMatrix & q);

// Bit packing, LSB-first within each byte; the final partial byte is
// zero-padded in its high bits. [1,2] at 4 bits packs to 0x21.
std::vector<uint8_t> pack_codes(std::span<const uint8_t> codes, int bits);
std::vector<uint8_t> unpack_codes(std::span<const uint8_t> bytes, int bits, size_t count);

struct QuantStats {
    double max_abs_err = 0.0;
    double mse = 0.0;
    double bits_per_weight = 0.0;  // N + 2*64 / tile_elems (per-tile alpha + beta)
};

QuantStats quantization_stats(const Matrix & m, const QuantizedMatrix & q);

}  // namespace qbara
