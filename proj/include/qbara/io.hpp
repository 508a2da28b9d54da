#pragma once

#include "qbara/model.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace qbara {

// ---------------------------------------------------------------------------
// Binary formats. Every record starts with a 7-byte header: magic "QBRA",
// version u16 (= 1), record kind u8. All integers little-endian; matrices are
// f64 row-major; per-tile alpha/beta arrays are stored as f32 (the one place
// precision is dropped; everything in memory stays f64).
//
//   kind 1 (.qmz):  rows u32, cols u32, tile_rows u16, tile_cols u16,
//                   bits u8, mode u8, alphas f32[tiles], betas f32[tiles],
//                   packed codes (tile-major, LSB-first).
//   kind 2 (.adp):  adapter kind u8 (0 lora, 1 bara, 2 hira), lambda_in u16,
//                   lambda_out u16, rank u32, scaling f64, operator u8, then
//                   A and B (or C alone) as dims-prefixed f64 matrices.
//   kind 3 (.ckpt): layer count u32, widths u32[count+1], activation u8,
//                   then per layer a kind-1 record, a presence byte, and an
//                   optional kind-2 record.
//
// Raw matrix files (.bin) carry no header: rows u32, cols u32, f64 data.
// ---------------------------------------------------------------------------

inline constexpr uint16_t kFormatVersion = 1;

void save_quantized(const QuantizedMatrix & q, std::ostream & out);
QuantizedMatrix load_quantized(std::istream & in);

void save_adapter(const Adapter & a, std::ostream & out);
Adapter load_adapter(std::istream & in);

void save_checkpoint(const Model & m, std::ostream & out);
Model load_checkpoint(std::istream & in);

void save_raw_matrix(const Matrix & m, std::ostream & out);
Matrix load_raw_matrix(std::istream & in);

// Path convenience wrappers; loaders reject trailing bytes.
void save_quantized_file(const QuantizedMatrix & q, const std::string & path);
QuantizedMatrix load_quantized_file(const std::string & path);
void save_adapter_file(const Adapter & a, const std::string & path);
Adapter load_adapter_file(const std::string & path);
void save_checkpoint_file(const Model & m, const std::string & path);
Model load_checkpoint_file(const std::string & path);
void save_raw_matrix_file(const Matrix & m, const std::string & path);
Matrix load_raw_matrix_file(const std::string & path);

// CSV with a header row; doubles printed with 17 significant digits so the
// decimal text parses back to the exact binary value.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

std::string csv_double(double v);
std::string csv_int(long long v);
void write_csv(const CsvTable & table, std::ostream & out);
void write_csv_file(const CsvTable & table, const std::string & path);

}  // namespace qbara
