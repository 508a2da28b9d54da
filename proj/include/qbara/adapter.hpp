#pragma once

#include "qbara/matrix.hpp"
#include "qbara/quant.hpp"

namespace qbara {

// ---------------------------------------------------------------------------
// Three adapter families over a frozen quantized base layer:
//
//   LoRA:  y = x*W~ + s * (x*A)*B
//   BaRA:  y = x*W~ + s * expand(compress(x, l1) * A * B, l2)
//          with rank expanded so the trainable parameter count matches LoRA.
//   HiRA:  y = x*W~ + s * expand(compress(x, l1) * C, l2)
//          with (l1, l2) matched to the base quantization tile, so the whole
//          adapter folds into the per-tile beta at merge time.
//
// compress/expand are the non-parameterized scale operators; PoolRepeat
// (window mean / repeat each value) is the one with exact merge algebra, the
// other two exist for ablation and refuse to merge.
// ---------------------------------------------------------------------------

enum class ScaleOperatorKind : uint8_t { PoolRepeat = 0, TruncatePad = 1, StrideInterp = 2 };

struct LoraAdapter {
    Matrix a;        // d_in x r
    Matrix b;        // r x d_out
    double scaling = 1.0;
};

struct BaraAdapter {
    Index lambda_in = 1;   // input compression factor
    Index lambda_out = 1;  // output expansion factor
    Matrix a;              // d_in/lambda_in x r'
    Matrix b;              // r' x d_out/lambda_out
    double scaling = 1.0;
    ScaleOperatorKind op = ScaleOperatorKind::PoolRepeat;
};

struct HiraAdapter {
    Index lambda_in = 1;
    Index lambda_out = 1;
    Matrix c;              // d_in/lambda_in x d_out/lambda_out
    double scaling = 1.0;
    ScaleOperatorKind op = ScaleOperatorKind::PoolRepeat;
};

// batch x d -> batch x d/lambda
Matrix compress_features(const Matrix & x, Index lambda, ScaleOperatorKind kind);
// batch x d/lambda -> batch x d (d == lambda * y.cols())
Matrix expand_features(const Matrix & y, Index lambda, ScaleOperatorKind kind, Index d);

Matrix lora_forward(const Matrix & x, const Matrix & w_tilde, const LoraAdapter & a);
Matrix bara_forward(const Matrix & x, const Matrix & w_tilde, const BaraAdapter & a);
Matrix hira_forward(const Matrix & x, const Matrix & w_tilde, const HiraAdapter & a);

// Dense d_in x d_out equivalent of the BaRA adapter path, constant on every
// lambda_in x lambda_out tile. Excludes the scaling factor (merge applies it).
// PoolRepeat only.
Matrix bara_delta_weight(const BaraAdapter & a);

// dequantize(q) + scaling * bara_delta_weight(a)
Matrix merge_bara(const QuantizedMatrix & q, const BaraAdapter & a);

// Per-tile beta increment (scaling / lambda_in) * C. PoolRepeat only.
Matrix hira_delta_beta_grid(const HiraAdapter & a);

// Same codes and alphas, betas shifted by hira_delta_beta_grid. Requires the
// base tile shape to equal (lambda_in x lambda_out).
QuantizedMatrix merge_hira(const QuantizedMatrix & q, const HiraAdapter & a);

struct LoraGrads {
    Matrix a, b, x;
};
struct HiraGrads {
    Matrix c, x;
};

LoraGrads lora_backward(const Matrix & x, const Matrix & g_y, const Matrix & w_tilde,
                        const LoraAdapter & a);
LoraGrads bara_backward(const Matrix & x, const Matrix & g_y, const Matrix & w_tilde,
                        const BaraAdapter & a);
HiraGrads hira_backward(const Matrix & x, const Matrix & g_y, const Matrix & w_tilde,
                        const HiraAdapter & a);

long long lora_param_count(Index d_in, Index d_out, Index rank);
long long bara_param_count(Index d_in, Index d_out, Index lambda_in, Index lambda_out, Index rank);
long long hira_param_count(Index d_in, Index d_out, Index lambda_in, Index lambda_out);

// s = lora_alpha / effective rank: r for LoRA, r' for BaRA,
// min(d_in/l1, d_out/l2) for HiRA.
double lora_scaling(double lora_alpha, Index rank);
double hira_scaling(double lora_alpha, Index d_in, Index d_out, Index lambda_in, Index lambda_out);

// Constructors with geometry validation; matrices start zero.
LoraAdapter make_lora(Index d_in, Index d_out, Index rank, double lora_alpha);
BaraAdapter make_bara(Index d_in, Index d_out, Index lambda_in, Index lambda_out, Index rank,
                      double lora_alpha, ScaleOperatorKind op = ScaleOperatorKind::PoolRepeat);
HiraAdapter make_hira(Index d_in, Index d_out, Index lambda_in, Index lambda_out,
                      double lora_alpha, ScaleOperatorKind op = ScaleOperatorKind::PoolRepeat);

}  // namespace qbara
