#include "qbara/adapter.hpp"

#include <algorithm>

namespace qbara {

namespace {

void check_lambda(Index d, Index lambda, const char * what) {
    if (lambda < 1) {
        throw ParamError(std::string(what) + ": lambda must be >= 1, got " + std::to_string(lambda));
    }
    if (d % lambda != 0) {
        throw ShapeError(std::string(what) + ": width " + std::to_string(d) +
                         " not divisible by lambda " + std::to_string(lambda));
    }
}

// Adjoint of expand_features: maps batch x d gradients back to batch x d/lambda.
Matrix expand_adjoint(const Matrix & g, Index lambda, ScaleOperatorKind kind) {
    const Index dc = g.cols() / lambda;
    switch (kind) {
        case ScaleOperatorKind::PoolRepeat:
            return segment_sum_cols(g, lambda);
        case ScaleOperatorKind::TruncatePad:
            return g.leftCols(dc);
        case ScaleOperatorKind::StrideInterp: {
            Matrix out(g.rows(), dc);
            for (Index j = 0; j < dc; ++j) {
                out.col(j) = g.col(j * lambda);
            }
            return out;
        }
    }
    throw ParamError("expand_adjoint: unknown operator");
}

// Adjoint of compress_features: maps batch x d/lambda gradients back to batch x d.
Matrix compress_adjoint(const Matrix & g, Index lambda, ScaleOperatorKind kind, Index d) {
    switch (kind) {
        case ScaleOperatorKind::PoolRepeat:
            return expand_features(g, lambda, ScaleOperatorKind::PoolRepeat, d) / double(lambda);
        case ScaleOperatorKind::TruncatePad: {
            Matrix out = Matrix::Zero(g.rows(), d);
            out.leftCols(g.cols()) = g;
            return out;
        }
        case ScaleOperatorKind::StrideInterp: {
            Matrix out = Matrix::Zero(g.rows(), d);
            for (Index j = 0; j < g.cols(); ++j) {
                out.col(j * lambda) = g.col(j);
            }
            return out;
        }
    }
    throw ParamError("compress_adjoint: unknown operator");
}

void check_forward_shapes(const Matrix & x, const Matrix & w_tilde, const char * what) {
    if (x.cols() != w_tilde.rows()) {
        throw ShapeError(std::string(what) + ": input " + shape_str(x) + " vs weight " +
                         shape_str(w_tilde));
    }
}

}  // namespace

Matrix compress_features(const Matrix & x, Index lambda, ScaleOperatorKind kind) {
    check_lambda(x.cols(), lambda, "compress_features");
    const Index dc = x.cols() / lambda;
    switch (kind) {
        case ScaleOperatorKind::PoolRepeat:
            return segment_sum_cols(x, lambda) / double(lambda);
        case ScaleOperatorKind::TruncatePad:
            return x.leftCols(dc);
        case ScaleOperatorKind::StrideInterp: {
            Matrix out(x.rows(), dc);
            for (Index j = 0; j < dc; ++j) {
                out.col(j) = x.col(j * lambda);
            }
            return out;
        }
    }
    throw ParamError("compress_features: unknown operator");
}

Matrix expand_features(const Matrix & y, Index lambda, ScaleOperatorKind kind, Index d) {
    if (lambda < 1 || d != lambda * y.cols()) {
        throw ShapeError("expand_features: target width " + std::to_string(d) +
                         " != lambda " + std::to_string(lambda) + " * cols " +
                         std::to_string(y.cols()));
    }
    switch (kind) {
        case ScaleOperatorKind::PoolRepeat: {
            Matrix out(y.rows(), d);
            for (Index j = 0; j < y.cols(); ++j) {
                for (Index k = 0; k < lambda; ++k) {
                    out.col(j * lambda + k) = y.col(j);
                }
            }
            return out;
        }
        case ScaleOperatorKind::TruncatePad: {
            Matrix out = Matrix::Zero(y.rows(), d);
            out.leftCols(y.cols()) = y;
            return out;
        }
        case ScaleOperatorKind::StrideInterp: {
            Matrix out = Matrix::Zero(y.rows(), d);
            for (Index j = 0; j < y.cols(); ++j) {
                out.col(j * lambda) = y.col(j);
            }
            return out;
        }
    }
    throw ParamError("expand_features: unknown operator");
}

Matrix lora_forward(const Matrix & x, const Matrix & w_tilde, const LoraAdapter & a) {
    check_forward_shapes(x, w_tilde, "lora_forward");
    if (a.a.rows() != w_tilde.rows() || a.b.cols() != w_tilde.cols() || a.a.cols() != a.b.rows()) {
        throw ShapeError("lora_forward: adapter A " + shape_str(a.a) + ", B " + shape_str(a.b) +
                         " vs weight " + shape_str(w_tilde));
    }
    return x * w_tilde + a.scaling * ((x * a.a) * a.b);
}

Matrix bara_forward(const Matrix & x, const Matrix & w_tilde, const BaraAdapter & a) {
    check_forward_shapes(x, w_tilde, "bara_forward");
    check_lambda(w_tilde.rows(), a.lambda_in, "bara_forward");
    check_lambda(w_tilde.cols(), a.lambda_out, "bara_forward");
    if (a.a.rows() != w_tilde.rows() / a.lambda_in || a.b.cols() != w_tilde.cols() / a.lambda_out ||
        a.a.cols() != a.b.rows()) {
        throw ShapeError("bara_forward: adapter A " + shape_str(a.a) + ", B " + shape_str(a.b) +
                         " inconsistent with weight " + shape_str(w_tilde));
    }
    Matrix pooled = compress_features(x, a.lambda_in, a.op);
    Matrix side = (pooled * a.a) * a.b;
    return x * w_tilde + a.scaling * expand_features(side, a.lambda_out, a.op, w_tilde.cols());
}

Matrix hira_forward(const Matrix & x, const Matrix & w_tilde, const HiraAdapter & a) {
    check_forward_shapes(x, w_tilde, "hira_forward");
    check_lambda(w_tilde.rows(), a.lambda_in, "hira_forward");
    check_lambda(w_tilde.cols(), a.lambda_out, "hira_forward");
    if (a.c.rows() != w_tilde.rows() / a.lambda_in || a.c.cols() != w_tilde.cols() / a.lambda_out) {
        throw ShapeError("hira_forward: adapter C " + shape_str(a.c) + " inconsistent with weight " +
                         shape_str(w_tilde));
    }
    Matrix pooled = compress_features(x, a.lambda_in, a.op);
    return x * w_tilde + a.scaling * expand_features(pooled * a.c, a.lambda_out, a.op, w_tilde.cols());
}

Matrix bara_delta_weight(const BaraAdapter & a) {
    if (a.op != ScaleOperatorKind::PoolRepeat) {
        throw CapabilityError("bara_delta_weight: dense equivalence only defined for PoolRepeat");
    }
    Matrix ab = a.a * a.b;
    Matrix out(ab.rows() * a.lambda_in, ab.cols() * a.lambda_out);
    for (Index i = 0; i < ab.rows(); ++i) {
        for (Index j = 0; j < ab.cols(); ++j) {
            // same double replicated over the whole tile: block-constancy is exact
            out.block(i * a.lambda_in, j * a.lambda_out, a.lambda_in, a.lambda_out)
                .setConstant(ab(i, j) / double(a.lambda_in));
        }
    }
    return out;
}

Matrix merge_bara(const QuantizedMatrix & q, const BaraAdapter & a) {
    Matrix delta = bara_delta_weight(a);
    if (delta.rows() != q.rows || delta.cols() != q.cols) {
        throw ShapeError("merge_bara: adapter delta " + shape_str(delta) + " vs base " +
                         std::to_string(q.rows) + "x" + std::to_string(q.cols));
    }
    return dequantize_matrix(q) + a.scaling * delta;
}

Matrix hira_delta_beta_grid(const HiraAdapter & a) {
    if (a.op != ScaleOperatorKind::PoolRepeat) {
        throw CapabilityError("hira_delta_beta_grid: beta merge only defined for PoolRepeat");
    }
    return (a.scaling / double(a.lambda_in)) * a.c;
}

QuantizedMatrix merge_hira(const QuantizedMatrix & q, const HiraAdapter & a) {
    if (q.config.tile_rows != a.lambda_in || q.config.tile_cols != a.lambda_out) {
        throw CapabilityError("merge_hira: base tile " + std::to_string(q.config.tile_rows) + "x" +
                              std::to_string(q.config.tile_cols) + " must equal lambda " +
                              std::to_string(a.lambda_in) + "x" + std::to_string(a.lambda_out));
    }
    Matrix grid = hira_delta_beta_grid(a);
    if (grid.rows() != q.tile_grid_rows() || grid.cols() != q.tile_grid_cols()) {
        throw ShapeError("merge_hira: beta grid " + shape_str(grid) + " vs tile grid " +
                         std::to_string(q.tile_grid_rows()) + "x" +
                         std::to_string(q.tile_grid_cols()));
    }
    QuantizedMatrix out = q;  // codes and alphas untouched
    size_t t = 0;
    for (Index i = 0; i < grid.rows(); ++i) {
        for (Index j = 0; j < grid.cols(); ++j, ++t) {
            out.betas[t] += grid(i, j);
        }
    }
    return out;
}

LoraGrads lora_backward(const Matrix & x, const Matrix & g_y, const Matrix & w_tilde,
                        const LoraAdapter & a) {
    if (g_y.rows() != x.rows() || g_y.cols() != w_tilde.cols()) {
        throw ShapeError("lora_backward: g_y " + shape_str(g_y) + " vs output " +
                         std::to_string(x.rows()) + "x" + std::to_string(w_tilde.cols()));
    }
    LoraGrads g;
    Matrix xa = x * a.a;
    g.b = a.scaling * (xa.transpose() * g_y);
    Matrix g_xa = a.scaling * (g_y * a.b.transpose());
    g.a = x.transpose() * g_xa;
    g.x = g_y * w_tilde.transpose() + g_xa * a.a.transpose();
    return g;
}

LoraGrads bara_backward(const Matrix & x, const Matrix & g_y, const Matrix & w_tilde,
                        const BaraAdapter & a) {
    if (g_y.rows() != x.rows() || g_y.cols() != w_tilde.cols()) {
        throw ShapeError("bara_backward: g_y " + shape_str(g_y) + " vs output " +
                         std::to_string(x.rows()) + "x" + std::to_string(w_tilde.cols()));
    }
    Matrix pooled = compress_features(x, a.lambda_in, a.op);
    Matrix g_side = a.scaling * expand_adjoint(g_y, a.lambda_out, a.op);
    LoraGrads g;
    Matrix pa = pooled * a.a;
    g.b = pa.transpose() * g_side;
    Matrix g_pa = g_side * a.b.transpose();
    g.a = pooled.transpose() * g_pa;
    Matrix g_pooled = g_pa * a.a.transpose();
    g.x = g_y * w_tilde.transpose() + compress_adjoint(g_pooled, a.lambda_in, a.op, x.cols());
    return g;
}

HiraGrads hira_backward(const Matrix & x, const Matrix & g_y, const Matrix & w_tilde,
                        const HiraAdapter & a) {
    if (g_y.rows() != x.rows() || g_y.cols() != w_tilde.cols()) {
        throw ShapeError("hira_backward: g_y " + shape_str(g_y) + " vs output " +
                         std::to_string(x.rows()) + "x" + std::to_string(w_tilde.cols()));
    }
    Matrix pooled = compress_features(x, a.lambda_in, a.op);
    Matrix g_side = a.scaling * expand_adjoint(g_y, a.lambda_out, a.op);
    HiraGrads g;
    g.c = pooled.transpose() * g_side;
    Matrix g_pooled = g_side * a.c.transpose();
    g.x = g_y * w_tilde.transpose() + compress_adjoint(g_pooled, a.lambda_in, a.op, x.cols());
    return g;
}

long long lora_param_count(Index d_in, Index d_out, Index rank) {
    if (rank < 1 || d_in < 1 || d_out < 1) {
        throw ParamError("lora_param_count: dimensions and rank must be positive");
    }
    return (long long)(rank) * (d_in + d_out);
}

long long bara_param_count(Index d_in, Index d_out, Index lambda_in, Index lambda_out, Index rank) {
    check_lambda(d_in, lambda_in, "bara_param_count");
    check_lambda(d_out, lambda_out, "bara_param_count");
    if (rank < 1) {
        throw ParamError("bara_param_count: rank must be positive");
    }
    return (long long)(d_in / lambda_in) * rank + (long long)(rank) * (d_out / lambda_out);
}

long long hira_param_count(Index d_in, Index d_out, Index lambda_in, Index lambda_out) {
    check_lambda(d_in, lambda_in, "hira_param_count");
    check_lambda(d_out, lambda_out, "hira_param_count");
    return (long long)(d_in / lambda_in) * (d_out / lambda_out);
}

double lora_scaling(double lora_alpha, Index rank) {
    if (rank < 1) {
        throw ParamError("lora_scaling: rank must be positive");
    }
    return lora_alpha / double(rank);
}

double hira_scaling(double lora_alpha, Index d_in, Index d_out, Index lambda_in, Index lambda_out) {
    Index eff = std::min(d_in / lambda_in, d_out / lambda_out);
    if (eff < 1) {
        throw ParamError("hira_scaling: effective rank must be positive");
    }
    return lora_alpha / double(eff);
}

LoraAdapter make_lora(Index d_in, Index d_out, Index rank, double lora_alpha) {
    if (rank < 1) {
        throw ParamError("make_lora: rank must be >= 1");
    }
    LoraAdapter a;
    a.a = Matrix::Zero(d_in, rank);
    a.b = Matrix::Zero(rank, d_out);
    a.scaling = lora_scaling(lora_alpha, rank);
    return a;
}

BaraAdapter make_bara(Index d_in, Index d_out, Index lambda_in, Index lambda_out, Index rank,
                      double lora_alpha, ScaleOperatorKind op) {
    check_lambda(d_in, lambda_in, "make_bara");
    check_lambda(d_out, lambda_out, "make_bara");
    if (rank < 1) {
        throw ParamError("make_bara: rank must be >= 1");
    }
    BaraAdapter a;
    a.lambda_in = lambda_in;
    a.lambda_out = lambda_out;
    a.a = Matrix::Zero(d_in / lambda_in, rank);
    a.b = Matrix::Zero(rank, d_out / lambda_out);
    a.scaling = lora_scaling(lora_alpha, rank);
    a.op = op;
    return a;
}

HiraAdapter make_hira(Index d_in, Index d_out, Index lambda_in, Index lambda_out,
                      double lora_alpha, ScaleOperatorKind op) {
    check_lambda(d_in, lambda_in, "make_hira");
    check_lambda(d_out, lambda_out, "make_hira");
    HiraAdapter a;
    a.lambda_in = lambda_in;
    a.lambda_out = lambda_out;
    a.c = Matrix::Zero(d_in / lambda_in, d_out / lambda_out);
    a.scaling = hira_scaling(lora_alpha, d_in, d_out, lambda_in, lambda_out);
    a.op = op;
    return a;
}

}  // namespace qbara
