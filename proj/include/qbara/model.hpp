#pragma once

#include "qbara/adapter.hpp"
#include "qbara/matrix.hpp"
#include "qbara/quant.hpp"

#include <optional>
#include <variant>
#include <vector>

namespace qbara {

enum class Activation : uint8_t { Identity = 0, Relu = 1, Tanh = 2 };

Matrix apply_activation(const Matrix & z, Activation act);
// elementwise derivative evaluated at the pre-activation z
Matrix activation_grad(const Matrix & z, Activation act);

using Adapter = std::variant<std::monostate, LoraAdapter, BaraAdapter, HiraAdapter>;

// Frozen quantized weight plus an optional trainable adapter. The dense
// dequantized weight is cached once; the packed base never changes after
// construction.
struct QuantizedLinear {
    QuantizedMatrix base;
    Matrix w_tilde;  // dequantize_matrix(base), cached
    Adapter adapter;
    std::optional<Matrix> bias;  // 1 x d_out
    bool bias_trainable = false;

    Index d_in() const { return base.rows; }
    Index d_out() const { return base.cols; }
};

QuantizedLinear make_layer(QuantizedMatrix base, Adapter adapter = std::monostate{});

struct Model {
    std::vector<Index> widths;  // layer count + 1 entries
    Activation activation = Activation::Tanh;
    std::vector<QuantizedLinear> layers;
    uint64_t version = 0;  // bumped on every parameter mutation

    Index layer_count() const { return Index(layers.size()); }
};

void validate_model(const Model & m);

Matrix layer_forward(const QuantizedLinear & layer, const Matrix & x);

struct ForwardTape {
    std::vector<Matrix> inputs;   // input seen by each layer
    std::vector<Matrix> preacts;  // each layer's output before activation
    uint64_t version = 0;

    const Matrix & output() const { return preacts.back(); }
};

Matrix model_forward(const Model & m, const Matrix & x);
ForwardTape model_forward_tape(const Model & m, const Matrix & x);

struct BaraGrads {
    Matrix a, b;
};
struct HiraCGrads {
    Matrix c;
};
using AdapterGrads = std::variant<std::monostate, BaraGrads, HiraCGrads>;

struct LayerGrads {
    AdapterGrads adapter;          // BaraGrads covers LoRA too (same two factors)
    std::optional<Matrix> bias;    // present iff bias is trainable
};

// Gradients of the adapter (and flagged bias) parameters only; the quantized
// base receives none. Throws StateError if the tape predates a mutation.
std::vector<LayerGrads> model_backward(const Model & m, const ForwardTape & tape,
                                       const Matrix & g_output);

// Mutable views of every trainable matrix, layer by layer (A, B | C [, bias]).
// Order matches flatten_grads.
std::vector<Matrix *> trainable_parameters(Model & m);
std::vector<Matrix> flatten_grads(const std::vector<LayerGrads> & grads);

long long trainable_param_count(const Model & m);
const char * adapter_kind_name(const Adapter & a);

}  // namespace qbara
