#include "qbara/model.hpp"

namespace qbara {

Matrix apply_activation(const Matrix & z, Activation act) {
    switch (act) {
        case Activation::Identity: return z;
        case Activation::Relu:     return z.cwiseMax(0.0);
        case Activation::Tanh:     return z.array().tanh().matrix();
    }
    throw ParamError("apply_activation: unknown activation");
}

Matrix activation_grad(const Matrix & z, Activation act) {
    switch (act) {
        case Activation::Identity: return Matrix::Ones(z.rows(), z.cols());
        case Activation::Relu:     return (z.array() > 0.0).cast<double>().matrix();
        case Activation::Tanh:     return (1.0 - z.array().tanh().square()).matrix();
    }
    throw ParamError("activation_grad: unknown activation");
}

namespace {

void check_adapter_geometry(const QuantizedMatrix & base, const Adapter & adapter) {
    const Index d_in = base.rows;
    const Index d_out = base.cols;
    if (const auto * l = std::get_if<LoraAdapter>(&adapter)) {
        if (l->a.rows() != d_in || l->b.cols() != d_out || l->a.cols() != l->b.rows()) {
            throw ShapeError("layer: LoRA adapter does not match base " + std::to_string(d_in) +
                             "x" + std::to_string(d_out));
        }
    } else if (const auto * ba = std::get_if<BaraAdapter>(&adapter)) {
        if (d_in % ba->lambda_in != 0 || d_out % ba->lambda_out != 0 ||
            ba->a.rows() != d_in / ba->lambda_in || ba->b.cols() != d_out / ba->lambda_out ||
            ba->a.cols() != ba->b.rows()) {
            throw ShapeError("layer: BaRA adapter does not match base " + std::to_string(d_in) +
                             "x" + std::to_string(d_out));
        }
    } else if (const auto * h = std::get_if<HiraAdapter>(&adapter)) {
        if (d_in % h->lambda_in != 0 || d_out % h->lambda_out != 0 ||
            h->c.rows() != d_in / h->lambda_in || h->c.cols() != d_out / h->lambda_out) {
            throw ShapeError("layer: HiRA adapter does not match base " + std::to_string(d_in) +
                             "x" + std::to_string(d_out));
        }
    }
}

}  // namespace

QuantizedLinear make_layer(QuantizedMatrix base, Adapter adapter) {
    check_adapter_geometry(base, adapter);
    QuantizedLinear layer;
    layer.w_tilde = dequantize_matrix(base);
    layer.base = std::move(base);
    layer.adapter = std::move(adapter);
    return layer;
}

void validate_model(const Model & m) {
    if (m.layers.empty()) {
        throw ParamError("model: needs at least one layer");
    }
    if (m.widths.size() != m.layers.size() + 1) {
        throw ShapeError("model: widths list must have layer_count + 1 entries");
    }
    for (size_t i = 0; i < m.layers.size(); ++i) {
        if (m.layers[i].d_in() != m.widths[i] || m.layers[i].d_out() != m.widths[i + 1]) {
            throw ShapeError("model: layer " + std::to_string(i) + " is " +
                             std::to_string(m.layers[i].d_in()) + "x" +
                             std::to_string(m.layers[i].d_out()) + ", widths say " +
                             std::to_string(m.widths[i]) + "x" + std::to_string(m.widths[i + 1]));
        }
        check_adapter_geometry(m.layers[i].base, m.layers[i].adapter);
        if (m.layers[i].bias && (m.layers[i].bias->rows() != 1 ||
                                 m.layers[i].bias->cols() != m.layers[i].d_out())) {
            throw ShapeError("model: layer " + std::to_string(i) + " bias shape mismatch");
        }
    }
}

Matrix layer_forward(const QuantizedLinear & layer, const Matrix & x) {
    Matrix y;
    if (std::holds_alternative<std::monostate>(layer.adapter)) {
        y = matmul(x, layer.w_tilde);
    } else if (const auto * l = std::get_if<LoraAdapter>(&layer.adapter)) {
        y = lora_forward(x, layer.w_tilde, *l);
    } else if (const auto * b = std::get_if<BaraAdapter>(&layer.adapter)) {
        y = bara_forward(x, layer.w_tilde, *b);
    } else {
        y = hira_forward(x, layer.w_tilde, std::get<HiraAdapter>(layer.adapter));
    }
    if (layer.bias) {
        y.rowwise() += layer.bias->row(0);
    }
    return y;
}

Matrix model_forward(const Model & m, const Matrix & x) {
    Matrix cur = x;
    for (size_t i = 0; i < m.layers.size(); ++i) {
        cur = layer_forward(m.layers[i], cur);
        if (i + 1 < m.layers.size()) {
            cur = apply_activation(cur, m.activation);
        }
    }
    return cur;
}

ForwardTape model_forward_tape(const Model & m, const Matrix & x) {
    ForwardTape tape;
    tape.version = m.version;
    tape.inputs.reserve(m.layers.size());
    tape.preacts.reserve(m.layers.size());
    Matrix cur = x;
    for (size_t i = 0; i < m.layers.size(); ++i) {
        tape.inputs.push_back(cur);
        Matrix z = layer_forward(m.layers[i], cur);
        tape.preacts.push_back(z);
        cur = (i + 1 < m.layers.size()) ? apply_activation(z, m.activation) : z;
    }
    return tape;
}

std::vector<LayerGrads> model_backward(const Model & m, const ForwardTape & tape,
                                       const Matrix & g_output) {
    if (tape.version != m.version) {
        throw StateError("model_backward: tape is stale (model changed since forward)");
    }
    if (tape.inputs.size() != m.layers.size()) {
        throw StateError("model_backward: tape does not match model layer count");
    }
    if (g_output.rows() != tape.output().rows() || g_output.cols() != tape.output().cols()) {
        throw ShapeError("model_backward: g_output " + shape_str(g_output) + " vs output " +
                         shape_str(tape.output()));
    }

    std::vector<LayerGrads> grads(m.layers.size());
    Matrix g = g_output;
    for (size_t ri = m.layers.size(); ri-- > 0;) {
        const QuantizedLinear & layer = m.layers[ri];
        const Matrix & x = tape.inputs[ri];
        if (layer.bias && layer.bias_trainable) {
            grads[ri].bias = g.colwise().sum();
        }
        Matrix g_x;
        if (std::holds_alternative<std::monostate>(layer.adapter)) {
            g_x = g * layer.w_tilde.transpose();
        } else if (const auto * l = std::get_if<LoraAdapter>(&layer.adapter)) {
            LoraGrads lg = lora_backward(x, g, layer.w_tilde, *l);
            grads[ri].adapter = BaraGrads{std::move(lg.a), std::move(lg.b)};
            g_x = std::move(lg.x);
        } else if (const auto * b = std::get_if<BaraAdapter>(&layer.adapter)) {
            LoraGrads lg = bara_backward(x, g, layer.w_tilde, *b);
            grads[ri].adapter = BaraGrads{std::move(lg.a), std::move(lg.b)};
            g_x = std::move(lg.x);
        } else {
            HiraGrads hg = hira_backward(x, g, layer.w_tilde, std::get<HiraAdapter>(layer.adapter));
            grads[ri].adapter = HiraCGrads{std::move(hg.c)};
            g_x = std::move(hg.x);
        }
        if (ri > 0) {
            g = g_x.cwiseProduct(activation_grad(tape.preacts[ri - 1], m.activation));
        }
    }
    return grads;
}

std::vector<Matrix *> trainable_parameters(Model & m) {
    std::vector<Matrix *> params;
    for (QuantizedLinear & layer : m.layers) {
        if (auto * l = std::get_if<LoraAdapter>(&layer.adapter)) {
            params.push_back(&l->a);
            params.push_back(&l->b);
        } else if (auto * b = std::get_if<BaraAdapter>(&layer.adapter)) {
            params.push_back(&b->a);
            params.push_back(&b->b);
        } else if (auto * h = std::get_if<HiraAdapter>(&layer.adapter)) {
            params.push_back(&h->c);
        }
        if (layer.bias && layer.bias_trainable) {
            params.push_back(&*layer.bias);
        }
    }
    return params;
}

std::vector<Matrix> flatten_grads(const std::vector<LayerGrads> & grads) {
    std::vector<Matrix> flat;
    for (const LayerGrads & lg : grads) {
        if (const auto * b = std::get_if<BaraGrads>(&lg.adapter)) {
            flat.push_back(b->a);
            flat.push_back(b->b);
        } else if (const auto * h = std::get_if<HiraCGrads>(&lg.adapter)) {
            flat.push_back(h->c);
        }
        if (lg.bias) {
            flat.push_back(*lg.bias);
        }
    }
    return flat;
}

long long trainable_param_count(const Model & m) {
    long long n = 0;
    for (const QuantizedLinear & layer : m.layers) {
        if (const auto * l = std::get_if<LoraAdapter>(&layer.adapter)) {
            n += l->a.size() + l->b.size();
        } else if (const auto * b = std::get_if<BaraAdapter>(&layer.adapter)) {
            n += b->a.size() + b->b.size();
        } else if (const auto * h = std::get_if<HiraAdapter>(&layer.adapter)) {
            n += h->c.size();
        }
        if (layer.bias && layer.bias_trainable) {
            n += layer.bias->size();
        }
    }
    return n;
}

const char * adapter_kind_name(const Adapter & a) {
    if (std::holds_alternative<LoraAdapter>(a)) return "lora";
    if (std::holds_alternative<BaraAdapter>(a)) return "bara";
    if (std::holds_alternative<HiraAdapter>(a)) return "hira";
    return "none";
}

}  // namespace qbara
