#include "qbara/train.hpp"

#include <cmath>

namespace qbara {

void validate_config(const TrainConfig & cfg) {
    if (!(cfg.lr > 0.0)) {
        throw ParamError("train: lr must be > 0");
    }
    if (cfg.steps < 0) {
        throw ParamError("train: steps must be >= 0");
    }
    if (cfg.batch_size < 1) {
        throw ParamError("train: batch_size must be >= 1");
    }
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) ||
        !(cfg.eps > 0.0)) {
        throw ParamError("train: invalid adam constants");
    }
}

LossResult compute_loss(LossKind kind, const Matrix & pred, const Matrix & target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw ShapeError("compute_loss: pred " + shape_str(pred) + " vs target " +
                         shape_str(target));
    }
    LossResult r;
    if (kind == LossKind::Mse) {
        Matrix diff = pred - target;
        r.loss = diff.squaredNorm() / double(pred.size());
        r.g_pred = (2.0 / double(pred.size())) * diff;
        return r;
    }

    // cross entropy over one-hot rows, softmax shifted by the row max
    for (Index i = 0; i < target.rows(); ++i) {
        int ones = 0;
        for (Index j = 0; j < target.cols(); ++j) {
            double t = target(i, j);
            if (t == 1.0) {
                ++ones;
            } else if (t != 0.0) {
                throw DataError("compute_loss: cross_entropy target rows must be one-hot");
            }
        }
        if (ones != 1) {
            throw DataError("compute_loss: cross_entropy target rows must be one-hot");
        }
    }
    Matrix p(pred.rows(), pred.cols());
    double loss = 0.0;
    for (Index i = 0; i < pred.rows(); ++i) {
        double mx = pred.row(i).maxCoeff();
        Eigen::ArrayXd e = (pred.row(i).array() - mx).exp();
        double z = e.sum();
        p.row(i) = (e / z).matrix();
        for (Index j = 0; j < pred.cols(); ++j) {
            if (target(i, j) == 1.0) {
                loss -= std::log(p(i, j));
            }
        }
    }
    r.loss = loss / double(pred.rows());
    r.g_pred = (p - target) / double(pred.rows());
    return r;
}

void optimizer_step(OptimizerState & state, const std::vector<Matrix *> & params,
                    const std::vector<Matrix> & grads, const TrainConfig & cfg) {
    if (params.size() != grads.size()) {
        throw ShapeError("optimizer_step: " + std::to_string(params.size()) + " params vs " +
                         std::to_string(grads.size()) + " grads");
    }
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols()) {
            throw ShapeError("optimizer_step: param " + std::to_string(i) + " is " +
                             shape_str(*params[i]) + ", grad is " + shape_str(grads[i]));
        }
    }

    if (cfg.optimizer == OptimizerKind::Sgd) {
        for (size_t i = 0; i < params.size(); ++i) {
            *params[i] -= cfg.lr * grads[i];
        }
        return;
    }

    if (state.m.empty()) {
        state.m.reserve(params.size());
        state.v.reserve(params.size());
        for (const Matrix * p : params) {
            state.m.push_back(Matrix::Zero(p->rows(), p->cols()));
            state.v.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }
    if (state.m.size() != params.size()) {
        throw StateError("optimizer_step: state initialized for a different parameter set");
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i].cwiseProduct(grads[i]);
        Matrix mhat = state.m[i] / bc1;
        Matrix vhat = state.v[i] / bc2;
        params[i]->array() -= cfg.lr * mhat.array() / (vhat.array().sqrt() + cfg.eps);
    }
}

void init_adapter(Adapter & adapter, Rng & rng) {
    auto uniform_fan_in = [&rng](Matrix & m) {
        double bound = 1.0 / std::sqrt(double(m.rows()));
        m = rng_fill(rng, m.rows(), m.cols(), Dist::uniform(-bound, bound));
    };
    if (auto * l = std::get_if<LoraAdapter>(&adapter)) {
        uniform_fan_in(l->a);
        l->b.setZero();
    } else if (auto * b = std::get_if<BaraAdapter>(&adapter)) {
        uniform_fan_in(b->a);
        b->b.setZero();
    } else if (auto * h = std::get_if<HiraAdapter>(&adapter)) {
        h->c.setZero();
    }
}

Matrix dense_forward(const DenseMlp & mlp, const Matrix & x) {
    Matrix cur = x;
    for (size_t i = 0; i < mlp.weights.size(); ++i) {
        cur = matmul(cur, mlp.weights[i]);
        if (i + 1 < mlp.weights.size()) {
            cur = apply_activation(cur, mlp.activation);
        }
    }
    return cur;
}

namespace {

Matrix draw_inputs(const TaskSpec & spec, const Matrix & basis, Rng & rng, int n) {
    Matrix z = rng_fill(rng, n, spec.input_rank, Dist::normal(0.0, 1.0));
    return z * basis;
}

Matrix targets_for(const SyntheticTask & task, const Matrix & inputs) {
    Matrix out = dense_forward(task.teacher, inputs);
    if (task.spec.kind == TaskKind::TeacherStudent) {
        return out;
    }
    // classification: one-hot of the teacher's argmax
    Matrix onehot = Matrix::Zero(out.rows(), out.cols());
    for (Index i = 0; i < out.rows(); ++i) {
        Index best = 0;
        out.row(i).maxCoeff(&best);
        onehot(i, best) = 1.0;
    }
    return onehot;
}

}  // namespace

SyntheticTask make_task(const TaskSpec & spec) {
    if (spec.widths.size() < 2) {
        throw ParamError("make_task: need at least two widths");
    }
    if (spec.input_rank < 1 || spec.input_rank > spec.widths.front()) {
        throw ParamError("make_task: input_rank must be in [1, d_in]");
    }
    if (spec.train_samples < 1 || spec.eval_samples < 1) {
        throw ParamError("make_task: sample counts must be positive");
    }

    SyntheticTask task;
    task.spec = spec;
    Rng root(spec.seed);

    Rng teach_rng = root.split(0);
    task.teacher.activation = spec.activation;
    for (size_t i = 0; i + 1 < spec.widths.size(); ++i) {
        double scale = 1.0 / std::sqrt(double(spec.widths[i]));
        task.teacher.weights.push_back(
            rng_fill(teach_rng, spec.widths[i], spec.widths[i + 1], Dist::normal(0.0, scale)));
    }

    Rng basis_rng = root.split(1);
    double bscale = spec.input_scale / std::sqrt(double(spec.input_rank));
    task.input_basis =
        rng_fill(basis_rng, spec.input_rank, spec.widths.front(), Dist::normal(0.0, bscale));

    Rng train_rng = root.split(2);
    task.train_inputs = draw_inputs(spec, task.input_basis, train_rng, spec.train_samples);
    Rng eval_rng = root.split(3);
    task.eval_inputs = draw_inputs(spec, task.input_basis, eval_rng, spec.eval_samples);
    task.train_targets = targets_for(task, task.train_inputs);
    task.eval_targets = targets_for(task, task.eval_inputs);
    return task;
}

std::pair<Matrix, Matrix> sample_batch(const SyntheticTask & task, Rng & rng, int batch_size) {
    if (batch_size < 1) {
        throw ParamError("sample_batch: batch_size must be >= 1");
    }
    const Index pool = task.train_inputs.rows();
    Matrix x(batch_size, task.train_inputs.cols());
    Matrix t(batch_size, task.train_targets.cols());
    for (int i = 0; i < batch_size; ++i) {
        Index idx = Index(rng.next_u64() % uint64_t(pool));
        x.row(i) = task.train_inputs.row(idx);
        t.row(i) = task.train_targets.row(idx);
    }
    return {std::move(x), std::move(t)};
}

Model make_student(const DenseMlp & teacher, const QuantConfig & qcfg, const AdapterSpec & aspec,
                   double lora_alpha, Rng & init_rng) {
    Model m;
    m.activation = teacher.activation;
    for (const Matrix & w : teacher.weights) {
        m.widths.push_back(w.rows());
    }
    m.widths.push_back(teacher.weights.back().cols());

    for (const Matrix & w : teacher.weights) {
        Adapter adapter;
        switch (aspec.kind) {
            case AdapterKind::None:
                break;
            case AdapterKind::Lora:
                adapter = make_lora(w.rows(), w.cols(), aspec.rank, lora_alpha);
                break;
            case AdapterKind::Bara:
                adapter = make_bara(w.rows(), w.cols(), aspec.lambda_in, aspec.lambda_out,
                                    aspec.rank, lora_alpha, aspec.op);
                break;
            case AdapterKind::Hira:
                adapter = make_hira(w.rows(), w.cols(), aspec.lambda_in, aspec.lambda_out,
                                    lora_alpha, aspec.op);
                break;
        }
        init_adapter(adapter, init_rng);
        m.layers.push_back(make_layer(quantize_matrix(w, qcfg), std::move(adapter)));
    }
    validate_model(m);
    return m;
}

double evaluate(const Model & model, const SyntheticTask & task, LossKind loss) {
    Matrix pred = model_forward(model, task.eval_inputs);
    return compute_loss(loss, pred, task.eval_targets).loss;
}

TrainResult train_loop(Model & model, const SyntheticTask & task, const TrainConfig & cfg) {
    validate_config(cfg);
    if (model.widths.front() != task.train_inputs.cols()) {
        throw ShapeError("train_loop: model input width " + std::to_string(model.widths.front()) +
                         " vs task inputs " + std::to_string(task.train_inputs.cols()));
    }

    TrainResult result;
    result.initial_eval_loss = evaluate(model, task, cfg.loss);

    Rng batch_rng = Rng(cfg.seed).split(100);
    OptimizerState opt;
    std::vector<Matrix *> params = trainable_parameters(model);

    for (int step = 1; step <= cfg.steps; ++step) {
        auto [x, t] = sample_batch(task, batch_rng, cfg.batch_size);
        ForwardTape tape = model_forward_tape(model, x);
        LossResult lr = compute_loss(cfg.loss, tape.output(), t);
        if (!std::isfinite(lr.loss)) {
            throw NumericError("train_loop: loss became non-finite at step " +
                               std::to_string(step));
        }
        std::vector<Matrix> grads = flatten_grads(model_backward(model, tape, lr.g_pred));
        optimizer_step(opt, params, grads, cfg);
        model.version += 1;
        result.history.push_back({step, lr.loss, evaluate(model, task, cfg.loss)});
    }
    return result;
}

double finite_difference_check(Model & model, const Matrix & x, const Matrix & target,
                               LossKind loss, double eps) {
    if (!(eps > 0.0)) {
        throw ParamError("finite_difference_check: eps must be > 0");
    }
    ForwardTape tape = model_forward_tape(model, x);
    LossResult base = compute_loss(loss, tape.output(), target);
    std::vector<Matrix> analytic = flatten_grads(model_backward(model, tape, base.g_pred));
    std::vector<Matrix *> params = trainable_parameters(model);

    double worst = 0.0;
    for (size_t p = 0; p < params.size(); ++p) {
        Matrix & mat = *params[p];
        for (Index i = 0; i < mat.rows(); ++i) {
            for (Index j = 0; j < mat.cols(); ++j) {
                const double saved = mat(i, j);
                mat(i, j) = saved + eps;
                double lp = compute_loss(loss, model_forward(model, x), target).loss;
                mat(i, j) = saved - eps;
                double lm = compute_loss(loss, model_forward(model, x), target).loss;
                mat(i, j) = saved;
                double numeric = (lp - lm) / (2.0 * eps);
                double a = analytic[p](i, j);
                double rel = std::fabs(a - numeric) /
                             std::max({1.0, std::fabs(a), std::fabs(numeric)});
                worst = std::max(worst, rel);
            }
        }
    }
    return worst;
}

std::vector<SweepRecord> lambda_sweep(const SyntheticTask & task, const std::vector<Index> & lambdas,
                                      Index r_base, const TrainConfig & cfg,
                                      const QuantConfig & qcfg) {
    if (lambdas.empty()) {
        throw ParamError("lambda_sweep: need at least one lambda");
    }
    for (Index lambda : lambdas) {
        for (size_t i = 0; i + 1 < task.spec.widths.size(); ++i) {
            if (task.spec.widths[i] % lambda != 0 || task.spec.widths[i + 1] % lambda != 0) {
                throw ShapeError("lambda_sweep: lambda " + std::to_string(lambda) +
                                 " does not divide layer " + std::to_string(task.spec.widths[i]) +
                                 "x" + std::to_string(task.spec.widths[i + 1]));
            }
        }
    }

    std::vector<SweepRecord> records;
    for (Index lambda : lambdas) {
        AdapterSpec aspec;
        aspec.kind = AdapterKind::Bara;
        aspec.lambda_in = lambda;
        aspec.lambda_out = lambda;
        aspec.rank = lambda * r_base;
        Rng init_rng = Rng(cfg.seed).split(10);
        Model student = make_student(task.teacher, qcfg, aspec, cfg.lora_alpha, init_rng);
        TrainResult tr = train_loop(student, task, cfg);

        SweepRecord rec;
        rec.lambda = lambda;
        rec.rank = aspec.rank;
        rec.params = trainable_param_count(student);
        rec.final_eval_loss = tr.history.empty() ? tr.initial_eval_loss
                                                 : tr.history.back().eval_loss;
        records.push_back(rec);
    }
    return records;
}

std::vector<MagnitudeRow> magnitude_report(const Model & model, const Matrix & inputs) {
    if (inputs.cols() != model.widths.front()) {
        throw ShapeError("magnitude_report: inputs " + shape_str(inputs) + " vs model input width " +
                         std::to_string(model.widths.front()));
    }
    ForwardTape tape = model_forward_tape(model, inputs);
    std::vector<MagnitudeRow> rows;
    for (Index l = 0; l < model.layer_count(); ++l) {
        const Matrix & in = tape.inputs[size_t(l)];
        for (Index c = 0; c < in.cols(); ++c) {
            rows.push_back({l, "input", c, std::fabs(in.col(c).mean()),
                            in.col(c).cwiseAbs().maxCoeff()});
        }
        const Matrix & out = tape.preacts[size_t(l)];
        for (Index c = 0; c < out.cols(); ++c) {
            rows.push_back({l, "output", c, std::fabs(out.col(c).mean()),
                            out.col(c).cwiseAbs().maxCoeff()});
        }
        const Matrix & w = model.layers[size_t(l)].w_tilde;
        rows.push_back({l, "weight", -1, std::fabs(w.mean()), w.cwiseAbs().maxCoeff()});
    }
    return rows;
}

}  // namespace qbara
