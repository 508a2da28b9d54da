#pragma once

#include "qbara/model.hpp"

#include <string>
#include <vector>

namespace qbara {

enum class OptimizerKind : uint8_t { Sgd = 0, Adam = 1 };
enum class LossKind : uint8_t { Mse = 0, CrossEntropy = 1 };

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::Adam;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int steps = 500;
    int batch_size = 32;
    uint64_t seed = 7;
    LossKind loss = LossKind::Mse;
    double lora_alpha = 16.0;
};

void validate_config(const TrainConfig & cfg);

// loss and its exact gradient w.r.t. pred. Mse averages over all elements;
// CrossEntropy expects one-hot target rows, runs pred through a shifted
// softmax, and averages over rows.
struct LossResult {
    double loss = 0.0;
    Matrix g_pred;
};
LossResult compute_loss(LossKind kind, const Matrix & pred, const Matrix & target);

struct OptimizerState {
    long long t = 0;
    std::vector<Matrix> m;  // first moments (Adam)
    std::vector<Matrix> v;  // second moments (Adam)
};

void optimizer_step(OptimizerState & state, const std::vector<Matrix *> & params,
                    const std::vector<Matrix> & grads, const TrainConfig & cfg);

// LoRA/BaRA: A ~ uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), B = 0.
// HiRA: C = 0. Either way the adapter path is exactly zero after init.
void init_adapter(Adapter & adapter, Rng & rng);

// ---------------------------------------------------------------------------
// Synthetic tasks. The teacher is a full-precision MLP; the student is its
// block-quantized copy plus adapters, trained to match the teacher's outputs.
// Inputs are drawn from a low-rank Gaussian (z * basis with z of dimension
// input_rank): layer activations in large models are highly redundant, and a
// full-rank white input would make most of the quantization error invisible
// to any structured adapter. Train and eval pools are disjoint fixed draws.
// ---------------------------------------------------------------------------

struct DenseMlp {
    std::vector<Matrix> weights;
    Activation activation = Activation::Tanh;
};
Matrix dense_forward(const DenseMlp & mlp, const Matrix & x);

enum class TaskKind : uint8_t { TeacherStudent = 0, Classification = 1 };

struct TaskSpec {
    TaskKind kind = TaskKind::TeacherStudent;
    std::vector<Index> widths = {64, 64, 32};
    Activation activation = Activation::Tanh;
    Index input_rank = 8;       // intrinsic dimensionality of the inputs
    double input_scale = 0.5;   // per-feature std of the inputs
    int train_samples = 2048;
    int eval_samples = 256;
    uint64_t seed = 7;
};

struct SyntheticTask {
    TaskSpec spec;
    DenseMlp teacher;
    Matrix input_basis;  // input_rank x d_in
    Matrix train_inputs, train_targets;
    Matrix eval_inputs, eval_targets;
};

SyntheticTask make_task(const TaskSpec & spec);
// Draw a batch (inputs, targets) from the train pool.
std::pair<Matrix, Matrix> sample_batch(const SyntheticTask & task, Rng & rng, int batch_size);

enum class AdapterKind : uint8_t { None = 0, Lora = 1, Bara = 2, Hira = 3 };

struct AdapterSpec {
    AdapterKind kind = AdapterKind::Bara;
    Index lambda_in = 2;
    Index lambda_out = 2;
    Index rank = 8;  // r for LoRA, r' for BaRA
    ScaleOperatorKind op = ScaleOperatorKind::PoolRepeat;
};

// Quantize the teacher's weights layer by layer and attach freshly
// initialized adapters.
Model make_student(const DenseMlp & teacher, const QuantConfig & qcfg, const AdapterSpec & aspec,
                   double lora_alpha, Rng & init_rng);

struct TrainRecord {
    int step = 0;
    double train_loss = 0.0;
    double eval_loss = 0.0;
};

struct TrainResult {
    std::vector<TrainRecord> history;  // one record per step
    double initial_eval_loss = 0.0;    // eval loss before the first step
};

TrainResult train_loop(Model & model, const SyntheticTask & task, const TrainConfig & cfg);

double evaluate(const Model & model, const SyntheticTask & task, LossKind loss);

// Central finite differences over every trainable parameter vs
// model_backward; returns the worst relative error (unit floor in the
// denominator so near-zero gradients compare absolutely).
double finite_difference_check(Model & model, const Matrix & x, const Matrix & target,
                               LossKind loss, double eps);

struct SweepRecord {
    Index lambda = 1;
    Index rank = 1;          // expanded rank r' = lambda * r_base
    long long params = 0;    // total trainable parameters (constant across the sweep)
    double final_eval_loss = 0.0;
};

// Fig-style balancing-factor sweep: same task, same step budget, BaRA with
// r' = lambda * r_base so every row trains the same parameter count.
std::vector<SweepRecord> lambda_sweep(const SyntheticTask & task, const std::vector<Index> & lambdas,
                                      Index r_base, const TrainConfig & cfg,
                                      const QuantConfig & qcfg);

struct MagnitudeRow {
    Index layer = 0;
    std::string tensor;  // "input" | "output" | "weight"
    Index channel = -1;  // -1 for whole-tensor rows
    double abs_mean = 0.0;
    double max_abs = 0.0;
};

std::vector<MagnitudeRow> magnitude_report(const Model & model, const Matrix & inputs);

}  // namespace qbara
