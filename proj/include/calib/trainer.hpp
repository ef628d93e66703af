#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <vector>

#include "calib/datagen.hpp"
#include "calib/losses.hpp"
#include "calib/metrics.hpp"

namespace calib {

/// Fully connected rectifier network. weights[l] is fan_in x fan_out.
struct MlpModel {
    std::vector<std::size_t> layer_dims;
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;

    std::size_t input_dim() const { return layer_dims.front(); }
    std::size_t class_count() const { return layer_dims.back(); }
    bool all_finite() const;
    bool operator==(const MlpModel& other) const;
};

struct ParamGrads {
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;
};

/// U(-1, 1) / sqrt(fan_in) weights and zero biases, drawn from `seed`.
MlpModel init_model(std::span<const std::size_t> layer_dims, std::uint64_t seed);

LogitVector forward(const MlpModel& model, std::span<const double> features);

/// Parameter gradient of <dlogits, z(features)>.
ParamGrads backward(const MlpModel& model, std::span<const double> features,
                    std::span<const double> dlogits);

/// Row-wise logits for a batch (rows of `features` are samples).
Eigen::MatrixXd forward_batch(const MlpModel& model, const Eigen::MatrixXd& features);

struct TrainConfig {
    MethodSpec method = method::CrossEntropy{};
    int epochs = 100;
    std::size_t batch_size = 64;
    double learning_rate = 0.1;
    std::vector<int> lr_decay_epochs;  ///< lr is multiplied by the factor after each listed epoch
    double lr_decay_factor = 0.1;
    std::uint64_t seed = 0;
    double weight_decay = 0.0;
    std::vector<std::size_t> hidden = {64, 64};
    std::size_t bin_count = kDefaultBinCount;
};

void validate(const TrainConfig& config);

/// Per-sample count of epochs in which the sample was classified correctly.
struct CorrectnessHistory {
    std::vector<std::uint32_t> counts;
    std::uint32_t epochs_seen = 0;

    static CorrectnessHistory fresh(std::size_t n) { return {std::vector<std::uint32_t>(n, 0), 0}; }
};

CorrectnessHistory update_history(const CorrectnessHistory& history,
                                  std::span<const ClassIndex> predictions,
                                  std::span<const ClassIndex> labels);

struct RunResult {
    CalibrationReport val;
    CalibrationReport test;
    std::vector<double> train_loss;  ///< per epoch, mean over training samples
    bool loss_partial = false;       ///< true when train_loss holds only the CE part
    std::vector<double> val_ece;     ///< per epoch
    std::vector<double> reg_inactive_fraction;  ///< per epoch: share with zero regularizer gradient
    std::size_t prediction_flip_count = 0;      ///< final epoch argmax changes across one step
    std::vector<double> final_activity;         ///< last-epoch regularizer activity per training sample
    MlpModel model;
    std::vector<LogitVector> val_logits;
    std::vector<LogitVector> test_logits;
};

/// Regularizer activity scalar: forward L_REG where one exists, otherwise
/// the L1 norm of the regularizer gradient.
double regularizer_activity(const LossEvaluation& eval);

/// Minibatch SGD on the dataset's train split; reports on val and test.
/// Throws TrainingDiverged when parameters become non-finite.
RunResult train(const TrainConfig& config, const Dataset& dataset);

}  // namespace calib
