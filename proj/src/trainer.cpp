#include "calib/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "calib/error.hpp"
#include "calib/rng.hpp"

namespace calib {
namespace {

struct Activations {
    std::vector<Eigen::MatrixXd> inputs;  // input to each layer, batch x fan_in
    Eigen::MatrixXd logits;
};

Activations forward_cached(const MlpModel& model, const Eigen::MatrixXd& x) {
    Activations act;
    Eigen::MatrixXd h = x;
    const std::size_t layers = model.weights.size();
    for (std::size_t l = 0; l < layers; ++l) {
        act.inputs.push_back(h);
        Eigen::MatrixXd a = h * model.weights[l];
        a.rowwise() += model.biases[l].transpose();
        if (l + 1 < layers) a = a.cwiseMax(0.0);
        h = std::move(a);
    }
    act.logits = std::move(h);
    return act;
}

ParamGrads backward_cached(const MlpModel& model, const Activations& act, Eigen::MatrixXd delta) {
    const std::size_t layers = model.weights.size();
    ParamGrads g;
    g.weights.resize(layers);
    g.biases.resize(layers);
    for (std::size_t l = layers; l-- > 0;) {
        g.weights[l] = act.inputs[l].transpose() * delta;
        g.biases[l] = delta.colwise().sum().transpose();
        if (l > 0) {
            Eigen::MatrixXd up = delta * model.weights[l].transpose();
            // inputs[l] is the rectified output of layer l-1.
            delta = (act.inputs[l].array() > 0.0).select(up, 0.0);
        }
    }
    return g;
}

Eigen::MatrixXd as_row(const MlpModel& model, std::span<const double> features) {
    if (features.size() != model.input_dim()) throw InvalidInput("feature width mismatch");
    Eigen::MatrixXd x(1, static_cast<Eigen::Index>(features.size()));
    for (std::size_t k = 0; k < features.size(); ++k) x(0, static_cast<Eigen::Index>(k)) = features[k];
    return x;
}

Eigen::MatrixXd gather(const Dataset& d, std::span<const std::size_t> idx) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(d.dim));
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const auto row = d.row(idx[r]);
        for (std::size_t k = 0; k < d.dim; ++k) {
            x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = row[k];
        }
    }
    return x;
}

LogitVector row_logits(const Eigen::MatrixXd& z, Eigen::Index r) {
    std::vector<double> v(static_cast<std::size_t>(z.cols()));
    for (Eigen::Index c = 0; c < z.cols(); ++c) v[static_cast<std::size_t>(c)] = z(r, c);
    return LogitVector(std::move(v));
}

ClassIndex row_argmax(const Eigen::MatrixXd& z, Eigen::Index r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < z.cols(); ++c) {
        if (z(r, c) > z(r, best)) best = c;
    }
    return static_cast<ClassIndex>(best);
}

std::vector<LogitVector> all_logits(const MlpModel& model, const Dataset& d,
                                    std::span<const std::size_t> idx) {
    const Eigen::MatrixXd z = forward_batch(model, gather(d, idx));
    std::vector<LogitVector> out;
    out.reserve(idx.size());
    for (Eigen::Index r = 0; r < z.rows(); ++r) out.push_back(row_logits(z, r));
    return out;
}

PredictionSet predictions_for(std::span<const LogitVector> logits, const Dataset& d,
                              std::span<const std::size_t> idx) {
    std::vector<ClassIndex> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) labels.push_back(d.labels[i]);
    return PredictionSet::from_logits(logits, labels);
}

}  // namespace

bool MlpModel::all_finite() const {
    for (const auto& w : weights) {
        if (!w.allFinite()) return false;
    }
    for (const auto& b : biases) {
        if (!b.allFinite()) return false;
    }
    return true;
}

bool MlpModel::operator==(const MlpModel& other) const {
    if (layer_dims != other.layer_dims) return false;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        if (weights[l] != other.weights[l] || biases[l] != other.biases[l]) return false;
    }
    return true;
}

MlpModel init_model(std::span<const std::size_t> layer_dims, std::uint64_t seed) {
    if (layer_dims.size() < 2) throw InvalidInput("init_model: need at least one layer");
    for (std::size_t d : layer_dims) {
        if (d == 0) throw InvalidInput("init_model: dimensions must be positive");
    }
    if (layer_dims.back() < 2) throw InvalidInput("init_model: at least two output classes required");
    MlpModel m;
    m.layer_dims.assign(layer_dims.begin(), layer_dims.end());
    Rng rng(derive_seed(seed, 3));
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
        const auto fan_in = static_cast<Eigen::Index>(layer_dims[l]);
        const auto fan_out = static_cast<Eigen::Index>(layer_dims[l + 1]);
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Eigen::MatrixXd w(fan_in, fan_out);
        for (Eigen::Index i = 0; i < fan_in; ++i) {
            for (Eigen::Index j = 0; j < fan_out; ++j) w(i, j) = scale * rng.uniform(-1.0, 1.0);
        }
        m.weights.push_back(std::move(w));
        m.biases.push_back(Eigen::VectorXd::Zero(fan_out));
    }
    return m;
}

Eigen::MatrixXd forward_batch(const MlpModel& model, const Eigen::MatrixXd& features) {
    if (static_cast<std::size_t>(features.cols()) != model.input_dim()) {
        throw InvalidInput("feature width mismatch");
    }
    return forward_cached(model, features).logits;
}

LogitVector forward(const MlpModel& model, std::span<const double> features) {
    return row_logits(forward_batch(model, as_row(model, features)), 0);
}

ParamGrads backward(const MlpModel& model, std::span<const double> features,
                    std::span<const double> dlogits) {
    if (dlogits.size() != model.class_count()) throw InvalidInput("logit gradient width mismatch");
    Eigen::MatrixXd delta(1, static_cast<Eigen::Index>(dlogits.size()));
    for (std::size_t j = 0; j < dlogits.size(); ++j) {
        if (!std::isfinite(dlogits[j])) throw InvalidInput("non-finite logit gradient");
        delta(0, static_cast<Eigen::Index>(j)) = dlogits[j];
    }
    return backward_cached(model, forward_cached(model, as_row(model, features)), std::move(delta));
}

void validate(const TrainConfig& config) {
    validate(config.method);
    if (config.epochs < 1) throw InvalidInput("epochs must be at least 1");
    if (config.batch_size < 1) throw InvalidInput("batch_size must be at least 1");
    if (!(config.learning_rate >= 0.0)) throw InvalidInput("learning_rate must be non-negative");
    if (!(config.weight_decay >= 0.0)) throw InvalidInput("weight_decay must be non-negative");
    if (!(config.lr_decay_factor > 0.0)) throw InvalidInput("lr_decay_factor must be positive");
    for (std::size_t k = 1; k < config.lr_decay_epochs.size(); ++k) {
        if (config.lr_decay_epochs[k] <= config.lr_decay_epochs[k - 1]) {
            throw InvalidInput("lr_decay_epochs must be strictly increasing");
        }
    }
    for (std::size_t h : config.hidden) {
        if (h == 0) throw InvalidInput("hidden widths must be positive");
    }
    if (config.bin_count < 1) throw InvalidInput("bin_count must be at least 1");
}

CorrectnessHistory update_history(const CorrectnessHistory& history,
                                  std::span<const ClassIndex> predictions,
                                  std::span<const ClassIndex> labels) {
    if (predictions.size() != labels.size() || predictions.size() != history.counts.size()) {
        throw InvalidInput("update_history: size mismatch");
    }
    CorrectnessHistory out = history;
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (predictions[n] == labels[n]) ++out.counts[n];
    }
    ++out.epochs_seen;
    return out;
}

double regularizer_activity(const LossEvaluation& eval) {
    if (eval.reg_loss) return *eval.reg_loss;
    double total = 0.0;
    for (double g : eval.reg_grad) total += std::abs(g);
    return total;
}

RunResult train(const TrainConfig& config, const Dataset& dataset) {
    validate(config);
    dataset.validate();
    if (dataset.train.empty()) throw InvalidInput("train: empty train split");
    if (dataset.val.empty() || dataset.test.empty()) throw InvalidInput("train: val and test splits required");

    std::vector<std::size_t> dims;
    dims.push_back(dataset.dim);
    dims.insert(dims.end(), config.hidden.begin(), config.hidden.end());
    dims.push_back(dataset.class_count);

    RunResult result;
    result.model = init_model(dims, config.seed);
    MlpModel& model = result.model;
    result.loss_partial = !has_forward(config.method);

    const bool ranking = needs_pair_context(config.method);
    const std::size_t n_train = dataset.train.size();
    CorrectnessHistory history = CorrectnessHistory::fresh(n_train);
    std::vector<ClassIndex> train_labels;
    for (std::size_t i : dataset.train) train_labels.push_back(dataset.labels[i]);

    // Positions into dataset.train; history and activity are indexed by position.
    std::vector<std::size_t> order(n_train);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed, 4));
    result.final_activity.assign(n_train, 0.0);

    double lr = config.learning_rate;
    std::size_t decay_next = 0;
    const auto classes = static_cast<Eigen::Index>(dataset.class_count);

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const bool last_epoch = epoch == config.epochs;
        shuffle_rng.shuffle(std::span<std::size_t>(order));
        double loss_sum = 0.0;
        std::size_t inactive = 0;

        for (std::size_t start = 0; start < n_train; start += config.batch_size) {
            const std::size_t end = std::min(n_train, start + config.batch_size);
            const std::span<const std::size_t> batch(order.data() + start, end - start);
            std::vector<std::size_t> rows;
            rows.reserve(batch.size());
            for (std::size_t pos : batch) rows.push_back(dataset.train[pos]);

            const Eigen::MatrixXd x = gather(dataset, rows);
            const Activations act = forward_cached(model, x);
            if (!act.logits.allFinite()) {
                throw TrainingDiverged(epoch, "non-finite logits in epoch " + std::to_string(epoch));
            }
            const auto b = static_cast<Eigen::Index>(batch.size());

            std::vector<LogitVector> z;
            z.reserve(batch.size());
            for (Eigen::Index r = 0; r < b; ++r) z.push_back(row_logits(act.logits, r));

            std::vector<double> top_prob;
            if (ranking) {
                for (const auto& zi : z) {
                    const ProbVector p = softmax(zi);
                    top_prob.push_back(p[argmax_tiebreak_lowest(zi.values())]);
                }
            }

            Eigen::MatrixXd delta(b, classes);
            for (Eigen::Index r = 0; r < b; ++r) {
                const auto ri = static_cast<std::size_t>(r);
                std::optional<PairContext> ctx;
                if (ranking) {
                    const std::size_t partner = (ri + 1) % batch.size();
                    ctx = PairContext{top_prob[partner], history.counts[batch[partner]],
                                      history.counts[batch[ri]]};
                }
                const LossEvaluation ev =
                    total_loss_and_grad(config.method, z[ri], dataset.labels[rows[ri]], ctx);
                loss_sum += ev.loss.value_or(ev.ce_loss);
                if (std::all_of(ev.reg_grad.begin(), ev.reg_grad.end(), [](double g) { return g == 0.0; })) {
                    ++inactive;
                }
                if (last_epoch) result.final_activity[batch[ri]] = regularizer_activity(ev);
                for (Eigen::Index c = 0; c < classes; ++c) {
                    delta(r, c) = ev.grad[static_cast<std::size_t>(c)] / static_cast<double>(b);
                }
            }

            const ParamGrads g = backward_cached(model, act, std::move(delta));
            for (std::size_t l = 0; l < model.weights.size(); ++l) {
                model.weights[l] -= lr * (g.weights[l] + config.weight_decay * model.weights[l]);
                model.biases[l] -= lr * (g.biases[l] + config.weight_decay * model.biases[l]);
            }
            if (!model.all_finite()) {
                throw TrainingDiverged(epoch, "training diverged in epoch " + std::to_string(epoch));
            }

            if (last_epoch) {
                const Eigen::MatrixXd after = forward_batch(model, x);
                for (Eigen::Index r = 0; r < b; ++r) {
                    if (row_argmax(after, r) != row_argmax(act.logits, r)) ++result.prediction_flip_count;
                }
            }
        }

        result.train_loss.push_back(loss_sum / static_cast<double>(n_train));
        result.reg_inactive_fraction.push_back(static_cast<double>(inactive) /
                                               static_cast<double>(n_train));

        while (decay_next < config.lr_decay_epochs.size() && config.lr_decay_epochs[decay_next] <= epoch) {
            if (config.lr_decay_epochs[decay_next] == epoch) lr *= config.lr_decay_factor;
            ++decay_next;
        }

        if (!forward_batch(model, gather(dataset, dataset.train)).allFinite()) {
            throw TrainingDiverged(epoch, "non-finite logits in epoch " + std::to_string(epoch));
        }
        const auto val_logits = all_logits(model, dataset, dataset.val);
        result.val_ece.push_back(ece(predictions_for(val_logits, dataset, dataset.val), config.bin_count));

        if (ranking) {
            const Eigen::MatrixXd zt = forward_batch(model, gather(dataset, dataset.train));
            std::vector<ClassIndex> preds(n_train);
            for (Eigen::Index r = 0; r < zt.rows(); ++r) preds[static_cast<std::size_t>(r)] = row_argmax(zt, r);
            history = update_history(history, preds, train_labels);
        }
    }

    result.val_logits = all_logits(model, dataset, dataset.val);
    result.test_logits = all_logits(model, dataset, dataset.test);
    result.val = calibration_report(predictions_for(result.val_logits, dataset, dataset.val), config.bin_count);
    result.test = calibration_report(predictions_for(result.test_logits, dataset, dataset.test), config.bin_count);
    return result;
}

}  // namespace calib
