#pragma once

// Calibration losses expressed in the unified logit-gradient form
//
//   dL/dz_j = p_j - (q_j - f_j * C_j)   for j == yhat
//   dL/dz_j = p_j - (q_j + f_j * C_j)   for j != yhat
//
// where f is a per-class smoothing function and C a 0/1 indicator. Every
// method is described by its (f, C) pair; forward values are provided only
// where a closed form exists.

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "calib/numerics.hpp"

namespace calib {

namespace method {

struct CrossEntropy {};
struct LabelSmoothing {
    double epsilon = 0.1;
};
struct Focal {
    double gamma = 3.0;
};
/// Constant-gradient form only; the sample-adaptive gamma schedule is not modelled.
struct Flsd {
    double lambda1 = 0.1;
    double lambda2 = 0.01;
};
struct Cpc {
    double lambda1 = 0.1;
    double lambda2 = 0.01;
};
struct Mdca {
    double lambda1 = 0.1;
    double lambda2 = 0.01;
};
struct Mbls {
    double lambda = 0.1;
    double margin = 10.0;
};
struct Crl {
    double lambda1 = 0.1;
    double lambda2 = 0.01;
};
struct Acls {
    double lambda1 = 0.1;
    double lambda2 = 0.01;
    double margin = 10.0;
};
/// ACLS smoothing function with the indicator forced to 1.
struct AclsAdaptiveOnly {
    double lambda1 = 0.1;
    double lambda2 = 0.01;
    double margin = 10.0;
};
/// Constant smoothing `lambda` gated by the ACLS margin indicator.
struct AclsConditionalOnly {
    double lambda = 0.1;
    double margin = 10.0;
};
/// ACLS smoothing function gated by the correctness-ranking indicator.
struct AclsRanking {
    double lambda1 = 0.1;
    double lambda2 = 0.01;
    double margin = 10.0;
};

}  // namespace method

using MethodSpec =
    std::variant<method::CrossEntropy, method::LabelSmoothing, method::Focal, method::Flsd,
                 method::Cpc, method::Mdca, method::Mbls, method::Crl, method::Acls,
                 method::AclsAdaptiveOnly, method::AclsConditionalOnly, method::AclsRanking>;

/// Throws InvalidInput when a hyperparameter is outside its domain.
void validate(const MethodSpec& spec);

/// Canonical lower-case identifier ("ce", "acls_ranking", ...).
std::string method_name(const MethodSpec& spec);

/// True for methods whose indicator depends on a partner sample (CRL, ACLS_ranking).
bool needs_pair_context(const MethodSpec& spec);

/// True when a closed-form forward loss exists (CE, LS, focal, MbLS, ACLS family).
bool has_forward(const MethodSpec& spec);

/// Partner information for the correctness-ranking indicator.
struct PairContext {
    double partner_confidence = 0.5;
    std::uint32_t partner_history = 0;
    std::uint32_t own_history = 0;
};

void validate(const PairContext& ctx);

/// Per-class anatomy of a logit gradient.
struct GradientDecomposition {
    ClassIndex yhat = 0;
    std::vector<double> f_value;
    std::vector<std::uint8_t> indicator;
    std::vector<double> reg_grad;
    std::vector<double> ce_grad;
    std::vector<double> total_grad;
};

double ce_loss(const LogitVector& z, ClassIndex y);
std::vector<double> ce_grad(const LogitVector& z, ClassIndex y);

TargetDistribution ls_targets(ClassIndex y, std::size_t class_count, double epsilon);
/// Cross-entropy against ls_targets; split on the ground-truth label.
double ls_loss(const LogitVector& z, ClassIndex y, double epsilon);
std::vector<double> ls_grad(const LogitVector& z, ClassIndex y, double epsilon);

/// -(1 - p_y)^gamma log p_y
double focal_loss(const LogitVector& z, ClassIndex y, double gamma);
std::vector<double> focal_grad(const LogitVector& z, ClassIndex y, double gamma);

/// Decomposition with yhat = argmax_tiebreak_lowest(z).
/// `ctx` is required exactly when needs_pair_context(spec).
GradientDecomposition reg_decompose(const MethodSpec& spec, const LogitVector& z, ClassIndex y,
                                    const std::optional<PairContext>& ctx = std::nullopt);

/// Same as reg_decompose but with the prediction supplied explicitly. Used to
/// trace one branch of a smoothing function across a sweep.
GradientDecomposition decompose_with_prediction(const MethodSpec& spec, const LogitVector& z,
                                                ClassIndex y, ClassIndex yhat,
                                                const std::optional<PairContext>& ctx);

/// The ACLS piecewise-linear smoothing function for class j. For the
/// conditional-only variant this is the constant lambda.
double acls_smoothing(const LogitVector& z, ClassIndex j, const MethodSpec& spec);

/// 1[z_j - min_k z_k >= M] for j == yhat, 1[z_yhat - z_j >= M] otherwise.
std::uint8_t acls_indicator(const LogitVector& z, ClassIndex j, double margin);

std::vector<double> acls_reg_grad(const LogitVector& z, ClassIndex y, const method::Acls& spec);

/// Forward regularizer whose exact gradient, with min_k z_k and z_yhat held
/// constant, is acls_reg_grad:
///   lambda1/2 ReLU(z_yhat - min - M)^2 + sum_{j != yhat} lambda2/2 ReLU(z_yhat - z_j - M)^2
double acls_reg_loss(const LogitVector& z, ClassIndex y, const method::Acls& spec);

/// Forward regularizer evaluated at `z` with every stop-gradient quantity
/// (yhat, min_k z_k, z_yhat, the ranking indicator, probabilities inside
/// smoothing coefficients) taken from `reference`. Empty for gradient-only
/// methods. Setting reference == z gives the regularizer value.
std::optional<double> reg_loss_detached(const MethodSpec& spec, const LogitVector& z,
                                        const LogitVector& reference, ClassIndex y,
                                        const std::optional<PairContext>& ctx = std::nullopt);

struct LossEvaluation {
    std::optional<double> loss;      ///< CE + L_REG; empty for gradient-only methods
    double ce_loss = 0.0;
    std::optional<double> reg_loss;  ///< L_REG where defined
    std::vector<double> grad;        ///< dL/dz
    std::vector<double> reg_grad;    ///< regularizer part of the gradient
};

/// Full per-sample objective. The gradient is ce_grad + reg_grad from
/// reg_decompose, except for label smoothing which uses its exact gradient
/// (split on y); the two coincide bitwise whenever yhat == y.
LossEvaluation total_loss_and_grad(const MethodSpec& spec, const LogitVector& z, ClassIndex y,
                                   const std::optional<PairContext>& ctx = std::nullopt);

}  // namespace calib
