#include "calib/losses.hpp"

#include <algorithm>
#include <cmath>

#include "calib/error.hpp"

namespace calib {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

double relu(double x) { return x > 0.0 ? x : 0.0; }

double min_logit(const LogitVector& z) {
    const auto v = z.values();
    return *std::min_element(v.begin(), v.end());
}

void check_label(const LogitVector& z, ClassIndex y) {
    if (y >= z.size()) throw InvalidInput("label out of range");
}

void check_nonnegative(double x, const char* name) {
    if (!(x >= 0.0) || !std::isfinite(x)) {
        throw InvalidInput(std::string(name) + " must be a finite non-negative number");
    }
}

void check_margin(double m) {
    if (!(m > 0.0)) throw InvalidInput("margin must be positive");
}

std::uint8_t ranking_indicator(const PairContext& ctx, double own_confidence) {
    const auto h = static_cast<double>(static_cast<std::int64_t>(ctx.own_history) -
                                       static_cast<std::int64_t>(ctx.partner_history));
    return h * (own_confidence - ctx.partner_confidence) < 0.0 ? 1 : 0;
}

const PairContext& require_ctx(const std::optional<PairContext>& ctx, const MethodSpec& spec) {
    if (!ctx) throw InvalidInput(method_name(spec) + ": pair context required");
    validate(*ctx);
    return *ctx;
}

struct AclsShape {
    double lambda1;
    double lambda2;
    double margin;
};

// Eq.-10-style linear smoothing shared by ACLS, AR-only and ranking variants.
double linear_smoothing(const LogitVector& z, ClassIndex j, ClassIndex yhat, double zmin,
                        const AclsShape& s) {
    if (j == yhat) return s.lambda1 * (z[j] - zmin - s.margin);
    return s.lambda2 * (z[yhat] - z[j] - s.margin);
}

std::uint8_t margin_indicator(const LogitVector& z, ClassIndex j, ClassIndex yhat, double zmin,
                              double margin) {
    if (j == yhat) return z[j] - zmin >= margin ? 1 : 0;
    return z[yhat] - z[j] >= margin ? 1 : 0;
}

}  // namespace

void validate(const MethodSpec& spec) {
    std::visit(Overloaded{
                   [](const method::CrossEntropy&) {},
                   [](const method::LabelSmoothing& m) {
                       if (!(m.epsilon >= 0.0 && m.epsilon < 1.0)) {
                           throw InvalidInput("epsilon must lie in [0, 1)");
                       }
                   },
                   [](const method::Focal& m) { check_nonnegative(m.gamma, "gamma"); },
                   [](const method::Mbls& m) {
                       check_nonnegative(m.lambda, "lambda");
                       check_margin(m.margin);
                   },
                   [](const method::AclsConditionalOnly& m) {
                       check_nonnegative(m.lambda, "lambda");
                       check_margin(m.margin);
                   },
                   [](const auto& m) {
                       check_nonnegative(m.lambda1, "lambda1");
                       check_nonnegative(m.lambda2, "lambda2");
                       if constexpr (requires { m.margin; }) check_margin(m.margin);
                   },
               },
               spec);
}

std::string method_name(const MethodSpec& spec) {
    return std::visit(Overloaded{
                          [](const method::CrossEntropy&) { return "ce"; },
                          [](const method::LabelSmoothing&) { return "ls"; },
                          [](const method::Focal&) { return "focal"; },
                          [](const method::Flsd&) { return "flsd"; },
                          [](const method::Cpc&) { return "cpc"; },
                          [](const method::Mdca&) { return "mdca"; },
                          [](const method::Mbls&) { return "mbls"; },
                          [](const method::Crl&) { return "crl"; },
                          [](const method::Acls&) { return "acls"; },
                          [](const method::AclsAdaptiveOnly&) { return "acls_ar_only"; },
                          [](const method::AclsConditionalOnly&) { return "acls_cr_only"; },
                          [](const method::AclsRanking&) { return "acls_ranking"; },
                      },
                      spec);
}

bool needs_pair_context(const MethodSpec& spec) {
    return std::holds_alternative<method::Crl>(spec) ||
           std::holds_alternative<method::AclsRanking>(spec);
}

bool has_forward(const MethodSpec& spec) {
    return !(std::holds_alternative<method::Flsd>(spec) || std::holds_alternative<method::Cpc>(spec) ||
             std::holds_alternative<method::Mdca>(spec) || std::holds_alternative<method::Crl>(spec));
}

void validate(const PairContext& ctx) {
    if (!(ctx.partner_confidence > 0.0 && ctx.partner_confidence <= 1.0)) {
        throw InvalidInput("partner_confidence must lie in (0, 1]");
    }
}

double ce_loss(const LogitVector& z, ClassIndex y) {
    check_label(z, y);
    return -log_softmax(z)[y];
}

std::vector<double> ce_grad(const LogitVector& z, ClassIndex y) {
    check_label(z, y);
    const ProbVector p = softmax(z);
    std::vector<double> g(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) g[j] = p[j] - (j == y ? 1.0 : 0.0);
    return g;
}

TargetDistribution ls_targets(ClassIndex y, std::size_t class_count, double epsilon) {
    validate(MethodSpec{method::LabelSmoothing{epsilon}});
    if (class_count < 2) throw InvalidInput("ls_targets: at least two classes required");
    if (y >= class_count) throw InvalidInput("ls_targets: label out of range");
    const double c = static_cast<double>(class_count);
    std::vector<double> q(class_count, epsilon / c);
    q[y] = 1.0 - epsilon * (1.0 - 1.0 / c);
    return TargetDistribution::from_values(std::move(q));
}

double ls_loss(const LogitVector& z, ClassIndex y, double epsilon) {
    check_label(z, y);
    const TargetDistribution q = ls_targets(y, z.size(), epsilon);
    const auto lp = log_softmax(z);
    double loss = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) loss -= q[k] * lp[k];
    return loss;
}

std::vector<double> ls_grad(const LogitVector& z, ClassIndex y, double epsilon) {
    validate(MethodSpec{method::LabelSmoothing{epsilon}});
    std::vector<double> g = ce_grad(z, y);
    const double c = static_cast<double>(z.size());
    const double eps1 = epsilon * (1.0 - 1.0 / c);
    const double eps2 = epsilon / c;
    // Same association as the unified form so the two agree bitwise when yhat == y.
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = g[j] + (j == y ? eps1 : -eps2);
    return g;
}

double focal_loss(const LogitVector& z, ClassIndex y, double gamma) {
    check_label(z, y);
    check_nonnegative(gamma, "gamma");
    const double lp = log_softmax(z)[y];
    const double u = -std::expm1(lp);
    return -std::pow(u, gamma) * lp;
}

std::vector<double> focal_grad(const LogitVector& z, ClassIndex y, double gamma) {
    check_label(z, y);
    check_nonnegative(gamma, "gamma");
    const ProbVector p = softmax(z);
    const double lp = log_softmax(z)[y];
    const double py = std::exp(lp);
    const double u = -std::expm1(lp);
    // dL/dz_j = (gamma u^(gamma-1) p_y log p_y - u^gamma) (delta_jy - p_j)
    double coef = -std::pow(u, gamma);
    if (gamma != 0.0 && u > 0.0) coef += gamma * std::pow(u, gamma - 1.0) * py * lp;
    std::vector<double> g(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) g[j] = coef * ((j == y ? 1.0 : 0.0) - p[j]);
    return g;
}

GradientDecomposition reg_decompose(const MethodSpec& spec, const LogitVector& z, ClassIndex y,
                                    const std::optional<PairContext>& ctx) {
    return decompose_with_prediction(spec, z, y, argmax_tiebreak_lowest(z.values()), ctx);
}

GradientDecomposition decompose_with_prediction(const MethodSpec& spec, const LogitVector& z,
                                                ClassIndex y, ClassIndex yhat,
                                                const std::optional<PairContext>& ctx) {
    validate(spec);
    check_label(z, y);
    if (yhat >= z.size()) throw InvalidInput("prediction out of range");

    const std::size_t n = z.size();
    const ProbVector p = softmax(z);
    const double zmin = min_logit(z);

    GradientDecomposition d;
    d.yhat = yhat;
    d.f_value.assign(n, 0.0);
    d.indicator.assign(n, 0);
    d.ce_grad = ce_grad(z, y);

    auto fill = [&](auto&& f_at, auto&& c_at) {
        for (std::size_t j = 0; j < n; ++j) {
            d.f_value[j] = f_at(j);
            d.indicator[j] = c_at(j);
        }
    };
    auto always = [](std::size_t) -> std::uint8_t { return 1; };

    std::visit(
        Overloaded{
            [&](const method::CrossEntropy&) {
                fill([](std::size_t) { return 0.0; }, [](std::size_t) -> std::uint8_t { return 0; });
            },
            [&](const method::LabelSmoothing& m) {
                const double c = static_cast<double>(n);
                const double eps1 = m.epsilon * (1.0 - 1.0 / c);
                const double eps2 = m.epsilon / c;
                fill([&](std::size_t j) { return j == yhat ? eps1 : eps2; }, always);
            },
            [&](const method::Focal& m) {
                // Not a Table-style smoothing function; f is read off the exact
                // focal gradient so that the unified form reproduces it.
                const auto fg = focal_grad(z, y, m.gamma);
                fill(
                    [&](std::size_t j) {
                        const double r = fg[j] - d.ce_grad[j];
                        return j == yhat ? r : -r;
                    },
                    always);
            },
            [&](const method::Flsd& m) {
                fill([&](std::size_t j) { return j == yhat ? m.lambda1 : m.lambda2; }, always);
            },
            [&](const method::Cpc& m) {
                fill(
                    [&](std::size_t j) {
                        if (j == yhat) {
                            double s = 0.0;
                            for (std::size_t k = 0; k < n; ++k) {
                                if (k == j) continue;
                                const double den = p[k] + p[j];
                                if (den > 0.0) s += p[k] / den;
                            }
                            return -m.lambda1 * s;
                        }
                        const double den_y = p[y] + p[j];
                        double first = den_y > 0.0 ? p[j] / den_y : 0.0;
                        double s = 0.0;
                        for (std::size_t k = 0; k < n; ++k) {
                            if (k == y) continue;
                            const double den = p[k] + p[j];
                            if (den > 0.0) s += (p[k] - p[j]) / den;
                        }
                        return m.lambda1 * first + m.lambda2 * s;
                    },
                    always);
            },
            [&](const method::Mdca& m) {
                fill(
                    [&](std::size_t j) {
                        return j == yhat ? m.lambda1 * p[j] * (1.0 - p[j])
                                         : m.lambda2 * p[j] * (1.0 + p[yhat]);
                    },
                    always);
            },
            [&](const method::Mbls& m) {
                fill([&](std::size_t) { return m.lambda; },
                     [&](std::size_t j) -> std::uint8_t {
                         if (j == yhat) return 0;
                         return z[yhat] - z[j] >= m.margin ? 1 : 0;
                     });
            },
            [&](const method::Crl& m) {
                const std::uint8_t c = ranking_indicator(require_ctx(ctx, spec), p[yhat]);
                fill(
                    [&](std::size_t j) {
                        return j == yhat ? m.lambda1 * p[j] * (1.0 - p[j])
                                         : m.lambda2 * p[yhat] * p[j];
                    },
                    [&](std::size_t) { return c; });
            },
            [&](const method::Acls& m) {
                const AclsShape s{m.lambda1, m.lambda2, m.margin};
                fill([&](std::size_t j) { return linear_smoothing(z, j, yhat, zmin, s); },
                     [&](std::size_t j) { return margin_indicator(z, j, yhat, zmin, m.margin); });
            },
            [&](const method::AclsAdaptiveOnly& m) {
                const AclsShape s{m.lambda1, m.lambda2, m.margin};
                fill([&](std::size_t j) { return linear_smoothing(z, j, yhat, zmin, s); }, always);
            },
            [&](const method::AclsConditionalOnly& m) {
                fill([&](std::size_t) { return m.lambda; },
                     [&](std::size_t j) { return margin_indicator(z, j, yhat, zmin, m.margin); });
            },
            [&](const method::AclsRanking& m) {
                const AclsShape s{m.lambda1, m.lambda2, m.margin};
                const std::uint8_t c = ranking_indicator(require_ctx(ctx, spec), p[yhat]);
                fill([&](std::size_t j) { return linear_smoothing(z, j, yhat, zmin, s); },
                     [&](std::size_t) { return c; });
            },
        },
        spec);

    d.reg_grad.resize(n);
    d.total_grad.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double active = d.f_value[j] * static_cast<double>(d.indicator[j]);
        d.reg_grad[j] = j == yhat ? active : -active;
        d.total_grad[j] = d.ce_grad[j] + d.reg_grad[j];
    }
    return d;
}

double acls_smoothing(const LogitVector& z, ClassIndex j, const MethodSpec& spec) {
    if (j >= z.size()) throw InvalidInput("class index out of range");
    const ClassIndex yhat = argmax_tiebreak_lowest(z.values());
    const double zmin = min_logit(z);
    return std::visit(
        Overloaded{
            [&](const method::Acls& m) {
                return linear_smoothing(z, j, yhat, zmin, {m.lambda1, m.lambda2, m.margin});
            },
            [&](const method::AclsAdaptiveOnly& m) {
                return linear_smoothing(z, j, yhat, zmin, {m.lambda1, m.lambda2, m.margin});
            },
            [&](const method::AclsRanking& m) {
                return linear_smoothing(z, j, yhat, zmin, {m.lambda1, m.lambda2, m.margin});
            },
            [&](const method::AclsConditionalOnly& m) { return m.lambda; },
            [&](const auto&) -> double {
                throw InvalidInput("acls_smoothing: not an ACLS variant: " + method_name(spec));
            },
        },
        spec);
}

std::uint8_t acls_indicator(const LogitVector& z, ClassIndex j, double margin) {
    if (j >= z.size()) throw InvalidInput("class index out of range");
    check_margin(margin);
    return margin_indicator(z, j, argmax_tiebreak_lowest(z.values()), min_logit(z), margin);
}

std::vector<double> acls_reg_grad(const LogitVector& z, ClassIndex y, const method::Acls& spec) {
    validate(MethodSpec{spec});
    check_label(z, y);
    const ClassIndex yhat = argmax_tiebreak_lowest(z.values());
    const double zmin = min_logit(z);
    std::vector<double> g(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
        g[j] = j == yhat ? spec.lambda1 * relu(z[j] - zmin - spec.margin)
                         : -spec.lambda2 * relu(z[yhat] - z[j] - spec.margin);
    }
    return g;
}

double acls_reg_loss(const LogitVector& z, ClassIndex y, const method::Acls& spec) {
    check_label(z, y);
    return *reg_loss_detached(MethodSpec{spec}, z, z, y, std::nullopt);
}

std::optional<double> reg_loss_detached(const MethodSpec& spec, const LogitVector& z,
                                        const LogitVector& reference, ClassIndex y,
                                        const std::optional<PairContext>& ctx) {
    validate(spec);
    check_label(z, y);
    if (z.size() != reference.size()) throw InvalidInput("reference size mismatch");
    const std::size_t n = z.size();
    const ClassIndex yhat = argmax_tiebreak_lowest(reference.values());
    const double ref_min = min_logit(reference);
    const double ref_top = reference[yhat];

    // Sum of the two ACLS-shaped quadratic branches, optionally rectified.
    auto quadratic = [&](double l1, double l2, double m, bool rectify) {
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double gap = j == yhat ? z[j] - ref_min - m : ref_top - z[j] - m;
            if (rectify) gap = relu(gap);
            total += 0.5 * (j == yhat ? l1 : l2) * gap * gap;
        }
        return total;
    };

    return std::visit(
        Overloaded{
            [&](const method::CrossEntropy&) -> std::optional<double> { return 0.0; },
            [&](const method::LabelSmoothing& m) -> std::optional<double> {
                return ls_loss(z, y, m.epsilon) - ce_loss(z, y);
            },
            [&](const method::Focal& m) -> std::optional<double> {
                return focal_loss(z, y, m.gamma) - ce_loss(z, y);
            },
            [&](const method::Mbls& m) -> std::optional<double> {
                double total = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    if (j != yhat) total += m.lambda * relu(ref_top - z[j] - m.margin);
                }
                return total;
            },
            [&](const method::Acls& m) -> std::optional<double> {
                return quadratic(m.lambda1, m.lambda2, m.margin, true);
            },
            [&](const method::AclsAdaptiveOnly& m) -> std::optional<double> {
                return quadratic(m.lambda1, m.lambda2, m.margin, false);
            },
            [&](const method::AclsConditionalOnly& m) -> std::optional<double> {
                double total = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gap =
                        j == yhat ? z[j] - ref_min - m.margin : ref_top - z[j] - m.margin;
                    total += m.lambda * relu(gap);
                }
                return total;
            },
            [&](const method::AclsRanking& m) -> std::optional<double> {
                const ProbVector ref_p = softmax(reference);
                if (!ranking_indicator(require_ctx(ctx, spec), ref_p[yhat])) return 0.0;
                return quadratic(m.lambda1, m.lambda2, m.margin, false);
            },
            [&](const auto&) -> std::optional<double> { return std::nullopt; },
        },
        spec);
}

LossEvaluation total_loss_and_grad(const MethodSpec& spec, const LogitVector& z, ClassIndex y,
                                   const std::optional<PairContext>& ctx) {
    LossEvaluation out;
    GradientDecomposition d = reg_decompose(spec, z, y, ctx);
    out.ce_loss = ce_loss(z, y);
    if (const auto* ls = std::get_if<method::LabelSmoothing>(&spec)) {
        out.grad = ls_grad(z, y, ls->epsilon);
        if (d.yhat != y) {
            for (std::size_t j = 0; j < out.grad.size(); ++j) d.reg_grad[j] = out.grad[j] - d.ce_grad[j];
        }
    } else {
        out.grad = std::move(d.total_grad);
    }
    out.reg_grad = std::move(d.reg_grad);
    out.reg_loss = reg_loss_detached(spec, z, z, y, ctx);
    if (out.reg_loss) out.loss = out.ce_loss + *out.reg_loss;
    return out;
}

}  // namespace calib
