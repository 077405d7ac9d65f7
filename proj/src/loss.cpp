#include "consloss/loss.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "consloss/errors.hpp"

namespace consloss {

namespace {

void require_open_unit(double p_t) {
    if (!std::isfinite(p_t) || p_t <= 0.0 || p_t >= 1.0) {
        throw DomainError("p_t must lie in (0, 1), got " + std::to_string(p_t));
    }
}

void require_positive(double v, const char* name) {
    if (!std::isfinite(v) || v <= 0.0) {
        throw DomainError(std::string(name) + " must be positive, got " + std::to_string(v));
    }
}

double raw_loss(const LossSpec& s, double p) {
    switch (s.kind) {
        case LossKind::CrossEntropy:
            return -std::log(p);
        case LossKind::Focal:
            return -s.alpha_t * std::pow(1.0 - p, s.gamma) * std::log(p);
        case LossKind::Conservative: {
            const double ln_a = std::log(s.base);
            const double u = std::log(p) / ln_a;  // log_a p, negative on (0,1)
            const double modulating = (1.0 + u) * (1.0 + u);
            const double switch_factor = std::log(-u) / ln_a;
            return s.lambda * modulating * switch_factor;
        }
        case LossKind::Cubic1: {
            const double d = p - 0.5;
            return -s.lambda1 * d * d * d;
        }
        case LossKind::Cubic2: {
            const double d = p - kInvEuler;
            return -s.lambda2 * d * d * d;
        }
        case LossKind::Cubic3: {
            const double d = p - kInvEuler;
            return -(p < kInvEuler ? s.alpha : s.beta) * d * d * d;
        }
    }
    return 0.0;
}

double raw_grad(const LossSpec& s, double p) {
    switch (s.kind) {
        case LossKind::CrossEntropy:
            return -1.0 / p;
        case LossKind::Focal: {
            const double q = 1.0 - p;
            const double dq = s.gamma == 0.0 ? 0.0 : -s.gamma * std::pow(q, s.gamma - 1.0) * std::log(p);
            return -s.alpha_t * (dq + std::pow(q, s.gamma) / p);
        }
        case LossKind::Conservative: {
            const double ln_a = std::log(s.base);
            const double u = std::log(p) / ln_a;
            const double one_u = 1.0 + u;
            const double d_du = (2.0 * one_u * std::log(-u) + one_u * one_u / u) / ln_a;
            return s.lambda * d_du / (p * ln_a);
        }
        case LossKind::Cubic1: {
            const double d = p - 0.5;
            return -3.0 * s.lambda1 * d * d;
        }
        case LossKind::Cubic2: {
            const double d = p - kInvEuler;
            return -3.0 * s.lambda2 * d * d;
        }
        case LossKind::Cubic3: {
            const double d = p - kInvEuler;
            return -3.0 * (p < kInvEuler ? s.alpha : s.beta) * d * d;
        }
    }
    return 0.0;
}

bool clamp_binds(const LossSpec& s, double raw) {
    return s.clamp && (raw < s.clamp->lo || raw > s.clamp->hi);
}

}  // namespace

std::string_view to_string(LossKind kind) {
    switch (kind) {
        case LossKind::CrossEntropy: return "CrossEntropy";
        case LossKind::Focal: return "Focal";
        case LossKind::Conservative: return "Conservative";
        case LossKind::Cubic1: return "Cubic1";
        case LossKind::Cubic2: return "Cubic2";
        case LossKind::Cubic3: return "Cubic3";
    }
    return "?";
}

std::optional<LossKind> parse_loss_kind(std::string_view name) {
    for (auto k : {LossKind::CrossEntropy, LossKind::Focal, LossKind::Conservative, LossKind::Cubic1,
                   LossKind::Cubic2, LossKind::Cubic3}) {
        if (to_string(k) == name) return k;
    }
    if (name == "CE") return LossKind::CrossEntropy;
    if (name == "FL") return LossKind::Focal;
    if (name == "CL") return LossKind::Conservative;
    return std::nullopt;
}

void LossSpec::validate() const {
    switch (kind) {
        case LossKind::CrossEntropy:
            break;
        case LossKind::Focal:
            require_positive(alpha_t, "alpha_t");
            if (!std::isfinite(gamma) || gamma < 0.0) throw DomainError("gamma must be >= 0");
            break;
        case LossKind::Conservative:
            if (!std::isfinite(base) || base <= 1.0) throw DomainError("base a must be > 1");
            require_positive(lambda, "lambda");
            break;
        case LossKind::Cubic1:
            require_positive(lambda1, "lambda1");
            break;
        case LossKind::Cubic2:
            require_positive(lambda2, "lambda2");
            break;
        case LossKind::Cubic3:
            require_positive(alpha, "alpha");
            require_positive(beta, "beta");
            break;
    }
    if (clamp && !(clamp->lo < clamp->hi)) throw DomainError("clamp requires lo < hi");
}

LossSpec LossSpec::cross_entropy() { return {}; }

LossSpec LossSpec::focal(double alpha_t, double gamma) {
    LossSpec s;
    s.kind = LossKind::Focal;
    s.alpha_t = alpha_t;
    s.gamma = gamma;
    return s;
}

LossSpec LossSpec::conservative(double base, double lambda, std::optional<ClampRange> clamp) {
    LossSpec s;
    s.kind = LossKind::Conservative;
    s.base = base;
    s.lambda = lambda;
    s.clamp = clamp;
    return s;
}

LossSpec LossSpec::cubic1(double lambda1) {
    LossSpec s;
    s.kind = LossKind::Cubic1;
    s.lambda1 = lambda1;
    return s;
}

LossSpec LossSpec::cubic2(double lambda2) {
    LossSpec s;
    s.kind = LossKind::Cubic2;
    s.lambda2 = lambda2;
    return s;
}

LossSpec LossSpec::cubic3(double alpha, double beta) {
    LossSpec s;
    s.kind = LossKind::Cubic3;
    s.alpha = alpha;
    s.beta = beta;
    return s;
}

std::string describe(const LossSpec& spec) {
    char buf[128];
    switch (spec.kind) {
        case LossKind::CrossEntropy: std::snprintf(buf, sizeof buf, "CE"); break;
        case LossKind::Focal:
            std::snprintf(buf, sizeof buf, "FL(alpha_t=%g,gamma=%g)", spec.alpha_t, spec.gamma);
            break;
        case LossKind::Conservative:
            std::snprintf(buf, sizeof buf, "CL(a=%.4g,lambda=%g)", spec.base, spec.lambda);
            break;
        case LossKind::Cubic1: std::snprintf(buf, sizeof buf, "Cubic1(lambda1=%g)", spec.lambda1); break;
        case LossKind::Cubic2: std::snprintf(buf, sizeof buf, "Cubic2(lambda2=%g)", spec.lambda2); break;
        case LossKind::Cubic3:
            std::snprintf(buf, sizeof buf, "Cubic3(alpha=%g,beta=%g)", spec.alpha, spec.beta);
            break;
    }
    std::string out = buf;
    if (spec.clamp) {
        std::snprintf(buf, sizeof buf, "[clamp %g,%g]", spec.clamp->lo, spec.clamp->hi);
        out += buf;
    }
    return out;
}

double clamp_probability(double p, const ProbPolicy& policy) {
    if (!std::isfinite(p)) throw DomainError("probability is not finite");
    if (p < policy.eps) return policy.eps;
    if (p > 1.0 - policy.eps) return 1.0 - policy.eps;
    return p;
}

double eval_loss(const LossSpec& spec, double p_t) {
    spec.validate();
    require_open_unit(p_t);
    const double raw = raw_loss(spec, p_t);
    if (spec.clamp) return std::clamp(raw, spec.clamp->lo, spec.clamp->hi);
    return raw;
}

double eval_grad(const LossSpec& spec, double p_t) {
    spec.validate();
    require_open_unit(p_t);
    if (clamp_binds(spec, raw_loss(spec, p_t))) return 0.0;
    return raw_grad(spec, p_t);
}

double eval_update_grad(const LossSpec& spec, double p_t) {
    spec.validate();
    require_open_unit(p_t);
    const double raw = raw_loss(spec, p_t);
    if (clamp_binds(spec, raw) || raw == 0.0) return 0.0;
    const double g = raw_grad(spec, p_t);
    return raw > 0.0 ? g : -g;
}

std::optional<double> zero_point(const LossSpec& spec) {
    spec.validate();
    switch (spec.kind) {
        case LossKind::Conservative: return 1.0 / spec.base;
        case LossKind::Cubic1: return 0.5;
        case LossKind::Cubic2:
        case LossKind::Cubic3: return kInvEuler;
        case LossKind::CrossEntropy:
        case LossKind::Focal: return std::nullopt;
    }
    return std::nullopt;
}

PixelwiseLoss pixelwise_loss(const LossSpec& spec, const Tensor& probs, const LabelMap& labels,
                             const ProbPolicy& policy, GradientRule rule) {
    if (probs.rank() != 3 || probs.dim(0) != labels.height || probs.dim(1) != labels.width) {
        throw StructuralError("probability map " + shape_string(probs.shape()) +
                              " does not match label map " + std::to_string(labels.height) + "x" +
                              std::to_string(labels.width));
    }
    const std::size_t k = probs.dim(2);
    const std::size_t n = labels.size();
    PixelwiseLoss out{0.0, Tensor(probs.shape(), 0.0)};
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = labels.ids[i];
        if (label < 0 || static_cast<std::size_t>(label) >= k) {
            throw DataError("label " + std::to_string(label) + " out of range [0, " + std::to_string(k) + ")");
        }
        double total = 0.0;
        for (std::size_t c = 0; c < k; ++c) total += probs[i * k + c];
        if (std::abs(total - 1.0) > 1e-6) {
            throw DataError("pixel " + std::to_string(i) + " probabilities sum to " + std::to_string(total));
        }
        const double raw_p = probs[i * k + static_cast<std::size_t>(label)];
        const double p = clamp_probability(raw_p, policy);
        out.mean_loss += eval_loss(spec, p) * inv_n;
        if (p != raw_p) continue;  // clamp is flat outside [eps, 1-eps]
        const double g = rule == GradientRule::Exact ? eval_grad(spec, p) : eval_update_grad(spec, p);
        out.grad_probs[i * k + static_cast<std::size_t>(label)] = g * inv_n;
    }
    return out;
}

}  // namespace consloss
