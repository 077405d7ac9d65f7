#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "consloss/tensor.hpp"

namespace consloss {

inline constexpr double kEuler = 2.718281828459045235360287471352662498;
inline constexpr double kInvEuler = 0.367879441171442321595523770161460867;

enum class LossKind { CrossEntropy, Focal, Conservative, Cubic1, Cubic2, Cubic3 };

std::string_view to_string(LossKind kind);
std::optional<LossKind> parse_loss_kind(std::string_view name);

struct ClampRange {
    double lo = -10.0;
    double hi = 10.0;
    friend bool operator==(const ClampRange&, const ClampRange&) = default;
};

// One member of the loss family. Only the fields relevant to `kind` are read.
struct LossSpec {
    LossKind kind = LossKind::CrossEntropy;
    double base = kEuler;     // Conservative: logarithm base a, zero point 1/a
    double lambda = 1.0;      // Conservative: balance weight
    double alpha_t = 5.0;     // Focal
    double gamma = 2.0;       // Focal
    double lambda1 = 60.0;    // Cubic1
    double lambda2 = 60.0;    // Cubic2
    double alpha = 300.0;     // Cubic3, p_t < 1/e
    double beta = 60.0;       // Cubic3, p_t >= 1/e
    std::optional<ClampRange> clamp;

    // Throws DomainError when a parameter of the selected kind is invalid.
    void validate() const;

    static LossSpec cross_entropy();
    static LossSpec focal(double alpha_t = 5.0, double gamma = 2.0);
    static LossSpec conservative(double base = kEuler, double lambda = 1.0,
                                 std::optional<ClampRange> clamp = std::nullopt);
    static LossSpec cubic1(double lambda1);
    static LossSpec cubic2(double lambda2);
    static LossSpec cubic3(double alpha, double beta);

    friend bool operator==(const LossSpec&, const LossSpec&) = default;
};

// Short human-readable label, e.g. "CL(a=2.718,l=5)".
std::string describe(const LossSpec& spec);

struct ProbPolicy {
    double eps = 1e-6;
};

// Maps p into [eps, 1-eps]. Throws DomainError on non-finite p.
double clamp_probability(double p, const ProbPolicy& policy = {});

// Loss value as a function of the ground-truth class probability p_t in (0,1).
// When spec.clamp is set the result is clipped into [lo, hi].
double eval_loss(const LossSpec& spec, double p_t);

// Exact dLoss/dp_t of eval_loss; zero where the clamp binds.
double eval_grad(const LossSpec& spec, double p_t);

// Gradient that training descends for one example: sign(loss) * dLoss/dp_t.
// Where the loss is positive this is ordinary descent; where it is negative
// the step ascends the loss, lowering p_t (the derivative of |loss|).
// For CrossEntropy and Focal it coincides with eval_grad.
double eval_update_grad(const LossSpec& spec, double p_t);

// Interior p_t where the loss crosses zero; none for CrossEntropy/Focal.
std::optional<double> zero_point(const LossSpec& spec);

enum class GradientRule {
    Exact,         // d(mean loss)/d(prob)
    SignSwitched,  // per-pixel eval_update_grad, averaged
};

struct PixelwiseLoss {
    double mean_loss = 0.0;
    Tensor grad_probs;  // H x W x K, nonzero only at ground-truth channels
};

// Mean loss over a label map. probs is H x W x K with rows summing to 1.
// Throws DataError on out-of-range labels or unnormalized probabilities.
PixelwiseLoss pixelwise_loss(const LossSpec& spec, const Tensor& probs, const LabelMap& labels,
                             const ProbPolicy& policy = {},
                             GradientRule rule = GradientRule::Exact);

}  // namespace consloss
