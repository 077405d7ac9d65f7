#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "consloss/loss.hpp"
#include "consloss/metrics.hpp"
#include "consloss/nn.hpp"
#include "consloss/synth.hpp"

namespace consloss {

// Domain labels seen by the discriminator.
inline constexpr double kSourceLabel = 0.0;
inline constexpr double kTargetLabel = 1.0;

struct ModelConfig {
    std::size_t channels = 3;       // input feature channels C
    std::size_t num_classes = 4;    // K
    std::size_t embed_width = 16;   // encoder output channels
    std::size_t hidden_width = 16;  // encoder / generator hidden channels
    std::size_t disc_width = 16;
    double gen_noise_std = 0.1;     // GaussianNoise on the generator input

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// E: Conv3x3-ReLU-Conv3x3-ReLU embedding.  S: per-pixel Dense to K + softmax.
// G: noise, Conv3x3-ReLU-Conv3x3-Tanh back to C channels.
// D: two stride-2 Conv3x3 reductions to a patch score grid + Sigmoid.
struct ModelState {
    ModelConfig config;
    Network encoder;
    Network generator;
    Network discriminator;
    Network classifier;
};

ModelState build_models(const ModelConfig& config, std::uint64_t seed);

// Checks the E/G/S/D chain against an H x W x C input; throws StructuralError.
void check_model_shapes(const ModelState& model, std::size_t height, std::size_t width);

void save_model(const ModelState& model, const std::filesystem::path& dir);
ModelState load_model(const std::filesystem::path& dir);

enum class Variant { SegOnly, SegPlusGan };
std::string_view to_string(Variant v);
std::optional<Variant> parse_variant(std::string_view name);

struct TrainSchedule {
    std::size_t total_steps = 1000;
    std::size_t warm_start_steps = 500;  // 0 = cold start
    std::size_t eval_every = 50;
    AdamHyper adam{};
    LossSpec seg_loss_warm = LossSpec::cross_entropy();
    LossSpec seg_loss_main = LossSpec::conservative(kEuler, 5.0);
    double recon_weight = 1.0;
    ProbPolicy policy{};
    std::uint64_t seed = 0;

    // Sets the main loss; a cold-start Conservative loss gets the (-10, 10) clamp.
    void set_main_loss(LossSpec main, bool cold_start);
    bool cold_start() const noexcept { return warm_start_steps == 0; }
    // Throws ConfigError on violated invariants.
    void validate() const;
};

// Loss for 0-based update index `step`: the warm loss before warm_start_steps.
const LossSpec& select_active_loss(const TrainSchedule& schedule, std::size_t step);

// One adversarial loss split into its source and target batch terms.
struct AdversarialTerms {
    double source = 0.0;
    double target = 0.0;
    double source_label = kSourceLabel;  // label the source reconstruction is scored against
    double target_label = kTargetLabel;
    double total() const noexcept { return source + target; }
};

struct StepLosses {
    std::size_t step = 0;
    AdversarialTerms gan_d;
    AdversarialTerms gan_g;
    AdversarialTerms gan_e;
    double l_rec = 0.0;
    double l_seg_s = 0.0;
};

struct StepOptions {
    AdamHyper adam{};
    double recon_weight = 1.0;
    ProbPolicy policy{};
    bool use_gan = true;  // step_encoder: include the cross-domain adversarial term
};

// Mean binary cross-entropy of a patch grid against a constant label, with d/dscores.
struct PatchBce {
    double value = 0.0;
    Tensor grad;
};
PatchBce patch_bce(const Tensor& scores, double label, const ProbPolicy& policy = {});

// (1) L_D = BCE(D(G(E(src))), source) + BCE(D(G(E(tgt))), target); Adam on D only.
StepLosses step_discriminator(ModelState& model, const Sample& src, const Sample& tgt, const StepOptions& opts,
                              Rng& noise_rng);

// (2) L_G = flipped-label BCE + recon_weight * L1 reconstruction over both domains; Adam on G only.
StepLosses step_generator(ModelState& model, const Sample& src, const Sample& tgt, const StepOptions& opts,
                          Rng& noise_rng);

// (3) L_E = cross-domain BCE + segmentation loss on src; Adam on E and S.
// The segmentation gradient follows GradientRule::SignSwitched.
// Throws DataError if src is unlabeled. tgt labels are never read.
StepLosses step_encoder(ModelState& model, const Sample& src, const Sample& tgt, const LossSpec& active_loss,
                        const StepOptions& opts, Rng& noise_rng);

// Per-pixel class probabilities S(E(x)).
Tensor predict_probs(const ModelState& model, const Tensor& features);
// Argmax over S(E(x)); ties resolve to the lowest class index.
LabelMap predict_labels(const ModelState& model, const Tensor& features);

// Frozen batch for the single-step probe: the labels are the model's own
// argmax, and the classifier's logits are scaled up (in place) until every
// ground-truth probability exceeds min_gt_prob. Throws DataError if no scale
// up to 2^20 reaches it (for instance on exact ties).
Sample make_confident_batch(ModelState& model, const Tensor& features, double min_gt_prob);

struct ProbeResult {
    double mean_gt_before = 0.0;
    double mean_gt_after = 0.0;
    double min_gt_before = 0.0;
};

// One encoder step on a copy of the model (no adversarial term) and the mean
// ground-truth probability on the same batch before and after.
ProbeResult encoder_step_probe(const ModelState& model, const Sample& batch, const LossSpec& loss,
                               const AdamHyper& adam, const ProbPolicy& policy = {});

struct EvalResult {
    double mean_iou = 0.0;
    std::vector<std::optional<double>> per_class;
    Confusion confusion;
};

// Throws DataError if any sample is unlabeled.
EvalResult evaluate(const ModelState& model, std::span<const Sample> labeled_set);

struct HistoryRow {
    std::size_t step = 0;  // number of updates performed, 1-based
    StepLosses losses;
    std::optional<double> source_miou;
    std::optional<double> target_miou;
    LossKind active_loss = LossKind::CrossEntropy;
};

struct RunHistory {
    std::vector<HistoryRow> rows;
    bool aborted = false;
    std::string abort_reason;

    std::optional<double> final_target_miou() const;
    // Step of the best target mIoU (first occurrence) and of the last evaluation.
    std::optional<std::size_t> best_target_step() const;
    std::optional<std::size_t> last_eval_step() const;
};

inline constexpr const char* kHistoryHeader =
    "step,l_gan_d,l_gan_g,l_gan_e,l_rec,l_seg_s,source_miou,target_miou,active_loss";

void write_history_csv(const RunHistory& history, const std::filesystem::path& path);

struct TrainOutcome {
    ModelState model;
    RunHistory history;
};

// Alternating updates (1)(2)(3) per step with one source and one target sample;
// SegOnly skips (1)(2) and the adversarial term of (3). Evaluates source_eval
// and target_eval after every eval_every-th update. A NumericError stops the
// run and marks the history aborted.
TrainOutcome run_training(const Dataset& data, const ModelConfig& model_config, const TrainSchedule& schedule,
                          Variant variant);

}  // namespace consloss
