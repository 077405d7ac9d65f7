#include "consloss/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <utility>

#include "consloss/errors.hpp"

namespace consloss {

namespace {

struct GanPass {
    ForwardTrace enc;
    ForwardTrace gen;
    ForwardTrace disc;
};

GanPass forward_gan(const ModelState& m, const Tensor& x, Rng& rng) {
    GanPass pass;
    pass.enc = m.encoder.forward(x, Mode::Train, &rng);
    pass.gen = m.generator.forward(pass.enc.output(), Mode::Train, &rng);
    pass.disc = m.discriminator.forward(pass.gen.output(), Mode::Train, &rng);
    return pass;
}

void require_finite(double v, const char* what, std::size_t step_hint = 0) {
    if (!std::isfinite(v)) {
        throw NumericError(std::string("non-finite ") + what + (step_hint ? " at step " + std::to_string(step_hint) : ""));
    }
}

// Diverged weights show up as NaN/inf activations before any loss sees them.
const Tensor& require_finite(const Tensor& t, const char* what) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t[i])) throw NumericError(std::string("non-finite ") + what);
    return t;
}

void add_into(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Mean |a - b| and its gradient with respect to a, scaled by weight.
double l1_with_grad(const Tensor& a, const Tensor& b, double weight, Tensor& grad) {
    if (!a.same_shape(b)) {
        throw StructuralError("reconstruction " + shape_string(a.shape()) + " does not match input " +
                              shape_string(b.shape()));
    }
    const double inv_n = 1.0 / static_cast<double>(a.size());
    double total = 0.0;
    grad = Tensor(a.shape(), 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        total += std::abs(d);
        grad[i] = weight * inv_n * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
    }
    return total * inv_n;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

ModelState build_models(const ModelConfig& c, std::uint64_t seed) {
    if (c.channels == 0 || c.num_classes == 0 || c.embed_width == 0 || c.hidden_width == 0 || c.disc_width == 0) {
        throw StructuralError("model widths must be positive");
    }
    ModelState m;
    m.config = c;
    m.encoder = Network({LayerSpec::conv3x3(c.channels, c.hidden_width), LayerSpec::relu(),
                         LayerSpec::conv3x3(c.hidden_width, c.embed_width), LayerSpec::relu()},
                        derive_seed(seed, {1}));
    m.generator = Network({LayerSpec::gaussian_noise(c.gen_noise_std), LayerSpec::conv3x3(c.embed_width, c.hidden_width),
                           LayerSpec::relu(), LayerSpec::conv3x3(c.hidden_width, c.channels), LayerSpec::tanh()},
                          derive_seed(seed, {2}));
    m.discriminator = Network({LayerSpec::conv3x3(c.channels, c.disc_width, 2), LayerSpec::relu(),
                               LayerSpec::conv3x3(c.disc_width, 1, 2), LayerSpec::sigmoid()},
                              derive_seed(seed, {3}));
    m.classifier = Network({LayerSpec::dense(c.embed_width, c.num_classes), LayerSpec::softmax()}, derive_seed(seed, {4}));
    return m;
}

void check_model_shapes(const ModelState& m, std::size_t height, std::size_t width) {
    const Shape input{height, width, m.config.channels};
    const Shape embed = m.encoder.output_shape(input);
    if (embed != Shape{height, width, m.config.embed_width}) {
        throw StructuralError("encoder output " + shape_string(embed) + " is not the declared embedding shape");
    }
    if (m.generator.output_shape(embed) != input) throw StructuralError("generator does not reconstruct the input shape");
    if (m.classifier.output_shape(embed) != Shape{height, width, m.config.num_classes}) {
        throw StructuralError("classifier output does not match H x W x K");
    }
    m.discriminator.output_shape(input);
}

void save_model(const ModelState& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_network(model.encoder, dir / "encoder.ckpt");
    save_network(model.generator, dir / "generator.ckpt");
    save_network(model.discriminator, dir / "discriminator.ckpt");
    save_network(model.classifier, dir / "classifier.ckpt");
}

ModelState load_model(const std::filesystem::path& dir) {
    ModelState m;
    m.encoder = load_network(dir / "encoder.ckpt");
    m.generator = load_network(dir / "generator.ckpt");
    m.discriminator = load_network(dir / "discriminator.ckpt");
    m.classifier = load_network(dir / "classifier.ckpt");
    const auto& enc = m.encoder.layers();
    const auto& gen = m.generator.layers();
    const auto& disc = m.discriminator.layers();
    const auto& cls = m.classifier.layers();
    if (enc.size() != 4 || gen.size() != 5 || disc.size() != 4 || cls.size() != 2 || enc[0].kind != LayerKind::Conv3x3 ||
        gen[0].kind != LayerKind::GaussianNoise || cls[0].kind != LayerKind::Dense) {
        throw StructuralError("checkpoint directory does not hold an encoder/generator/discriminator/classifier set");
    }
    m.config.channels = enc[0].in;
    m.config.hidden_width = enc[0].out;
    m.config.embed_width = enc[2].out;
    m.config.num_classes = cls[0].out;
    m.config.disc_width = disc[0].out;
    m.config.gen_noise_std = gen[0].noise_std;
    if (cls[0].in != m.config.embed_width || gen[1].in != m.config.embed_width || gen[3].out != m.config.channels ||
        disc[0].in != m.config.channels) {
        throw StructuralError("checkpoint blocks disagree on embedding or channel sizes");
    }
    return m;
}

std::string_view to_string(Variant v) { return v == Variant::SegOnly ? "seg_only" : "seg_plus_gan"; }

std::optional<Variant> parse_variant(std::string_view name) {
    if (name == "seg_only") return Variant::SegOnly;
    if (name == "seg_plus_gan") return Variant::SegPlusGan;
    return std::nullopt;
}

void TrainSchedule::set_main_loss(LossSpec main, bool cold) {
    if (main.kind == LossKind::Conservative) main.clamp = cold ? std::optional<ClampRange>(ClampRange{}) : std::nullopt;
    seg_loss_main = main;
    if (cold) warm_start_steps = 0;
}

void TrainSchedule::validate() const {
    if (total_steps == 0) throw ConfigError("schedule.total_steps", "must be positive");
    if (warm_start_steps > total_steps) throw ConfigError("schedule.warm_start_steps", "exceeds total_steps");
    if (eval_every == 0) throw ConfigError("schedule.eval_every", "must be positive");
    if (!(adam.lr >= 0.0)) throw ConfigError("schedule.lr", "must be >= 0");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) throw ConfigError("schedule.beta1", "must be in [0, 1)");
    if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) throw ConfigError("schedule.beta2", "must be in [0, 1)");
    if (!(recon_weight >= 0.0)) throw ConfigError("schedule.recon_weight", "must be >= 0");
    if (!(policy.eps > 0.0 && policy.eps < 0.5)) throw ConfigError("schedule.prob_eps", "must be in (0, 0.5)");
    try {
        seg_loss_warm.validate();
    } catch (const DomainError& e) {
        throw ConfigError("schedule.seg_loss_warm", e.what());
    }
    try {
        seg_loss_main.validate();
    } catch (const DomainError& e) {
        throw ConfigError("schedule.seg_loss_main", e.what());
    }
    if (seg_loss_main.kind == LossKind::Conservative) {
        if (cold_start() && !seg_loss_main.clamp) {
            throw ConfigError("schedule.seg_loss_main.clamp", "cold start requires a clamped Conservative loss");
        }
        if (!cold_start() && seg_loss_main.clamp) {
            throw ConfigError("schedule.seg_loss_main.clamp", "warm start uses the unclamped Conservative loss");
        }
    }
}

const LossSpec& select_active_loss(const TrainSchedule& schedule, std::size_t step) {
    return step < schedule.warm_start_steps ? schedule.seg_loss_warm : schedule.seg_loss_main;
}

PatchBce patch_bce(const Tensor& scores, double label, const ProbPolicy& policy) {
    PatchBce out{0.0, Tensor(scores.shape(), 0.0)};
    const double inv_n = 1.0 / static_cast<double>(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double raw = scores[i];
        const double q = clamp_probability(raw, policy);
        out.value -= inv_n * (label * std::log(q) + (1.0 - label) * std::log(1.0 - q));
        if (q == raw) out.grad[i] = -inv_n * (label / q - (1.0 - label) / (1.0 - q));
    }
    return out;
}

StepLosses step_discriminator(ModelState& model, const Sample& src, const Sample& tgt, const StepOptions& opts,
                              Rng& noise_rng) {
    const GanPass ps = forward_gan(model, src.features, noise_rng);
    const GanPass pt = forward_gan(model, tgt.features, noise_rng);
    const PatchBce bs = patch_bce(require_finite(ps.disc.output(), "discriminator output"), kSourceLabel, opts.policy);
    const PatchBce bt = patch_bce(require_finite(pt.disc.output(), "discriminator output"), kTargetLabel, opts.policy);
    require_finite(bs.value + bt.value, "discriminator loss");

    model.discriminator.zero_grad();
    model.discriminator.backward(ps.disc, bs.grad);
    model.discriminator.backward(pt.disc, bt.grad);
    model.discriminator.adam_step(opts.adam);

    StepLosses out;
    out.gan_d = {bs.value, bt.value, kSourceLabel, kTargetLabel};
    return out;
}

StepLosses step_generator(ModelState& model, const Sample& src, const Sample& tgt, const StepOptions& opts,
                          Rng& noise_rng) {
    const GanPass ps = forward_gan(model, src.features, noise_rng);
    const GanPass pt = forward_gan(model, tgt.features, noise_rng);
    // Fool D: source reconstructions scored as target and vice versa.
    const PatchBce gs = patch_bce(require_finite(ps.disc.output(), "discriminator output"), kTargetLabel, opts.policy);
    const PatchBce gt = patch_bce(require_finite(pt.disc.output(), "discriminator output"), kSourceLabel, opts.policy);
    Tensor rec_grad_s, rec_grad_t;
    const double rec_s = l1_with_grad(ps.gen.output(), src.features, opts.recon_weight, rec_grad_s);
    const double rec_t = l1_with_grad(pt.gen.output(), tgt.features, opts.recon_weight, rec_grad_t);
    require_finite(gs.value + gt.value + rec_s + rec_t, "generator loss");

    Tensor dgen_s = model.discriminator.backward(ps.disc, gs.grad, ParamGrads::Skip);
    Tensor dgen_t = model.discriminator.backward(pt.disc, gt.grad, ParamGrads::Skip);
    add_into(dgen_s, rec_grad_s);
    add_into(dgen_t, rec_grad_t);
    model.generator.zero_grad();
    model.generator.backward(ps.gen, dgen_s);
    model.generator.backward(pt.gen, dgen_t);
    model.generator.adam_step(opts.adam);

    StepLosses out;
    out.gan_g = {gs.value, gt.value, kTargetLabel, kSourceLabel};
    out.l_rec = rec_s + rec_t;
    return out;
}

StepLosses step_encoder(ModelState& model, const Sample& src, const Sample& tgt, const LossSpec& active_loss,
                        const StepOptions& opts, Rng& noise_rng) {
    if (!src.labeled) throw DataError("encoder step needs a labeled source sample");
    StepLosses out;

    const ForwardTrace enc_s = model.encoder.forward(src.features, Mode::Train, &noise_rng);
    const ForwardTrace cls_s = model.classifier.forward(enc_s.output(), Mode::Train, &noise_rng);
    const PixelwiseLoss seg =
        pixelwise_loss(active_loss, require_finite(cls_s.output(), "class probabilities"), src.labels, opts.policy, GradientRule::SignSwitched);
    require_finite(seg.mean_loss, "segmentation loss");
    out.l_seg_s = seg.mean_loss;

    model.classifier.zero_grad();
    model.encoder.zero_grad();
    Tensor demb_s = model.classifier.backward(cls_s, seg.grad_probs);

    if (opts.use_gan) {
        const ForwardTrace enc_t = model.encoder.forward(tgt.features, Mode::Train, &noise_rng);
        const ForwardTrace gen_s = model.generator.forward(enc_s.output(), Mode::Train, &noise_rng);
        const ForwardTrace gen_t = model.generator.forward(enc_t.output(), Mode::Train, &noise_rng);
        const ForwardTrace disc_s = model.discriminator.forward(gen_s.output(), Mode::Train, &noise_rng);
        const ForwardTrace disc_t = model.discriminator.forward(gen_t.output(), Mode::Train, &noise_rng);
        // Cross-domain update: the flip of the discriminator's labels.
        const PatchBce es = patch_bce(require_finite(disc_s.output(), "discriminator output"), kTargetLabel, opts.policy);
        const PatchBce et = patch_bce(require_finite(disc_t.output(), "discriminator output"), kSourceLabel, opts.policy);
        require_finite(es.value + et.value, "encoder adversarial loss");
        out.gan_e = {es.value, et.value, kTargetLabel, kSourceLabel};

        Tensor g_s = model.discriminator.backward(disc_s, es.grad, ParamGrads::Skip);
        g_s = model.generator.backward(gen_s, g_s, ParamGrads::Skip);
        Tensor g_t = model.discriminator.backward(disc_t, et.grad, ParamGrads::Skip);
        g_t = model.generator.backward(gen_t, g_t, ParamGrads::Skip);
        add_into(demb_s, g_s);
        model.encoder.backward(enc_t, g_t);
    }
    model.encoder.backward(enc_s, demb_s);

    auto params = model.encoder.params();
    for (auto* p : model.classifier.params()) params.push_back(p);
    adam_step(params, opts.adam);
    return out;
}

Tensor predict_probs(const ModelState& model, const Tensor& features) {
    const auto enc = model.encoder.forward(features, Mode::Eval);
    return model.classifier.forward(enc.output(), Mode::Eval).output();
}

LabelMap predict_labels(const ModelState& model, const Tensor& features) {
    const Tensor probs = predict_probs(model, features);
    const std::size_t k = probs.dim(2);
    LabelMap out(probs.dim(0), probs.dim(1));
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (probs[i * k + c] > probs[i * k + best]) best = c;
        out.ids[i] = static_cast<int>(best);
    }
    return out;
}

namespace {

// Mean and minimum of the probability each pixel assigns to its label.
std::pair<double, double> gt_prob_stats(const ModelState& model, const Sample& s) {
    const Tensor probs = predict_probs(model, s.features);
    const std::size_t k = probs.dim(2);
    double sum = 0.0, lo = 1.0;
    for (std::size_t i = 0; i < s.labels.size(); ++i) {
        const double p = probs[i * k + static_cast<std::size_t>(s.labels.ids[i])];
        sum += p;
        lo = std::min(lo, p);
    }
    return {sum / static_cast<double>(s.labels.size()), lo};
}

}  // namespace

Sample make_confident_batch(ModelState& model, const Tensor& features, double min_gt_prob) {
    Sample batch{features, predict_labels(model, features), Domain::Source, true};
    for (int doubling = 0; doubling <= 20; ++doubling) {
        if (gt_prob_stats(model, batch).second > min_gt_prob) return batch;
        for (auto* p : model.classifier.params())
            for (auto& v : p->value.data()) v *= 2.0;
    }
    throw DataError("could not sharpen the classifier past the requested probability");
}

ProbeResult encoder_step_probe(const ModelState& model, const Sample& batch, const LossSpec& loss,
                               const AdamHyper& adam, const ProbPolicy& policy) {
    ModelState copy = model;
    const auto [mean_before, min_before] = gt_prob_stats(copy, batch);
    StepOptions opts{adam, 0.0, policy, false};
    Rng rng(0);
    step_encoder(copy, batch, batch, loss, opts, rng);
    return {mean_before, gt_prob_stats(copy, batch).first, min_before};
}

EvalResult evaluate(const ModelState& model, std::span<const Sample> labeled_set) {
    Confusion conf(model.config.num_classes);
    for (const auto& s : labeled_set) {
        if (!s.labeled) throw DataError("evaluation set contains an unlabeled sample");
        conf.accumulate(predict_labels(model, s.features), s.labels);
    }
    return {mean_iou(conf), iou_per_class(conf), conf};
}

std::optional<double> RunHistory::final_target_miou() const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it)
        if (it->target_miou) return it->target_miou;
    return std::nullopt;
}

std::optional<std::size_t> RunHistory::best_target_step() const {
    std::optional<std::size_t> best;
    double best_v = -1.0;
    for (const auto& r : rows) {
        if (r.target_miou && *r.target_miou > best_v) {
            best_v = *r.target_miou;
            best = r.step;
        }
    }
    return best;
}

std::optional<std::size_t> RunHistory::last_eval_step() const {
    for (auto it = rows.rbegin(); it != rows.rend(); ++it)
        if (it->target_miou) return it->step;
    return std::nullopt;
}

void write_history_csv(const RunHistory& history, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << kHistoryHeader << '\n';
    for (const auto& r : history.rows) {
        const auto& l = r.losses;
        os << r.step << ',' << format_double(l.gan_d.total()) << ',' << format_double(l.gan_g.total()) << ','
           << format_double(l.gan_e.total()) << ',' << format_double(l.l_rec) << ',' << format_double(l.l_seg_s) << ',';
        if (r.source_miou) os << format_double(*r.source_miou);
        os << ',';
        if (r.target_miou) os << format_double(*r.target_miou);
        os << ',' << to_string(r.active_loss) << '\n';
    }
    if (!os) throw IoError("failed writing " + path.string());
}

TrainOutcome run_training(const Dataset& data, const ModelConfig& model_config, const TrainSchedule& schedule,
                          Variant variant) {
    schedule.validate();
    if (data.source_train.empty() || data.target_train.empty() || data.source_eval.empty() ||
        data.target_eval.empty()) {
        throw DataError("training needs non-empty source/target train and eval splits");
    }
    TrainOutcome out{build_models(model_config, schedule.seed), {}};
    ModelState& model = out.model;
    const Tensor& probe = data.source_train.front().features;
    check_model_shapes(model, probe.dim(0), probe.dim(1));

    Rng sample_rng(derive_seed(schedule.seed, {10}));
    Rng noise_rng(derive_seed(schedule.seed, {11}));
    StepOptions opts{schedule.adam, schedule.recon_weight, schedule.policy, variant == Variant::SegPlusGan};

    out.history.rows.reserve(schedule.total_steps);
    for (std::size_t k = 0; k < schedule.total_steps; ++k) {
        const Sample& src = data.source_train[sample_rng.index(data.source_train.size())];
        const Sample& tgt = data.target_train[sample_rng.index(data.target_train.size())];
        const LossSpec& active = select_active_loss(schedule, k);
        HistoryRow row;
        row.step = k + 1;
        row.active_loss = active.kind;
        try {
            if (variant == Variant::SegPlusGan) {
                row.losses.gan_d = step_discriminator(model, src, tgt, opts, noise_rng).gan_d;
                const StepLosses g = step_generator(model, src, tgt, opts, noise_rng);
                row.losses.gan_g = g.gan_g;
                row.losses.l_rec = g.l_rec;
            }
            const StepLosses e = step_encoder(model, src, tgt, active, opts, noise_rng);
            row.losses.gan_e = e.gan_e;
            row.losses.l_seg_s = e.l_seg_s;
        } catch (const NumericError& err) {
            out.history.aborted = true;
            out.history.abort_reason = "step " + std::to_string(k + 1) + ": " + err.what();
            return out;
        }
        row.losses.step = k + 1;
        if ((k + 1) % schedule.eval_every == 0) {
            row.source_miou = evaluate(model, data.source_eval).mean_iou;
            row.target_miou = evaluate(model, data.target_eval).mean_iou;
        }
        out.history.rows.push_back(row);
    }
    return out;
}

}  // namespace consloss
