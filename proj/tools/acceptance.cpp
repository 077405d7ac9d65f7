// Acceptance report: one PASS/FAIL line per criterion, exit 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "consloss/commands.hpp"
#include "consloss/errors.hpp"

using namespace consloss;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = true;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<double> grid(std::size_t n = 10000) {
    std::vector<double> g(n);
    const double lo = 1e-6, hi = 1.0 - 1e-6;
    for (std::size_t i = 0; i < n; ++i) g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return g;
}

const std::vector<double> kBases{2.0, kEuler, 3.0, 4.0};
const std::vector<std::uint64_t> kSeeds{0, 1, 2};

Verdict anchors() {
    const auto cl = LossSpec::conservative(kEuler, 1.0);
    const double a = eval_loss(cl, 0.9), b = eval_loss(cl, 0.1);
    const double z = eval_loss(cl, kInvEuler), g = eval_grad(cl, kInvEuler);
    Verdict v;
    v.pass = std::abs(a + 1.80) <= 0.01 && std::abs(b - 1.42) <= 0.01 && std::abs(z) <= 1e-12 && std::abs(g) <= 1e-9;
    v.detail = "L(0.9)=" + fmt("%.4f", a) + " L(0.1)=" + fmt("%.4f", b) + " L(1/e)=" + fmt("%.1e", z) +
               " L'(1/e)=" + fmt("%.1e", g);
    return v;
}

Verdict sign_monotone() {
    Verdict v;
    std::size_t bad = 0;
    for (double a : kBases) {
        const auto cl = LossSpec::conservative(a, 1.0);
        double prev = INFINITY;
        for (double p : grid()) {
            const double l = eval_loss(cl, p);
            if (p < 1.0 / a && !(l > 0.0)) ++bad;
            if (p > 1.0 / a && !(l < 0.0)) ++bad;
            if (l > prev) ++bad;
            prev = l;
        }
    }
    v.pass = bad == 0;
    v.detail = std::to_string(bad) + " violations over 4 bases x 10000 points";
    return v;
}

Verdict gradient_oracles() {
    const auto report = run_gradcheck(0, false);
    Verdict v;
    v.pass = report.pass() && report.lines.size() == 9;
    double worst_loss = 0.0, worst_net = 0.0;
    for (const auto& l : report.lines) {
        double& w = l.tolerance < 5e-5 ? worst_loss : worst_net;
        w = std::max(w, l.max_rel_error);
    }
    v.detail = "losses max rel " + fmt("%.2e", worst_loss) + " (<1e-5), nets max rel " + fmt("%.2e", worst_net) +
               " (<1e-4)";
    return v;
}

Verdict lambda_linearity() {
    double worst = 0.0;
    for (double a : kBases) {
        const auto one = LossSpec::conservative(a, 1.0), five = LossSpec::conservative(a, 5.0);
        for (double p : grid()) worst = std::max(worst, std::abs(eval_loss(five, p) - 5.0 * eval_loss(one, p)));
    }
    return {worst <= 1e-12, "max |L5 - 5 L1| = " + fmt("%.1e", worst)};
}

Verdict zero_points() {
    double worst = 0.0;
    auto at = [&](const LossSpec& s, double expected) {
        const auto z = zero_point(s);
        if (!z) {
            worst = INFINITY;
            return;
        }
        worst = std::max({worst, std::abs(*z - expected), std::abs(eval_loss(s, expected))});
    };
    for (double a : kBases) at(LossSpec::conservative(a, 1.0), 1.0 / a);
    at(LossSpec::cubic1(60.0), 0.5);
    at(LossSpec::cubic2(60.0), kInvEuler);
    const auto c3 = LossSpec::cubic3(300.0, 60.0);
    at(c3, kInvEuler);
    const double below = eval_loss(c3, std::nextafter(kInvEuler, 0.0));
    const double above = eval_loss(c3, std::nextafter(kInvEuler, 1.0));
    const double jump = std::abs(above - below);
    return {worst <= 1e-12 && jump <= 1e-12,
            "max zero-point error " + fmt("%.1e", worst) + ", Cubic3 jump at 1/e " + fmt("%.1e", jump)};
}

struct Panel {
    std::map<std::string, std::vector<double>> final_target;  // entry name -> per seed
    std::vector<RunHistory> seg_only_histories;
    double seg_only_seconds = 0.0;
    double ablation_seconds = 0.0;  // includes the seg-only runs
};

Panel run_panel(const ExperimentConfig& config, const Dataset& data) {
    Panel panel;
    const auto roster = default_roster();
    auto entry = [&](const std::string& name) {
        return *std::find_if(roster.begin(), roster.end(), [&](const RosterEntry& e) { return e.name == name; });
    };
    auto t0 = Clock::now();
    const auto seg_only = entry("seg_only+CE");
    for (auto seed : kSeeds) {
        auto out = run_training(data, config.model, schedule_for(config, seg_only, seed), seg_only.variant);
        panel.final_target["seg_only+CE"].push_back(out.history.final_target_miou().value_or(NAN));
        panel.seg_only_histories.push_back(std::move(out.history));
    }
    panel.seg_only_seconds = seconds_since(t0);
    // the seg-only runs double as the baseline of the ablation
    for (const char* name : {"seg+GAN+CE", "seg+GAN+CL", "CL cold"}) {
        const auto e = entry(name);
        for (auto seed : kSeeds) {
            const auto out = run_training(data, config.model, schedule_for(config, e, seed), e.variant);
            panel.final_target[name].push_back(out.history.final_target_miou().value_or(NAN));
        }
    }
    // "CL warm" is the same configuration as seg+GAN+CL
    panel.final_target["CL warm"] = panel.final_target["seg+GAN+CL"];
    panel.ablation_seconds = seconds_since(t0);
    return panel;
}

double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}


Verdict peak_before_end(const Panel& panel) {
    int early = 0;
    std::string steps;
    for (const auto& h : panel.seg_only_histories) {
        const auto best = h.best_target_step(), last = h.last_eval_step();
        if (best && last && *best < *last) ++early;
        steps += (steps.empty() ? "" : ", ") + std::to_string(best.value_or(0)) + "/" + std::to_string(last.value_or(0));
    }
    return {early >= 2 && panel.seg_only_seconds < 180.0,
            std::to_string(early) + "/3 seeds peak early (best/last step " + steps + "), " +
                fmt("%.1f", panel.seg_only_seconds) + " s"};
}

Verdict ablation_order(Panel& panel) {
    const double cl = mean(panel.final_target["seg+GAN+CL"]);
    const double ce = mean(panel.final_target["seg+GAN+CE"]);
    const double seg = mean(panel.final_target["seg_only+CE"]);
    return {cl - ce >= 0.01 && ce - seg >= 0.01 && panel.ablation_seconds < 600.0,
            "seg+GAN+CL " + fmt("%.4f", cl) + ", seg+GAN+CE " + fmt("%.4f", ce) + ", seg_only+CE " + fmt("%.4f", seg) +
                " (gaps need >= 0.01), " + fmt("%.1f", panel.ablation_seconds) + " s"};
}

Verdict warm_vs_cold(Panel& panel) {
    const double warm = mean(panel.final_target["CL warm"]);
    const double cold = mean(panel.final_target["CL cold"]);
    return {warm >= cold - 0.005, "warm " + fmt("%.4f", warm) + ", cold " + fmt("%.4f", cold)};
}

Verdict ascend_probe(const ExperimentConfig& config, const Dataset& data) {
    Verdict v;
    const auto roster = default_roster();
    const RosterEntry seg_only = roster.front();
    for (auto seed : kSeeds) {
        // a CE-trained classifier, then a batch it labels confidently
        auto sched = schedule_for(config, seg_only, seed);
        sched.total_steps = 200;
        sched.warm_start_steps = 200;
        auto model = run_training(data, config.model, sched, Variant::SegOnly).model;
        const Sample batch = make_confident_batch(model, data.source_eval[seed].features, kInvEuler);
        const auto cl = encoder_step_probe(model, batch, LossSpec::conservative(kEuler, 5.0), config.schedule.adam);
        const auto ce = encoder_step_probe(model, batch, LossSpec::cross_entropy(), config.schedule.adam);
        const bool ok = cl.min_gt_before > kInvEuler && cl.mean_gt_after < cl.mean_gt_before &&
                        ce.mean_gt_after > ce.mean_gt_before;
        v.pass = v.pass && ok;
        v.detail += (v.detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": CL " +
                    fmt("%+.2e", cl.mean_gt_after - cl.mean_gt_before) + ", CE " +
                    fmt("%+.2e", ce.mean_gt_after - ce.mean_gt_before);
    }
    return v;
}

// Runs every verb twice with the same inputs and compares all CSV and SVG bytes.
Verdict determinism(const fs::path& work) {
    fs::create_directories(work);
    const fs::path cfg = work / "det.json";
    std::ofstream(cfg) << R"({
  "dataset": {"height": 16, "width": 16, "n_source_train": 12, "n_source_eval": 3, "n_target_train": 12, "n_target_eval": 3},
  "model": {"embed_width": 8, "hidden_width": 8, "disc_width": 8},
  "schedule": {"total_steps": 60},
  "compare": {"seeds": [0, 1], "roster": [
    {"table": "components", "name": "seg_only+CE", "variant": "seg_only", "loss": {"kind": "CrossEntropy"}},
    {"table": "components", "name": "seg+GAN+CL", "loss": {"kind": "Conservative", "base": "e", "lambda": 5}},
    {"table": "start", "name": "CL cold", "loss": {"kind": "Conservative", "lambda": 5, "clamp": [-10, 10]}, "cold_start": true}
  ]}
})";
    std::ostringstream sink;
    for (const char* run : {"a", "b"}) {
        const fs::path d = work / run;
        PlotLossOptions plot;
        plot.out = d / "plot-loss";
        GradcheckOptions grad;
        grad.out = d / "gradcheck";
        RunOptions r;
        r.config = cfg;
        int rc = cmd_plot_loss(plot, sink) | cmd_gradcheck(grad, sink);
        r.out = d / "gen-data";
        rc |= cmd_gen_data(r, sink);
        r.out = d / "train";
        rc |= cmd_train(r, sink);
        r.out = d / "compare";
        r.parallel = 2;
        rc |= cmd_compare(r, sink);
        RunOptions ex;
        ex.config = cfg;
        ex.checkpoint = d / "train" / "checkpoint";
        ex.out = d / "export-features";
        rc |= cmd_export_features(ex, sink);
        if (rc != 0) return {false, std::string("run ") + run + " returned a nonzero exit code"};
    }
    std::size_t files = 0, differ = 0;
    for (const auto& e : fs::recursive_directory_iterator(work / "a")) {
        const auto ext = e.path().extension();
        if (ext != ".csv" && ext != ".svg") continue;
        ++files;
        const auto other = work / "b" / fs::relative(e.path(), work / "a");
        if (slurp(e.path()) != slurp(other)) ++differ;
    }
    return {differ == 0 && files >= 10,
            std::to_string(files) + " CSV/SVG files across six verbs, " + std::to_string(differ) + " differ"};
}

// Instrumented replay of the training loop: every step checks which blocks moved
// and how the adversarial terms were composed.
Verdict isolation(const ExperimentConfig& config, const Dataset& data) {
    constexpr std::size_t kSteps = 50;
    auto sched = config.schedule;
    sched.total_steps = kSteps;
    sched.warm_start_steps = kSteps / 2;
    sched.eval_every = 10;
    std::size_t bad_isolation = 0, bad_terms = 0;

    auto model = build_models(config.model, sched.seed);
    Rng sample_rng(sched.seed ^ 0x5eedULL), noise_rng(sched.seed + 1);
    const StepOptions opts{sched.adam, sched.recon_weight, sched.policy, true};
    for (std::size_t k = 0; k < kSteps; ++k) {
        const Sample& src = data.source_train[sample_rng.index(data.source_train.size())];
        const Sample& tgt = data.target_train[sample_rng.index(data.target_train.size())];
        auto before = model;
        const auto d = step_discriminator(model, src, tgt, opts, noise_rng);
        bad_isolation += !same_values(model.encoder, before.encoder) || !same_values(model.generator, before.generator) ||
                         !same_values(model.classifier, before.classifier) ||
                         same_values(model.discriminator, before.discriminator);
        before = model;
        const auto g = step_generator(model, src, tgt, opts, noise_rng);
        bad_isolation += !same_values(model.encoder, before.encoder) || !same_values(model.discriminator, before.discriminator) ||
                         !same_values(model.classifier, before.classifier) ||
                         same_values(model.generator, before.generator);
        before = model;
        const auto e = step_encoder(model, src, tgt, select_active_loss(sched, k), opts, noise_rng);
        bad_isolation += !same_values(model.generator, before.generator) ||
                         !same_values(model.discriminator, before.discriminator) ||
                         same_values(model.encoder, before.encoder);
        for (const auto* t : {&d.gan_d, &g.gan_g, &e.gan_e}) bad_terms += std::abs(t->total() - (t->source + t->target)) > 1e-12;
        bad_terms += d.gan_d.source_label != kSourceLabel || d.gan_d.target_label != kTargetLabel;
        bad_terms += e.gan_e.source_label != 1.0 - d.gan_d.source_label || e.gan_e.target_label != 1.0 - d.gan_d.target_label;
        bad_terms += g.gan_g.source_label != 1.0 - d.gan_d.source_label || g.gan_g.target_label != 1.0 - d.gan_d.target_label;
    }

    // target training labels: scrambling them must change nothing
    auto scrambled = data;
    for (auto& s : scrambled.target_train)
        for (auto& id : s.labels.ids) id = (id + 1) % static_cast<int>(config.dataset.num_classes);
    const auto a = run_training(data, config.model, sched, Variant::SegPlusGan);
    const auto b = run_training(scrambled, config.model, sched, Variant::SegPlusGan);
    bool leak = !same_values(a.model.encoder, b.model.encoder) || !same_values(a.model.classifier, b.model.classifier) ||
                a.history.rows.size() != b.history.rows.size();
    for (std::size_t i = 0; !leak && i < a.history.rows.size(); ++i)
        leak = a.history.rows[i].losses.l_seg_s != b.history.rows[i].losses.l_seg_s ||
               a.history.rows[i].target_miou != b.history.rows[i].target_miou;

    return {bad_isolation == 0 && bad_terms == 0 && !leak,
            std::to_string(kSteps) + " steps: " + std::to_string(bad_isolation) + " isolation, " +
                std::to_string(bad_terms) + " composition/flip violations; target-label leakage " + (leak ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "consloss_acceptance";
    fs::remove_all(work);
    fs::create_directories(work);

    int failed = 0;
    auto report = [&](int id, const char* name, const std::function<Verdict()>& check) {
        const auto t0 = Clock::now();
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        failed += !v.pass;
        std::cout << (v.pass ? "PASS" : "FAIL") << " " << id << " " << name << ": " << v.detail << " ["
                  << fmt("%.1f", seconds_since(t0)) << " s]" << std::endl;
    };

    const ExperimentConfig config;
    const Dataset data = make_dataset(config.dataset);
    report(1, "loss anchors", anchors);
    report(2, "sign and monotonicity", sign_monotone);
    report(3, "gradient oracles", gradient_oracles);
    report(4, "lambda linearity", lambda_linearity);
    report(5, "zero points", zero_points);
    Panel panel;
    bool have_panel = false;
    auto ensure_panel = [&] {
        if (!have_panel) panel = run_panel(config, data);
        have_panel = true;
    };
    report(6, "target peak before the end (seg_only+CE)", [&] {
        ensure_panel();
        return peak_before_end(panel);
    });
    report(7, "ablation ordering", [&] {
        ensure_panel();
        return ablation_order(panel);
    });
    report(8, "warm start vs cold start", [&] {
        ensure_panel();
        return warm_vs_cold(panel);
    });
    report(9, "gradient-ascend probe", [&] { return ascend_probe(config, data); });
    report(10, "determinism", [&] { return determinism(work / "determinism"); });
    report(11, "isolation invariants", [&] { return isolation(config, data); });
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
    return failed ? 1 : 0;
}
