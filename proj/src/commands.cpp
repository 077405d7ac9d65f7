#include "consloss/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <thread>

#include "consloss/errors.hpp"
#include "consloss/plot.hpp"

namespace consloss {

using nlohmann::json;

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

GradcheckLine loss_check(const LossSpec& spec, std::uint64_t seed, bool fault) {
    constexpr double h = 1e-6;
    Rng rng(seed);
    std::vector<double> analytic, numeric;
    for (int i = 0; i < 100; ++i) {
        const double p = rng.uniform(0.01, 0.99);
        analytic.push_back(eval_grad(spec, p));
        numeric.push_back((eval_loss(spec, p + h) - eval_loss(spec, p - h)) / (2.0 * h));
    }
    if (fault) {
        auto it = std::max_element(analytic.begin(), analytic.end(),
                                   [](double a, double b) { return std::abs(a) < std::abs(b); });
        *it *= 2.0;
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / std::max(1.0, std::abs(analytic[i])));
    }
    return {"loss " + describe(spec), worst, 1e-5};
}

Tensor random_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
    Tensor t(shape);
    for (auto& v : t.storage()) v = rng.uniform(lo, hi);
    return t;
}

// 0.5 * sum c_i (o_i - t_i)^2 with random weights and targets.
Objective weighted_quadratic(const Shape& shape, Rng& rng) {
    auto c = std::make_shared<Tensor>(random_tensor(shape, rng, 0.5, 1.5));
    auto t = std::make_shared<Tensor>(random_tensor(shape, rng, -0.5, 0.5));
    return {[c, t](const Tensor& o) {
                double s = 0.0;
                for (std::size_t i = 0; i < o.size(); ++i) s += 0.5 * (*c)[i] * (o[i] - (*t)[i]) * (o[i] - (*t)[i]);
                return s;
            },
            [c, t](const Tensor& o) {
                Tensor g(o.shape());
                for (std::size_t i = 0; i < o.size(); ++i) g[i] = (*c)[i] * (o[i] - (*t)[i]);
                return g;
            }};
}

// Mean -log p at random per-pixel labels over an H x W x K probability map.
Objective random_label_nll(const Shape& shape, Rng& rng) {
    auto labels = std::make_shared<std::vector<std::size_t>>();
    for (std::size_t i = 0; i < shape[0] * shape[1]; ++i) labels->push_back(rng.index(shape[2]));
    const std::size_t k = shape[2];
    const double n = static_cast<double>(labels->size());
    return {[labels, k, n](const Tensor& o) {
                double s = 0.0;
                for (std::size_t i = 0; i < labels->size(); ++i) s -= std::log(o[i * k + (*labels)[i]]);
                return s / n;
            },
            [labels, k, n](const Tensor& o) {
                Tensor g(o.shape());
                for (std::size_t i = 0; i < labels->size(); ++i) {
                    g[i * k + (*labels)[i]] = -1.0 / (n * o[i * k + (*labels)[i]]);
                }
                return g;
            }};
}

GradcheckLine net_check(const std::string& name, std::vector<LayerSpec> layers, const Shape& input_shape,
                        bool nll, std::uint64_t seed, bool fault) {
    Network net(std::move(layers), derive_seed(seed, {0}));
    Rng rng(derive_seed(seed, {1}));
    const Tensor input = random_tensor(input_shape, rng, -1.0, 1.0);
    const Shape out_shape = net.output_shape(input_shape);
    const Objective obj = nll ? random_label_nll(out_shape, rng) : weighted_quadratic(out_shape, rng);
    std::optional<GradFault> planted;
    if (fault) planted = GradFault{0, 2.0};
    return {"network " + name, finite_diff_check(net, input, obj, 1e-5, planted), 1e-4};
}

std::string start_name(bool cold) { return cold ? "cold" : "warm"; }

std::string csv_cell(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

// Rows in output order: tables in first-appearance order, each sorted by mean desc.
std::vector<std::pair<std::size_t, const CompareRow*>> ranked(const std::vector<CompareRow>& rows) {
    std::vector<std::string> tables;
    for (const auto& r : rows) {
        if (std::find(tables.begin(), tables.end(), r.entry.table) == tables.end()) tables.push_back(r.entry.table);
    }
    std::vector<std::pair<std::size_t, const CompareRow*>> out;
    for (const auto& t : tables) {
        std::vector<const CompareRow*> group;
        for (const auto& r : rows) {
            if (r.entry.table == t) group.push_back(&r);
        }
        std::stable_sort(group.begin(), group.end(), [](const CompareRow* a, const CompareRow* b) {
            const double ma = a->mean(), mb = b->mean();
            if (std::isnan(mb)) return !std::isnan(ma);
            if (std::isnan(ma)) return false;
            return ma > mb;
        });
        for (std::size_t i = 0; i < group.size(); ++i) out.emplace_back(i + 1, group[i]);
    }
    return out;
}

std::string miou_cell(std::optional<double> v) { return v ? fmt("%.6f", *v) : std::string(); }

}  // namespace

ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& path) {
    if (!path) {
        ExperimentConfig c;
        c.validate();
        return c;
    }
    return load_experiment_config(*path);
}

TrainSchedule schedule_for(const ExperimentConfig& config, const RosterEntry& entry, std::uint64_t seed) {
    TrainSchedule s = config.schedule;
    if (!entry.cold_start && config.schedule.cold_start()) s.warm_start_steps = s.total_steps / 2;
    s.set_main_loss(entry.loss, entry.cold_start);
    if (entry.loss.kind == LossKind::Conservative && entry.cold_start && entry.loss.clamp) {
        s.seg_loss_main.clamp = entry.loss.clamp;
    }
    s.seed = seed;
    s.validate();
    return s;
}

// ---------------------------------------------------------------- plot-loss

int cmd_plot_loss(const PlotLossOptions& opts, std::ostream& log) {
    if (opts.roster != "conservative" && opts.roster != "homogeneous" && opts.roster != "all") {
        throw ConfigError("--roster", "expected conservative, homogeneous or all");
    }
    for (double a : opts.bases) {
        if (!(a > 1.0) || !std::isfinite(a)) throw ConfigError("--bases", "every base must be > 1");
    }
    if (!(opts.lambda > 0.0)) throw ConfigError("--lambda", "must be positive");
    ensure_dir(opts.out);
    if (opts.roster != "homogeneous") {
        const auto plot = conservative_loss_plot(opts.bases, opts.lambda);
        write_text_file(opts.out / "loss_conservative.svg", render_svg(plot));
        write_text_file(opts.out / "loss_conservative.csv", series_csv(plot));
        log << "wrote " << (opts.out / "loss_conservative.svg").string() << "\n";
        for (double a : opts.bases) log << "  a = " << fmt("%.6g", a) << ": zero at p = " << fmt("%.6f", 1.0 / a) << "\n";
    }
    if (opts.roster != "conservative") {
        const auto plot = homogeneous_loss_plot();
        write_text_file(opts.out / "loss_homogeneous.svg", render_svg(plot));
        write_text_file(opts.out / "loss_homogeneous.csv", series_csv(plot));
        log << "wrote " << (opts.out / "loss_homogeneous.svg").string() << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------- gradcheck

bool GradcheckReport::pass() const {
    return std::all_of(lines.begin(), lines.end(), [](const GradcheckLine& l) { return l.pass(); });
}

std::string GradcheckReport::text() const {
    std::string out;
    for (const auto& l : lines) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-4s %-44s max_rel_err %.3e (tol %.0e)\n", l.pass() ? "ok" : "FAIL",
                      l.name.c_str(), l.max_rel_error, l.tolerance);
        out += buf;
    }
    out += pass() ? "gradcheck: all checks passed\n" : "gradcheck: FAILED\n";
    return out;
}

GradcheckReport run_gradcheck(std::uint64_t seed, bool plant_fault) {
    GradcheckReport r;
    const LossSpec losses[] = {LossSpec::cross_entropy(),         LossSpec::focal(),
                               LossSpec::conservative(kEuler, 5.0), LossSpec::cubic1(60.0),
                               LossSpec::cubic2(60.0),           LossSpec::cubic3(300.0, 60.0)};
    std::uint64_t stream = 0;
    for (const auto& spec : losses) {
        r.lines.push_back(loss_check(spec, derive_seed(seed, {100, stream++}), plant_fault));
    }
    r.lines.push_back(net_check("conv-tanh-conv/2-sigmoid",
                                {LayerSpec::conv3x3(2, 4), LayerSpec::tanh(), LayerSpec::conv3x3(4, 3, 2),
                                 LayerSpec::sigmoid()},
                                {6, 6, 2}, false, derive_seed(seed, {200}), plant_fault));
    r.lines.push_back(net_check("dense-relu-dense-softmax",
                                {LayerSpec::dense(3, 6), LayerSpec::relu(), LayerSpec::dense(6, 4),
                                 LayerSpec::softmax()},
                                {4, 4, 3}, true, derive_seed(seed, {201}), plant_fault));
    r.lines.push_back(net_check("conv-relu-conv-relu-dense-softmax",
                                {LayerSpec::conv3x3(3, 4), LayerSpec::relu(), LayerSpec::conv3x3(4, 4),
                                 LayerSpec::relu(), LayerSpec::dense(4, 3), LayerSpec::softmax()},
                                {5, 5, 3}, true, derive_seed(seed, {202}), plant_fault));
    return r;
}

int cmd_gradcheck(const GradcheckOptions& opts, std::ostream& log) {
    const auto report = run_gradcheck(opts.seed, opts.plant_fault);
    const auto text = report.text();
    log << text;
    if (opts.out) {
        ensure_dir(*opts.out);
        write_text_file(*opts.out / "gradcheck.txt", text);
    }
    return report.pass() ? kExitOk : kExitVerificationFailure;
}

// ---------------------------------------------------------------- gen-data

int cmd_gen_data(const RunOptions& opts, std::ostream& log) {
    ExperimentConfig config = resolve_config(opts.config);
    if (opts.seed_override) config.dataset.seed = *opts.seed_override;
    const Dataset data = make_dataset(config.dataset);
    write_dataset(data, config.dataset, opts.out);
    const auto hist = class_histogram(data, config.dataset.num_classes);
    std::uint64_t total = 0;
    for (auto h : hist) total += h;
    log << "wrote " << (opts.out / "dataset.json").string() << " and dataset.bin\n";
    log << "class pixel histogram (all splits, " << total << " pixels):\n";
    for (std::size_t k = 0; k < hist.size(); ++k) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "  class %2zu: %10llu  (%.4f)\n", k, static_cast<unsigned long long>(hist[k]),
                      static_cast<double>(hist[k]) / static_cast<double>(total));
        log << buf;
    }
    return kExitOk;
}

// ---------------------------------------------------------------- train

int cmd_train(const RunOptions& opts, std::ostream& log) {
    ExperimentConfig config = resolve_config(opts.config);
    if (opts.seed_override) config.schedule.seed = *opts.seed_override;
    Dataset data;
    if (opts.dataset) {
        auto [d, dc] = read_dataset(*opts.dataset);
        data = std::move(d);
        config.dataset = dc;
        config.model.channels = dc.channels;
        config.model.num_classes = dc.num_classes;
        config.validate();
    } else {
        data = make_dataset(config.dataset);
    }
    ensure_dir(opts.out);
    write_text_file(opts.out / "config.json", canonical_dump(to_json(config)) + "\n");

    const auto outcome = run_training(data, config.model, config.schedule, config.variant);
    write_history_csv(outcome.history, opts.out / "history.csv");
    write_text_file(opts.out / "miou.svg", render_svg(miou_plot(outcome.history, config.schedule.warm_start_steps)));
    if (outcome.history.aborted) {
        log << "numeric abort: " << outcome.history.abort_reason << "\n";
        log << "partial history: " << (opts.out / "history.csv").string() << "\n";
        return kExitNumericAbort;
    }
    save_model(outcome.model, opts.out / "checkpoint");
    const auto src = evaluate(outcome.model, data.source_eval);
    const auto tgt = evaluate(outcome.model, data.target_eval);
    write_iou_csv(src.per_class, opts.out / "iou_source.csv");
    write_iou_csv(tgt.per_class, opts.out / "iou_target.csv");
    log << "variant " << to_string(config.variant) << ", main loss " << describe(config.schedule.seg_loss_main)
        << (config.schedule.cold_start() ? " (cold start)" : " (warm start)") << "\n";
    log << "final source mIoU " << fmt("%.4f", src.mean_iou) << ", target mIoU " << fmt("%.4f", tgt.mean_iou) << "\n";
    if (const auto best = outcome.history.best_target_step()) {
        for (const auto& row : outcome.history.rows) {
            if (row.step == *best) log << "best target mIoU " << fmt("%.4f", *row.target_miou) << " at step " << *best << "\n";
        }
    }
    log << "outputs in " << opts.out.string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------- compare

double CompareRow::mean() const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& v : final_target) {
        if (v) {
            s += *v;
            ++n;
        }
    }
    return n ? s / static_cast<double>(n) : std::nan("");
}

std::size_t CompareRow::aborted() const {
    return static_cast<std::size_t>(std::count(final_target.begin(), final_target.end(), std::nullopt));
}

std::vector<CompareRow> run_battery(const Dataset& data, const ExperimentConfig& config, std::size_t parallel) {
    std::vector<CompareRow> rows;
    std::vector<std::string> unique_hashes;
    std::vector<const RosterEntry*> unique_entries;
    for (const auto& e : config.roster) {
        const TrainSchedule s = schedule_for(config, e, 0);
        json key{{"dataset", to_json(config.dataset)},
                 {"model", to_json(config)["model"]},
                 {"variant", std::string(to_string(e.variant))},
                 {"warm_start_steps", s.warm_start_steps},
                 {"total_steps", s.total_steps},
                 {"eval_every", s.eval_every},
                 {"lr", s.adam.lr},
                 {"recon_weight", s.recon_weight},
                 {"seg_loss_warm", to_json(s.seg_loss_warm)},
                 {"seg_loss_main", to_json(s.seg_loss_main)},
                 {"seeds", config.seeds}};
        const auto hash = config_hash(key);
        rows.push_back({e, hash, {}});
        if (std::find(unique_hashes.begin(), unique_hashes.end(), hash) == unique_hashes.end()) {
            unique_hashes.push_back(hash);
            unique_entries.push_back(&e);
        }
    }

    struct Job {
        std::size_t entry;
        std::size_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t i = 0; i < unique_entries.size(); ++i)
        for (std::size_t s = 0; s < config.seeds.size(); ++s) jobs.push_back({i, s});
    std::vector<std::optional<double>> results(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
            const auto& e = *unique_entries[jobs[j].entry];
            const auto schedule = schedule_for(config, e, config.seeds[jobs[j].seed]);
            const auto outcome = run_training(data, config.model, schedule, e.variant);
            if (!outcome.history.aborted) results[j] = outcome.history.final_target_miou();
        }
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(parallel, jobs.size()));
    std::vector<std::thread> threads;
    for (std::size_t t = 1; t < n_threads; ++t) threads.emplace_back(worker);
    worker();
    for (auto& t : threads) t.join();

    for (auto& row : rows) {
        const auto idx = static_cast<std::size_t>(
            std::find(unique_hashes.begin(), unique_hashes.end(), row.config_hash) - unique_hashes.begin());
        for (std::size_t s = 0; s < config.seeds.size(); ++s) row.final_target.push_back(results[idx * config.seeds.size() + s]);
    }
    return rows;
}

std::string compare_csv(const std::vector<CompareRow>& rows, const std::vector<std::uint64_t>& seeds) {
    std::string out = "table,rank,entry,variant,loss,start,config_hash,mean_target_miou";
    for (auto s : seeds) out += ",seed_" + std::to_string(s);
    out += ",aborted\n";
    for (const auto& [rank, r] : ranked(rows)) {
        const double m = r->mean();
        out += csv_cell(r->entry.table) + "," + std::to_string(rank) + "," + csv_cell(r->entry.name) + "," +
               std::string(to_string(r->entry.variant)) + "," + csv_cell(describe(r->entry.loss)) + "," +
               start_name(r->entry.cold_start) + "," + r->config_hash + "," + (std::isnan(m) ? "" : fmt("%.6f", m));
        for (const auto& v : r->final_target) out += "," + miou_cell(v);
        out += "," + std::to_string(r->aborted()) + "\n";
    }
    return out;
}

std::string compare_text(const std::vector<CompareRow>& rows, const std::vector<std::uint64_t>& seeds) {
    std::string out;
    std::string current;
    for (const auto& [rank, r] : ranked(rows)) {
        if (r->entry.table != current) {
            current = r->entry.table;
            out += (out.empty() ? "" : "\n") + std::string("[") + current + "]  final target mIoU, mean over " +
                   std::to_string(seeds.size()) + " seed(s)\n";
        }
        const double m = r->mean();
        char buf[256];
        std::snprintf(buf, sizeof buf, "  %2zu. %-16s %-12s %-28s %-5s %s  %s", rank, r->entry.name.c_str(),
                      std::string(to_string(r->entry.variant)).c_str(), describe(r->entry.loss).c_str(),
                      start_name(r->entry.cold_start).c_str(), std::isnan(m) ? "   n/a" : fmt("%.4f", m).c_str(),
                      r->config_hash.c_str());
        out += buf;
        if (r->aborted()) out += "  (" + std::to_string(r->aborted()) + " aborted)";
        out += "\n";
    }
    return out;
}

int cmd_compare(const RunOptions& opts, std::ostream& log) {
    ExperimentConfig config = resolve_config(opts.config);
    if (opts.seed_override) {
        for (std::size_t i = 0; i < config.seeds.size(); ++i) config.seeds[i] = *opts.seed_override + i;
    }
    if (opts.parallel == 0) throw ConfigError("--parallel", "must be at least 1");
    const Dataset data = make_dataset(config.dataset);
    ensure_dir(opts.out);
    write_text_file(opts.out / "config.json", canonical_dump(to_json(config)) + "\n");
    const auto rows = run_battery(data, config, opts.parallel);
    write_text_file(opts.out / "compare.csv", compare_csv(rows, config.seeds));
    const auto text = compare_text(rows, config.seeds);
    write_text_file(opts.out / "compare.txt", text);
    log << text;
    return kExitOk;
}

// ---------------------------------------------------------------- export-features

std::string export_features_csv(const ModelState& model, const Dataset& data, std::size_t stride) {
    if (stride == 0) throw ConfigError("export.pixel_stride", "must be positive");
    const std::size_t width = model.config.embed_width;
    std::string out = "domain,class";
    for (std::size_t f = 0; f < width; ++f) out += ",feat_" + std::to_string(f);
    out += "\n";
    for (const auto* split : {&data.source_eval, &data.target_eval}) {
        for (const auto& s : *split) {
            if (s.features.rank() != 3 || s.features.dim(2) != model.config.channels) {
                throw StructuralError("sample has " + shape_string(s.features.shape()) + " but the checkpoint expects " +
                                      std::to_string(model.config.channels) + " channels");
            }
            const auto trace = model.encoder.forward(s.features, Mode::Eval);
            const Tensor& emb = trace.output();
            const char* domain = s.domain == Domain::Source ? "source" : "target";
            for (std::size_t y = 0; y < emb.dim(0); y += stride) {
                for (std::size_t x = 0; x < emb.dim(1); x += stride) {
                    out += domain;
                    out += "," + std::to_string(s.labels(y, x));
                    for (std::size_t f = 0; f < width; ++f) out += "," + fmt("%.10g", emb.at(y, x, f));
                    out += "\n";
                }
            }
        }
    }
    return out;
}

int cmd_export_features(const RunOptions& opts, std::ostream& log) {
    if (!opts.checkpoint) throw ConfigError("--checkpoint", "a checkpoint directory is required");
    ExperimentConfig config = resolve_config(opts.config);
    const ModelState model = load_model(*opts.checkpoint);
    Dataset data;
    if (opts.dataset) {
        data = read_dataset(*opts.dataset).first;
    } else {
        data = make_dataset(config.dataset);
    }
    const std::size_t stride = opts.stride.value_or(config.export_stride);
    ensure_dir(opts.out);
    const auto csv = export_features_csv(model, data, stride);
    write_text_file(opts.out / "features.csv", csv);
    log << "wrote " << std::count(csv.begin(), csv.end(), '\n') - 1 << " rows to "
        << (opts.out / "features.csv").string() << "\n";
    return kExitOk;
}

}  // namespace consloss
