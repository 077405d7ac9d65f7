#include "doctest.h"

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "consloss/commands.hpp"
#include "consloss/errors.hpp"

using namespace consloss;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::path(CONSLOSS_TEST_TMP) / "cli";

fs::path fresh(const std::string& name) {
    const fs::path dir = kRoot / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Runs the CLI binary; stdout and stderr go to <log>.
int cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string("\"") + CONSLOSS_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

fs::path small_config() {
    fs::create_directories(kRoot);
    const fs::path p = kRoot / "small.json";
    std::ofstream(p) << R"({
  "dataset": {"height": 16, "width": 16, "n_source_train": 12, "n_source_eval": 3, "n_target_train": 12, "n_target_eval": 3},
  "model": {"embed_width": 8, "hidden_width": 8, "disc_width": 8},
  "schedule": {"total_steps": 40},
  "compare": {"seeds": [0, 1], "roster": [
    {"table": "components", "name": "seg_only+CE", "variant": "seg_only", "loss": {"kind": "CrossEntropy"}},
    {"table": "components", "name": "seg+GAN+CL", "loss": {"kind": "Conservative", "base": "e", "lambda": 5}},
    {"table": "start", "name": "CL warm", "loss": {"kind": "Conservative", "base": "e", "lambda": 5}},
    {"table": "start", "name": "CL cold", "loss": {"kind": "Conservative", "lambda": 5, "clamp": [-10, 10]}, "cold_start": true}
  ]},
  "export": {"pixel_stride": 4}
})";
    return p;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells(1);
        bool quoted = false;
        for (char ch : line) {
            if (ch == '"') quoted = !quoted;
            else if (ch == ',' && !quoted) cells.emplace_back();
            else cells.back() += ch;
        }
        rows.push_back(std::move(cells));
    }
    return rows;
}

// Per-class mean embedding over the rows of one domain.
std::map<std::string, std::vector<double>> class_means(const std::vector<std::vector<std::string>>& rows,
                                                       const std::string& domain) {
    std::map<std::string, std::vector<double>> sum;
    std::map<std::string, double> n;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i][0] != domain) continue;
        auto& s = sum[rows[i][1]];
        s.resize(rows[i].size() - 2, 0.0);
        for (std::size_t f = 2; f < rows[i].size(); ++f) s[f - 2] += std::stod(rows[i][f]);
        n[rows[i][1]] += 1.0;
    }
    for (auto& [k, s] : sum)
        for (auto& v : s) v /= n[k];
    return sum;
}

}  // namespace

TEST_CASE("gradcheck passes, is reproducible and catches a planted fault") {
    const auto dir = fresh("gradcheck");
    CHECK(cli("gradcheck --out \"" + (dir / "a").string() + "\"", dir / "a.log") == 0);
    CHECK(cli("gradcheck --out \"" + (dir / "b").string() + "\"", dir / "b.log") == 0);
    CHECK(slurp(dir / "a" / "gradcheck.txt") == slurp(dir / "b" / "gradcheck.txt"));
    CHECK(cli("gradcheck --plant-fault", dir / "fault.log") == 1);

    const auto report = run_gradcheck(0, false);
    CHECK(report.pass());
    REQUIRE(report.lines.size() == 9);
    for (const auto& l : report.lines) CHECK(l.max_rel_error < l.tolerance);
    const auto faulty = run_gradcheck(0, true);
    CHECK_FALSE(faulty.pass());
    std::ostringstream sink;
    GradcheckOptions opts;
    opts.plant_fault = true;
    CHECK(cmd_gradcheck(opts, sink) == kExitVerificationFailure);
}

TEST_CASE("plot-loss writes deterministic SVG and CSV") {
    const auto dir = fresh("plots");
    CHECK(cli("plot-loss --out \"" + (dir / "a").string() + "\"", dir / "a.log") == 0);
    CHECK(cli("plot-loss --out \"" + (dir / "b").string() + "\"", dir / "b.log") == 0);
    for (const char* f : {"loss_conservative.svg", "loss_conservative.csv", "loss_homogeneous.svg", "loss_homogeneous.csv"}) {
        CHECK(fs::exists(dir / "a" / f));
        CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
    }
    CHECK(cli("plot-loss --bases 2,e --lambda 5 --roster conservative --out \"" + (dir / "c").string() + "\"",
              dir / "c.log") == 0);
    CHECK(slurp(dir / "c" / "loss_conservative.csv").rfind("x,a = 2,a = e\n", 0) == 0);
    CHECK_FALSE(fs::exists(dir / "c" / "loss_homogeneous.svg"));
    CHECK(cli("plot-loss --bases 1 --out \"" + (dir / "d").string() + "\"", dir / "d.log") == 2);
    CHECK(cli("plot-loss --bases two --out \"" + (dir / "d").string() + "\"", dir / "d.log") == 2);
}

TEST_CASE("argument and config errors exit 2") {
    const auto dir = fresh("errors");
    CHECK(cli("", dir / "none.log") == 2);
    CHECK(cli("frobnicate", dir / "verb.log") == 2);
    CHECK(cli("train", dir / "noout.log") == 2);
    CHECK(cli("train --out x --no-such-flag", dir / "flag.log") == 2);
    CHECK(cli("train --parallel 2 --out x", dir / "parallel.log") == 2);
    std::ofstream(dir / "bad.json") << R"({"schedule": {"total_steps": 10, "speed": 3}})";
    CHECK(cli("train --config \"" + (dir / "bad.json").string() + "\" --out \"" + (dir / "run").string() + "\"",
              dir / "bad.log") == 2);
    CHECK(slurp(dir / "bad.log").find("schedule.speed") != std::string::npos);
    std::ofstream(dir / "syntax.json") << "{\n  \"schedule\": [\n";
    CHECK(cli("gen-data --config \"" + (dir / "syntax.json").string() + "\" --out \"" + (dir / "d").string() + "\"",
              dir / "syntax.log") == 2);
    CHECK(slurp(dir / "syntax.log").find("line 3") != std::string::npos);
    CHECK(cli("export-features --out x", dir / "ckpt.log") == 2);
    CHECK(cli("--help", dir / "help.log") == 0);
    for (const char* verb : {"plot-loss", "gradcheck", "gen-data", "train", "compare", "export-features"}) {
        CHECK(cli(std::string(verb) + " --help", dir / "verb_help.log") == 0);
        CHECK(slurp(dir / "verb_help.log").find("--out") != std::string::npos);
    }
}

TEST_CASE("gen-data: byte-identical reruns and exact histogram") {
    const auto dir = fresh("gen");
    const auto cfg = small_config();
    CHECK(cli("gen-data --config \"" + cfg.string() + "\" --out \"" + (dir / "a").string() + "\"", dir / "a.log") == 0);
    CHECK(cli("gen-data --config \"" + cfg.string() + "\" --out \"" + (dir / "b").string() + "\"", dir / "b.log") == 0);
    CHECK(slurp(dir / "a" / "dataset.bin") == slurp(dir / "b" / "dataset.bin"));
    CHECK(slurp(dir / "a" / "dataset.json") == slurp(dir / "b" / "dataset.json"));
    CHECK(cli("gen-data --config \"" + cfg.string() + "\" --seed-override 9 --out \"" + (dir / "c").string() + "\"",
              dir / "c.log") == 0);
    CHECK(slurp(dir / "a" / "dataset.bin") != slurp(dir / "c" / "dataset.bin"));

    // recount the labels from the files and compare with the printed histogram
    const auto [data, dc] = read_dataset(dir / "a");
    std::vector<std::uint64_t> count(dc.num_classes, 0);
    std::uint64_t total = 0;
    for (const auto* split : {&data.source_train, &data.source_eval, &data.target_train, &data.target_eval})
        for (const auto& s : *split)
            for (int id : s.labels.ids) {
                ++count[static_cast<std::size_t>(id)];
                ++total;
            }
    const auto log = slurp(dir / "a.log");
    for (std::size_t k = 0; k < count.size(); ++k) {
        char line[96];
        std::snprintf(line, sizeof line, "class %2zu: %10llu  (%.4f)", k, static_cast<unsigned long long>(count[k]),
                      static_cast<double>(count[k]) / static_cast<double>(total));
        CHECK(log.find(line) != std::string::npos);
    }

    std::ofstream(dir / "k1.json") << R"({"dataset": {"num_classes": 1, "height": 8, "width": 8, "n_source_train": 1,
        "n_source_eval": 1, "n_target_train": 1, "n_target_eval": 1}})";
    CHECK(cli("gen-data --config \"" + (dir / "k1.json").string() + "\" --out \"" + (dir / "k1").string() + "\"",
              dir / "k1.log") == 0);
    CHECK(slurp(dir / "k1.log").find("class  0:        256  (1.0000)") != std::string::npos);
}

TEST_CASE("train: outputs, schema, determinism and dataset input") {
    const auto dir = fresh("train");
    const auto cfg = small_config();
    const std::string base = "train --config \"" + cfg.string() + "\" --out \"";
    CHECK(cli(base + (dir / "a").string() + "\"", dir / "a.log") == 0);
    CHECK(cli(base + (dir / "b").string() + "\"", dir / "b.log") == 0);
    for (const char* f : {"history.csv", "miou.svg", "iou_source.csv", "iou_target.csv", "config.json"}) {
        CHECK(fs::exists(dir / "a" / f));
        CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
    }
    for (const char* f : {"encoder.ckpt", "generator.ckpt", "discriminator.ckpt", "classifier.ckpt"})
        CHECK(slurp(dir / "a" / "checkpoint" / f) == slurp(dir / "b" / "checkpoint" / f));
    const auto rows = read_csv(dir / "a" / "history.csv");
    REQUIRE(rows.size() == 41);
    CHECK(slurp(dir / "a" / "history.csv").substr(0, std::string(kHistoryHeader).size() + 1) ==
          std::string(kHistoryHeader) + "\n");
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].size() == 9);
    CHECK(rows[20][8] == "CrossEntropy");
    CHECK(rows[21][8] == "Conservative");
    CHECK(read_csv(dir / "a" / "iou_target.csv")[0] == std::vector<std::string>{"class_id", "iou"});

    // the echoed config reproduces the run
    CHECK(cli("train --config \"" + (dir / "a" / "config.json").string() + "\" --out \"" + (dir / "echo").string() + "\"",
              dir / "echo.log") == 0);
    CHECK(slurp(dir / "echo" / "history.csv") == slurp(dir / "a" / "history.csv"));

    CHECK(cli(base + (dir / "s").string() + "\" --seed-override 5", dir / "s.log") == 0);
    CHECK(slurp(dir / "s" / "history.csv") != slurp(dir / "a" / "history.csv"));

    // a generated dataset gives the same run as inline generation
    CHECK(cli("gen-data --config \"" + cfg.string() + "\" --out \"" + (dir / "data").string() + "\"", dir / "g.log") == 0);
    CHECK(cli(base + (dir / "d").string() + "\" --dataset \"" + (dir / "data").string() + "\"", dir / "d.log") == 0);
    CHECK(slurp(dir / "d" / "history.csv") == slurp(dir / "a" / "history.csv"));
}

TEST_CASE("train: a numeric abort flushes the partial history and exits 3") {
    const auto dir = fresh("abort");
    std::ofstream(dir / "boom.json") << R"({
  "dataset": {"height": 8, "width": 8, "n_source_train": 2, "n_source_eval": 1, "n_target_train": 2, "n_target_eval": 1},
  "schedule": {"total_steps": 30, "lr": 1e300}
})";
    CHECK(cli("train --config \"" + (dir / "boom.json").string() + "\" --out \"" + (dir / "run").string() + "\"",
              dir / "run.log") == 3);
    CHECK(slurp(dir / "run.log").find("numeric abort") != std::string::npos);
    const auto rows = read_csv(dir / "run" / "history.csv");
    CHECK(rows.size() >= 1);
    CHECK(rows.size() < 31);
    CHECK_FALSE(fs::exists(dir / "run" / "checkpoint"));
}

TEST_CASE("compare: one row per entry, hashes, and independence from --parallel") {
    const auto dir = fresh("compare");
    const auto cfg = small_config();
    CHECK(cli("compare --config \"" + cfg.string() + "\" --out \"" + (dir / "p1").string() + "\" --parallel 1",
              dir / "p1.log") == 0);
    CHECK(cli("compare --config \"" + cfg.string() + "\" --out \"" + (dir / "p3").string() + "\" --parallel 3",
              dir / "p3.log") == 0);
    CHECK(slurp(dir / "p1" / "compare.csv") == slurp(dir / "p3" / "compare.csv"));
    CHECK(slurp(dir / "p1" / "compare.txt") == slurp(dir / "p3" / "compare.txt"));
    const auto rows = read_csv(dir / "p1" / "compare.csv");
    REQUIRE(rows.size() == 5);
    CHECK(rows[0] == std::vector<std::string>{"table", "rank", "entry", "variant", "loss", "start", "config_hash",
                                              "mean_target_miou", "seed_0", "seed_1", "aborted"});
    std::map<std::string, std::string> hash_of;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        CHECK(rows[i][6].size() == 16);
        hash_of[rows[i][2]] = rows[i][6];
    }
    // identical configurations share a hash and a result
    CHECK(hash_of["seg+GAN+CL"] == hash_of["CL warm"]);
    CHECK(hash_of["CL warm"] != hash_of["CL cold"]);

    // the compare battery agrees with standalone training
    const auto config = load_experiment_config(cfg);
    const auto data = make_dataset(config.dataset);
    const auto battery = run_battery(data, config, 2);
    const auto& warm = config.roster[2];
    const auto single = run_training(data, config.model, schedule_for(config, warm, 1), warm.variant);
    CHECK(battery[2].final_target[1] == single.history.final_target_miou());
}

TEST_CASE("export-features: rows, classes and adaptation shift") {
    const auto dir = fresh("export");
    const auto cfg = small_config();
    CHECK(cli("train --config \"" + cfg.string() + "\" --out \"" + (dir / "run").string() + "\"", dir / "t.log") == 0);
    CHECK(cli("gen-data --config \"" + cfg.string() + "\" --out \"" + (dir / "data").string() + "\"", dir / "g.log") == 0);
    CHECK(cli("export-features --config \"" + cfg.string() + "\" --checkpoint \"" + (dir / "run" / "checkpoint").string() +
                  "\" --dataset \"" + (dir / "data").string() + "\" --out \"" + (dir / "adapted").string() + "\"",
              dir / "e.log") == 0);
    const auto rows = read_csv(dir / "adapted" / "features.csv");
    // 3 + 3 eval samples, 16 x 16 pixels at stride 4
    REQUIRE(rows.size() == 1 + 6 * 16);
    CHECK(rows[0].size() == 2 + 8);
    CHECK(rows[0][2] == "feat_0");
    CHECK(rows[0][9] == "feat_7");

    const auto [data, dc] = read_dataset(dir / "data");
    std::size_t r = 1;
    for (const auto* split : {&data.source_eval, &data.target_eval})
        for (const auto& s : *split)
            for (std::size_t y = 0; y < 16; y += 4)
                for (std::size_t x = 0; x < 16; x += 4, ++r) {
                    CHECK(rows[r][0] == (split == &data.source_eval ? "source" : "target"));
                    CHECK(rows[r][1] == std::to_string(s.labels(y, x)));
                }

    CHECK(cli("export-features --config \"" + cfg.string() + "\" --checkpoint \"" + (dir / "run" / "checkpoint").string() +
                  "\" --stride 8 --out \"" + (dir / "coarse").string() + "\"",
              dir / "e2.log") == 0);
    CHECK(read_csv(dir / "coarse" / "features.csv").size() == 1 + 6 * 4);

    // the untrained initialisation of the same seed
    const auto config = load_experiment_config(cfg);
    save_model(build_models(config.model, config.schedule.seed), dir / "fresh");
    CHECK(cli("export-features --config \"" + cfg.string() + "\" --checkpoint \"" + (dir / "fresh").string() +
                  "\" --out \"" + (dir / "unadapted").string() + "\"",
              dir / "e3.log") == 0);
    const auto before = class_means(read_csv(dir / "unadapted" / "features.csv"), "target");
    const auto after = class_means(rows, "target");
    double shift = 0.0;
    for (const auto& [k, v] : after)
        for (std::size_t f = 0; f < v.size(); ++f) shift += std::abs(v[f] - before.at(k)[f]);
    CHECK(shift > 0.0);

    // a checkpoint for another channel count is a structural error
    auto wide = config.model;
    wide.channels = 4;
    save_model(build_models(wide, 0), dir / "wide");
    CHECK(cli("export-features --config \"" + cfg.string() + "\" --checkpoint \"" + (dir / "wide").string() +
                  "\" --out \"" + (dir / "bad").string() + "\"",
              dir / "e4.log") == 2);
}

TEST_CASE("default training run stays within the time budget") {
    const auto dir = fresh("budget");
    const auto start = std::chrono::steady_clock::now();
    CHECK(cli("train --out \"" + (dir / "run").string() + "\"", dir / "run.log") == 0);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    MESSAGE("default train took " << seconds << " s");
    CHECK(seconds < 300.0);
}
