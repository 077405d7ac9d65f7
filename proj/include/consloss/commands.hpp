#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "consloss/config.hpp"

namespace consloss {

enum ExitCode : int {
    kExitOk = 0,
    kExitVerificationFailure = 1,
    kExitConfigError = 2,  // also unreadable inputs and shape mismatches
    kExitNumericAbort = 3,
};

// Defaults when no --config is given; otherwise the parsed file.
ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& path);

// Schedule and variant for one roster entry at one seed.
TrainSchedule schedule_for(const ExperimentConfig& config, const RosterEntry& entry, std::uint64_t seed);

struct PlotLossOptions {
    std::vector<double> bases{2.0, kEuler, 3.0, 4.0};
    double lambda = 1.0;
    std::string roster = "all";  // conservative | homogeneous | all
    std::filesystem::path out;
};
int cmd_plot_loss(const PlotLossOptions& opts, std::ostream& log);

struct GradcheckLine {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool pass() const { return max_rel_error < tolerance; }
};
struct GradcheckReport {
    std::vector<GradcheckLine> lines;
    bool pass() const;
    std::string text() const;
};
// Loss suite: six losses x 100 seeded points, h = 1e-6, tolerance 1e-5.
// Network suite: three seeded toy nets, h = 1e-5, tolerance 1e-4.
// plant_fault doubles one analytic gradient entry in every check.
GradcheckReport run_gradcheck(std::uint64_t seed = 0, bool plant_fault = false);

struct GradcheckOptions {
    std::uint64_t seed = 0;
    bool plant_fault = false;
    std::optional<std::filesystem::path> out;  // also write gradcheck.txt there
};
int cmd_gradcheck(const GradcheckOptions& opts, std::ostream& log);

struct RunOptions {
    std::optional<std::filesystem::path> config;
    std::filesystem::path out;
    std::optional<std::uint64_t> seed_override;
    std::size_t parallel = 1;
    std::optional<std::filesystem::path> dataset;     // train / export-features
    std::optional<std::filesystem::path> checkpoint;  // export-features
    std::optional<std::size_t> stride;                // export-features
};

int cmd_gen_data(const RunOptions& opts, std::ostream& log);
int cmd_train(const RunOptions& opts, std::ostream& log);
int cmd_compare(const RunOptions& opts, std::ostream& log);
int cmd_export_features(const RunOptions& opts, std::ostream& log);

// One `compare` row: an entry's final target mIoU per seed.
struct CompareRow {
    RosterEntry entry;
    std::string config_hash;
    std::vector<std::optional<double>> final_target;  // none if the run aborted
    double mean() const;                              // over completed seeds; NaN if none
    std::size_t aborted() const;
};

// Runs every distinct roster configuration once per seed, with up to
// `parallel` runs at a time; results do not depend on `parallel`.
std::vector<CompareRow> run_battery(const Dataset& data, const ExperimentConfig& config, std::size_t parallel);

// Ranked tables: rows grouped by table (roster order), sorted by mean desc.
std::string compare_csv(const std::vector<CompareRow>& rows, const std::vector<std::uint64_t>& seeds);
std::string compare_text(const std::vector<CompareRow>& rows, const std::vector<std::uint64_t>& seeds);

// Rows `domain,class,feat_0..` for every labeled eval sample at pixels whose
// row and column are multiples of stride.
std::string export_features_csv(const ModelState& model, const Dataset& data, std::size_t stride);

}  // namespace consloss
