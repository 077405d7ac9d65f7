#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "consloss/adapt.hpp"
#include "consloss/loss.hpp"
#include "consloss/synth.hpp"

namespace consloss {

// One battery entry of `compare`.
struct RosterEntry {
    std::string table;  // grouping for the ranked summary, e.g. "components"
    std::string name;
    Variant variant = Variant::SegPlusGan;
    LossSpec loss = LossSpec::conservative(kEuler, 5.0);
    bool cold_start = false;

    friend bool operator==(const RosterEntry&, const RosterEntry&) = default;
};

// The default battery: model components, base and weight ablations, warm vs
// cold start, and the loss family comparison.
std::vector<RosterEntry> default_roster();

struct ExperimentConfig {
    DatasetConfig dataset = DatasetConfig::defaults();
    ModelConfig model{};
    TrainSchedule schedule{};
    bool cold_start = false;
    Variant variant = Variant::SegPlusGan;
    std::vector<std::uint64_t> seeds{0, 1, 2};  // compare panel
    std::vector<RosterEntry> roster = default_roster();
    std::size_t export_stride = 4;               // export-features pixel stride

    // Throws ConfigError on any inconsistency across sections.
    void validate() const;
};

// Resolves an ExperimentConfig from a JSON document. Missing keys take their
// defaults; unknown keys, wrong types and invalid values throw ConfigError
// naming the field. Syntax errors name the line and column.
ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Fully resolved echo: every field explicit, so the echo parses back to an
// equal config.
nlohmann::json to_json(const ExperimentConfig& config);
nlohmann::json to_json(const DatasetConfig& config);
nlohmann::json to_json(const LossSpec& spec);
nlohmann::json to_json(const RosterEntry& entry);

DatasetConfig dataset_config_from_json(const nlohmann::json& j, const std::string& path = "dataset");
LossSpec loss_spec_from_json(const nlohmann::json& j, const std::string& path = "loss");

// Canonical text of a JSON value (sorted keys, fixed layout) and its
// 64-bit FNV-1a hash rendered as 16 hex digits.
std::string canonical_dump(const nlohmann::json& j);
std::string config_hash(const nlohmann::json& j);

}  // namespace consloss
