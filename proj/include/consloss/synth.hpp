#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "consloss/tensor.hpp"

namespace consloss {

enum class Domain { Source = 0, Target = 1 };

// x -> matrix * x + offset, matrix stored row-major C x C.
struct AffineShift {
    std::vector<double> matrix;
    std::vector<double> offset;

    static AffineShift identity(std::size_t channels);
    std::size_t channels() const noexcept { return offset.size(); }
    std::vector<double> apply(std::span<const double> x) const;
    // Throws DataError if the matrix is singular.
    AffineShift inverse() const;

    friend bool operator==(const AffineShift&, const AffineShift&) = default;
};

struct DomainSpec {
    std::vector<std::vector<double>> class_means;  // K rows of C
    double noise_std = 0.3;
    std::optional<AffineShift> shift;              // none means identity

    std::size_t num_classes() const noexcept { return class_means.size(); }
    std::size_t channels() const noexcept { return class_means.empty() ? 0 : class_means.front().size(); }

    friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct Sample {
    Tensor features;  // H x W x C
    LabelMap labels;
    Domain domain = Domain::Source;
    bool labeled = true;  // false for target_train: the trainer must not read labels
};

struct DatasetConfig {
    std::uint64_t seed = 2018;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t num_classes = 4;
    std::size_t channels = 3;
    std::size_t n_source_train = 200;
    std::size_t n_source_eval = 50;
    std::size_t n_target_train = 200;
    std::size_t n_target_eval = 50;
    DomainSpec source;
    DomainSpec target;

    // Default source/target pair with the calibrated domain shift.
    static DatasetConfig defaults();
    // Throws ConfigError on inconsistent sizes, counts or a singular shift.
    void validate() const;

    friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct Dataset {
    std::vector<Sample> source_train;
    std::vector<Sample> source_eval;
    std::vector<Sample> target_train;
    std::vector<Sample> target_eval;
};

enum class Split : std::uint64_t { SourceTrain = 0, SourceEval = 1, TargetTrain = 2, TargetEval = 3 };

// Well-separated means in [-0.5, 0.5]^C: even-parity hypercube vertices first
// (a regular tetrahedron for K = 4, C = 3), then odd ones; a circle in the
// first two channels when K exceeds 2^C.
std::vector<std::vector<double>> default_class_means(std::size_t num_classes, std::size_t channels);

// Calibrated covariate shift: rotation-like mixing (35 deg about z, 25 deg
// about x, anisotropic scaling 1.2/0.8, condition number 1.5) plus offset
// 0.5 * noise_std per channel. For C = 2 only the z rotation and scaling apply.
AffineShift default_shift(std::size_t channels, double noise_std);

// Nearest-center partition of an H x W grid into K contiguous regions; every
// class occupies at least one pixel.
LabelMap gen_label_topology(std::uint64_t seed, std::size_t height, std::size_t width, std::size_t num_classes);

// features = shift(class_mean[label] + N(0, noise_std^2)) per pixel.
Sample gen_sample(const DomainSpec& spec, const LabelMap& topology, Domain domain, Rng& rng);

// One sample of a split, generated from its own (seed, split, index) stream.
Sample make_sample(const DatasetConfig& config, Split split, std::size_t index);

Dataset make_dataset(const DatasetConfig& config);

// Dataset directory: dataset.json (metadata and config echo) and dataset.bin
// (per sample, little-endian float64 features then uint16 labels).
void write_dataset(const Dataset& data, const DatasetConfig& config, const std::filesystem::path& dir);
std::pair<Dataset, DatasetConfig> read_dataset(const std::filesystem::path& dir);

// Pixel counts per class over the labels of all splits.
std::vector<std::uint64_t> class_histogram(const Dataset& data, std::size_t num_classes);

}  // namespace consloss
