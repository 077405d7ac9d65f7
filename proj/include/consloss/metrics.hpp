#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "consloss/tensor.hpp"

namespace consloss {

// K x K pixel counts; entry (i, j) counts ground truth i predicted as j.
class Confusion {
public:
    explicit Confusion(std::size_t num_classes);

    std::size_t num_classes() const noexcept { return k_; }
    std::uint64_t count(std::size_t gt, std::size_t pred) const { return counts_.at(gt * k_ + pred); }
    std::uint64_t total() const noexcept { return total_; }

    // Throws DataError on class ids outside [0, K) or mismatched shapes.
    void accumulate(const LabelMap& pred, const LabelMap& gt);
    void merge(const Confusion& other);

    friend bool operator==(const Confusion&, const Confusion&) = default;

private:
    std::size_t k_;
    std::vector<std::uint64_t> counts_;
    std::uint64_t total_ = 0;
};

// TP / (TP + FP + FN) per class; none when the class is absent from both maps.
// Throws DataError on an empty confusion.
std::vector<std::optional<double>> iou_per_class(const Confusion& conf);

// Mean over classes with defined IoU. Throws DataError when none is defined.
double mean_iou(const Confusion& conf);

// Writes `class_id,iou` rows; undefined IoU leaves the cell empty.
void write_iou_csv(const std::vector<std::optional<double>>& ious, const std::filesystem::path& path);

}  // namespace consloss
