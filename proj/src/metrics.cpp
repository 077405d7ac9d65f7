#include "consloss/metrics.hpp"

#include <cstdio>
#include <fstream>

#include "consloss/errors.hpp"

namespace consloss {

Confusion::Confusion(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0) throw DataError("confusion needs at least one class");
}

void Confusion::accumulate(const LabelMap& pred, const LabelMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw DataError("prediction and ground truth maps differ in shape");
    }
    // Validate first so a bad map leaves the counts untouched.
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt.ids[i] < 0 || static_cast<std::size_t>(gt.ids[i]) >= k_ || pred.ids[i] < 0 ||
            static_cast<std::size_t>(pred.ids[i]) >= k_) {
            throw DataError("class id out of range at pixel " + std::to_string(i));
        }
    }
    for (std::size_t i = 0; i < gt.size(); ++i) {
        ++counts_[static_cast<std::size_t>(gt.ids[i]) * k_ + static_cast<std::size_t>(pred.ids[i])];
    }
    total_ += gt.size();
}

void Confusion::merge(const Confusion& other) {
    if (other.k_ != k_) throw DataError("cannot merge confusions with different class counts");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    total_ += other.total_;
}

std::vector<std::optional<double>> iou_per_class(const Confusion& conf) {
    if (conf.total() == 0) throw DataError("IoU is undefined on an empty confusion");
    const std::size_t k = conf.num_classes();
    std::vector<std::optional<double>> out(k);
    for (std::size_t c = 0; c < k; ++c) {
        std::uint64_t tp = conf.count(c, c), fp = 0, fn = 0;
        for (std::size_t o = 0; o < k; ++o) {
            if (o == c) continue;
            fn += conf.count(c, o);
            fp += conf.count(o, c);
        }
        const std::uint64_t denom = tp + fp + fn;
        if (denom > 0) out[c] = static_cast<double>(tp) / static_cast<double>(denom);
    }
    return out;
}

double mean_iou(const Confusion& conf) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& iou : iou_per_class(conf)) {
        if (iou) {
            sum += *iou;
            ++n;
        }
    }
    if (n == 0) throw DataError("mIoU is undefined: no class has a defined IoU");
    return sum / static_cast<double>(n);
}

void write_iou_csv(const std::vector<std::optional<double>>& ious, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << "class_id,iou\n";
    char buf[64];
    for (std::size_t c = 0; c < ious.size(); ++c) {
        os << c << ',';
        if (ious[c]) {
            std::snprintf(buf, sizeof buf, "%.6f", *ious[c]);
            os << buf;
        }
        os << '\n';
    }
}

}  // namespace consloss
