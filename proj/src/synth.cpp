#include "consloss/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>

#include "consloss/errors.hpp"

namespace consloss {

namespace {

std::vector<double> matmul3(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(9, 0.0);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            for (std::size_t k = 0; k < 3; ++k) out[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
    return out;
}

std::size_t split_size(const DatasetConfig& c, Split split) {
    switch (split) {
        case Split::SourceTrain: return c.n_source_train;
        case Split::SourceEval: return c.n_source_eval;
        case Split::TargetTrain: return c.n_target_train;
        case Split::TargetEval: return c.n_target_eval;
    }
    return 0;
}

}  // namespace

AffineShift AffineShift::identity(std::size_t channels) {
    AffineShift s{std::vector<double>(channels * channels, 0.0), std::vector<double>(channels, 0.0)};
    for (std::size_t i = 0; i < channels; ++i) s.matrix[i * channels + i] = 1.0;
    return s;
}

std::vector<double> AffineShift::apply(std::span<const double> x) const {
    const std::size_t c = channels();
    std::vector<double> out(offset);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i] += matrix[i * c + j] * x[j];
    return out;
}

AffineShift AffineShift::inverse() const {
    const std::size_t n = channels();
    // Gauss-Jordan with partial pivoting on [M | I].
    std::vector<double> a(matrix);
    std::vector<double> inv = identity(n).matrix;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r * n + col]) > std::abs(a[pivot * n + col])) pivot = r;
        if (std::abs(a[pivot * n + col]) < 1e-12) throw DataError("shift matrix is singular");
        for (std::size_t j = 0; j < n; ++j) {
            std::swap(a[col * n + j], a[pivot * n + j]);
            std::swap(inv[col * n + j], inv[pivot * n + j]);
        }
        const double d = a[col * n + col];
        for (std::size_t j = 0; j < n; ++j) {
            a[col * n + j] /= d;
            inv[col * n + j] /= d;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a[r * n + col];
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) {
                a[r * n + j] -= f * a[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    AffineShift out{inv, std::vector<double>(n, 0.0)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out.offset[i] -= inv[i * n + j] * offset[j];
    return out;
}

std::vector<std::vector<double>> default_class_means(std::size_t num_classes, std::size_t channels) {
    std::vector<std::vector<double>> means;
    if (channels < 31 && num_classes <= (std::size_t{1} << channels)) {
        for (int parity = 0; parity < 2; ++parity) {
            for (std::size_t v = 0; v < (std::size_t{1} << channels) && means.size() < num_classes; ++v) {
                if (static_cast<int>(std::popcount(v) % 2) != parity) continue;
                std::vector<double> row(channels);
                for (std::size_t c = 0; c < channels; ++c) row[c] = (v >> (channels - 1 - c)) & 1u ? -0.5 : 0.5;
                means.push_back(std::move(row));
            }
        }
        return means;
    }
    for (std::size_t k = 0; k < num_classes; ++k) {
        std::vector<double> row(channels, 0.0);
        const double t = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(num_classes);
        row[0] = 0.6 * std::cos(t);
        if (channels > 1) row[1] = 0.6 * std::sin(t);
        means.push_back(std::move(row));
    }
    return means;
}

AffineShift default_shift(std::size_t channels, double noise_std) {
    AffineShift shift = AffineShift::identity(channels);
    const double az = 35.0 * std::numbers::pi / 180.0;
    const double ax = 25.0 * std::numbers::pi / 180.0;
    std::vector<double> rz{std::cos(az), -std::sin(az), 0.0, std::sin(az), std::cos(az), 0.0, 0.0, 0.0, 1.0};
    std::vector<double> rx{1.0, 0.0, 0.0, 0.0, std::cos(ax), -std::sin(ax), 0.0, std::sin(ax), std::cos(ax)};
    const std::vector<double> scale{1.2, 0.0, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 1.0};
    if (channels == 2) rx = AffineShift::identity(3).matrix;
    const auto m = matmul3(matmul3(rz, rx), scale);
    const std::size_t n = std::min<std::size_t>(channels, 3);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) shift.matrix[i * channels + j] = m[i * 3 + j];
    std::fill(shift.offset.begin(), shift.offset.end(), 0.5 * noise_std);
    return shift;
}

DatasetConfig DatasetConfig::defaults() {
    DatasetConfig c;
    c.source.class_means = default_class_means(c.num_classes, c.channels);
    c.source.noise_std = 0.3;
    c.target.class_means = c.source.class_means;
    c.target.noise_std = c.source.noise_std;
    c.target.shift = default_shift(c.channels, c.source.noise_std);
    return c;
}

void DatasetConfig::validate() const {
    if (height == 0 || width == 0) throw ConfigError("dataset.height", "image size must be positive");
    if (num_classes == 0 || num_classes > 16) throw ConfigError("dataset.num_classes", "must be in [1, 16]");
    if (channels < 2) throw ConfigError("dataset.channels", "must be at least 2");
    if (n_source_train == 0 || n_source_eval == 0 || n_target_train == 0 || n_target_eval == 0) {
        throw ConfigError("dataset", "every split needs at least one sample");
    }
    auto check_domain = [&](const DomainSpec& d, const std::string& name) {
        if (d.class_means.size() != num_classes) {
            throw ConfigError(name + ".class_means", "expected " + std::to_string(num_classes) + " rows");
        }
        for (const auto& row : d.class_means) {
            if (row.size() != channels) {
                throw ConfigError(name + ".class_means", "expected " + std::to_string(channels) + " columns");
            }
        }
        if (!(d.noise_std > 0.0)) throw ConfigError(name + ".noise_std", "must be positive");
        if (d.shift) {
            if (d.shift->matrix.size() != channels * channels || d.shift->offset.size() != channels) {
                throw ConfigError(name + ".shift", "matrix must be C x C and offset length C");
            }
            try {
                (void)d.shift->inverse();
            } catch (const DataError&) {
                throw ConfigError(name + ".shift", "matrix must be invertible");
            }
        }
    };
    check_domain(source, "dataset.source");
    check_domain(target, "dataset.target");
}

LabelMap gen_label_topology(std::uint64_t seed, std::size_t height, std::size_t width, std::size_t num_classes) {
    if (num_classes == 0 || num_classes > 16) throw DataError("num_classes must be in [1, 16]");
    if (num_classes > height * width) throw DataError("more classes than pixels");
    LabelMap map(height, width, 0);
    for (std::uint64_t attempt = 0;; ++attempt) {
        Rng rng(derive_seed(seed, {attempt}));
        std::vector<std::array<double, 2>> centers(num_classes);
        for (auto& c : centers) {
            c = {static_cast<double>(rng.index(height)), static_cast<double>(rng.index(width))};
        }
        std::vector<std::size_t> area(num_classes, 0);
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                std::size_t best = 0;
                double best_d = INFINITY;
                for (std::size_t k = 0; k < num_classes; ++k) {
                    const double dy = static_cast<double>(y) - centers[k][0];
                    const double dx = static_cast<double>(x) - centers[k][1];
                    const double d = dy * dy + dx * dx;
                    if (d < best_d) {
                        best_d = d;
                        best = k;
                    }
                }
                map(y, x) = static_cast<int>(best);
                ++area[best];
            }
        }
        bool all_present = true;
        for (auto a : area) all_present = all_present && a > 0;
        if (all_present) return map;
    }
}

Sample gen_sample(const DomainSpec& spec, const LabelMap& topology, Domain domain, Rng& rng) {
    const std::size_t c = spec.channels();
    Sample s{Tensor({topology.height, topology.width, c}), topology, domain, true};
    std::vector<double> x(c);
    for (std::size_t i = 0; i < topology.size(); ++i) {
        const auto label = static_cast<std::size_t>(topology.ids[i]);
        if (label >= spec.num_classes()) throw DataError("topology label exceeds class count");
        for (std::size_t ch = 0; ch < c; ++ch) x[ch] = spec.class_means[label][ch] + spec.noise_std * rng.normal();
        if (spec.shift) {
            const auto y = spec.shift->apply(x);
            std::copy(y.begin(), y.end(), &s.features.data()[i * c]);
        } else {
            std::copy(x.begin(), x.end(), &s.features.data()[i * c]);
        }
    }
    return s;
}

Sample make_sample(const DatasetConfig& config, Split split, std::size_t index) {
    const std::uint64_t base = derive_seed(config.seed, {static_cast<std::uint64_t>(split), index});
    const auto topology = gen_label_topology(derive_seed(base, {0}), config.height, config.width, config.num_classes);
    Rng rng(derive_seed(base, {1}));
    const bool is_source = split == Split::SourceTrain || split == Split::SourceEval;
    Sample s = gen_sample(is_source ? config.source : config.target, topology,
                          is_source ? Domain::Source : Domain::Target, rng);
    s.labeled = split != Split::TargetTrain;
    return s;
}

Dataset make_dataset(const DatasetConfig& config) {
    config.validate();
    Dataset d;
    auto fill = [&](std::vector<Sample>& out, Split split) {
        const std::size_t n = split_size(config, split);
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) out.push_back(make_sample(config, split, i));
    };
    fill(d.source_train, Split::SourceTrain);
    fill(d.source_eval, Split::SourceEval);
    fill(d.target_train, Split::TargetTrain);
    fill(d.target_eval, Split::TargetEval);
    return d;
}

std::vector<std::uint64_t> class_histogram(const Dataset& data, std::size_t num_classes) {
    std::vector<std::uint64_t> hist(num_classes, 0);
    for (const auto* split : {&data.source_train, &data.source_eval, &data.target_train, &data.target_eval}) {
        for (const auto& s : *split) {
            for (int id : s.labels.ids) {
                if (id < 0 || static_cast<std::size_t>(id) >= num_classes) throw DataError("label out of range");
                ++hist[static_cast<std::size_t>(id)];
            }
        }
    }
    return hist;
}

}  // namespace consloss
