#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "consloss/config.hpp"
#include "consloss/errors.hpp"
#include "consloss/synth.hpp"

namespace consloss {

using nlohmann::json;

namespace {

constexpr const char* kFormat = "consloss-dataset";
constexpr int kVersion = 1;

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::string& out, T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T get_le(const char* p) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
}

struct SplitRef {
    const char* name;
    Split split;
};
constexpr SplitRef kSplits[] = {{"source_train", Split::SourceTrain},
                                {"source_eval", Split::SourceEval},
                                {"target_train", Split::TargetTrain},
                                {"target_eval", Split::TargetEval}};

std::vector<Sample>& split_of(Dataset& d, Split s) {
    switch (s) {
        case Split::SourceTrain: return d.source_train;
        case Split::SourceEval: return d.source_eval;
        case Split::TargetTrain: return d.target_train;
        case Split::TargetEval: return d.target_eval;
    }
    return d.source_train;
}

const std::vector<Sample>& split_of(const Dataset& d, Split s) { return split_of(const_cast<Dataset&>(d), s); }

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

void write_dataset(const Dataset& data, const DatasetConfig& config, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    const std::size_t pixels = config.height * config.width;
    const std::size_t sample_bytes = pixels * config.channels * 8 + pixels * 2;
    std::string bin;
    json splits = json::array();
    for (const auto& ref : kSplits) {
        const auto& samples = split_of(data, ref.split);
        splits.push_back({{"name", ref.name},
                          {"count", samples.size()},
                          {"offset", bin.size()},
                          {"labeled", ref.split != Split::TargetTrain}});
        for (const auto& s : samples) {
            if (s.features.shape() != Shape{config.height, config.width, config.channels} ||
                s.labels.height != config.height || s.labels.width != config.width) {
                throw StructuralError("sample shape does not match the dataset config");
            }
            for (double v : s.features.data()) put_le(bin, v);
            for (int id : s.labels.ids) {
                if (id < 0 || static_cast<std::size_t>(id) >= config.num_classes) throw DataError("label out of range");
                put_le(bin, static_cast<std::uint16_t>(id));
            }
        }
    }
    const json meta{{"format", kFormat},
                    {"version", kVersion},
                    {"binary", "dataset.bin"},
                    {"layout", "per sample: float64 LE features (H x W x C, row-major), then uint16 LE labels (H x W)"},
                    {"sample_bytes", sample_bytes},
                    {"splits", splits},
                    {"config", to_json(config)}};
    write_file(dir / "dataset.bin", bin);
    write_file(dir / "dataset.json", meta.dump(2) + "\n");
}

std::pair<Dataset, DatasetConfig> read_dataset(const std::filesystem::path& dir) {
    json meta;
    try {
        meta = json::parse(read_file(dir / "dataset.json"));
    } catch (const json::parse_error& e) {
        throw DataError("dataset.json is not valid JSON: " + std::string(e.what()));
    }
    if (!meta.is_object() || meta.value("format", "") != kFormat) throw DataError("not a consloss dataset");
    if (meta.value("version", 0) != kVersion) throw DataError("unsupported dataset version");
    if (!meta.contains("config") || !meta.contains("splits")) throw DataError("dataset.json lacks config or splits");
    const DatasetConfig config = dataset_config_from_json(meta["config"], "config");

    const std::string bin = read_file(dir / "dataset.bin");
    const std::size_t pixels = config.height * config.width;
    const std::size_t feat_bytes = pixels * config.channels * 8;
    const std::size_t sample_bytes = feat_bytes + pixels * 2;

    Dataset data;
    std::size_t expected_total = 0;
    for (const auto& ref : kSplits) {
        const json* entry = nullptr;
        for (const auto& s : meta["splits"]) {
            if (s.value("name", "") == ref.name) entry = &s;
        }
        if (!entry) throw DataError(std::string("dataset.json lacks split ") + ref.name);
        const auto count = entry->value("count", std::size_t{0});
        const auto offset = entry->value("offset", std::size_t{0});
        const std::size_t declared = ref.split == Split::SourceTrain  ? config.n_source_train
                                     : ref.split == Split::SourceEval ? config.n_source_eval
                                     : ref.split == Split::TargetTrain ? config.n_target_train
                                                                       : config.n_target_eval;
        if (count != declared) throw DataError(std::string("split ") + ref.name + " count disagrees with its config");
        if (offset != expected_total || offset + count * sample_bytes > bin.size()) {
            throw DataError(std::string("split ") + ref.name + " does not fit dataset.bin");
        }
        auto& out = split_of(data, ref.split);
        out.reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            const char* p = bin.data() + offset + i * sample_bytes;
            const bool is_source = ref.split == Split::SourceTrain || ref.split == Split::SourceEval;
            Sample s{Tensor({config.height, config.width, config.channels}), LabelMap(config.height, config.width),
                     is_source ? Domain::Source : Domain::Target, ref.split != Split::TargetTrain};
            for (std::size_t k = 0; k < s.features.size(); ++k) s.features[k] = get_le<double>(p + 8 * k);
            for (std::size_t k = 0; k < pixels; ++k) {
                const auto id = get_le<std::uint16_t>(p + feat_bytes + 2 * k);
                if (id >= config.num_classes) throw DataError("label out of range in dataset.bin");
                s.labels.ids[k] = id;
            }
            if (!s.features.all_finite()) throw DataError("non-finite feature in dataset.bin");
            out.push_back(std::move(s));
        }
        expected_total += count * sample_bytes;
    }
    if (expected_total != bin.size()) throw DataError("dataset.bin has trailing bytes");
    return {std::move(data), config};
}

}  // namespace consloss
