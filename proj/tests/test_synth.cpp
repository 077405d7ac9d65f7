#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "consloss/errors.hpp"
#include "consloss/synth.hpp"
#include "json.hpp"

using namespace consloss;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir(const std::string& name) {
    const fs::path dir = fs::path(CONSLOSS_TEST_TMP) / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

DatasetConfig small_config() {
    DatasetConfig c = DatasetConfig::defaults();
    c.height = 12;
    c.width = 10;
    c.n_source_train = 3;
    c.n_source_eval = 2;
    c.n_target_train = 3;
    c.n_target_eval = 2;
    return c;
}

bool same_samples(const std::vector<Sample>& a, const std::vector<Sample>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!(a[i].features == b[i].features) || !(a[i].labels == b[i].labels) || a[i].labeled != b[i].labeled) return false;
    }
    return true;
}

std::size_t nearest(const std::vector<std::vector<double>>& means, const double* x) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t k = 0; k < means.size(); ++k) {
        double d = 0.0;
        for (std::size_t c = 0; c < means[k].size(); ++c) d += (x[c] - means[k][c]) * (x[c] - means[k][c]);
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

}  // namespace

TEST_CASE("label topology examples") {
    const auto one = gen_label_topology(7, 8, 8, 1);
    for (int id : one.ids) CHECK(id == 0);
    CHECK(gen_label_topology(3, 32, 32, 4) == gen_label_topology(3, 32, 32, 4));
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto map = gen_label_topology(seed, 32, 32, 4);
        std::set<int> seen(map.ids.begin(), map.ids.end());
        CHECK(seen.size() == 4);
    }
    // a tiny grid forces regeneration until every class appears
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto map = gen_label_topology(seed, 2, 2, 4);
        CHECK(std::set<int>(map.ids.begin(), map.ids.end()).size() == 4);
    }
    CHECK_THROWS_AS(gen_label_topology(0, 4, 4, 17), DataError);
    CHECK_THROWS_AS(gen_label_topology(0, 2, 2, 5), DataError);
}

TEST_CASE("regions are contiguous under nearest-center assignment") {
    const auto map = gen_label_topology(11, 24, 24, 5);
    // digitised Voronoi cells: one 8-connected component holds almost all of a class
    for (int k = 0; k < 5; ++k) {
        std::vector<int> seen(map.size(), 0);
        std::size_t start = map.size(), total = 0;
        for (std::size_t i = 0; i < map.size(); ++i)
            if (map.ids[i] == k) {
                ++total;
                if (start == map.size()) start = i;
            }
        std::vector<std::size_t> stack{start};
        seen[start] = 1;
        std::size_t reached = 0;
        while (!stack.empty()) {
            const std::size_t i = stack.back();
            stack.pop_back();
            ++reached;
            const std::size_t y = i / map.width, x = i % map.width;
            auto visit = [&](std::size_t yy, std::size_t xx) {
                const std::size_t j = yy * map.width + xx;
                if (map.ids[j] == k && !seen[j]) {
                    seen[j] = 1;
                    stack.push_back(j);
                }
            };
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
                    if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(map.height) ||
                        xx >= static_cast<std::ptrdiff_t>(map.width))
                        continue;
                    visit(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
                }
        }
        CHECK(static_cast<double>(reached) >= 0.9 * static_cast<double>(total));
    }
}

TEST_CASE("zero noise with identity shift reproduces the class means") {
    DomainSpec spec{default_class_means(4, 3), 1e-300, std::nullopt};
    const auto topo = gen_label_topology(1, 6, 6, 4);
    Rng rng(2);
    const Sample s = gen_sample(spec, topo, Domain::Source, rng);
    for (std::size_t i = 0; i < topo.size(); ++i)
        for (std::size_t c = 0; c < 3; ++c) CHECK(s.features[i * 3 + c] == spec.class_means[topo.ids[i]][c]);
    CHECK(s.labels == topo);
}

TEST_CASE("absent shift and explicit identity shift agree") {
    DomainSpec plain{default_class_means(3, 2), 0.4, std::nullopt};
    DomainSpec ident = plain;
    ident.shift = AffineShift::identity(2);
    const auto topo = gen_label_topology(5, 9, 7, 3);
    Rng r1(8), r2(8);
    CHECK(gen_sample(plain, topo, Domain::Target, r1).features == gen_sample(ident, topo, Domain::Target, r2).features);
}

TEST_CASE("nearest-mean classifier is near perfect on well separated classes") {
    DomainSpec spec{{{-1.0, -1.0}, {1.0, 1.0}}, 0.1, std::nullopt};
    std::size_t correct = 0, total = 0;
    for (std::uint64_t i = 0; i < 20; ++i) {
        const auto topo = gen_label_topology(i, 16, 16, 2);
        Rng rng(100 + i);
        const Sample s = gen_sample(spec, topo, Domain::Source, rng);
        for (std::size_t p = 0; p < topo.size(); ++p, ++total)
            correct += nearest(spec.class_means, s.features.data().data() + p * 2) == static_cast<std::size_t>(topo.ids[p]);
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(total) > 0.99);
}

TEST_CASE("default means are well separated") {
    const auto m = default_class_means(4, 3);
    REQUIRE(m.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = i + 1; j < 4; ++j) {
            double d = 0.0;
            for (std::size_t c = 0; c < 3; ++c) d += (m[i][c] - m[j][c]) * (m[i][c] - m[j][c]);
            // tetrahedron on the unit cube centred at 0: all edges sqrt(2)
            CHECK(std::sqrt(d) == doctest::Approx(std::sqrt(2.0)));
        }
    CHECK(default_class_means(12, 3).size() == 12);
}

TEST_CASE("default shift is invertible and moderately conditioned") {
    const auto shift = default_shift(3, 0.3);
    const auto inv = shift.inverse();
    const std::vector<double> x{0.2, -0.7, 1.1};
    const auto back = inv.apply(shift.apply(x));
    for (std::size_t c = 0; c < 3; ++c) CHECK(back[c] == doctest::Approx(x[c]).epsilon(1e-12));
    for (double o : shift.offset) CHECK(o == doctest::Approx(0.15));
    // singular values of R S are the scales 1.2, 0.8, 1.0
    double fro = 0.0;
    for (double v : shift.matrix) fro += v * v;
    CHECK(fro == doctest::Approx(1.44 + 0.64 + 1.0));
    AffineShift singular{{1.0, 2.0, 2.0, 4.0}, {0.0, 0.0}};
    CHECK_THROWS_AS(singular.inverse(), DataError);
}

TEST_CASE("dataset generation is deterministic and splits are independent") {
    const auto c = small_config();
    const auto a = make_dataset(c), b = make_dataset(c);
    CHECK(same_samples(a.source_train, b.source_train));
    CHECK(same_samples(a.target_eval, b.target_eval));
    auto c2 = c;
    c2.n_target_eval = 5;
    const auto d = make_dataset(c2);
    CHECK(same_samples(a.source_train, d.source_train));
    CHECK(same_samples(a.target_train, d.target_train));
    CHECK(d.target_eval.size() == 5);
    CHECK(same_samples(a.target_eval, std::vector<Sample>(d.target_eval.begin(), d.target_eval.begin() + 2)));
    // a sample can be generated alone
    CHECK(make_sample(c, Split::TargetEval, 1).features == a.target_eval[1].features);
    auto c3 = c;
    c3.seed += 1;
    CHECK_FALSE(same_samples(a.source_train, make_dataset(c3).source_train));
}

TEST_CASE("split roles and flags") {
    const auto d = make_dataset(small_config());
    for (const auto& s : d.source_train) CHECK((s.labeled && s.domain == Domain::Source));
    for (const auto& s : d.source_eval) CHECK((s.labeled && s.domain == Domain::Source));
    for (const auto& s : d.target_train) CHECK((!s.labeled && s.domain == Domain::Target));
    for (const auto& s : d.target_eval) CHECK((s.labeled && s.domain == Domain::Target));
    for (const auto& s : d.target_train) CHECK(s.features.all_finite());
}

TEST_CASE("per-class source means follow the law of large numbers") {
    auto c = DatasetConfig::defaults();
    c.n_source_train = 20;
    c.n_source_eval = c.n_target_train = c.n_target_eval = 1;
    const auto d = make_dataset(c);
    const std::size_t k = c.num_classes, ch = c.channels;
    std::vector<double> sum(k * ch, 0.0);
    std::vector<double> n(k, 0.0);
    for (const auto& s : d.source_train)
        for (std::size_t p = 0; p < s.labels.size(); ++p) {
            const auto label = static_cast<std::size_t>(s.labels.ids[p]);
            n[label] += 1.0;
            for (std::size_t j = 0; j < ch; ++j) sum[label * ch + j] += s.features[p * ch + j];
        }
    double total = 0.0;
    for (double v : n) total += v;
    CHECK(total >= 1e4);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < ch; ++j) {
            const double tol = 3.0 * c.source.noise_std / std::sqrt(n[i]);
            CHECK(std::abs(sum[i * ch + j] / n[i] - c.source.class_means[i][j]) <= tol);
        }
}

TEST_CASE("inverting the target shift recovers source statistics") {
    auto c = DatasetConfig::defaults();
    c.n_target_eval = 20;
    c.n_source_train = c.n_source_eval = c.n_target_train = 1;
    const auto d = make_dataset(c);
    const auto inv = c.target.shift->inverse();
    const std::size_t k = c.num_classes, ch = c.channels;
    std::vector<double> sum(k * ch, 0.0), sq(k, 0.0), n(k, 0.0);
    for (const auto& s : d.target_eval)
        for (std::size_t p = 0; p < s.labels.size(); ++p) {
            const auto label = static_cast<std::size_t>(s.labels.ids[p]);
            const auto x = inv.apply(std::span<const double>(s.features.data().data() + p * ch, ch));
            n[label] += 1.0;
            for (std::size_t j = 0; j < ch; ++j) {
                sum[label * ch + j] += x[j];
                const double dev = x[j] - c.source.class_means[label][j];
                sq[label] += dev * dev;
            }
        }
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < ch; ++j) {
            const double tol = 3.0 * c.source.noise_std / std::sqrt(n[i]);
            CHECK(std::abs(sum[i * ch + j] / n[i] - c.source.class_means[i][j]) <= tol);
        }
        CHECK(std::sqrt(sq[i] / (n[i] * ch)) == doctest::Approx(c.source.noise_std).epsilon(0.05));
    }
}

TEST_CASE("config validation") {
    auto c = DatasetConfig::defaults();
    CHECK_NOTHROW(c.validate());
    auto bad = c;
    bad.channels = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.n_target_eval = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.target.class_means.pop_back();
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.source.noise_std = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.target.shift = AffineShift{std::vector<double>(9, 1.0), std::vector<double>(3, 0.0)};
    try {
        bad.validate();
        FAIL("singular shift accepted");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "dataset.target.shift");
    }
}

TEST_CASE("class histogram counts every labeled pixel") {
    const auto c = small_config();
    const auto d = make_dataset(c);
    const auto hist = class_histogram(d, c.num_classes);
    std::uint64_t total = 0;
    for (auto v : hist) {
        CHECK(v > 0);
        total += v;
    }
    CHECK(total == (3 + 2 + 3 + 2) * c.height * c.width);
}

TEST_CASE("dataset files round trip exactly") {
    const auto dir = tmp_dir("dataset_roundtrip");
    const auto c = small_config();
    const auto d = make_dataset(c);
    write_dataset(d, c, dir);
    const auto [back, back_config] = read_dataset(dir);
    CHECK(back_config == c);
    CHECK(same_samples(back.source_train, d.source_train));
    CHECK(same_samples(back.source_eval, d.source_eval));
    CHECK(same_samples(back.target_train, d.target_train));
    CHECK(same_samples(back.target_eval, d.target_eval));

    const auto bin = slurp(dir / "dataset.bin");
    const std::size_t pixels = c.height * c.width;
    CHECK(bin.size() == 10 * pixels * (c.channels * 8 + 2));
    // first feature of the first source sample, little-endian float64
    double first = 0.0;
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bin[i])) << (8 * i);
    std::memcpy(&first, &bits, 8);
    CHECK(first == d.source_train[0].features[0]);

    // rewriting gives identical bytes
    const auto again = tmp_dir("dataset_roundtrip2");
    write_dataset(back, back_config, again);
    CHECK(slurp(again / "dataset.bin") == bin);
    CHECK(slurp(again / "dataset.json") == slurp(dir / "dataset.json"));
}

TEST_CASE("corrupted dataset files are rejected") {
    const auto dir = tmp_dir("dataset_corrupt");
    const auto c = small_config();
    write_dataset(make_dataset(c), c, dir);
    const auto bin = slurp(dir / "dataset.bin");
    const auto meta = slurp(dir / "dataset.json");

    spit(dir / "dataset.bin", bin + "x");
    CHECK_THROWS_AS(read_dataset(dir), DataError);
    spit(dir / "dataset.bin", bin.substr(0, bin.size() - 1));
    CHECK_THROWS_AS(read_dataset(dir), DataError);

    std::string bad_label = bin;
    const std::size_t label_at = c.height * c.width * c.channels * 8;
    bad_label[label_at] = 9;
    spit(dir / "dataset.bin", bad_label);
    CHECK_THROWS_AS(read_dataset(dir), DataError);
    spit(dir / "dataset.bin", bin);

    spit(dir / "dataset.json", "{ not json");
    CHECK_THROWS_AS(read_dataset(dir), DataError);
    auto j = nlohmann::json::parse(meta);
    j["version"] = 7;
    spit(dir / "dataset.json", j.dump());
    CHECK_THROWS_AS(read_dataset(dir), DataError);
    j = nlohmann::json::parse(meta);
    j["format"] = "other";
    spit(dir / "dataset.json", j.dump());
    CHECK_THROWS_AS(read_dataset(dir), DataError);
    spit(dir / "dataset.json", meta);
    CHECK_NOTHROW(read_dataset(dir));

    CHECK_THROWS_AS(read_dataset(dir / "nowhere"), IoError);
}
