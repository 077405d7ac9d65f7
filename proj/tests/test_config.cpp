#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "consloss/config.hpp"
#include "consloss/errors.hpp"
#include "consloss/plot.hpp"

using namespace consloss;
namespace fs = std::filesystem;

namespace {

std::string field_of(const std::string& text) {
    try {
        parse_experiment_config(text);
    } catch (const ConfigError& e) {
        return e.field();
    }
    return "<accepted>";
}

struct Polyline {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

std::vector<Polyline> polylines(const std::string& svg) {
    std::vector<Polyline> out;
    const std::regex line(R"re(<polyline class="series" data-name="([^"]*)"[^>]*points="([^"]*)")re");
    for (std::sregex_iterator it(svg.begin(), svg.end(), line), end; it != end; ++it) {
        Polyline p{(*it)[1], {}};
        std::istringstream pts((*it)[2]);
        std::string pair;
        while (pts >> pair) {
            const auto comma = pair.find(',');
            p.points.emplace_back(std::stod(pair.substr(0, comma)), std::stod(pair.substr(comma + 1)));
        }
        out.push_back(std::move(p));
    }
    return out;
}

double zero_line_y(const std::string& svg) {
    std::smatch m;
    REQUIRE(std::regex_search(svg, m, std::regex(R"re(<line class="zero" x1="[^"]*" y1="([^"]*)")re")));
    return std::stod(m[1]);
}

// Pixel x where a polyline first changes side of the horizontal line y0.
// Points lying exactly on y0 (a flat run at a multiple root, after rounding)
// are bridged: the interpolation spans from the last point strictly on one
// side to the first point strictly on the other.
std::optional<double> crossing(const Polyline& p, double y0) {
    std::optional<std::size_t> last_off;
    for (std::size_t i = 0; i < p.points.size(); ++i) {
        const double d = p.points[i].second - y0;
        if (d == 0.0) continue;
        if (last_off && (p.points[*last_off].second - y0) * d < 0.0) {
            const auto [x1, y1] = p.points[*last_off];
            const auto [x2, y2] = p.points[i];
            return x1 + (y0 - y1) * (x2 - x1) / (y2 - y1);
        }
        last_off = i;
    }
    return std::nullopt;
}

}  // namespace

TEST_CASE("empty config resolves to the defaults") {
    const auto c = parse_experiment_config("{}");
    CHECK(c.dataset == DatasetConfig::defaults());
    CHECK(c.schedule.total_steps == 1000);
    CHECK(c.schedule.warm_start_steps == 500);
    CHECK(c.schedule.eval_every == 50);
    CHECK(c.schedule.seg_loss_main == LossSpec::conservative(kEuler, 5.0));
    CHECK(c.schedule.seg_loss_warm == LossSpec::cross_entropy());
    CHECK(c.seeds == std::vector<std::uint64_t>{0, 1, 2});
    CHECK(c.roster == default_roster());
    CHECK(c.variant == Variant::SegPlusGan);
}

TEST_CASE("derived schedule defaults follow total_steps") {
    const auto c = parse_experiment_config(R"({"schedule": {"total_steps": 200}})");
    CHECK(c.schedule.warm_start_steps == 100);
    CHECK(c.schedule.eval_every == 10);
    const auto cold = parse_experiment_config(R"({"schedule": {"total_steps": 200, "cold_start": true}})");
    CHECK(cold.schedule.warm_start_steps == 0);
    REQUIRE(cold.schedule.seg_loss_main.clamp.has_value());
    CHECK(*cold.schedule.seg_loss_main.clamp == ClampRange{-10.0, 10.0});
    const auto tiny = parse_experiment_config(R"({"schedule": {"total_steps": 7}})");
    CHECK(tiny.schedule.eval_every == 1);
}

TEST_CASE("errors name the offending field") {
    CHECK(field_of(R"({"bogus": 1})") == "bogus");
    CHECK(field_of(R"({"schedule": {"lr": "fast"}})") == "schedule.lr");
    CHECK(field_of(R"({"schedule": {"total_stepz": 5}})") == "schedule.total_stepz");
    CHECK(field_of(R"({"dataset": {"channels": 1}})") == "dataset.channels");
    CHECK(field_of(R"({"dataset": {"source": {"noise_std": 0}}})") == "dataset.source.noise_std");
    CHECK(field_of(R"({"dataset": {"target": {"shift": "sideways"}}})") == "dataset.target.shift");
    CHECK(field_of(R"({"compare": {"roster": [{"name": "x", "loss": {"kind": "Huber"}}]}})") ==
          "compare.roster[0].loss.kind");
    CHECK(field_of(R"({"compare": {"roster": [{"name": "x", "loss": {"kind": "Conservative", "gamma": 2}}]}})") ==
          "compare.roster[0].loss.gamma");
    CHECK(field_of(R"({"schedule": {"warm_start_steps": 2000}})") == "schedule.warm_start_steps");
    CHECK(field_of(R"({"schedule": {"cold_start": true, "warm_start_steps": 10}})") == "schedule.warm_start_steps");
    CHECK(field_of(R"({"schedule": {"seg_loss_main": {"kind": "Conservative", "clamp": [-10, 10]}}})") ==
          "schedule.seg_loss_main.clamp");
    CHECK(field_of(R"({"compare": {"seeds": []}})") == "compare.seeds");
    CHECK(field_of(R"({"variant": "gan_only"})") == "variant");
    CHECK(field_of(R"({"export": {"pixel_stride": 0}})") == "export.pixel_stride");
}

TEST_CASE("syntax errors report line and column") {
    try {
        parse_experiment_config("{\n  \"schedule\": {\n    \"lr\": 0.1,,\n  }\n}");
        FAIL("accepted malformed JSON");
    } catch (const ConfigError& e) {
        CHECK(e.field() == "line 3, column 15");
    }
}

TEST_CASE("config files: path prefix and missing file") {
    const fs::path dir = fs::path(CONSLOSS_TEST_TMP) / "config";
    fs::create_directories(dir);
    std::ofstream(dir / "bad.json") << R"({"model": {"depth": 3}})";
    try {
        load_experiment_config(dir / "bad.json");
        FAIL("accepted unknown key");
    } catch (const ConfigError& e) {
        CHECK(e.field() == (dir / "bad.json").string() + ": model.depth");
    }
    CHECK_THROWS_AS(load_experiment_config(dir / "absent.json"), ConfigError);
}

TEST_CASE("the resolved echo parses back to the same config") {
    const std::string text = R"({
      "dataset": {"seed": 4, "height": 16, "width": 20, "num_classes": 3, "channels": 2,
                  "source": {"noise_std": 0.2},
                  "target": {"shift": {"matrix": [[1.1, 0.2], [0.0, 0.9]], "offset": [0.1, -0.1]}}},
      "model": {"embed_width": 6, "gen_noise_std": 0.0},
      "schedule": {"total_steps": 300, "lr": 0.0005, "seg_loss_main": {"kind": "Cubic3", "alpha": 100, "beta": 20}},
      "variant": "seg_only",
      "compare": {"seeds": [5, 9], "roster": [{"table": "t", "name": "focal", "loss": {"kind": "Focal", "gamma": 3}}]},
      "export": {"pixel_stride": 2}
    })";
    const auto c = parse_experiment_config(text);
    CHECK(c.dataset.num_classes == 3);
    CHECK(c.dataset.target.class_means == c.dataset.source.class_means);
    CHECK(c.schedule.seg_loss_main == LossSpec::cubic3(100.0, 20.0));
    const auto echo = canonical_dump(to_json(c));
    const auto back = parse_experiment_config(echo);
    CHECK(canonical_dump(to_json(back)) == echo);
    CHECK(back.dataset == c.dataset);
    CHECK(back.model == c.model);
    CHECK(back.roster == c.roster);
    CHECK(back.seeds == c.seeds);
    CHECK(back.export_stride == 2);

    const auto def_echo = canonical_dump(to_json(parse_experiment_config("{}")));
    CHECK(canonical_dump(to_json(parse_experiment_config(def_echo))) == def_echo);
}

TEST_CASE("config hash is stable and sensitive") {
    const auto a = to_json(parse_experiment_config("{}"));
    auto b = a;
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a).size() == 16);
    b["schedule"]["lr"] = 0.002;
    CHECK(config_hash(a) != config_hash(b));
    // FNV-1a 64 of the two bytes "{}", from an independent implementation
    CHECK(config_hash(nlohmann::json::object()) == "08f44b07b5901a25");
}

TEST_CASE("loss JSON round trip over the default roster") {
    for (const auto& e : default_roster()) CHECK(loss_spec_from_json(to_json(e.loss)) == e.loss);
    CHECK(loss_spec_from_json(nlohmann::json::parse(R"({"kind": "Conservative", "base": "e"})")).base == kEuler);
    CHECK_THROWS_AS(loss_spec_from_json(nlohmann::json::parse(R"({"kind": "Conservative", "base": 1})")), ConfigError);
}

TEST_CASE("default roster covers every comparison table") {
    const auto r = default_roster();
    auto count = [&](const std::string& t) {
        return std::count_if(r.begin(), r.end(), [&](const RosterEntry& e) { return e.table == t; });
    };
    CHECK(count("components") == 3);
    CHECK(count("start") == 2);
    CHECK(count("base") == 4);
    CHECK(count("weight") == 4);
    CHECK(count("family") == 6);
    for (const auto& e : r) {
        if (e.cold_start) CHECK(e.loss.clamp.has_value());
        else CHECK_FALSE(e.loss.clamp.has_value());
    }
}

TEST_CASE("conservative plot crosses zero at 1/a within one pixel") {
    const std::vector<double> bases{2.0, kEuler, 3.0, 4.0};
    const auto plot = conservative_loss_plot(bases, 1.0);
    const PlotFrame frame;
    const auto svg = render_svg(plot, frame);
    const auto lines = polylines(svg);
    REQUIRE(lines.size() == 4);
    const double y0 = zero_line_y(svg);
    CHECK(y0 == doctest::Approx(frame.px_y(plot, 0.0)).epsilon(1e-4));
    for (std::size_t i = 0; i < 4; ++i) {
        const auto x = crossing(lines[i], y0);
        REQUIRE(x.has_value());
        CHECK(std::abs(*x - frame.px_x(plot, 1.0 / bases[i])) <= 1.0);
    }
}

TEST_CASE("plot data scales with lambda") {
    const std::vector<double> bases{kEuler};
    const auto one = conservative_loss_plot(bases, 1.0);
    const auto five = conservative_loss_plot(bases, 5.0);
    REQUIRE(one.series[0].y.size() == five.series[0].y.size());
    CHECK(one.series[0].x.front() == doctest::Approx(0.01));
    CHECK(one.series[0].x.back() == doctest::Approx(0.99));
    CHECK(one.series[0].x.size() == 981);
    for (std::size_t i = 0; i < one.series[0].y.size(); ++i)
        CHECK(five.series[0].y[i] == doctest::Approx(5.0 * one.series[0].y[i]).epsilon(1e-12));
    CHECK(five.y_max == doctest::Approx(5.0 * one.y_max));
}

TEST_CASE("homogeneous plot holds the cubic family and is deterministic") {
    const auto plot = homogeneous_loss_plot();
    CHECK(plot.series.size() == 4);
    CHECK(render_svg(plot) == render_svg(homogeneous_loss_plot()));
    const auto csv = series_csv(plot);
    CHECK(csv.substr(0, 2) == "x,");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 982);
}

TEST_CASE("mIoU plot marks the loss switch") {
    RunHistory h;
    for (std::size_t s = 1; s <= 10; ++s) {
        HistoryRow r;
        r.step = s;
        if (s % 5 == 0) {
            r.source_miou = 0.5;
            r.target_miou = 0.4;
        }
        h.rows.push_back(r);
    }
    const auto plot = miou_plot(h, 5);
    REQUIRE(plot.markers.size() == 1);
    CHECK(plot.markers[0].x == 5.0);
    CHECK(plot.series.size() == 2);
    CHECK(plot.series[0].x.size() == 2);
    const auto svg = render_svg(plot);
    CHECK(svg.find("class=\"marker\"") != std::string::npos);
    CHECK(svg.rfind("<svg", 0) == 0);
}
