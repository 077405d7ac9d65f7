#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "consloss/adapt.hpp"
#include "consloss/loss.hpp"

namespace consloss {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct VerticalMarker {
    double x = 0.0;
    std::string label;
};

struct LinePlot {
    std::string title;
    std::string x_label;
    std::string y_label;
    double x_min = 0.0, x_max = 1.0;
    double y_min = 0.0, y_max = 1.0;
    bool zero_line = false;
    std::vector<Series> series;
    std::vector<VerticalMarker> markers;
};

// Pixel geometry shared by the renderer and by anything reading plots back.
struct PlotFrame {
    double width = 760.0;
    double height = 480.0;
    double left = 70.0;
    double right = 150.0;  // legend column
    double top = 40.0;
    double bottom = 56.0;

    double plot_width() const { return width - left - right; }
    double plot_height() const { return height - top - bottom; }
    double px_x(const LinePlot& p, double x) const;
    double px_y(const LinePlot& p, double y) const;
};

// Deterministic SVG text: fixed precision, no timestamps. Curves are clipped
// to the plot area.
std::string render_svg(const LinePlot& plot, const PlotFrame& frame = {});

// Loss curves over p in [0.01, 0.99] at 0.001 spacing.
std::vector<double> loss_plot_grid();

// One Conservative curve per base with weight lambda.
LinePlot conservative_loss_plot(std::span<const double> bases, double lambda);
// The lambda-balanced Conservative loss (a = e) beside the cubic family.
LinePlot homogeneous_loss_plot(double cl_lambda = 5.0, const LossSpec& cubic1 = LossSpec::cubic1(60.0),
                               const LossSpec& cubic2 = LossSpec::cubic2(60.0),
                               const LossSpec& cubic3 = LossSpec::cubic3(300.0, 60.0));
// Source and target mIoU against step, with the warm-start switch marked.
LinePlot miou_plot(const RunHistory& history, std::size_t warm_start_steps);

// CSV of the plotted samples: x then one column per series (shared x grid).
std::string series_csv(const LinePlot& plot);

// Writes text exactly; throws IoError.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace consloss
