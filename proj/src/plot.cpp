#include "consloss/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "consloss/errors.hpp"

namespace consloss {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// 1-2-5 tick spacing giving roughly `target` intervals.
double nice_step(double span, int target) {
    const double raw = span / target;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    for (double m : {1.0, 2.0, 5.0, 10.0}) {
        if (raw <= m * mag) return m * mag;
    }
    return 10.0 * mag;
}

std::vector<double> ticks(double lo, double hi, int target) {
    const double step = nice_step(hi - lo, target);
    std::vector<double> out;
    for (double t = std::ceil(lo / step - 1e-9) * step; t <= hi + step * 1e-9; t += step) {
        out.push_back(std::abs(t) < step * 1e-9 ? 0.0 : t);
    }
    return out;
}

void fit_y(LinePlot& plot, double clip_lo, double clip_hi) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto& s : plot.series) {
        for (double v : s.y) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    lo = std::max(lo, clip_lo);
    hi = std::min(hi, clip_hi);
    const double step = nice_step(hi - lo, 8);
    plot.y_min = std::floor(lo / step) * step;
    plot.y_max = std::ceil(hi / step) * step;
}

Series loss_series(const std::string& name, const LossSpec& spec) {
    Series s{name, loss_plot_grid(), {}};
    for (double p : s.x) s.y.push_back(eval_loss(spec, p));
    return s;
}

std::string base_name(double a) {
    if (a == kEuler) return "e";
    return fmt("%g", a);
}

}  // namespace

double PlotFrame::px_x(const LinePlot& p, double x) const {
    return left + (x - p.x_min) / (p.x_max - p.x_min) * plot_width();
}

double PlotFrame::px_y(const LinePlot& p, double y) const {
    return top + (p.y_max - y) / (p.y_max - p.y_min) * plot_height();
}

std::string render_svg(const LinePlot& plot, const PlotFrame& f) {
    if (!(plot.x_max > plot.x_min) || !(plot.y_max > plot.y_min)) throw DomainError("plot ranges are empty");
    std::string o;
    o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt("%.0f", f.width) + "\" height=\"" +
         fmt("%.0f", f.height) + "\" viewBox=\"0 0 " + fmt("%.0f", f.width) + " " + fmt("%.0f", f.height) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o += "<defs><clipPath id=\"area\"><rect x=\"" + fmt("%.2f", f.left) + "\" y=\"" + fmt("%.2f", f.top) +
         "\" width=\"" + fmt("%.2f", f.plot_width()) + "\" height=\"" + fmt("%.2f", f.plot_height()) +
         "\"/></clipPath></defs>\n";
    o += "<text x=\"" + fmt("%.2f", f.left + f.plot_width() / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" +
         escape(plot.title) + "</text>\n";

    // Grid and tick labels.
    for (double t : ticks(plot.x_min, plot.x_max, 10)) {
        const double x = f.px_x(plot, t);
        o += "<line x1=\"" + fmt("%.2f", x) + "\" y1=\"" + fmt("%.2f", f.top) + "\" x2=\"" + fmt("%.2f", x) +
             "\" y2=\"" + fmt("%.2f", f.top + f.plot_height()) + "\" stroke=\"#e6e6e6\"/>\n";
        o += "<text x=\"" + fmt("%.2f", x) + "\" y=\"" + fmt("%.2f", f.top + f.plot_height() + 16) +
             "\" text-anchor=\"middle\">" + fmt("%g", t) + "</text>\n";
    }
    for (double t : ticks(plot.y_min, plot.y_max, 8)) {
        const double y = f.px_y(plot, t);
        o += "<line x1=\"" + fmt("%.2f", f.left) + "\" y1=\"" + fmt("%.2f", y) + "\" x2=\"" +
             fmt("%.2f", f.left + f.plot_width()) + "\" y2=\"" + fmt("%.2f", y) + "\" stroke=\"#e6e6e6\"/>\n";
        o += "<text x=\"" + fmt("%.2f", f.left - 6) + "\" y=\"" + fmt("%.2f", y + 4) + "\" text-anchor=\"end\">" +
             fmt("%g", t) + "</text>\n";
    }
    o += "<rect x=\"" + fmt("%.2f", f.left) + "\" y=\"" + fmt("%.2f", f.top) + "\" width=\"" +
         fmt("%.2f", f.plot_width()) + "\" height=\"" + fmt("%.2f", f.plot_height()) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
    o += "<text x=\"" + fmt("%.2f", f.left + f.plot_width() / 2) + "\" y=\"" + fmt("%.2f", f.height - 14) +
         "\" text-anchor=\"middle\">" + escape(plot.x_label) + "</text>\n";
    o += "<text transform=\"translate(18," + fmt("%.2f", f.top + f.plot_height() / 2) +
         ") rotate(-90)\" text-anchor=\"middle\">" + escape(plot.y_label) + "</text>\n";

    if (plot.zero_line && plot.y_min < 0.0 && plot.y_max > 0.0) {
        const double y = f.px_y(plot, 0.0);
        o += "<line class=\"zero\" x1=\"" + fmt("%.2f", f.left) + "\" y1=\"" + fmt("%.2f", y) + "\" x2=\"" +
             fmt("%.2f", f.left + f.plot_width()) + "\" y2=\"" + fmt("%.2f", y) +
             "\" stroke=\"black\" stroke-dasharray=\"4 3\"/>\n";
    }
    for (const auto& m : plot.markers) {
        const double x = f.px_x(plot, m.x);
        o += "<line class=\"marker\" x1=\"" + fmt("%.2f", x) + "\" y1=\"" + fmt("%.2f", f.top) + "\" x2=\"" +
             fmt("%.2f", x) + "\" y2=\"" + fmt("%.2f", f.top + f.plot_height()) +
             "\" stroke=\"#888888\" stroke-dasharray=\"2 3\"/>\n";
        o += "<text x=\"" + fmt("%.2f", x + 4) + "\" y=\"" + fmt("%.2f", f.top + 14) + "\" fill=\"#555555\">" +
             escape(m.label) + "</text>\n";
    }

    for (std::size_t i = 0; i < plot.series.size(); ++i) {
        const auto& s = plot.series[i];
        if (s.x.size() != s.y.size()) throw StructuralError("series " + s.name + " has mismatched x/y lengths");
        const char* color = kPalette[i % std::size(kPalette)];
        o += "<polyline class=\"series\" data-name=\"" + escape(s.name) + "\" clip-path=\"url(#area)\" fill=\"none\" stroke=\"" +
             color + "\" stroke-width=\"1.6\" points=\"";
        for (std::size_t k = 0; k < s.x.size(); ++k) {
            if (k) o += ' ';
            // Keep far out-of-range values finite; the clip path hides them.
            const double y = std::clamp(s.y[k], plot.y_min - 10 * (plot.y_max - plot.y_min),
                                        plot.y_max + 10 * (plot.y_max - plot.y_min));
            o += fmt("%.2f", f.px_x(plot, s.x[k])) + "," + fmt("%.2f", f.px_y(plot, y));
        }
        o += "\"/>\n";
        const double ly = f.top + 12 + 18.0 * static_cast<double>(i);
        const double lx = f.left + f.plot_width() + 12;
        o += "<line x1=\"" + fmt("%.2f", lx) + "\" y1=\"" + fmt("%.2f", ly - 4) + "\" x2=\"" + fmt("%.2f", lx + 22) +
             "\" y2=\"" + fmt("%.2f", ly - 4) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
        o += "<text x=\"" + fmt("%.2f", lx + 28) + "\" y=\"" + fmt("%.2f", ly) + "\">" + escape(s.name) + "</text>\n";
    }
    o += "</svg>\n";
    return o;
}

std::vector<double> loss_plot_grid() {
    std::vector<double> grid;
    for (int i = 10; i <= 990; ++i) grid.push_back(i / 1000.0);
    return grid;
}

LinePlot conservative_loss_plot(std::span<const double> bases, double lambda) {
    if (bases.empty()) throw DomainError("at least one base is required");
    LinePlot plot;
    plot.title = "Conservative loss, lambda = " + fmt("%g", lambda);
    plot.x_label = "p_t";
    plot.y_label = "loss";
    plot.x_min = 0.0;
    plot.x_max = 1.0;
    plot.zero_line = true;
    for (double a : bases) {
        const auto spec = LossSpec::conservative(a, lambda);
        spec.validate();
        plot.series.push_back(loss_series("a = " + base_name(a), spec));
    }
    fit_y(plot, -10.0 * lambda, 20.0 * lambda);
    return plot;
}

LinePlot homogeneous_loss_plot(double cl_lambda, const LossSpec& cubic1, const LossSpec& cubic2,
                               const LossSpec& cubic3) {
    LinePlot plot;
    plot.title = "Conservative loss and cubic losses";
    plot.x_label = "p_t";
    plot.y_label = "loss";
    plot.x_max = 1.0;
    plot.zero_line = true;
    const auto cl = LossSpec::conservative(kEuler, cl_lambda);
    cl.validate();
    plot.series.push_back(loss_series("CL (lambda = " + fmt("%g", cl_lambda) + ")", cl));
    plot.series.push_back(loss_series("Cubic1", cubic1));
    plot.series.push_back(loss_series("Cubic2", cubic2));
    plot.series.push_back(loss_series("Cubic3", cubic3));
    fit_y(plot, -15.0, 30.0);
    return plot;
}

LinePlot miou_plot(const RunHistory& history, std::size_t warm_start_steps) {
    LinePlot plot;
    plot.title = "mIoU during training";
    plot.x_label = "step";
    plot.y_label = "mIoU";
    Series src{"source", {}, {}}, tgt{"target", {}, {}};
    for (const auto& r : history.rows) {
        if (r.source_miou) {
            src.x.push_back(static_cast<double>(r.step));
            src.y.push_back(*r.source_miou);
        }
        if (r.target_miou) {
            tgt.x.push_back(static_cast<double>(r.step));
            tgt.y.push_back(*r.target_miou);
        }
    }
    plot.x_min = 0.0;
    plot.x_max = history.rows.empty() ? 1.0 : static_cast<double>(history.rows.back().step);
    plot.y_min = 0.0;
    plot.y_max = 1.0;
    plot.series = {src, tgt};
    if (warm_start_steps > 0 && static_cast<double>(warm_start_steps) < plot.x_max) {
        plot.markers.push_back({static_cast<double>(warm_start_steps), "loss switch"});
    }
    return plot;
}

std::string series_csv(const LinePlot& plot) {
    std::string out = "x";
    for (const auto& s : plot.series) out += "," + s.name;
    out += "\n";
    if (plot.series.empty()) return out;
    const auto& xs = plot.series.front().x;
    for (const auto& s : plot.series) {
        if (s.x != xs) throw StructuralError("series_csv needs a shared x grid");
    }
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out += fmt("%.10g", xs[i]);
        for (const auto& s : plot.series) out += "," + fmt("%.10g", s.y[i]);
        out += "\n";
    }
    return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace consloss
