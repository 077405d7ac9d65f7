#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "consloss/commands.hpp"
#include "consloss/errors.hpp"

namespace py = pybind11;
using namespace consloss;

namespace {

LabelMap to_label_map(const py::array_t<int, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw StructuralError("label map must be 2-D");
    LabelMap m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
    std::copy(a.data(), a.data() + a.size(), m.ids.begin());
    return m;
}

Confusion confusion_of(const py::array_t<int>& pred, const py::array_t<int>& gt, std::size_t num_classes) {
    Confusion conf(num_classes);
    conf.accumulate(to_label_map(pred), to_label_map(gt));
    return conf;
}

py::dict terms(const AdversarialTerms& t) {
    py::dict d;
    d["source"] = t.source;
    d["target"] = t.target;
    d["source_label"] = t.source_label;
    d["target_label"] = t.target_label;
    return d;
}

}  // namespace

PYBIND11_MODULE(_consloss, m) {
    m.doc() = "Conservative loss and the toy adaptation harness";

    auto base = py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<StructuralError>(m, "StructuralError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    (void)base;

    m.attr("E") = kEuler;
    m.attr("INV_E") = kInvEuler;
    m.attr("HISTORY_HEADER") = kHistoryHeader;

    py::enum_<LossKind>(m, "LossKind")
        .value("CrossEntropy", LossKind::CrossEntropy)
        .value("Focal", LossKind::Focal)
        .value("Conservative", LossKind::Conservative)
        .value("Cubic1", LossKind::Cubic1)
        .value("Cubic2", LossKind::Cubic2)
        .value("Cubic3", LossKind::Cubic3);

    py::class_<LossSpec>(m, "LossSpec")
        .def(py::init<>())
        .def_readwrite("kind", &LossSpec::kind)
        .def_readwrite("base", &LossSpec::base)
        .def_readwrite("lam", &LossSpec::lambda)
        .def_readwrite("alpha_t", &LossSpec::alpha_t)
        .def_readwrite("gamma", &LossSpec::gamma)
        .def_readwrite("lambda1", &LossSpec::lambda1)
        .def_readwrite("lambda2", &LossSpec::lambda2)
        .def_readwrite("alpha", &LossSpec::alpha)
        .def_readwrite("beta", &LossSpec::beta)
        .def_property(
            "clamp",
            [](const LossSpec& s) -> std::optional<std::pair<double, double>> {
                if (!s.clamp) return std::nullopt;
                return std::make_pair(s.clamp->lo, s.clamp->hi);
            },
            [](LossSpec& s, std::optional<std::pair<double, double>> c) {
                s.clamp = c ? std::optional<ClampRange>(ClampRange{c->first, c->second}) : std::nullopt;
            })
        .def("validate", &LossSpec::validate)
        .def_static("cross_entropy", &LossSpec::cross_entropy)
        .def_static("focal", &LossSpec::focal, py::arg("alpha_t") = 5.0, py::arg("gamma") = 2.0)
        .def_static(
            "conservative",
            [](double base, double lam, std::optional<std::pair<double, double>> clamp) {
                std::optional<ClampRange> c;
                if (clamp) c = ClampRange{clamp->first, clamp->second};
                return LossSpec::conservative(base, lam, c);
            },
            py::arg("base") = kEuler, py::arg("lam") = 1.0, py::arg("clamp") = py::none())
        .def_static("cubic1", &LossSpec::cubic1, py::arg("lambda1") = 60.0)
        .def_static("cubic2", &LossSpec::cubic2, py::arg("lambda2") = 60.0)
        .def_static("cubic3", &LossSpec::cubic3, py::arg("alpha") = 300.0, py::arg("beta") = 60.0)
        .def(py::self == py::self)
        .def("__repr__", [](const LossSpec& s) { return describe(s); });

    m.def("eval_loss", [](const LossSpec& s, const py::object& p) { return py::vectorize([&s](double x) { return eval_loss(s, x); })(p); }, py::arg("spec"),
          py::arg("p"));
    m.def("eval_grad", [](const LossSpec& s, const py::object& p) { return py::vectorize([&s](double x) { return eval_grad(s, x); })(p); }, py::arg("spec"),
          py::arg("p"));
    m.def("eval_update_grad", [](const LossSpec& s, const py::object& p) { return py::vectorize([&s](double x) { return eval_update_grad(s, x); })(p); },
          py::arg("spec"), py::arg("p"));
    m.def("zero_point", &zero_point, py::arg("spec"));

    m.def(
        "gradcheck",
        [](std::uint64_t seed, bool plant_fault) {
            py::list out;
            for (const auto& l : run_gradcheck(seed, plant_fault).lines) {
                py::dict d;
                d["name"] = l.name;
                d["max_rel_error"] = l.max_rel_error;
                d["tolerance"] = l.tolerance;
                out.append(d);
            }
            return out;
        },
        py::arg("seed") = 0, py::arg("plant_fault") = false);

    m.def(
        "iou_per_class",
        [](const py::array_t<int>& pred, const py::array_t<int>& gt, std::size_t k) {
            return iou_per_class(confusion_of(pred, gt, k));
        },
        py::arg("pred"), py::arg("gt"), py::arg("num_classes"));
    m.def(
        "mean_iou",
        [](const py::array_t<int>& pred, const py::array_t<int>& gt, std::size_t k) {
            return mean_iou(confusion_of(pred, gt, k));
        },
        py::arg("pred"), py::arg("gt"), py::arg("num_classes"));

    m.def(
        "label_topology",
        [](std::uint64_t seed, std::size_t h, std::size_t w, std::size_t k) {
            const LabelMap map = gen_label_topology(seed, h, w, k);
            py::array_t<int> out({h, w});
            std::copy(map.ids.begin(), map.ids.end(), out.mutable_data());
            return out;
        },
        py::arg("seed"), py::arg("height"), py::arg("width"), py::arg("num_classes"));

    m.def(
        "resolve_config",
        [](const std::string& text) { return canonical_dump(to_json(parse_experiment_config(text))); },
        py::arg("json_text") = "{}", "Fully resolved config echo as canonical JSON text.");
    m.def(
        "config_hash", [](const std::string& text) { return config_hash(to_json(parse_experiment_config(text))); },
        py::arg("json_text") = "{}");

    m.def(
        "train",
        [](const std::string& text, std::optional<std::uint64_t> seed) {
            ExperimentConfig config = parse_experiment_config(text);
            if (seed) config.schedule.seed = *seed;
            TrainOutcome outcome;
            {
                py::gil_scoped_release release;
                outcome = run_training(make_dataset(config.dataset), config.model, config.schedule, config.variant);
            }
            py::list rows;
            for (const auto& r : outcome.history.rows) {
                py::dict d;
                d["step"] = r.step;
                d["l_gan_d"] = terms(r.losses.gan_d);
                d["l_gan_g"] = terms(r.losses.gan_g);
                d["l_gan_e"] = terms(r.losses.gan_e);
                d["l_rec"] = r.losses.l_rec;
                d["l_seg_s"] = r.losses.l_seg_s;
                d["source_miou"] = r.source_miou;
                d["target_miou"] = r.target_miou;
                d["active_loss"] = std::string(to_string(r.active_loss));
                rows.append(d);
            }
            py::dict out;
            out["history"] = rows;
            out["aborted"] = outcome.history.aborted;
            out["abort_reason"] = outcome.history.abort_reason;
            out["final_target_miou"] = outcome.history.final_target_miou();
            out["best_target_step"] = outcome.history.best_target_step();
            return out;
        },
        py::arg("json_text") = "{}", py::arg("seed") = py::none(),
        "Train one configuration on its synthetic dataset; returns the run history.");
}
