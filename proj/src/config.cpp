#include "consloss/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "consloss/errors.hpp"

namespace consloss {

using nlohmann::json;

namespace {

std::string join_path(const std::string& parent, const std::string& key) {
    return parent.empty() ? key : parent + "." + key;
}

std::string index_path(const std::string& parent, std::size_t i) { return parent + "[" + std::to_string(i) + "]"; }

double as_double(const json& j, const std::string& path) {
    if (!j.is_number()) throw ConfigError(path, "expected a number");
    return j.get<double>();
}

std::uint64_t as_u64(const json& j, const std::string& path) {
    if (j.is_number_unsigned()) return j.get<std::uint64_t>();
    if (j.is_number_integer()) throw ConfigError(path, "must be non-negative");
    throw ConfigError(path, "expected an integer");
}

std::size_t as_size(const json& j, const std::string& path) {
    const auto v = as_u64(j, path);
    if (v > std::numeric_limits<std::size_t>::max()) throw ConfigError(path, "too large");
    return static_cast<std::size_t>(v);
}

bool as_bool(const json& j, const std::string& path) {
    if (!j.is_boolean()) throw ConfigError(path, "expected true or false");
    return j.get<bool>();
}

std::string as_string(const json& j, const std::string& path) {
    if (!j.is_string()) throw ConfigError(path, "expected a string");
    return j.get<std::string>();
}

std::vector<double> as_vector(const json& j, const std::string& path) {
    if (!j.is_array()) throw ConfigError(path, "expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(as_double(j[i], index_path(path, i)));
    return out;
}

std::vector<std::vector<double>> as_matrix(const json& j, const std::string& path) {
    if (!j.is_array()) throw ConfigError(path, "expected an array of rows");
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < j.size(); ++i) out.push_back(as_vector(j[i], index_path(path, i)));
    return out;
}

// Walks one JSON object; every key must be consumed before finish().
class ObjectReader {
public:
    ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_, "expected an object");
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }
    std::string at(const std::string& key) const { return join_path(path_, key); }

    template <class F>
    void read(const std::string& key, F&& assign) {
        if (const json* v = find(key)) assign(*v, at(key));
    }
    void number(const std::string& key, double& out) {
        read(key, [&](const json& v, const std::string& p) { out = as_double(v, p); });
    }
    void size(const std::string& key, std::size_t& out) {
        read(key, [&](const json& v, const std::string& p) { out = as_size(v, p); });
    }
    void u64(const std::string& key, std::uint64_t& out) {
        read(key, [&](const json& v, const std::string& p) { out = as_u64(v, p); });
    }
    void boolean(const std::string& key, bool& out) {
        read(key, [&](const json& v, const std::string& p) { out = as_bool(v, p); });
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(join_path(path_, it.key()), "unknown key");
        }
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

json shift_to_json(const AffineShift& s) {
    const std::size_t c = s.channels();
    json rows = json::array();
    for (std::size_t i = 0; i < c; ++i) {
        rows.push_back(std::vector<double>(s.matrix.begin() + static_cast<std::ptrdiff_t>(i * c),
                                           s.matrix.begin() + static_cast<std::ptrdiff_t>((i + 1) * c)));
    }
    return json{{"matrix", rows}, {"offset", s.offset}};
}

// "none", "default" or {"matrix": C x C, "offset": C}.
std::optional<AffineShift> shift_from_json(const json& j, const std::string& path, std::size_t channels,
                                           double noise_std) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "none") return std::nullopt;
        if (s == "default") return default_shift(channels, noise_std);
        throw ConfigError(path, "expected \"none\", \"default\" or {matrix, offset}, got \"" + s + "\"");
    }
    ObjectReader r(j, path);
    AffineShift shift = AffineShift::identity(channels);
    r.read("matrix", [&](const json& v, const std::string& p) {
        const auto m = as_matrix(v, p);
        if (m.size() != channels) throw ConfigError(p, "expected " + std::to_string(channels) + " rows");
        for (std::size_t i = 0; i < channels; ++i) {
            if (m[i].size() != channels) {
                throw ConfigError(index_path(p, i), "expected " + std::to_string(channels) + " columns");
            }
            std::copy(m[i].begin(), m[i].end(), shift.matrix.begin() + static_cast<std::ptrdiff_t>(i * channels));
        }
    });
    r.read("offset", [&](const json& v, const std::string& p) {
        shift.offset = as_vector(v, p);
        if (shift.offset.size() != channels) {
            throw ConfigError(p, "expected " + std::to_string(channels) + " entries");
        }
    });
    r.finish();
    return shift;
}

json domain_to_json(const DomainSpec& d) {
    return json{{"class_means", d.class_means},
                {"noise_std", d.noise_std},
                {"shift", d.shift ? shift_to_json(*d.shift) : json("none")}};
}

std::string line_column(const std::string& text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

RosterEntry roster_entry_from_json(const json& j, const std::string& path) {
    ObjectReader r(j, path);
    RosterEntry e;
    r.read("table", [&](const json& v, const std::string& p) { e.table = as_string(v, p); });
    r.read("name", [&](const json& v, const std::string& p) { e.name = as_string(v, p); });
    r.read("variant", [&](const json& v, const std::string& p) {
        const auto parsed = parse_variant(as_string(v, p));
        if (!parsed) throw ConfigError(p, "expected \"seg_only\" or \"seg_plus_gan\"");
        e.variant = *parsed;
    });
    r.read("loss", [&](const json& v, const std::string& p) { e.loss = loss_spec_from_json(v, p); });
    r.boolean("cold_start", e.cold_start);
    r.finish();
    if (e.name.empty()) throw ConfigError(r.at("name"), "roster entries need a name");
    if (e.loss.kind == LossKind::Conservative) {
        if (e.loss.clamp && !e.cold_start) throw ConfigError(r.at("loss.clamp"), "a warm-start Conservative loss is not clamped");
        if (!e.loss.clamp && e.cold_start) e.loss.clamp = ClampRange{};
    }
    return e;
}

}  // namespace

std::vector<RosterEntry> default_roster() {
    const LossSpec cl = LossSpec::conservative(kEuler, 5.0);
    std::vector<RosterEntry> r;
    r.push_back({"components", "seg_only+CE", Variant::SegOnly, LossSpec::cross_entropy(), false});
    r.push_back({"components", "seg+GAN+CE", Variant::SegPlusGan, LossSpec::cross_entropy(), false});
    r.push_back({"components", "seg+GAN+CL", Variant::SegPlusGan, cl, false});
    r.push_back({"start", "CL warm", Variant::SegPlusGan, cl, false});
    r.push_back({"start", "CL cold", Variant::SegPlusGan, LossSpec::conservative(kEuler, 5.0, ClampRange{}), true});
    for (double a : {2.0, kEuler, 3.0, 4.0}) {
        char name[32];
        std::snprintf(name, sizeof name, "CL a=%s", a == kEuler ? "e" : std::to_string(static_cast<int>(a)).c_str());
        r.push_back({"base", name, Variant::SegPlusGan, LossSpec::conservative(a, 5.0), false});
    }
    for (double l : {1.0, 5.0, 10.0, 20.0}) {
        r.push_back({"weight", "CL lambda=" + std::to_string(static_cast<int>(l)), Variant::SegPlusGan,
                     LossSpec::conservative(kEuler, l), false});
    }
    r.push_back({"family", "CE", Variant::SegPlusGan, LossSpec::cross_entropy(), false});
    r.push_back({"family", "FL", Variant::SegPlusGan, LossSpec::focal(), false});
    r.push_back({"family", "CL", Variant::SegPlusGan, cl, false});
    r.push_back({"family", "Cubic1", Variant::SegPlusGan, LossSpec::cubic1(60.0), false});
    r.push_back({"family", "Cubic2", Variant::SegPlusGan, LossSpec::cubic2(60.0), false});
    r.push_back({"family", "Cubic3", Variant::SegPlusGan, LossSpec::cubic3(300.0, 60.0), false});
    return r;
}

json to_json(const LossSpec& s) {
    json j{{"kind", std::string(to_string(s.kind))}};
    switch (s.kind) {
        case LossKind::CrossEntropy: break;
        case LossKind::Focal:
            j["alpha_t"] = s.alpha_t;
            j["gamma"] = s.gamma;
            break;
        case LossKind::Conservative:
            j["base"] = s.base;
            j["lambda"] = s.lambda;
            break;
        case LossKind::Cubic1: j["lambda1"] = s.lambda1; break;
        case LossKind::Cubic2: j["lambda2"] = s.lambda2; break;
        case LossKind::Cubic3:
            j["alpha"] = s.alpha;
            j["beta"] = s.beta;
            break;
    }
    if (s.clamp) j["clamp"] = {s.clamp->lo, s.clamp->hi};
    return j;
}

LossSpec loss_spec_from_json(const json& j, const std::string& path) {
    ObjectReader r(j, path);
    LossSpec s;
    const json* kind = r.find("kind");
    if (!kind) throw ConfigError(r.at("kind"), "missing loss kind");
    const auto parsed = parse_loss_kind(as_string(*kind, r.at("kind")));
    if (!parsed) {
        throw ConfigError(r.at("kind"),
                          "unknown loss kind; expected CrossEntropy, Focal, Conservative, Cubic1, Cubic2 or Cubic3");
    }
    s.kind = *parsed;
    switch (s.kind) {
        case LossKind::CrossEntropy: break;
        case LossKind::Focal:
            r.number("alpha_t", s.alpha_t);
            r.number("gamma", s.gamma);
            break;
        case LossKind::Conservative:
            r.read("base", [&](const json& v, const std::string& p) {
                s.base = v.is_string() && v.get<std::string>() == "e" ? kEuler : as_double(v, p);
            });
            r.number("lambda", s.lambda);
            break;
        case LossKind::Cubic1: r.number("lambda1", s.lambda1); break;
        case LossKind::Cubic2: r.number("lambda2", s.lambda2); break;
        case LossKind::Cubic3:
            r.number("alpha", s.alpha);
            r.number("beta", s.beta);
            break;
    }
    r.read("clamp", [&](const json& v, const std::string& p) {
        const auto c = as_vector(v, p);
        if (c.size() != 2 || !(c[0] < c[1])) throw ConfigError(p, "expected [lo, hi] with lo < hi");
        s.clamp = ClampRange{c[0], c[1]};
    });
    r.finish();
    try {
        s.validate();
    } catch (const DomainError& e) {
        throw ConfigError(path, e.what());
    }
    return s;
}

json to_json(const DatasetConfig& c) {
    return json{{"seed", c.seed},
                {"height", c.height},
                {"width", c.width},
                {"num_classes", c.num_classes},
                {"channels", c.channels},
                {"n_source_train", c.n_source_train},
                {"n_source_eval", c.n_source_eval},
                {"n_target_train", c.n_target_train},
                {"n_target_eval", c.n_target_eval},
                {"source", domain_to_json(c.source)},
                {"target", domain_to_json(c.target)}};
}

DatasetConfig dataset_config_from_json(const json& j, const std::string& path) {
    ObjectReader r(j, path);
    DatasetConfig c;
    r.u64("seed", c.seed);
    r.size("height", c.height);
    r.size("width", c.width);
    r.size("num_classes", c.num_classes);
    r.size("channels", c.channels);
    r.size("n_source_train", c.n_source_train);
    r.size("n_source_eval", c.n_source_eval);
    r.size("n_target_train", c.n_target_train);
    r.size("n_target_eval", c.n_target_eval);
    if (c.channels < 2) throw ConfigError(r.at("channels"), "must be at least 2");
    if (c.num_classes == 0 || c.num_classes > 16) throw ConfigError(r.at("num_classes"), "must be in [1, 16]");

    // Domain defaults depend on K and C, so they resolve after the sizes.
    auto read_domain = [&](const char* key, DomainSpec& d, const DomainSpec* fallback, bool shifted) {
        d.class_means = fallback ? fallback->class_means : default_class_means(c.num_classes, c.channels);
        d.noise_std = fallback ? fallback->noise_std : 0.3;
        const json* node = r.find(key);
        std::optional<json> shift_node;
        if (node) {
            ObjectReader dr(*node, r.at(key));
            dr.read("class_means", [&](const json& v, const std::string& p) { d.class_means = as_matrix(v, p); });
            dr.number("noise_std", d.noise_std);
            if (const json* s = dr.find("shift")) shift_node = *s;
            dr.finish();
        }
        const std::string shift_path = join_path(r.at(key), "shift");
        if (shift_node) {
            if (d.class_means.empty() || d.class_means.front().size() != c.channels) {
                throw ConfigError(join_path(r.at(key), "class_means"),
                                  "expected " + std::to_string(c.channels) + " columns");
            }
            d.shift = shift_from_json(*shift_node, shift_path, c.channels, d.noise_std);
        } else {
            d.shift = shifted ? std::optional<AffineShift>(default_shift(c.channels, d.noise_std)) : std::nullopt;
        }
    };
    read_domain("source", c.source, nullptr, false);
    read_domain("target", c.target, &c.source, true);
    r.finish();
    c.validate();
    return c;
}

json to_json(const RosterEntry& e) {
    return json{{"table", e.table},
                {"name", e.name},
                {"variant", std::string(to_string(e.variant))},
                {"loss", to_json(e.loss)},
                {"cold_start", e.cold_start}};
}

json to_json(const ExperimentConfig& c) {
    const auto& s = c.schedule;
    json roster = json::array();
    for (const auto& e : c.roster) roster.push_back(to_json(e));
    return json{
        {"dataset", to_json(c.dataset)},
        {"model",
         {{"embed_width", c.model.embed_width},
          {"hidden_width", c.model.hidden_width},
          {"disc_width", c.model.disc_width},
          {"gen_noise_std", c.model.gen_noise_std}}},
        {"schedule",
         {{"total_steps", s.total_steps},
          {"warm_start_steps", s.warm_start_steps},
          {"eval_every", s.eval_every},
          {"cold_start", c.cold_start},
          {"lr", s.adam.lr},
          {"beta1", s.adam.beta1},
          {"beta2", s.adam.beta2},
          {"eps_hat", s.adam.eps_hat},
          {"recon_weight", s.recon_weight},
          {"prob_eps", s.policy.eps},
          {"seed", s.seed},
          {"seg_loss_warm", to_json(s.seg_loss_warm)},
          {"seg_loss_main", to_json(s.seg_loss_main)}}},
        {"variant", std::string(to_string(c.variant))},
        {"compare", {{"seeds", c.seeds}, {"roster", roster}}},
        {"export", {{"pixel_stride", c.export_stride}}}};
}

void ExperimentConfig::validate() const {
    dataset.validate();
    if (model.channels != dataset.channels) throw ConfigError("model.channels", "must equal dataset.channels");
    if (model.num_classes != dataset.num_classes) {
        throw ConfigError("model.num_classes", "must equal dataset.num_classes");
    }
    if (model.embed_width == 0 || model.hidden_width == 0 || model.disc_width == 0) {
        throw ConfigError("model", "layer widths must be positive");
    }
    if (!(model.gen_noise_std >= 0.0)) throw ConfigError("model.gen_noise_std", "must be >= 0");
    schedule.validate();
    if (cold_start != schedule.cold_start()) {
        throw ConfigError("schedule.cold_start", "cold start means warm_start_steps = 0");
    }
    if (seeds.empty()) throw ConfigError("compare.seeds", "needs at least one seed");
    if (export_stride == 0) throw ConfigError("export.pixel_stride", "must be positive");
}

ExperimentConfig parse_experiment_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        // e.byte is 1-based and points just past the offending character.
        throw ConfigError(line_column(text, e.byte == 0 ? 0 : e.byte - 1), "malformed JSON");
    }
    ObjectReader r(j, "");
    ExperimentConfig c;
    r.read("dataset", [&](const json& v, const std::string& p) { c.dataset = dataset_config_from_json(v, p); });
    c.model.channels = c.dataset.channels;
    c.model.num_classes = c.dataset.num_classes;
    r.read("model", [&](const json& v, const std::string& p) {
        ObjectReader m(v, p);
        m.size("embed_width", c.model.embed_width);
        m.size("hidden_width", c.model.hidden_width);
        m.size("disc_width", c.model.disc_width);
        m.number("gen_noise_std", c.model.gen_noise_std);
        m.finish();
    });

    auto& s = c.schedule;
    std::optional<std::size_t> warm, eval_every;
    std::optional<LossSpec> main_loss;
    r.read("schedule", [&](const json& v, const std::string& p) {
        ObjectReader t(v, p);
        t.size("total_steps", s.total_steps);
        t.read("warm_start_steps", [&](const json& x, const std::string& q) { warm = as_size(x, q); });
        t.read("eval_every", [&](const json& x, const std::string& q) { eval_every = as_size(x, q); });
        t.boolean("cold_start", c.cold_start);
        t.number("lr", s.adam.lr);
        t.number("beta1", s.adam.beta1);
        t.number("beta2", s.adam.beta2);
        t.number("eps_hat", s.adam.eps_hat);
        t.number("recon_weight", s.recon_weight);
        t.number("prob_eps", s.policy.eps);
        t.u64("seed", s.seed);
        t.read("seg_loss_warm", [&](const json& x, const std::string& q) { s.seg_loss_warm = loss_spec_from_json(x, q); });
        t.read("seg_loss_main", [&](const json& x, const std::string& q) { main_loss = loss_spec_from_json(x, q); });
        t.finish();
    });
    if (s.total_steps == 0) throw ConfigError("schedule.total_steps", "must be positive");
    if (c.cold_start && warm && *warm != 0) {
        throw ConfigError("schedule.warm_start_steps", "must be 0 (or omitted) for a cold start");
    }
    s.warm_start_steps = c.cold_start ? 0 : warm.value_or(s.total_steps / 2);
    s.eval_every = eval_every.value_or(std::max<std::size_t>(1, s.total_steps / 20));
    if (main_loss && main_loss->kind == LossKind::Conservative && main_loss->clamp && !c.cold_start) {
        throw ConfigError("schedule.seg_loss_main.clamp", "a warm-start Conservative loss is not clamped");
    }
    s.set_main_loss(main_loss.value_or(LossSpec::conservative(kEuler, 5.0)), c.cold_start);
    if (main_loss && main_loss->clamp && main_loss->kind == LossKind::Conservative) {
        s.seg_loss_main.clamp = main_loss->clamp;
    }

    r.read("variant", [&](const json& v, const std::string& p) {
        const auto parsed = parse_variant(as_string(v, p));
        if (!parsed) throw ConfigError(p, "expected \"seg_only\" or \"seg_plus_gan\"");
        c.variant = *parsed;
    });
    r.read("compare", [&](const json& v, const std::string& p) {
        ObjectReader cr(v, p);
        cr.read("seeds", [&](const json& x, const std::string& q) {
            if (!x.is_array()) throw ConfigError(q, "expected an array of seeds");
            c.seeds.clear();
            for (std::size_t i = 0; i < x.size(); ++i) c.seeds.push_back(as_u64(x[i], index_path(q, i)));
        });
        cr.read("roster", [&](const json& x, const std::string& q) {
            if (!x.is_array()) throw ConfigError(q, "expected an array of roster entries");
            c.roster.clear();
            for (std::size_t i = 0; i < x.size(); ++i) c.roster.push_back(roster_entry_from_json(x[i], index_path(q, i)));
        });
        cr.finish();
    });
    r.read("export", [&](const json& v, const std::string& p) {
        ObjectReader er(v, p);
        er.size("pixel_stride", c.export_stride);
        er.finish();
    });
    r.finish();
    c.validate();
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path.string(), "cannot open config file");
    std::ostringstream text;
    text << in.rdbuf();
    try {
        return parse_experiment_config(text.str());
    } catch (const ConfigError& e) {
        throw ConfigError(e.field().empty() ? path.string() : path.string() + ": " + e.field(), e.message());
    }
}

std::string canonical_dump(const json& j) { return j.dump(2); }

std::string config_hash(const json& j) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace consloss
