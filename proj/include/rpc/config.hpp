#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rpc/dataset_io.hpp"
#include "rpc/error.hpp"
#include "rpc/synthdata.hpp"
#include "rpc/trainer.hpp"

namespace rpc {

enum class Preset { desk, full };

inline std::string preset_name(Preset p) { return p == Preset::desk ? "desk" : "full"; }

inline Preset parse_preset(std::string_view s) {
    if (s == "desk") {
        return Preset::desk;
    }
    if (s == "full") {
        return Preset::full;
    }
    throw ConfigError("run.preset: expected 'desk' or 'full', got '" + std::string(s) + "'");
}

/// Everything one CLI invocation needs. A single root seed drives every
/// random stream (world generation, initialization, batches, augmentation).
struct RunConfig {
    Preset preset = Preset::desk;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "runs/default";
    WorldConfig world;
    AugmentConfig augment;
    TrainConfig train;

    /// Copies the root seed and world-derived model dimensions into the
    /// sub-configs, then checks every invariant.
    void finalize() {
        world.seed = seed;
        train.seed = seed;
        train.model.input_dim = world.dim_input;
        train.model.num_classes = world.num_classes_total;
        train.model.num_known = world.num_known;
        train.augment = augment;
        world.validate();
        train.validate();
    }
};

/// Defaults for a preset. desk: 50 epochs, B = 32; full: 200 epochs, B = 128.
/// Both warm the OVA heads up for the first 20% of epochs.
inline RunConfig preset_defaults(Preset p) {
    RunConfig c;
    c.preset = p;
    if (p == Preset::desk) {
        c.train.epochs = 50;
        c.train.batch_size = 32;
        c.train.warmup_epochs_ova = 10;
    } else {
        c.train.epochs = 200;
        c.train.batch_size = 128;
        c.train.warmup_epochs_ova = 40;
    }
    c.train.mu = 4;
    return c;
}

namespace config_detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_value(std::string_view v, const std::string& key) {
    if constexpr (std::is_same_v<T, bool>) {
        if (v == "true" || v == "1") {
            return true;
        }
        if (v == "false" || v == "0") {
            return false;
        }
        throw ConfigError(key + ": expected true/false, got '" + std::string(v) + "'");
    } else if constexpr (std::is_same_v<T, std::string>) {
        return std::string(v);
    } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
        return std::filesystem::path(std::string(v));
    } else if constexpr (std::is_same_v<T, KnownPrototypeSource>) {
        if (v == "classifier") {
            return KnownPrototypeSource::classifier;
        }
        if (v == "feature_mean") {
            return KnownPrototypeSource::feature_mean;
        }
        throw ConfigError(key + ": expected 'classifier' or 'feature_mean', got '" + std::string(v) + "'");
    } else {
        T out{};
        const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
        if (res.ec != std::errc() || res.ptr != v.data() + v.size() || v.empty()) {
            throw ConfigError(key + ": cannot parse '" + std::string(v) + "' as a number");
        }
        return out;
    }
}

template <class T>
nlohmann::json to_json_value(const T& v) {
    if constexpr (std::is_same_v<T, std::filesystem::path>) {
        return v.string();
    } else if constexpr (std::is_same_v<T, KnownPrototypeSource>) {
        return v == KnownPrototypeSource::classifier ? "classifier" : "feature_mean";
    } else {
        return v;
    }
}

struct Field {
    std::string section;
    std::string key;
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<nlohmann::json(const RunConfig&)> get;

    std::string name() const { return section + "." + key; }
};

template <class Ref>
Field field(std::string section, std::string key, Ref ref) {
    using T = std::remove_cvref_t<decltype(ref(std::declval<RunConfig&>()))>;
    const std::string full = section + "." + key;
    return Field{std::move(section), std::move(key),
                 [ref, full](RunConfig& c, std::string_view v) { ref(c) = parse_value<T>(v, full); },
                 [ref](const RunConfig& c) { return to_json_value(ref(const_cast<RunConfig&>(c))); }};
}

#define RPC_FIELD(sec, key, expr) field(sec, key, [](RunConfig& c) -> auto& { return c.expr; })

inline const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        RPC_FIELD("run", "seed", seed),
        RPC_FIELD("run", "output_dir", output_dir),
        RPC_FIELD("world", "num_classes", world.num_classes_total),
        RPC_FIELD("world", "num_known", world.num_known),
        RPC_FIELD("world", "dim", world.dim_input),
        RPC_FIELD("world", "samples_per_class", world.samples_per_class),
        RPC_FIELD("world", "class_separation", world.class_separation),
        RPC_FIELD("world", "labeled_fraction", world.labeled_fraction),
        RPC_FIELD("augment", "sigma_weak", augment.sigma_weak),
        RPC_FIELD("augment", "sigma_strong", augment.sigma_strong),
        RPC_FIELD("augment", "drop_prob_strong", augment.drop_prob_strong),
        RPC_FIELD("augment", "scale_jitter_strong", augment.scale_jitter_strong),
        RPC_FIELD("model", "hidden_dim", train.model.hidden_dim),
        RPC_FIELD("model", "feature_dim", train.model.feature_dim),
        RPC_FIELD("model", "proj_hidden_dim", train.model.proj_hidden_dim),
        RPC_FIELD("model", "proj_dim", train.model.proj_dim),
        RPC_FIELD("model", "known_prototypes", train.model.known_prototypes),
        RPC_FIELD("model", "feature_mean_momentum", train.model.feature_mean_momentum),
        RPC_FIELD("loss", "lambda", train.loss.lambda),
        RPC_FIELD("loss", "epsilon", train.loss.epsilon),
        RPC_FIELD("loss", "lambda1", train.loss.lambda1),
        RPC_FIELD("loss", "lambda2", train.loss.lambda2),
        RPC_FIELD("loss", "alpha", train.loss.alpha),
        RPC_FIELD("loss", "tau_s", train.loss.tau_s),
        RPC_FIELD("loss", "tau_u", train.loss.tau_u),
        RPC_FIELD("loss", "rho_id", train.loss.rho_id),
        RPC_FIELD("loss", "normalize_discover", train.loss.normalize_discover),
        RPC_FIELD("loss", "discover_detach_similarity", train.loss.discover_detach_similarity),
        RPC_FIELD("loss", "discover_detach_prototypes", train.loss.discover_detach_prototypes),
        RPC_FIELD("train", "epochs", train.epochs),
        RPC_FIELD("train", "batch_size", train.batch_size),
        RPC_FIELD("train", "mu", train.mu),
        RPC_FIELD("train", "lr0", train.lr0),
        RPC_FIELD("train", "lr_min", train.lr_min),
        RPC_FIELD("train", "momentum", train.momentum),
        RPC_FIELD("train", "weight_decay", train.weight_decay),
        RPC_FIELD("train", "warmup_epochs_ova", train.warmup_epochs_ova),
        RPC_FIELD("train", "align_start_epoch", train.align_start_epoch),
        RPC_FIELD("train", "new_start_epoch", train.new_start_epoch),
        RPC_FIELD("train", "checkpoint_every", train.checkpoint_every),
        RPC_FIELD("train", "freeze_ova_after_warmup", train.freeze_ova_after_warmup),
        RPC_FIELD("train", "fixed_rho", train.fixed_rho),
    };
    return f;
}

#undef RPC_FIELD

inline const Field& find_field(const std::string& name) {
    for (const auto& f : fields()) {
        if (f.name() == name) {
            return f;
        }
    }
    throw ConfigError("unknown config key '" + name + "'");
}

}  // namespace config_detail

/// Flat "section.key" -> raw value assignments, in source order.
using ConfigAssignments = std::vector<std::pair<std::string, std::string>>;

/// INI-style text: [section] headers, key = value lines, '#' or ';' comments.
inline ConfigAssignments parse_ini(std::string_view text, const std::string& source = "config") {
    ConfigAssignments out;
    io_detail::LineReader r(text, source);
    std::string section;
    std::string_view raw;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& what) {
        throw ConfigError(source + ": line " + std::to_string(line_no) + ": " + what);
    };
    while (r.next(raw)) {
        ++line_no;
        const std::string line = config_detail::trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') {
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']') {
                fail("unterminated section header");
            }
            section = config_detail::trim(std::string_view(line).substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail("expected key = value");
        }
        const std::string key = config_detail::trim(std::string_view(line).substr(0, eq));
        std::string value = config_detail::trim(std::string_view(line).substr(eq + 1));
        const std::string name = section.empty() ? key : section + "." + key;
        if (name != "run.preset") {
            try {
                config_detail::find_field(name);
            } catch (const ConfigError& e) {
                fail(e.what());
            }
        }
        out.emplace_back(name, std::move(value));
    }
    return out;
}

/// Accepts either a config object ({"run": {...}, "world": {...}, ...}) or a
/// run summary carrying one under "config".
inline ConfigAssignments parse_config_json(std::string_view text, const std::string& source = "config") {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(source + ": " + e.what());
    }
    if (j.contains("config")) {
        j = j["config"];
    }
    if (!j.is_object()) {
        throw ConfigError(source + ": expected a JSON object");
    }
    ConfigAssignments out;
    for (const auto& [section, body] : j.items()) {
        if (!body.is_object()) {
            throw ConfigError(source + ": section '" + section + "' is not an object");
        }
        for (const auto& [key, v] : body.items()) {
            const std::string name = section + "." + key;
            if (name != "run.preset") {
                config_detail::find_field(name);
            }
            out.emplace_back(name, v.is_string() ? v.get<std::string>() : v.dump());
        }
    }
    return out;
}

/// "section.key=value" as given to --set.
inline std::pair<std::string, std::string> parse_override(std::string_view s) {
    const auto eq = s.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("override '" + std::string(s) + "' is not of the form section.key=value");
    }
    const std::string name = config_detail::trim(s.substr(0, eq));
    if (name.find('.') == std::string::npos) {
        throw ConfigError("override key '" + name + "' needs a section prefix");
    }
    if (name != "run.preset") {
        config_detail::find_field(name);
    }
    return {name, config_detail::trim(s.substr(eq + 1))};
}

/// Preset first (the last run.preset assignment wins), then every other
/// assignment in order, then finalize().
inline RunConfig build_config(const ConfigAssignments& assignments) {
    Preset preset = Preset::desk;
    for (const auto& [k, v] : assignments) {
        if (k == "run.preset") {
            preset = parse_preset(v);
        }
    }
    RunConfig c = preset_defaults(preset);
    for (const auto& [k, v] : assignments) {
        if (k != "run.preset") {
            config_detail::find_field(k).set(c, v);
        }
    }
    c.finalize();
    return c;
}

inline ConfigAssignments read_config_file(const std::filesystem::path& path) {
    const std::string text = io_detail::read_file(path);
    const auto first = text.find_first_not_of(" \t\r\n");
    if (path.extension() == ".json" || (first != std::string::npos && text[first] == '{')) {
        return parse_config_json(text, path.string());
    }
    return parse_ini(text, path.string());
}

/// Every field, grouped by section. Feeding this back through
/// parse_config_json + build_config reproduces the same RunConfig.
inline nlohmann::json config_json(const RunConfig& c) {
    nlohmann::json j = nlohmann::json::object();
    j["run"]["preset"] = preset_name(c.preset);
    for (const auto& f : config_detail::fields()) {
        j[f.section][f.key] = f.get(c);
    }
    return j;
}

inline std::string config_ini(const RunConfig& c) {
    const nlohmann::json j = config_json(c);
    std::string s;
    for (const auto& [section, body] : j.items()) {
        s += "[" + section + "]\n";
        for (const auto& [key, v] : body.items()) {
            s += key + " = " + (v.is_string() ? v.get<std::string>() : v.dump()) + "\n";
        }
        s += "\n";
    }
    return s;
}

}  // namespace rpc
