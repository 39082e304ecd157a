#pragma once

// Plain-text configuration: one "key = value" per line, '#' starts a comment.
// Keys are namespaced by section (model., mining., loss., optim., data.,
// orchard.). A bare "seed" sets every seed at once. Orchard keys may also be
// written without their prefix in a dedicated spec file.

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "pgap/dataio.hpp"
#include "pgap/error.hpp"
#include "pgap/synthgen.hpp"
#include "pgap/training.hpp"

namespace pgap {

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline KeyValues parse_key_values(std::string_view text, const std::string& source = "config") {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string_view::npos) end = text.size();
        ++line_no;
        std::string_view line = text.substr(start, end - start);
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const std::string content = trim(line);
        if (!content.empty()) {
            const auto eq = content.find('=');
            if (eq == std::string::npos) {
                throw ParseError(source + ":" + std::to_string(line_no) + ": expected 'key = value'", start);
            }
            const std::string key = trim(std::string_view(content).substr(0, eq));
            const std::string value = trim(std::string_view(content).substr(eq + 1));
            if (key.empty()) throw ParseError(source + ":" + std::to_string(line_no) + ": empty key", start);
            kv[key] = value;
        }
        start = end + 1;
    }
    return kv;
}

inline KeyValues read_key_values(const fs::path& path) {
    if (!fs::exists(path)) throw LoadError("config file not found: " + path.string());
    return parse_key_values(detail::read_file(path), path.filename().string());
}

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw ConfigError("invalid value '" + value + "' for " + key);
    }
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError("invalid boolean '" + value + "' for " + key);
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& value) {
    std::vector<std::size_t> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const std::string t = trim(item);
        if (!t.empty()) out.push_back(parse_number<std::size_t>(key, t));
    }
    return out;
}

template <class T>
std::string list_to_string(const std::vector<T>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

} // namespace detail

/// Applies recognised keys; returns the keys it did not recognise.
inline std::vector<std::string> apply(TrainConfig& c, const KeyValues& kv) {
    using detail::parse_bool;
    using detail::parse_list;
    using detail::parse_number;
    std::vector<std::string> unknown;
    if (auto it = kv.find("seed"); it != kv.end()) {
        const auto s = parse_number<std::uint64_t>("seed", it->second);
        c.optim.seed = s;
        c.mining.seed = s;
    }
    for (const auto& [k, v] : kv) {
        if (k == "seed") continue;
        if (k == "model.local_dim") c.model.local_dim = parse_number<std::size_t>(k, v);
        else if (k == "model.descriptor_dim") c.model.descriptor_dim = parse_number<std::size_t>(k, v);
        else if (k == "model.pointnet_widths") c.model.pointnet_widths = parse_list(k, v);
        else if (k == "model.slc_hidden") c.model.slc_hidden = parse_list(k, v);
        else if (k == "model.num_segments") c.model.num_segments = parse_number<std::size_t>(k, v);
        else if (k == "model.aggregation") c.model.aggregation = parse_aggregation(v);
        else if (k == "mining.r_th") c.mining.r_th = parse_number<double>(k, v);
        else if (k == "mining.anchor_min_spacing") c.mining.anchor_min_spacing = parse_number<double>(k, v);
        else if (k == "mining.num_negatives") c.mining.num_negatives = parse_number<std::size_t>(k, v);
        else if (k == "mining.revisit_exclusion_window") c.mining.revisit_exclusion_window = parse_number<std::size_t>(k, v);
        else if (k == "mining.eval_radius") c.mining.eval_radius = parse_number<double>(k, v);
        else if (k == "mining.seed") c.mining.seed = parse_number<std::uint64_t>(k, v);
        else if (k == "loss.margin") c.loss.margin = parse_number<double>(k, v);
        else if (k == "loss.alpha") c.loss.alpha = parse_number<double>(k, v);
        else if (k == "loss.slc_enabled") c.loss.slc_enabled = parse_bool(k, v);
        else if (k == "optim.learning_rate") c.optim.learning_rate = parse_number<double>(k, v);
        else if (k == "optim.weight_decay") c.optim.weight_decay = parse_number<double>(k, v);
        else if (k == "optim.beta1") c.optim.beta1 = parse_number<double>(k, v);
        else if (k == "optim.beta2") c.optim.beta2 = parse_number<double>(k, v);
        else if (k == "optim.epsilon") c.optim.epsilon = parse_number<double>(k, v);
        else if (k == "optim.max_epochs") c.optim.max_epochs = parse_number<int>(k, v);
        else if (k == "optim.patience") c.optim.patience = parse_number<int>(k, v);
        else if (k == "optim.seed") c.optim.seed = parse_number<std::uint64_t>(k, v);
        else if (k == "data.num_points") c.data.num_points = parse_number<std::size_t>(k, v);
        else if (k == "data.augment_rotation") c.data.augment_rotation = parse_bool(k, v);
        else if (k == "data.rotation_range") c.data.rotation_range = parse_number<double>(k, v);
        else if (k == "data.segment_aware_validation") c.data.segment_aware_validation = parse_bool(k, v);
        else unknown.push_back(k);
    }
    // keep the last PointNet width tied to local_dim when only one was given
    if (kv.contains("model.local_dim") && !kv.contains("model.pointnet_widths") && !c.model.pointnet_widths.empty()) {
        c.model.pointnet_widths.back() = c.model.local_dim;
    }
    return unknown;
}

inline std::vector<std::string> apply(OrchardSpec& s, const KeyValues& kv) {
    using detail::parse_number;
    std::vector<std::string> unknown;
    for (const auto& [full, v] : kv) {
        const std::string k = full.starts_with("orchard.") ? full.substr(8) : full;
        if (k == "rows") s.rows = parse_number<int>(full, v);
        else if (k == "row_length") s.row_length = parse_number<double>(full, v);
        else if (k == "row_spacing") s.row_spacing = parse_number<double>(full, v);
        else if (k == "trees_per_row") s.trees_per_row = parse_number<int>(full, v);
        else if (k == "points_per_tree") s.points_per_tree = parse_number<int>(full, v);
        else if (k == "noise_sigma") s.noise_sigma = parse_number<double>(full, v);
        else if (k == "laps") s.laps = parse_number<int>(full, v);
        else if (k == "scan_spacing") s.scan_spacing = parse_number<double>(full, v);
        else if (k == "sensor_range") s.sensor_range = parse_number<double>(full, v);
        else if (k == "seed") s.seed = parse_number<std::uint64_t>(full, v);
        else unknown.push_back(full);
    }
    return unknown;
}

inline TrainConfig train_config_from(const KeyValues& kv) {
    TrainConfig c;
    const auto unknown = apply(c, kv);
    if (!unknown.empty()) throw ConfigError("unknown config key '" + unknown.front() + "'");
    c.validate();
    return c;
}

inline OrchardSpec orchard_spec_from(const KeyValues& kv) {
    OrchardSpec s;
    const auto unknown = apply(s, kv);
    if (!unknown.empty()) throw ConfigError("unknown orchard key '" + unknown.front() + "'");
    return s;
}

/// Full snapshot in the same key = value format, every key spelled out.
inline std::string to_config_text(const TrainConfig& c) {
    std::ostringstream os;
    const auto num = [](double v) { return detail::format_double(v); };
    os << "model.local_dim = " << c.model.local_dim << '\n'
       << "model.descriptor_dim = " << c.model.descriptor_dim << '\n'
       << "model.pointnet_widths = " << detail::list_to_string(c.model.pointnet_widths) << '\n'
       << "model.slc_hidden = " << detail::list_to_string(c.model.slc_hidden) << '\n'
       << "model.num_segments = " << c.model.num_segments << '\n'
       << "model.aggregation = " << to_string(c.model.aggregation) << '\n'
       << "mining.r_th = " << num(c.mining.r_th) << '\n'
       << "mining.anchor_min_spacing = " << num(c.mining.anchor_min_spacing) << '\n'
       << "mining.num_negatives = " << c.mining.num_negatives << '\n'
       << "mining.revisit_exclusion_window = " << c.mining.revisit_exclusion_window << '\n'
       << "mining.eval_radius = " << num(c.mining.eval_radius) << '\n'
       << "mining.seed = " << c.mining.seed << '\n'
       << "loss.margin = " << num(c.loss.margin) << '\n'
       << "loss.alpha = " << num(c.loss.alpha) << '\n'
       << "loss.slc_enabled = " << (c.loss.slc_enabled ? "true" : "false") << '\n'
       << "optim.learning_rate = " << num(c.optim.learning_rate) << '\n'
       << "optim.weight_decay = " << num(c.optim.weight_decay) << '\n'
       << "optim.beta1 = " << num(c.optim.beta1) << '\n'
       << "optim.beta2 = " << num(c.optim.beta2) << '\n'
       << "optim.epsilon = " << num(c.optim.epsilon) << '\n'
       << "optim.max_epochs = " << c.optim.max_epochs << '\n'
       << "optim.patience = " << c.optim.patience << '\n'
       << "optim.seed = " << c.optim.seed << '\n'
       << "data.num_points = " << c.data.num_points << '\n'
       << "data.augment_rotation = " << (c.data.augment_rotation ? "true" : "false") << '\n'
       << "data.rotation_range = " << num(c.data.rotation_range) << '\n'
       << "data.segment_aware_validation = " << (c.data.segment_aware_validation ? "true" : "false") << '\n';
    return os.str();
}

inline std::string to_config_text(const OrchardSpec& s) {
    std::ostringstream os;
    const auto num = [](double v) { return detail::format_double(v); };
    os << "rows = " << s.rows << '\n'
       << "row_length = " << num(s.row_length) << '\n'
       << "row_spacing = " << num(s.row_spacing) << '\n'
       << "trees_per_row = " << s.trees_per_row << '\n'
       << "points_per_tree = " << s.points_per_tree << '\n'
       << "noise_sigma = " << num(s.noise_sigma) << '\n'
       << "laps = " << s.laps << '\n'
       << "scan_spacing = " << num(s.scan_spacing) << '\n'
       << "sensor_range = " << num(s.sensor_range) << '\n'
       << "seed = " << s.seed << '\n';
    return os.str();
}

} // namespace pgap
