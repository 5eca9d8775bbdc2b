#pragma once

// Reader for the flat TOML subset used by experiment configs:
//
//   # comment
//   [section]
//   key = 1.5
//   name = "text"
//   flag = true
//   list = [1, 2, 3]
//
// Keys inside a section are addressed as "section.key". Nested tables,
// inline tables, multi-line strings and dates are not supported.

#include <cstddef>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mombs/csv.hpp"

namespace mombs {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigFile {
public:
    static ConfigFile parse(std::string_view text, const std::string& origin = "<config>") {
        ConfigFile cfg;
        std::string section;
        std::size_t line_no = 0;
        std::size_t pos = 0;
        while (pos <= text.size()) {
            const auto end = text.find('\n', pos);
            std::string_view line = text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos);
            pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
            ++line_no;
            line = strip(strip_comment(line));
            if (line.empty()) continue;
            auto fail = [&](const std::string& what) {
                throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + what);
            };
            if (line.front() == '[') {
                if (line.back() != ']' || line.size() < 3) fail("malformed section header");
                section = std::string(strip(line.substr(1, line.size() - 2)));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string_view::npos) fail("expected key = value");
            const auto key = strip(line.substr(0, eq));
            const auto value = strip(line.substr(eq + 1));
            if (key.empty() || value.empty()) fail("expected key = value");
            const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
            if (cfg.values_.count(full)) fail("duplicate key '" + full + "'");
            cfg.values_[full] = std::string(value);
        }
        return cfg;
    }

    static ConfigFile load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config '" + path + "'");
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str(), path);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::optional<std::string> get_string(const std::string& key) const {
        const auto raw = lookup(key);
        if (!raw) return std::nullopt;
        return unquote(*raw, key);
    }

    std::optional<double> get_double(const std::string& key) const {
        const auto raw = lookup(key);
        if (!raw) return std::nullopt;
        std::string_view v = *raw;
        if (v.size() >= 2 && v.front() == '"') v = v.substr(1, v.size() - 2);
        const auto d = csv::parse_double(v);
        if (!d) throw ConfigError("'" + key + "' must be a number");
        return d;
    }

    std::optional<long long> get_int(const std::string& key) const {
        const auto raw = lookup(key);
        if (!raw) return std::nullopt;
        const auto v = csv::parse_int(*raw);
        if (!v) throw ConfigError("'" + key + "' must be an integer");
        return v;
    }

    std::optional<bool> get_bool(const std::string& key) const {
        const auto raw = lookup(key);
        if (!raw) return std::nullopt;
        if (*raw == "true") return true;
        if (*raw == "false") return false;
        throw ConfigError("'" + key + "' must be true or false");
    }

    std::optional<std::vector<std::string>> get_string_list(const std::string& key) const {
        const auto items = get_list(key);
        if (!items) return std::nullopt;
        std::vector<std::string> out;
        for (const auto& item : *items) out.push_back(unquote(item, key));
        return out;
    }

    std::optional<std::vector<long long>> get_int_list(const std::string& key) const {
        const auto items = get_list(key);
        if (!items) return std::nullopt;
        std::vector<long long> out;
        for (const auto& item : *items) {
            const auto v = csv::parse_int(item);
            if (!v) throw ConfigError("'" + key + "' must be a list of integers");
            out.push_back(*v);
        }
        return out;
    }

    /// Keys that were never read; callers use this to reject typos.
    std::vector<std::string> unused_keys() const {
        std::vector<std::string> out;
        for (const auto& [k, _] : values_)
            if (!read_.count(k)) out.push_back(k);
        return out;
    }

private:
    std::map<std::string, std::string> values_;
    mutable std::map<std::string, bool> read_;

    std::optional<std::string> lookup(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        read_[key] = true;
        return it->second;
    }

    std::optional<std::vector<std::string>> get_list(const std::string& key) const {
        const auto raw = lookup(key);
        if (!raw) return std::nullopt;
        std::string_view v = *raw;
        if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw ConfigError("'" + key + "' must be a list");
        v = strip(v.substr(1, v.size() - 2));
        std::vector<std::string> out;
        if (v.empty()) return out;
        for (auto& field : csv::split_fields(v)) {
            const auto item = strip(field);
            if (item.empty()) continue;  // trailing comma
            out.emplace_back(item);
        }
        return out;
    }

    static std::string unquote(std::string_view v, const std::string& key) {
        if (v.size() < 2 || v.front() != '"' || v.back() != '"') throw ConfigError("'" + key + "' must be a quoted string");
        return std::string(v.substr(1, v.size() - 2));
    }

    static std::string_view strip(std::string_view s) {
        while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
        while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
        return s;
    }

    static std::string_view strip_comment(std::string_view s) {
        bool in_string = false;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '"') in_string = !in_string;
            if (s[i] == '#' && !in_string) return s.substr(0, i);
        }
        return s;
    }
};

}  // namespace mombs
