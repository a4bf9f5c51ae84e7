#include "dmc/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dmc/errors.hpp"

namespace dmc::pipeline {

namespace {

using core::ConfigurationError;
using core::FormatError;

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

bool valid_name(const std::string& s) {
    if (s.empty()) return false;
    return std::all_of(s.begin(), s.end(), [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
    });
}

std::string entry_name(const std::string& section, const std::string& key) {
    return section + "." + key;
}

} // namespace

Config Config::parse(const std::string& text) {
    Config cfg;
    cfg.text_ = text;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string body = trim(line);
        if (body.empty() || body[0] == '#' || body[0] == ';') continue;
        if (body.front() == '[') {
            if (body.back() != ']')
                throw FormatError("config line " + std::to_string(lineno) +
                                  ": unterminated section header");
            section = trim(body.substr(1, body.size() - 2));
            if (!valid_name(section))
                throw FormatError("config line " + std::to_string(lineno) +
                                  ": bad section name '" + section + "'");
            cfg.data_[section]; // a section may legitimately stay empty
            continue;
        }
        const std::size_t eq = body.find('=');
        if (eq == std::string::npos)
            throw FormatError("config line " + std::to_string(lineno) +
                              ": expected 'key = value'");
        if (section.empty())
            throw FormatError("config line " + std::to_string(lineno) +
                              ": entry before any [section] header");
        const std::string key = trim(body.substr(0, eq));
        if (!valid_name(key))
            throw FormatError("config line " + std::to_string(lineno) + ": bad key name '" + key +
                              "'");
        auto& sect = cfg.data_[section];
        if (sect.count(key))
            throw FormatError("config line " + std::to_string(lineno) + ": duplicate key '" +
                              entry_name(section, key) + "'");
        sect[key] = trim(body.substr(eq + 1));
    }
    return cfg;
}

Config Config::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
}

bool Config::has(const std::string& section, const std::string& key) const {
    const auto it = data_.find(section);
    return it != data_.end() && it->second.count(key) > 0;
}

bool Config::has_section(const std::string& section) const { return data_.count(section) > 0; }

std::string Config::get_string(const std::string& section, const std::string& key) const {
    const auto it = data_.find(section);
    if (it != data_.end()) {
        const auto kt = it->second.find(key);
        if (kt != it->second.end()) return kt->second;
    }
    throw ConfigurationError("missing config entry '" + entry_name(section, key) + "'");
}

std::string Config::get_string_or(const std::string& section, const std::string& key,
                                  const std::string& fallback) const {
    return has(section, key) ? get_string(section, key) : fallback;
}

long Config::get_int(const std::string& section, const std::string& key) const {
    const std::string v = get_string(section, key);
    char* end = nullptr;
    const long out = std::strtol(v.c_str(), &end, 10);
    if (end == v.c_str() || *end != '\0')
        throw FormatError("config entry '" + entry_name(section, key) + "': '" + v +
                          "' is not an integer");
    return out;
}

long Config::get_int_or(const std::string& section, const std::string& key, long fallback) const {
    return has(section, key) ? get_int(section, key) : fallback;
}

double Config::get_double(const std::string& section, const std::string& key) const {
    const std::string v = get_string(section, key);
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (end == v.c_str() || *end != '\0')
        throw FormatError("config entry '" + entry_name(section, key) + "': '" + v +
                          "' is not a number");
    return out;
}

double Config::get_double_or(const std::string& section, const std::string& key,
                             double fallback) const {
    return has(section, key) ? get_double(section, key) : fallback;
}

bool Config::get_bool(const std::string& section, const std::string& key) const {
    std::string v = get_string(section, key);
    std::transform(v.begin(), v.end(), v.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw FormatError("config entry '" + entry_name(section, key) + "': '" + v +
                      "' is not a boolean");
}

bool Config::get_bool_or(const std::string& section, const std::string& key, bool fallback) const {
    return has(section, key) ? get_bool(section, key) : fallback;
}

std::vector<std::string> Config::sections() const {
    std::vector<std::string> out;
    out.reserve(data_.size());
    for (const auto& [name, entries] : data_) out.push_back(name);
    return out;
}

std::vector<std::string> Config::keys(const std::string& section) const {
    std::vector<std::string> out;
    const auto it = data_.find(section);
    if (it == data_.end()) return out;
    out.reserve(it->second.size());
    for (const auto& [key, value] : it->second) out.push_back(key);
    return out;
}

void Config::require_known(const std::string& section,
                           const std::vector<std::string>& allowed) const {
    const auto it = data_.find(section);
    if (it == data_.end()) return;
    for (const auto& [key, value] : it->second) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigurationError("unknown config key '" + entry_name(section, key) + "'");
    }
}

} // namespace dmc::pipeline
