#pragma once

#include <map>
#include <string>
#include <vector>

namespace dmc::pipeline {

// Flat sectioned key-value config:
//
//   # comment (';' also starts one)
//   [section]
//   key = value
//
// Section and key names are [a-z0-9_]+; an entry before any section header or
// a duplicate key within a section is a format error. Values keep inner
// whitespace, with leading/trailing blanks trimmed. Consumers declare the
// keys they understand via require_known, which rejects anything else by
// name, so a typo never passes silently.
class Config {
public:
    static Config parse(const std::string& text);
    static Config load(const std::string& path);

    bool has(const std::string& section, const std::string& key) const;
    bool has_section(const std::string& section) const;

    // The _or variants fall back to the default; the plain getters throw
    // ConfigurationError when the key is absent. Number/bool parsing throws
    // FormatError naming the entry.
    std::string get_string(const std::string& section, const std::string& key) const;
    std::string get_string_or(const std::string& section, const std::string& key,
                              const std::string& fallback) const;
    long get_int(const std::string& section, const std::string& key) const;
    long get_int_or(const std::string& section, const std::string& key, long fallback) const;
    double get_double(const std::string& section, const std::string& key) const;
    double get_double_or(const std::string& section, const std::string& key,
                         double fallback) const;
    bool get_bool(const std::string& section, const std::string& key) const;
    bool get_bool_or(const std::string& section, const std::string& key, bool fallback) const;

    std::vector<std::string> sections() const;
    std::vector<std::string> keys(const std::string& section) const;

    // Throws ConfigurationError naming section.key for any key of the section
    // outside the allowed list.
    void require_known(const std::string& section, const std::vector<std::string>& allowed) const;

    // Original text, kept verbatim so a run directory can carry an exact copy.
    const std::string& text() const { return text_; }

private:
    std::map<std::string, std::map<std::string, std::string>> data_;
    std::string text_;
};

} // namespace dmc::pipeline
