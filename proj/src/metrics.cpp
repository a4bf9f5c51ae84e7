#include "dmc/metrics.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dmc/errors.hpp"

namespace dmc::pipeline {

namespace {

using core::ContractError;
using core::FormatError;

// Shortest representation that parses back to the identical double.
std::string render_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const char* what) {
    char* end = nullptr;
    const double out = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw FormatError(std::string("metrics csv: bad ") + what + " value '" + s + "'");
    return out;
}

long parse_long(const std::string& s, const char* what) {
    char* end = nullptr;
    const long out = std::strtol(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0')
        throw FormatError(std::string("metrics csv: bad ") + what + " value '" + s + "'");
    return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

} // namespace

const std::vector<std::string>& MetricsLog::columns() {
    static const std::vector<std::string> cols = {
        "step",           "stage", "pass",      "return_mean", "return_std",
        "coherency",      "divergence_gap",     "loss",        "grad_norm",
        "seed"};
    return cols;
}

void MetricsLog::append(MetricsRow row) {
    if (row.stage.empty()) throw ContractError("metrics row needs a stage label");
    if (row.stage.find(',') != std::string::npos || row.stage.find('\n') != std::string::npos)
        throw ContractError("metrics stage label must not contain ',' or newlines");
    if (!rows_.empty() && row.step <= rows_.back().step)
        throw ContractError("metrics wall step must strictly increase (got " +
                            std::to_string(row.step) + " after " +
                            std::to_string(rows_.back().step) + ")");
    rows_.push_back(std::move(row));
}

std::string MetricsLog::to_csv() const {
    std::ostringstream out;
    const auto& cols = columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& r : rows_) {
        out << r.step << ',' << r.stage << ',' << r.pass << ',' << render_double(r.return_mean)
            << ',' << render_double(r.return_std) << ',' << render_double(r.coherency) << ','
            << render_double(r.divergence_gap) << ',' << render_double(r.loss) << ','
            << render_double(r.grad_norm) << ',' << r.seed << '\n';
    }
    return out.str();
}

MetricsLog MetricsLog::from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw FormatError("metrics csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    {
        std::ostringstream want;
        const auto& cols = columns();
        for (std::size_t i = 0; i < cols.size(); ++i) want << (i ? "," : "") << cols[i];
        if (line != want.str()) throw FormatError("metrics csv: unexpected header '" + line + "'");
    }
    MetricsLog log;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != columns().size())
            throw FormatError("metrics csv: expected " + std::to_string(columns().size()) +
                              " fields, got " + std::to_string(f.size()));
        MetricsRow r;
        r.step = parse_long(f[0], "step");
        r.stage = f[1];
        r.pass = static_cast<int>(parse_long(f[2], "pass"));
        r.return_mean = parse_double(f[3], "return_mean");
        r.return_std = parse_double(f[4], "return_std");
        r.coherency = parse_double(f[5], "coherency");
        r.divergence_gap = parse_double(f[6], "divergence_gap");
        r.loss = parse_double(f[7], "loss");
        r.grad_norm = parse_double(f[8], "grad_norm");
        r.seed = static_cast<std::uint64_t>(parse_long(f[9], "seed"));
        log.append(std::move(r));
    }
    return log;
}

void MetricsLog::write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write metrics csv '" + path + "'");
    out << to_csv();
}

MetricsLog MetricsLog::read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot read metrics csv '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_csv(buf.str());
}

} // namespace dmc::pipeline
