#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace dmc::pipeline {

// One evaluation record. Wall step counts optimizer updates since the run
// began and must strictly increase across rows; there are deliberately no
// timestamp fields so identical runs serialize identically.
struct MetricsRow {
    long step = 0;
    std::string stage;
    int pass = 0;
    double return_mean = 0.0;
    double return_std = 0.0;
    double coherency = 0.0;
    double divergence_gap = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
    std::uint64_t seed = 0;
};

// Append-only evaluation log with a fixed CSV column order. Doubles are
// serialized shortest-round-trip, so parse(render(log)) is value-exact.
class MetricsLog {
public:
    static const std::vector<std::string>& columns();

    void append(MetricsRow row); // ContractError unless row.step > last step
    const std::vector<MetricsRow>& rows() const { return rows_; }
    bool empty() const { return rows_.empty(); }
    std::size_t size() const { return rows_.size(); }

    std::string to_csv() const;
    static MetricsLog from_csv(const std::string& text); // FormatError on mismatch

    void write_csv(const std::string& path) const;
    static MetricsLog read_csv(const std::string& path);

private:
    std::vector<MetricsRow> rows_;
};

} // namespace dmc::pipeline
