#pragma once

#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "tte/ingest.hpp"
#include "tte/rng.hpp"
#include "tte/time.hpp"

namespace tte::test {

inline ingest::EventLog parse(const std::string& body) {
    std::istringstream in("patient_id,timestamp,kind,name,value\n" + body);
    return ingest::parse_events(in);
}

inline Instant at(const std::string& iso) { return *parse_iso8601(iso); }

// 2024-01-01T00:00:00Z plus h hours, as ISO text.
inline std::string iso(double h) {
    return format_iso8601(at("2024-01-01T00:00:00Z") + Seconds(static_cast<long long>(h * 3600.0)));
}

inline Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> n01;
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n01(rng);
    return m;
}

}  // namespace tte::test
