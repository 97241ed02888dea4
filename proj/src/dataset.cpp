#include "tte/dataset.hpp"

namespace tte {

std::size_t Dataset::treated() const {
    return static_cast<std::size_t>((t.array() > 0.5).count());
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
    Dataset out;
    const auto n = static_cast<Eigen::Index>(rows.size());
    out.x.resize(n, x.cols());
    out.t.resize(n);
    out.y.resize(n);
    out.names = names;
    if (y1) out.y1 = Eigen::VectorXd(n);
    if (y0) out.y0 = Eigen::VectorXd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]);
        out.x.row(i) = x.row(r);
        out.t(i) = t(r);
        out.y(i) = y(r);
        if (y1) (*out.y1)(i) = (*y1)(r);
        if (y0) (*out.y0)(i) = (*y0)(r);
    }
    return out;
}

}  // namespace tte
