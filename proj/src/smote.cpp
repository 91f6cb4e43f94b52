#include <algorithm>
#include <numeric>

#include "ccr/data.hpp"
#include "ccr/errors.hpp"
#include "ccr/rng.hpp"

namespace ccr {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double t = a[i] - b[i];
        d += t * t;
    }
    return d;
}

// k nearest same-class neighbours of every member (indices into `members`),
// ties broken by lower index.
std::vector<std::vector<std::size_t>> neighbours(const RecordSet& rs, const std::vector<std::size_t>& members,
                                                 std::size_t k) {
    const std::size_t n = members.size();
    std::vector<std::vector<std::size_t>> out(n);
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t i = 0; i < n; ++i) {
        dist.clear();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) dist.emplace_back(squared_distance(rs.row(members[i]), rs.row(members[j])), j);
        std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
        for (std::size_t q = 0; q < k; ++q) out[i].push_back(dist[q].second);
    }
    return out;
}

}  // namespace

RecordSet smote(const RecordSet& rs, std::size_t k, std::uint64_t seed, SmoteReport* report) {
    if (k == 0) throw ConfigError("SMOTE needs k >= 1");
    const std::size_t m = rs.num_classes();
    const auto counts = rs.class_counts();
    const std::size_t target = counts.empty() ? 0 : *std::max_element(counts.begin(), counts.end());

    for (std::size_t c = 0; c < m; ++c)
        if (counts[c] == 1)
            throw AugmentationError("class '" + rs.schema.classes[c] + "' has a single sample; SMOTE needs at least 2");

    SmoteReport rep;
    rep.before = counts;
    rep.k_requested = k;
    rep.k_used.assign(m, 0);

    RecordSet out = rs;
    Rng rng(seed);
    const std::size_t width = rs.width();
    for (std::size_t c = 0; c < m; ++c) {
        if (counts[c] == 0 || counts[c] == target) continue;
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < rs.size(); ++i)
            if (rs.labels[i] == c) members.push_back(i);
        const std::size_t k_eff = std::min(k, members.size() - 1);
        if (k_eff < k) rep.capped = true;
        rep.k_used[c] = k_eff;
        const auto nn = neighbours(rs, members, k_eff);

        const std::size_t need = target - counts[c];
        for (std::size_t s = 0; s < need; ++s) {
            const std::size_t base = s % members.size();
            const std::size_t pick = nn[base][rng.below(k_eff)];
            const double gap = rng.uniform();
            auto x = rs.row(members[base]);
            auto y = rs.row(members[pick]);
            for (std::size_t j = 0; j < width; ++j) out.features.push_back(x[j] + gap * (y[j] - x[j]));
            out.labels.push_back(static_cast<std::uint16_t>(c));
        }
    }
    rep.after = out.class_counts();
    if (report) *report = std::move(rep);
    return out;
}

}  // namespace ccr
