#include "lmdet/metrics.hpp"

#include <cmath>
#include <cstdio>

namespace lmdet {

std::vector<double> radial_errors(const LandmarkSet& pred, const LandmarkSet& truth,
                                  double spacing) {
    if (pred.coords.size() != truth.coords.size())
        throw ContractError("radial_errors: " + std::to_string(pred.coords.size()) +
                            " predictions vs " + std::to_string(truth.coords.size()) +
                            " truths");
    if (pred.height != truth.height || pred.width != truth.width)
        throw ContractError("radial_errors: geometries differ, " +
                            std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                            " vs " + std::to_string(truth.height) + "x" +
                            std::to_string(truth.width));
    if (!(spacing > 0.0)) throw ContractError("radial_errors: spacing must be > 0");
    std::vector<double> out;
    out.reserve(pred.coords.size());
    for (std::size_t n = 0; n < pred.coords.size(); ++n) {
        const double dr = pred.coords[n].first - truth.coords[n].first;
        const double dc = pred.coords[n].second - truth.coords[n].second;
        out.push_back(std::sqrt(dr * dr + dc * dc) * spacing);
    }
    return out;
}

MreResult mre(const std::vector<double>& errors) {
    if (errors.empty()) throw ContractError("mre: empty error list");
    long double sum = 0.0L;
    for (double e : errors) sum += e;
    const double mean = static_cast<double>(sum / errors.size());
    long double sq = 0.0L;
    for (double e : errors) sq += (e - mean) * (e - mean);
    return {mean, std::sqrt(static_cast<double>(sq / errors.size()))};
}

double sdr(const std::vector<double>& errors, double threshold) {
    if (errors.empty()) throw ContractError("sdr: empty error list");
    if (!(threshold > 0.0)) throw ContractError("sdr: threshold must be > 0");
    std::size_t hit = 0;
    for (double e : errors)
        if (e < threshold) ++hit;
    return 100.0 * static_cast<double>(hit) / static_cast<double>(errors.size());
}

double hand_spacing(std::pair<double, double> p, std::pair<double, double> q) {
    const double dr = p.first - q.first;
    const double dc = p.second - q.second;
    const double dist = std::sqrt(dr * dr + dc * dc);
    if (dist == 0.0) throw ContractError("hand_spacing: coincident wrist endpoints");
    return 50.0 / dist;
}

double spacing_for(const DomainSpec& spec, const LandmarkSet& truth) {
    switch (spec.spacing.rule) {
        case SpacingRule::fixed_mm:
            return spec.spacing.mm_per_pixel;
        case SpacingRule::wrist_pair: {
            const auto a = static_cast<std::size_t>(spec.spacing.wrist_a);
            const auto b = static_cast<std::size_t>(spec.spacing.wrist_b);
            if (a >= truth.coords.size() || b >= truth.coords.size())
                throw ContractError("spacing: wrist endpoints outside the landmark set");
            return hand_spacing(truth.coords[a], truth.coords[b]);
        }
        case SpacingRule::pixel:
            return 1.0;
    }
    throw ContractError("spacing: unknown rule");
}

std::string spacing_unit(const DomainSpec& spec) {
    return spec.spacing.rule == SpacingRule::pixel ? "px" : "mm";
}

DomainReport make_domain_report(const DomainSpec& spec, std::vector<double> errors) {
    DomainReport r;
    r.domain = spec.name;
    r.unit = spacing_unit(spec);
    r.count = errors.size();
    const auto m = mre(errors);
    r.mre_mean = m.mean;
    r.mre_std = m.std_dev;
    for (double t : spec.sdr_thresholds) r.sdr_at.emplace_back(t, sdr(errors, t));
    r.id_threshold = spec.id_threshold;
    r.id_rate = sdr(errors, spec.id_threshold);
    r.errors = std::move(errors);
    return r;
}

namespace {

std::string trimmed(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

}  // namespace

std::string EvalReport::table_text() const {
    std::string out;
    char buf[160];
    for (const auto& d : domains) {
        std::string head = "domain";
        std::string row = d.domain;
        auto pad = [](std::string& s, const std::string& cell) {
            s += std::string(cell.size() < 10 ? 10 - cell.size() : 1, ' ') + cell;
        };
        pad(head, "unit");
        pad(row, d.unit);
        pad(head, "n");
        pad(row, std::to_string(d.count));
        std::snprintf(buf, sizeof(buf), "%.3f", d.mre_mean);
        pad(head, "MRE");
        pad(row, buf);
        std::snprintf(buf, sizeof(buf), "%.3f", d.mre_std);
        pad(head, "SD");
        pad(row, buf);
        for (const auto& [t, pct] : d.sdr_at) {
            std::snprintf(buf, sizeof(buf), "%.2f", pct);
            pad(head, "SDR@" + trimmed(t));
            pad(row, buf);
        }
        std::snprintf(buf, sizeof(buf), "%.2f", d.id_rate);
        pad(head, "ID@" + trimmed(d.id_threshold));
        pad(row, buf);
        out += head + "\n" + row + "\n";
    }
    return out;
}

std::string EvalReport::key_value_text() const {
    std::string out;
    char buf[64];
    auto put = [&](const std::string& key, double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        out += key + "=" + buf + "\n";
    };
    for (const auto& d : domains) {
        out += d.domain + ".unit=" + d.unit + "\n";
        out += d.domain + ".count=" + std::to_string(d.count) + "\n";
        put(d.domain + ".mre", d.mre_mean);
        put(d.domain + ".sd", d.mre_std);
        for (const auto& [t, pct] : d.sdr_at) put(d.domain + ".sdr@" + trimmed(t), pct);
        put(d.domain + ".id@" + trimmed(d.id_threshold), d.id_rate);
    }
    return out;
}

}  // namespace lmdet
