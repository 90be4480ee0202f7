#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lmdet/model.hpp"

namespace lmdet {

/// Euclidean distance per landmark between prediction and truth, in the
/// same geometry, multiplied by a physical spacing (1.0 keeps pixels).
std::vector<double> radial_errors(const LandmarkSet& pred, const LandmarkSet& truth,
                                  double spacing);

struct MreResult {
    double mean = 0.0;
    double std_dev = 0.0;  // population
};

MreResult mre(const std::vector<double>& errors);

/// Percentage of errors strictly below the threshold.
double sdr(const std::vector<double>& errors, double threshold);

/// mm per pixel from the two wrist endpoints: 50 / |p - q|.
double hand_spacing(std::pair<double, double> p, std::pair<double, double> q);

/// Resolves a domain's spacing rule against the ground-truth landmarks of
/// one image. fixed_mm ignores the landmarks; wrist_pair measures them.
double spacing_for(const DomainSpec& spec, const LandmarkSet& truth);

/// "mm" for physical rules, "px" for the pixel rule.
std::string spacing_unit(const DomainSpec& spec);

struct DomainReport {
    std::string domain;
    std::string unit;
    std::size_t count = 0;
    double mre_mean = 0.0;
    double mre_std = 0.0;
    std::vector<std::pair<double, double>> sdr_at;  // (threshold, percent)
    double id_threshold = 0.0;
    double id_rate = 0.0;
    std::vector<double> errors;
};

DomainReport make_domain_report(const DomainSpec& spec, std::vector<double> errors);

struct EvalReport {
    std::vector<DomainReport> domains;

    std::string table_text() const;
    std::string key_value_text() const;
};

}  // namespace lmdet
