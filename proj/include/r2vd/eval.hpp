#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "r2vd/fields.hpp"
#include "r2vd/hsi.hpp"

namespace r2vd::eval {

struct RocCurve {
    std::vector<double> thresholds;  // descending, with sentinels at both ends
    std::vector<double> pd;
    std::vector<double> pf;
};

/// pd(tau) / pf(tau): fraction of anomaly / background pixels with score > tau.
RocCurve roc(std::span<const double> scores, const GroundTruthMask& gt);
RocCurve roc(const AnomalyMap& a, const GroundTruthMask& gt);

struct FiveNumber {
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
    std::size_t count = 0;
};

struct Separability {
    FiveNumber anomaly;
    FiveNumber background;
};

struct MetricsReport {
    double auc_df = 0;
    double auc_dt = 0;
    double auc_ft = 0;
    double auc_od = 0;
    double auc_snpr = 0;
    Separability stats;
};

/// auc_df: trapezoid over (pf, pd). auc_dt / auc_ft: integrals of pd / pf over
/// tau in [0,1] after min-max normalisation of the scores.
MetricsReport auc_metrics(const AnomalyMap& a, const GroundTruthMask& gt);

/// Per-class five-number summaries of the min-max normalised scores.
Separability separability_stats(const AnomalyMap& a, const GroundTruthMask& gt);

void write_roc_csv(const RocCurve& curve, const std::filesystem::path& path);
void write_metrics_json(const MetricsReport& m, const std::filesystem::path& path);
std::string metrics_json(const MetricsReport& m);

}  // namespace r2vd::eval
