#include "r2vd/eval.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <cmath>
#include <json.hpp>
#include <stdexcept>

#include "r2vd/linalg.hpp"
#include "r2vd/vdi.hpp"

namespace r2vd::eval {

namespace {

void check_inputs(std::size_t n, const GroundTruthMask& gt) {
    if (n != gt.pixels()) throw std::invalid_argument("roc: score map and mask differ in size");
    const std::size_t a = gt.anomaly_count();
    if (a == 0 || a == n) throw std::invalid_argument("roc: mask needs at least one anomaly and one background pixel");
}

std::vector<double> normalized(const AnomalyMap& a) {
    ScoreMap s(a.height, a.width, a.values);
    return vdi::min_max_normalize(s).values;
}

FiveNumber summary(std::vector<double> v) {
    FiveNumber f;
    f.count = v.size();
    f.min = *std::min_element(v.begin(), v.end());
    f.max = *std::max_element(v.begin(), v.end());
    f.q1 = linalg::quantile(v, 0.25);
    f.median = linalg::quantile(v, 0.5);
    f.q3 = linalg::quantile(v, 0.75);
    return f;
}

}  // namespace

RocCurve roc(std::span<const double> scores, const GroundTruthMask& gt) {
    check_inputs(scores.size(), gt);
    for (double s : scores)
        if (!std::isfinite(s)) throw std::invalid_argument("roc: non-finite score");
    std::vector<double> uniq(scores.begin(), scores.end());
    std::sort(uniq.begin(), uniq.end(), std::greater<>());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

    RocCurve c;
    c.thresholds.push_back(uniq.front() + 1.0);
    c.thresholds.insert(c.thresholds.end(), uniq.begin(), uniq.end());
    c.thresholds.push_back(uniq.back() - 1.0);

    // Sweep pixels in descending score order; everything strictly above a
    // threshold has been consumed when it is reached.
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto i, auto j) { return scores[i] > scores[j]; });
    const double na = static_cast<double>(gt.anomaly_count());
    const double nb = static_cast<double>(gt.pixels()) - na;
    std::size_t pos = 0, hits = 0, falses = 0;
    for (double tau : c.thresholds) {
        while (pos < order.size() && scores[order[pos]] > tau) {
            (gt.mask[order[pos]] ? hits : falses) += 1;
            ++pos;
        }
        c.pd.push_back(static_cast<double>(hits) / na);
        c.pf.push_back(static_cast<double>(falses) / nb);
    }
    return c;
}

RocCurve roc(const AnomalyMap& a, const GroundTruthMask& gt) {
    if (a.height != gt.height || a.width != gt.width) throw std::invalid_argument("roc: map and mask differ in shape");
    return roc(std::span<const double>(a.values), gt);
}

Separability separability_stats(const AnomalyMap& a, const GroundTruthMask& gt) {
    check_inputs(a.values.size(), gt);
    const auto v = normalized(a);
    std::vector<double> an, bg;
    for (std::size_t i = 0; i < v.size(); ++i) (gt.mask[i] ? an : bg).push_back(v[i]);
    return {summary(std::move(an)), summary(std::move(bg))};
}

MetricsReport auc_metrics(const AnomalyMap& a, const GroundTruthMask& gt) {
    const RocCurve c = roc(a, gt);
    MetricsReport m;
    for (std::size_t i = 1; i < c.pd.size(); ++i) m.auc_df += 0.5 * (c.pf[i] - c.pf[i - 1]) * (c.pd[i] + c.pd[i - 1]);

    // pd(tau) is a step function; its exact integral over [0,1] is the mean
    // normalised score of the class.
    const auto v = normalized(a);
    double sa = 0.0, sb = 0.0;
    std::size_t na = 0, nb = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (gt.mask[i]) {
            sa += v[i];
            ++na;
        } else {
            sb += v[i];
            ++nb;
        }
    }
    m.auc_dt = sa / static_cast<double>(na);
    m.auc_ft = sb / static_cast<double>(nb);
    m.auc_od = m.auc_df + m.auc_dt - m.auc_ft;
    m.auc_snpr = m.auc_dt / std::max(m.auc_ft, 1e-12);
    m.stats = separability_stats(a, gt);
    return m;
}

void write_roc_csv(const RocCurve& curve, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "threshold,pd,pf\n" << std::setprecision(17);
    for (std::size_t i = 0; i < curve.thresholds.size(); ++i)
        out << curve.thresholds[i] << ',' << curve.pd[i] << ',' << curve.pf[i] << '\n';
}

std::string metrics_json(const MetricsReport& m) {
    nlohmann::ordered_json j;
    j["auc_df"] = m.auc_df;
    j["auc_dt"] = m.auc_dt;
    j["auc_ft"] = m.auc_ft;
    j["auc_od"] = m.auc_od;
    j["auc_snpr"] = m.auc_snpr;
    for (auto [name, f] : {std::pair{"anomaly", &m.stats.anomaly}, std::pair{"background", &m.stats.background}}) {
        const std::string p = std::string(name) + "_";
        j[p + "min"] = f->min;
        j[p + "q1"] = f->q1;
        j[p + "median"] = f->median;
        j[p + "q3"] = f->q3;
        j[p + "max"] = f->max;
        j[p + "count"] = f->count;
    }
    return j.dump(2);
}

void write_metrics_json(const MetricsReport& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << metrics_json(m) << '\n';
}

}  // namespace r2vd::eval
