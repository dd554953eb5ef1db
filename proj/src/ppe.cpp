#include "r2vd/ppe.hpp"

#include <cmath>

#include "r2vd/linalg.hpp"

namespace r2vd::ppe {

namespace {

linalg::Matrix pixel_matrix(const HsiCube& cube) {
    linalg::Matrix m(cube.pixels(), cube.bands);
    for (std::size_t b = 0; b < cube.bands; ++b)
        for (std::size_t p = 0; p < cube.pixels(); ++p) m(p, b) = cube.at(p, b);
    return m;
}

}  // namespace

void WeightCurveParams::validate() const {
    if (!(theta_gap > 0.0 && theta_gap < 1.0)) throw std::invalid_argument("weight curve: theta_gap must be in (0,1)");
    if (!(steepness > 0.0)) throw std::invalid_argument("weight curve: steepness must be positive");
    if (!(floor >= 0.0 && floor <= 1.0)) throw std::invalid_argument("weight curve: floor must be in [0,1]");
}

ScoreMap rx_scores(const HsiCube& cube) {
    validate_cube(cube);
    const linalg::Matrix px = pixel_matrix(cube);
    const auto stats = linalg::mean_covariance(px);
    const linalg::Cholesky chol(stats.cov);

    ScoreMap out(cube.height, cube.width);
    std::vector<double> d(cube.bands);
    for (std::size_t p = 0; p < px.rows; ++p) {
        for (std::size_t b = 0; b < cube.bands; ++b) d[b] = px(p, b) - stats.mean[b];
        const std::vector<double> y = chol.solve(d);
        double s = 0.0;
        for (std::size_t b = 0; b < cube.bands; ++b) s += d[b] * y[b];
        out.values[p] = std::max(s, 0.0);
    }
    return out;
}

ScoreMap lsun_scores(const HsiCube& cube, std::size_t bg_dim) {
    validate_cube(cube);
    const std::size_t c = cube.bands, n = cube.pixels();
    if (bg_dim < 1 || bg_dim >= c) throw std::invalid_argument("lsun: bg_dim must be in [1, bands)");

    const linalg::Matrix px = pixel_matrix(cube);
    linalg::SymMatrix corr(c);
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t a = 0; a < c; ++a)
            for (std::size_t b = a; b < c; ++b) corr(a, b) += px(p, a) * px(p, b);
    for (std::size_t a = 0; a < c; ++a)
        for (std::size_t b = a; b < c; ++b) {
            corr(a, b) /= static_cast<double>(n);
            corr(b, a) = corr(a, b);
        }
    const linalg::Eigen eig = linalg::sym_eig(corr);

    ScoreMap out(cube.height, cube.width);
    std::vector<double> coef(bg_dim), resid(c);
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t k = 0; k < bg_dim; ++k) {
            double s = 0.0;
            for (std::size_t b = 0; b < c; ++b) s += eig.vectors(b, k) * px(p, b);
            coef[k] = s;
        }
        double e = 0.0;
        for (std::size_t b = 0; b < c; ++b) {
            double r = px(p, b);
            for (std::size_t k = 0; k < bg_dim; ++k) r -= eig.vectors(b, k) * coef[k];
            e += r * r;
        }
        out.values[p] = e;
    }
    return out;
}

ScoreMap fuse_pra(const ScoreMap& s_rx, const ScoreMap& s_lsun) {
    if (!s_rx.same_shape(s_lsun)) throw std::invalid_argument("fuse_pra: score maps differ in shape");
    const auto r1 = linalg::empirical_rank(s_rx.values);
    const auto r2 = linalg::empirical_rank(s_lsun.values);
    ScoreMap out(s_rx.height, s_rx.width);
    for (std::size_t i = 0; i < r1.size(); ++i) out.values[i] = 0.5 * (r1[i] + r2[i]);
    return out;
}

double weight_curve(double t, const WeightCurveParams& params) {
    if (t >= 1.0) return params.floor;
    if (t <= params.theta_gap) return 1.0;
    const double z = params.steepness * (t - params.center());
    if (params.shape == CurveShape::LenientTanh) return 0.5 * (1.0 - std::tanh(z));
    return 1.0 / (1.0 + std::exp(z));
}

WeightMap threshold_weights(const ScoreMap& scores, double eta, const WeightCurveParams& params) {
    if (!(eta > 0.0 && eta < 0.5)) throw std::invalid_argument("eta must be in (0, 0.5)");
    params.validate();
    const double tau = linalg::quantile(scores.values, 1.0 - eta);
    if (!(tau > 0.0)) throw std::domain_error("weight map: (1 - eta) quantile of the scores is zero");
    WeightMap out(scores.height, scores.width);
    for (std::size_t i = 0; i < scores.values.size(); ++i) out.values[i] = weight_curve(scores.values[i] / tau, params);
    return out;
}

WeightMap coarse_weights(const ScoreMap& p_avg, double eta, const WeightCurveParams& params) {
    return threshold_weights(p_avg, eta, params);
}

PriorResult extract_priors(const HsiCube& cube, std::size_t bg_dim, double eta, const WeightCurveParams& params) {
    PriorResult r;
    r.rx = rx_scores(cube);
    r.lsun = lsun_scores(cube, bg_dim);
    r.p_avg = fuse_pra(r.rx, r.lsun);
    r.w_coa = coarse_weights(r.p_avg, eta, params);
    return r;
}

}  // namespace r2vd::ppe
