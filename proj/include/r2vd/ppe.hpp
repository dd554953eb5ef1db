#pragma once

#include "r2vd/fields.hpp"
#include "r2vd/hsi.hpp"

namespace r2vd::ppe {

enum class CurveShape { LenientTanh, StrictSigmoid };

struct WeightCurveParams {
    double theta_gap = 0.7;
    double steepness = 6.0;
    double floor = 0.01;
    CurveShape shape = CurveShape::LenientTanh;

    double center() const { return 0.5 * (theta_gap + 1.0); }
    void validate() const;

    static WeightCurveParams lenient() { return {0.7, 6.0, 0.01, CurveShape::LenientTanh}; }
    static WeightCurveParams strict() { return {0.7, 30.0, 0.0, CurveShape::StrictSigmoid}; }
};

/// Global Mahalanobis distance of every pixel to the scene mean.
ScoreMap rx_scores(const HsiCube& cube);

/// Energy outside the top-bg_dim eigen-subspace of the pixel correlation matrix.
ScoreMap lsun_scores(const HsiCube& cube, std::size_t bg_dim);

/// Mean of the two streams' empirical ranks.
ScoreMap fuse_pra(const ScoreMap& s_rx, const ScoreMap& s_lsun);

/// Piecewise weight: 1 at t <= theta_gap, floor at t >= 1, and a smooth
/// transition centred at (theta_gap + 1) / 2 in between.
double weight_curve(double t, const WeightCurveParams& params);

/// Normalises scores by their (1 - eta) quantile and maps them through the
/// weight curve. Throws when that quantile is zero.
WeightMap threshold_weights(const ScoreMap& scores, double eta, const WeightCurveParams& params);

/// Lenient coarse map W_coa from the fused consensus P_avg.
WeightMap coarse_weights(const ScoreMap& p_avg, double eta, const WeightCurveParams& params = WeightCurveParams::lenient());

struct PriorResult {
    ScoreMap rx;
    ScoreMap lsun;
    ScoreMap p_avg;
    WeightMap w_coa;
};

PriorResult extract_priors(const HsiCube& cube, std::size_t bg_dim, double eta,
                           const WeightCurveParams& params = WeightCurveParams::lenient());

}  // namespace r2vd::ppe
