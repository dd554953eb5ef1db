#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "r2vd/autodiff.hpp"
#include "r2vd/optim.hpp"
#include "r2vd/fields.hpp"
#include "r2vd/hsi.hpp"
#include "r2vd/ppe.hpp"

namespace r2vd::gmp {

struct OcaConfig {
    std::size_t bands = 0;
    std::size_t hidden = 64;
    std::size_t pairs = 2;  // (OCB, RSB) pairs in the body
};

// Four depthwise branches (3x3, dilated 3x3, 1x7, 7x1) fused by a pointwise conv.
template <typename T>
struct OcbParams {
    ad::Tensor<T> w3, b3, wd, bd, w17, b17, w71, b71;
    ad::Tensor<T> pw, pb;
    ad::Tensor<T> bn_gamma, bn_beta;
    ad::BatchNormState<T> bn;
};

template <typename T>
struct RsbParams {
    ad::Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct OcaModel {
    OcaConfig cfg;
    ad::Tensor<T> stem_w, stem_b;
    std::vector<OcbParams<T>> ocb;
    std::vector<RsbParams<T>> rsb;
    ad::Tensor<T> head_w, head_b;

    static OcaModel init(const OcaConfig& cfg, std::uint64_t seed);
    std::vector<ad::Tensor<T>> parameters() const;
};

template <typename T>
ad::Tensor<T> ocb_forward(OcbParams<T>& p, const ad::Tensor<T>& f, bool train);

template <typename T>
ad::Tensor<T> rsb_forward(const RsbParams<T>& p, const ad::Tensor<T>& f);

/// x: [1, C, H, W]; returns the reconstruction with the same shape.
template <typename T>
ad::Tensor<T> oca_forward(OcaModel<T>& model, const ad::Tensor<T>& x, bool train);

/// [1, C, H, W] view of a cube (band-sequential storage matches directly).
template <typename T>
ad::Tensor<T> cube_tensor(const HsiCube& cube);

/// (1/N) sum_i w_i ||x_i - xhat_i||^2 on tensors laid out [1, C, H, W].
template <typename T>
ad::Tensor<T> weighted_recon_loss(const ad::Tensor<T>& xhat, std::span<const T> x, const WeightMap& w);

double weighted_recon_loss(const HsiCube& x, const HsiCube& xhat, const WeightMap& w);

/// Per-pixel squared reconstruction error.
ScoreMap pixel_errors(const HsiCube& x, std::span<const float> xhat);

/// Strict weights from reconstruction errors.
WeightMap update_weights(const ScoreMap& errors, double eta,
                         const ppe::WeightCurveParams& params = ppe::WeightCurveParams::strict());

struct GmpSchedule {
    std::size_t total_epochs = 100;
    std::size_t warm_epochs = 10;
    std::size_t update_every = 10;
    double lr = 1e-3;
    double eta = 0.02;
    ppe::WeightCurveParams curve = ppe::WeightCurveParams::strict();

    void validate() const;
};

enum class WeightRegime { Warmup, Coarse, Self };
std::string regime_name(WeightRegime r);

struct TraceRow {
    std::size_t epoch;
    double loss;
    WeightRegime regime;
    double mean_weight;
};

struct GmpResult {
    WeightMap weights;  // last computed W
    HsiCube residual;   // X - AE(X), eval mode
    OcaModel<float> model;
    std::vector<TraceRow> trace;
};

GmpResult train_gmp(const HsiCube& x, const WeightMap& w_coa, const GmpSchedule& sched, std::uint64_t seed,
                    OcaConfig arch = {});

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path);

}  // namespace r2vd::gmp
