#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "r2vd/fields.hpp"
#include "r2vd/hsi.hpp"
#include "r2vd/rsm.hpp"

namespace r2vd::vdi {

struct VdiConfig {
    std::size_t k = 50;
    std::size_t t_inf = 980;
    double xi = 1e-8;
    std::uint64_t seed = 0;

    void validate(const rsm::DiffusionSchedule& sched) const;
};

/// S = -eps_hat / sigma_inf.
HsiCube score_from_noise(const HsiCube& eps_hat, double sigma_inf);

/// u = s / (||s|| + xi).
std::vector<double> unit_vector(std::span<const double> s, double xi = 1e-8);

/// Standard-normal perturbation for draw k; depends only on (seed, k) and the shape.
HsiCube perturbation_noise(std::uint64_t seed, std::size_t k, std::size_t h, std::size_t w, std::size_t c);

class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    /// Predicted noise for the k-th perturbed residual.
    virtual HsiCube predict(const HsiCube& r_inf, std::size_t t, std::size_t k) const = 0;
};

class DitPredictor : public NoisePredictor {
public:
    /// Throws unless the model is frozen.
    DitPredictor(const rsm::DitModel<float>& model, const rsm::PsfContext& psf);
    HsiCube predict(const HsiCube& r_inf, std::size_t t, std::size_t k) const override;

private:
    rsm::DitModel<float> model_;
    rsm::PsfContext psf_;
};

/// Min-max normalisation; a constant field maps to all zeros.
AnomalyMap min_max_normalize(const ScoreMap& s);

struct VdiResult {
    AnomalyMap map;
    ScoreMap cum_norms;  // ||v_cum|| per pixel, in [0, K]
};

VdiResult vdi_infer(const NoisePredictor& model, const HsiCube& r, const rsm::DiffusionSchedule& sched,
                    const VdiConfig& cfg);

/// Ablation map without interference: mean over the K draws of the scalar
/// reconstruction error ||r - r_hat||^2, r_hat = r_inf - sigma_inf * eps_hat.
VdiResult recon_error_infer(const NoisePredictor& model, const HsiCube& r, const rsm::DiffusionSchedule& sched,
                            const VdiConfig& cfg);

}  // namespace r2vd::vdi
