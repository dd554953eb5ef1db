#include "r2vd/vdi.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace r2vd::vdi {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

HsiCube perturb(const HsiCube& r, const HsiCube& eps, double sigma) {
    HsiCube out = r;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<float>(r.data[i] + sigma * eps.data[i]);
    return out;
}

}  // namespace

void VdiConfig::validate(const rsm::DiffusionSchedule& sched) const {
    if (k < 1) throw std::invalid_argument("vdi: K must be >= 1");
    if (t_inf >= sched.t_max) throw std::invalid_argument("vdi: t_inf outside [0, T-1]");
    if (!(xi > 0.0)) throw std::invalid_argument("vdi: xi must be positive");
}

HsiCube score_from_noise(const HsiCube& eps_hat, double sigma_inf) {
    if (!(sigma_inf > 0.0)) throw std::invalid_argument("score_from_noise: sigma_inf must be positive");
    HsiCube s = eps_hat;
    for (float& v : s.data) v = static_cast<float>(-v / sigma_inf);
    return s;
}

std::vector<double> unit_vector(std::span<const double> s, double xi) {
    double n = 0.0;
    for (double v : s) n += v * v;
    n = std::sqrt(n) + xi;
    std::vector<double> u(s.begin(), s.end());
    for (double& v : u) v /= n;
    return u;
}

HsiCube perturbation_noise(std::uint64_t seed, std::size_t k, std::size_t h, std::size_t w, std::size_t c) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(k))));
    std::normal_distribution<double> normal(0.0, 1.0);
    HsiCube eps(h, w, c);
    for (float& v : eps.data) v = static_cast<float>(normal(rng));
    return eps;
}

DitPredictor::DitPredictor(const rsm::DitModel<float>& model, const rsm::PsfContext& psf)
    : model_(model.detached()), psf_(psf) {
    if (!model.frozen) throw std::logic_error("vdi: the diffusion model must be frozen before inference");
}

HsiCube DitPredictor::predict(const HsiCube& r_inf, std::size_t t, std::size_t) const {
    return rsm::dit_predict(model_, r_inf, t, psf_);
}

AnomalyMap min_max_normalize(const ScoreMap& s) {
    AnomalyMap a(s.height, s.width);
    if (s.values.empty()) return a;
    const auto [lo, hi] = std::minmax_element(s.values.begin(), s.values.end());
    const double mn = *lo, range = *hi - *lo;
    if (!(range > 0.0)) return a;
    for (std::size_t i = 0; i < s.values.size(); ++i) a.values[i] = (s.values[i] - mn) / range;
    return a;
}

VdiResult vdi_infer(const NoisePredictor& model, const HsiCube& r, const rsm::DiffusionSchedule& sched,
                    const VdiConfig& cfg) {
    validate_cube(r);
    cfg.validate(sched);
    const double sigma = sched.sigma(cfg.t_inf);
    const std::size_t n = r.pixels(), c = r.bands;
    std::vector<double> v_cum(n * c, 0.0), s(c);
    for (std::size_t k = 1; k <= cfg.k; ++k) {
        const HsiCube eps = perturbation_noise(cfg.seed, k, r.height, r.width, c);
        const HsiCube eps_hat = model.predict(perturb(r, eps, sigma), cfg.t_inf, k);
        if (!eps_hat.same_shape(r)) throw std::invalid_argument("vdi: predictor returned a different shape");
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t b = 0; b < c; ++b) s[b] = -static_cast<double>(eps_hat.at(p, b)) / sigma;
            const auto u = unit_vector(s, cfg.xi);
            for (std::size_t b = 0; b < c; ++b) v_cum[p * c + b] += u[b];
        }
    }
    VdiResult res{AnomalyMap(), ScoreMap(r.height, r.width)};
    for (std::size_t p = 0; p < n; ++p) {
        double q = 0.0;
        for (std::size_t b = 0; b < c; ++b) q += v_cum[p * c + b] * v_cum[p * c + b];
        res.cum_norms.values[p] = std::sqrt(q);
    }
    res.map = min_max_normalize(res.cum_norms);
    return res;
}

VdiResult recon_error_infer(const NoisePredictor& model, const HsiCube& r, const rsm::DiffusionSchedule& sched,
                            const VdiConfig& cfg) {
    validate_cube(r);
    cfg.validate(sched);
    const double sigma = sched.sigma(cfg.t_inf);
    const std::size_t n = r.pixels();
    VdiResult res{AnomalyMap(), ScoreMap(r.height, r.width)};
    for (std::size_t k = 1; k <= cfg.k; ++k) {
        const HsiCube eps = perturbation_noise(cfg.seed, k, r.height, r.width, r.bands);
        const HsiCube eps_hat = model.predict(perturb(r, eps, sigma), cfg.t_inf, k);
        if (!eps_hat.same_shape(r)) throw std::invalid_argument("vdi: predictor returned a different shape");
        // r - (r_inf - sigma * eps_hat) = sigma * (eps_hat - eps)
        for (std::size_t p = 0; p < n; ++p) {
            double q = 0.0;
            for (std::size_t b = 0; b < r.bands; ++b) {
                const double d = sigma * (static_cast<double>(eps_hat.at(p, b)) - eps.at(p, b));
                q += d * d;
            }
            res.cum_norms.values[p] += q;
        }
    }
    for (double& v : res.cum_norms.values) v /= static_cast<double>(cfg.k);
    res.map = min_max_normalize(res.cum_norms);
    return res;
}

}  // namespace r2vd::vdi
