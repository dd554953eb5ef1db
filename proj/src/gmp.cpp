#include "r2vd/gmp.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <stdexcept>

namespace r2vd::gmp {

using ad::Tensor;

namespace {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the default PyTorch conv init.
template <typename T>
Tensor<T> uniform_param(ad::Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(ad::numel(shape));
    for (auto& e : v) e = static_cast<T>(dist(rng));
    return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> filled_param(std::size_t n, T value) {
    return Tensor<T>::parameter({n}, std::vector<T>(n, value));
}

template <typename T>
void expect_spatial(const Tensor<T>& t, std::size_t h, std::size_t w, const char* where) {
    if (t.rank() != 4 || t.dim(2) != h || t.dim(3) != w)
        throw std::logic_error(std::string("oca: spatial dims changed at ") + where + ", got " + ad::shape_str(t.shape()));
}

}  // namespace

template <typename T>
OcaModel<T> OcaModel<T>::init(const OcaConfig& cfg, std::uint64_t seed) {
    if (cfg.bands < 1 || cfg.hidden < 1 || cfg.pairs < 1) throw std::invalid_argument("oca: invalid architecture");
    std::mt19937_64 rng(seed);
    const std::size_t c = cfg.bands, h = cfg.hidden;
    OcaModel m;
    m.cfg = cfg;
    m.stem_w = uniform_param<T>({h, c, 1, 1}, c, rng);
    m.stem_b = uniform_param<T>({h}, c, rng);
    for (std::size_t i = 0; i < cfg.pairs; ++i) {
        OcbParams<T> o;
        o.w3 = uniform_param<T>({h, 1, 3, 3}, 9, rng);
        o.b3 = uniform_param<T>({h}, 9, rng);
        o.wd = uniform_param<T>({h, 1, 3, 3}, 9, rng);
        o.bd = uniform_param<T>({h}, 9, rng);
        o.w17 = uniform_param<T>({h, 1, 1, 7}, 7, rng);
        o.b17 = uniform_param<T>({h}, 7, rng);
        o.w71 = uniform_param<T>({h, 1, 7, 1}, 7, rng);
        o.b71 = uniform_param<T>({h}, 7, rng);
        o.pw = uniform_param<T>({h, 4 * h, 1, 1}, 4 * h, rng);
        o.pb = uniform_param<T>({h}, 4 * h, rng);
        o.bn_gamma = filled_param<T>(h, T(1));
        o.bn_beta = filled_param<T>(h, T(0));
        o.bn = ad::BatchNormState<T>(h);
        m.ocb.push_back(std::move(o));

        RsbParams<T> r;
        r.w1 = uniform_param<T>({h, h, 1, 1}, h, rng);
        r.b1 = uniform_param<T>({h}, h, rng);
        r.w2 = uniform_param<T>({h, h, 1, 1}, h, rng);
        r.b2 = uniform_param<T>({h}, h, rng);
        m.rsb.push_back(std::move(r));
    }
    m.head_w = uniform_param<T>({c, h, 1, 1}, h, rng);
    m.head_b = uniform_param<T>({c}, h, rng);
    return m;
}

template <typename T>
std::vector<Tensor<T>> OcaModel<T>::parameters() const {
    std::vector<Tensor<T>> out{stem_w, stem_b};
    for (std::size_t i = 0; i < ocb.size(); ++i) {
        const auto& o = ocb[i];
        out.insert(out.end(), {o.w3, o.b3, o.wd, o.bd, o.w17, o.b17, o.w71, o.b71, o.pw, o.pb, o.bn_gamma, o.bn_beta});
        const auto& r = rsb[i];
        out.insert(out.end(), {r.w1, r.b1, r.w2, r.b2});
    }
    out.insert(out.end(), {head_w, head_b});
    return out;
}

template <typename T>
Tensor<T> ocb_forward(OcbParams<T>& p, const Tensor<T>& f, bool train) {
    const std::size_t ch = p.pw.dim(0);
    if (f.rank() != 4 || f.dim(1) != ch)
        throw std::invalid_argument("ocb: expected " + std::to_string(ch) + " channels, got " + ad::shape_str(f.shape()));
    const ad::Conv2dSpec dw{1, ch}, dwd{2, ch};
    auto h1 = ad::conv2d(f, p.w3, p.b3, dw);
    auto h2 = ad::conv2d(f, p.wd, p.bd, dwd);
    auto h3 = ad::conv2d(f, p.w17, p.b17, dw);
    auto h4 = ad::conv2d(f, p.w71, p.b71, dw);
    auto multi = ad::concat_channels<T>({h1, h2, h3, h4});
    auto y = ad::silu(ad::batch_norm_2d(ad::conv2d(multi, p.pw, p.pb), p.bn_gamma, p.bn_beta, p.bn, train));
    auto out = ad::add(f, y);
    expect_spatial(out, f.dim(2), f.dim(3), "ocb");
    return out;
}

template <typename T>
Tensor<T> rsb_forward(const RsbParams<T>& p, const Tensor<T>& f) {
    auto y = ad::conv2d(ad::silu(ad::conv2d(f, p.w1, p.b1)), p.w2, p.b2);
    auto out = ad::add(f, y);
    expect_spatial(out, f.dim(2), f.dim(3), "rsb");
    return out;
}

template <typename T>
Tensor<T> oca_forward(OcaModel<T>& model, const Tensor<T>& x, bool train) {
    if (x.rank() != 4 || x.dim(1) != model.cfg.bands)
        throw std::invalid_argument("oca: input " + ad::shape_str(x.shape()) + " does not have " +
                                    std::to_string(model.cfg.bands) + " bands");
    const std::size_t h = x.dim(2), w = x.dim(3);
    auto f = ad::conv2d(x, model.stem_w, model.stem_b);
    expect_spatial(f, h, w, "stem");
    for (std::size_t i = 0; i < model.ocb.size(); ++i) {
        f = ocb_forward(model.ocb[i], f, train);
        f = rsb_forward(model.rsb[i], f);
    }
    auto out = ad::conv2d(f, model.head_w, model.head_b);
    expect_spatial(out, h, w, "head");
    return out;
}

template <typename T>
Tensor<T> cube_tensor(const HsiCube& cube) {
    return Tensor<T>::constant({1, cube.bands, cube.height, cube.width}, std::vector<T>(cube.data.begin(), cube.data.end()));
}

template <typename T>
Tensor<T> weighted_recon_loss(const Tensor<T>& xhat, std::span<const T> x, const WeightMap& w) {
    if (xhat.rank() != 4 || xhat.dim(2) != w.height || xhat.dim(3) != w.width)
        throw std::invalid_argument("weighted_recon_loss: weight map does not match reconstruction");
    return ad::weighted_pixel_loss(xhat, x, std::span<const double>(w.values), w.pixels(), xhat.dim(1),
                                   ad::PixelLayout::ChannelMajor);
}

double weighted_recon_loss(const HsiCube& x, const HsiCube& xhat, const WeightMap& w) {
    if (!x.same_shape(xhat) || x.height != w.height || x.width != w.width)
        throw std::invalid_argument("weighted_recon_loss: dimension mismatch");
    const ScoreMap e = pixel_errors(x, xhat.data);
    double s = 0.0;
    for (std::size_t i = 0; i < e.values.size(); ++i)
        if (w.values[i] != 0.0) s += w.values[i] * e.values[i];
    return s / static_cast<double>(x.pixels());
}

ScoreMap pixel_errors(const HsiCube& x, std::span<const float> xhat) {
    if (xhat.size() != x.size()) throw std::invalid_argument("pixel_errors: size mismatch");
    ScoreMap e(x.height, x.width);
    const std::size_t n = x.pixels();
    for (std::size_t b = 0; b < x.bands; ++b)
        for (std::size_t p = 0; p < n; ++p) {
            const double d = static_cast<double>(x.data[b * n + p]) - static_cast<double>(xhat[b * n + p]);
            e.values[p] += d * d;
        }
    return e;
}

WeightMap update_weights(const ScoreMap& errors, double eta, const ppe::WeightCurveParams& params) {
    for (double v : errors.values)
        if (!(v >= 0.0)) throw std::invalid_argument("update_weights: errors must be non-negative");
    return ppe::threshold_weights(errors, eta, params);
}

void GmpSchedule::validate() const {
    if (total_epochs < 1 || warm_epochs >= total_epochs) throw std::invalid_argument("gmp schedule: need warm_epochs < total_epochs");
    if (update_every < 1) throw std::invalid_argument("gmp schedule: update_every must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("gmp schedule: lr must be positive");
    curve.validate();
}

std::string regime_name(WeightRegime r) {
    switch (r) {
        case WeightRegime::Warmup: return "warmup";
        case WeightRegime::Coarse: return "coarse";
        case WeightRegime::Self: return "self";
    }
    return "?";
}

GmpResult train_gmp(const HsiCube& x, const WeightMap& w_coa, const GmpSchedule& sched, std::uint64_t seed,
                    OcaConfig arch) {
    validate_cube(x);
    sched.validate();
    if (w_coa.height != x.height || w_coa.width != x.width) throw std::invalid_argument("train_gmp: W_coa does not match cube");
    arch.bands = x.bands;

    GmpResult res;
    res.model = OcaModel<float>::init(arch, seed);
    // Start from the mean spectrum: zero head weights, band means as bias.
    std::fill(res.model.head_w.mutable_values().begin(), res.model.head_w.mutable_values().end(), 0.0f);
    for (std::size_t b = 0; b < x.bands; ++b) {
        double s = 0.0;
        for (float v : x.band(b)) s += v;
        res.model.head_b.mutable_values()[b] = static_cast<float>(s / static_cast<double>(x.pixels()));
    }
    optim::Optimizer<float> opt(res.model.parameters(), {optim::OptimizerKind::Adam, sched.lr});
    const Tensor<float> input = cube_tensor<float>(x);
    const std::span<const float> target(x.data);

    WeightMap w(x.height, x.width, 1.0);
    WeightRegime regime = WeightRegime::Warmup;
    for (std::size_t epoch = 1; epoch <= sched.total_epochs; ++epoch) {
        auto xhat = oca_forward(res.model, input, true);
        if (epoch == sched.warm_epochs + 1) {
            w = w_coa;
            regime = WeightRegime::Coarse;
        } else if (epoch > sched.warm_epochs + 1 && (epoch - sched.warm_epochs - 1) % sched.update_every == 0) {
            // A zero error quantile means the bulk is reconstructed exactly; the
            // current weights are kept.
            try {
                w = update_weights(pixel_errors(x, xhat.values()), sched.eta, sched.curve);
                regime = WeightRegime::Self;
            } catch (const std::domain_error&) {
            }
        }
        auto loss = weighted_recon_loss(xhat, target, w);
        const double lv = loss.item();
        if (!std::isfinite(lv)) throw std::runtime_error("train_gmp: non-finite loss at epoch " + std::to_string(epoch));
        double wsum = 0.0;
        for (double v : w.values) wsum += v;
        res.trace.push_back({epoch, lv, regime, wsum / static_cast<double>(w.pixels())});
        opt.zero_grad();
        ad::backward(loss);
        opt.step();
    }
    res.weights = w;

    const auto xhat = oca_forward(res.model, input, false);
    res.residual = HsiCube(x.height, x.width, x.bands);
    for (std::size_t i = 0; i < x.size(); ++i) res.residual.data[i] = x.data[i] - xhat.values()[i];
    return res;
}

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "epoch,loss,regime,mean_weight\n" << std::setprecision(17);
    for (const auto& r : trace)
        out << r.epoch << ',' << r.loss << ',' << regime_name(r.regime) << ',' << r.mean_weight << '\n';
}

#define R2VD_GMP_INSTANTIATE(T)                                                                       \
    template struct OcaModel<T>;                                                                      \
    template Tensor<T> ocb_forward<T>(OcbParams<T>&, const Tensor<T>&, bool);                         \
    template Tensor<T> rsb_forward<T>(const RsbParams<T>&, const Tensor<T>&);                         \
    template Tensor<T> oca_forward<T>(OcaModel<T>&, const Tensor<T>&, bool);                          \
    template Tensor<T> cube_tensor<T>(const HsiCube&);                                                \
    template Tensor<T> weighted_recon_loss<T>(const Tensor<T>&, std::span<const T>, const WeightMap&);

R2VD_GMP_INSTANTIATE(float)
R2VD_GMP_INSTANTIATE(double)

}  // namespace r2vd::gmp
