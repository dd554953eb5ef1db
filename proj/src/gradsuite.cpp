#include "r2vd/gradsuite.hpp"

#include <random>

#include "r2vd/autodiff.hpp"
#include "r2vd/gmp.hpp"
#include "r2vd/rsm.hpp"

namespace r2vd {

namespace {

using ad::Tensor;
using T64 = Tensor<double>;

struct Rng {
    std::mt19937_64 gen;
    explicit Rng(std::uint64_t s) : gen(s) {}

    std::vector<double> vec(std::size_t n, double scale = 1.0) {
        std::normal_distribution<double> d(0.0, scale);
        std::vector<double> v(n);
        for (auto& e : v) e = d(gen);
        return v;
    }
    T64 param(ad::Shape s, double scale = 1.0) { return T64::parameter(s, vec(ad::numel(s), scale)); }
};

// Scalar loss sum_i c_i * y_i with fixed random c.
struct Reducer {
    std::vector<double> coeffs;
    T64 operator()(const T64& y) {
        if (coeffs.size() != y.numel()) {
            std::mt19937_64 g(coeffs.size() * 7919 + y.numel());
            std::normal_distribution<double> d(0.0, 1.0);
            coeffs.resize(y.numel());
            for (auto& c : coeffs) c = d(g);
        }
        return ad::dot_constant(y, std::span<const double>(coeffs));
    }
};

template <class F>
GradCase check(const std::string& name, double tol, F&& make_loss, const std::vector<T64>& inputs,
               std::size_t per_input = 0) {
    Reducer red;
    std::function<T64()> fn = [&] { return make_loss(red); };
    const auto rep = ad::gradient_check(fn, inputs, 1e-4, per_input, 17);
    return {name, rep.max_rel_error, tol, rep.checked};
}

// Random (non-zero) values for every parameter so zero-initialised gates and
// heads do not hide gradient paths.
void randomize(const std::vector<T64>& params, Rng& rng, double scale) {
    for (auto p : params) {
        auto v = p.mutable_values();
        const auto r = rng.vec(v.size(), scale);
        std::copy(r.begin(), r.end(), v.begin());
    }
}

}  // namespace

std::vector<GradCase> run_gradient_suite(std::uint64_t seed) {
    Rng rng(seed + 1);
    std::vector<GradCase> out;
    const T64 none;

    {
        auto x = rng.param({5, 4}), w = rng.param({3, 4}), b = rng.param({3});
        out.push_back(check("linear", 1e-5, [&](Reducer& r) { return r(ad::linear(x, w, b)); }, {x, w, b}));
    }
    struct ConvCase {
        const char* name;
        std::size_t kh, kw, dil;
        bool depthwise;
    };
    for (const ConvCase& c : {ConvCase{"conv2d 3x3", 3, 3, 1, false}, ConvCase{"conv2d 3x3 dilated", 3, 3, 2, false},
                              ConvCase{"conv2d 1x7", 1, 7, 1, false}, ConvCase{"conv2d 7x1", 7, 1, 1, false},
                              ConvCase{"conv2d 1x1", 1, 1, 1, false}, ConvCase{"conv2d 3x3 depthwise", 3, 3, 1, true},
                              ConvCase{"conv2d 3x3 dilated depthwise", 3, 3, 2, true},
                              ConvCase{"conv2d 1x7 depthwise", 1, 7, 1, true},
                              ConvCase{"conv2d 7x1 depthwise", 7, 1, 1, true}}) {
        const std::size_t cin = 4, cout = 4, groups = c.depthwise ? cin : 1;
        auto x = rng.param({1, cin, 6, 6});
        auto w = rng.param({cout, cin / groups, c.kh, c.kw});
        auto b = rng.param({cout});
        const ad::Conv2dSpec spec{c.dil, groups};
        out.push_back(check(c.name, 1e-5, [&](Reducer& r) { return r(ad::conv2d(x, w, b, spec)); }, {x, w, b}));
    }
    {
        auto a = rng.param({3, 4}), b = rng.param({3, 4});
        out.push_back(check("add", 1e-5, [&](Reducer& r) { return r(ad::add(a, b)); }, {a, b}));
    }
    {
        auto x = rng.param({4, 5}, 2.0);
        out.push_back(check("silu", 1e-3, [&](Reducer& r) { return r(ad::silu(x)); }, {x}));
    }
    {
        auto x = rng.param({4, 6}), g = rng.param({6}), b = rng.param({6});
        out.push_back(check("layer_norm", 1e-3, [&](Reducer& r) { return r(ad::layer_norm(x, g, b)); }, {x, g, b}));
        auto y = rng.param({3, 6});
        out.push_back(check("layer_norm (no affine)", 1e-3, [&](Reducer& r) { return r(ad::layer_norm(y, none, none)); }, {y}));
    }
    {
        auto x = rng.param({4, 5}), sh = rng.param({1, 5}), sc = rng.param({1, 5});
        out.push_back(check("modulate", 1e-3, [&](Reducer& r) { return r(ad::modulate(x, sh, sc)); }, {x, sh, sc}));
        auto y = rng.param({4, 5}), g = rng.param({1, 5});
        out.push_back(check("gated_add", 1e-3, [&](Reducer& r) { return r(ad::gated_add(x, g, y)); }, {x, g, y}));
        auto m = rng.param({3, 7});
        out.push_back(check("columns", 1e-5, [&](Reducer& r) { return r(ad::columns(m, 2, 3)); }, {m}));
    }
    {
        auto x = rng.param({3, 5}, 2.0);
        const auto bias = rng.vec(15);
        out.push_back(check("softmax + bias", 1e-3,
                            [&](Reducer& r) { return r(ad::softmax_last_dim(x, std::span<const double>(bias))); }, {x}));
    }
    {
        auto a = rng.param({1, 2, 3, 3}), b = rng.param({1, 3, 3, 3});
        out.push_back(check("concat_channels", 1e-5, [&](Reducer& r) { return r(ad::concat_channels<double>({a, b})); }, {a, b}));
    }
    {
        auto x = rng.param({2, 3, 4, 4}), g = rng.param({3}), b = rng.param({3});
        ad::BatchNormState<double> st(3);
        out.push_back(check("batch_norm train", 1e-3,
                            [&](Reducer& r) { return r(ad::batch_norm_2d(x, g, b, st, true)); }, {x, g, b}));
        st.running_mean = {0.1, -0.2, 0.3};
        st.running_var = {0.5, 1.5, 2.0};
        out.push_back(check("batch_norm eval", 1e-3,
                            [&](Reducer& r) { return r(ad::batch_norm_2d(x, g, b, st, false)); }, {x, g, b}));
    }
    {
        // 5x5 grid, window 3 -> ragged windows; 2 heads of dim 2.
        const std::size_t h = 5, w = 5, n = h * w;
        HsiCube raw(h, w, 3);
        const auto rv = rng.vec(raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i) raw.data[i] = static_cast<float>(std::abs(rv[i]));
        const auto psf = rsm::build_psf(raw, 3, 5.0);
        auto q = rng.param({n, 4}), k = rng.param({n, 4}), v = rng.param({n, 4});
        out.push_back(check("window attention + PSF", 1e-3,
                            [&](Reducer& r) { return r(rsm::psf_attention(q, k, v, 2, psf)); }, {q, k, v}));
    }
    {
        auto p = rng.param({6, 3});
        const auto t = rng.vec(18);
        const std::vector<double> wts{1.0, 0.0, 0.5, 2.0, 0.25, 1.0};
        out.push_back(check("weighted pixel loss", 1e-3,
                            [&](Reducer&) {
                                return ad::weighted_pixel_loss(p, std::span<const double>(t), wts, 6, 3,
                                                               ad::PixelLayout::PixelMajor);
                            },
                            {p}));
        out.push_back(check("weighted pixel loss (channel-major)", 1e-3,
                            [&](Reducer&) {
                                return ad::weighted_pixel_loss(p, std::span<const double>(t), wts, 6, 3,
                                                               ad::PixelLayout::ChannelMajor);
                            },
                            {p}));
    }
    {
        const gmp::OcaConfig cfg{3, 8, 1};
        auto m = gmp::OcaModel<double>::init(cfg, seed + 3);
        auto f = rng.param({1, 8, 5, 6});
        out.push_back(check("OCB block", 1e-3, [&](Reducer& r) { return r(gmp::ocb_forward(m.ocb[0], f, true)); },
                            [&] {
                                auto v = std::vector<T64>{f, m.ocb[0].w3, m.ocb[0].wd, m.ocb[0].w17, m.ocb[0].w71,
                                                          m.ocb[0].pw, m.ocb[0].bn_gamma, m.ocb[0].bn_beta};
                                return v;
                            }(),
                            12));
        out.push_back(check("RSB block", 1e-3, [&](Reducer& r) { return r(gmp::rsb_forward(m.rsb[0], f)); },
                            {f, m.rsb[0].w1, m.rsb[0].b1, m.rsb[0].w2, m.rsb[0].b2}, 12));

        auto x = rng.param({1, 3, 5, 6});
        const auto target = rng.vec(x.numel());
        WeightMap wts(5, 6, 1.0);
        wts.values[4] = 0.0;
        wts.values[7] = 0.3;
        std::vector<T64> inputs = m.parameters();
        inputs.push_back(x);
        out.push_back(check("OCA composite (1 pair) + weighted loss", 1e-3,
                            [&](Reducer&) {
                                return gmp::weighted_recon_loss(gmp::oca_forward(m, x, true),
                                                                std::span<const double>(target), wts);
                            },
                            inputs, 6));
    }
    {
        const std::size_t h = 4, w = 4, c = 3;
        HsiCube raw(h, w, c);
        const auto rv = rng.vec(raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i) raw.data[i] = static_cast<float>(std::abs(rv[i]) + 0.1);
        const auto psf = rsm::build_psf(raw, 3, 5.0);
        const rsm::DitConfig cfg{c, 8, 1, 2, 2, 3};
        auto m = rsm::DitModel<double>::init(cfg, seed + 5);
        randomize(m.parameters(), rng, 0.3);
        auto tokens = rng.param({h * w, c});
        const auto eps = rng.vec(h * w * c);
        WeightMap wts(h, w, 1.0);
        wts.values[5] = 0.0;
        std::vector<T64> inputs = m.parameters();
        inputs.push_back(tokens);
        out.push_back(check("DiT composite (1 block) + DSM loss", 1e-3,
                            [&](Reducer&) {
                                return rsm::dsm_loss(rsm::dit_forward(m, tokens, 417, psf),
                                                     std::span<const double>(eps), wts);
                            },
                            inputs, 6));
    }
    return out;
}

}  // namespace r2vd
