#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>

#include "r2vd/rsm.hpp"
#include "test_util.hpp"

using namespace r2vd;
using namespace r2vd::rsm;
using T64 = ad::Tensor<double>;
using T32 = ad::Tensor<float>;

namespace {

T64 param(ad::Shape s, std::uint64_t seed, double scale = 1.0) {
    return T64::parameter(s, testutil::random_vec(ad::numel(s), seed, scale));
}

// Plain per-window, per-head attention with an optional boolean key mask.
std::vector<double> attention_oracle(const T64& q, const T64& k, const T64& v, std::size_t heads,
                                     const std::vector<std::vector<std::size_t>>& windows,
                                     const std::function<bool(std::size_t, std::size_t, std::size_t)>& keep = {}) {
    const std::size_t d = q.dim(1), hd = d / heads;
    std::vector<double> out(q.numel(), 0.0);
    for (std::size_t wi = 0; wi < windows.size(); ++wi) {
        const auto& idx = windows[wi];
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t a = 0; a < idx.size(); ++a) {
                std::vector<double> logit(idx.size(), -INFINITY);
                double mx = -INFINITY;
                for (std::size_t b = 0; b < idx.size(); ++b) {
                    if (keep && !keep(wi, a, b)) continue;
                    double s = 0;
                    for (std::size_t j = 0; j < hd; ++j) s += q.values()[idx[a] * d + h * hd + j] * k.values()[idx[b] * d + h * hd + j];
                    logit[b] = s / std::sqrt(double(hd));
                    mx = std::max(mx, logit[b]);
                }
                double z = 0;
                for (double& l : logit) z += (l = std::exp(l - mx));
                for (std::size_t b = 0; b < idx.size(); ++b)
                    for (std::size_t j = 0; j < hd; ++j)
                        out[idx[a] * d + h * hd + j] += logit[b] / z * v.values()[idx[b] * d + h * hd + j];
            }
    }
    return out;
}

double max_rel(std::span<const double> a, const std::vector<double>& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        num = std::max(num, std::abs(a[i] - b[i]));
        den = std::max(den, std::abs(b[i]));
    }
    return num / den;
}

HsiCube positive_cube(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
    return testutil::random_cube(h, w, c, seed, 0.05, 1.0);
}

DitConfig small_dit(std::size_t bands) { return {bands, 32, 2, 4, 4, 8}; }

}  // namespace

TEST_SUITE("rsm") {

TEST_CASE("diffusion schedule") {
    DiffusionSchedule s;
    CHECK(s.sigma(0) == doctest::Approx(0.01).epsilon(1e-15));
    CHECK(s.sigma(999) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(s.sigma(980) == doctest::Approx(0.01 * std::pow(100.0, 980.0 / 999.0)).epsilon(1e-14));
    for (std::size_t t = 1; t < 1000; ++t) CHECK(s.sigma(t) > s.sigma(t - 1));
    CHECK_THROWS_AS(s.sigma(1000), std::out_of_range);
    s.sigma_min = 2.0;
    CHECK_THROWS(s.validate());
}

TEST_CASE("window partition tiles the grid") {
    auto w16 = window_partition(16, 16, 8);
    CHECK(w16.size() == 4);
    for (const auto& w : w16) CHECK(w.size() == 64);

    auto w10 = window_partition(10, 10, 8);
    std::vector<std::size_t> sizes;
    for (const auto& w : w10) sizes.push_back(w.size());
    CHECK(sizes == std::vector<std::size_t>{64, 16, 16, 4});

    for (auto [h, w, win] : {std::tuple{10u, 10u, 8u}, {7u, 13u, 4u}, {1u, 1u, 8u}, {9u, 5u, 3u}}) {
        const auto parts = window_partition(h, w, win);
        std::vector<int> seen(h * w, 0);
        for (const auto& p : parts) {
            // each window is a contiguous tile
            std::size_t r0 = h, r1 = 0, c0 = w, c1 = 0;
            for (std::size_t i : p) {
                ++seen.at(i);
                r0 = std::min(r0, i / w);
                r1 = std::max(r1, i / w);
                c0 = std::min(c0, i % w);
                c1 = std::max(c1, i % w);
            }
            CHECK(p.size() == (r1 - r0 + 1) * (c1 - c0 + 1));
            CHECK(r1 - r0 < win);
            CHECK(c1 - c0 < win);
        }
        for (int s : seen) CHECK(s == 1);
    }
}

TEST_CASE("psf matrix identities") {
    const std::vector<double> spectra{1, 2, 3,  //
                                      3, 6, 9,  //
                                      1, 0, 0,  //
                                      0, 1, 0,  //
                                      0, 0, 0};
    const auto d = psf_matrix(spectra, 5, 3);
    CHECK(d[0 * 5 + 1] == doctest::Approx(0.0).scale(1.0));
    CHECK(std::abs(d[0 * 5 + 1]) < 1e-7);
    CHECK(d[2 * 5 + 3] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
    CHECK(d[4 * 5 + 2] == doctest::Approx(1.0).epsilon(1e-12));  // zero spectrum stays at the origin
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(d[i * 5 + i] == 0.0);
        for (std::size_t j = 0; j < 5; ++j) {
            CHECK(d[i * 5 + j] == d[j * 5 + i]);
            CHECK(d[i * 5 + j] >= 0.0);
            CHECK(d[i * 5 + j] <= 2.0);
        }
    }

    const auto r = testutil::random_vec(12 * 6, 5);
    const auto dr = psf_matrix(r, 12, 6);
    for (std::size_t i = 0; i < 12; ++i)
        for (std::size_t j = 0; j < 12; ++j) {
            if (i == j) continue;
            double dot = 0, ni = 0, nj = 0;
            for (std::size_t b = 0; b < 6; ++b) {
                dot += r[i * 6 + b] * r[j * 6 + b];
                ni += r[i * 6 + b] * r[i * 6 + b];
                nj += r[j * 6 + b] * r[j * 6 + b];
            }
            const double cosv = dot / std::sqrt(ni * nj);
            CHECK(testutil::rel_err(dr[i * 12 + j] * dr[i * 12 + j], 2 - 2 * cosv) < 1e-6);
        }
}

TEST_CASE("psf context depends only on the raw cube") {
    const auto x = positive_cube(10, 10, 4, 6);
    const auto a = build_psf(x, 8, 5.0), b = build_psf(x, 8, 5.0);
    CHECK(a.attention.distance == b.attention.distance);
    CHECK(a.attention.windows.size() == 4);
    CHECK(a.attention.distance[3].size() == 16);
    CHECK_THROWS(build_psf(x, 8, -1.0));
}

TEST_CASE("lambda zero is plain attention") {
    const auto x = positive_cube(10, 10, 4, 7);
    auto q = param({100, 8}, 8), k = param({100, 8}, 9), v = param({100, 8}, 10);
    auto psf0 = build_psf(x, 8, 0.0);
    PsfContext plain = psf0;
    plain.attention.distance.clear();
    const auto a = psf_attention(q, k, v, 2, psf0), b = psf_attention(q, k, v, 2, plain);
    CHECK(std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0);
    CHECK(max_rel(a.values(), attention_oracle(q, k, v, 2, psf0.attention.windows)) < 1e-12);

    auto qf = T32::constant({100, 8}, std::vector<float>(q.values().begin(), q.values().end()));
    auto af = psf_attention(qf, qf, qf, 2, psf0), bf = psf_attention(qf, qf, qf, 2, plain);
    CHECK(std::memcmp(af.values().data(), bf.values().data(), af.numel() * sizeof(float)) == 0);
}

TEST_CASE("single-token windows return v") {
    const auto x = positive_cube(3, 4, 2, 11);
    auto psf = build_psf(x, 1, 5.0);
    auto q = param({12, 8}, 12), k = param({12, 8}, 13), v = param({12, 8}, 14);
    const auto y = psf_attention(q, k, v, 4, psf);
    for (std::size_t i = 0; i < v.numel(); ++i) CHECK(y.values()[i] == doctest::Approx(v.values()[i]).epsilon(1e-15));
}

TEST_CASE("large lambda matches a hard mask") {
    // 4x4 grid, one window; key 5 sits at distance 2 from every other token.
    PsfContext psf{4, 4, 4, {}};
    psf.attention.windows = window_partition(4, 4, 4);
    std::vector<double> dist(256, 0.0);
    for (std::size_t i = 0; i < 16; ++i)
        if (i != 5) dist[i * 16 + 5] = dist[5 * 16 + i] = 2.0;
    psf.attention.distance = {dist};
    psf.attention.lambda = 1e4;
    auto q = param({16, 8}, 15), k = param({16, 8}, 16), v = param({16, 8}, 17);
    const auto y = psf_attention(q, k, v, 2, psf);
    const auto want = attention_oracle(q, k, v, 2, psf.attention.windows, [](std::size_t, std::size_t a, std::size_t b) {
        return a == 5 ? b == 5 : b != 5;
    });
    CHECK(max_rel(y.values(), want) < 1e-6);
    for (const auto& m : ad::attention_weights(q, k, 2, psf.attention))
        for (std::size_t a = 0; a < 16; ++a)
            if (a != 5) CHECK(m[a * 16 + 5] < 1e-12);
}

TEST_CASE("attention rows are stochastic for any lambda") {
    const auto x = positive_cube(10, 10, 5, 18);
    auto q = param({100, 8}, 19, 3.0), k = param({100, 8}, 20, 3.0);
    for (double lambda : {0.0, 5.0, 1e4}) {
        const auto psf = build_psf(x, 8, lambda);
        for (const auto& m : ad::attention_weights(q, k, 4, psf.attention)) {
            const auto len = static_cast<std::size_t>(std::llround(std::sqrt(double(m.size()))));
            for (std::size_t a = 0; a < len; ++a) {
                double s = 0;
                for (std::size_t b = 0; b < len; ++b) s += m[a * len + b];
                CHECK(std::abs(s - 1.0) < 1e-6);
            }
        }
    }
}

TEST_CASE("fresh DiT predicts zeros") {
    for (auto [h, w] : {std::pair{10u, 10u}, {4u, 4u}, {5u, 13u}}) {
        const auto x = positive_cube(h, w, 3, 21);
        const auto psf = build_psf(x, 8, 5.0);
        auto m = DitModel<float>::init({3, 32, 2, 4, 4, 8}, 22);
        m.frozen = true;
        const auto y = dit_predict(m, testutil::random_cube(h, w, 3, 23, -1, 1), 500, psf);
        CHECK(y.height == h);
        CHECK(y.width == w);
        CHECK(y.bands == 3);
        for (float v : y.data) CHECK(v == 0.0f);
    }
    auto m = DitModel<float>::init({3, 32, 2, 4, 4, 8}, 22);
    const auto psf = build_psf(positive_cube(4, 4, 3, 1), 8, 5.0);
    CHECK_THROWS(dit_forward(m, T32::zeros({15, 3}), 3, psf));
    CHECK_THROWS(dit_forward(m, T32::zeros({16, 4}), 3, psf));
}

TEST_CASE("cube and token layouts round trip") {
    const auto c = testutil::random_cube(3, 5, 4, 24);
    const auto t = cube_to_tokens(c);
    CHECK(t[7 * 4 + 2] == c.at(7, 2));
    CHECK(tokens_to_cube(t, 3, 5, 4).data == c.data);
}

TEST_CASE("dsm loss examples") {
    const auto a = testutil::random_cube(4, 4, 3, 25, -1, 1), b = testutil::random_cube(4, 4, 3, 26, -1, 1);
    CHECK(dsm_loss(a, a, WeightMap(4, 4, 1.0)) == 0.0);
    CHECK(dsm_loss(a, b, WeightMap(4, 4, 0.0)) == 0.0);
    double mse = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mse += std::pow(double(a.data[i]) - b.data[i], 2);
    mse /= double(a.size());
    CHECK(dsm_loss(a, b, WeightMap(4, 4, 1.0)) == doctest::Approx(mse * 3).epsilon(1e-12));
    CHECK_THROWS(dsm_loss(a, testutil::random_cube(4, 4, 2, 1), WeightMap(4, 4, 1.0)));

    // w = 0 gives zero parameter gradients
    const auto x = positive_cube(4, 4, 3, 27);
    const auto psf = build_psf(x, 8, 5.0);
    auto m = DitModel<double>::init({3, 16, 1, 2, 2, 8}, 28);
    for (auto& p : m.parameters())
        for (auto& v : p.mutable_values()) v += 0.05;
    const auto eps = testutil::random_vec(48, 29);
    auto pred = dit_forward(m, T64::constant({16, 3}, testutil::random_vec(48, 30)), 100, psf);
    ad::backward(dsm_loss(pred, std::span<const double>(eps), WeightMap(4, 4, 0.0)));
    for (const auto& p : m.parameters())
        for (double g : p.grad()) CHECK(g == 0.0);
}

TEST_CASE("zero-weight pixels are gradient isolated") {
    const auto x = positive_cube(5, 5, 3, 31);
    const auto psf = build_psf(x, 3, 5.0);
    auto m = DitModel<double>::init({3, 16, 2, 2, 2, 3}, 32);
    for (auto& p : m.parameters()) {
        const auto r = testutil::random_vec(p.numel(), p.numel(), 0.1);
        for (std::size_t i = 0; i < p.numel(); ++i) p.mutable_values()[i] += r[i];
    }
    WeightMap w(5, 5, 1.0);
    w.values[4] = w.values[12] = 0.0;
    const auto input = T64::constant({25, 3}, testutil::random_vec(75, 33));
    auto eps = testutil::random_vec(75, 34);
    auto grads = [&] {
        for (auto& p : m.parameters()) p.zero_grad();
        ad::backward(dsm_loss(dit_forward(m, input, 700, psf), std::span<const double>(eps), w));
        std::vector<std::vector<double>> g;
        for (const auto& p : m.parameters()) g.emplace_back(p.grad().begin(), p.grad().end());
        return g;
    };
    const auto g0 = grads();
    for (std::size_t c = 0; c < 3; ++c) {
        eps[4 * 3 + c] += 4.0;
        eps[12 * 3 + c] -= 2.0;
    }
    const auto g1 = grads();
    for (std::size_t i = 0; i < g0.size(); ++i)
        CHECK(std::memcmp(g0[i].data(), g1[i].data(), g0[i].size() * sizeof(double)) == 0);
    eps[0] += 1.0;
    CHECK(grads().back() != g0.back());
}

TEST_CASE("lambda is not a parameter") {
    auto m = DitModel<float>::init({3, 32, 2, 4, 4, 8}, 35);
    std::set<std::string> names;
    for (const auto& [n, p] : m.named_parameters()) {
        names.insert(n);
        CHECK(n.find("lambda") == std::string::npos);
        CHECK(p.requires_grad());
    }
    CHECK(names.count("embed.w"));
    CHECK(names.count("blocks.1.ada.w"));
    CHECK(names.count("head.b"));
    CHECK(m.parameters().size() == names.size());
    std::size_t total = 0;
    for (const auto& p : m.parameters()) total += p.numel();
    // embed + time MLP + blocks + head, counted by hand
    const std::size_t d = 32, c = 3;
    const std::size_t block = 6 * d * d + 6 * d + 3 * d * d + 3 * d + d * d + d + 4 * d * d + 4 * d + 4 * d * d + d;
    CHECK(total == c * d + d + 2 * (d * d + d) + 2 * block + d * c + c);
}

TEST_CASE("train_rsm with zero epochs returns the zero predictor") {
    const auto r = testutil::random_cube(6, 6, 3, 36, -1, 1);
    const auto psf = build_psf(positive_cube(6, 6, 3, 37), 8, 5.0);
    const auto res = train_rsm(r, WeightMap(6, 6, 1.0), psf, {}, small_dit(3), {0}, 1);
    CHECK(res.model.frozen);
    CHECK(res.losses.empty());
    for (float v : dit_predict(res.model, r, 10, psf).data) CHECK(v == 0.0f);
    CHECK_THROWS(train_rsm(r, WeightMap(5, 6, 1.0), psf, {}, small_dit(3), {0}, 1));
}

TEST_CASE("train_rsm is deterministic in the seed") {
    const auto r = testutil::random_cube(6, 6, 3, 38, -1, 1);
    const auto psf = build_psf(positive_cube(6, 6, 3, 39), 8, 5.0);
    const RsmTrainConfig tc{15};
    const auto a = train_rsm(r, WeightMap(6, 6, 1.0), psf, {}, small_dit(3), tc, 4);
    const auto b = train_rsm(r, WeightMap(6, 6, 1.0), psf, {}, small_dit(3), tc, 4);
    const auto c = train_rsm(r, WeightMap(6, 6, 1.0), psf, {}, small_dit(3), tc, 5);
    const auto pa = a.model.parameters(), pb = b.model.parameters(), pc = c.model.parameters();
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(std::memcmp(pa[i].values().data(), pb[i].values().data(), pa[i].numel() * sizeof(float)) == 0);
        differs |= std::memcmp(pa[i].values().data(), pc[i].values().data(), pa[i].numel() * sizeof(float)) != 0;
    }
    CHECK(differs);
    CHECK(a.losses == b.losses);
}

TEST_CASE("DiT learns the noise of a zero residual") {
    const std::size_t h = 16, w = 16, c = 8;
    const HsiCube r(h, w, c);
    const auto psf = build_psf(positive_cube(h, w, c, 40), 8, 5.0);
    DiffusionSchedule sched;
    const auto res = train_rsm(r, WeightMap(h, w, 1.0), psf, sched, {c}, {400}, 7);
    std::mt19937_64 rng(99);
    std::normal_distribution<double> nd;
    double err = 0, norm = 0;
    for (std::size_t t : {50u, 250u, 500u, 750u, 980u}) {
        HsiCube eps(h, w, c), rt(h, w, c);
        for (std::size_t i = 0; i < eps.size(); ++i) {
            eps.data[i] = static_cast<float>(nd(rng));
            rt.data[i] = static_cast<float>(sched.sigma(t) * eps.data[i]);
        }
        const auto pred = dit_predict(res.model, rt, t, psf);
        for (std::size_t i = 0; i < eps.size(); ++i) {
            err += std::pow(double(pred.data[i]) - eps.data[i], 2);
            norm += double(eps.data[i]) * eps.data[i];
        }
    }
    MESSAGE("relative noise prediction error " << err / norm);
    CHECK(err / norm < 0.5);
}

TEST_CASE("checkpoint round trip") {
    const auto r = testutil::random_cube(6, 6, 3, 41, -1, 1);
    const auto psf = build_psf(positive_cube(6, 6, 3, 42), 8, 5.0);
    const auto res = train_rsm(r, WeightMap(6, 6, 1.0), psf, {}, small_dit(3), {5}, 2);
    const auto dir = testutil::temp_dir("ckpt");
    save_checkpoint(res.model, dir / "m.ckpt");
    const auto back = load_checkpoint(dir / "m.ckpt");
    CHECK(back.frozen);
    CHECK(back.cfg.embed == 32);
    CHECK(back.cfg.depth == 2);
    const auto na = res.model.named_parameters(), nb = back.named_parameters();
    REQUIRE(na.size() == nb.size());
    for (std::size_t i = 0; i < na.size(); ++i) {
        CHECK(na[i].first == nb[i].first);
        CHECK(na[i].second.shape() == nb[i].second.shape());
        CHECK(std::memcmp(na[i].second.values().data(), nb[i].second.values().data(),
                          na[i].second.numel() * sizeof(float)) == 0);
    }
    CHECK(dit_predict(back, r, 300, psf).data == dit_predict(res.model, r, 300, psf).data);

    std::ifstream in(dir / "m.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    CHECK(bytes.substr(0, 8) == "R2VDDIT1");

    auto write = [&](const std::string& name, const std::string& data) {
        std::ofstream(dir / name, std::ios::binary) << data;
        return dir / name;
    };
    CHECK_THROWS(load_checkpoint(write("magic.ckpt", "R2VDDIT0" + bytes.substr(8))));
    CHECK_THROWS(load_checkpoint(write("short.ckpt", bytes.substr(0, bytes.size() - 3))));
    CHECK_THROWS(load_checkpoint(write("extra.ckpt", bytes + "x")));
    CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
}

}
