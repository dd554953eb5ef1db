#include "r2vd/rsm.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>

#include "r2vd/optim.hpp"

namespace r2vd::rsm {

using ad::Tensor;

double DiffusionSchedule::sigma(std::size_t t) const {
    if (t >= t_max) throw std::out_of_range("diffusion schedule: t outside [0, T-1]");
    return sigma_min * std::pow(sigma_max / sigma_min, static_cast<double>(t) / static_cast<double>(t_max - 1));
}

void DiffusionSchedule::validate() const {
    if (t_max < 2 || !(sigma_min > 0.0) || !(sigma_max > sigma_min))
        throw std::invalid_argument("diffusion schedule: need T >= 2 and 0 < sigma_min < sigma_max");
}

std::vector<std::vector<std::size_t>> window_partition(std::size_t h, std::size_t w, std::size_t win) {
    if (h == 0 || w == 0 || win == 0) throw std::invalid_argument("window_partition: empty grid or window");
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t r0 = 0; r0 < h; r0 += win)
        for (std::size_t c0 = 0; c0 < w; c0 += win) {
            std::vector<std::size_t> idx;
            for (std::size_t r = r0; r < std::min(h, r0 + win); ++r)
                for (std::size_t c = c0; c < std::min(w, c0 + win); ++c) idx.push_back(r * w + c);
            out.push_back(std::move(idx));
        }
    return out;
}

std::vector<double> psf_matrix(std::span<const double> spectra, std::size_t len, std::size_t bands, double xi) {
    if (spectra.size() != len * bands) throw std::invalid_argument("psf_matrix: expected L x C spectra");
    std::vector<double> unit(spectra.begin(), spectra.end());
    for (std::size_t i = 0; i < len; ++i) {
        double n = 0.0;
        for (std::size_t b = 0; b < bands; ++b) n += unit[i * bands + b] * unit[i * bands + b];
        n = std::max(std::sqrt(n), xi);
        for (std::size_t b = 0; b < bands; ++b) unit[i * bands + b] /= n;
    }
    std::vector<double> d(len * len, 0.0);
    for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = i + 1; j < len; ++j) {
            double s = 0.0;
            for (std::size_t b = 0; b < bands; ++b) {
                const double e = unit[i * bands + b] - unit[j * bands + b];
                s += e * e;
            }
            d[i * len + j] = d[j * len + i] = std::sqrt(s);
        }
    return d;
}

PsfContext build_psf(const HsiCube& x, std::size_t window, double lambda) {
    validate_cube(x);
    if (!(lambda >= 0.0)) throw std::invalid_argument("psf: lambda must be non-negative");
    PsfContext ctx{x.height, x.width, window, {}};
    ctx.attention.windows = window_partition(x.height, x.width, window);
    ctx.attention.lambda = lambda;
    for (const auto& idx : ctx.attention.windows) {
        std::vector<double> spectra(idx.size() * x.bands);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t b = 0; b < x.bands; ++b) spectra[i * x.bands + b] = x.at(idx[i], b);
        ctx.attention.distance.push_back(psf_matrix(spectra, idx.size(), x.bands));
    }
    return ctx;
}

template <typename T>
Tensor<T> psf_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                        const PsfContext& psf) {
    if (q.rank() != 2 || q.dim(0) != psf.height * psf.width)
        throw std::invalid_argument("psf_attention: token count does not match the window tiling");
    return ad::window_attention(q, k, v, heads, psf.attention);
}

void DitConfig::validate() const {
    if (bands < 1 || embed < 4 || embed % 4 || depth < 1 || heads < 1 || embed % heads || mlp_ratio < 1 || window < 1)
        throw std::invalid_argument("dit: invalid architecture");
}

namespace {

template <typename T>
Tensor<T> xavier(std::size_t out, std::size_t in, std::mt19937_64& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(out * in);
    for (auto& e : v) e = static_cast<T>(dist(rng));
    return Tensor<T>::parameter({out, in}, std::move(v));
}

template <typename T>
Tensor<T> zero_param(ad::Shape shape) {
    return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> detach(const Tensor<T>& t) {
    return Tensor<T>::constant(t.shape(), std::vector<T>(t.values().begin(), t.values().end()));
}

}  // namespace

template <typename T>
DitModel<T> DitModel<T>::init(const DitConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.embed, c = cfg.bands, hid = cfg.mlp_ratio * cfg.embed;
    DitModel m;
    m.cfg = cfg;
    m.embed_w = xavier<T>(d, c, rng);
    m.embed_b = zero_param<T>({d});
    m.t1_w = xavier<T>(d, d, rng);
    m.t1_b = zero_param<T>({d});
    m.t2_w = xavier<T>(d, d, rng);
    m.t2_b = zero_param<T>({d});
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        DitBlock<T> b;
        b.ada_w = zero_param<T>({6 * d, d});
        b.ada_b = zero_param<T>({6 * d});
        b.qkv_w = xavier<T>(3 * d, d, rng);
        b.qkv_b = zero_param<T>({3 * d});
        b.proj_w = xavier<T>(d, d, rng);
        b.proj_b = zero_param<T>({d});
        b.fc1_w = xavier<T>(hid, d, rng);
        b.fc1_b = zero_param<T>({hid});
        b.fc2_w = xavier<T>(d, hid, rng);
        b.fc2_b = zero_param<T>({d});
        m.blocks.push_back(std::move(b));
    }
    m.head_w = zero_param<T>({c, d});
    m.head_b = zero_param<T>({c});
    return m;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> DitModel<T>::named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out{
        {"embed.w", embed_w}, {"embed.b", embed_b}, {"time.0.w", t1_w}, {"time.0.b", t1_b},
        {"time.2.w", t2_w},   {"time.2.b", t2_b}};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& b = blocks[i];
        const std::string p = "blocks." + std::to_string(i) + ".";
        out.insert(out.end(), {{p + "ada.w", b.ada_w}, {p + "ada.b", b.ada_b}, {p + "qkv.w", b.qkv_w},
                               {p + "qkv.b", b.qkv_b}, {p + "proj.w", b.proj_w}, {p + "proj.b", b.proj_b},
                               {p + "fc1.w", b.fc1_w}, {p + "fc1.b", b.fc1_b}, {p + "fc2.w", b.fc2_w},
                               {p + "fc2.b", b.fc2_b}});
    }
    out.insert(out.end(), {{"head.w", head_w}, {"head.b", head_b}});
    return out;
}

template <typename T>
std::vector<Tensor<T>> DitModel<T>::parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

template <typename T>
DitModel<T> DitModel<T>::detached() const {
    DitModel m = *this;
    m.embed_w = detach(embed_w);
    m.embed_b = detach(embed_b);
    m.t1_w = detach(t1_w);
    m.t1_b = detach(t1_b);
    m.t2_w = detach(t2_w);
    m.t2_b = detach(t2_b);
    for (auto& b : m.blocks)
        for (Tensor<T>* t : {&b.ada_w, &b.ada_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.fc1_w, &b.fc1_b,
                             &b.fc2_w, &b.fc2_b})
            *t = detach(*t);
    m.head_w = detach(head_w);
    m.head_b = detach(head_b);
    return m;
}

template <typename T>
Tensor<T> dit_forward(const DitModel<T>& model, const Tensor<T>& tokens, std::size_t t, const PsfContext& psf) {
    const DitConfig& cfg = model.cfg;
    const std::size_t n = psf.height * psf.width, d = cfg.embed;
    if (tokens.rank() != 2 || tokens.dim(0) != n || tokens.dim(1) != cfg.bands)
        throw std::invalid_argument("dit: tokens " + ad::shape_str(tokens.shape()) + " do not match [" +
                                    std::to_string(n) + "," + std::to_string(cfg.bands) + "]");
    if (psf.window != cfg.window) throw std::invalid_argument("dit: PSF tiling uses a different window size");

    std::vector<T> pos(n * d);
    for (std::size_t r = 0; r < psf.height; ++r)
        for (std::size_t c = 0; c < psf.width; ++c) {
            const auto e = ad::sinusoidal_embedding_2d(r, c, d);
            for (std::size_t j = 0; j < d; ++j) pos[(r * psf.width + c) * d + j] = static_cast<T>(e[j]);
        }
    auto x = ad::add(ad::linear(tokens, model.embed_w, model.embed_b), Tensor<T>::constant({n, d}, std::move(pos)));

    const auto te = ad::sinusoidal_embedding(static_cast<double>(t), d);
    auto temb = Tensor<T>::constant({1, d}, std::vector<T>(te.begin(), te.end()));
    auto cond = ad::linear(ad::silu(ad::linear(temb, model.t1_w, model.t1_b)), model.t2_w, model.t2_b);
    auto cond_act = ad::silu(cond);
    const Tensor<T> none;

    for (const auto& b : model.blocks) {
        auto ada = ad::linear(cond_act, b.ada_w, b.ada_b);  // [1, 6D]
        auto part = [&](std::size_t i) { return ad::columns(ada, i * d, d); };
        auto h = ad::modulate(ad::layer_norm(x, none, none), part(0), part(1));
        auto qkv = ad::linear(h, b.qkv_w, b.qkv_b);
        auto att = psf_attention(ad::columns(qkv, 0, d), ad::columns(qkv, d, d), ad::columns(qkv, 2 * d, d), cfg.heads, psf);
        x = ad::gated_add(x, part(2), ad::linear(att, b.proj_w, b.proj_b));
        auto h2 = ad::modulate(ad::layer_norm(x, none, none), part(3), part(4));
        auto mlp = ad::linear(ad::silu(ad::linear(h2, b.fc1_w, b.fc1_b)), b.fc2_w, b.fc2_b);
        x = ad::gated_add(x, part(5), mlp);
    }
    return ad::linear(ad::layer_norm(x, none, none), model.head_w, model.head_b);
}

std::vector<float> cube_to_tokens(const HsiCube& cube) {
    const std::size_t n = cube.pixels(), c = cube.bands;
    std::vector<float> out(n * c);
    for (std::size_t b = 0; b < c; ++b)
        for (std::size_t p = 0; p < n; ++p) out[p * c + b] = cube.data[b * n + p];
    return out;
}

HsiCube tokens_to_cube(std::span<const float> tokens, std::size_t h, std::size_t w, std::size_t c) {
    if (tokens.size() != h * w * c) throw std::invalid_argument("tokens_to_cube: size mismatch");
    HsiCube out(h, w, c);
    const std::size_t n = h * w;
    for (std::size_t p = 0; p < n; ++p)
        for (std::size_t b = 0; b < c; ++b) out.data[b * n + p] = tokens[p * c + b];
    return out;
}

HsiCube dit_predict(const DitModel<float>& model, const HsiCube& r_t, std::size_t t, const PsfContext& psf) {
    const auto m = model.detached();
    const auto tokens = Tensor<float>::constant({r_t.pixels(), r_t.bands}, cube_to_tokens(r_t));
    const auto out = dit_forward(m, tokens, t, psf);
    return tokens_to_cube(out.values(), r_t.height, r_t.width, r_t.bands);
}

template <typename T>
Tensor<T> dsm_loss(const Tensor<T>& eps_hat, std::span<const T> eps, const WeightMap& w) {
    if (eps_hat.rank() != 2 || eps_hat.dim(0) != w.pixels())
        throw std::invalid_argument("dsm_loss: prediction does not match the weight map");
    return ad::weighted_pixel_loss(eps_hat, eps, std::span<const double>(w.values), w.pixels(), eps_hat.dim(1),
                                   ad::PixelLayout::PixelMajor);
}

double dsm_loss(const HsiCube& eps_hat, const HsiCube& eps, const WeightMap& w) {
    if (!eps_hat.same_shape(eps) || eps.height != w.height || eps.width != w.width)
        throw std::invalid_argument("dsm_loss: dimension mismatch");
    const std::size_t n = eps.pixels();
    double total = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
        if (w.values[p] == 0.0) continue;
        double e = 0.0;
        for (std::size_t b = 0; b < eps.bands; ++b) {
            const double d = static_cast<double>(eps_hat.at(p, b)) - eps.at(p, b);
            e += d * d;
        }
        total += w.values[p] * e;
    }
    return total / static_cast<double>(n);
}

double standardize_in_place(HsiCube& cube) {
    double mean = 0.0;
    for (float v : cube.data) mean += v;
    mean /= static_cast<double>(cube.size());
    double var = 0.0;
    for (float v : cube.data) var += (v - mean) * (v - mean);
    double sd = std::sqrt(var / static_cast<double>(cube.size()));
    if (!(sd > 0.0)) sd = 1.0;
    for (float& v : cube.data) v = static_cast<float>(v / sd);
    return sd;
}

RsmResult train_rsm(const HsiCube& r, const WeightMap& w, const PsfContext& psf, const DiffusionSchedule& sched,
                    const DitConfig& arch, const RsmTrainConfig& train, std::uint64_t seed) {
    validate_cube(r);
    sched.validate();
    if (r.height != psf.height || r.width != psf.width || w.height != r.height || w.width != r.width)
        throw std::invalid_argument("train_rsm: residual, weights and PSF tiling disagree in size");
    DitConfig cfg = arch;
    cfg.bands = r.bands;

    RsmResult res{DitModel<float>::init(cfg, seed), {}};
    optim::Optimizer<float> opt(res.model.parameters(),
                                {optim::OptimizerKind::AdamW, train.lr, 0.9, 0.999, 1e-8, train.weight_decay});
    const std::vector<float> base = cube_to_tokens(r);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::size_t> pick_t(0, sched.t_max - 1);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<float> eps(base.size()), noisy(base.size());

    for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
        const std::size_t t = pick_t(rng);
        const double sigma = sched.sigma(t);
        for (std::size_t i = 0; i < base.size(); ++i) {
            eps[i] = static_cast<float>(normal(rng));
            noisy[i] = static_cast<float>(base[i] + sigma * eps[i]);
        }
        auto pred = dit_forward(res.model, Tensor<float>::constant({r.pixels(), r.bands}, noisy), t, psf);
        auto loss = dsm_loss(pred, std::span<const float>(eps), w);
        const double lv = loss.item();
        if (!std::isfinite(lv)) throw std::runtime_error("train_rsm: non-finite loss at epoch " + std::to_string(epoch));
        res.losses.push_back(lv);
        opt.zero_grad();
        ad::backward(loss);
        opt.step();
    }
    opt.zero_grad();
    res.model.frozen = true;
    return res;
}

namespace {

constexpr char kMagic[] = "R2VDDIT1";
constexpr const char* kConfigBlock = "__config__";

void put_u32(std::ostream& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint: truncated");
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_block(std::ostream& out, const std::string& name, const ad::Shape& shape, std::span<const float> values) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : values) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

}  // namespace

void save_checkpoint(const DitModel<float>& model, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(kMagic, 8);
    const auto& c = model.cfg;
    const std::vector<float> cfg{static_cast<float>(c.bands), static_cast<float>(c.embed), static_cast<float>(c.depth),
                                 static_cast<float>(c.heads), static_cast<float>(c.mlp_ratio), static_cast<float>(c.window)};
    put_block(out, kConfigBlock, {cfg.size()}, cfg);
    for (const auto& [name, t] : model.named_parameters()) put_block(out, name, t.shape(), t.values());
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

DitModel<float> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    char magic[8];
    if (!in.read(magic, 8) || std::string(magic, 8) != kMagic) throw FormatError("checkpoint: bad magic in " + path.string());

    std::map<std::string, std::pair<ad::Shape, std::vector<float>>> blocks;
    while (in.peek() != std::char_traits<char>::eof()) {
        const std::uint32_t len = get_u32(in);
        if (len == 0 || len > 4096) throw FormatError("checkpoint: bad block name length");
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw FormatError("checkpoint: truncated name");
        const std::uint32_t ndim = get_u32(in);
        if (ndim > 8) throw FormatError("checkpoint: bad rank for " + name);
        ad::Shape shape(ndim);
        for (auto& d : shape) d = get_u32(in);
        std::vector<float> vals(ad::numel(shape));
        for (auto& v : vals) {
            v = std::bit_cast<float>(get_u32(in));
            if (!std::isfinite(v)) throw FormatError("checkpoint: non-finite value in " + name);
        }
        if (!blocks.emplace(name, std::make_pair(std::move(shape), std::move(vals))).second)
            throw FormatError("checkpoint: duplicate block " + name);
    }

    const auto cfg_it = blocks.find(kConfigBlock);
    if (cfg_it == blocks.end() || cfg_it->second.second.size() != 6) throw FormatError("checkpoint: missing architecture block");
    const auto& cv = cfg_it->second.second;
    DitConfig cfg{static_cast<std::size_t>(cv[0]), static_cast<std::size_t>(cv[1]), static_cast<std::size_t>(cv[2]),
                  static_cast<std::size_t>(cv[3]), static_cast<std::size_t>(cv[4]), static_cast<std::size_t>(cv[5])};
    auto model = DitModel<float>::init(cfg, 0);
    for (auto& [name, t] : model.named_parameters()) {
        const auto it = blocks.find(name);
        if (it == blocks.end()) throw FormatError("checkpoint: missing block " + name);
        if (it->second.first != t.shape()) throw FormatError("checkpoint: shape mismatch for " + name);
        auto dst = t.mutable_values();
        std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
    }
    if (blocks.size() != model.named_parameters().size() + 1) throw FormatError("checkpoint: unexpected extra blocks");
    model.frozen = true;
    return model;
}

#define R2VD_RSM_INSTANTIATE(T)                                                                                   \
    template struct DitModel<T>;                                                                                  \
    template Tensor<T> psf_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,        \
                                        const PsfContext&);                                                       \
    template Tensor<T> dit_forward<T>(const DitModel<T>&, const Tensor<T>&, std::size_t, const PsfContext&);      \
    template Tensor<T> dsm_loss<T>(const Tensor<T>&, std::span<const T>, const WeightMap&);

R2VD_RSM_INSTANTIATE(float)
R2VD_RSM_INSTANTIATE(double)

}  // namespace r2vd::rsm
