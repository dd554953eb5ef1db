#include "r2vd/hsi.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cctype>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

namespace r2vd {

namespace {

constexpr std::size_t kMaxHeaderLine = 256;

std::vector<char> read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_all(const std::filesystem::path& path, const std::string& header, const char* payload,
               std::size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(payload, static_cast<std::streamsize>(n));
    if (!out) throw FormatError("write failed for " + path.string());
}

std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
    }
    return v;
}

// Parses a positive decimal integer token; rejects signs and trailing junk.
std::size_t parse_dim(const std::string& tok, const char* what) {
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; }))
        throw FormatError(std::string("bad ") + what + " '" + tok + "'");
    std::size_t v = std::stoull(tok);
    if (v == 0) throw FormatError(std::string(what) + " must be positive");
    return v;
}

// Reads whitespace-separated PGM header tokens, skipping '#' comments.
std::string pgm_token(const std::vector<char>& buf, std::size_t& pos) {
    for (;;) {
        while (pos < buf.size() && std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
        if (pos < buf.size() && buf[pos] == '#') {
            while (pos < buf.size() && buf[pos] != '\n') ++pos;
            continue;
        }
        break;
    }
    std::string tok;
    while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) tok.push_back(buf[pos++]);
    if (tok.empty()) throw FormatError("truncated PGM header");
    return tok;
}

double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

void scale_to_unit(std::vector<double>& v) {
    const double n = norm2(v);
    for (double& x : v) x /= n;
}

}  // namespace

std::vector<double> HsiCube::spectrum(std::size_t pixel) const {
    std::vector<double> s(bands);
    for (std::size_t b = 0; b < bands; ++b) s[b] = at(pixel, b);
    return s;
}

std::size_t GroundTruthMask::anomaly_count() const {
    return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }));
}

void validate_cube(const HsiCube& cube) {
    if (cube.height == 0 || cube.width == 0 || cube.bands == 0)
        throw std::invalid_argument("cube dimensions must be positive");
    if (cube.data.size() != cube.height * cube.width * cube.bands)
        throw std::invalid_argument("cube payload does not match its dimensions");
    for (float v : cube.data)
        if (!std::isfinite(v)) throw std::invalid_argument("cube contains non-finite values");
}

HsiCube load_cube(const std::filesystem::path& path) {
    const std::vector<char> buf = read_all(path);
    const auto nl = std::find(buf.begin(), buf.begin() + std::min(buf.size(), kMaxHeaderLine), '\n');
    if (nl == buf.end() || static_cast<std::size_t>(nl - buf.begin()) >= kMaxHeaderLine)
        throw FormatError("missing HSC1 header line in " + path.string());

    std::istringstream header(std::string(buf.begin(), nl));
    std::string magic, h, w, c, extra;
    header >> magic >> h >> w >> c;
    if (magic != "HSC1") throw FormatError("bad magic '" + magic + "' in " + path.string());
    if (header >> extra) throw FormatError("trailing tokens in HSC1 header");

    HsiCube cube(parse_dim(h, "height"), parse_dim(w, "width"), parse_dim(c, "bands"));
    const std::size_t offset = static_cast<std::size_t>(nl - buf.begin()) + 1;
    const std::size_t expected = cube.size() * sizeof(float);
    if (buf.size() - offset != expected) {
        throw FormatError("HSC1 payload is " + std::to_string(buf.size() - offset) + " bytes, expected " +
                          std::to_string(expected));
    }
    for (std::size_t i = 0; i < cube.size(); ++i) {
        std::uint32_t raw;
        std::memcpy(&raw, buf.data() + offset + 4 * i, 4);
        cube.data[i] = std::bit_cast<float>(to_little_endian(raw));
        if (!std::isfinite(cube.data[i])) throw FormatError("non-finite value in " + path.string());
    }
    return cube;
}

void save_cube(const HsiCube& cube, const std::filesystem::path& path) {
    validate_cube(cube);
    std::vector<std::uint32_t> payload(cube.size());
    for (std::size_t i = 0; i < cube.size(); ++i)
        payload[i] = to_little_endian(std::bit_cast<std::uint32_t>(cube.data[i]));
    const std::string header = "HSC1 " + std::to_string(cube.height) + " " + std::to_string(cube.width) + " " +
                               std::to_string(cube.bands) + "\n";
    write_all(path, header, reinterpret_cast<const char*>(payload.data()), payload.size() * 4);
}

GroundTruthMask load_mask(const std::filesystem::path& path) {
    const std::vector<char> buf = read_all(path);
    std::size_t pos = 0;
    if (pgm_token(buf, pos) != "P5") throw FormatError("not a binary PGM (P5): " + path.string());
    const std::size_t width = parse_dim(pgm_token(buf, pos), "width");
    const std::size_t height = parse_dim(pgm_token(buf, pos), "height");
    const std::size_t maxval = parse_dim(pgm_token(buf, pos), "maxval");
    if (maxval > 255) throw FormatError("16-bit PGM masks are not supported");
    if (pos >= buf.size()) throw FormatError("truncated PGM payload");
    ++pos;  // single whitespace after maxval
    if (buf.size() - pos < width * height) throw FormatError("truncated PGM payload in " + path.string());

    GroundTruthMask m(height, width);
    for (std::size_t i = 0; i < m.pixels(); ++i)
        m.mask[i] = static_cast<unsigned char>(buf[pos + i]) > 0 ? 1 : 0;
    return m;
}

void save_mask(const GroundTruthMask& mask, const std::filesystem::path& path) {
    if (mask.mask.size() != mask.pixels() || mask.pixels() == 0) throw std::invalid_argument("bad mask dimensions");
    std::vector<char> payload(mask.pixels());
    for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = mask.mask[i] ? static_cast<char>(255) : 0;
    const std::string header = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
    write_all(path, header, payload.data(), payload.size());
}

void save_pgm_image(std::span<const double> values, std::size_t height, std::size_t width,
                    const std::filesystem::path& path) {
    if (values.size() != height * width) throw std::invalid_argument("image size mismatch");
    std::vector<char> payload(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double v = std::clamp(values[i], 0.0, 1.0);
        payload[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
    }
    const std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    write_all(path, header, payload.data(), payload.size());
}

HsiCube normalize_cube(const HsiCube& cube) {
    validate_cube(cube);
    const auto [lo, hi] = std::minmax_element(cube.data.begin(), cube.data.end());
    const double mn = *lo, mx = *hi;
    HsiCube out(cube.height, cube.width, cube.bands);
    if (mx == mn) return out;
    const double range = mx - mn;
    for (std::size_t i = 0; i < cube.size(); ++i)
        out.data[i] = static_cast<float>((static_cast<double>(cube.data[i]) - mn) / range);
    return out;
}

double spectral_angle_degrees(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("spectral_angle: length mismatch");
    double dot = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    const double denom = norm2(a) * norm2(b);
    if (denom == 0.0) return 0.0;
    return std::acos(std::clamp(dot / denom, -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

void SynthConfig::validate() const {
    if (height == 0 || width == 0) throw std::invalid_argument("synth: spatial size must be positive");
    if (bands < 2) throw std::invalid_argument("synth: need at least 2 bands");
    if (!(anomaly_ratio > 0.0 && anomaly_ratio < 0.5)) throw std::invalid_argument("synth: anomaly_ratio must be in (0, 0.5)");
    if (!(min_sam_degrees > 0.0 && min_sam_degrees < 90.0))
        throw std::invalid_argument("synth: min_sam_degrees must be in (0, 90)");
    if (n_background_endmembers == 0) throw std::invalid_argument("synth: need at least one background endmember");
    if (!(shadow_fraction >= 0.0 && shadow_fraction < 1.0)) throw std::invalid_argument("synth: shadow_fraction must be in [0, 1)");
    if (!(sub_pixel_fraction >= 0.0 && sub_pixel_fraction <= 1.0))
        throw std::invalid_argument("synth: sub_pixel_fraction must be in [0, 1]");
}

namespace {

std::vector<double> smooth_endmember(std::size_t bands, std::mt19937_64& rng) {
    std::lognormal_distribution<double> inc(0.0, 1.0);
    std::vector<double> v(bands);
    double acc = 0.0;
    for (double& x : v) x = (acc += inc(rng));
    scale_to_unit(v);
    return v;
}

// Adds a narrow positive spectral feature to `parent` until the angle to the
// parent reaches `target_deg`. Returns an empty vector when the feature cannot
// rotate that far.
std::vector<double> rotate_by_feature(const std::vector<double>& parent, double target_deg, std::mt19937_64& rng) {
    const std::size_t bands = parent.size();
    std::uniform_real_distribution<double> center_d(0.0, static_cast<double>(bands - 1));
    std::uniform_real_distribution<double> width_d(0.6, 1.8);
    const double center = center_d(rng), width = width_d(rng);

    std::vector<double> bump(bands);
    for (std::size_t b = 0; b < bands; ++b) {
        const double d = (static_cast<double>(b) - center) / width;
        bump[b] = std::exp(-0.5 * d * d);
    }
    auto candidate = [&](double amp) {
        std::vector<double> a(bands);
        for (std::size_t b = 0; b < bands; ++b) a[b] = parent[b] + amp * bump[b];
        return a;
    };
    double lo = 0.0, hi = 1.0;
    while (spectral_angle_degrees(candidate(hi), parent) < target_deg) {
        hi *= 2.0;
        if (hi > 1e6) return {};
    }
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (spectral_angle_degrees(candidate(mid), parent) < target_deg ? lo : hi) = mid;
    }
    std::vector<double> a = candidate(hi);
    scale_to_unit(a);
    return a;
}

double min_angle_to(const std::vector<std::vector<double>>& set, std::span<const double> v) {
    double best = 180.0;
    for (const auto& e : set) best = std::min(best, spectral_angle_degrees(e, v));
    return best;
}

}  // namespace

SynthScene synth_scene(const SynthConfig& cfg) {
    cfg.validate();
    const std::size_t H = cfg.height, W = cfg.width, C = cfg.bands, N = H * W;
    const auto n_anom = static_cast<std::size_t>(std::llround(static_cast<double>(N) * cfg.anomaly_ratio));
    if (n_anom == 0) throw std::invalid_argument("synth: requested anomaly count rounds to zero");

    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    SynthScene s;
    for (std::size_t j = 0; j < cfg.n_background_endmembers; ++j) s.background_endmembers.push_back(smooth_endmember(C, rng));

    // Expected noise-induced angle on a ~unit spectrum; pure anomalies keep a
    // margin above it so the observed pixels still clear min_sam_degrees.
    const double noise_deg = std::asin(std::min(1.0, 2.0 * kSynthNoiseStd * std::sqrt(static_cast<double>(C)))) * 180.0 / std::numbers::pi;
    const double base_target = std::min(cfg.min_sam_degrees + 3.0 + noise_deg, 85.0);
    constexpr std::size_t kAnomalyMaterials = 2;
    while (s.anomaly_endmembers.size() < kAnomalyMaterials) {
        const auto& parent = s.background_endmembers[rng() % s.background_endmembers.size()];
        const double target = std::min(base_target + 5.0 * unit(rng), 88.0);
        std::vector<double> a = rotate_by_feature(parent, target, rng);
        if (a.empty() || min_angle_to(s.background_endmembers, a) < base_target) continue;
        s.anomaly_endmembers.push_back(std::move(a));
    }

    // Spatially smooth abundance fields -> convex mixtures via softmax.
    const std::size_t M = cfg.n_background_endmembers;
    std::vector<double> logits(M * N, 0.0);
    for (std::size_t j = 0; j < M; ++j) {
        for (int q = 0; q < 3; ++q) {
            const double fx = (0.5 + 1.5 * unit(rng)) * (unit(rng) < 0.5 ? -1.0 : 1.0);
            const double fy = 0.5 + 1.5 * unit(rng);
            const double phase = 2.0 * std::numbers::pi * unit(rng);
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    logits[j * N + y * W + x] += 1.5 * std::sin(2.0 * std::numbers::pi *
                                                                    (fx * static_cast<double>(x) / static_cast<double>(W) +
                                                                     fy * static_cast<double>(y) / static_cast<double>(H)) +
                                                                phase);
        }
    }
    s.unshadowed_clean = HsiCube(H, W, C);
    for (std::size_t p = 0; p < N; ++p) {
        double mx = -1e300;
        for (std::size_t j = 0; j < M; ++j) mx = std::max(mx, logits[j * N + p]);
        double z = 0.0;
        std::vector<double> ab(M);
        for (std::size_t j = 0; j < M; ++j) z += (ab[j] = std::exp(logits[j * N + p] - mx));
        for (std::size_t b = 0; b < C; ++b) {
            double v = 0.0;
            for (std::size_t j = 0; j < M; ++j) v += ab[j] / z * s.background_endmembers[j][b];
            s.unshadowed_clean.at(p, b) = static_cast<float>(v);
        }
    }

    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    s.mask = GroundTruthMask(H, W);
    s.sub_pixel_mask = GroundTruthMask(H, W);
    s.shadow_mask = GroundTruthMask(H, W);
    const auto n_sub = static_cast<std::size_t>(std::llround(static_cast<double>(n_anom) * cfg.sub_pixel_fraction));
    const auto n_shadow = static_cast<std::size_t>(std::llround(static_cast<double>(N - n_anom) * cfg.shadow_fraction));

    s.clean = s.unshadowed_clean;
    for (std::size_t i = 0; i < n_anom + n_shadow; ++i) {
        const std::size_t p = order[i];
        if (i < n_anom) {
            s.mask.mask[p] = 1;
            const auto& a = s.anomaly_endmembers[rng() % s.anomaly_endmembers.size()];
            const double brightness = 0.85 + 0.2 * unit(rng);
            double frac = 1.0;
            if (i < n_sub) {
                s.sub_pixel_mask.mask[p] = 1;
                frac = 0.3 + 0.4 * unit(rng);
            }
            for (std::size_t b = 0; b < C; ++b)
                s.clean.at(p, b) = static_cast<float>(frac * brightness * a[b] +
                                                      (1.0 - frac) * static_cast<double>(s.unshadowed_clean.at(p, b)));
        } else {
            s.shadow_mask.mask[p] = 1;
            const double factor = 0.3 + 0.4 * unit(rng);
            for (std::size_t b = 0; b < C; ++b)
                s.clean.at(p, b) = static_cast<float>(factor * static_cast<double>(s.unshadowed_clean.at(p, b)));
        }
    }

    s.cube = s.clean;
    for (std::size_t p = 0; p < N; ++p) {
        const bool pure_anomaly = s.mask.mask[p] && !s.sub_pixel_mask.mask[p];
        for (int attempt = 0;; ++attempt) {
            for (std::size_t b = 0; b < C; ++b)
                s.cube.at(p, b) = static_cast<float>(static_cast<double>(s.clean.at(p, b)) + kSynthNoiseStd * gauss(rng));
            if (!pure_anomaly || min_angle_to(s.background_endmembers, s.cube.spectrum(p)) >= cfg.min_sam_degrees) break;
            if (attempt > 1000) throw std::runtime_error("synth: cannot keep anomaly above min_sam_degrees under noise");
        }
    }
    return s;
}

}  // namespace r2vd
