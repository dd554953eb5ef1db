#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace r2vd {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// H x W x C radiance cube stored band-sequential:
//   data[band * H * W + row * W + col]
struct HsiCube {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t bands = 0;
    std::vector<float> data;

    HsiCube() = default;
    HsiCube(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
        : height(h), width(w), bands(c), data(h * w * c, fill) {}

    std::size_t pixels() const { return height * width; }
    std::size_t size() const { return data.size(); }

    float& at(std::size_t pixel, std::size_t band) { return data[band * pixels() + pixel]; }
    float at(std::size_t pixel, std::size_t band) const { return data[band * pixels() + pixel]; }

    std::span<float> band(std::size_t b) { return {data.data() + b * pixels(), pixels()}; }
    std::span<const float> band(std::size_t b) const { return {data.data() + b * pixels(), pixels()}; }

    std::vector<double> spectrum(std::size_t pixel) const;

    bool same_shape(const HsiCube& o) const {
        return height == o.height && width == o.width && bands == o.bands;
    }
};

struct GroundTruthMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> mask;  // 1 = anomaly

    GroundTruthMask() = default;
    GroundTruthMask(std::size_t h, std::size_t w) : height(h), width(w), mask(h * w, 0) {}

    std::size_t pixels() const { return height * width; }
    std::size_t anomaly_count() const;
};

/// Throws std::invalid_argument when the cube is empty, mis-sized, or holds
/// non-finite values.
void validate_cube(const HsiCube& cube);

// HSC1: ASCII line "HSC1 <H> <W> <C>\n" followed by H*W*C little-endian
// float32 values in band-sequential order.
HsiCube load_cube(const std::filesystem::path& path);
void save_cube(const HsiCube& cube, const std::filesystem::path& path);

// Binary PGM (P5). Any value > 0 loads as 1; saved masks use 0/255.
GroundTruthMask load_mask(const std::filesystem::path& path);
void save_mask(const GroundTruthMask& mask, const std::filesystem::path& path);

/// Writes values in [0,1] as an 8-bit P5 image, round(v * 255).
void save_pgm_image(std::span<const double> values, std::size_t height, std::size_t width,
                    const std::filesystem::path& path);

/// Global affine map to [0,1]. A constant cube maps to all zeros.
HsiCube normalize_cube(const HsiCube& cube);

double spectral_angle_degrees(std::span<const double> a, std::span<const double> b);

struct SynthConfig {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t bands = 16;
    double anomaly_ratio = 0.02;
    double min_sam_degrees = 10.0;
    std::size_t n_background_endmembers = 3;
    double shadow_fraction = 0.1;
    double sub_pixel_fraction = 0.2;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SynthScene {
    HsiCube cube;
    GroundTruthMask mask;
    // Extras kept for analysis and tests.
    HsiCube clean;                      // cube before sensor noise
    GroundTruthMask shadow_mask;
    GroundTruthMask sub_pixel_mask;     // subset of mask
    HsiCube unshadowed_clean;           // clean background before shadow scaling
    std::vector<std::vector<double>> background_endmembers;
    std::vector<std::vector<double>> anomaly_endmembers;
};

inline constexpr double kSynthNoiseStd = 0.01;

SynthScene synth_scene(const SynthConfig& cfg);

}  // namespace r2vd
