#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace r2vd {

// Per-pixel scalar field, row-major H x W. The tag keeps score, weight and
// anomaly maps from being mixed up at call sites.
template <class Tag>
struct PixelField {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;

    PixelField() = default;
    PixelField(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
    PixelField(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
        if (values.size() != h * w) throw std::invalid_argument("pixel field size mismatch");
    }

    std::size_t pixels() const { return height * width; }

    template <class Other>
    bool same_shape(const PixelField<Other>& o) const { return height == o.height && width == o.width; }

    template <class Other>
    PixelField<Other> as() const { return PixelField<Other>(height, width, values); }
};

using ScoreMap = PixelField<struct ScoreTag>;
using WeightMap = PixelField<struct WeightTag>;
using AnomalyMap = PixelField<struct AnomalyTag>;

}  // namespace r2vd
