#pragma once

#include <cstdint>
#include <vector>

namespace spcl {

/// Reserved mask value for pixels excluded from losses and metrics.
inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Per-pixel class assignment. Class ids occupy [0, C); kIgnoreLabel marks
/// excluded pixels. Used for ground-truth labels (H x W), feature-space
/// masks (H' x W'), and pseudo-label maps.
struct LabelMap {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> v;

    LabelMap() = default;
    LabelMap(int r, int c, std::uint8_t fill = 0)
        : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {}

    std::uint8_t& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    std::uint8_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
    long size() const { return static_cast<long>(rows) * cols; }

    bool operator==(const LabelMap& o) const = default;
};

}  // namespace spcl
