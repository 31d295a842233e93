#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxlm {

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Raw CT volume: signed 16-bit HU values, x-fastest storage, physical voxel
// spacing in millimetres.
struct Volume {
    std::array<int64_t, 3> dims{0, 0, 0};
    std::array<float, 3> spacing{1.f, 1.f, 1.f};
    std::vector<int16_t> hu;

    int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
    int64_t index(int64_t x, int64_t y, int64_t z) const { return x + dims[0] * (y + dims[1] * z); }
    int16_t at(int64_t x, int64_t y, int64_t z) const { return hu[index(x, y, z)]; }

    void validate() const;
};

// Normalized voxel grid in [0, 1]; same x-fastest layout as Volume.
template <typename T>
struct Grid {
    std::array<int64_t, 3> dims{0, 0, 0};
    std::vector<T> values;

    int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
    int64_t index(int64_t x, int64_t y, int64_t z) const { return x + dims[0] * (y + dims[1] * z); }
};

struct PreprocessConfig {
    std::array<double, 3> target_spacing{1.5, 1.5, 3.0};
    std::array<double, 2> hu_window{-1000.0, 1000.0};
    std::array<int64_t, 3> target_dims{64, 64, 32};
    double pad_fill = 0.0;

    void validate() const;
};

// RVOL container: "RVOL" | version u16 LE = 1 | nx,ny,nz u32 LE |
// sx,sy,sz f32 LE | int16 LE HU payload, x fastest.
Volume read_rvol(const std::string& path);
void write_rvol(const Volume& v, const std::string& path);

// Resample onto the target spacing with trilinear interpolation. Both grids
// share the origin at the first voxel center, coord(i) = i * spacing.
// Samples falling outside the source grid read as air (-1000 HU); results
// round to the nearest integer HU.
Volume resample_trilinear(const Volume& v, const std::array<double, 3>& target_spacing);

template <typename T>
Grid<T> clip_normalize_hu(const Volume& v, const std::array<double, 2>& window) {
    const double lo = window[0], hi = window[1];
    if (!(lo < hi)) throw FormatError("hu_window: lo must be < hi");
    Grid<T> g;
    g.dims = v.dims;
    g.values.resize(static_cast<size_t>(v.numel()));
    const double inv = 1.0 / (hi - lo);
    for (size_t i = 0; i < g.values.size(); ++i) {
        double x = static_cast<double>(v.hu[i]);
        x = x < lo ? lo : (x > hi ? hi : x);
        g.values[i] = static_cast<T>((x - lo) * inv);
    }
    return g;
}

// Crop starts at floor((in-out)/2); padding splits the remainder with the
// extra voxel on the high side.
template <typename T>
Grid<T> center_crop_pad(const Grid<T>& g, const std::array<int64_t, 3>& target_dims, T fill) {
    for (int a = 0; a < 3; ++a)
        if (target_dims[a] < 1) throw FormatError("target_dims: all axes must be >= 1");
    std::array<int64_t, 3> offset{}; // source index = out index + offset
    for (int a = 0; a < 3; ++a) {
        if (g.dims[a] >= target_dims[a])
            offset[a] = (g.dims[a] - target_dims[a]) / 2;
        else
            offset[a] = -((target_dims[a] - g.dims[a]) / 2);
    }
    Grid<T> out;
    out.dims = target_dims;
    out.values.resize(static_cast<size_t>(out.numel()));
    size_t w = 0;
    for (int64_t z = 0; z < target_dims[2]; ++z)
        for (int64_t y = 0; y < target_dims[1]; ++y)
            for (int64_t x = 0; x < target_dims[0]; ++x, ++w) {
                int64_t sx = x + offset[0], sy = y + offset[1], sz = z + offset[2];
                bool inside = sx >= 0 && sx < g.dims[0] && sy >= 0 && sy < g.dims[1] && sz >= 0 &&
                              sz < g.dims[2];
                out.values[w] = inside ? g.values[static_cast<size_t>(g.index(sx, sy, sz))] : fill;
            }
    return out;
}

// resample -> clip/normalize -> center crop/pad
template <typename T>
Grid<T> preprocess(const Volume& v, const PreprocessConfig& cfg) {
    cfg.validate();
    v.validate();
    Volume r = resample_trilinear(v, cfg.target_spacing);
    Grid<T> g = clip_normalize_hu<T>(r, cfg.hu_window);
    return center_crop_pad(g, cfg.target_dims, static_cast<T>(cfg.pad_fill));
}

} // namespace voxlm
