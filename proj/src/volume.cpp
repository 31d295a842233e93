#include "volume.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace voxlm {

namespace {

constexpr uint16_t kRvolVersion = 1;
constexpr double kAirHu = -1000.0;

void write_u16(std::ofstream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void write_u32(std::ofstream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_f32(std::ofstream& os, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    write_u32(os, bits);
}

bool read_bytes(std::ifstream& is, void* dst, size_t n) {
    is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<size_t>(is.gcount()) == n;
}

uint16_t read_u16(std::ifstream& is, const char* field) {
    unsigned char b[2];
    if (!read_bytes(is, b, 2)) throw FormatError(std::string("rvol: truncated ") + field);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t read_u32(std::ifstream& is, const char* field) {
    unsigned char b[4];
    if (!read_bytes(is, b, 4)) throw FormatError(std::string("rvol: truncated ") + field);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

float read_f32(std::ifstream& is, const char* field) {
    uint32_t bits = read_u32(is, field);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

} // namespace

void Volume::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] < 1) throw FormatError("volume: dims must be >= 1 on every axis");
        if (!(spacing[a] > 0.f) || !std::isfinite(spacing[a]))
            throw FormatError("volume: spacing must be positive and finite");
    }
    if (static_cast<int64_t>(hu.size()) != numel())
        throw FormatError("volume: voxel count " + std::to_string(hu.size()) +
                          " does not match dims");
}

void PreprocessConfig::validate() const {
    if (!(hu_window[0] < hu_window[1])) throw FormatError("preprocess: hu_window lo must be < hi");
    for (int a = 0; a < 3; ++a) {
        if (!(target_spacing[a] > 0)) throw FormatError("preprocess: target_spacing must be positive");
        if (target_dims[a] < 1) throw FormatError("preprocess: target_dims must be >= 1");
    }
}

Volume read_rvol(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("rvol: cannot open " + path);
    char magic[4];
    if (!read_bytes(is, magic, 4) || std::memcmp(magic, "RVOL", 4) != 0)
        throw FormatError("rvol: bad magic in " + path);
    uint16_t version = read_u16(is, "version");
    if (version != kRvolVersion)
        throw FormatError("rvol: unsupported version " + std::to_string(version));
    Volume v;
    const char* dim_names[3] = {"nx", "ny", "nz"};
    for (int a = 0; a < 3; ++a) {
        uint32_t d = read_u32(is, dim_names[a]);
        if (d == 0) throw FormatError(std::string("rvol: field ") + dim_names[a] + " must be positive");
        v.dims[a] = d;
    }
    const char* sp_names[3] = {"sx", "sy", "sz"};
    for (int a = 0; a < 3; ++a) {
        float s = read_f32(is, sp_names[a]);
        if (!(s > 0.f) || !std::isfinite(s))
            throw FormatError(std::string("rvol: field ") + sp_names[a] + " must be positive");
        v.spacing[a] = s;
    }
    const int64_t n = v.numel();
    v.hu.resize(static_cast<size_t>(n));
    std::vector<unsigned char> buf(static_cast<size_t>(n) * 2);
    if (!read_bytes(is, buf.data(), buf.size()))
        throw FormatError("rvol: truncated payload, expected " + std::to_string(n) + " voxels");
    for (int64_t i = 0; i < n; ++i)
        v.hu[static_cast<size_t>(i)] =
            static_cast<int16_t>(static_cast<uint16_t>(buf[2 * i] | (buf[2 * i + 1] << 8)));
    char extra;
    if (is.read(&extra, 1) && is.gcount() == 1)
        throw FormatError("rvol: payload longer than header declares");
    return v;
}

void write_rvol(const Volume& v, const std::string& path) {
    v.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("rvol: cannot open for write: " + path);
    os.write("RVOL", 4);
    write_u16(os, kRvolVersion);
    for (int a = 0; a < 3; ++a) write_u32(os, static_cast<uint32_t>(v.dims[a]));
    for (int a = 0; a < 3; ++a) write_f32(os, v.spacing[a]);
    std::vector<unsigned char> buf(v.hu.size() * 2);
    for (size_t i = 0; i < v.hu.size(); ++i) {
        uint16_t bits = static_cast<uint16_t>(v.hu[i]);
        buf[2 * i] = static_cast<unsigned char>(bits & 0xff);
        buf[2 * i + 1] = static_cast<unsigned char>(bits >> 8);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw FormatError("rvol: write failed: " + path);
}

Volume resample_trilinear(const Volume& v, const std::array<double, 3>& target_spacing) {
    v.validate();
    for (int a = 0; a < 3; ++a)
        if (!(target_spacing[a] > 0)) throw FormatError("resample: target spacing must be positive");

    Volume out;
    for (int a = 0; a < 3; ++a) {
        out.dims[a] = std::max<int64_t>(
            1, std::llround(static_cast<double>(v.dims[a]) * v.spacing[a] / target_spacing[a]));
        out.spacing[a] = static_cast<float>(target_spacing[a]);
    }
    out.hu.resize(static_cast<size_t>(out.numel()));

    auto sample = [&](int64_t x, int64_t y, int64_t z) -> double {
        if (x < 0 || x >= v.dims[0] || y < 0 || y >= v.dims[1] || z < 0 || z >= v.dims[2])
            return kAirHu;
        return static_cast<double>(v.at(x, y, z));
    };
    // continuous source index for output index i on one axis; snapped so that
    // an identity resample reproduces voxels exactly
    auto src_coord = [&](int64_t i, int axis) -> double {
        double u = static_cast<double>(i) * target_spacing[axis] / static_cast<double>(v.spacing[axis]);
        double r = std::round(u);
        if (std::abs(u - r) < 1e-9) u = r;
        return u;
    };

    size_t w = 0;
    for (int64_t z = 0; z < out.dims[2]; ++z) {
        double uz = src_coord(z, 2);
        int64_t z0 = static_cast<int64_t>(std::floor(uz));
        double fz = uz - static_cast<double>(z0);
        for (int64_t y = 0; y < out.dims[1]; ++y) {
            double uy = src_coord(y, 1);
            int64_t y0 = static_cast<int64_t>(std::floor(uy));
            double fy = uy - static_cast<double>(y0);
            for (int64_t x = 0; x < out.dims[0]; ++x, ++w) {
                double ux = src_coord(x, 0);
                int64_t x0 = static_cast<int64_t>(std::floor(ux));
                double fx = ux - static_cast<double>(x0);
                double c00 = sample(x0, y0, z0) * (1 - fx) + sample(x0 + 1, y0, z0) * fx;
                double c10 = sample(x0, y0 + 1, z0) * (1 - fx) + sample(x0 + 1, y0 + 1, z0) * fx;
                double c01 = sample(x0, y0, z0 + 1) * (1 - fx) + sample(x0 + 1, y0, z0 + 1) * fx;
                double c11 = sample(x0, y0 + 1, z0 + 1) * (1 - fx) + sample(x0 + 1, y0 + 1, z0 + 1) * fx;
                double c0 = c00 * (1 - fy) + c10 * fy;
                double c1 = c01 * (1 - fy) + c11 * fy;
                double val = c0 * (1 - fz) + c1 * fz;
                long r = std::lround(val);
                if (r < -32768) r = -32768;
                if (r > 32767) r = 32767;
                out.hu[w] = static_cast<int16_t>(r);
            }
        }
    }
    return out;
}

} // namespace voxlm
