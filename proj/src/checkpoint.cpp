#include "checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace voxlm {

namespace {

constexpr uint16_t kVersion = 1;

template <typename T>
void write_le(std::ofstream& os, T v) {
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::ifstream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw CheckpointError("checkpoint: truncated file");
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}

void write_f32_le(std::ofstream& os, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    write_le<uint32_t>(os, bits);
}

float read_f32_le(std::ifstream& is) {
    uint32_t bits = read_le<uint32_t>(is);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

} // namespace

void Checkpoint::put(const std::string& name, Tensor<float> t) {
    if (index_.count(name)) throw CheckpointError("checkpoint: duplicate entry " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t)});
}

bool Checkpoint::has(const std::string& name) const { return index_.count(name) > 0; }

const Tensor<float>& Checkpoint::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw CheckpointError("checkpoint: missing entry " + name);
    return entries_[it->second].second;
}

void Checkpoint::put_meta(const std::string& name, double v) {
    put(name, Tensor<float>({1}, {static_cast<float>(v)}));
}

double Checkpoint::get_meta(const std::string& name) const {
    const Tensor<float>& t = get(name);
    if (t.numel() != 1) throw CheckpointError("checkpoint: " + name + " is not scalar metadata");
    return t.data[0];
}

void Checkpoint::put_meta_str(const std::string& name, const std::string& v) {
    Tensor<float> t({static_cast<int64_t>(v.size())});
    for (size_t i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(static_cast<unsigned char>(v[i]));
    put(name, std::move(t));
}

std::string Checkpoint::get_meta_str(const std::string& name) const {
    const Tensor<float>& t = get(name);
    std::string s(t.data.size(), '\0');
    for (size_t i = 0; i < t.data.size(); ++i) s[i] = static_cast<char>(static_cast<unsigned char>(t.data[i]));
    return s;
}

std::unordered_map<std::string, Tensor<float>> Checkpoint::as_table() const {
    std::unordered_map<std::string, Tensor<float>> out;
    for (auto& [n, t] : entries_) out[n] = t;
    return out;
}

void Checkpoint::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot open for write: " + path);
    os.write("VCKP", 4);
    write_le<uint16_t>(os, kVersion);
    write_le<uint32_t>(os, static_cast<uint32_t>(entries_.size()));
    for (auto& [name, t] : entries_) {
        write_le<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_le<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
        for (int64_t d : t.shape) write_le<uint64_t>(os, static_cast<uint64_t>(d));
        for (float f : t.data) write_f32_le(os, f);
    }
    if (!os) throw CheckpointError("checkpoint: write failed: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "VCKP", 4) != 0)
        throw CheckpointError("checkpoint: bad magic in " + path);
    uint16_t version = read_le<uint16_t>(is);
    if (version != kVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    uint32_t count = read_le<uint32_t>(is);
    Checkpoint ck;
    for (uint32_t e = 0; e < count; ++e) {
        uint32_t name_len = read_le<uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CheckpointError("checkpoint: truncated entry name");
        uint32_t ndim = read_le<uint32_t>(is);
        Shape shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int64_t>(read_le<uint64_t>(is));
        Tensor<float> t(shape);
        for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = read_f32_le(is);
        ck.put(name, std::move(t));
    }
    return ck;
}

} // namespace voxlm
