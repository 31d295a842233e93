#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "tensor.hpp"

namespace voxlm {

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// VCKP container: magic "VCKP" | version u16 LE | entry count u32 LE |
// per entry: name (u32 length + bytes) | ndim u32 | dims u64[] | f32 payload LE.
// Entries are written in insertion order, so identical contents produce
// byte-identical files.
class Checkpoint {
public:
    void put(const std::string& name, Tensor<float> t);
    bool has(const std::string& name) const;
    const Tensor<float>& get(const std::string& name) const;

    // scalar metadata stored as shape-(1) entries
    void put_meta(const std::string& name, double v);
    double get_meta(const std::string& name) const;

    // strings stored as one byte per element, widened to f32
    void put_meta_str(const std::string& name, const std::string& v);
    std::string get_meta_str(const std::string& name) const;

    const std::vector<std::pair<std::string, Tensor<float>>>& entries() const { return entries_; }
    std::unordered_map<std::string, Tensor<float>> as_table() const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

private:
    std::vector<std::pair<std::string, Tensor<float>>> entries_;
    std::unordered_map<std::string, size_t> index_;
};

} // namespace voxlm
