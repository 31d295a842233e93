#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace voxlm {

// Word-level vocabulary over lowercase whitespace tokens. Ids are dense:
// specials 0..3, then corpus words ordered by frequency (descending) with
// lexicographic tie-break, so identical corpora give identical tables.
class Vocab {
public:
    static constexpr int64_t kPad = 0;
    static constexpr int64_t kBos = 1;
    static constexpr int64_t kEos = 2;
    static constexpr int64_t kUnk = 3;

    static Vocab build(const std::vector<std::string>& corpus, int64_t min_count = 1);

    int64_t size() const { return static_cast<int64_t>(words_.size()); }
    int64_t id(const std::string& word) const;
    const std::string& word(int64_t id) const;

    // out-of-vocab words encode as <unk>; optionally prepends <bos>
    std::vector<int64_t> encode(const std::string& text, bool add_bos = false) const;
    // inverse for in-vocab text; specials are skipped
    std::string decode(const std::vector<int64_t>& ids) const;

    uint32_t fingerprint() const; // FNV-1a over the serialized word list
    std::string serialize() const;
    static Vocab deserialize(const std::string& blob);

private:
    std::vector<std::string> words_;                    // index = id
    std::unordered_map<std::string, int64_t> index_;
    void rebuild_index();
};

uint32_t fnv1a32(const std::string& data);
uint64_t fnv1a64(const std::string& data);

} // namespace voxlm
