#include "vocab.hpp"

#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>

#include "text.hpp"

namespace voxlm {

uint32_t fnv1a32(const std::string& data) {
    uint32_t h = 2166136261u;
    for (unsigned char c : data) {
        h ^= c;
        h *= 16777619u;
    }
    return h;
}

uint64_t fnv1a64(const std::string& data) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void Vocab::rebuild_index() {
    index_.clear();
    for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int64_t>(i);
}

Vocab Vocab::build(const std::vector<std::string>& corpus, int64_t min_count) {
    if (corpus.empty()) throw std::invalid_argument("vocab: empty corpus");
    std::map<std::string, int64_t> counts;
    for (const auto& line : corpus)
        for (const auto& w : tokenize_words(line)) ++counts[w];
    std::vector<std::pair<std::string, int64_t>> items(counts.begin(), counts.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocab v;
    v.words_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (auto& [w, n] : items)
        if (n >= min_count) v.words_.push_back(w);
    v.rebuild_index();
    return v;
}

int64_t Vocab::id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::word(int64_t id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("vocab: id " + std::to_string(id));
    return words_[static_cast<size_t>(id)];
}

std::vector<int64_t> Vocab::encode(const std::string& text, bool add_bos) const {
    std::vector<int64_t> out;
    if (add_bos) out.push_back(kBos);
    for (const auto& w : tokenize_words(text)) out.push_back(id(w));
    return out;
}

std::string Vocab::decode(const std::vector<int64_t>& ids) const {
    std::string out;
    for (int64_t i : ids) {
        if (i == kPad || i == kBos || i == kEos) continue;
        if (!out.empty()) out.push_back(' ');
        out += word(i);
    }
    return out;
}

std::string Vocab::serialize() const {
    std::ostringstream os;
    for (size_t i = 4; i < words_.size(); ++i) os << words_[i] << '\n';
    return os.str();
}

Vocab Vocab::deserialize(const std::string& blob) {
    Vocab v;
    v.words_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
    std::istringstream is(blob);
    std::string line;
    while (std::getline(is, line))
        if (!line.empty()) v.words_.push_back(line);
    v.rebuild_index();
    return v;
}

uint32_t Vocab::fingerprint() const { return fnv1a32(serialize()); }

} // namespace voxlm
