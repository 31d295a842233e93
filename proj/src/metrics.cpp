#include "metrics.hpp"

#include <cmath>
#include <map>
#include <stdexcept>

#include "text.hpp"

namespace voxlm {

namespace {

std::map<std::string, int64_t> word_counts(const std::vector<std::string>& toks) {
    std::map<std::string, int64_t> c;
    for (const auto& t : toks) ++c[t];
    return c;
}

int64_t clipped_overlap(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    auto cc = word_counts(cand);
    auto rc = word_counts(ref);
    int64_t m = 0;
    for (auto& [w, n] : cc) {
        auto it = rc.find(w);
        if (it != rc.end()) m += std::min(n, it->second);
    }
    return m;
}

// Minimum chunk count over all maximum alignments, by DFS over candidate
// positions with pruning on the current chunk count. Falls back to the
// greedy leftmost alignment if the search space explodes (only reachable
// with pathological duplicate structure; templated report text never gets
// close).
struct ChunkSearch {
    const std::vector<std::string>& cand;
    const std::vector<std::string>& ref;
    std::map<std::string, int64_t> needed;      // matches still required per word
    std::map<std::string, int64_t> cand_left;   // candidate occurrences at >= i
    std::vector<bool> ref_used;
    int64_t best = INT64_MAX;
    int64_t nodes = 0;
    static constexpr int64_t kNodeCap = 500000;
    bool capped = false;

    ChunkSearch(const std::vector<std::string>& c, const std::vector<std::string>& r)
        : cand(c), ref(r), ref_used(r.size(), false) {
        auto cc = word_counts(c);
        auto rc = word_counts(r);
        for (auto& [w, n] : cc) {
            auto it = rc.find(w);
            if (it != rc.end()) needed[w] = std::min(n, it->second);
        }
        cand_left = cc;
    }

    // prev_ref: ref index matched at candidate position i-1, or -2 when i-1
    // was unmatched (so the next match always opens a chunk)
    void dfs(size_t i, int64_t prev_ref, int64_t chunks) {
        if (chunks >= best) return;
        if (++nodes > kNodeCap) {
            capped = true;
            return;
        }
        if (i == cand.size()) {
            best = chunks;
            return;
        }
        const std::string& w = cand[i];
        auto need_it = needed.find(w);
        int64_t need = (need_it == needed.end()) ? 0 : need_it->second;
        int64_t left = cand_left[w];
        --cand_left[w];
        if (need > 0) {
            for (size_t j = 0; j < ref.size(); ++j) {
                if (ref_used[j] || ref[j] != w) continue;
                ref_used[j] = true;
                --need_it->second;
                int64_t add = (prev_ref >= 0 && static_cast<int64_t>(j) == prev_ref + 1) ? 0 : 1;
                dfs(i + 1, static_cast<int64_t>(j), chunks + add);
                ++need_it->second;
                ref_used[j] = false;
                if (capped) break;
            }
        }
        // skipping is allowed only when later occurrences can still satisfy
        // the maximum-match requirement
        if (!capped && left - 1 >= need) dfs(i + 1, -2, chunks);
        ++cand_left[w];
    }

    int64_t min_chunks() {
        dfs(0, -2, 0);
        if (!capped && best != INT64_MAX) return best;
        // greedy leftmost fallback: valid alignment, possibly more chunks
        std::fill(ref_used.begin(), ref_used.end(), false);
        auto need = needed;
        int64_t chunks = 0, prev = -2;
        for (size_t i = 0; i < cand.size(); ++i) {
            auto it = need.find(cand[i]);
            if (it == need.end() || it->second == 0) {
                prev = -2;
                continue;
            }
            for (size_t j = 0; j < ref.size(); ++j)
                if (!ref_used[j] && ref[j] == cand[i]) {
                    ref_used[j] = true;
                    --it->second;
                    chunks += (prev >= 0 && static_cast<int64_t>(j) == prev + 1) ? 0 : 1;
                    prev = static_cast<int64_t>(j);
                    break;
                }
        }
        return chunks;
    }
};

} // namespace

double bleu1(const std::string& candidate, const std::string& reference) {
    auto cand = tokenize_words(candidate);
    auto ref = tokenize_words(reference);
    if (cand.empty()) return 0.0;
    int64_t m = clipped_overlap(cand, ref);
    double p1 = static_cast<double>(m) / static_cast<double>(cand.size());
    double bp = cand.size() >= ref.size()
                    ? 1.0
                    : std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(cand.size()));
    return p1 * bp;
}

double rouge1(const std::string& candidate, const std::string& reference) {
    auto cand = tokenize_words(candidate);
    auto ref = tokenize_words(reference);
    if (cand.empty() || ref.empty()) return 0.0;
    int64_t m = clipped_overlap(cand, ref);
    double p = static_cast<double>(m) / static_cast<double>(cand.size());
    double r = static_cast<double>(m) / static_cast<double>(ref.size());
    if (p + r == 0.0) return 0.0;
    return 2.0 * p * r / (p + r);
}

double meteor_exact(const std::string& candidate, const std::string& reference) {
    auto cand = tokenize_words(candidate);
    auto ref = tokenize_words(reference);
    if (cand.empty() || ref.empty()) return 0.0;
    int64_t m = clipped_overlap(cand, ref);
    if (m == 0) return 0.0;
    ChunkSearch search(cand, ref);
    int64_t chunks = search.min_chunks();
    double p = static_cast<double>(m) / static_cast<double>(cand.size());
    double r = static_cast<double>(m) / static_cast<double>(ref.size());
    double f_mean = 10.0 * p * r / (r + 9.0 * p);
    double frag = static_cast<double>(chunks) / static_cast<double>(m);
    double penalty = 0.5 * frag * frag * frag;
    return f_mean * (1.0 - penalty);
}

double token_f1(const std::string& candidate, const std::string& reference) {
    return rouge1(candidate, reference);
}

Polarity parse_diagnosis_answer(const std::string& answer) {
    auto toks = tokenize_words(answer);
    if (toks.empty()) return Polarity::Unknown;
    if (toks[0] == "yes") return Polarity::Positive;
    if (toks[0] == "no") return Polarity::Negative;
    return Polarity::Unknown;
}

ClassificationMetrics classification_metrics(const std::vector<Polarity>& predictions,
                                             const std::vector<bool>& labels) {
    if (predictions.size() != labels.size())
        throw std::invalid_argument("classification_metrics: got " +
                                    std::to_string(predictions.size()) + " predictions for " +
                                    std::to_string(labels.size()) + " labels");
    ClassificationMetrics out;
    auto& c = out.counts;
    for (size_t i = 0; i < predictions.size(); ++i) {
        bool truth = labels[i];
        Polarity p = predictions[i];
        bool predicted_positive =
            (p == Polarity::Positive) || (p == Polarity::Unknown && !truth); // unknown scores wrong
        if (predicted_positive && truth)
            ++c.tp;
        else if (predicted_positive && !truth)
            ++c.fp;
        else if (!predicted_positive && truth)
            ++c.fn;
        else
            ++c.tn;
    }
    auto ratio = [](int64_t num, int64_t den) {
        return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
    };
    out.precision = ratio(c.tp, c.tp + c.fp);
    out.recall = ratio(c.tp, c.tp + c.fn);
    double specificity = ratio(c.tn, c.tn + c.fp);
    out.bacc = 0.5 * (out.recall + specificity);
    out.f1 = (out.precision + out.recall > 0.0)
                 ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
                 : 0.0;
    return out;
}

} // namespace voxlm
