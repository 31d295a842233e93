#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace voxlm {

// Text-overlap metrics over lowercase whitespace tokens, single reference.
// All scores live in [0, 1]; reports multiply by 100 to match the usual
// table convention.

// clipped unigram precision times brevity penalty min(1, e^(1 - r/c))
double bleu1(const std::string& candidate, const std::string& reference);

// unigram F-measure from clipped overlap
double rouge1(const std::string& candidate, const std::string& reference);

// Exact-match unigram variant: alignment maximizes matches, then minimizes
// chunks; F_mean = 10PR / (R + 9P), penalty = 0.5 * (chunks/m)^3. No
// stemming or synonym stage, hence the distinct name.
double meteor_exact(const std::string& candidate, const std::string& reference);

// bag-of-tokens F1; numerically identical to rouge1 but named for what it
// is, since it stands in for an embedding-based score
double token_f1(const std::string& candidate, const std::string& reference);

enum class Polarity { Positive, Negative, Unknown };

// leading token "yes" -> positive, "no" -> negative, anything else unknown
Polarity parse_diagnosis_answer(const std::string& answer);

struct ConfusionCounts {
    int64_t tp = 0, fp = 0, tn = 0, fn = 0;
    int64_t total() const { return tp + fp + tn + fn; }
};

struct ClassificationMetrics {
    double bacc = 0, precision = 0, recall = 0, f1 = 0;
    ConfusionCounts counts;
};

// Pooled binary counts; unknown predictions score against the true class.
// Zero-denominator components evaluate to 0.
ClassificationMetrics classification_metrics(const std::vector<Polarity>& predictions,
                                             const std::vector<bool>& labels);

} // namespace voxlm
