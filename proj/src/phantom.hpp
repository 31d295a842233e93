#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rng.hpp"
#include "volume.hpp"

namespace voxlm {

struct Lesion {
    std::string type; // nodule | cyst | calcification
    double diameter_mm = 0;
    std::string region; // octant of the body center, e.g. "anterior upper left"
};

struct PhantomFindings {
    std::string patient_id;
    std::vector<Lesion> lesions;
};

inline const std::vector<std::string>& lesion_types() {
    static const std::vector<std::string> kTypes{"nodule", "cyst", "calcification"};
    return kTypes;
}

struct PhantomParams {
    std::array<int64_t, 3> base_dims{48, 48, 24};
    std::array<float, 3> spacing{2.f, 2.f, 4.f};
    int64_t dims_jitter = 4;    // each axis varies by +-jitter voxels per volume
    double body_fraction = 0.7; // ellipsoid axis extent relative to the volume
    double noise_sigma = 20.0;  // additive gaussian HU noise
    int64_t diameter_min_mm = 8;
    int64_t diameter_max_mm = 20;
    int max_lesions = 3;

    // tissue values in HU
    double air_hu = -1000, body_hu = 40, nodule_hu = 80, cyst_hu = -20, calcification_hu = 800;
};

// Deterministic synthetic CT: air background, soft-tissue body ellipsoid,
// up to max_lesions spheres of distinct types placed fully inside the body
// without mutual overlap, plus gaussian noise. Ground truth is exact.
std::pair<Volume, PhantomFindings> gen_phantom(Rng& rng, const PhantomParams& params,
                                               const std::string& patient_id);

// "no abnormality is detected ." or one templated sentence per lesion
std::string render_report(const PhantomFindings& f);

struct QaPair {
    std::string question, answer;
    std::string kind;                    // diagnosis | size | location
    std::optional<std::string> disease;  // set for diagnosis questions
    bool present = false;                // diagnosis ground truth
};

// three diagnosis questions (one per lesion type) plus size and location
// questions for each present lesion
std::vector<QaPair> gen_qa(const PhantomFindings& f);

struct InstructionSample {
    std::string id;
    std::string patient_id;
    std::string volume_path;
    std::string task; // report | vqa | diagnosis
    std::string question;
    std::string answer;
    std::optional<std::pair<std::string, bool>> label; // {disease, present} for diagnosis
};

// patient-wise split; test patient count = round(fraction * patients)
std::pair<std::vector<InstructionSample>, std::vector<InstructionSample>> split_by_patient(
    const std::vector<InstructionSample>& samples, double test_fraction, uint64_t seed);

void write_jsonl(const std::vector<InstructionSample>& samples, const std::string& path);
std::vector<InstructionSample> read_jsonl(const std::string& path);

struct DatasetSummary {
    int64_t volumes = 0;
    int64_t train_samples = 0;
    int64_t test_samples = 0;
    int64_t train_patients = 0;
    int64_t test_patients = 0;
    uint64_t seed = 0;
};

// Writes volumes/*.rvol, train.jsonl, test.jsonl and manifest.json into
// out_dir. Volume generation is order-independent: volume i uses the rng
// stream derived from (seed, i), so any thread count gives identical bytes.
DatasetSummary write_phantom_dataset(const std::string& out_dir, int64_t n_volumes, uint64_t seed,
                                     const PhantomParams& params, double test_fraction,
                                     int threads, bool force);

} // namespace voxlm
