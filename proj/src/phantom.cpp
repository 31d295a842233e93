#include "phantom.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <atomic>
#include <thread>

namespace voxlm {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

struct PlacedLesion {
    std::array<double, 3> center_mm;
    double radius_mm;
    double hu;
};

std::string octant_name(const std::array<double, 3>& p, const std::array<double, 3>& center) {
    std::string name;
    name += (p[1] < center[1]) ? "anterior" : "posterior";
    name += (p[2] >= center[2]) ? " upper" : " lower";
    name += (p[0] < center[0]) ? " left" : " right";
    return name;
}

} // namespace

std::pair<Volume, PhantomFindings> gen_phantom(Rng& rng, const PhantomParams& params,
                                               const std::string& patient_id) {
    Volume v;
    for (int a = 0; a < 3; ++a) {
        int64_t jitter = params.dims_jitter > 0 ? rng.uniform_int(-params.dims_jitter, params.dims_jitter) : 0;
        v.dims[a] = std::max<int64_t>(8, params.base_dims[a] + jitter);
        v.spacing[a] = params.spacing[a];
    }
    const std::array<double, 3> extent{v.dims[0] * static_cast<double>(v.spacing[0]),
                                       v.dims[1] * static_cast<double>(v.spacing[1]),
                                       v.dims[2] * static_cast<double>(v.spacing[2])};
    const std::array<double, 3> center{extent[0] / 2, extent[1] / 2, extent[2] / 2};
    const std::array<double, 3> semi{params.body_fraction * extent[0] / 2,
                                     params.body_fraction * extent[1] / 2,
                                     params.body_fraction * extent[2] / 2};

    PhantomFindings findings;
    findings.patient_id = patient_id;
    std::vector<PlacedLesion> placed;

    // distinct lesion types per volume keep the qa templates unambiguous
    int n_lesions = static_cast<int>(rng.uniform_int(0, params.max_lesions));
    std::vector<std::string> types = lesion_types();
    rng.shuffle(types);
    types.resize(static_cast<size_t>(n_lesions));

    for (const std::string& type : types) {
        const double d = static_cast<double>(rng.uniform_int(params.diameter_min_mm, params.diameter_max_mm));
        const double r = d / 2.0;
        bool ok = false;
        for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
            std::array<double, 3> p;
            for (int a = 0; a < 3; ++a)
                p[a] = center[a] + (2.0 * rng.uniform() - 1.0) * semi[a];
            // conservative containment: shrink each semi-axis by the radius
            double s = 0;
            bool fits = true;
            for (int a = 0; a < 3; ++a) {
                double shrunk = semi[a] - r;
                if (shrunk <= 0) {
                    fits = false;
                    break;
                }
                double t = (p[a] - center[a]) / shrunk;
                s += t * t;
            }
            if (!fits || s > 1.0) continue;
            bool overlaps = false;
            for (const auto& other : placed) {
                double dist2 = 0;
                for (int a = 0; a < 3; ++a) {
                    double dd = p[a] - other.center_mm[a];
                    dist2 += dd * dd;
                }
                double min_dist = r + other.radius_mm + 2.0;
                if (dist2 < min_dist * min_dist) overlaps = true;
            }
            if (overlaps) continue;
            double hu = type == "nodule" ? params.nodule_hu
                        : type == "cyst" ? params.cyst_hu
                                         : params.calcification_hu;
            placed.push_back({p, r, hu});
            findings.lesions.push_back({type, d, octant_name(p, center)});
            ok = true;
        }
        // placement failure just drops this lesion; ground truth stays exact
    }

    v.hu.resize(static_cast<size_t>(v.numel()));
    size_t w = 0;
    for (int64_t z = 0; z < v.dims[2]; ++z)
        for (int64_t y = 0; y < v.dims[1]; ++y)
            for (int64_t x = 0; x < v.dims[0]; ++x, ++w) {
                // voxel center coordinates, matching the resample convention
                const std::array<double, 3> p{x * static_cast<double>(v.spacing[0]),
                                              y * static_cast<double>(v.spacing[1]),
                                              z * static_cast<double>(v.spacing[2])};
                double body = 0;
                for (int a = 0; a < 3; ++a) {
                    double t = (p[a] - center[a]) / semi[a];
                    body += t * t;
                }
                double hu = body <= 1.0 ? params.body_hu : params.air_hu;
                for (const auto& l : placed) {
                    double dist2 = 0;
                    for (int a = 0; a < 3; ++a) {
                        double dd = p[a] - l.center_mm[a];
                        dist2 += dd * dd;
                    }
                    if (dist2 <= l.radius_mm * l.radius_mm) hu = l.hu;
                }
                if (params.noise_sigma > 0) hu += rng.normal() * params.noise_sigma;
                long r = std::lround(hu);
                v.hu[w] = static_cast<int16_t>(std::clamp<long>(r, -32768, 32767));
            }
    return {std::move(v), std::move(findings)};
}

std::string render_report(const PhantomFindings& f) {
    if (f.lesions.empty()) return "no abnormality is detected .";
    std::string out;
    for (size_t i = 0; i < f.lesions.size(); ++i) {
        const Lesion& l = f.lesions[i];
        if (i) out += " ";
        out += "a " + l.type + " of diameter " + std::to_string(static_cast<long long>(std::llround(l.diameter_mm))) +
               " mm is present in the " + l.region + " region .";
    }
    return out;
}

std::vector<QaPair> gen_qa(const PhantomFindings& f) {
    std::vector<QaPair> out;
    for (const std::string& type : lesion_types()) {
        const Lesion* found = nullptr;
        for (const auto& l : f.lesions)
            if (l.type == type) found = &l;
        QaPair q;
        q.kind = "diagnosis";
        q.disease = type;
        q.present = found != nullptr;
        q.question = "does this image show signs of " + type + " ?";
        q.answer = found ? "yes , a " + type + " is present ."
                         : "no , there is no sign of " + type + " .";
        out.push_back(std::move(q));
    }
    for (const auto& l : f.lesions) {
        QaPair size;
        size.kind = "size";
        size.question = "what is the diameter of the " + l.type + " ?";
        size.answer = "the " + l.type + " measures " +
                      std::to_string(static_cast<long long>(std::llround(l.diameter_mm))) + " mm .";
        out.push_back(std::move(size));
        QaPair loc;
        loc.kind = "location";
        loc.question = "where is the " + l.type + " located ?";
        loc.answer = "the " + l.type + " is in the " + l.region + " region .";
        out.push_back(std::move(loc));
    }
    return out;
}

std::pair<std::vector<InstructionSample>, std::vector<InstructionSample>> split_by_patient(
    const std::vector<InstructionSample>& samples, double test_fraction, uint64_t seed) {
    std::vector<std::string> patients;
    std::set<std::string> seen;
    for (const auto& s : samples) {
        if (s.patient_id.empty()) throw FormatError("split: sample " + s.id + " has no patient_id");
        if (seen.insert(s.patient_id).second) patients.push_back(s.patient_id);
    }
    if (patients.size() < 2) throw FormatError("split: need at least 2 patients");
    Rng rng = Rng(seed).derive(0x5b117);
    rng.shuffle(patients);
    const int64_t n_test = std::llround(test_fraction * static_cast<double>(patients.size()));
    std::set<std::string> test_set(patients.begin(), patients.begin() + n_test);
    std::pair<std::vector<InstructionSample>, std::vector<InstructionSample>> out;
    for (const auto& s : samples)
        (test_set.count(s.patient_id) ? out.second : out.first).push_back(s);
    return out;
}

namespace {

ordered_json sample_to_json(const InstructionSample& s) {
    ordered_json j;
    j["id"] = s.id;
    j["patient_id"] = s.patient_id;
    j["volume_path"] = s.volume_path;
    j["task"] = s.task;
    j["question"] = s.question;
    j["answer"] = s.answer;
    if (s.label) j["label"] = {{"disease", s.label->first}, {"present", s.label->second}};
    return j;
}

InstructionSample sample_from_json(const ordered_json& j, size_t line_no) {
    InstructionSample s;
    for (const char* field : {"id", "patient_id", "volume_path", "task", "question", "answer"})
        if (!j.contains(field))
            throw FormatError("jsonl: line " + std::to_string(line_no) + " is missing field '" +
                              field + "'");
    s.id = j["id"].get<std::string>();
    s.patient_id = j["patient_id"].get<std::string>();
    s.volume_path = j["volume_path"].get<std::string>();
    s.task = j["task"].get<std::string>();
    s.question = j["question"].get<std::string>();
    s.answer = j["answer"].get<std::string>();
    if (s.task == "diagnosis") {
        if (!j.contains("label"))
            throw FormatError("jsonl: line " + std::to_string(line_no) +
                              " is a diagnosis sample without a label");
        s.label = {j["label"]["disease"].get<std::string>(), j["label"]["present"].get<bool>()};
    } else if (j.contains("label")) {
        s.label = {j["label"]["disease"].get<std::string>(), j["label"]["present"].get<bool>()};
    }
    return s;
}

} // namespace

void write_jsonl(const std::vector<InstructionSample>& samples, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("jsonl: cannot open for write: " + path);
    for (const auto& s : samples) os << sample_to_json(s).dump() << '\n';
    if (!os) throw FormatError("jsonl: write failed: " + path);
}

std::vector<InstructionSample> read_jsonl(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("jsonl: cannot open: " + path);
    std::vector<InstructionSample> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("jsonl: line " + std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(sample_from_json(j, line_no));
    }
    return out;
}

DatasetSummary write_phantom_dataset(const std::string& out_dir, int64_t n_volumes, uint64_t seed,
                                     const PhantomParams& params, double test_fraction,
                                     int threads, bool force) {
    if (n_volumes < 2) throw FormatError("gen-data: need at least 2 volumes, got " + std::to_string(n_volumes));
    fs::path root(out_dir);
    if (fs::exists(root) && !fs::is_empty(root)) {
        if (!force) throw FormatError("gen-data: output dir " + out_dir + " is not empty (use --force)");
        fs::remove_all(root);
    }
    fs::create_directories(root / "volumes");

    Rng master(seed);
    std::vector<std::vector<InstructionSample>> per_volume(static_cast<size_t>(n_volumes));

    auto make_one = [&](int64_t i) {
        char name[32];
        std::snprintf(name, sizeof(name), "p%05lld", static_cast<long long>(i));
        std::string patient = name;
        std::string rel = "volumes/" + patient + ".rvol";
        Rng vol_rng = master.derive(static_cast<uint64_t>(i));
        auto [vol, findings] = gen_phantom(vol_rng, params, patient);
        write_rvol(vol, (root / rel).string());

        std::vector<InstructionSample>& samples = per_volume[static_cast<size_t>(i)];
        InstructionSample rep;
        rep.id = patient + "-report";
        rep.patient_id = patient;
        rep.volume_path = rel;
        rep.task = "report";
        rep.question = "";
        rep.answer = render_report(findings);
        samples.push_back(std::move(rep));
        int qa_idx = 0;
        for (const QaPair& qa : gen_qa(findings)) {
            InstructionSample s;
            s.id = patient + "-" + qa.kind + std::to_string(qa_idx++);
            s.patient_id = patient;
            s.volume_path = rel;
            s.task = qa.kind == "diagnosis" ? "diagnosis" : "vqa";
            s.question = qa.question;
            s.answer = qa.answer;
            if (qa.disease) s.label = {*qa.disease, qa.present};
            samples.push_back(std::move(s));
        }
    };

    if (threads <= 1) {
        for (int64_t i = 0; i < n_volumes; ++i) make_one(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<int64_t> next{0};
        for (int t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (int64_t i = next.fetch_add(1); i < n_volumes; i = next.fetch_add(1)) make_one(i);
            });
        for (auto& th : pool) th.join();
    }

    std::vector<InstructionSample> all;
    for (auto& group : per_volume)
        for (auto& s : group) all.push_back(std::move(s));

    auto [train, test] = split_by_patient(all, test_fraction, seed);
    write_jsonl(train, (root / "train.jsonl").string());
    write_jsonl(test, (root / "test.jsonl").string());

    DatasetSummary sum;
    sum.volumes = n_volumes;
    sum.train_samples = static_cast<int64_t>(train.size());
    sum.test_samples = static_cast<int64_t>(test.size());
    std::set<std::string> tp, sp;
    for (auto& s : train) tp.insert(s.patient_id);
    for (auto& s : test) sp.insert(s.patient_id);
    sum.train_patients = static_cast<int64_t>(tp.size());
    sum.test_patients = static_cast<int64_t>(sp.size());
    sum.seed = seed;

    ordered_json manifest;
    manifest["seed"] = seed;
    manifest["generator_version"] = 1;
    manifest["counts"] = {{"volumes", sum.volumes},
                          {"train_samples", sum.train_samples},
                          {"test_samples", sum.test_samples},
                          {"train_patients", sum.train_patients},
                          {"test_patients", sum.test_patients}};
    manifest["dims"] = {params.base_dims[0], params.base_dims[1], params.base_dims[2]};
    manifest["spacing"] = {params.spacing[0], params.spacing[1], params.spacing[2]};
    std::ofstream os((root / "manifest.json").string(), std::ios::trunc);
    os << manifest.dump(2) << '\n';
    if (!os) throw FormatError("gen-data: cannot write manifest");
    return sum;
}

} // namespace voxlm
