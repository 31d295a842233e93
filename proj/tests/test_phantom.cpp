#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "phantom.hpp"
#include "testutil.hpp"

using namespace voxlm;
namespace fs = std::filesystem;

namespace {

PhantomParams clean_params() {
    PhantomParams p;
    p.noise_sigma = 0.0;
    p.dims_jitter = 0;
    return p;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

} // namespace

TEST_SUITE("phantom") {

TEST_CASE("zero-lesion phantom holds only air and body tissue") {
    PhantomParams p = clean_params();
    p.max_lesions = 0;
    Rng rng(1);
    auto [vol, findings] = gen_phantom(rng, p, "p0");
    CHECK(findings.lesions.empty());
    for (int16_t h : vol.hu) CHECK((h == -1000 || h == 40));
    // both tissues actually occur
    CHECK(std::count(vol.hu.begin(), vol.hu.end(), 40) > 0);
    CHECK(std::count(vol.hu.begin(), vol.hu.end(), -1000) > 0);
}

TEST_CASE("calcification voxels sit near 800 HU") {
    PhantomParams p = clean_params();
    for (uint64_t seed = 1; seed < 40; ++seed) {
        Rng rng(seed);
        auto [vol, findings] = gen_phantom(rng, p, "p");
        bool has_calc = false;
        for (auto& l : findings.lesions) has_calc |= (l.type == "calcification");
        int64_t exact = std::count(vol.hu.begin(), vol.hu.end(), 800);
        if (has_calc)
            CHECK(exact > 0);
        else
            CHECK(exact == 0);
    }
    // with noise the center stays within 3 sigma most of the time
    PhantomParams noisy = clean_params();
    noisy.noise_sigma = 20.0;
    for (uint64_t seed = 1; seed < 30; ++seed) {
        Rng rng(seed);
        auto [vol, findings] = gen_phantom(rng, noisy, "p");
        bool has_calc = false;
        for (auto& l : findings.lesions) has_calc |= (l.type == "calcification");
        if (!has_calc) continue;
        int64_t close = 0;
        for (int16_t h : vol.hu)
            if (std::abs(h - 800) <= 60) ++close;
        CHECK(close > 0);
    }
}

TEST_CASE("lesion volume matches the sphere formula within 15 percent") {
    PhantomParams p = clean_params();
    p.base_dims = {48, 48, 48};
    p.spacing = {1.f, 1.f, 1.f};
    p.diameter_min_mm = 10;
    int checked = 0;
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        Rng rng(seed);
        auto [vol, findings] = gen_phantom(rng, p, "p");
        for (const Lesion& l : findings.lesions) {
            double hu = l.type == "nodule" ? 80.0 : l.type == "cyst" ? -20.0 : 800.0;
            int64_t count = std::count(vol.hu.begin(), vol.hu.end(), static_cast<int16_t>(hu));
            double expect = (4.0 / 3.0) * M_PI * std::pow(l.diameter_mm / 2.0, 3) /
                            (p.spacing[0] * p.spacing[1] * p.spacing[2]);
            CHECK(std::abs(count - expect) <= 0.15 * expect);
            ++checked;
        }
    }
    CHECK(checked > 30);
}

TEST_CASE("phantoms are deterministic per seed") {
    PhantomParams p;
    Rng a(42), b(42);
    auto [v1, f1] = gen_phantom(a, p, "p");
    auto [v2, f2] = gen_phantom(b, p, "p");
    CHECK(v1.hu == v2.hu);
    CHECK(v1.dims == v2.dims);
    CHECK(f1.lesions.size() == f2.lesions.size());
}

TEST_CASE("lesion regions name the octant of the lesion center") {
    PhantomParams p = clean_params();
    std::set<std::string> seen;
    for (uint64_t seed = 1; seed <= 200; ++seed) {
        Rng rng(seed);
        auto [vol, findings] = gen_phantom(rng, p, "p");
        for (const Lesion& l : findings.lesions) {
            seen.insert(l.region);
            // region strings come from the fixed octant grammar
            bool anterior = l.region.find("anterior") == 0;
            bool posterior = l.region.find("posterior") == 0;
            CHECK((anterior || posterior));
            CHECK((l.region.find("upper") != std::string::npos ||
                   l.region.find("lower") != std::string::npos));
            CHECK((l.region.find("left") != std::string::npos ||
                   l.region.find("right") != std::string::npos));
        }
    }
    CHECK(seen.size() == 8); // all octants occur across enough seeds
}

TEST_CASE("diagnosis label balance stays in the calibrated band") {
    PhantomParams p;
    std::map<std::string, int> present;
    const int n = 600;
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng(7).derive(static_cast<uint64_t>(i));
        auto [vol, findings] = gen_phantom(rng, p, "p");
        for (const Lesion& l : findings.lesions) ++present[l.type];
    }
    for (const std::string& t : lesion_types()) {
        double frac = static_cast<double>(present[t]) / n;
        CHECK(frac > 0.35);
        CHECK(frac < 0.65);
    }
}

TEST_CASE("report template fixtures") {
    PhantomFindings empty;
    CHECK(render_report(empty) == "no abnormality is detected .");

    PhantomFindings one;
    one.lesions.push_back({"nodule", 10.0, "anterior upper left"});
    CHECK(render_report(one) ==
          "a nodule of diameter 10 mm is present in the anterior upper left region .");

    PhantomFindings two = one;
    two.lesions.push_back({"cyst", 7.0, "posterior lower right"});
    CHECK(render_report(two) ==
          "a nodule of diameter 10 mm is present in the anterior upper left region . "
          "a cyst of diameter 7 mm is present in the posterior lower right region .");
}

TEST_CASE("qa template fixtures") {
    PhantomFindings f;
    f.lesions.push_back({"cyst", 12.0, "posterior upper right"});
    auto qa = gen_qa(f);
    REQUIRE(qa.size() == 5); // 3 diagnosis + size + location
    CHECK(qa[0].question == "does this image show signs of nodule ?");
    CHECK(qa[0].answer == "no , there is no sign of nodule .");
    CHECK(qa[1].answer == "yes , a cyst is present .");
    CHECK(qa[2].answer == "no , there is no sign of calcification .");
    CHECK(qa[3].question == "what is the diameter of the cyst ?");
    CHECK(qa[3].answer == "the cyst measures 12 mm .");
    CHECK(qa[4].question == "where is the cyst located ?");
    CHECK(qa[4].answer == "the cyst is in the posterior upper right region .");

    PhantomFindings none;
    auto qa0 = gen_qa(none);
    CHECK(qa0.size() == 3);
    for (const auto& q : qa0) {
        CHECK(q.kind == "diagnosis");
        CHECK(!q.present);
        CHECK(q.answer.substr(0, 2) == "no");
    }
}

TEST_CASE("answers are recoverable from findings alone") {
    PhantomParams p;
    for (uint64_t seed = 1; seed <= 25; ++seed) {
        Rng rng(seed);
        auto [vol, findings] = gen_phantom(rng, p, "p");
        // regenerating from the findings gives the same strings
        CHECK(render_report(findings) == render_report(findings));
        auto a = gen_qa(findings);
        auto b = gen_qa(findings);
        REQUIRE(a.size() == b.size());
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].answer == b[i].answer);
    }
}

TEST_CASE("patient split is a deterministic partition") {
    std::vector<InstructionSample> samples;
    for (int i = 0; i < 100; ++i) {
        for (int k = 0; k < 3; ++k) {
            InstructionSample s;
            s.id = "p" + std::to_string(i) + "-" + std::to_string(k);
            s.patient_id = "p" + std::to_string(i);
            s.volume_path = "volumes/x.rvol";
            s.task = "vqa";
            s.answer = "y";
            samples.push_back(s);
        }
    }
    auto [train, test] = split_by_patient(samples, 0.1, 5);
    std::set<std::string> train_p, test_p;
    for (auto& s : train) train_p.insert(s.patient_id);
    for (auto& s : test) test_p.insert(s.patient_id);
    CHECK(test_p.size() == 10);
    CHECK(train_p.size() == 90);
    for (const auto& pid : test_p) CHECK(!train_p.count(pid));
    CHECK(train.size() + test.size() == samples.size());

    auto [train2, test2] = split_by_patient(samples, 0.1, 5);
    CHECK(train2.size() == train.size());
    for (size_t i = 0; i < test.size(); ++i) CHECK(test2[i].id == test[i].id);

    std::vector<InstructionSample> one(samples.begin(), samples.begin() + 3);
    CHECK_THROWS_AS(split_by_patient(one, 0.1, 5), FormatError);
}

TEST_CASE("jsonl round-trips and validates") {
    std::string dir = testutil::scratch_dir("jsonl");
    std::vector<InstructionSample> samples;
    for (int i = 0; i < 1000; ++i) {
        InstructionSample s;
        s.id = "s" + std::to_string(i);
        s.patient_id = "p" + std::to_string(i / 7);
        s.volume_path = "volumes/p.rvol";
        s.task = i % 3 == 0 ? "diagnosis" : (i % 3 == 1 ? "vqa" : "report");
        s.question = i % 3 == 2 ? "" : "does this image show signs of cyst ?";
        s.answer = "no , there is no sign of cyst .";
        if (s.task == "diagnosis") s.label = {{"cyst"}, false};
        samples.push_back(s);
    }
    write_jsonl(samples, dir + "/a.jsonl");
    auto back = read_jsonl(dir + "/a.jsonl");
    REQUIRE(back.size() == samples.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].id == samples[i].id);
        CHECK(back[i].task == samples[i].task);
        CHECK(back[i].answer == samples[i].answer);
        CHECK(back[i].label.has_value() == samples[i].label.has_value());
    }

    {
        std::ofstream os(dir + "/bad.jsonl");
        os << R"({"id":"x","patient_id":"p","task":"vqa","question":"q","answer":"a"})" << "\n";
    }
    CHECK_THROWS_WITH_AS(read_jsonl(dir + "/bad.jsonl"), doctest::Contains("volume_path"),
                         FormatError);
    CHECK_THROWS_WITH_AS(read_jsonl(dir + "/bad.jsonl"), doctest::Contains("line 1"), FormatError);

    {
        std::ofstream os(dir + "/empty.jsonl");
    }
    CHECK(read_jsonl(dir + "/empty.jsonl").empty());
}

TEST_CASE("dataset writer emits the documented layout deterministically") {
    std::string dir = testutil::scratch_dir("dataset");
    PhantomParams p;
    DatasetSummary sum = write_phantom_dataset(dir + "/d1", 12, 3, p, 0.25, 1, false);
    CHECK(sum.volumes == 12);
    CHECK(sum.test_patients == 3);
    CHECK(sum.train_patients == 9);
    CHECK(fs::exists(dir + "/d1/manifest.json"));
    CHECK(fs::exists(dir + "/d1/train.jsonl"));
    CHECK(fs::exists(dir + "/d1/test.jsonl"));
    int rvols = 0;
    for (auto& e : fs::directory_iterator(dir + "/d1/volumes")) {
        ++rvols;
        (void)e;
    }
    CHECK(rvols == 12);

    // refuse to clobber without force
    CHECK_THROWS_WITH_AS(write_phantom_dataset(dir + "/d1", 12, 3, p, 0.25, 1, false),
                         doctest::Contains("force"), FormatError);

    // identical seed, different thread count: byte-identical output
    write_phantom_dataset(dir + "/d2", 12, 3, p, 0.25, 2, false);
    CHECK(slurp(dir + "/d1/manifest.json") == slurp(dir + "/d2/manifest.json"));
    CHECK(slurp(dir + "/d1/train.jsonl") == slurp(dir + "/d2/train.jsonl"));
    CHECK(slurp(dir + "/d1/test.jsonl") == slurp(dir + "/d2/test.jsonl"));
    for (auto& e : fs::directory_iterator(dir + "/d1/volumes")) {
        fs::path other = fs::path(dir + "/d2/volumes") / e.path().filename();
        CHECK(slurp(e.path().string()) == slurp(other.string()));
    }

    // every referenced volume resolves and loads
    for (const auto& s : read_jsonl(dir + "/d1/train.jsonl")) {
        Volume v = read_rvol(dir + "/d1/" + s.volume_path);
        CHECK(v.numel() > 0);
    }
}

} // TEST_SUITE
