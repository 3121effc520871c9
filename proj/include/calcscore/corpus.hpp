#pragma once

// On-disk phantom corpora: one CT and one label volume per subject plus a
// corpus.json manifest holding the plan and the ground-truth scores.

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "calcscore/imagegrid_io.hpp"
#include "calcscore/phantom.hpp"
#include "calcscore/pipeline.hpp"
#include "calcscore/scoring.hpp"

namespace calcscore {

inline constexpr const char* kCorpusManifest = "corpus.json";

struct CorpusRecord {
    CorpusEntry entry;
    std::string ct_file, labels_file;  // relative to the corpus directory
    std::array<double, kNumClasses> volume_mm3{};
    double cac_agatston = 0;
    RiskCategory risk = RiskCategory::I;
    int lesions = 0;
    int bridges = 0;
};

struct Corpus {
    std::uint64_t seed = 0;
    std::vector<CorpusRecord> records;
};

inline nlohmann::ordered_json to_json(const Corpus& c) {
    nlohmann::ordered_json j;
    j["format"] = "calcscore-corpus";
    j["format_version"] = 1;
    j["seed"] = c.seed;
    auto& arr = j["subjects"];
    arr = nlohmann::ordered_json::array();
    for (const auto& r : c.records) {
        nlohmann::ordered_json vol;
        for (int k = 1; k < kNumClasses; ++k) vol[std::string(class_name(k))] = r.volume_mm3[static_cast<std::size_t>(k)];
        arr.push_back({{"subject", r.entry.subject},
                       {"split", to_string(r.entry.split)},
                       {"preset", to_string(r.entry.preset)},
                       {"burden_level", r.entry.burden_level},
                       {"seed", r.entry.seed},
                       {"ct", r.ct_file},
                       {"labels", r.labels_file},
                       {"volume_mm3", vol},
                       {"cac_agatston", r.cac_agatston},
                       {"risk_category", to_string(r.risk)},
                       {"lesions", r.lesions},
                       {"bridges", r.bridges}});
    }
    return j;
}

inline Corpus corpus_from_json(const nlohmann::ordered_json& j) {
    try {
        require(j.at("format") == "calcscore-corpus", ErrorKind::schema_violation, "not a corpus manifest");
        Corpus c;
        c.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& e : j.at("subjects")) {
            CorpusRecord r;
            r.entry.subject = e.at("subject").get<std::string>();
            r.entry.split = split_from(e.at("split").get<std::string>());
            r.entry.preset = noise_preset(e.at("preset").get<std::string>());
            r.entry.burden_level = e.at("burden_level").get<int>();
            r.entry.seed = e.at("seed").get<std::uint64_t>();
            r.ct_file = e.at("ct").get<std::string>();
            r.labels_file = e.at("labels").get<std::string>();
            for (int k = 1; k < kNumClasses; ++k)
                r.volume_mm3[static_cast<std::size_t>(k)] = e.at("volume_mm3").at(std::string(class_name(k))).get<double>();
            r.cac_agatston = e.at("cac_agatston").get<double>();
            r.risk = risk_category_from(e.at("risk_category").get<std::string>());
            r.lesions = e.at("lesions").get<int>();
            r.bridges = e.at("bridges").get<int>();
            c.records.push_back(std::move(r));
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::schema_violation, std::string("corpus manifest: ") + e.what());
    }
}

/// Generates `count` phantoms planned by plan_corpus into `dir`.
inline Corpus write_corpus(const std::filesystem::path& dir, const PhantomConfig& base, int count, std::uint64_t seed,
                           const SplitFractions& f, int threads = 1) {
    std::filesystem::create_directories(dir);
    Corpus c;
    c.seed = seed;
    const auto plan = plan_corpus(count, seed, f);
    c.records.resize(plan.size());
    parallel_for(static_cast<int>(plan.size()), threads, [&](int i) {
        const auto& e = plan[static_cast<std::size_t>(i)];
        const Phantom ph = generate(config_for(base, e));
        auto& r = c.records[static_cast<std::size_t>(i)];
        r.entry = e;
        r.ct_file = e.subject + "_ct.hdr";
        r.labels_file = e.subject + "_labels.hdr";
        save_volume(dir / r.ct_file, ph.ct);
        save_labels(dir / r.labels_file, ph.labels);
        const ScoreReport s = score_scan(ph.ct, ph.labels, e.subject);
        for (int k = 1; k < kNumClasses; ++k)
            r.volume_mm3[static_cast<std::size_t>(k)] = s.per_class[static_cast<std::size_t>(k)].volume_mm3;
        r.cac_agatston = s.cac_agatston;
        r.risk = s.risk;
        r.lesions = static_cast<int>(ph.lesions.size());
        r.bridges = ph.bridges_planted;
    });
    std::ofstream out(dir / kCorpusManifest);
    require(out.good(), ErrorKind::io_error, "cannot write " + (dir / kCorpusManifest).string());
    out << to_json(c).dump(2) << "\n";
    return c;
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
    const auto p = dir / kCorpusManifest;
    require(std::filesystem::exists(p), ErrorKind::missing_input, "no " + std::string(kCorpusManifest) + " in " + dir.string());
    std::ifstream in(p);
    try {
        return corpus_from_json(nlohmann::ordered_json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::schema_violation, p.string() + ": " + e.what());
    }
}

inline std::vector<Scan> load_scans(const std::filesystem::path& dir, const Corpus& c) {
    std::vector<Scan> out;
    out.reserve(c.records.size());
    for (const auto& r : c.records)
        out.push_back({r.entry.subject, r.entry.split, load_volume(dir / r.ct_file), load_labels(dir / r.labels_file)});
    return out;
}

}  // namespace calcscore
