#pragma once

// Command-line front end: phantom, train, score, eval, rf and kappa. Every
// command writes <out>/<command>.manifest.json next to its outputs.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "calcscore/config.hpp"
#include "calcscore/corpus.hpp"
#include "calcscore/evaluation.hpp"
#include "calcscore/imagegrid_io.hpp"
#include "calcscore/nn/receptive_field.hpp"
#include "calcscore/nn/serialize.hpp"
#include "calcscore/pipeline.hpp"
#include "calcscore/scoring.hpp"

namespace calcscore::cli {

namespace fs = std::filesystem;

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kUsage = 2,
    kMissingInput = 3,
    kFingerprintMismatch = 4,
    kFormat = 5,
    kDomain = 6,
};

inline int exit_code(ErrorKind k) {
    switch (k) {
    case ErrorKind::invalid_argument:
    case ErrorKind::schema_violation: return kUsage;
    case ErrorKind::missing_input: return kMissingInput;
    case ErrorKind::fingerprint_mismatch: return kFingerprintMismatch;
    case ErrorKind::malformed_header:
    case ErrorKind::size_mismatch:
    case ErrorKind::unknown_class_code:
    case ErrorKind::io_error: return kFormat;
    case ErrorKind::numeric:
    case ErrorKind::domain: return kDomain;
    }
    return kFailure;
}

inline constexpr const char* kCnn1File = "cnn1.weights";
inline constexpr const char* kCnn2File = "cnn2.weights";

inline const char* kFooter = R"(Exit codes:
  0  success
  1  unexpected failure
  2  usage error, invalid argument or schema violation
  3  missing input
  4  weight fingerprint mismatch
  5  malformed or unreadable file
  6  domain or numeric error
Errors are printed as one line: error: <category>: <message>
Environment:
  CALCSCORE_THREADS  default worker count when --threads is not given)";

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::string precision = "f32";
    std::string out;
    std::string weights;
    std::optional<int> rf_target;
    std::vector<std::string> inputs;
};

struct Context {
    Options opt;
    RunConfig rc;
    RunManifest manifest;
    std::ostream& out;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    int threads() const { return rc.pipeline.threads; }
    bool f64() const { return opt.precision == "f64"; }

    fs::path out_dir(const char* fallback = nullptr) const {
        if (!opt.out.empty()) return opt.out;
        require(fallback != nullptr, ErrorKind::invalid_argument, manifest.command + " needs --out");
        return fallback;
    }

    void finish(const fs::path& dir) {
        manifest.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        fs::create_directories(dir);
        manifest.write(dir / (manifest.command + ".manifest.json"));
    }
};

inline void write_json(const fs::path& p, const Json& j) {
    std::ofstream out(p);
    require(out.good(), ErrorKind::io_error, "cannot write " + p.string());
    out << j.dump(2) << "\n";
}

inline fs::path existing(const std::string& p, const std::string& what) {
    require(fs::exists(p), ErrorKind::missing_input, what + " not found: " + p);
    return p;
}

// phantom: generate a planned corpus.
inline void cmd_phantom(Context& c) {
    const fs::path dir = c.out_dir();
    const Corpus corpus =
        write_corpus(dir, c.rc.phantom, c.rc.phantom_count, c.rc.pipeline.seed, c.rc.pipeline.split, c.threads());
    c.manifest.add_output(dir / kCorpusManifest);
    for (const auto& r : corpus.records) {
        c.manifest.add_output(dir / r.ct_file);
        c.manifest.add_output(dir / r.labels_file);
        c.out << r.entry.subject << " " << to_string(r.entry.split) << " " << to_string(r.entry.preset) << " burden "
              << r.entry.burden_level << " cac_agatston " << std::fixed << std::setprecision(2) << r.cac_agatston
              << " risk " << to_string(r.risk) << "\n";
    }
    c.finish(dir);
}

template <typename T>
void train_as(Context& c, const std::vector<Scan>& scans, const fs::path& dir) {
    auto m = train_pipeline<T>(scans, c.rc.pipeline, [&](const EpochRecord& r) {
        c.out << r.stage << " epoch " << r.epoch << " step " << r.step << " train_loss " << std::setprecision(6)
              << r.train_loss << " validation_loss " << r.validation_loss << std::endl;
    });
    fs::create_directories(dir);
    auto w1 = m.cnn1->export_weights(m.report.stage1_steps);
    auto w2 = m.cnn2->export_weights(m.report.stage2_steps);
    nn::save_weights(dir / kCnn1File, w1);
    nn::save_weights(dir / kCnn2File, w2);
    Json log = Json::array();
    for (const auto& r : m.report.log)
        log.push_back({{"stage", r.stage},
                       {"epoch", r.epoch},
                       {"step", r.step},
                       {"train_loss", r.train_loss},
                       {"validation_loss", r.validation_loss}});
    const auto& rep = m.report;
    write_json(dir / "training_log.json",
               {{"epochs", log},
                {"stage1_positive_voxels", rep.stage1_positive_voxels},
                {"stage2_training_voxels", rep.stage2_training_voxels},
                {"stage2_true_calcium", rep.stage2_true_calcium},
                {"stage2_false_positive", rep.stage2_false_positive},
                {"stage2_background_fallback", rep.stage2_background_fallback}});
    c.manifest.weights = {{"cnn1", w1.fingerprint}, {"cnn2", w2.fingerprint}};
    for (const char* f : {kCnn1File, kCnn2File, "training_log.json"}) c.manifest.add_output(dir / f);
}

// train: both stages on the train/validation splits of a corpus.
inline void cmd_train(Context& c) {
    require(c.opt.inputs.size() == 1, ErrorKind::invalid_argument, "train takes one corpus directory");
    const fs::path corpus_dir = existing(c.opt.inputs[0], "corpus directory");
    const fs::path dir = c.out_dir();
    const Corpus corpus = read_corpus(corpus_dir);
    c.manifest.add_input(corpus_dir / kCorpusManifest);
    for (const auto& r : corpus.records) {
        c.manifest.add_input(corpus_dir / r.ct_file);
        c.manifest.add_input(corpus_dir / r.labels_file);
    }
    const auto scans = load_scans(corpus_dir, corpus);
    if (c.f64())
        train_as<double>(c, scans, dir);
    else
        train_as<float>(c, scans, dir);
    c.finish(dir);
}

template <typename T>
struct LoadedModels {
    std::unique_ptr<stage1::Cnn1<T>> cnn1;
    std::unique_ptr<stage2::Cnn2<T>> cnn2;
    std::string fp1, fp2;
};

/// Loads both networks; with a config file the architectures must match it.
template <typename T>
LoadedModels<T> load_models(Context& c, const fs::path& dir) {
    const auto p1 = existing((dir / kCnn1File).string(), "cnn1 weights");
    const auto p2 = existing((dir / kCnn2File).string(), "cnn2 weights");
    const auto w1 = nn::load_weights(p1);
    const auto w2 = nn::load_weights(p2);
    auto s1 = stage1::spec_from_weights(w1);
    auto s2 = stage2::spec_from_weights(w2);
    if (!c.opt.config.empty()) {
        require(c.rc.pipeline.cnn1_spec().fingerprint() == s1.fingerprint(), ErrorKind::fingerprint_mismatch,
                "cnn1 weights do not match the configured architecture");
        require(c.rc.pipeline.cnn2_spec().fingerprint() == s2.fingerprint(), ErrorKind::fingerprint_mismatch,
                "cnn2 weights do not match the configured architecture");
    }
    LoadedModels<T> m;
    m.cnn1 = std::make_unique<stage1::Cnn1<T>>(s1, w1.seed);
    m.cnn1->import_weights(w1);
    m.cnn2 = std::make_unique<stage2::Cnn2<T>>(s2, w2.seed);
    m.cnn2->import_weights(w2);
    m.fp1 = w1.fingerprint;
    m.fp2 = w2.fingerprint;
    c.manifest.add_input(p1);
    c.manifest.add_input(p2);
    c.manifest.weights = {{"cnn1", m.fp1}, {"cnn2", m.fp2}};
    return m;
}

/// Scan id of a volume header: file stem without a trailing "_ct".
inline std::string scan_id_of(const fs::path& header) {
    std::string s = header.stem().string();
    if (s.size() > 3 && s.ends_with("_ct")) s.resize(s.size() - 3);
    return s;
}

template <typename T>
void score_as(Context& c, const fs::path& dir) {
    auto m = load_models<T>(c, existing(c.opt.weights, "weights directory"));
    fs::create_directories(dir);
    for (const auto& in : c.opt.inputs) {
        const fs::path p = existing(in, "volume");
        const CtVolume v = load_volume(p);
        c.manifest.add_input(p);
        const std::string id = scan_id_of(p);
        auto r = run_inference<T>(v, *m.cnn1, m.cnn2.get(), c.rc.pipeline);
        const ScoreReport rep = score_scan(v, r.labels, id, m.fp1, m.fp2);
        const fs::path lab = dir / (id + "_labels.hdr"), js = dir / (id + "_report.json");
        save_labels(lab, r.labels);
        write_json(js, to_json(rep));
        c.manifest.add_output(lab);
        c.manifest.add_output(js);
        c.out << format_table(rep);
    }
}

// score: label and score one or more CT volumes.
inline void cmd_score(Context& c) {
    require(!c.opt.inputs.empty(), ErrorKind::invalid_argument, "score needs at least one volume");
    require(!c.opt.weights.empty(), ErrorKind::invalid_argument, "score needs --weights");
    const fs::path dir = c.out_dir();
    if (c.f64())
        score_as<double>(c, dir);
    else
        score_as<float>(c, dir);
    c.finish(dir);
}

inline Json stats_json(const AgreementStats& s) {
    return {{"tp_mm3", s.tp_mm3},
            {"fp_mm3", s.fp_mm3},
            {"fn_mm3", s.fn_mm3},
            {"sensitivity_pct", s.sensitivity_pct()},
            {"f1", s.f1()}};
}

// eval: compare scored predictions against a reference corpus.
inline void cmd_eval(Context& c) {
    require(c.opt.inputs.size() == 2, ErrorKind::invalid_argument, "eval takes a prediction and a reference directory");
    const fs::path pred = existing(c.opt.inputs[0], "prediction directory");
    const fs::path ref = existing(c.opt.inputs[1], "reference directory");
    const fs::path dir = c.out_dir();
    const Corpus corpus = read_corpus(ref);
    std::vector<ScoreReport> pred_reports, ref_reports;
    std::vector<AgreementStats> binary;
    std::array<AgreementStats, kNumClasses> per_class{};
    Json scans = Json::array();
    for (const auto& r : corpus.records) {
        const fs::path report = pred / (r.entry.subject + "_report.json");
        if (!fs::exists(report)) continue;
        const fs::path lab = pred / (r.entry.subject + "_labels.hdr");
        std::ifstream in(report);
        ScoreReport p;
        try {
            p = score_report_from_json(Json::parse(in));
        } catch (const nlohmann::json::parse_error& e) {
            fail(ErrorKind::schema_violation, report.string() + ": " + e.what());
        }
        const LabelMap pl = load_labels(existing(lab.string(), "predicted labels"));
        const CtVolume ct = load_volume(ref / r.ct_file);
        const LabelMap rl = load_labels(ref / r.labels_file);
        for (const auto& f : {report, lab, ref / r.ct_file, ref / r.labels_file}) c.manifest.add_input(f);
        const ScoreReport rr = score_scan(ct, rl, r.entry.subject);
        pred_reports.push_back(p);
        ref_reports.push_back(rr);
        const auto b = volume_agreement(pl, rl);
        binary.push_back(b);
        for (int k = 1; k < kNumClasses; ++k) per_class[static_cast<std::size_t>(k)] += volume_agreement(pl, rl, {k});
        scans.push_back({{"subject", r.entry.subject},
                         {"split", to_string(r.entry.split)},
                         {"calcium", stats_json(b)},
                         {"predicted_risk", to_string(p.risk)},
                         {"reference_risk", to_string(rr.risk)}});
    }
    require(!binary.empty(), ErrorKind::missing_input, "no predictions in " + pred.string() + " match the reference corpus");
    const auto summary = summarize(binary);
    const ConfusionMatrix cm = risk_confusion(pred_reports, ref_reports);
    const double kappa = weighted_kappa(cm);
    Json classes;
    for (int k = 1; k < kNumClasses; ++k) classes[std::string(class_name(k))] = stats_json(per_class[static_cast<std::size_t>(k)]);
    Json matrix = Json::array();
    for (int i = 0; i < 4; ++i) {
        Json row = Json::array();
        for (int j = 0; j < 4; ++j) row.push_back(cm.at(i, j));
        matrix.push_back(row);
    }
    const Json stats = {{"format", "calcscore-eval"},
                        {"format_version", 1},
                        {"scans", summary.scans},
                        {"calcium_pooled", stats_json(summary.pooled)},
                        {"calcium_mean_f1_per_scan", summary.mean_f1_per_scan},
                        {"calcium_mean_sensitivity_pct_per_scan", summary.mean_sensitivity_pct_per_scan},
                        {"calcium_mean_fp_mm3_per_scan", summary.mean_fp_mm3_per_scan},
                        {"classes", classes},
                        {"risk_confusion", matrix},
                        {"risk_weighted_kappa", kappa},
                        {"per_scan", scans}};
    fs::create_directories(dir);
    write_json(dir / "eval.json", stats);
    c.manifest.add_output(dir / "eval.json");
    c.out << std::fixed << std::setprecision(4) << "scans " << summary.scans << "\ncalcium_f1 " << summary.pooled.f1()
          << "\ncalcium_sensitivity_pct " << summary.pooled.sensitivity_pct() << "\ncalcium_fp_mm3 "
          << summary.pooled.fp_mm3 << "\nrisk_weighted_kappa " << kappa << "\n";
    c.finish(dir);
}

/// Layer-by-layer receptive field of the stage-1 subnetwork and the stage-2
/// patch geometry.
inline std::string rf_table(const stage1::Cnn1Spec& s1, const stage2::Cnn2Spec& s2) {
    std::ostringstream os;
    os << "cnn1 subnetwork, one per orientation\n";
    os << std::left << std::setw(6) << "layer" << std::setw(12) << "kind" << std::setw(8) << "kernel" << std::setw(10)
       << "dilation" << "rf\n";
    const auto layers = s1.subnetwork();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (layers[i].kind != nn::LayerKind::conv2d) continue;
        const auto r = nn::receptive_field(std::span(layers).first(i + 1));
        os << std::setw(6) << i + 1 << std::setw(12) << "conv2d" << std::setw(8) << layers[i].kernel << std::setw(10)
           << layers[i].dilation << r.rf << "\n";
    }
    os << "cnn1 receptive_field " << s1.receptive_field() << "\n";
    os << "cnn2 patch " << s2.patch << "x" << s2.patch << " final_extent " << s2.final_extent() << " flat_features "
       << s2.flat_features() << "\n";
    return os.str();
}

// rf: receptive-field table.
inline void cmd_rf(Context& c) {
    auto& s1 = c.rc.pipeline.stage1;
    if (c.opt.rf_target) {
        s1.rf_target = *c.opt.rf_target;
        s1.patch_size = std::max(s1.patch_size, s1.rf_target);
        c.manifest.config = to_json(c.rc);
    }
    const auto spec1 = c.rc.pipeline.cnn1_spec();
    const auto spec2 = c.rc.pipeline.cnn2_spec();
    c.out << rf_table(spec1, spec2);
    c.finish(c.out_dir("."));
}

// kappa: linearly weighted kappa of a 4x4 confusion matrix file.
inline void cmd_kappa(Context& c) {
    require(c.opt.inputs.size() == 1, ErrorKind::invalid_argument, "kappa takes one matrix file");
    const fs::path p = existing(c.opt.inputs[0], "matrix file");
    const ConfusionMatrix m = parse_confusion_matrix(read_text(p));
    c.manifest.add_input(p);
    c.out << std::fixed << std::setprecision(2) << weighted_kappa(m) << "\n";
    c.finish(c.out_dir("."));
}

inline void build_context(Context& c, const std::string& command) {
    if (!c.opt.config.empty()) {
        const fs::path p = existing(c.opt.config, "config file");
        c.rc = load_run_config(p);
        c.manifest.add_input(p);
    }
    if (c.opt.seed) c.rc.pipeline.seed = *c.opt.seed;
    if (c.opt.threads)
        c.rc.pipeline.threads = *c.opt.threads;
    else if (std::getenv("CALCSCORE_THREADS"))
        c.rc.pipeline.threads = default_threads();
    require(c.rc.pipeline.threads >= 1, ErrorKind::invalid_argument, "--threads must be >= 1");
    c.manifest.command = command;
    c.manifest.config = to_json(c.rc);
    c.manifest.seed = c.rc.pipeline.seed;
    c.manifest.precision = c.opt.precision;
    c.manifest.threads = c.rc.pipeline.threads;
}

/// Parses arguments and runs one command. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    Options opt;
    CLI::App app{"Two-stage calcium scoring on chest CT volumes", "calcscore"};
    app.footer(kFooter);
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    auto add_common = [&](CLI::App* s) {
        s->add_option("--config", opt.config, "JSON configuration file (comments allowed)");
        s->add_option("--seed", opt.seed, "Seed overriding the configuration");
        s->add_option("--threads", opt.threads, "Worker threads (default: CALCSCORE_THREADS, else config)")
            ->check(CLI::PositiveNumber);
        s->add_option("--precision", opt.precision, "Arithmetic precision of the networks")
            ->check(CLI::IsMember({"f32", "f64"}));
        s->footer(kFooter);
    };

    auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom corpus");
    add_common(phantom);
    phantom->add_option("--out", opt.out, "Corpus output directory")->required();

    auto* train = app.add_subcommand("train", "Train both stages on a corpus");
    add_common(train);
    train->add_option("corpus", opt.inputs, "Corpus directory")->required();
    train->add_option("--out", opt.out, "Weights output directory")->required();

    auto* score = app.add_subcommand("score", "Label and score CT volumes");
    add_common(score);
    score->add_option("volumes", opt.inputs, "Volume headers")->required();
    score->add_option("--weights", opt.weights, "Directory holding cnn1.weights and cnn2.weights")->required();
    score->add_option("--out", opt.out, "Report output directory")->required();

    auto* eval = app.add_subcommand("eval", "Compare scored predictions with a reference corpus");
    add_common(eval);
    eval->add_option("dirs", opt.inputs, "Prediction directory and reference corpus directory")->required()->expected(2);
    eval->add_option("--out", opt.out, "Statistics output directory")->required();

    auto* rf = app.add_subcommand("rf", "Print the receptive-field table");
    add_common(rf);
    rf->add_option("--rf-target", opt.rf_target, "Stage-1 receptive field overriding the configuration");
    rf->add_option("--out", opt.out, "Manifest directory (default: current directory)");

    auto* kappa = app.add_subcommand("kappa", "Weighted kappa of a 4x4 risk confusion matrix");
    add_common(kappa);
    kappa->add_option("matrix", opt.inputs, "Whitespace-separated 4x4 integer matrix file")->required()->expected(1);
    kappa->add_option("--out", opt.out, "Manifest directory (default: current directory)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << (app.get_subcommands().empty() ? app.help("", CLI::AppFormatMode::All) : app.help());
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::CallForVersion&) {
        out << kVersion << "\n";
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: usage: " << e.what() << "\n";
        return kUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    Context c{opt, {}, {}, out};
    try {
        build_context(c, sub->get_name());
        if (sub == phantom) cmd_phantom(c);
        else if (sub == train) cmd_train(c);
        else if (sub == score) cmd_score(c);
        else if (sub == eval) cmd_eval(c);
        else if (sub == rf) cmd_rf(c);
        else cmd_kappa(c);
    } catch (const Error& e) {
        err << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const fs::filesystem_error& e) {
        err << "error: io_error: " << e.what() << "\n";
        return kFormat;
    } catch (const std::exception& e) {
        err << "error: internal: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}

}  // namespace calcscore::cli
