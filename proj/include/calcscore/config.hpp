#pragma once

// JSON configuration (comments allowed) and run manifests. Every key is
// optional and falls back to the built-in default; unknown keys and wrong
// types are schema violations.

#include <filesystem>
#include <fstream>
#include <set>
#include <type_traits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "calcscore/phantom.hpp"
#include "calcscore/pipeline.hpp"

namespace calcscore {

using Json = nlohmann::ordered_json;

struct RunConfig {
    PipelineConfig pipeline;
    PhantomConfig phantom;
    int phantom_count = 30;
};

namespace config_detail {

/// Reads keys of one JSON object and remembers which were consumed.
class Reader {
public:
    Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        require(j_.is_object(), ErrorKind::schema_violation, where() + " must be an object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        if (!j_.contains(key)) return;
        used_.insert(key);
        try {
            const Json& v = j_.at(key);
            if constexpr (std::is_same_v<T, bool>)
                require(v.is_boolean(), ErrorKind::schema_violation, where(key) + " must be a boolean");
            else if constexpr (std::is_integral_v<T>)
                require(v.is_number_integer(), ErrorKind::schema_violation, where(key) + " must be an integer");
            else if constexpr (std::is_floating_point_v<T>)
                require(v.is_number(), ErrorKind::schema_violation, where(key) + " must be a number");
            out = v.get<T>();
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::schema_violation, where(key) + ": " + e.what());
        }
    }

    template <typename T, std::size_t N>
    void get_array(const std::string& key, std::array<T, N>& out) {
        if (!j_.contains(key)) return;
        used_.insert(key);
        const Json& v = j_.at(key);
        require(v.is_array() && v.size() == N, ErrorKind::schema_violation,
                where(key) + " must be an array of " + std::to_string(N) + " numbers");
        for (std::size_t i = 0; i < N; ++i) {
            require(v[i].is_number(), ErrorKind::schema_violation, where(key) + " must hold numbers");
            if constexpr (std::is_integral_v<T>)
                require(v[i].is_number_integer(), ErrorKind::schema_violation, where(key) + " must hold integers");
            out[i] = v[i].get<T>();
        }
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    const Json& mark(const std::string& key) {
        used_.insert(key);
        return j_.at(key);
    }

    Reader sub(const std::string& key) {
        used_.insert(key);
        return Reader(j_.at(key), path_.empty() ? key : path_ + "." + key);
    }

    /// Unknown keys are schema violations.
    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            require(used_.count(it.key()) > 0, ErrorKind::schema_violation, "unknown key " + where(it.key()));
    }

private:
    std::string where(const std::string& key = {}) const {
        std::string p = path_;
        if (!key.empty()) p += (p.empty() ? "" : ".") + key;
        return "'" + (p.empty() ? std::string("<root>") : p) + "'";
    }

    const Json& j_;
    std::string path_;
    std::set<std::string> used_;
};

inline void read_adam(Reader r, nn::AdamConfig& a) {
    r.get("learning_rate", a.learning_rate);
    r.get("beta1", a.beta1);
    r.get("beta2", a.beta2);
    r.get("epsilon", a.epsilon);
    r.get("weight_decay", a.weight_decay);
    r.finish();
}

inline Json adam_json(const nn::AdamConfig& a) {
    return {{"learning_rate", a.learning_rate},
            {"beta1", a.beta1},
            {"beta2", a.beta2},
            {"epsilon", a.epsilon},
            {"weight_decay", a.weight_decay}};
}

inline void read_pipeline(Reader& root, PipelineConfig& c) {
    root.get("seed", c.seed);
    root.get("threads", c.threads);
    if (root.has("grid")) {
        auto r = root.sub("grid");
        r.get("threshold_hu", c.grid.threshold_hu);
        r.get("inplane_spacing_mm", c.grid.inplane_spacing_mm);
        r.get("slab_thickness_mm", c.grid.slab_thickness_mm);
        r.get("slab_spacing_mm", c.grid.slab_spacing_mm);
        r.finish();
    }
    if (root.has("stage1")) {
        auto r = root.sub("stage1");
        auto& s = c.stage1;
        r.get("rf_target", s.rf_target);
        r.get("width", s.width);
        r.get("fusion_width", s.fusion_width);
        r.get("patch_size", s.patch_size);
        r.get("gamma", s.gamma);
        if (r.has("omega")) {
            auto o = r.sub("omega");
            o.get("network", s.omega.network);
            o.get("axial", s.omega.axial);
            o.get("sagittal", s.omega.sagittal);
            o.get("coronal", s.omega.coronal);
            o.finish();
        }
        r.get("dropout", s.dropout);
        if (r.has("adam")) read_adam(r.sub("adam"), s.adam);
        r.get("batch_size", s.batch_size);
        r.get("micro_batch", s.micro_batch);
        r.get("epochs", s.epochs);
        r.get("steps_per_epoch", s.steps_per_epoch);
        r.get("validation_samples", s.validation_samples);
        r.finish();
    }
    if (root.has("stage2")) {
        auto r = root.sub("stage2");
        auto& s = c.stage2;
        r.get_array("widths", s.widths);
        r.get("dense_width", s.dense_width);
        r.get("dropout", s.dropout);
        if (r.has("adam")) read_adam(r.sub("adam"), s.adam);
        r.get("batch_size", s.batch_size);
        r.get("epochs", s.epochs);
        r.get("steps_per_epoch", s.steps_per_epoch);
        r.get("validation_samples", s.validation_samples);
        r.finish();
    }
    if (root.has("split")) {
        auto r = root.sub("split");
        r.get("train", c.split.train);
        r.get("validation", c.split.validation);
        r.get("sharp_fraction", c.split.sharp_fraction);
        r.finish();
    }
}

inline void read_phantom(Reader r, RunConfig& rc) {
    auto& p = rc.phantom;
    r.get("count", rc.phantom_count);
    std::array<int, 3> dims = {p.dims.z, p.dims.y, p.dims.x};
    r.get_array("dims", dims);
    p.dims = {dims[0], dims[1], dims[2]};
    std::array<double, 3> sp = {p.spacing.z, p.spacing.y, p.spacing.x};
    r.get_array("spacing_mm", sp);
    p.spacing = {sp[0], sp[1], sp[2]};
    r.get("slice_thickness_mm", p.slice_thickness);
    r.get("sigma_soft", p.sigma_soft);
    r.get("sigma_sharp", p.sigma_sharp);
    r.get("sharp_highpass", p.sharp_highpass);
    if (r.has("lesions")) {
        auto l = r.sub("lesions");
        for (int c = 1; c < kNumClasses; ++c) {
            const std::string name(class_name(c));
            if (!l.has(name)) continue;
            auto e = l.sub(name);
            auto& s = p.lesions[static_cast<std::size_t>(c)];
            e.get("count_min", s.count_min);
            e.get("count_max", s.count_max);
            e.get("volume_min_mm3", s.volume_min_mm3);
            e.get("volume_max_mm3", s.volume_max_mm3);
            e.get("hu_min", s.hu_min);
            e.get("hu_max", s.hu_max);
            e.finish();
        }
        l.finish();
    }
    if (r.has("burden_levels")) {
        const Json& arr = r.mark("burden_levels");
        require(arr.is_array() && arr.size() == 4, ErrorKind::schema_violation,
                "'phantom.burden_levels' must be an array of 4 objects");
        for (std::size_t i = 0; i < 4; ++i) {
            Reader b(arr[i], "phantom.burden_levels[" + std::to_string(i) + "]");
            auto& lvl = p.burden_levels[i];
            b.get("lesions", lvl.lesions);
            b.get("volume_min_mm3", lvl.volume_min_mm3);
            b.get("volume_max_mm3", lvl.volume_max_mm3);
            b.get("hu_min", lvl.hu_min);
            b.get("hu_max", lvl.hu_max);
            b.finish();
        }
    }
    if (r.has("layout")) {
        auto l = r.sub("layout");
        auto& L = p.layout;
        for (auto [k, v] : std::initializer_list<std::pair<const char*, double*>>{
                 {"body_ry", &L.body_ry},   {"body_rx", &L.body_rx},   {"lung_cy", &L.lung_cy},
                 {"lung_dx", &L.lung_dx},   {"lung_ry", &L.lung_ry},   {"lung_rx", &L.lung_rx},
                 {"heart_cy", &L.heart_cy}, {"heart_cx", &L.heart_cx}, {"heart_r", &L.heart_r},
                 {"fat_width_px", &L.fat_width_px}, {"aorta_cy", &L.aorta_cy}, {"aorta_cx", &L.aorta_cx},
                 {"aorta_r", &L.aorta_r},   {"spine_cy", &L.spine_cy}, {"spine_cx", &L.spine_cx},
                 {"spine_r", &L.spine_r}})
            l.get(k, *v);
        l.finish();
    }
    r.get("bridges", p.bridges);
    std::string target(to_string(p.bridge_target));
    r.get("bridge_target", target);
    p.bridge_target = bridge_target(target);
    r.get("bridge_blob_voxels", p.bridge_blob_voxels);
    r.get("bridge_hu", p.bridge_hu);
    r.get("isolate_lesions", p.isolate_lesions);
    r.get("max_retries", p.max_retries);
    r.finish();
}

}  // namespace config_detail

inline Json parse_json_text(const std::string& text, const std::string& what) {
    try {
        return Json::parse(text, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorKind::schema_violation, what + ": " + e.what());
    }
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    require(in.good(), ErrorKind::missing_input, "cannot open " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline RunConfig run_config_from_json(const Json& j);

inline RunConfig load_run_config(const std::filesystem::path& p) {
    return run_config_from_json(parse_json_text(read_text(p), p.string()));
}

inline Json to_json(const RunConfig& rc) {
    const auto& c = rc.pipeline;
    Json j;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["grid"] = {{"threshold_hu", c.grid.threshold_hu},
                 {"inplane_spacing_mm", c.grid.inplane_spacing_mm},
                 {"slab_thickness_mm", c.grid.slab_thickness_mm},
                 {"slab_spacing_mm", c.grid.slab_spacing_mm}};
    const auto& s1 = c.stage1;
    j["stage1"] = {{"rf_target", s1.rf_target},
                   {"width", s1.width},
                   {"fusion_width", s1.fusion_width},
                   {"patch_size", s1.patch_size},
                   {"gamma", s1.gamma},
                   {"omega",
                    {{"network", s1.omega.network},
                     {"axial", s1.omega.axial},
                     {"sagittal", s1.omega.sagittal},
                     {"coronal", s1.omega.coronal}}},
                   {"dropout", s1.dropout},
                   {"adam", config_detail::adam_json(s1.adam)},
                   {"batch_size", s1.batch_size},
                   {"micro_batch", s1.micro_batch},
                   {"epochs", s1.epochs},
                   {"steps_per_epoch", s1.steps_per_epoch},
                   {"validation_samples", s1.validation_samples}};
    const auto& s2 = c.stage2;
    j["stage2"] = {{"widths", s2.widths},
                   {"dense_width", s2.dense_width},
                   {"dropout", s2.dropout},
                   {"adam", config_detail::adam_json(s2.adam)},
                   {"batch_size", s2.batch_size},
                   {"epochs", s2.epochs},
                   {"steps_per_epoch", s2.steps_per_epoch},
                   {"validation_samples", s2.validation_samples}};
    j["split"] = {{"train", c.split.train},
                  {"validation", c.split.validation},
                  {"sharp_fraction", c.split.sharp_fraction}};
    const auto& p = rc.phantom;
    Json lesions;
    for (int k = 1; k < kNumClasses; ++k) {
        const auto& s = p.lesions[static_cast<std::size_t>(k)];
        lesions[std::string(class_name(k))] = {{"count_min", s.count_min},         {"count_max", s.count_max},
                                               {"volume_min_mm3", s.volume_min_mm3}, {"volume_max_mm3", s.volume_max_mm3},
                                               {"hu_min", s.hu_min},               {"hu_max", s.hu_max}};
    }
    Json burden = Json::array();
    for (const auto& b : p.burden_levels)
        burden.push_back({{"lesions", b.lesions},
                          {"volume_min_mm3", b.volume_min_mm3},
                          {"volume_max_mm3", b.volume_max_mm3},
                          {"hu_min", b.hu_min},
                          {"hu_max", b.hu_max}});
    const auto& L = p.layout;
    j["phantom"] = {{"count", rc.phantom_count},
                    {"dims", {p.dims.z, p.dims.y, p.dims.x}},
                    {"spacing_mm", {p.spacing.z, p.spacing.y, p.spacing.x}},
                    {"slice_thickness_mm", p.slice_thickness},
                    {"sigma_soft", p.sigma_soft},
                    {"sigma_sharp", p.sigma_sharp},
                    {"sharp_highpass", p.sharp_highpass},
                    {"lesions", lesions},
                    {"burden_levels", burden},
                    {"layout",
                     {{"body_ry", L.body_ry},       {"body_rx", L.body_rx},     {"lung_cy", L.lung_cy},
                      {"lung_dx", L.lung_dx},       {"lung_ry", L.lung_ry},     {"lung_rx", L.lung_rx},
                      {"heart_cy", L.heart_cy},     {"heart_cx", L.heart_cx},   {"heart_r", L.heart_r},
                      {"fat_width_px", L.fat_width_px}, {"aorta_cy", L.aorta_cy}, {"aorta_cx", L.aorta_cx},
                      {"aorta_r", L.aorta_r},       {"spine_cy", L.spine_cy},   {"spine_cx", L.spine_cx},
                      {"spine_r", L.spine_r}}},
                    {"bridges", p.bridges},
                    {"bridge_target", to_string(p.bridge_target)},
                    {"bridge_blob_voxels", p.bridge_blob_voxels},
                    {"bridge_hu", p.bridge_hu},
                    {"isolate_lesions", p.isolate_lesions},
                    {"max_retries", p.max_retries}};
    return j;
}

inline RunConfig run_config_from_json(const Json& j) {
    RunConfig rc;
    config_detail::Reader root(j, "");
    config_detail::read_pipeline(root, rc.pipeline);
    if (root.has("phantom")) config_detail::read_phantom(root.sub("phantom"), rc);
    root.finish();
    rc.pipeline.validate();
    rc.phantom.validate();
    require(rc.phantom_count >= 3, ErrorKind::schema_violation, "'phantom.count' must be >= 3");
    return rc;
}

/// Machine-readable record written next to every command output.
struct RunManifest {
    std::string command;
    Json config = Json::object();
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::string>> inputs;   // path, FNV-1a hash
    std::vector<std::pair<std::string, std::string>> outputs;  // path, FNV-1a hash
    std::vector<std::pair<std::string, std::string>> weights;  // network, fingerprint
    std::string precision = "f32";
    int threads = 1;
    double seconds = 0;

    Json to_json() const {
        Json j;
        j["format"] = "calcscore-run-manifest";
        j["format_version"] = 1;
        j["tool_version"] = std::string(kVersion);
        j["command"] = command;
        j["seed"] = seed;
        j["precision"] = precision;
        j["threads"] = threads;
        j["config"] = config;
        auto list = [](const auto& v, const char* a, const char* b) {
            Json arr = Json::array();
            for (const auto& [x, y] : v) arr.push_back({{a, x}, {b, y}});
            return arr;
        };
        j["inputs"] = list(inputs, "path", "fnv1a64");
        j["outputs"] = list(outputs, "path", "fnv1a64");
        j["weights"] = list(weights, "network", "fingerprint");
        j["timings"] = {{"wall_seconds", seconds}};
        return j;
    }

    void add_input(const std::filesystem::path& p) { inputs.emplace_back(p.string(), hash_file(p.string())); }
    void add_output(const std::filesystem::path& p) { outputs.emplace_back(p.string(), hash_file(p.string())); }

    void write(const std::filesystem::path& p) const {
        std::ofstream out(p);
        require(out.good(), ErrorKind::io_error, "cannot write " + p.string());
        out << to_json().dump(2) << "\n";
    }
};

}  // namespace calcscore
