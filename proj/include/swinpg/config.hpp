#pragma once

// RunConfig: the JSON configuration shared by every CLI subcommand. Parsing
// is strict: unknown keys and wrongly typed values are config errors.

#include <filesystem>
#include <set>
#include <string>

#include <json.hpp>

#include "swinpg/training.hpp"

namespace swinpg {

using Json = nlohmann::ordered_json;

struct DataConfig {
    std::string source = "simulated";  // "simulated" | "euvp"
    std::string root;                  // EUVP layout root
    std::string manifest;              // optional pair list overriding directory scanning
    std::string split = "train";       // split used for training
    std::string eval_split = "validation";
    int64_t n_pairs = 8;
    int64_t eval_pairs = 4;
    int64_t image_size = 0;  // 0: follow the model
    uint64_t seed = 0;
    uint64_t eval_seed = 1;

    friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct OutputConfig {
    std::string checkpoint_path = "swinpg.ckpt";
    std::string report_path = "report.json";

    friend bool operator==(const OutputConfig&, const OutputConfig&) = default;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig training;
    DataConfig data;
    OutputConfig output;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

namespace detail {

/// Walks one JSON object, remembering which keys were consumed.
class StrictObject {
public:
    StrictObject(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        seen_.insert(key);
        const std::string where = path_ + "." + key;
        if constexpr (std::is_same_v<T, bool>) {
            if (!it->is_boolean()) throw ConfigError(where + ": expected a boolean");
        } else if constexpr (std::is_integral_v<T>) {
            if (!it->is_number_integer()) throw ConfigError(where + ": expected an integer");
            if (std::is_unsigned_v<T> && it->template get<int64_t>() < 0 && !it->is_number_unsigned()) {
                throw ConfigError(where + ": expected a non-negative integer");
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!it->is_number()) throw ConfigError(where + ": expected a number");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!it->is_string()) throw ConfigError(where + ": expected a string");
        } else {
            if (!it->is_array()) throw ConfigError(where + ": expected an array");
            for (const auto& e : *it)
                if (!e.is_number_integer()) throw ConfigError(where + ": expected integers");
        }
        out = it->template get<T>();
    }

    const Json* child(const char* key) {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        seen_.insert(key);
        return &*it;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!seen_.count(key)) throw ConfigError(path_ + ": unknown key \"" + key + "\"");
        }
    }

    const std::string& path() const { return path_; }

private:
    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline const char* block_name(BlockKind b) { return b == BlockKind::swin ? "swin" : "conv"; }

inline Json to_json(const ModelConfig& c) {
    return Json{{"image_size", c.image_size},         {"patch_size", c.patch_size},
                {"embed_dim", c.embed_dim},           {"depths", c.depths},
                {"heads", c.heads},                   {"window_size", c.window_size},
                {"bottleneck_depth", c.bottleneck_depth}, {"block", block_name(c.block)},
                {"use_discriminator", c.use_discriminator}, {"seed", c.seed}};
}

inline Json to_json(const TrainConfig& c) {
    return Json{{"lr", c.lr},          {"beta1", c.beta1},           {"beta2", c.beta2},
                {"eps", c.eps},        {"lambda_l1", c.lambda_l1},   {"batch_size", c.batch_size},
                {"epochs", c.epochs},  {"seed", c.seed}};
}

inline Json to_json(const DataConfig& c) {
    return Json{{"source", c.source},         {"root", c.root},           {"manifest", c.manifest},
                {"split", c.split},           {"eval_split", c.eval_split}, {"n_pairs", c.n_pairs},
                {"eval_pairs", c.eval_pairs}, {"image_size", c.image_size}, {"seed", c.seed},
                {"eval_seed", c.eval_seed}};
}

inline Json to_json(const OutputConfig& c) {
    return Json{{"checkpoint_path", c.checkpoint_path}, {"report_path", c.report_path}};
}

inline Json to_json(const RunConfig& c) {
    return Json{{"model", to_json(c.model)}, {"training", to_json(c.training)}, {"data", to_json(c.data)},
                {"output", to_json(c.output)}};
}

inline ModelConfig model_from_json(const Json& j, const std::string& path = "model") {
    ModelConfig c;
    detail::StrictObject o(j, path);
    o.get("image_size", c.image_size);
    o.get("patch_size", c.patch_size);
    o.get("embed_dim", c.embed_dim);
    o.get("depths", c.depths);
    o.get("heads", c.heads);
    o.get("window_size", c.window_size);
    o.get("bottleneck_depth", c.bottleneck_depth);
    std::string block = block_name(c.block);
    o.get("block", block);
    if (block == "swin") {
        c.block = BlockKind::swin;
    } else if (block == "conv") {
        c.block = BlockKind::conv;
    } else {
        throw ConfigError(path + ".block: expected \"swin\" or \"conv\", got \"" + block + "\"");
    }
    o.get("use_discriminator", c.use_discriminator);
    o.get("seed", c.seed);
    o.finish();
    c.validate();
    return c;
}

inline TrainConfig training_from_json(const Json& j, const std::string& path = "training") {
    TrainConfig c;
    detail::StrictObject o(j, path);
    o.get("lr", c.lr);
    o.get("beta1", c.beta1);
    o.get("beta2", c.beta2);
    o.get("eps", c.eps);
    o.get("lambda_l1", c.lambda_l1);
    o.get("batch_size", c.batch_size);
    o.get("epochs", c.epochs);
    o.get("seed", c.seed);
    o.finish();
    c.validate();
    return c;
}

inline DataConfig data_from_json(const Json& j, const std::string& path = "data") {
    DataConfig c;
    detail::StrictObject o(j, path);
    o.get("source", c.source);
    o.get("root", c.root);
    o.get("manifest", c.manifest);
    o.get("split", c.split);
    o.get("eval_split", c.eval_split);
    o.get("n_pairs", c.n_pairs);
    o.get("eval_pairs", c.eval_pairs);
    o.get("image_size", c.image_size);
    o.get("seed", c.seed);
    o.get("eval_seed", c.eval_seed);
    o.finish();
    if (c.source != "simulated" && c.source != "euvp") {
        throw ConfigError(path + ".source: expected \"simulated\" or \"euvp\", got \"" + c.source + "\"");
    }
    for (const auto* s : {&c.split, &c.eval_split}) {
        if (*s != "train" && *s != "validation") throw ConfigError(path + ": split must be \"train\" or \"validation\"");
    }
    if (c.n_pairs < 1 || c.eval_pairs < 1) throw ConfigError(path + ": n_pairs and eval_pairs must be >= 1");
    if (c.image_size < 0) throw ConfigError(path + ".image_size must be >= 0");
    if (c.source == "euvp" && c.root.empty() && c.manifest.empty()) {
        throw ConfigError(path + ": source \"euvp\" needs root or manifest");
    }
    return c;
}

inline OutputConfig output_from_json(const Json& j, const std::string& path = "output") {
    OutputConfig c;
    detail::StrictObject o(j, path);
    o.get("checkpoint_path", c.checkpoint_path);
    o.get("report_path", c.report_path);
    o.finish();
    return c;
}

inline RunConfig run_config_from_json(const Json& j) {
    RunConfig c;
    detail::StrictObject o(j, "config");
    if (const auto* m = o.child("model")) c.model = model_from_json(*m);
    if (const auto* t = o.child("training")) c.training = training_from_json(*t);
    if (const auto* d = o.child("data")) c.data = data_from_json(*d);
    if (const auto* out = o.child("output")) c.output = output_from_json(*out);
    o.finish();
    c.model.validate();
    if (c.data.image_size == 0) {
        c.data.image_size = c.model.image_size;
    } else if (c.data.image_size != c.model.image_size) {
        throw ConfigError("data.image_size " + std::to_string(c.data.image_size) + " differs from model.image_size " +
                          std::to_string(c.model.image_size));
    }
    return c;
}

inline RunConfig parse_run_config(const std::string& text) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return run_config_from_json(j);
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    try {
        return parse_run_config(std::string(bytes.begin(), bytes.end()));
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

/// FNV-1a of the canonical (defaults filled in) model, training and data
/// sections, as hex. Output paths do not contribute.
inline std::string config_digest(const RunConfig& c) {
    const auto text = Json{{"model", to_json(c.model)}, {"training", to_json(c.training)}, {"data", to_json(c.data)}}.dump();
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : text) h = (h ^ ch) * 0x100000001b3ull;
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace swinpg
