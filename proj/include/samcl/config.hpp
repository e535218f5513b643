#pragma once

// Whole-experiment configuration, loadable from a plain-text file of
// `key = value` lines ('#' starts a comment). The schema is documented by
// default_config_text(); files must carry `schema_version = 1`. Every
// field has a default, and the full config is echoed into every artifact.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "samcl/errors.hpp"
#include "samcl/harness.hpp"
#include "samcl/model.hpp"

namespace samcl {

inline constexpr int kConfigSchemaVersion = 1;

struct RunConfig {
    ModelConfig model;
    TrainConfig train;

    struct Data {
        std::size_t train_per_task = 200;
        std::size_t test_per_task = 80;
        std::size_t base_train = 300;
        std::size_t base_test = 80;
        int prompts = 3;
    } data;

    struct Pretrain {
        std::size_t epochs = 18;
        double lr = 0.005;
        std::size_t batch_size = 8;
        double miou_threshold = 0.7;
    } pretrain;

    std::string mode = "samcl"; // samcl | samcl-oracle | baseline-lora
    std::size_t order = 0;      // task-order permutation id
    std::string out_dir = "runs";
    bool dump_masks = false;

    void validate() const {
        model.validate();
        train.validate(model);
        if (mode != "samcl" && mode != "samcl-oracle" && mode != "baseline-lora") {
            throw validation_error("RunConfig: unknown mode '" + mode + "'");
        }
        if (data.train_per_task == 0 || data.test_per_task == 0 || data.base_train == 0 ||
            data.base_test == 0) {
            throw validation_error("RunConfig: dataset sizes must be positive");
        }
        if (data.prompts <= 0) throw validation_error("RunConfig: prompts must be positive");
        if (pretrain.epochs == 0 || pretrain.lr <= 0.0 || pretrain.batch_size == 0) {
            throw validation_error("RunConfig: bad pretrain settings");
        }
        permuted_domain_order(order); // range check
    }

    void set(const std::string& key, const std::string& raw) {
        auto as_size = [&](const char* what) -> std::size_t {
            try {
                const long long v = std::stoll(raw);
                if (v < 0) throw std::out_of_range("negative");
                return static_cast<std::size_t>(v);
            } catch (const std::exception&) {
                throw validation_error(std::string("config: ") + what + " expects a non-negative integer, got '" + raw + "'");
            }
        };
        auto as_double = [&](const char* what) -> double {
            try {
                return std::stod(raw);
            } catch (const std::exception&) {
                throw validation_error(std::string("config: ") + what + " expects a number, got '" + raw + "'");
            }
        };

        if (key == "schema_version") {
            if (as_size(key.c_str()) != static_cast<std::size_t>(kConfigSchemaVersion)) {
                throw validation_error("config: unsupported schema_version " + raw);
            }
        } else if (key == "seed") train.seed = as_size(key.c_str());
        else if (key == "model.image_size") model.image_size = as_size(key.c_str());
        else if (key == "model.patch_size") model.patch_size = as_size(key.c_str());
        else if (key == "model.embed_dim") model.embed_dim = as_size(key.c_str());
        else if (key == "model.num_blocks") model.num_blocks = as_size(key.c_str());
        else if (key == "model.num_heads") model.num_heads = as_size(key.c_str());
        else if (key == "model.decoder_hidden") model.decoder_hidden = as_size(key.c_str());
        else if (key == "model.heatmap_sigma") model.heatmap_sigma = as_double(key.c_str());
        else if (key == "train.epochs") train.epochs = as_size(key.c_str());
        else if (key == "train.lr") train.lr = as_double(key.c_str());
        else if (key == "train.rank") train.rank = as_size(key.c_str());
        else if (key == "train.batch_size") train.batch_size = as_size(key.c_str());
        else if (key == "train.start_block") train.start_block = as_size(key.c_str());
        else if (key == "train.weight_decay") train.weight_decay = as_double(key.c_str());
        else if (key == "train.variant") train.variant = variant_from_name(raw);
        else if (key == "selector.buffer_cap") train.buffer_cap = as_size(key.c_str());
        else if (key == "selector.epochs") train.selector_epochs = as_size(key.c_str());
        else if (key == "selector.lr") train.selector_lr = as_double(key.c_str());
        else if (key == "selector.batch_size") train.selector_batch = as_size(key.c_str());
        else if (key == "data.train_per_task") data.train_per_task = as_size(key.c_str());
        else if (key == "data.test_per_task") data.test_per_task = as_size(key.c_str());
        else if (key == "data.base_train") data.base_train = as_size(key.c_str());
        else if (key == "data.base_test") data.base_test = as_size(key.c_str());
        else if (key == "data.prompts") data.prompts = static_cast<int>(as_size(key.c_str()));
        else if (key == "pretrain.epochs") pretrain.epochs = as_size(key.c_str());
        else if (key == "pretrain.lr") pretrain.lr = as_double(key.c_str());
        else if (key == "pretrain.batch_size") pretrain.batch_size = as_size(key.c_str());
        else if (key == "pretrain.miou_threshold") pretrain.miou_threshold = as_double(key.c_str());
        else if (key == "run.mode") mode = raw;
        else if (key == "run.order") order = as_size(key.c_str());
        else if (key == "run.dump_masks") dump_masks = (raw == "true" || raw == "1");
        else if (key == "out_dir") out_dir = raw;
        else throw validation_error("config: unknown key '" + key + "'");
    }

    static RunConfig from_text(std::istream& is, const std::string& where) {
        RunConfig cfg;
        bool saw_version = false;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                const auto b = s.find_first_not_of(" \t\r");
                const auto e = s.find_last_not_of(" \t\r");
                return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw validation_error("config: " + where + ":" + std::to_string(lineno) +
                                       ": expected 'key = value'");
            }
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key == "schema_version") saw_version = true;
            cfg.set(key, value);
        }
        if (!saw_version) {
            throw validation_error("config: " + where + ": missing schema_version key");
        }
        cfg.validate();
        return cfg;
    }

    static RunConfig from_file(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) throw validation_error("config: cannot open " + path.string());
        return from_text(is, path.string());
    }

    std::string to_text() const {
        std::ostringstream os;
        os << "schema_version = " << kConfigSchemaVersion << "\n";
        os << "seed = " << train.seed << "\n";
        os << "model.image_size = " << model.image_size << "\n";
        os << "model.patch_size = " << model.patch_size << "\n";
        os << "model.embed_dim = " << model.embed_dim << "\n";
        os << "model.num_blocks = " << model.num_blocks << "\n";
        os << "model.num_heads = " << model.num_heads << "\n";
        os << "model.decoder_hidden = " << model.decoder_hidden << "\n";
        os << "model.heatmap_sigma = " << model.heatmap_sigma << "\n";
        os << "train.epochs = " << train.epochs << "\n";
        os << "train.lr = " << train.lr << "\n";
        os << "train.rank = " << train.rank << "\n";
        os << "train.batch_size = " << train.batch_size << "\n";
        os << "train.start_block = " << train.start_block << "\n";
        os << "train.weight_decay = " << train.weight_decay << "\n";
        os << "train.variant = " << variant_name(train.variant) << "\n";
        os << "selector.buffer_cap = " << train.buffer_cap << "\n";
        os << "selector.epochs = " << train.selector_epochs << "\n";
        os << "selector.lr = " << train.selector_lr << "\n";
        os << "selector.batch_size = " << train.selector_batch << "\n";
        os << "data.train_per_task = " << data.train_per_task << "\n";
        os << "data.test_per_task = " << data.test_per_task << "\n";
        os << "data.base_train = " << data.base_train << "\n";
        os << "data.base_test = " << data.base_test << "\n";
        os << "data.prompts = " << data.prompts << "\n";
        os << "pretrain.epochs = " << pretrain.epochs << "\n";
        os << "pretrain.lr = " << pretrain.lr << "\n";
        os << "pretrain.batch_size = " << pretrain.batch_size << "\n";
        os << "pretrain.miou_threshold = " << pretrain.miou_threshold << "\n";
        os << "run.mode = " << mode << "\n";
        os << "run.order = " << order << "\n";
        os << "run.dump_masks = " << (dump_masks ? "true" : "false") << "\n";
        os << "out_dir = " << out_dir << "\n";
        return os.str();
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["schema_version"] = kConfigSchemaVersion;
        j["seed"] = train.seed;
        j["model"] = model.to_json();
        j["train"] = train.to_json();
        j["data"] = {{"train_per_task", data.train_per_task},
                     {"test_per_task", data.test_per_task},
                     {"base_train", data.base_train},
                     {"base_test", data.base_test},
                     {"prompts", data.prompts}};
        j["pretrain"] = {{"epochs", pretrain.epochs},
                         {"lr", pretrain.lr},
                         {"batch_size", pretrain.batch_size},
                         {"miou_threshold", pretrain.miou_threshold}};
        j["run"] = {{"mode", mode}, {"order", order}, {"dump_masks", dump_masks}};
        j["out_dir"] = out_dir;
        return j;
    }

    // Hash over the fields that determine the base checkpoint.
    std::uint64_t pretrain_fingerprint() const {
        nlohmann::json j;
        j["model"] = model.to_json();
        j["seed"] = train.seed;
        j["base_train"] = data.base_train;
        j["base_test"] = data.base_test;
        j["prompts"] = data.prompts;
        j["pretrain"] = to_json()["pretrain"];
        const std::string s = j.dump();
        return hash_bytes(s.data(), s.size());
    }
};

inline std::string default_config_text() { return RunConfig().to_text(); }

} // namespace samcl
