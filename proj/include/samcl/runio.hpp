#pragma once

// Run-directory artifacts: accuracy-matrix CSVs, the summary JSON, the
// manifest, optional mask dumps, and dataset dump/ingestion in the
// PPM/PGM + manifest layout.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "samcl/errors.hpp"
#include "samcl/harness.hpp"
#include "samcl/imageio.hpp"
#include "samcl/metrics.hpp"
#include "samcl/synth.hpp"

namespace samcl {

inline void write_matrix_csv(const std::filesystem::path& path, const AccuracyMatrix& m,
                             const std::vector<std::string>& task_names) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("write_matrix_csv: cannot open " + path.string());
    os << "step";
    for (const auto& n : task_names) os << "," << n;
    os << "\n";
    os << std::setprecision(17);
    for (std::size_t i = 0; i < m.tasks(); ++i) {
        os << i;
        for (std::size_t j = 0; j < m.tasks(); ++j) {
            os << ",";
            if (m.filled(i, j)) os << m.get(i, j);
        }
        os << "\n";
    }
    if (!os) throw io_error("write_matrix_csv: write failed " + path.string());
}

inline AccuracyMatrix read_matrix_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw io_error("read_matrix_csv: cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw io_error("read_matrix_csv: empty file " + path.string());
    std::vector<std::vector<std::optional<double>>> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::optional<double>> row;
        std::stringstream ss(line);
        std::string cell;
        bool first = true;
        while (std::getline(ss, cell, ',')) {
            if (first) {
                first = false;
                continue;
            }
            if (cell.empty()) row.emplace_back(std::nullopt);
            else row.emplace_back(std::stod(cell));
        }
        rows.push_back(std::move(row));
    }
    AccuracyMatrix m(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() < rows.size()) {
            throw io_error("read_matrix_csv: ragged row " + std::to_string(i) + " in " + path.string());
        }
        for (std::size_t j = 0; j < rows.size(); ++j) {
            if (rows[i][j]) m.set(i, j, *rows[i][j]);
        }
    }
    return m;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw io_error("write_json: cannot open " + path.string());
    os << j.dump(2) << "\n";
    if (!os) throw io_error("write_json: write failed " + path.string());
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw io_error("read_json: cannot open " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw io_error("read_json: corrupt " + path.string() + ": " + e.what());
    }
}

// CSV matrices + summary.json + manifest.json for one run. The manifest
// carries everything volatile (timing, timestamp); summary.json is
// deterministic for a fixed config + seed.
inline void write_run_dir(const std::filesystem::path& dir, const RunRecord& rec,
                          bool failed = false) {
    std::filesystem::create_directories(dir);
    const bool complete = rec.steps.size() == rec.task_names.size() && !failed;
    if (complete) {
        write_matrix_csv(dir / "accuracy_miou.csv", rec.miou, rec.task_names);
        write_matrix_csv(dir / "accuracy_mf1.csv", rec.mf1, rec.task_names);
        write_matrix_csv(dir / "accuracy_mmae.csv", rec.mmae, rec.task_names);
        write_json(dir / "summary.json", rec.summary());
    }
    nlohmann::json manifest;
    manifest["mode"] = rec.mode;
    manifest["failed"] = failed;
    manifest["steps_completed"] = rec.steps.size();
    manifest["tasks"] = rec.task_names;
    manifest["timing"] = rec.timing_json();
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    manifest["written_unix_ms"] =
        std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
    manifest["config"] = rec.config_echo;
    write_json(dir / "manifest.json", manifest);
}

inline void dump_masks(const std::filesystem::path& dir, const SegModel& model,
                       const RunRecord& rec, const TaskStream& stream, std::size_t per_task = 8) {
    std::filesystem::create_directories(dir);
    for (std::size_t t = 0; t < stream.tasks.size() && t < rec.modules.modules.size(); ++t) {
        const auto& task = stream.tasks[t];
        for (std::size_t i = 0; i < task.test.size() && i < per_task; ++i) {
            SegmentOutput out = segment_sample(model, &rec.modules.modules[t], task.test[i]);
            const std::string stem = task.name + "_" + std::to_string(i);
            write_pgm(dir / (stem + "_pred.pgm"), out.pred_mask);
            write_pgm(dir / (stem + "_gt.pgm"), task.test[i].mask);
            write_ppm(dir / (stem + "_img.ppm"), task.test[i].image);
        }
    }
}

// ---- dataset dump / ingestion --------------------------------------------------

inline void dump_dataset(const std::filesystem::path& dir, const DomainSpec& spec,
                         const std::vector<Sample>& samples, int prompts_k) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["domain"] = domain_name(spec.kind);
    manifest["seed_base"] = spec.seed_base;
    manifest["prompts_k"] = prompts_k;
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string stem = "sample_" + std::to_string(i);
        write_ppm(dir / (stem + ".ppm"), samples[i].image);
        write_pgm(dir / (stem + ".pgm"), samples[i].mask);
        list.push_back({{"image", stem + ".ppm"},
                        {"mask", stem + ".pgm"},
                        {"prompt_seed", samples[i].sample_seed},
                        {"domain_id", samples[i].domain_id}});
    }
    manifest["samples"] = list;
    write_json(dir / "manifest.json", manifest);
}

// Reads a dataset in the dump layout; prompts are re-sampled from the
// stored per-sample seeds, so a dumped dataset round-trips exactly.
inline std::vector<Sample> load_dataset_dir(const std::filesystem::path& dir) {
    const nlohmann::json manifest = read_json(dir / "manifest.json");
    const int prompts_k = manifest.at("prompts_k").get<int>();
    std::vector<Sample> out;
    for (const auto& entry : manifest.at("samples")) {
        Sample s;
        s.image = read_ppm(dir / entry.at("image").get<std::string>());
        s.mask = read_pgm(dir / entry.at("mask").get<std::string>());
        s.sample_seed = entry.at("prompt_seed").get<std::uint64_t>();
        s.domain_id = entry.at("domain_id").get<int>();
        s.prompts = sample_prompts(s.mask, prompts_k, mix_seed(s.sample_seed, "prompts"));
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace samcl
