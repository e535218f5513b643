// Command-line front end: pretrain, run, ablate, report, gen-data.
// Exit codes: 0 success, 2 validation, 3 invariant violation, 4 I/O.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "samcl/config.hpp"
#include "samcl/harness.hpp"
#include "samcl/model.hpp"
#include "samcl/runio.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string mode;
    std::string sweep;
    std::optional<std::size_t> order;
    std::vector<std::string> run_dirs;
};

samcl::RunConfig load_config(const CliOptions& opt) {
    samcl::RunConfig cfg;
    if (!opt.config_path.empty()) {
        if (!fs::exists(opt.config_path)) {
            throw samcl::validation_error("config file not found: " + opt.config_path);
        }
        cfg = samcl::RunConfig::from_file(opt.config_path);
    }
    if (opt.seed) cfg.train.seed = *opt.seed;
    if (!opt.mode.empty()) cfg.mode = opt.mode;
    if (opt.order) cfg.order = *opt.order;
    cfg.validate();
    return cfg;
}

fs::path resolve_out_root(const samcl::RunConfig& cfg, const CliOptions& opt) {
    if (!opt.out.empty()) return opt.out;
    if (const char* env = std::getenv("SAMCL_OUT_ROOT"); env && *env) return env;
    return cfg.out_dir;
}

fs::path fresh_dir(const fs::path& base) {
    if (!fs::exists(base)) return base;
    for (int i = 2;; ++i) {
        fs::path candidate = base;
        candidate += "-" + std::to_string(i);
        if (!fs::exists(candidate)) return candidate;
    }
}

samcl::TaskStream build_stream(const samcl::RunConfig& cfg) {
    return samcl::make_default_stream(cfg.data.train_per_task, cfg.data.test_per_task,
                                      cfg.train.seed, cfg.model.image_size, cfg.data.prompts,
                                      cfg.order);
}

std::vector<samcl::Sample> base_samples(const samcl::RunConfig& cfg, std::size_t n,
                                        const char* split) {
    samcl::DomainSpec spec = samcl::DomainSpec::preset(
        samcl::DomainKind::base_blob, samcl::mix_seed(cfg.train.seed, "domain-base-blob"));
    return samcl::generate_domain(spec, n, samcl::mix_seed(cfg.train.seed, split), -1,
                                  cfg.model.image_size, cfg.data.prompts);
}

int cmd_pretrain(const CliOptions& opt) {
    samcl::RunConfig cfg = load_config(opt);
    const fs::path root = resolve_out_root(cfg, opt);
    fs::create_directories(root);
    const fs::path ckpt = root / "base.ckpt";
    const std::uint64_t fingerprint = cfg.pretrain_fingerprint();

    if (fs::exists(ckpt)) {
        json extra;
        samcl::SegModel::load(ckpt, &extra);
        if (extra.contains("fingerprint") &&
            extra.at("fingerprint").get<std::uint64_t>() == fingerprint) {
            std::cout << "base checkpoint up-to-date: " << ckpt.string() << "\n";
            return 0;
        }
        std::cout << "base checkpoint is stale; retraining\n";
    }

    auto train = base_samples(cfg, cfg.data.base_train, "base-train");
    auto heldout = base_samples(cfg, cfg.data.base_test, "base-test");
    samcl::SegModel model(cfg.model, cfg.train.seed);
    samcl::PretrainConfig pcfg;
    pcfg.epochs = cfg.pretrain.epochs;
    pcfg.lr = cfg.pretrain.lr;
    pcfg.batch_size = cfg.pretrain.batch_size;
    pcfg.miou_threshold = cfg.pretrain.miou_threshold;
    pcfg.seed = cfg.train.seed;

    std::cout << "pretraining base model: " << cfg.data.base_train << " samples, "
              << cfg.pretrain.epochs << " epochs\n";
    samcl::PretrainReport report = samcl::pretrain_base(model, train, heldout, pcfg);
    for (std::size_t e = 0; e < report.epoch_losses.size(); ++e) {
        std::cout << "  epoch " << (e + 1) << "  loss " << std::fixed << std::setprecision(4)
                  << report.epoch_losses[e] << "\n";
    }
    std::cout << "held-out mIoU " << std::setprecision(4) << report.heldout_miou << " (threshold "
              << cfg.pretrain.miou_threshold << ")\n";

    json extra;
    extra["fingerprint"] = fingerprint;
    extra["heldout_miou"] = report.heldout_miou;
    extra["seed"] = cfg.train.seed;
    model.save(ckpt, extra);

    std::ofstream log(root / "pretrain.log");
    log << "heldout_miou " << report.heldout_miou << "\n";
    for (double l : report.epoch_losses) log << l << "\n";
    std::cout << "saved " << ckpt.string() << "\n";
    return 0;
}

samcl::SegModel load_base(const samcl::RunConfig& cfg, const fs::path& root) {
    const fs::path ckpt = root / "base.ckpt";
    if (!fs::exists(ckpt)) {
        throw samcl::io_error("base checkpoint missing: " + ckpt.string() + " (run 'samcl pretrain' first)");
    }
    json extra;
    samcl::SegModel model = samcl::SegModel::load(ckpt, &extra);
    if (!extra.contains("fingerprint") ||
        extra.at("fingerprint").get<std::uint64_t>() != cfg.pretrain_fingerprint()) {
        throw samcl::validation_error("base checkpoint does not match this config/seed; rerun 'samcl pretrain'");
    }
    if (!model.frozen()) throw samcl::invariant_violation("base checkpoint is not frozen");
    return model;
}

void print_run_summary(const samcl::RunRecord& rec) {
    const json s = rec.summary();
    auto line = [&](const char* metric) {
        const json& m = s.at(metric);
        std::cout << "  " << std::left << std::setw(5) << metric << "  AA " << std::fixed
                  << std::setprecision(4) << m.at("aa").get<double>() << "  FM "
                  << m.at("fm").get<double>();
        if (!m.at("ft").is_null()) std::cout << "  FT " << m.at("ft").get<double>();
        std::cout << "\n";
    };
    std::cout << "mode " << rec.mode << "\n";
    line("miou");
    line("mf1");
    line("mmae");
}

int run_single(const samcl::RunConfig& cfg, samcl::SegModel& model, const fs::path& dir) {
    samcl::TaskStream stream = build_stream(cfg);
    fs::create_directories(dir);
    {
        std::ofstream cfg_echo(dir / "config.txt");
        cfg_echo << cfg.to_text();
    }
    samcl::RunRecord rec;
    try {
        if (cfg.mode == "baseline-lora") {
            rec = samcl::baseline_sequential(model, stream, cfg.train, &dir);
        } else {
            const auto mode = cfg.mode == "samcl-oracle" ? samcl::SelectionMode::oracle
                                                         : samcl::SelectionMode::learned;
            rec = samcl::run_continual(model, stream, cfg.train, mode, &dir, &rec);
        }
    } catch (...) {
        samcl::write_run_dir(dir, rec, /*failed=*/true);
        std::cerr << "run failed; partial artifacts in " << dir.string() << "\n";
        throw;
    }
    samcl::write_run_dir(dir, rec);
    if (cfg.dump_masks) samcl::dump_masks(dir / "masks", model, rec, stream);
    print_run_summary(rec);
    std::cout << "artifacts in " << dir.string() << "\n";
    return 0;
}

int cmd_run(const CliOptions& opt) {
    samcl::RunConfig cfg = load_config(opt);
    const fs::path root = resolve_out_root(cfg, opt);
    samcl::SegModel model = load_base(cfg, root);
    const fs::path dir = fresh_dir(root / (cfg.mode + "-seed" + std::to_string(cfg.train.seed) +
                                           "-order" + std::to_string(cfg.order)));
    return run_single(cfg, model, dir);
}

std::pair<std::string, std::vector<std::string>> parse_sweep(const std::string& sweep) {
    const auto eq = sweep.find('=');
    if (eq == std::string::npos) {
        throw samcl::validation_error("--sweep expects kind=v1,v2,... (kinds: variant, block, buffer, order)");
    }
    const std::string kind = sweep.substr(0, eq);
    std::vector<std::string> values;
    std::stringstream ss(sweep.substr(eq + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) values.push_back(item);
    }
    if (values.empty()) throw samcl::validation_error("--sweep: empty value grid");
    return {kind, values};
}

int cmd_ablate(const CliOptions& opt) {
    samcl::RunConfig cfg = load_config(opt);
    const fs::path root = resolve_out_root(cfg, opt);
    samcl::SegModel model = load_base(cfg, root);
    const auto [kind, values] = parse_sweep(opt.sweep);
    if (kind != "variant" && kind != "block" && kind != "buffer" && kind != "order") {
        throw samcl::validation_error("--sweep: unknown kind '" + kind + "'");
    }

    const fs::path sweep_root = fresh_dir(root / ("ablate-" + kind));
    fs::create_directories(sweep_root);
    json table = json::array();
    std::cout << "sweep " << kind << " over " << values.size() << " cells\n";

    for (const std::string& value : values) {
        samcl::RunConfig cell = cfg;
        if (kind == "variant") cell.train.variant = samcl::variant_from_name(value);
        else if (kind == "block") cell.train.start_block = static_cast<std::size_t>(std::stoull(value));
        else if (kind == "buffer") cell.train.buffer_cap = static_cast<std::size_t>(std::stoull(value));
        else cell.order = static_cast<std::size_t>(std::stoull(value));
        cell.validate();

        const fs::path dir = sweep_root / (kind + "-" + value);
        std::cout << "-- cell " << value << "\n";
        run_single(cell, model, dir);

        const json summary = samcl::read_json(dir / "summary.json");
        json row;
        row["cell"] = value;
        row["dir"] = dir.string();
        row["aa_miou"] = summary.at("miou").at("aa");
        row["fm_miou"] = summary.at("miou").at("fm");
        row["ft_miou"] = summary.at("miou").at("ft");
        row["selection_accuracy"] = summary.at("selection_accuracy").back();
        const std::size_t k = cell.train.resolve_start_block(cell.model);
        std::vector<std::pair<std::size_t, std::size_t>> dims;
        for (const auto& s : samcl::injection_sites(cell.model, k)) dims.emplace_back(s.d_in, s.d_out);
        row["stored_bytes_per_task"] =
            samcl::count_params(cell.train.variant, dims, cell.train.rank).stored_bytes;
        table.push_back(std::move(row));
    }

    samcl::write_json(sweep_root / "report.json", table);
    std::ofstream tsv(sweep_root / "report.tsv");
    tsv << "cell\taa_miou\tfm_miou\tft_miou\tselection_accuracy\tstored_bytes_per_task\n";
    for (const auto& row : table) {
        tsv << row.at("cell").get<std::string>() << "\t" << row.at("aa_miou").dump() << "\t"
            << row.at("fm_miou").dump() << "\t" << row.at("ft_miou").dump() << "\t"
            << row.at("selection_accuracy").dump() << "\t"
            << row.at("stored_bytes_per_task").dump() << "\n";
    }
    std::cout << "sweep report in " << sweep_root.string() << "\n";
    return 0;
}

int cmd_report(const CliOptions& opt) {
    if (opt.run_dirs.empty()) throw samcl::validation_error("report: no run directories given");
    struct Row {
        std::string dir;
        json summary;
    };
    std::vector<Row> rows;
    std::vector<std::string> skipped;
    for (const std::string& dir : opt.run_dirs) {
        try {
            rows.push_back({dir, samcl::read_json(fs::path(dir) / "summary.json")});
        } catch (const samcl::error& e) {
            skipped.push_back(dir + ": " + e.what());
        }
    }

    auto metric_cols = [](const json& s, const char* metric, const char* field) -> std::string {
        const json& v = s.at(metric).at(field);
        if (v.is_null()) return "-";
        std::ostringstream os;
        os << std::fixed << std::setprecision(4) << v.get<double>();
        return os.str();
    };

    std::cout << std::left << std::setw(36) << "run" << std::setw(14) << "mode";
    for (const char* h : {"AA-mIoU", "AA-mF1", "AA-mMAE", "FM-mIoU", "FM-mF1", "FM-mMAE",
                          "FT-mIoU", "FT-mF1", "FT-mMAE"}) {
        std::cout << std::setw(9) << h;
    }
    std::cout << "\n";
    for (const Row& r : rows) {
        std::cout << std::left << std::setw(36) << r.dir << std::setw(14)
                  << r.summary.at("mode").get<std::string>();
        for (const char* metric : {"miou", "mf1", "mmae"}) {
            std::cout << std::setw(9) << metric_cols(r.summary, metric, "aa");
        }
        for (const char* metric : {"miou", "mf1", "mmae"}) {
            std::cout << std::setw(9) << metric_cols(r.summary, metric, "fm");
        }
        for (const char* metric : {"miou", "mf1", "mmae"}) {
            std::cout << std::setw(9) << metric_cols(r.summary, metric, "ft");
        }
        std::cout << "\n";
    }

    std::cout << "\nper-task final mIoU\n";
    for (const Row& r : rows) {
        std::cout << std::left << std::setw(36) << r.dir;
        const json& tasks = r.summary.at("tasks");
        const json& final_row = r.summary.at("miou").at("final_row");
        for (std::size_t i = 0; i < final_row.size(); ++i) {
            std::cout << tasks[i].get<std::string>() << "=" << std::fixed << std::setprecision(4)
                      << final_row[i].get<double>() << " ";
        }
        std::cout << "\n";
    }

    if (!skipped.empty()) {
        std::cerr << "skipped corrupt run dirs:\n";
        for (const auto& s : skipped) std::cerr << "  " << s << "\n";
        return 4;
    }
    return 0;
}

int cmd_gen_data(const CliOptions& opt) {
    samcl::RunConfig cfg = load_config(opt);
    const fs::path root = resolve_out_root(cfg, opt);
    std::vector<samcl::DomainKind> kinds = samcl::default_domain_order();
    kinds.push_back(samcl::DomainKind::base_blob);
    for (samcl::DomainKind kind : kinds) {
        samcl::DomainSpec spec = samcl::DomainSpec::preset(
            kind, samcl::mix_seed(cfg.train.seed, std::string("domain-") + samcl::domain_name(kind)));
        for (const char* split : {"train", "test"}) {
            const bool is_train = std::string(split) == "train";
            const bool is_base = kind == samcl::DomainKind::base_blob;
            const std::size_t n = is_base ? (is_train ? cfg.data.base_train : cfg.data.base_test)
                                          : (is_train ? cfg.data.train_per_task : cfg.data.test_per_task);
            const std::string stream_label = is_base ? (is_train ? "base-train" : "base-test")
                                                     : (is_train ? "train-split" : "test-split");
            auto samples = samcl::generate_domain(spec, n, samcl::mix_seed(cfg.train.seed, stream_label),
                                                  -1, cfg.model.image_size, cfg.data.prompts);
            const fs::path dir = root / "data" / samcl::domain_name(kind) / split;
            samcl::dump_dataset(dir, spec, samples, cfg.data.prompts);
            std::cout << "wrote " << samples.size() << " samples to " << dir.string() << "\n";
        }
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"samcl: continual segmentation with per-task low-rank adapters and a module selector"};
    app.require_subcommand(1);

    CliOptions opt;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config_path, "configuration file (key = value lines)");
        sub->add_option("--seed", opt.seed, "override the config seed");
        sub->add_option("--out", opt.out, "output root (default: $SAMCL_OUT_ROOT or config out_dir)");
    };

    CLI::App* pre = app.add_subcommand("pretrain", "train and freeze the base model");
    add_common(pre);
    CLI::App* run = app.add_subcommand("run", "one continual run (samcl | samcl-oracle | baseline-lora)");
    add_common(run);
    run->add_option("--mode", opt.mode, "samcl | samcl-oracle | baseline-lora");
    run->add_option("--order", opt.order, "task-order permutation id");
    CLI::App* abl = app.add_subcommand("ablate", "sweep one knob across full runs");
    add_common(abl);
    abl->add_option("--mode", opt.mode, "mode used for each cell");
    abl->add_option("--sweep", opt.sweep, "variant=...|block=...|buffer=...|order=...")->required();
    CLI::App* rep = app.add_subcommand("report", "consolidate run directories into tables");
    rep->add_option("dirs", opt.run_dirs, "run directories");
    CLI::App* gen = app.add_subcommand("gen-data", "dump the synthetic datasets to disk");
    add_common(gen);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (pre->parsed()) return cmd_pretrain(opt);
        if (run->parsed()) return cmd_run(opt);
        if (abl->parsed()) return cmd_ablate(opt);
        if (rep->parsed()) return cmd_report(opt);
        if (gen->parsed()) return cmd_gen_data(opt);
    } catch (const samcl::io_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const samcl::invariant_violation& e) {
        std::cerr << "invariant violation: " << e.what() << "\n";
        return 3;
    } catch (const samcl::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        std::cerr << "usage: samcl [pretrain|run|ablate|report|gen-data] --config PATH [--seed N] "
                     "[--out DIR] [--mode M] [--sweep SPEC]\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
