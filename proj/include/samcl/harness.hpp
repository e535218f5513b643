#pragma once

// The continual loop: per-task adapter training on a frozen base, embedding
// buffering, selector retraining, task-agnostic evaluation with the
// cached-prefix resume path, the sequential-LoRA baseline, and the sweep
// drivers for ablations.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "samcl/adapters.hpp"
#include "samcl/errors.hpp"
#include "samcl/losses.hpp"
#include "samcl/metrics.hpp"
#include "samcl/model.hpp"
#include "samcl/optim.hpp"
#include "samcl/rng.hpp"
#include "samcl/selector.hpp"
#include "samcl/synth.hpp"
#include "samcl/tensor.hpp"

namespace samcl {

struct TrainConfig {
    std::size_t epochs = 20;
    double lr = 0.005;
    std::size_t rank = 4; // desk-scale default; the reference setting uses 10
    std::size_t batch_size = 8;
    std::size_t start_block = 0; // 0 = auto (n/2)
    std::size_t buffer_cap = 300;
    double weight_decay = 0.01;
    AdapterVariant variant = AdapterVariant::augmodule;
    std::size_t selector_epochs = 25;
    double selector_lr = 0.005;
    std::size_t selector_batch = 32;
    std::uint64_t seed = 42;

    std::size_t resolve_start_block(const ModelConfig& model) const {
        const std::size_t k = start_block == 0 ? model.num_blocks / 2 : start_block;
        if (k == 0 || k >= model.num_blocks) {
            throw validation_error("TrainConfig: start block " + std::to_string(k) +
                                   " must satisfy 0 < k < " + std::to_string(model.num_blocks));
        }
        return k;
    }

    void validate(const ModelConfig& model) const {
        if (lr <= 0.0 || selector_lr <= 0.0) throw validation_error("TrainConfig: learning rates must be positive");
        if (rank == 0) throw validation_error("TrainConfig: rank must be positive");
        if (batch_size == 0 || selector_batch == 0) throw validation_error("TrainConfig: batch sizes must be positive");
        if (buffer_cap == 0) throw validation_error("TrainConfig: buffer cap must be positive");
        if (selector_epochs == 0 || selector_epochs > 25) {
            throw validation_error("TrainConfig: selector epochs must be in [1, 25]");
        }
        resolve_start_block(model);
    }

    nlohmann::json to_json() const {
        return {{"epochs", epochs},
                {"lr", lr},
                {"rank", rank},
                {"batch_size", batch_size},
                {"start_block", start_block},
                {"buffer_cap", buffer_cap},
                {"weight_decay", weight_decay},
                {"variant", variant_name(variant)},
                {"selector_epochs", selector_epochs},
                {"selector_lr", selector_lr},
                {"selector_batch", selector_batch},
                {"seed", seed}};
    }
};

// ---- task streams ------------------------------------------------------------

struct TaskEntry {
    DomainSpec spec;
    std::string name;
    std::vector<Sample> train;
    std::vector<Sample> test;
};

struct TaskStream {
    std::vector<TaskEntry> tasks;
    std::size_t permutation_id = 0;
};

inline std::vector<DomainKind> permuted_domain_order(std::size_t permutation_id) {
    std::vector<DomainKind> order = default_domain_order();
    for (std::size_t i = 0; i < permutation_id; ++i) {
        if (!std::next_permutation(order.begin(), order.end())) {
            throw validation_error("permuted_domain_order: permutation id " +
                                   std::to_string(permutation_id) + " out of range");
        }
    }
    return order;
}

inline TaskStream make_stream(const std::vector<DomainKind>& order, std::size_t train_n,
                              std::size_t test_n, std::uint64_t seed, std::size_t image_size,
                              int prompts, std::size_t permutation_id = 0) {
    TaskStream stream;
    stream.permutation_id = permutation_id;
    int id = 0;
    for (DomainKind kind : order) {
        TaskEntry entry;
        entry.spec = DomainSpec::preset(kind, mix_seed(seed, std::string("domain-") + domain_name(kind)));
        entry.name = domain_name(kind);
        entry.train = generate_domain(entry.spec, train_n, mix_seed(seed, "train-split"), id,
                                      image_size, prompts);
        entry.test = generate_domain(entry.spec, test_n, mix_seed(seed, "test-split"), id,
                                     image_size, prompts);
        stream.tasks.push_back(std::move(entry));
        ++id;
    }
    return stream;
}

inline TaskStream make_default_stream(std::size_t train_n, std::size_t test_n, std::uint64_t seed,
                                      std::size_t image_size = 64, int prompts = 3,
                                      std::size_t permutation_id = 0) {
    return make_stream(permuted_domain_order(permutation_id), train_n, test_n, seed, image_size,
                       prompts, permutation_id);
}

// ---- per-task adapter training -------------------------------------------------

inline bool mask_empty(const Tensor& mask) {
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask.data()[i] != 0.0) return false;
    }
    return true;
}

inline AugModuleSet train_task(SegModel& model, const std::vector<Sample>& train_samples,
                               const TrainConfig& cfg, int task_id, std::uint64_t seed) {
    if (!model.frozen()) throw state_error("train_task: base model must be frozen");
    const std::size_t k = cfg.resolve_start_block(model.config());
    AugModuleSet set = make_adapter_set(cfg.variant, injection_sites(model.config(), k), cfg.rank,
                                        k, task_id, seed);
    const std::uint64_t base_hash = model.weights_hash();

    std::vector<Tensor> params = set.trainable_params();
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW opt(params, ocfg);

    Rng order_rng(mix_seed(seed, "task-order"));
    std::vector<std::size_t> idx(train_samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t steps_per_epoch = (train_samples.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(idx);
        for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(idx.size(), start + cfg.batch_size);
            opt.zero_grad();
            for (std::size_t i = start; i < end; ++i) {
                const Sample& s = train_samples[idx[i]];
                if (mask_empty(s.mask)) {
                    std::cerr << "[samcl] warning: skipping sample with empty mask\n";
                    continue;
                }
                GradTape tape;
                TapeScope scope(tape);
                Tensor hm = model.heatmap_for(s.prompts);
                auto enc = model.encode(s.image, &set, &hm);
                auto dec = model.decode(enc.tokens(), hm);
                Tensor loss = scalar_mul(loss_seg(dec.mask_logits, s.mask, dec.predicted_iou),
                                         1.0 / static_cast<double>(end - start));
                tape.backward(loss);
            }
            opt.set_lr(cosine_lr(cfg.lr, step, total_steps));
            opt.step();
            ++step;
        }
    }

    if (model.weights_hash() != base_hash) {
        throw invariant_violation("train_task: frozen base weights changed during adapter training");
    }
    return set;
}

// ---- embeddings ------------------------------------------------------------------

inline Tensor embedding_at_block(const SegModel& model, const SegModel::PrefixResult& prefix,
                                 std::size_t k) {
    if (k == 0 || k > prefix.block_outputs.size()) {
        throw state_error("embedding_at_block: block " + std::to_string(k) + " not in prefix of " +
                          std::to_string(prefix.block_outputs.size()) + " blocks");
    }
    return model.pooled_embedding(prefix.block_outputs[k - 1]);
}

inline std::vector<Tensor> collect_embeddings(const SegModel& model,
                                              const std::vector<Sample>& samples, std::size_t k) {
    std::vector<Tensor> out;
    out.reserve(samples.size());
    for (const Sample& s : samples) {
        auto prefix = model.encode_prefix(s.image, k);
        out.push_back(embedding_at_block(model, prefix, k));
    }
    return out;
}

// ---- task-agnostic inference -------------------------------------------------------

struct ModuleSet {
    std::vector<AugModuleSet> modules; // index = task id

    const AugModuleSet& at(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= modules.size()) {
            throw state_error("ModuleSet: no module for task id " + std::to_string(id));
        }
        return modules[static_cast<std::size_t>(id)];
    }
};

struct InferResult {
    Tensor mask_logits;
    double predicted_iou = 0.0;
    SelectionResult selection;
};

// One prefix pass, one selector pass, then resume from the cached block-k
// activation with the selected module. Blocks <= k are never recomputed.
inline InferResult infer_with_selection(const SegModel& model, const ModuleSet& modules,
                                        const SelectorMLP& selector, const Tensor& image,
                                        const PromptSet& prompts, std::size_t k) {
    if (modules.modules.empty()) throw state_error("infer_with_selection: empty module set");
    auto prefix = model.encode_prefix(image, k);
    Tensor embedding = embedding_at_block(model, prefix, k);
    SelectionResult sel = selector.predict(embedding);
    sel.extraction_block = k;
    const AugModuleSet& chosen = modules.at(sel.task_id);
    Tensor hm = model.heatmap_for(prompts);
    auto rest = model.encode_resume(prefix.output(), k, &chosen, &hm);
    auto dec = model.decode(rest.back(), hm);
    InferResult res;
    res.mask_logits = dec.mask_logits;
    res.predicted_iou = dec.iou();
    res.selection = sel;
    return res;
}

// ---- run records --------------------------------------------------------------------

struct StepRecord {
    double selection_accuracy = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> per_task_selection;
    StorageReport storage;
    double train_seconds = 0.0;
    double eval_seconds = 0.0;
};

struct RunRecord {
    std::string mode;
    std::vector<std::string> task_names;
    AccuracyMatrix miou, mf1, mmae;
    std::vector<StepRecord> steps;
    nlohmann::json config_echo;
    ModuleSet modules;                   // samcl modes only
    std::optional<SelectorMLP> selector; // samcl modes only
    std::optional<EmbeddingBuffer> buffer;

    nlohmann::json metric_summary(const AccuracyMatrix& m) const {
        nlohmann::json j;
        j["aa"] = aa(m);
        j["fm"] = fm(m);
        if (m.tasks() >= 2) j["ft"] = ft(m);
        else j["ft"] = nullptr;
        nlohmann::json final_row = nlohmann::json::array();
        for (std::size_t c = 0; c < m.tasks(); ++c) final_row.push_back(m.get(m.tasks() - 1, c));
        j["final_row"] = final_row;
        return j;
    }

    nlohmann::json summary() const {
        nlohmann::json j;
        j["mode"] = mode;
        j["tasks"] = task_names;
        j["miou"] = metric_summary(miou);
        j["mf1"] = metric_summary(mf1);
        j["mmae"] = metric_summary(mmae);
        nlohmann::json sel = nlohmann::json::array();
        for (const auto& s : steps) {
            sel.push_back(std::isnan(s.selection_accuracy) ? nlohmann::json(nullptr)
                                                           : nlohmann::json(s.selection_accuracy));
        }
        j["selection_accuracy"] = sel;
        if (!steps.empty()) {
            const auto& st = steps.back().storage;
            j["storage"] = {{"buffer_bytes", st.buffer_bytes},
                            {"selector_bytes", st.selector_bytes},
                            {"per_task_bytes", st.per_task_bytes},
                            {"raw_image_ratio", st.raw_image_ratio}};
        }
        nlohmann::json per_task_sel = nlohmann::json::array();
        for (const auto& s : steps) per_task_sel.push_back(s.per_task_selection);
        j["per_task_selection"] = per_task_sel;
        j["config"] = config_echo;
        return j;
    }

    // Wall-clock per step; kept out of summary() so identical seeded runs
    // serialize identically.
    nlohmann::json timing_json() const {
        nlohmann::json timing = nlohmann::json::array();
        for (const auto& s : steps) {
            timing.push_back({{"train_seconds", s.train_seconds}, {"eval_seconds", s.eval_seconds}});
        }
        return timing;
    }
};

enum class SelectionMode { learned, oracle };

inline const char* mode_name(SelectionMode m) {
    return m == SelectionMode::oracle ? "samcl-oracle" : "samcl";
}

namespace detail {

struct TaskEval {
    double miou = 0.0, mf1 = 0.0, mmae = 0.0;
};

inline TaskEval eval_with_adapter(const SegModel& model, const AugModuleSet& set,
                                  const std::vector<Sample>& samples) {
    EvalStats s = evaluate_samples(model, &set, samples);
    return {s.miou, s.mf1, s.mmae};
}

inline TaskEval eval_with_selection(const SegModel& model, const ModuleSet& modules,
                                    const SelectorMLP& selector, const std::vector<Sample>& samples,
                                    std::size_t k, int expected_id, std::size_t* correct) {
    TaskEval out;
    for (const Sample& s : samples) {
        InferResult res = infer_with_selection(model, modules, selector, s.image, s.prompts, k);
        if (correct && res.selection.task_id == expected_id) ++(*correct);
        Tensor pred = threshold_logits(res.mask_logits);
        out.miou += iou_binary(pred, s.mask);
        out.mf1 += f1_binary(pred, s.mask);
        out.mmae += mae(sigmoid(res.mask_logits), s.mask);
    }
    const double inv = 1.0 / static_cast<double>(samples.size());
    out.miou *= inv;
    out.mf1 *= inv;
    out.mmae *= inv;
    return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace detail

// ---- the continual loop ---------------------------------------------------------------

// Artifacts land under out_dir when given: adapter files are written once
// right after training (and verified unchanged at the end), the buffer and
// selector checkpoints at completion.
inline RunRecord run_continual(SegModel& model, const TaskStream& stream, const TrainConfig& cfg,
                               SelectionMode mode,
                               const std::filesystem::path* out_dir = nullptr,
                               RunRecord* partial_sink = nullptr) {
    if (!model.frozen()) throw state_error("run_continual: base model must be frozen");
    cfg.validate(model.config());
    if (stream.tasks.empty()) throw validation_error("run_continual: empty task stream");
    const std::size_t k = cfg.resolve_start_block(model.config());
    const std::size_t t_count = stream.tasks.size();
    const std::uint64_t base_hash = model.weights_hash();

    RunRecord rec;
    rec.mode = mode_name(mode);
    rec.miou = AccuracyMatrix(t_count);
    rec.mf1 = AccuracyMatrix(t_count);
    rec.mmae = AccuracyMatrix(t_count);
    for (const auto& t : stream.tasks) rec.task_names.push_back(t.name);
    rec.config_echo = cfg.to_json();
    rec.config_echo["model"] = model.config().to_json();
    rec.config_echo["permutation_id"] = stream.permutation_id;

    EmbeddingBuffer buffer(model.config().embed_dim, cfg.buffer_cap);
    std::vector<std::uint64_t> adapter_file_hashes;

    try {
        for (std::size_t t = 0; t < t_count; ++t) {
            const TaskEntry& task = stream.tasks[t];
            StepRecord step;
            auto t0 = std::chrono::steady_clock::now();

            AugModuleSet set = train_task(model, task.train, cfg, static_cast<int>(t),
                                          mix_seed(cfg.seed, std::string("adapter-") + task.name));
            rec.modules.modules.push_back(std::move(set));
            if (out_dir) {
                const auto dir = *out_dir / "adapters";
                std::filesystem::create_directories(dir);
                const auto path = dir / ("task_" + std::to_string(t) + ".bin");
                save_adapter_set(path, rec.modules.modules.back());
                adapter_file_hashes.push_back(hash_file(path));
            }

            auto embeddings = collect_embeddings(model, task.train, k);
            buffer.add_task(static_cast<int>(t), embeddings,
                            mix_seed(cfg.seed, std::string("buffer-") + task.name));
            SelectorTrainConfig scfg;
            scfg.epochs = cfg.selector_epochs;
            scfg.lr = cfg.selector_lr;
            scfg.batch_size = cfg.selector_batch;
            scfg.weight_decay = cfg.weight_decay;
            scfg.seed = mix_seed(cfg.seed, mix_seed(static_cast<std::uint64_t>(t), "selector"));
            SelectorMLP selector = train_selector(buffer, scfg);
            step.train_seconds = detail::seconds_since(t0);

            auto e0 = std::chrono::steady_clock::now();
            std::size_t sel_correct = 0, sel_total = 0;
            step.per_task_selection.assign(t + 1, 0.0);
            for (std::size_t j = 0; j <= t; ++j) {
                std::size_t correct_j = 0;
                for (const Sample& s : stream.tasks[j].test) {
                    auto prefix = model.encode_prefix(s.image, k);
                    Tensor emb = embedding_at_block(model, prefix, k);
                    if (selector.predict(emb).task_id == static_cast<int>(j)) ++correct_j;
                }
                step.per_task_selection[j] =
                    static_cast<double>(correct_j) / static_cast<double>(stream.tasks[j].test.size());
                sel_correct += correct_j;
                sel_total += stream.tasks[j].test.size();
            }
            step.selection_accuracy = static_cast<double>(sel_correct) / static_cast<double>(sel_total);

            for (std::size_t j = 0; j <= t; ++j) {
                detail::TaskEval ev =
                    mode == SelectionMode::oracle
                        ? detail::eval_with_adapter(model, rec.modules.modules[j], stream.tasks[j].test)
                        : detail::eval_with_selection(model, rec.modules, selector,
                                                      stream.tasks[j].test, k, static_cast<int>(j),
                                                      nullptr);
                rec.miou.set(t, j, ev.miou);
                rec.mf1.set(t, j, ev.mf1);
                rec.mmae.set(t, j, ev.mmae);
            }
            if (t + 1 < t_count) {
                // Forward transfer: the next task is routed task-agnostically
                // across the modules that exist so far, in both modes.
                detail::TaskEval ev = detail::eval_with_selection(
                    model, rec.modules, selector, stream.tasks[t + 1].test, k, -1, nullptr);
                rec.miou.set(t, t + 1, ev.miou);
                rec.mf1.set(t, t + 1, ev.mf1);
                rec.mmae.set(t, t + 1, ev.mmae);
            }
            step.eval_seconds = detail::seconds_since(e0);
            step.storage = storage_report(buffer, selector, StorageScale{
                                              sizeof(double), 3, model.config().image_size,
                                              model.config().image_size, 1});
            rec.steps.push_back(std::move(step));
            rec.selector = selector;
        }
    } catch (...) {
        if (partial_sink) {
            rec.buffer = std::move(buffer);
            *partial_sink = std::move(rec);
        }
        throw;
    }
    rec.buffer = std::move(buffer);

    if (model.weights_hash() != base_hash) {
        throw invariant_violation("run_continual: frozen base weights changed during the run");
    }
    if (out_dir) {
        rec.buffer->save(*out_dir / "buffer.bin");
        rec.selector->save(*out_dir / "selector.bin");
        for (std::size_t t = 0; t < adapter_file_hashes.size(); ++t) {
            const auto path = *out_dir / "adapters" / ("task_" + std::to_string(t) + ".bin");
            if (hash_file(path) != adapter_file_hashes[t]) {
                throw invariant_violation("run_continual: adapter file for task " +
                                          std::to_string(t) + " changed after it was written");
            }
        }
    }
    return rec;
}

// Sequential fine-tuning of one vanilla LoRA adapter across the stream:
// no per-task isolation, no selector. The forgetting reference point.
inline RunRecord baseline_sequential(SegModel& model, const TaskStream& stream,
                                     const TrainConfig& cfg,
                                     const std::filesystem::path* out_dir = nullptr) {
    if (!model.frozen()) throw state_error("baseline_sequential: base model must be frozen");
    cfg.validate(model.config());
    if (stream.tasks.empty()) throw validation_error("baseline_sequential: empty task stream");
    const std::size_t k = cfg.resolve_start_block(model.config());
    const std::size_t t_count = stream.tasks.size();
    const std::uint64_t base_hash = model.weights_hash();

    RunRecord rec;
    rec.mode = "baseline-lora";
    rec.miou = AccuracyMatrix(t_count);
    rec.mf1 = AccuracyMatrix(t_count);
    rec.mmae = AccuracyMatrix(t_count);
    for (const auto& t : stream.tasks) rec.task_names.push_back(t.name);
    rec.config_echo = cfg.to_json();
    rec.config_echo["model"] = model.config().to_json();
    rec.config_echo["permutation_id"] = stream.permutation_id;
    rec.config_echo["variant"] = variant_name(AdapterVariant::vanilla);

    AugModuleSet adapter =
        make_adapter_set(AdapterVariant::vanilla, injection_sites(model.config(), k), cfg.rank, k,
                         0, mix_seed(cfg.seed, "baseline-adapter"));

    for (std::size_t t = 0; t < t_count; ++t) {
        const TaskEntry& task = stream.tasks[t];
        StepRecord step;
        auto t0 = std::chrono::steady_clock::now();

        std::vector<Tensor> params = adapter.trainable_params();
        AdamWConfig ocfg;
        ocfg.lr = cfg.lr;
        ocfg.weight_decay = cfg.weight_decay;
        AdamW opt(params, ocfg);
        Rng order_rng(mix_seed(cfg.seed, mix_seed(static_cast<std::uint64_t>(t), "baseline-order")));
        std::vector<std::size_t> idx(task.train.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        const std::size_t steps_per_epoch = (task.train.size() + cfg.batch_size - 1) / cfg.batch_size;
        const std::size_t total_steps = steps_per_epoch * cfg.epochs;
        std::size_t opt_step = 0;
        for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
            order_rng.shuffle(idx);
            for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
                const std::size_t end = std::min(idx.size(), start + cfg.batch_size);
                opt.zero_grad();
                for (std::size_t i = start; i < end; ++i) {
                    const Sample& s = task.train[idx[i]];
                    GradTape tape;
                    TapeScope scope(tape);
                    Tensor hm = model.heatmap_for(s.prompts);
                    auto enc = model.encode(s.image, &adapter, &hm);
                    auto dec = model.decode(enc.tokens(), hm);
                    Tensor loss = scalar_mul(loss_seg(dec.mask_logits, s.mask, dec.predicted_iou),
                                             1.0 / static_cast<double>(end - start));
                    tape.backward(loss);
                }
                opt.set_lr(cosine_lr(cfg.lr, opt_step, total_steps));
                opt.step();
                ++opt_step;
            }
        }
        step.train_seconds = detail::seconds_since(t0);

        auto e0 = std::chrono::steady_clock::now();
        const std::size_t upto = std::min(t + 1, t_count - 1);
        for (std::size_t j = 0; j <= upto; ++j) {
            detail::TaskEval ev = detail::eval_with_adapter(model, adapter, stream.tasks[j].test);
            rec.miou.set(t, j, ev.miou);
            rec.mf1.set(t, j, ev.mf1);
            rec.mmae.set(t, j, ev.mmae);
        }
        step.eval_seconds = detail::seconds_since(e0);
        rec.steps.push_back(std::move(step));
    }

    if (model.weights_hash() != base_hash) {
        throw invariant_violation("baseline_sequential: frozen base weights changed");
    }
    rec.modules.modules.push_back(std::move(adapter));
    if (out_dir) {
        std::filesystem::create_directories(*out_dir / "adapters");
        save_adapter_set(*out_dir / "adapters" / "task_final.bin", rec.modules.modules.back());
    }
    return rec;
}

} // namespace samcl
