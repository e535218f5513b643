#pragma once

// The Module Selector: a capped per-task store of pooled block-k
// embeddings plus a 4-layer MLP (D -> D -> D/4 -> D/4 -> T, GELU between)
// trained from scratch with cross entropy every time a task arrives.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "samcl/errors.hpp"
#include "samcl/optim.hpp"
#include "samcl/rng.hpp"
#include "samcl/serialize.hpp"
#include "samcl/tensor.hpp"

namespace samcl {

class EmbeddingBuffer {
public:
    EmbeddingBuffer() = default;
    EmbeddingBuffer(std::size_t dim, std::size_t cap) : dim_(dim), cap_(cap) {
        if (dim == 0 || cap == 0) throw validation_error("EmbeddingBuffer: dim and cap must be positive");
    }

    std::size_t dim() const { return dim_; }
    std::size_t cap() const { return cap_; }
    std::size_t task_count() const { return per_task_.size(); }

    const std::vector<Tensor>& task_embeddings(std::size_t task) const { return per_task_.at(task); }

    // Stores min(cap, available) embeddings for the next task id, chosen by
    // seeded uniform sampling without replacement. Earlier tasks are never
    // touched.
    void add_task(int task_id, const std::vector<Tensor>& embeddings, std::uint64_t seed) {
        if (task_id != static_cast<int>(per_task_.size())) {
            throw state_error("EmbeddingBuffer: expected task " + std::to_string(per_task_.size()) +
                              ", got " + std::to_string(task_id) +
                              (task_id < static_cast<int>(per_task_.size()) ? " (duplicate)" : ""));
        }
        if (embeddings.empty()) throw validation_error("EmbeddingBuffer: no embeddings supplied");
        for (const Tensor& e : embeddings) {
            if (e.rank() != 1 || e.dim(0) != dim_) {
                throw dimension_error("EmbeddingBuffer: embedding " + shape_str(e.shape()) +
                                      " does not match dim " + std::to_string(dim_));
            }
        }
        Rng rng(seed);
        const std::size_t take = std::min(cap_, embeddings.size());
        auto picks = rng.sample_without_replacement(embeddings.size(), take);
        std::vector<Tensor> kept;
        kept.reserve(take);
        for (std::size_t p : picks) {
            kept.push_back(Tensor::from_data({dim_}, embeddings[p].values()));
        }
        per_task_.push_back(std::move(kept));
    }

    std::size_t total_vectors() const {
        std::size_t n = 0;
        for (const auto& t : per_task_) n += t.size();
        return n;
    }

    std::size_t bytes() const { return total_vectors() * dim_ * sizeof(double); }

    std::uint64_t content_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& task : per_task_) {
            for (const Tensor& e : task) h = hash_tensor(e, h);
        }
        return h;
    }

    void save(const std::filesystem::path& path) const {
        nlohmann::json meta;
        meta["dim"] = dim_;
        meta["cap"] = cap_;
        std::vector<std::size_t> counts;
        for (const auto& t : per_task_) counts.push_back(t.size());
        meta["counts"] = counts;
        NamedTensors nt;
        for (std::size_t t = 0; t < per_task_.size(); ++t) {
            Tensor block = Tensor::zeros({per_task_[t].size(), dim_});
            for (std::size_t i = 0; i < per_task_[t].size(); ++i) {
                const auto& v = per_task_[t][i].values();
                std::copy(v.begin(), v.end(), block.data() + i * dim_);
            }
            nt.add("task" + std::to_string(t), std::move(block));
        }
        write_container(path, FileKind::buffer, meta, nt);
    }

    static EmbeddingBuffer load(const std::filesystem::path& path) {
        Container c = read_container(path, FileKind::buffer);
        EmbeddingBuffer buf(c.meta.at("dim").get<std::size_t>(), c.meta.at("cap").get<std::size_t>());
        const auto counts = c.meta.at("counts").get<std::vector<std::size_t>>();
        for (std::size_t t = 0; t < counts.size(); ++t) {
            const Tensor& block = c.tensors.get("task" + std::to_string(t));
            std::vector<Tensor> vecs;
            for (std::size_t i = 0; i < counts[t]; ++i) {
                std::vector<double> row(block.data() + i * buf.dim_, block.data() + (i + 1) * buf.dim_);
                vecs.push_back(Tensor::from_data({buf.dim_}, std::move(row)));
            }
            buf.per_task_.push_back(std::move(vecs));
        }
        return buf;
    }

private:
    std::size_t dim_ = 0;
    std::size_t cap_ = 0;
    std::vector<std::vector<Tensor>> per_task_;
};

struct SelectionResult {
    int task_id = -1;
    std::vector<double> logits;
    std::size_t extraction_block = 0;
};

struct SelectorTrainConfig {
    std::size_t epochs = 25;
    double lr = 0.005;
    std::size_t batch_size = 32;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
};

class SelectorMLP {
public:
    SelectorMLP() = default;

    static SelectorMLP create(std::size_t dim, std::size_t tasks, std::uint64_t seed) {
        if (dim % 4 != 0) throw validation_error("SelectorMLP: embedding dim must be divisible by 4");
        if (tasks == 0) throw validation_error("SelectorMLP: need at least one task");
        SelectorMLP s;
        s.dim_ = dim;
        s.tasks_ = tasks;
        Rng rng(mix_seed(seed, "selector-init"));
        s.l1_.init(dim, dim, rng);
        s.l2_.init(dim / 4, dim, rng);
        s.l3_.init(dim / 4, dim / 4, rng);
        s.l4_.init(tasks, dim / 4, rng);
        for (Tensor t : s.params()) t.set_requires_grad(true);
        return s;
    }

    std::size_t dim() const { return dim_; }
    std::size_t tasks() const { return tasks_; }

    Tensor forward(const Tensor& batch) const {
        if (batch.rank() != 2 || batch.dim(1) != dim_) {
            throw dimension_error("SelectorMLP::forward: batch " + shape_str(batch.shape()) +
                                  " does not match dim " + std::to_string(dim_));
        }
        Tensor h1 = gelu(l1_.forward(batch));
        Tensor h2 = gelu(l2_.forward(h1));
        Tensor h3 = gelu(l3_.forward(h2));
        return l4_.forward(h3);
    }

    // Argmax with deterministic tie-break toward the lower task id.
    SelectionResult predict(const Tensor& embedding) const {
        if (embedding.rank() != 1 || embedding.dim(0) != dim_) {
            throw dimension_error("SelectorMLP::predict: embedding " + shape_str(embedding.shape()) +
                                  " does not match dim " + std::to_string(dim_));
        }
        ++predict_calls_;
        Tensor logits = forward(reshape(embedding, {1, dim_}));
        SelectionResult res;
        res.logits.assign(logits.data(), logits.data() + tasks_);
        res.task_id = 0;
        for (std::size_t j = 1; j < tasks_; ++j) {
            if (res.logits[j] > res.logits[static_cast<std::size_t>(res.task_id)]) {
                res.task_id = static_cast<int>(j);
            }
        }
        return res;
    }

    std::vector<Tensor> params() const {
        return {l1_.weight, l1_.bias, l2_.weight, l2_.bias,
                l3_.weight, l3_.bias, l4_.weight, l4_.bias};
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const Tensor& t : params()) n += t.size();
        return n;
    }

    std::uint64_t weights_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const Tensor& t : params()) h = hash_tensor(t, h);
        return h;
    }

    std::uint64_t predict_calls() const { return predict_calls_; }
    void reset_predict_calls() { predict_calls_ = 0; }

    void save(const std::filesystem::path& path) const {
        nlohmann::json meta;
        meta["dim"] = dim_;
        meta["tasks"] = tasks_;
        NamedTensors nt;
        const char* names[] = {"l1.w", "l1.b", "l2.w", "l2.b", "l3.w", "l3.b", "l4.w", "l4.b"};
        auto ps = params();
        for (std::size_t i = 0; i < ps.size(); ++i) nt.add(names[i], ps[i]);
        write_container(path, FileKind::selector, meta, nt);
    }

    static SelectorMLP load(const std::filesystem::path& path) {
        Container c = read_container(path, FileKind::selector);
        SelectorMLP s = create(c.meta.at("dim").get<std::size_t>(),
                               c.meta.at("tasks").get<std::size_t>(), 0);
        const char* names[] = {"l1.w", "l1.b", "l2.w", "l2.b", "l3.w", "l3.b", "l4.w", "l4.b"};
        auto ps = s.params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            const Tensor& src = c.tensors.get(names[i]);
            if (src.shape() != ps[i].shape()) {
                throw io_error("selector checkpoint: tensor '" + std::string(names[i]) +
                               "' shape mismatch");
            }
            ps[i].values() = src.values();
        }
        return s;
    }

    double last_train_accuracy = 0.0;

private:
    struct Layer {
        Tensor weight, bias;
        void init(std::size_t d_out, std::size_t d_in, Rng& rng) {
            weight = Tensor::randn({d_out, d_in}, rng, 1.0 / std::sqrt(static_cast<double>(d_in)))
                         .set_requires_grad(true);
            bias = Tensor::zeros({d_out}).set_requires_grad(true);
        }
        Tensor forward(const Tensor& x) const { return add_rowvec(matmul_nt(x, weight), bias); }
    };

    std::size_t dim_ = 0;
    std::size_t tasks_ = 0;
    Layer l1_, l2_, l3_, l4_;
    mutable std::uint64_t predict_calls_ = 0;
};

// Fresh MLP (output width = buffered task count) trained from scratch on
// the whole buffer with cross entropy.
inline SelectorMLP train_selector(const EmbeddingBuffer& buffer, const SelectorTrainConfig& cfg) {
    if (buffer.task_count() == 0) throw state_error("train_selector: buffer is empty");
    if (cfg.epochs == 0 || cfg.epochs > 25) {
        throw validation_error("train_selector: epochs must be in [1, 25]");
    }
    SelectorMLP mlp = SelectorMLP::create(buffer.dim(), buffer.task_count(), cfg.seed);

    std::vector<std::pair<const Tensor*, int>> dataset;
    for (std::size_t t = 0; t < buffer.task_count(); ++t) {
        for (const Tensor& e : buffer.task_embeddings(t)) {
            dataset.emplace_back(&e, static_cast<int>(t));
        }
    }
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW opt(mlp.params(), ocfg);

    Rng order_rng(mix_seed(cfg.seed, "selector-order"));
    std::vector<std::size_t> idx(dataset.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t steps_per_epoch = (dataset.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(idx);
        for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(idx.size(), start + cfg.batch_size);
            Tensor batch = Tensor::zeros({end - start, buffer.dim()});
            std::vector<int> labels(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto& [emb, label] = dataset[idx[i]];
                std::copy(emb->data(), emb->data() + buffer.dim(),
                          batch.data() + (i - start) * buffer.dim());
                labels[i - start] = label;
            }
            GradTape tape;
            TapeScope scope(tape);
            Tensor loss = cross_entropy_logits(mlp.forward(batch), labels);
            opt.zero_grad();
            tape.backward(loss);
            opt.set_lr(cosine_lr(cfg.lr, step, total_steps));
            opt.step();
            ++step;
        }
    }

    std::size_t correct = 0;
    for (const auto& [emb, label] : dataset) {
        if (mlp.predict(*emb).task_id == label) ++correct;
    }
    mlp.reset_predict_calls();
    mlp.last_train_accuracy = static_cast<double>(correct) / static_cast<double>(dataset.size());
    return mlp;
}

// ---- storage accounting -------------------------------------------------

struct StorageReport {
    std::size_t buffer_bytes = 0;    // actual vectors held
    std::size_t selector_bytes = 0;  // MLP parameters
    std::size_t per_task_bytes = 0;  // capacity cost of one task: cap * D * float_bytes
    double raw_image_ratio = 0.0;    // raw image bytes / one embedding's bytes
};

struct StorageScale {
    std::size_t float_bytes = sizeof(double);
    std::size_t image_channels = 3;
    std::size_t image_h = 64;
    std::size_t image_w = 64;
    std::size_t image_byte_depth = 1;
};

inline StorageReport storage_report(std::size_t dim, std::size_t cap,
                                    const std::vector<std::size_t>& per_task_counts,
                                    std::size_t selector_params, const StorageScale& scale) {
    StorageReport r;
    for (std::size_t n : per_task_counts) r.buffer_bytes += n * dim * scale.float_bytes;
    r.selector_bytes = selector_params * scale.float_bytes;
    r.per_task_bytes = cap * dim * scale.float_bytes;
    r.raw_image_ratio =
        static_cast<double>(scale.image_channels * scale.image_h * scale.image_w * scale.image_byte_depth) /
        static_cast<double>(dim * scale.float_bytes);
    return r;
}

inline StorageReport storage_report(const EmbeddingBuffer& buffer, const SelectorMLP& mlp,
                                    const StorageScale& scale) {
    std::vector<std::size_t> counts;
    for (std::size_t t = 0; t < buffer.task_count(); ++t) {
        counts.push_back(buffer.task_embeddings(t).size());
    }
    return storage_report(buffer.dim(), buffer.cap(), counts, mlp.param_count(), scale);
}

} // namespace samcl
