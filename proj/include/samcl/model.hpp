#pragma once

// A small promptable ViT segmenter that plays the role of the frozen
// foundation model: patch embedding, pre-LN transformer blocks with named
// injection sites (attn_q, attn_v, mlp_in per block), a per-token mask
// decoder fed one pooled-heatmap channel, and an IoU prediction head.
//
// Prompts enter twice: the decoder always sees the heatmap channel, and the
// adapter path can mix a projected heatmap term into every injected site.
// encode() is literally encode_prefix() followed by encode_resume(), so the
// cached-prefix testing path is bit-identical to a full forward by
// construction.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "samcl/adapters.hpp"
#include "samcl/errors.hpp"
#include "samcl/losses.hpp"
#include "samcl/metrics.hpp"
#include "samcl/optim.hpp"
#include "samcl/rng.hpp"
#include "samcl/serialize.hpp"
#include "samcl/synth.hpp"
#include "samcl/tensor.hpp"

namespace samcl {

struct ModelConfig {
    std::size_t image_size = 64;
    std::size_t patch_size = 8;
    std::size_t embed_dim = 64;
    std::size_t num_blocks = 8;
    std::size_t num_heads = 4;
    std::size_t decoder_hidden = 64;
    double heatmap_sigma = 1.0; // in patch units

    std::size_t mlp_hidden() const { return 4 * embed_dim; }
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t tokens() const { return grid() * grid(); }
    std::size_t patch_values() const { return 3 * patch_size * patch_size; }

    void validate() const {
        if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0) {
            throw validation_error("ModelConfig: image_size must be a positive multiple of patch_size");
        }
        if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
            throw validation_error("ModelConfig: embed_dim must be a positive multiple of num_heads");
        }
        if (num_blocks == 0) throw validation_error("ModelConfig: num_blocks must be positive");
        if (decoder_hidden == 0) throw validation_error("ModelConfig: decoder_hidden must be positive");
        if (heatmap_sigma <= 0.0) throw validation_error("ModelConfig: heatmap_sigma must be positive");
    }

    nlohmann::json to_json() const {
        return {{"image_size", image_size},   {"patch_size", patch_size},
                {"embed_dim", embed_dim},     {"num_blocks", num_blocks},
                {"num_heads", num_heads},     {"decoder_hidden", decoder_hidden},
                {"heatmap_sigma", heatmap_sigma}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.image_size = j.at("image_size").get<std::size_t>();
        c.patch_size = j.at("patch_size").get<std::size_t>();
        c.embed_dim = j.at("embed_dim").get<std::size_t>();
        c.num_blocks = j.at("num_blocks").get<std::size_t>();
        c.num_heads = j.at("num_heads").get<std::size_t>();
        c.decoder_hidden = j.at("decoder_hidden").get<std::size_t>();
        c.heatmap_sigma = j.at("heatmap_sigma").get<double>();
        c.validate();
        return c;
    }
};

// The injection surface a fresh adapter set should cover: every site in
// blocks start_block+1 .. n. All three site kinds consume D-dim inputs,
// which is what lets one shared A serve every site.
inline std::vector<SiteSpec> injection_sites(const ModelConfig& cfg, std::size_t start_block) {
    if (start_block >= cfg.num_blocks) {
        throw validation_error("injection_sites: start block " + std::to_string(start_block) +
                               " leaves no blocks to adapt (n=" + std::to_string(cfg.num_blocks) + ")");
    }
    std::vector<SiteSpec> out;
    for (std::size_t b = start_block + 1; b <= cfg.num_blocks; ++b) {
        out.push_back({{b, SiteKind::attn_query}, cfg.embed_dim, cfg.embed_dim});
        out.push_back({{b, SiteKind::attn_value}, cfg.embed_dim, cfg.embed_dim});
        out.push_back({{b, SiteKind::mlp_in}, cfg.embed_dim, cfg.mlp_hidden()});
    }
    return out;
}

// Point prompts rendered as gaussian bumps on the patch grid, combined by
// elementwise max and normalized so the peak is exactly 1.
inline Tensor make_heatmap(const PromptSet& prompts, std::size_t grid_h, std::size_t grid_w,
                           std::size_t patch_size, double sigma) {
    if (prompts.points.empty()) throw validation_error("make_heatmap: need at least one point");
    if (sigma <= 0.0) throw validation_error("make_heatmap: sigma must be positive");
    const double img_h = static_cast<double>(grid_h * patch_size);
    const double img_w = static_cast<double>(grid_w * patch_size);
    Tensor hm = Tensor::zeros({grid_h, grid_w});
    for (const auto& [row, col] : prompts.points) {
        if (row < 0 || col < 0 || static_cast<double>(row) >= img_h || static_cast<double>(col) >= img_w) {
            throw validation_error("make_heatmap: point (" + std::to_string(row) + "," +
                                   std::to_string(col) + ") outside the image");
        }
        const double py = (static_cast<double>(row) + 0.5) / static_cast<double>(patch_size) - 0.5;
        const double px = (static_cast<double>(col) + 0.5) / static_cast<double>(patch_size) - 0.5;
        for (std::size_t gy = 0; gy < grid_h; ++gy) {
            for (std::size_t gx = 0; gx < grid_w; ++gx) {
                const double dy = static_cast<double>(gy) - py;
                const double dx = static_cast<double>(gx) - px;
                const double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                double& cell = hm.data()[gy * grid_w + gx];
                cell = std::max(cell, v);
            }
        }
    }
    double peak = 0.0;
    for (std::size_t i = 0; i < hm.size(); ++i) peak = std::max(peak, hm.data()[i]);
    for (std::size_t i = 0; i < hm.size(); ++i) hm.data()[i] /= peak;
    return hm;
}

struct Linear {
    Tensor weight; // [d_out, d_in]
    Tensor bias;   // [d_out]

    void init(std::size_t d_out, std::size_t d_in, Rng& rng) {
        weight = Tensor::randn({d_out, d_in}, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));
        bias = Tensor::zeros({d_out});
    }

    Tensor forward(const Tensor& x) const { return add_rowvec(matmul_nt(x, weight), bias); }
    std::size_t out_dim() const { return weight.dim(0); }
};

struct EncoderBlock {
    Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Linear attn_q, attn_k, attn_v, attn_proj;
    Linear mlp_fc1, mlp_fc2;
};

class SegModel {
public:
    SegModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(seed, "model-init"));
        const std::size_t d = cfg_.embed_dim;
        patch_.init(d, cfg_.patch_values(), rng);
        pos_embed_ = Tensor::randn({cfg_.tokens(), d}, rng, 0.02);
        blocks_.resize(cfg_.num_blocks);
        for (auto& blk : blocks_) {
            blk.ln1_g = Tensor::full({d}, 1.0);
            blk.ln1_b = Tensor::zeros({d});
            blk.ln2_g = Tensor::full({d}, 1.0);
            blk.ln2_b = Tensor::zeros({d});
            blk.attn_q.init(d, d, rng);
            blk.attn_k.init(d, d, rng);
            blk.attn_v.init(d, d, rng);
            blk.attn_proj.init(d, d, rng);
            blk.mlp_fc1.init(cfg_.mlp_hidden(), d, rng);
            blk.mlp_fc2.init(d, cfg_.mlp_hidden(), rng);
        }
        dec_fc1_.init(cfg_.decoder_hidden, d + 1, rng);
        dec_fc2_.init(cfg_.patch_size * cfg_.patch_size, cfg_.decoder_hidden, rng);
        iou_fc1_.init(cfg_.decoder_hidden, d, rng);
        iou_fc2_.init(1, cfg_.decoder_hidden, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }

    void freeze() {
        for (auto& [name, t] : named_parameters()) t.set_requires_grad(false);
        frozen_ = true;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("patch.weight", patch_.weight);
        out.emplace_back("patch.bias", patch_.bias);
        out.emplace_back("pos_embed", pos_embed_);
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            const std::string p = "block" + std::to_string(b + 1) + ".";
            EncoderBlock& blk = blocks_[b];
            out.emplace_back(p + "ln1.g", blk.ln1_g);
            out.emplace_back(p + "ln1.b", blk.ln1_b);
            out.emplace_back(p + "attn_q.w", blk.attn_q.weight);
            out.emplace_back(p + "attn_q.b", blk.attn_q.bias);
            out.emplace_back(p + "attn_k.w", blk.attn_k.weight);
            out.emplace_back(p + "attn_k.b", blk.attn_k.bias);
            out.emplace_back(p + "attn_v.w", blk.attn_v.weight);
            out.emplace_back(p + "attn_v.b", blk.attn_v.bias);
            out.emplace_back(p + "attn_proj.w", blk.attn_proj.weight);
            out.emplace_back(p + "attn_proj.b", blk.attn_proj.bias);
            out.emplace_back(p + "ln2.g", blk.ln2_g);
            out.emplace_back(p + "ln2.b", blk.ln2_b);
            out.emplace_back(p + "mlp_fc1.w", blk.mlp_fc1.weight);
            out.emplace_back(p + "mlp_fc1.b", blk.mlp_fc1.bias);
            out.emplace_back(p + "mlp_fc2.w", blk.mlp_fc2.weight);
            out.emplace_back(p + "mlp_fc2.b", blk.mlp_fc2.bias);
        }
        out.emplace_back("dec_fc1.w", dec_fc1_.weight);
        out.emplace_back("dec_fc1.b", dec_fc1_.bias);
        out.emplace_back("dec_fc2.w", dec_fc2_.weight);
        out.emplace_back("dec_fc2.b", dec_fc2_.bias);
        out.emplace_back("iou_fc1.w", iou_fc1_.weight);
        out.emplace_back("iou_fc1.b", iou_fc1_.bias);
        out.emplace_back("iou_fc2.w", iou_fc2_.weight);
        out.emplace_back("iou_fc2.b", iou_fc2_.bias);
        return out;
    }

    std::uint64_t weights_hash() {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, t] : named_parameters()) {
            h = hash_bytes(name.data(), name.size(), h);
            h = hash_tensor(t, h);
        }
        return h;
    }

    // Test fixture access.
    Linear& decoder_fc1() { return dec_fc1_; }
    Linear& decoder_fc2() { return dec_fc2_; }
    Linear& iou_fc2() { return iou_fc2_; }

    // ---- forward --------------------------------------------------------

    // Patch extraction happens outside the graph (images carry no grad).
    Tensor embed(const Tensor& image) const {
        if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != cfg_.image_size ||
            image.dim(2) != cfg_.image_size) {
            throw dimension_error("SegModel::embed: image " + shape_str(image.shape()) +
                                  " does not match config [3," + std::to_string(cfg_.image_size) +
                                  "," + std::to_string(cfg_.image_size) + "]");
        }
        const std::size_t g = cfg_.grid(), p = cfg_.patch_size, hw = cfg_.image_size;
        Tensor patches = Tensor::zeros({cfg_.tokens(), cfg_.patch_values()});
        for (std::size_t t = 0; t < cfg_.tokens(); ++t) {
            const std::size_t gy = t / g, gx = t % g;
            double* dst = patches.data() + t * cfg_.patch_values();
            std::size_t off = 0;
            for (std::size_t c = 0; c < 3; ++c) {
                for (std::size_t py = 0; py < p; ++py) {
                    const double* src = image.data() + c * hw * hw + (gy * p + py) * hw + gx * p;
                    for (std::size_t px = 0; px < p; ++px) dst[off++] = src[px];
                }
            }
        }
        return add(patch_.forward(patches), pos_embed_);
    }

    struct PrefixResult {
        std::vector<Tensor> block_outputs; // outputs of blocks 1..upto
        Tensor embedded;                   // tokens entering block 1

        const Tensor& output() const { return block_outputs.empty() ? embedded : block_outputs.back(); }
    };

    PrefixResult encode_prefix(const Tensor& image, std::size_t upto_block) const {
        if (upto_block > cfg_.num_blocks) {
            throw validation_error("encode_prefix: block " + std::to_string(upto_block) +
                                   " out of range (n=" + std::to_string(cfg_.num_blocks) + ")");
        }
        ++prefix_passes_;
        PrefixResult res;
        res.embedded = embed(image);
        Tensor x = res.embedded;
        for (std::size_t b = 1; b <= upto_block; ++b) {
            x = block_forward(b, x, nullptr, nullptr);
            res.block_outputs.push_back(x);
        }
        return res;
    }

    // Continues from the cached output of block `from_block` through block n.
    std::vector<Tensor> encode_resume(const Tensor& activation, std::size_t from_block,
                                      const AugModuleSet* adapters, const Tensor* heatmap) const {
        if (from_block > cfg_.num_blocks) {
            throw validation_error("encode_resume: from block " + std::to_string(from_block) +
                                   " out of range");
        }
        ++resume_passes_;
        Tensor prompt_term;
        const Tensor* p = nullptr;
        if (adapters) {
            validate_injection(*adapters, from_block);
            if (adapters->variant == AdapterVariant::augmodule && !adapters->sites.empty()) {
                if (!heatmap) {
                    throw state_error("encode_resume: augmodule adapters need a prompt heatmap");
                }
                prompt_term = adapters->project_prompt(heatmap_tokens(*heatmap));
                p = &prompt_term;
            }
        }
        std::vector<Tensor> outputs;
        Tensor x = activation;
        for (std::size_t b = from_block + 1; b <= cfg_.num_blocks; ++b) {
            x = block_forward(b, x, adapters, p);
            outputs.push_back(x);
        }
        return outputs;
    }

    struct EncodeResult {
        std::vector<Tensor> block_outputs; // 1..n
        const Tensor& tokens() const { return block_outputs.back(); }
    };

    EncodeResult encode(const Tensor& image, const AugModuleSet* adapters = nullptr,
                        const Tensor* heatmap = nullptr) const {
        const std::size_t split = adapters ? adapters->start_block : cfg_.num_blocks;
        if (adapters && split > cfg_.num_blocks) {
            throw validation_error("encode: adapter start block " + std::to_string(split) +
                                   " out of range");
        }
        PrefixResult pre = encode_prefix(image, split);
        std::vector<Tensor> rest = encode_resume(pre.output(), split, adapters, heatmap);
        EncodeResult res;
        res.block_outputs = std::move(pre.block_outputs);
        for (auto& t : rest) res.block_outputs.push_back(std::move(t));
        return res;
    }

    struct DecodeResult {
        Tensor mask_logits;   // [H, W]
        Tensor predicted_iou; // scalar in [0, 1]
        double iou() const { return predicted_iou.item(); }
    };

    DecodeResult decode(const Tensor& tokens, const Tensor& heatmap) const {
        if (tokens.rank() != 2 || tokens.dim(0) != cfg_.tokens() || tokens.dim(1) != cfg_.embed_dim) {
            throw dimension_error("SegModel::decode: tokens " + shape_str(tokens.shape()) +
                                  " do not match config");
        }
        Tensor hcol = reshape(heatmap_tokens(heatmap), {cfg_.tokens(), 1});
        Tensor inp = concat_cols({tokens, hcol});
        Tensor hidden = gelu(dec_fc1_.forward(inp));
        Tensor patch_logits = dec_fc2_.forward(hidden);
        DecodeResult res;
        res.mask_logits = depatchify(patch_logits, cfg_.grid(), cfg_.grid(), cfg_.patch_size);
        Tensor pooled = mean_rows(tokens);
        Tensor ih = gelu(iou_fc1_.forward(pooled));
        res.predicted_iou = sigmoid(reshape(iou_fc2_.forward(ih), {1}));
        return res;
    }

    Tensor heatmap_for(const PromptSet& prompts) const {
        return make_heatmap(prompts, cfg_.grid(), cfg_.grid(), cfg_.patch_size, cfg_.heatmap_sigma);
    }

    // [T, D] block activation -> pooled [D] embedding.
    Tensor pooled_embedding(const Tensor& block_act) const {
        Tensor as4 = reshape(block_act, {1, cfg_.grid(), cfg_.grid(), cfg_.embed_dim});
        return reshape(mean_pool_hw(as4), {cfg_.embed_dim});
    }

    void validate_injection(const AugModuleSet& set, std::size_t extraction_block) const {
        for (const auto& s : set.sites) {
            if (s.site.block <= extraction_block) {
                throw injection_error("adapter site " + s.site.str() + " is at or before block " +
                                      std::to_string(extraction_block) +
                                      "; sites must come strictly after the resume point");
            }
            if (s.site.block > cfg_.num_blocks) {
                throw injection_error("adapter site " + s.site.str() + " beyond block count " +
                                      std::to_string(cfg_.num_blocks));
            }
            const std::size_t want_out =
                s.site.kind == SiteKind::mlp_in ? cfg_.mlp_hidden() : cfg_.embed_dim;
            if (s.d_in != cfg_.embed_dim || s.d_out != want_out) {
                throw dimension_error("adapter site " + s.site.str() + " dims (" +
                                      std::to_string(s.d_in) + "," + std::to_string(s.d_out) +
                                      ") do not match the model");
            }
        }
    }

    std::uint64_t prefix_passes() const { return prefix_passes_; }
    std::uint64_t resume_passes() const { return resume_passes_; }
    void reset_pass_counters() { prefix_passes_ = 0; resume_passes_ = 0; }

    // ---- persistence ------------------------------------------------------

    void save(const std::filesystem::path& path, nlohmann::json extra_meta = {}) {
        nlohmann::json meta;
        meta["config"] = cfg_.to_json();
        meta["frozen"] = frozen_;
        if (!extra_meta.is_null()) meta["extra"] = std::move(extra_meta);
        NamedTensors nt;
        for (auto& [name, t] : named_parameters()) nt.add(name, t);
        write_container(path, FileKind::checkpoint, meta, nt);
    }

    static SegModel load(const std::filesystem::path& path, nlohmann::json* extra_meta = nullptr) {
        Container c = read_container(path, FileKind::checkpoint);
        SegModel model(ModelConfig::from_json(c.meta.at("config")), 0);
        for (auto& [name, t] : model.named_parameters()) {
            const Tensor& src = c.tensors.get(name);
            if (src.shape() != t.shape()) {
                throw io_error("checkpoint: tensor '" + name + "' has shape " +
                               shape_str(src.shape()) + ", expected " + shape_str(t.shape()));
            }
            t.values() = src.values();
        }
        if (c.meta.at("frozen").get<bool>()) model.freeze();
        if (extra_meta && c.meta.contains("extra")) *extra_meta = c.meta.at("extra");
        return model;
    }

private:
    Tensor heatmap_tokens(const Tensor& heatmap) const {
        if (heatmap.rank() != 2 || heatmap.dim(0) != cfg_.grid() || heatmap.dim(1) != cfg_.grid()) {
            throw dimension_error("heatmap " + shape_str(heatmap.shape()) + " does not match patch grid " +
                                  std::to_string(cfg_.grid()) + "x" + std::to_string(cfg_.grid()));
        }
        return reshape(heatmap, {cfg_.tokens()});
    }

    Tensor site_linear(const Linear& lin, SiteId id, const Tensor& x, const AugModuleSet* set,
                       const Tensor* p) const {
        Tensor base = lin.forward(x);
        if (set) {
            if (const AdapterSite* s = set->find(id)) return set->apply(*s, base, x, p);
        }
        return base;
    }

    Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v) const {
        const std::size_t heads = cfg_.num_heads;
        const std::size_t dh = cfg_.embed_dim / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<Tensor> outs;
        outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
            Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
            Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
            Tensor attn = softmax_rows(scalar_mul(matmul_nt(qh, kh), scale));
            outs.push_back(matmul(attn, vh));
        }
        return concat_cols(outs);
    }

    Tensor block_forward(std::size_t block_no, const Tensor& x, const AugModuleSet* set,
                         const Tensor* p) const {
        const EncoderBlock& blk = blocks_[block_no - 1];
        Tensor a = layer_norm_rows(x, blk.ln1_g, blk.ln1_b);
        Tensor q = site_linear(blk.attn_q, {block_no, SiteKind::attn_query}, a, set, p);
        Tensor k = blk.attn_k.forward(a);
        Tensor v = site_linear(blk.attn_v, {block_no, SiteKind::attn_value}, a, set, p);
        Tensor o = blk.attn_proj.forward(multihead_attention(q, k, v));
        Tensor h = add(x, o);
        Tensor m = layer_norm_rows(h, blk.ln2_g, blk.ln2_b);
        Tensor f = site_linear(blk.mlp_fc1, {block_no, SiteKind::mlp_in}, m, set, p);
        return add(h, blk.mlp_fc2.forward(gelu(f)));
    }

    ModelConfig cfg_;
    Linear patch_;
    Tensor pos_embed_;
    std::vector<EncoderBlock> blocks_;
    Linear dec_fc1_, dec_fc2_, iou_fc1_, iou_fc2_;
    bool frozen_ = false;
    mutable std::uint64_t prefix_passes_ = 0;
    mutable std::uint64_t resume_passes_ = 0;
};

// ---- shared evaluation helpers ---------------------------------------------

struct EvalStats {
    double miou = 0.0;
    double mf1 = 0.0;
    double mmae = 0.0;
};

struct SegmentOutput {
    Tensor mask_logits;
    Tensor pred_mask;
    double predicted_iou = 0.0;
};

inline SegmentOutput segment_sample(const SegModel& model, const AugModuleSet* adapters,
                                    const Sample& sample) {
    Tensor hm = model.heatmap_for(sample.prompts);
    auto enc = model.encode(sample.image, adapters, &hm);
    auto dec = model.decode(enc.tokens(), hm);
    SegmentOutput out;
    out.mask_logits = dec.mask_logits;
    out.pred_mask = threshold_logits(dec.mask_logits);
    out.predicted_iou = dec.iou();
    return out;
}

inline EvalStats evaluate_samples(const SegModel& model, const AugModuleSet* adapters,
                                  const std::vector<Sample>& samples) {
    if (samples.empty()) throw validation_error("evaluate_samples: empty sample list");
    EvalStats stats;
    for (const Sample& s : samples) {
        SegmentOutput out = segment_sample(model, adapters, s);
        stats.miou += iou_binary(out.pred_mask, s.mask);
        stats.mf1 += f1_binary(out.pred_mask, s.mask);
        Tensor prob = sigmoid(out.mask_logits);
        stats.mmae += mae(prob, s.mask);
    }
    const double inv = 1.0 / static_cast<double>(samples.size());
    stats.miou *= inv;
    stats.mf1 *= inv;
    stats.mmae *= inv;
    return stats;
}

// ---- base pre-training -------------------------------------------------------

struct PretrainConfig {
    std::size_t epochs = 18;
    double lr = 0.005;
    std::size_t batch_size = 8;
    double weight_decay = 0.01;
    double miou_threshold = 0.7;
    std::uint64_t seed = 42;
};

struct PretrainReport {
    double heldout_miou = 0.0;
    std::vector<double> epoch_losses;
};

// Trains every model parameter on the base domain, checks the held-out
// threshold, then freezes the model. Throws training_failure (with the
// achieved value) if the threshold is missed.
inline PretrainReport pretrain_base(SegModel& model, const std::vector<Sample>& train,
                                    const std::vector<Sample>& heldout, const PretrainConfig& cfg) {
    if (model.frozen()) throw state_error("pretrain_base: model is already frozen");
    if (train.empty() || heldout.empty()) {
        throw validation_error("pretrain_base: need non-empty train and held-out sets");
    }
    std::vector<Tensor> params;
    for (auto& [name, t] : model.named_parameters()) {
        t.set_requires_grad(true);
        params.push_back(t);
    }
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW opt(params, ocfg);

    Rng order_rng(mix_seed(cfg.seed, "pretrain-order"));
    std::vector<std::size_t> idx(train.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    std::size_t step = 0;

    PretrainReport report;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(idx);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(idx.size(), start + cfg.batch_size);
            opt.zero_grad();
            double batch_loss = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                const Sample& s = train[idx[i]];
                GradTape tape;
                TapeScope scope(tape);
                Tensor hm = model.heatmap_for(s.prompts);
                auto enc = model.encode(s.image);
                auto dec = model.decode(enc.tokens(), hm);
                Tensor loss = scalar_mul(loss_seg(dec.mask_logits, s.mask, dec.predicted_iou),
                                         1.0 / static_cast<double>(end - start));
                tape.backward(loss);
                batch_loss += loss.item();
            }
            opt.set_lr(cosine_lr(cfg.lr, step, total_steps));
            opt.step();
            ++step;
            epoch_loss += batch_loss;
        }
        report.epoch_losses.push_back(epoch_loss / static_cast<double>(steps_per_epoch));
    }

    report.heldout_miou = evaluate_samples(model, nullptr, heldout).miou;
    if (report.heldout_miou < cfg.miou_threshold) {
        throw training_failure("pretrain_base: held-out mIoU " + std::to_string(report.heldout_miou) +
                               " below threshold " + std::to_string(cfg.miou_threshold));
    }
    model.freeze();
    return report;
}

} // namespace samcl
