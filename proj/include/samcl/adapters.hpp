#pragma once

// The low-rank adapter family:
//   vanilla:   Y = (W + B_i A_i) X          per-site A and B
//   frozen_A:  same forward, A_i not trained
//   slora:     Y = (W + B_i A) X            one A shared across sites
//   augmodule: Y = W X + B_i C_i (A X + P)  shared A, per-site mixer C_i,
//              prompt term P projected from the heatmap
//
// Row-vector convention: X is [tokens, d_in], so A X becomes X A^T and so
// on. A set is a plain value; injecting never mutates the model.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "samcl/errors.hpp"
#include "samcl/rng.hpp"
#include "samcl/serialize.hpp"
#include "samcl/tensor.hpp"

namespace samcl {

enum class SiteKind : std::uint32_t { attn_query = 0, attn_value = 1, mlp_in = 2 };

inline const char* site_kind_name(SiteKind k) {
    switch (k) {
        case SiteKind::attn_query: return "attn_q";
        case SiteKind::attn_value: return "attn_v";
        case SiteKind::mlp_in: return "mlp_in";
    }
    return "unknown";
}

// Blocks are numbered 1..n; a site lives inside one encoder block.
struct SiteId {
    std::size_t block = 0;
    SiteKind kind = SiteKind::attn_query;

    bool operator==(const SiteId&) const = default;

    std::string str() const {
        return "b" + std::to_string(block) + "." + site_kind_name(kind);
    }
};

struct SiteSpec {
    SiteId site;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
};

enum class AdapterVariant : std::uint32_t { vanilla = 0, frozen_A = 1, slora = 2, augmodule = 3 };

inline const char* variant_name(AdapterVariant v) {
    switch (v) {
        case AdapterVariant::vanilla: return "vanilla";
        case AdapterVariant::frozen_A: return "frozen_A";
        case AdapterVariant::slora: return "slora";
        case AdapterVariant::augmodule: return "augmodule";
    }
    return "unknown";
}

inline AdapterVariant variant_from_name(const std::string& name) {
    for (AdapterVariant v : {AdapterVariant::vanilla, AdapterVariant::frozen_A,
                             AdapterVariant::slora, AdapterVariant::augmodule}) {
        if (name == variant_name(v)) return v;
    }
    throw validation_error("unknown adapter variant: " + name);
}

// ---- free-standing forwards (also the code path used inside the model) ----

inline Tensor forward_vanilla(const Tensor& w, const Tensor& x, const Tensor& a, const Tensor& b) {
    if (w.rank() != 2 || x.rank() != 2 || x.dim(1) != w.dim(1)) {
        throw dimension_error("forward_vanilla: W " + shape_str(w.shape()) + " with X " +
                              shape_str(x.shape()));
    }
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != x.dim(1) || b.dim(1) != a.dim(0) ||
        b.dim(0) != w.dim(0)) {
        throw dimension_error("forward_vanilla: rank mismatch A " + shape_str(a.shape()) + ", B " +
                              shape_str(b.shape()) + " for W " + shape_str(w.shape()));
    }
    return add(matmul_nt(x, w), matmul_nt(matmul_nt(x, a), b));
}

inline Tensor forward_slora(const Tensor& w, const Tensor& x, const Tensor& shared_a, const Tensor& b) {
    if (shared_a.rank() != 2 || shared_a.dim(1) != x.dim(1)) {
        throw validation_error("forward_slora: site input dim " + std::to_string(x.dim(1)) +
                               " does not match shared A " + shape_str(shared_a.shape()));
    }
    return forward_vanilla(w, x, shared_a, b);
}

inline Tensor forward_aug(const Tensor& w, const Tensor& x, const Tensor& shared_a, const Tensor& b,
                          const Tensor& c, const Tensor& p) {
    if (shared_a.rank() != 2 || shared_a.dim(1) != x.dim(1)) {
        throw validation_error("forward_aug: site input dim " + std::to_string(x.dim(1)) +
                               " does not match shared A " + shape_str(shared_a.shape()));
    }
    const std::size_t r = shared_a.dim(0);
    if (p.rank() != 2 || p.dim(0) != x.dim(0) || p.dim(1) != r) {
        throw dimension_error("forward_aug: P " + shape_str(p.shape()) + " must be [" +
                              std::to_string(x.dim(0)) + "," + std::to_string(r) + "]");
    }
    if (c.rank() != 2 || c.dim(0) != r || c.dim(1) != r) {
        throw dimension_error("forward_aug: C " + shape_str(c.shape()) + " must be [" +
                              std::to_string(r) + "," + std::to_string(r) + "]");
    }
    Tensor low = add(matmul_nt(x, shared_a), p);         // A X + P
    Tensor mixed = matmul_nt(low, c);                    // C (A X + P)
    return add(matmul_nt(x, w), matmul_nt(mixed, b));    // W X + B ...
}

// ---- the per-task trainable payload ----------------------------------------

struct PromptProjection {
    Tensor weight; // [r]
    Tensor bias;   // [r]
};

struct AdapterSite {
    SiteId site;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    Tensor b;                 // [d_out, r]
    std::optional<Tensor> a;  // [r, d_in], vanilla / frozen_A only
    std::optional<Tensor> c;  // [r, r], augmodule only
};

struct AugModuleSet {
    AdapterVariant variant = AdapterVariant::augmodule;
    int task_id = -1;
    std::size_t rank = 0;
    std::size_t start_block = 0; // sites must live in blocks > start_block
    std::optional<Tensor> shared_a;
    std::vector<AdapterSite> sites;
    std::optional<PromptProjection> prompt_proj;

    bool uses_shared_a() const {
        return variant == AdapterVariant::slora || variant == AdapterVariant::augmodule;
    }

    const AdapterSite* find(const SiteId& id) const {
        for (const auto& s : sites) {
            if (s.site == id) return &s;
        }
        return nullptr;
    }

    // Heatmap token scalars [T] -> P [T, r].
    Tensor project_prompt(const Tensor& heatmap_tokens) const {
        if (!prompt_proj) throw state_error("AugModuleSet: no prompt projection on this variant");
        if (heatmap_tokens.rank() != 1) {
            throw dimension_error("project_prompt: expected token vector, got " +
                                  shape_str(heatmap_tokens.shape()));
        }
        const std::size_t t = heatmap_tokens.dim(0);
        Tensor col = reshape(heatmap_tokens, {t, 1});
        Tensor w = reshape(prompt_proj->weight, {rank, 1});
        return add_rowvec(matmul_nt(col, w), prompt_proj->bias);
    }

    // Site forward given the base result W X (already computed by the model).
    Tensor apply(const AdapterSite& s, const Tensor& base_out, const Tensor& x,
                 const Tensor* p) const {
        switch (variant) {
            case AdapterVariant::vanilla:
            case AdapterVariant::frozen_A:
                return add(base_out, matmul_nt(matmul_nt(x, *s.a), s.b));
            case AdapterVariant::slora:
                return add(base_out, matmul_nt(matmul_nt(x, *shared_a), s.b));
            case AdapterVariant::augmodule: {
                if (!p) throw state_error("AugModuleSet: augmodule forward needs the prompt term");
                Tensor low = add(matmul_nt(x, *shared_a), *p);
                return add(base_out, matmul_nt(matmul_nt(low, *s.c), s.b));
            }
        }
        throw state_error("AugModuleSet: unknown variant");
    }

    std::vector<Tensor> trainable_params() const {
        std::vector<Tensor> out;
        if (uses_shared_a()) out.push_back(*shared_a);
        for (const auto& s : sites) {
            if (variant == AdapterVariant::vanilla) out.push_back(*s.a);
            out.push_back(s.b);
            if (variant == AdapterVariant::augmodule) out.push_back(*s.c);
        }
        if (variant == AdapterVariant::augmodule) {
            out.push_back(prompt_proj->weight);
            out.push_back(prompt_proj->bias);
        }
        return out;
    }

    // Everything that has to live in the adapter file to reproduce the
    // forward pass. Superset of trainable_params only for frozen_A.
    NamedTensors stored_tensors() const {
        NamedTensors nt;
        if (uses_shared_a()) nt.add("shared_a", *shared_a);
        for (const auto& s : sites) {
            const std::string prefix = s.site.str();
            if (s.a) nt.add(prefix + ".a", *s.a);
            nt.add(prefix + ".b", s.b);
            if (s.c) nt.add(prefix + ".c", *s.c);
        }
        if (prompt_proj) {
            nt.add("prompt_proj.weight", prompt_proj->weight);
            nt.add("prompt_proj.bias", prompt_proj->bias);
        }
        return nt;
    }

    std::uint64_t content_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, t] : stored_tensors().items) {
            h = hash_bytes(name.data(), name.size(), h);
            h = hash_tensor(t, h);
        }
        return h;
    }
};

// Fresh set at the frozen-base starting point: A ~ N(0, 0.02), B = 0,
// C = I, prompt projection weight ~ N(0, 0.02) with zero bias. B = 0
// makes the adapted forward bit-identical to the frozen model.
inline AugModuleSet make_adapter_set(AdapterVariant variant, const std::vector<SiteSpec>& sites,
                                     std::size_t rank, std::size_t start_block, int task_id,
                                     std::uint64_t seed) {
    if (rank == 0) throw validation_error("make_adapter_set: rank must be >= 1");
    if (sites.empty()) {
        // permitted: an empty set is a no-op injection
    }
    AugModuleSet set;
    set.variant = variant;
    set.task_id = task_id;
    set.rank = rank;
    set.start_block = start_block;
    Rng rng(mix_seed(seed, "adapter-init"));

    const bool shared = set.uses_shared_a();
    std::size_t shared_d_in = 0;
    for (const auto& spec : sites) {
        if (spec.site.block <= start_block) {
            throw validation_error("make_adapter_set: site " + spec.site.str() +
                                   " is not after start block " + std::to_string(start_block));
        }
        if (shared) {
            if (shared_d_in == 0) shared_d_in = spec.d_in;
            if (spec.d_in != shared_d_in) {
                throw validation_error("make_adapter_set: shared-A variants need a uniform input dim; site " +
                                       spec.site.str() + " has " + std::to_string(spec.d_in));
            }
        }
    }
    if (shared) {
        if (shared_d_in == 0 && !sites.empty()) shared_d_in = sites.front().d_in;
        set.shared_a = Tensor::randn({rank, shared_d_in == 0 ? 1 : shared_d_in}, rng, 0.02)
                           .set_requires_grad(true);
    }
    for (const auto& spec : sites) {
        AdapterSite s;
        s.site = spec.site;
        s.d_in = spec.d_in;
        s.d_out = spec.d_out;
        s.b = Tensor::zeros({spec.d_out, rank}).set_requires_grad(true);
        if (variant == AdapterVariant::vanilla || variant == AdapterVariant::frozen_A) {
            s.a = Tensor::randn({rank, spec.d_in}, rng, 0.02)
                      .set_requires_grad(variant == AdapterVariant::vanilla);
        }
        if (variant == AdapterVariant::augmodule) {
            s.c = Tensor::identity(rank).set_requires_grad(true);
        }
        set.sites.push_back(std::move(s));
    }
    if (variant == AdapterVariant::augmodule) {
        PromptProjection pp;
        pp.weight = Tensor::randn({rank}, rng, 0.02).set_requires_grad(true);
        pp.bias = Tensor::zeros({rank}).set_requires_grad(true);
        set.prompt_proj = std::move(pp);
    }
    return set;
}

// ---- parameter accounting ---------------------------------------------------

struct ParamCounts {
    std::size_t trainable = 0;
    std::size_t stored = 0;
    std::size_t stored_bytes = 0;
};

// Closed forms; dims lists (d_in, d_out) per site. Shared-A variants
// require a uniform d_in.
inline ParamCounts count_params(AdapterVariant variant,
                                const std::vector<std::pair<std::size_t, std::size_t>>& dims,
                                std::size_t r) {
    ParamCounts out;
    if (r == 0) return out;
    std::size_t shared_d = 0;
    if (variant == AdapterVariant::slora || variant == AdapterVariant::augmodule) {
        for (const auto& [din, dout] : dims) {
            if (shared_d == 0) shared_d = din;
            if (din != shared_d) {
                throw validation_error("count_params: shared-A variants need a uniform input dim");
            }
        }
    }
    switch (variant) {
        case AdapterVariant::vanilla:
            for (const auto& [din, dout] : dims) out.trainable += r * (din + dout);
            out.stored = out.trainable;
            break;
        case AdapterVariant::frozen_A:
            for (const auto& [din, dout] : dims) {
                out.trainable += r * dout;
                out.stored += r * (din + dout);
            }
            break;
        case AdapterVariant::slora:
            out.trainable = r * shared_d;
            for (const auto& [din, dout] : dims) out.trainable += r * dout;
            out.stored = out.trainable;
            break;
        case AdapterVariant::augmodule:
            out.trainable = r * shared_d;
            for (const auto& [din, dout] : dims) out.trainable += r * dout + r * r;
            out.trainable += 2 * r; // prompt projection weight + bias
            out.stored = out.trainable;
            break;
    }
    out.stored_bytes = out.stored * sizeof(double);
    return out;
}

// Counts by enumerating the actual tensors of a set; the acceptance suite
// cross-checks this against the closed forms above.
inline ParamCounts enumerate_params(const AugModuleSet& set) {
    ParamCounts out;
    for (const Tensor& t : set.trainable_params()) out.trainable += t.size();
    for (const auto& [name, t] : set.stored_tensors().items) out.stored += t.size();
    out.stored_bytes = out.stored * sizeof(double);
    return out;
}

// ---- adapter file -----------------------------------------------------------

inline void save_adapter_set(const std::filesystem::path& path, const AugModuleSet& set) {
    nlohmann::json meta;
    meta["task_id"] = set.task_id;
    meta["variant"] = variant_name(set.variant);
    meta["rank"] = set.rank;
    meta["start_block"] = set.start_block;
    nlohmann::json site_table = nlohmann::json::array();
    for (const auto& s : set.sites) {
        site_table.push_back({{"block", s.site.block},
                              {"kind", static_cast<std::uint32_t>(s.site.kind)},
                              {"d_in", s.d_in},
                              {"d_out", s.d_out}});
    }
    meta["sites"] = site_table;
    write_container(path, FileKind::adapters, meta, set.stored_tensors());
}

inline AugModuleSet load_adapter_set(const std::filesystem::path& path) {
    Container c = read_container(path, FileKind::adapters);
    AugModuleSet set;
    set.task_id = c.meta.at("task_id").get<int>();
    set.variant = variant_from_name(c.meta.at("variant").get<std::string>());
    set.rank = c.meta.at("rank").get<std::size_t>();
    set.start_block = c.meta.at("start_block").get<std::size_t>();
    if (set.uses_shared_a()) set.shared_a = c.tensors.get("shared_a");
    for (const auto& entry : c.meta.at("sites")) {
        AdapterSite s;
        s.site.block = entry.at("block").get<std::size_t>();
        s.site.kind = static_cast<SiteKind>(entry.at("kind").get<std::uint32_t>());
        s.d_in = entry.at("d_in").get<std::size_t>();
        s.d_out = entry.at("d_out").get<std::size_t>();
        const std::string prefix = s.site.str();
        if (set.variant == AdapterVariant::vanilla || set.variant == AdapterVariant::frozen_A) {
            s.a = c.tensors.get(prefix + ".a");
        }
        s.b = c.tensors.get(prefix + ".b");
        if (set.variant == AdapterVariant::augmodule) s.c = c.tensors.get(prefix + ".c");
        set.sites.push_back(std::move(s));
    }
    if (set.variant == AdapterVariant::augmodule) {
        PromptProjection pp;
        pp.weight = c.tensors.get("prompt_proj.weight");
        pp.bias = c.tensors.get("prompt_proj.bias");
        set.prompt_proj = std::move(pp);
    }
    return set;
}

} // namespace samcl
