#pragma once

// Procedural segmentation domains. Each domain renders organic blobs over
// value-noise backgrounds with domain-specific texture frequency, contrast,
// tint and pixel noise, so the domains look distinct to an image encoder
// while staying fully deterministic in (spec, seed).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "samcl/errors.hpp"
#include "samcl/rng.hpp"
#include "samcl/tensor.hpp"

namespace samcl {

enum class DomainKind {
    bright_blob,
    camouflage_texture,
    shadow_region,
    noisy_lesion,
    low_contrast_texture,
    base_blob, // pretraining only, never part of the continual stream
};

inline const char* domain_name(DomainKind k) {
    switch (k) {
        case DomainKind::bright_blob: return "bright-blob";
        case DomainKind::camouflage_texture: return "camouflage-texture";
        case DomainKind::shadow_region: return "shadow-region";
        case DomainKind::noisy_lesion: return "noisy-lesion";
        case DomainKind::low_contrast_texture: return "low-contrast-texture";
        case DomainKind::base_blob: return "base-blob";
    }
    return "unknown";
}

inline DomainKind domain_from_name(const std::string& name) {
    for (DomainKind k : {DomainKind::bright_blob, DomainKind::camouflage_texture,
                         DomainKind::shadow_region, DomainKind::noisy_lesion,
                         DomainKind::low_contrast_texture, DomainKind::base_blob}) {
        if (name == domain_name(k)) return k;
    }
    throw validation_error("unknown domain name: " + name);
}

struct DomainSpec {
    DomainKind kind = DomainKind::base_blob;
    double bg_level = 0.35;
    double contrast = 0.30;        // foreground mean minus background mean
    double bg_texture_freq = 3.0;  // noise lattice cells across the image
    double fg_texture_freq = 3.0;
    double bg_texture_amp = 0.08;
    double fg_texture_amp = 0.08;
    double noise = 0.02;           // iid gaussian pixel noise stddev
    double tint_r = 0.0;           // per-channel offsets applied to foreground
    double tint_g = 0.0;
    double tint_b = 0.0;
    double boundary_roughness = 0.10; // radial harmonic amplitude as fraction of radius
    double distractor_prob = 0.0;  // chance of a decoy blob outside the mask
    double area_min = 0.06;        // mask area as fraction of the image
    double area_max = 0.30;
    std::uint64_t seed_base = 0;

    void validate() const {
        if (!(area_min > 0.02 && area_max < 0.5 && area_min < area_max)) {
            throw validation_error("DomainSpec: area range must lie inside (0.02, 0.5)");
        }
        if (noise < 0.0 || noise > 0.5) throw validation_error("DomainSpec: noise out of range");
        if (bg_texture_freq <= 0.0 || fg_texture_freq <= 0.0) {
            throw validation_error("DomainSpec: texture frequency must be positive");
        }
        if (std::fabs(contrast) > 0.6) throw validation_error("DomainSpec: contrast out of range");
        if (distractor_prob < 0.0 || distractor_prob > 1.0) {
            throw validation_error("DomainSpec: distractor_prob out of range");
        }
    }

    static DomainSpec preset(DomainKind kind, std::uint64_t seed_base) {
        DomainSpec s;
        s.kind = kind;
        s.seed_base = seed_base;
        switch (kind) {
            case DomainKind::base_blob:
                s.bg_level = 0.35;
                s.contrast = 0.32;
                s.bg_texture_freq = 3.0;
                s.fg_texture_freq = 3.0;
                s.noise = 0.02;
                s.tint_r = 0.04;
                s.distractor_prob = 0.5;
                break;
            case DomainKind::bright_blob:
                s.bg_level = 0.22;
                s.contrast = 0.45;
                s.bg_texture_freq = 4.0;
                s.fg_texture_freq = 4.0;
                s.noise = 0.04;
                s.tint_r = 0.22;
                s.tint_b = -0.10;
                break;
            case DomainKind::camouflage_texture:
                s.bg_level = 0.45;
                s.contrast = 0.0;
                s.bg_texture_freq = 3.0;
                s.fg_texture_freq = 13.0;
                s.bg_texture_amp = 0.20;
                s.fg_texture_amp = 0.22;
                s.noise = 0.03;
                break;
            case DomainKind::shadow_region:
                s.bg_level = 0.58;
                s.contrast = -0.36;
                s.bg_texture_freq = 3.0;
                s.fg_texture_freq = 3.0;
                s.noise = 0.03;
                s.tint_b = 0.06;
                break;
            case DomainKind::noisy_lesion:
                s.bg_level = 0.40;
                s.contrast = 0.28;
                s.bg_texture_freq = 5.0;
                s.fg_texture_freq = 5.0;
                s.noise = 0.15;
                s.tint_g = 0.08;
                s.boundary_roughness = 0.18;
                break;
            case DomainKind::low_contrast_texture:
                s.bg_level = 0.50;
                s.contrast = 0.12;
                s.bg_texture_freq = 4.0;
                s.fg_texture_freq = 9.0;
                s.bg_texture_amp = 0.06;
                s.fg_texture_amp = 0.10;
                s.noise = 0.02;
                break;
        }
        return s;
    }
};

// The five continual domains, in the default "interspersed" stream order.
inline std::vector<DomainKind> default_domain_order() {
    return {DomainKind::bright_blob, DomainKind::camouflage_texture, DomainKind::shadow_region,
            DomainKind::noisy_lesion, DomainKind::low_contrast_texture};
}

struct PromptSet {
    std::vector<std::pair<int, int>> points; // (row, col), all positive points
};

struct Sample {
    Tensor image;  // [3,H,W] in [0,1]
    Tensor mask;   // [H,W] binary
    PromptSet prompts;
    int domain_id = -1;
    std::uint64_t sample_seed = 0;
};

namespace detail {

inline double lattice_value(std::int64_t ix, std::int64_t iy, std::uint64_t seed) {
    std::uint64_t h = splitmix64(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(ix + 0x10000)));
    h = splitmix64(h ^ (0xc2b2ae3d27d4eb4fULL * static_cast<std::uint64_t>(iy + 0x10000)));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Two-octave value noise in [0,1]; x,y in [0,1).
inline double value_noise(double x, double y, double freq, std::uint64_t seed) {
    double total = 0.0, amp = 0.65, f = freq, norm = 0.0;
    for (int octave = 0; octave < 2; ++octave) {
        const double fx = x * f, fy = y * f;
        const auto ix = static_cast<std::int64_t>(std::floor(fx));
        const auto iy = static_cast<std::int64_t>(std::floor(fy));
        const double tx = smoothstep(fx - static_cast<double>(ix));
        const double ty = smoothstep(fy - static_cast<double>(iy));
        const double v00 = lattice_value(ix, iy, seed + static_cast<std::uint64_t>(octave));
        const double v10 = lattice_value(ix + 1, iy, seed + static_cast<std::uint64_t>(octave));
        const double v01 = lattice_value(ix, iy + 1, seed + static_cast<std::uint64_t>(octave));
        const double v11 = lattice_value(ix + 1, iy + 1, seed + static_cast<std::uint64_t>(octave));
        const double v = (v00 * (1 - tx) + v10 * tx) * (1 - ty) + (v01 * (1 - tx) + v11 * tx) * ty;
        total += v * amp;
        norm += amp;
        amp *= 0.5;
        f *= 2.0;
    }
    return total / norm;
}

struct BlobShape {
    double cy, cx, radius;
    double harm_amp[3];
    double harm_phase[3];

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double dist = std::sqrt(dy * dy + dx * dx);
        const double theta = std::atan2(dy, dx);
        double r = radius;
        for (int j = 0; j < 3; ++j) {
            r += radius * harm_amp[j] * std::cos((j + 2) * theta + harm_phase[j]);
        }
        return dist < r;
    }
};

inline std::size_t rasterize(const BlobShape& blob, double* mask, std::size_t h, std::size_t w,
                             bool clear) {
    std::size_t area = 0;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const bool in = blob.contains(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5);
            if (clear) mask[y * w + x] = in ? 1.0 : 0.0;
            else if (in) mask[y * w + x] = 1.0;
            area += in;
        }
    }
    return area;
}

} // namespace detail

// K distinct mask pixels, uniform without replacement. Same (mask, seed)
// always returns the same points.
inline PromptSet sample_prompts(const Tensor& mask, int k, std::uint64_t seed) {
    if (mask.rank() != 2) throw dimension_error("sample_prompts: mask " + shape_str(mask.shape()));
    std::vector<std::size_t> on;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask.data()[i] != 0.0) on.push_back(i);
    }
    if (on.empty()) throw validation_error("sample_prompts: empty mask");
    if (k <= 0 || static_cast<std::size_t>(k) > on.size()) {
        throw validation_error("sample_prompts: cannot draw " + std::to_string(k) + " points from " +
                               std::to_string(on.size()) + " mask pixels");
    }
    Rng rng(seed);
    const auto picks = rng.sample_without_replacement(on.size(), static_cast<std::size_t>(k));
    PromptSet prompts;
    const std::size_t w = mask.dim(1);
    for (std::size_t p : picks) {
        const std::size_t flat = on[p];
        prompts.points.emplace_back(static_cast<int>(flat / w), static_cast<int>(flat % w));
    }
    return prompts;
}

namespace detail {

inline BlobShape draw_blob(Rng& rng, const DomainSpec& spec, std::size_t h, std::size_t w) {
    BlobShape blob{};
    const double hf = static_cast<double>(h), wf = static_cast<double>(w);
    blob.cy = rng.uniform(0.30 * hf, 0.70 * hf);
    blob.cx = rng.uniform(0.30 * wf, 0.70 * wf);
    const double target_area = rng.uniform(spec.area_min, spec.area_max) * hf * wf;
    blob.radius = std::sqrt(target_area / 3.14159265358979323846);
    for (int j = 0; j < 3; ++j) {
        blob.harm_amp[j] = rng.uniform(0.2, 1.0) * spec.boundary_roughness / (j + 1);
        blob.harm_phase[j] = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    }
    return blob;
}

} // namespace detail

// One fully deterministic sample. The mask area is kept inside the spec
// range by rescaling the blob radius (area grows monotonically with it).
inline Sample generate_sample(const DomainSpec& spec, std::uint64_t sample_seed, int domain_id,
                              std::size_t image_size, int prompt_count) {
    const std::size_t h = image_size, w = image_size;
    Rng rng(sample_seed);

    Tensor mask = Tensor::zeros({h, w});
    detail::BlobShape blob = detail::draw_blob(rng, spec, h, w);
    const double lo = spec.area_min * static_cast<double>(h * w);
    const double hi = spec.area_max * static_cast<double>(h * w);
    const double target = 0.5 * (lo + hi);
    std::size_t area = detail::rasterize(blob, mask.data(), h, w, true);
    for (int iter = 0; iter < 12 && (static_cast<double>(area) < lo || static_cast<double>(area) > hi); ++iter) {
        const double ratio = target / std::max(1.0, static_cast<double>(area));
        blob.radius *= std::sqrt(std::clamp(ratio, 0.25, 4.0));
        area = detail::rasterize(blob, mask.data(), h, w, true);
    }
    if (static_cast<double>(area) < lo || static_cast<double>(area) > hi) {
        throw numeric_error("generate_sample: blob area did not converge into the spec range");
    }

    // Optional distractor rendered with the foreground appearance but kept
    // out of the mask; prompts are what disambiguate the target.
    Tensor paint = Tensor::from_data({h, w}, mask.values());
    if (spec.distractor_prob > 0.0 && rng.uniform() < spec.distractor_prob) {
        for (int attempt = 0; attempt < 8; ++attempt) {
            detail::BlobShape decoy = detail::draw_blob(rng, spec, h, w);
            decoy.radius *= 0.6;
            const double dy = decoy.cy - blob.cy, dx = decoy.cx - blob.cx;
            if (std::sqrt(dy * dy + dx * dx) > blob.radius + decoy.radius + 4.0) {
                detail::rasterize(decoy, paint.data(), h, w, false);
                break;
            }
        }
    }

    const std::uint64_t tex_seed_bg = rng.next_u64();
    const std::uint64_t tex_seed_fg = rng.next_u64();
    Tensor image = Tensor::zeros({3, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t i = y * w + x;
            const double u = static_cast<double>(x) / static_cast<double>(w);
            const double v = static_cast<double>(y) / static_cast<double>(h);
            const bool fg = paint.data()[i] != 0.0;
            double base;
            if (fg) {
                base = spec.bg_level + spec.contrast +
                       spec.fg_texture_amp * (detail::value_noise(u, v, spec.fg_texture_freq, tex_seed_fg) - 0.5) * 2.0;
            } else {
                base = spec.bg_level +
                       spec.bg_texture_amp * (detail::value_noise(u, v, spec.bg_texture_freq, tex_seed_bg) - 0.5) * 2.0;
            }
            const double tr = fg ? spec.tint_r : 0.0;
            const double tg = fg ? spec.tint_g : 0.0;
            const double tb = fg ? spec.tint_b : 0.0;
            image.data()[0 * h * w + i] = base + tr;
            image.data()[1 * h * w + i] = base + tg;
            image.data()[2 * h * w + i] = base + tb;
        }
    }
    if (spec.noise > 0.0) {
        for (std::size_t i = 0; i < image.size(); ++i) {
            image.data()[i] += rng.normal(0.0, spec.noise);
        }
    }
    for (std::size_t i = 0; i < image.size(); ++i) {
        image.data()[i] = std::clamp(image.data()[i], 0.0, 1.0);
    }

    Sample s;
    s.image = std::move(image);
    s.mask = std::move(mask);
    s.prompts = sample_prompts(s.mask, prompt_count, mix_seed(sample_seed, "prompts"));
    s.domain_id = domain_id;
    s.sample_seed = sample_seed;
    return s;
}

inline std::vector<Sample> generate_domain(const DomainSpec& spec, std::size_t n, std::uint64_t seed,
                                           int domain_id = -1, std::size_t image_size = 64,
                                           int prompt_count = 3) {
    spec.validate();
    if (n == 0) throw validation_error("generate_domain: n must be positive");
    std::vector<Sample> out;
    out.reserve(n);
    const std::uint64_t stream = mix_seed(spec.seed_base, seed);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(generate_sample(spec, mix_seed(stream, static_cast<std::uint64_t>(i)),
                                      domain_id, image_size, prompt_count));
    }
    return out;
}

} // namespace samcl
