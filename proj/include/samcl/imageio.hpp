#pragma once

// Binary PGM (P5) masks and PPM (P6) images, maxval 255. Images are
// [3,H,W] floats in [0,1]; masks are [H,W] binary.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "samcl/errors.hpp"
#include "samcl/tensor.hpp"

namespace samcl {

inline void write_pgm(const std::filesystem::path& path, const Tensor& mask) {
    if (mask.rank() != 2) throw dimension_error("write_pgm: expected [H,W], got " + shape_str(mask.shape()));
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("write_pgm: cannot open " + path.string());
    const std::size_t h = mask.dim(0), w = mask.dim(1);
    os << "P5\n" << w << " " << h << "\n255\n";
    for (std::size_t i = 0; i < h * w; ++i) {
        const double v = std::clamp(mask.data()[i], 0.0, 1.0);
        os.put(static_cast<char>(std::lround(v * 255.0)));
    }
    if (!os) throw io_error("write_pgm: write failed " + path.string());
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw dimension_error("write_ppm: expected [3,H,W], got " + shape_str(image.shape()));
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("write_ppm: cannot open " + path.string());
    const std::size_t h = image.dim(1), w = image.dim(2);
    os << "P6\n" << w << " " << h << "\n255\n";
    for (std::size_t i = 0; i < h * w; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const double v = std::clamp(image.data()[c * h * w + i], 0.0, 1.0);
            os.put(static_cast<char>(std::lround(v * 255.0)));
        }
    }
    if (!os) throw io_error("write_ppm: write failed " + path.string());
}

namespace detail {
inline void read_pnm_header(std::istream& is, const char* expect_magic, std::size_t& w,
                            std::size_t& h, const std::string& where) {
    std::string magic;
    is >> magic;
    if (magic != expect_magic) throw io_error("read: bad magic '" + magic + "' in " + where);
    std::size_t maxval = 0;
    is >> w >> h >> maxval;
    if (!is || maxval != 255) throw io_error("read: unsupported header in " + where);
    is.get(); // single whitespace before raster
}
} // namespace detail

inline Tensor read_pgm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("read_pgm: cannot open " + path.string());
    std::size_t w = 0, h = 0;
    detail::read_pnm_header(is, "P5", w, h, path.string());
    Tensor mask = Tensor::zeros({h, w});
    for (std::size_t i = 0; i < h * w; ++i) {
        const int c = is.get();
        if (c == EOF) throw io_error("read_pgm: truncated " + path.string());
        mask.data()[i] = c >= 128 ? 1.0 : 0.0;
    }
    return mask;
}

inline Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("read_ppm: cannot open " + path.string());
    std::size_t w = 0, h = 0;
    detail::read_pnm_header(is, "P6", w, h, path.string());
    Tensor image = Tensor::zeros({3, h, w});
    for (std::size_t i = 0; i < h * w; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const int v = is.get();
            if (v == EOF) throw io_error("read_ppm: truncated " + path.string());
            image.data()[c * h * w + i] = static_cast<double>(v) / 255.0;
        }
    }
    return image;
}

} // namespace samcl
