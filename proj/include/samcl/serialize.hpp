#pragma once

// Versioned binary container for named f64 tensors plus a JSON metadata
// blob. Layout (little-endian):
//   magic "SAMCLBIN" | u32 version | u32 kind | u64 meta_len | meta bytes
//   | u64 tensor_count | per tensor: u64 name_len, name, u64 rank,
//     u64 dims[rank], f64 data[numel]
// Round trips are bit-exact; loaders reject unknown magic/version/kind.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "samcl/errors.hpp"
#include "samcl/tensor.hpp"

namespace samcl {

inline constexpr char kContainerMagic[8] = {'S', 'A', 'M', 'C', 'L', 'B', 'I', 'N'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class FileKind : std::uint32_t {
    checkpoint = 1,
    adapters = 2,
    buffer = 3,
    selector = 4,
};

struct NamedTensors {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(std::string name, Tensor t) { items.emplace_back(std::move(name), std::move(t)); }

    bool contains(const std::string& name) const {
        for (const auto& [n, t] : items) {
            if (n == name) return true;
        }
        return false;
    }

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : items) {
            if (n == name) return t;
        }
        throw io_error("NamedTensors: missing tensor '" + name + "'");
    }

    // Total f64 payload size in bytes.
    std::size_t payload_bytes() const {
        std::size_t total = 0;
        for (const auto& [n, t] : items) total += t.size() * sizeof(double);
        return total;
    }
};

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw io_error(std::string("container: truncated while reading ") + what);
    return v;
}

} // namespace detail

inline void write_container(const std::filesystem::path& path, FileKind kind,
                            const nlohmann::json& meta, const NamedTensors& tensors) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw io_error("container: cannot open for writing: " + path.string());
    os.write(kContainerMagic, sizeof(kContainerMagic));
    detail::write_pod(os, kContainerVersion);
    detail::write_pod(os, static_cast<std::uint32_t>(kind));
    const std::string meta_str = meta.dump();
    detail::write_pod(os, static_cast<std::uint64_t>(meta_str.size()));
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    detail::write_pod(os, static_cast<std::uint64_t>(tensors.items.size()));
    for (const auto& [name, t] : tensors.items) {
        detail::write_pod(os, static_cast<std::uint64_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod(os, static_cast<std::uint64_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::write_pod(os, static_cast<std::uint64_t>(d));
        os.write(reinterpret_cast<const char*>(t.data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw io_error("container: write failed: " + path.string());
}

struct Container {
    FileKind kind;
    nlohmann::json meta;
    NamedTensors tensors;
};

inline Container read_container(const std::filesystem::path& path, FileKind expected) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("container: cannot open: " + path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kContainerMagic, sizeof(magic)) != 0) {
        throw io_error("container: bad magic in " + path.string());
    }
    const auto version = detail::read_pod<std::uint32_t>(is, "version");
    if (version != kContainerVersion) {
        throw io_error("container: unsupported format version " + std::to_string(version) +
                       " in " + path.string() + " (expected " + std::to_string(kContainerVersion) + ")");
    }
    const auto kind = detail::read_pod<std::uint32_t>(is, "kind");
    if (kind != static_cast<std::uint32_t>(expected)) {
        throw io_error("container: kind " + std::to_string(kind) + " in " + path.string() +
                       " does not match expected " +
                       std::to_string(static_cast<std::uint32_t>(expected)));
    }
    Container c;
    c.kind = expected;
    const auto meta_len = detail::read_pod<std::uint64_t>(is, "meta length");
    std::string meta_str(meta_len, '\0');
    is.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    if (!is) throw io_error("container: truncated metadata in " + path.string());
    try {
        c.meta = nlohmann::json::parse(meta_str);
    } catch (const nlohmann::json::exception& e) {
        throw io_error("container: corrupt metadata in " + path.string() + ": " + e.what());
    }
    const auto count = detail::read_pod<std::uint64_t>(is, "tensor count");
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_pod<std::uint64_t>(is, "tensor name length");
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        const auto rank = detail::read_pod<std::uint64_t>(is, "tensor rank");
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is, "tensor dim"));
        std::vector<double> data(shape_numel(shape));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        if (!is) throw io_error("container: truncated tensor data in " + path.string());
        c.tensors.add(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
    }
    return c;
}

// FNV-1a over raw bytes; used for frozen-weight and write-once checks.
inline std::uint64_t hash_bytes(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t hash_tensor(const Tensor& t, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return hash_bytes(t.data(), t.size() * sizeof(double), h);
}

inline std::uint64_t hash_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("hash_file: cannot open: " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        h = hash_bytes(buf, static_cast<std::size_t>(is.gcount()), h);
        if (!is) break;
    }
    return h;
}

} // namespace samcl
