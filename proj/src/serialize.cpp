#include "couplegen/serialize.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "couplegen/sha256.hpp"

namespace couplegen::io {

namespace {

constexpr char kArchiveMagic[4] = {'C', 'G', 'T', 'A'};
constexpr std::uint32_t kArchiveVersion = 1;
constexpr char kArrayMagic[4] = {'C', 'G', 'A', 'R'};

template <typename T>
void put_raw(std::string& out, const T& v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_raw(const std::string& in, std::size_t& off) {
    if (off + sizeof(T) > in.size()) throw std::runtime_error("archive: truncated");
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void Archive::save(const std::string& path) const {
    std::string out;
    out.append(kArchiveMagic, 4);
    put_raw(out, kArchiveVersion);
    put_raw(out, std::uint64_t(tensors.size() + blobs.size()));
    auto put_header = [&out](const std::string& name, std::uint8_t dtype,
                             const std::vector<std::size_t>& dims) {
        put_raw(out, std::uint32_t(name.size()));
        out.append(name);
        put_raw(out, dtype);
        put_raw(out, std::uint32_t(dims.size()));
        for (std::size_t d : dims) put_raw(out, std::uint64_t(d));
    };
    for (const auto& [name, t] : tensors) {
        put_header(name, 1, t.shape);
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
    }
    for (const auto& [name, b] : blobs) {
        put_header(name, 3, {b.size()});
        out.append(b);
    }
    write_file_atomic(path, out);
}

Archive Archive::load(const std::string& path) {
    const std::string in = read_file(path);
    std::size_t off = 0;
    if (in.size() < 16 || std::memcmp(in.data(), kArchiveMagic, 4) != 0)
        throw std::runtime_error("archive: bad magic in " + path);
    off = 4;
    const auto version = get_raw<std::uint32_t>(in, off);
    if (version != kArchiveVersion) throw std::runtime_error("archive: unsupported version");
    const auto count = get_raw<std::uint64_t>(in, off);
    Archive a;
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = get_raw<std::uint32_t>(in, off);
        if (off + name_len > in.size()) throw std::runtime_error("archive: truncated name");
        std::string name(in.data() + off, name_len);
        off += name_len;
        const auto dtype = get_raw<std::uint8_t>(in, off);
        const auto rank = get_raw<std::uint32_t>(in, off);
        std::vector<std::size_t> dims(rank);
        std::size_t total = 1;
        for (auto& d : dims) {
            d = std::size_t(get_raw<std::uint64_t>(in, off));
            total *= d;
        }
        if (dtype == 1) {
            if (off + total * sizeof(double) > in.size()) throw std::runtime_error("archive: truncated payload");
            Tensor t(dims);
            std::memcpy(t.data.data(), in.data() + off, total * sizeof(double));
            off += total * sizeof(double);
            a.tensors.emplace(std::move(name), std::move(t));
        } else if (dtype == 3) {
            if (rank != 1 || off + total > in.size()) throw std::runtime_error("archive: bad blob entry");
            a.blobs.emplace(std::move(name), std::string(in.data() + off, total));
            off += total;
        } else {
            throw std::runtime_error("archive: unknown dtype code");
        }
    }
    return a;
}

void write_array_f64(const std::string& path, const Tensor& t) {
    std::string out;
    out.append(kArrayMagic, 4);
    put_raw(out, std::uint32_t(1));
    put_raw(out, std::uint32_t(t.rank()));
    put_raw(out, std::uint32_t(0));
    for (std::size_t d : t.shape) put_raw(out, std::uint32_t(d));
    out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
    write_file_atomic(path, out);
}

void write_array_i32(const std::string& path, const std::vector<std::int32_t>& data,
                     const std::vector<std::size_t>& dims) {
    std::string out;
    out.append(kArrayMagic, 4);
    put_raw(out, std::uint32_t(2));
    put_raw(out, std::uint32_t(dims.size()));
    put_raw(out, std::uint32_t(0));
    std::size_t total = 1;
    for (std::size_t d : dims) {
        put_raw(out, std::uint32_t(d));
        total *= d;
    }
    if (total != data.size()) throw std::invalid_argument("write_array_i32: dims/data mismatch");
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(std::int32_t));
    write_file_atomic(path, out);
}

std::vector<std::int32_t> read_array_i32(const std::string& path, std::vector<std::size_t>& dims) {
    const std::string raw = read_file(path);
    if (raw.size() < 16 || std::memcmp(raw.data(), kArrayMagic, 4) != 0)
        throw CheckFailure("array dump: bad magic in " + path);
    std::uint32_t dtype = 0, rank = 0;
    std::memcpy(&dtype, raw.data() + 4, 4);
    std::memcpy(&rank, raw.data() + 8, 4);
    if (dtype != 2) throw CheckFailure("array dump: not an i32 array: " + path);
    if (raw.size() < 16 + std::size_t(rank) * 4)
        throw CheckFailure("array dump: truncated header in " + path);
    dims.assign(rank, 0);
    std::size_t total = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
        std::uint32_t v = 0;
        std::memcpy(&v, raw.data() + 16 + d * 4, 4);
        dims[d] = v;
        total *= v;
    }
    const std::size_t off = 16 + std::size_t(rank) * 4;
    if (raw.size() != off + total * sizeof(std::int32_t))
        throw CheckFailure("array dump: payload size mismatch in " + path);
    std::vector<std::int32_t> data(total);
    std::memcpy(data.data(), raw.data() + off, total * sizeof(std::int32_t));
    return data;
}

void write_pgm(const std::string& path, const double* pixels, std::size_t h, std::size_t w) {
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        const double v = std::min(1.0, std::max(0.0, pixels[i]));
        out.push_back(char(std::uint8_t(v * 255.0 + 0.5)));
    }
    write_file_atomic(path, out);
}

void write_file_atomic(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open for write: " + tmp.string());
        f.write(content.data(), std::streamsize(content.size()));
        if (!f) throw std::runtime_error("short write: " + tmp.string());
    }
    fs::rename(tmp, target);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::string out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return out;
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

std::string sha256_file(const std::string& path) { return Sha256::of_string(read_file(path)); }

}  // namespace couplegen::io
