#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "couplegen/tensor.hpp"

namespace couplegen::io {

// Named-tensor archive: the on-disk container for checkpoints and embedding
// weights. Little-endian, layout:
//   magic "CGTA" | u32 version | u64 entry count
//   per entry: u32 name_len | name bytes | u8 dtype | u32 rank | u64 dims[rank] | payload
// dtype codes: 1 = f64, 3 = u8 (raw bytes, used for JSON metadata blobs).
struct Archive {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> blobs;  // u8 entries

    void put(const std::string& name, const Tensor& t) { tensors[name] = t; }
    void put_blob(const std::string& name, std::string bytes) { blobs[name] = std::move(bytes); }
    bool has(const std::string& name) const { return tensors.count(name) || blobs.count(name); }

    void save(const std::string& path) const;  // atomic: tmp + rename
    static Archive load(const std::string& path);
};

// Raw sample-array dump: 16-byte header (magic "CGAR", u32 dtype code,
// u32 rank, u32 pad), then rank u32 dims, then payload. dtype 1 = f64,
// 2 = i32.
void write_array_f64(const std::string& path, const Tensor& t);
void write_array_i32(const std::string& path, const std::vector<std::int32_t>& data,
                     const std::vector<std::size_t>& dims);
std::vector<std::int32_t> read_array_i32(const std::string& path, std::vector<std::size_t>& dims);

// 8-bit binary PGM (P5) image, values scaled from [0,1].
void write_pgm(const std::string& path, const double* pixels, std::size_t h, std::size_t w);

// Atomic text write (tmp + rename); used for manifests, logs are appended normally.
void write_file_atomic(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);
bool file_exists(const std::string& path);
std::string sha256_file(const std::string& path);

}  // namespace couplegen::io
