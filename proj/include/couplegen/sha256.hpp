#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace couplegen {

// FIPS 180-4 SHA-256, streaming interface. Used for parameter freeze digests,
// dataset ingestion records, and sample-dump fingerprints; implemented here to
// avoid a libcrypto link for one hash.
class Sha256 {
  public:
    Sha256() { reset(); }

    void reset();
    void update(const void* bytes, std::size_t n);
    // Finalizes and returns lowercase hex; the object must be reset() before reuse.
    std::string hex_digest();

    static std::string of_bytes(const void* bytes, std::size_t n) {
        Sha256 h;
        h.update(bytes, n);
        return h.hex_digest();
    }
    static std::string of_string(const std::string& s) { return of_bytes(s.data(), s.size()); }

  private:
    void process_block(const std::uint8_t* p);

    std::uint32_t h_[8];
    std::uint8_t buf_[64];
    std::size_t buf_len_ = 0;
    std::uint64_t total_bits_ = 0;
};

}  // namespace couplegen
