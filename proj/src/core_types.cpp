#include "couplegen/core_types.hpp"

namespace couplegen {

TokenSequence make_masked_copy(const TokenSequence& x, const std::vector<std::uint8_t>& mask,
                               int vocab_size) {
    if (mask.size() != x.size()) throw std::invalid_argument("make_masked_copy: mask length mismatch");
    TokenSequence out = x;
    const int m = mask_token_id(vocab_size);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (mask[i] > 1) throw std::invalid_argument("make_masked_copy: mask entries must be 0/1");
        if (mask[i]) out[i] = m;
    }
    return out;
}

void validate_tokens(const TokenSequence& x, int vocab_size, bool allow_mask) {
    const int hi = allow_mask ? vocab_size : vocab_size - 1;
    for (int t : x)
        if (t < 0 || t > hi)
            throw std::invalid_argument("token out of range: " + std::to_string(t) + " (vocab " +
                                        std::to_string(vocab_size) + ")");
}

}  // namespace couplegen
