#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace couplegen {

// Token sequences are fixed-length vectors of vocabulary indices in [0, V).
// The mask token used by the refinement models is index V itself (one past
// the vocabulary); embedding tables carry V+1 rows while output logits stay
// V wide, so the mask can be read but never emitted.
using TokenSequence = std::vector<int>;

inline int mask_token_id(int vocab_size) { return vocab_size; }

struct Dataset {
    int vocab_size = 0;
    int seq_len = 0;
    std::vector<TokenSequence> items;
    std::vector<int> labels;  // optional; empty when the task is unconditional

    std::size_t size() const { return items.size(); }
    bool has_labels() const { return !labels.empty(); }
};

// Errors map to CLI exit codes: ConfigError -> 2, PrereqError -> 3,
// CheckFailure (oracle/acceptance violations) -> 4, anything else -> 1.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct PrereqError : std::runtime_error {
    explicit PrereqError(const std::string& m) : std::runtime_error(m) {}
};
struct CheckFailure : std::runtime_error {
    explicit CheckFailure(const std::string& m) : std::runtime_error(m) {}
};

// Copy of x with masked positions replaced by the mask token. mask must be
// 0/1 and the same length as x; an all-zero mask returns x unchanged.
TokenSequence make_masked_copy(const TokenSequence& x, const std::vector<std::uint8_t>& mask,
                               int vocab_size);

void validate_tokens(const TokenSequence& x, int vocab_size, bool allow_mask = false);

// Environment variable names honored by the CLI and the dataset loaders.
inline const char* kEnvDataDir = "COUPLEGEN_DATA_DIR";
inline const char* kEnvDeterministic = "COUPLEGEN_DETERMINISTIC";

}  // namespace couplegen
