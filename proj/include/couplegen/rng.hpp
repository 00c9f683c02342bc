#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace couplegen {

// Deterministic, portable RNG: xoshiro256++ seeded via splitmix64.
//
// The standard <random> distributions are implementation-defined, which would
// make checkpoint digests and resume behaviour differ across toolchains. This
// generator has an explicit 4-word state (trivially serialized into
// checkpoints) and hand-rolled transforms:
//   - uniforms on the open interval (0,1),
//   - normals via Box-Muller (one draw per call, no cached spare -> stateless
//     beyond the 4 words),
//   - Gumbel(0,1) as -log(-log(u)),
//   - categorical sampling via Gumbel-max, so every discrete draw in the code
//     base consumes randomness the same way (this is what makes the one-step
//     decode and the K=1 refinement path seed-matched).
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        std::uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    // Independent child stream; tag choices are centralized in stream_tag.
    static Rng derive(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
        std::uint64_t x = seed;
        std::uint64_t a = splitmix64(x);
        x ^= 0x9e3779b97f4a7c15ULL * (tag + 1);
        std::uint64_t b = splitmix64(x);
        x ^= 0xbf58476d1ce4e5b9ULL * (index + 1);
        std::uint64_t c = splitmix64(x);
        Rng r;
        r.s_ = {a, b, c, splitmix64(x)};
        if (r.s_[0] == 0 && r.s_[1] == 0 && r.s_[2] == 0 && r.s_[3] == 0) r.s_[0] = 1;
        return r;
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform on the open interval (0,1): 53-bit mantissa, offset by half an ulp.
    double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double gumbel() { return -std::log(-std::log(uniform())); }

    bool bernoulli(double p) { return uniform() < p; }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("rng: below(0)");
        // Rejection sampling over the largest multiple of n; unbiased.
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
        std::uint64_t v = next_u64();
        while (v > limit) v = next_u64();
        return v % n;
    }

    // Gumbel-max draw from unnormalized log-weights.
    std::size_t categorical_logits(const double* logits, std::size_t n) {
        std::size_t best = 0;
        double best_v = logits[0] + gumbel();
        for (std::size_t i = 1; i < n; ++i) {
            const double v = logits[i] + gumbel();
            if (v > best_v) {
                best_v = v;
                best = i;
            }
        }
        return best;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

    std::array<std::uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<std::uint64_t, 4>& s) { s_ = s; }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<std::uint64_t, 4> s_{1, 2, 3, 4};
};

// Purpose tags for derived streams; keeping them in one enum prevents
// accidental stream collisions between training phases.
namespace stream_tag {
constexpr std::uint64_t init = 1;
constexpr std::uint64_t shuffle = 2;
constexpr std::uint64_t encoder_noise = 3;
constexpr std::uint64_t pairs = 4;
constexpr std::uint64_t sampling = 5;
constexpr std::uint64_t corruption = 6;
constexpr std::uint64_t data = 7;
constexpr std::uint64_t cond_dropout = 8;
constexpr std::uint64_t embedding = 9;
}  // namespace stream_tag

}  // namespace couplegen
