#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "couplegen/config.hpp"
#include "couplegen/core_types.hpp"
#include "couplegen/divergence_oracle.hpp"
#include "couplegen/rng.hpp"
#include "couplegen/tensor.hpp"

namespace couplegen::data {

// ---------------------------------------------------------------------------
// Synthetic corpora with closed-form laws.
//
// perfect-pair: V = 2, equal mass on the two constant sequences 00..0 and
// 11..1 — the smallest fully correlated law, whose best factorized
// approximation stays a fixed total-variation distance away.
//
// motifs: `motif_count` template sequences motif_j[p] = (j + p) mod V,
// mixed with the configured weights (uniform when none are given). With
// class labels, example label = motif index mod num_classes.
// ---------------------------------------------------------------------------

TokenSequence motif_sequence(int j, int vocab, int seq_len);

// Draws cfg.data.num_train i.i.d. items for the configured toy task and
// attaches labels when the model is conditional. Rejects image tasks
// (those load from disk, they are not synthesized).
Dataset synth_dataset(const ExperimentConfig& cfg, Rng& rng);

// The exact law the synthesizer draws from, for oracle comparisons.
oracle::ExactDistribution exact_law(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Binary image ingestion.
//
// Reads the standard IDX image/label pair for `split` ("train" or "t10k")
// from `dir`, accepting raw files or their .gz compressions:
//   <split>-images-idx3-ubyte[.gz]   magic 0x803, dims [n x h x w]
//   <split>-labels-idx1-ubyte[.gz]   magic 0x801, dims [n]
// Pixels are scaled to [0,1] and binarized at dcfg.binarize_threshold
// (pixel >= threshold reads as 1). When a sidecar `<file>.sha256` exists its
// first token must match the stored file's digest; structural integrity
// (magic, counts, label range) is always enforced.
// ---------------------------------------------------------------------------
Dataset load_binary_images(const std::string& dir, const DataConfig& dcfg,
                           const std::string& split);

// Deterministic fingerprint of a dataset's tokens and labels.
std::string dataset_digest(const Dataset& d);

// Fraction of nonzero tokens over all positions (ingestion reproducibility
// metric for binarized images).
double ones_fraction(const Dataset& d);

}  // namespace couplegen::data

namespace couplegen::eval {

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian fits of sample embeddings.
//
// The reference protocol embeds with a pretrained classifier network; that
// network cannot be bundled here, so the embedding is pluggable and every
// protocol knob lands in the report (the metric is only comparable within
// one protocol):
//   pixels             the flattened image itself, as doubles;
//   random_projection  fixed-seed Gaussian projection to embed_dim;
//   file               precomputed rows loaded from a tensor archive
//                      (entry "embeddings"), for running the full protocol
//                      where the embedding network is available.
// ---------------------------------------------------------------------------
enum class EmbeddingKind { pixels, random_projection, file };

struct FidProtocol {
    EmbeddingKind embedding = EmbeddingKind::random_projection;
    int embed_dim = 2048;                  // random_projection width
    std::uint64_t embed_seed = 271828182;  // projection matrix seed
    int image_h = 28, image_w = 28;
    std::string embeddings_file_samples;   // file kind: archive paths
    std::string embeddings_file_reference;

    std::string describe() const;  // human-readable one-liner
    std::string digest() const;    // fingerprint of every knob above
};

// images: one sequence per image, length image_h * image_w, binary tokens.
Tensor embed_images(const std::vector<TokenSequence>& images, const FidProtocol& proto,
                    bool reference_side);

struct GaussianFit {
    std::vector<double> mean;  // [d]
    Tensor cov;                // [d x d], unbiased
};

// rows [N x d], N >= 2 (covariance undefined below that).
GaussianFit fit_gaussian(const Tensor& rows);

// ||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca^1/2 Cb Ca^1/2)^1/2), symmetric,
// zero when the moment pairs coincide. Negative eigenvalues from rounding
// are clamped to zero.
double frechet_distance(const GaussianFit& a, const GaussianFit& b);

struct FidReport {
    double value = 0.0;
    std::size_t sample_count = 0;
    std::size_t reference_count = 0;
    std::string protocol;         // describe()
    std::string protocol_digest;  // digest()
};

FidReport compute_fid(const std::vector<TokenSequence>& samples,
                      const std::vector<TokenSequence>& reference, const FidProtocol& proto);

// ---------------------------------------------------------------------------
// Sequence and latent diagnostics.
// ---------------------------------------------------------------------------

// Natural-log entropy of the pooled token frequency distribution.
double unigram_entropy(const std::vector<TokenSequence>& samples, int vocab_size);

struct GaussianityReport {
    std::vector<double> per_dim_mean;
    std::vector<double> per_dim_std;       // unbiased
    double max_abs_offdiag_corr = 0.0;
    double ks_stat_max = 0.0;              // worst per-dim KS vs N(0,1)
    bool degenerate = false;               // any dimension with zero spread
};

// latents [N x D], N >= 100. Summarizes drift from the standard normal
// prior: per-dimension moments, worst off-diagonal correlation, worst
// Kolmogorov-Smirnov statistic.
GaussianityReport gaussianity_diagnostics(const Tensor& latents);

// Tile binary images into one grayscale grid image (PGM), row-major,
// grid_cols per row, 1-pixel separators.
void write_image_grid(const std::string& path, const std::vector<TokenSequence>& images, int h,
                      int w, int grid_cols);

}  // namespace couplegen::eval
