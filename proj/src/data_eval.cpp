#include "couplegen/data_eval.hpp"

#include <zlib.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <stdexcept>

#include "couplegen/kernels.hpp"
#include "couplegen/serialize.hpp"
#include "couplegen/sha256.hpp"

namespace couplegen::data {

namespace {

std::vector<double> motif_weights_of(const DataConfig& d) {
    std::vector<double> w = d.motif_weights;
    if (w.empty()) w.assign(std::size_t(d.motif_count), 1.0 / double(d.motif_count));
    if (w.size() != std::size_t(d.motif_count))
        throw ConfigError("data.motif_weights: need one weight per motif");
    double total = 0.0;
    for (double x : w) {
        if (x < 0.0) throw ConfigError("data.motif_weights: weights must be >= 0");
        total += x;
    }
    if (total <= 0.0) throw ConfigError("data.motif_weights: weights sum to zero");
    for (double& x : w) x /= total;
    return w;
}

}  // namespace

TokenSequence motif_sequence(int j, int vocab, int seq_len) {
    TokenSequence x(std::size_t(seq_len), 0);
    for (int p = 0; p < seq_len; ++p) x[std::size_t(p)] = (j + p) % vocab;
    return x;
}

Dataset synth_dataset(const ExperimentConfig& cfg, Rng& rng) {
    const DataConfig& d = cfg.data;
    Dataset out;
    out.vocab_size = d.vocab_size;
    out.seq_len = d.seq_len;
    const bool labeled = cfg.model.conditional;
    if (labeled && d.num_classes < 1)
        throw ConfigError("data.num_classes: conditional models need at least one class");

    switch (d.task) {
        case TaskKind::toy_pair: {
            if (d.vocab_size != 2)
                throw ConfigError("data.vocab_size: the pair task is binary");
            for (int i = 0; i < d.num_train; ++i) {
                const int b = int(rng.below(2));
                out.items.push_back(TokenSequence(std::size_t(d.seq_len), b));
                if (labeled) out.labels.push_back(b % d.num_classes);
            }
            return out;
        }
        case TaskKind::toy_motif: {
            if (d.motif_count < 1) throw ConfigError("data.motif_count: need at least one motif");
            const std::vector<double> w = motif_weights_of(d);
            std::vector<double> cum(w.size());
            double acc = 0.0;
            for (std::size_t j = 0; j < w.size(); ++j) cum[j] = (acc += w[j]);
            for (int i = 0; i < d.num_train; ++i) {
                const double u = rng.uniform();
                std::size_t j = 0;
                while (j + 1 < cum.size() && u >= cum[j]) ++j;
                out.items.push_back(motif_sequence(int(j), d.vocab_size, d.seq_len));
                if (labeled) out.labels.push_back(int(j) % d.num_classes);
            }
            return out;
        }
        case TaskKind::mnist_binary:
            throw ConfigError("image datasets load from disk; nothing to synthesize");
    }
    throw ConfigError("unknown task kind");
}

oracle::ExactDistribution exact_law(const ExperimentConfig& cfg) {
    const DataConfig& d = cfg.data;
    switch (d.task) {
        case TaskKind::toy_pair: {
            if (d.vocab_size != 2)
                throw ConfigError("data.vocab_size: the pair task is binary");
            oracle::enumerable_support(d.vocab_size, d.seq_len);
            oracle::ExactDistribution law(d.vocab_size, d.seq_len);
            law.p[oracle::ExactDistribution::index_of(TokenSequence(std::size_t(d.seq_len), 0),
                                                      2)] = 0.5;
            law.p[oracle::ExactDistribution::index_of(TokenSequence(std::size_t(d.seq_len), 1),
                                                      2)] = 0.5;
            return law;
        }
        case TaskKind::toy_motif: {
            oracle::enumerable_support(d.vocab_size, d.seq_len);
            const std::vector<double> w = motif_weights_of(d);
            oracle::ExactDistribution law(d.vocab_size, d.seq_len);
            for (std::size_t j = 0; j < w.size(); ++j)
                law.p[oracle::ExactDistribution::index_of(
                    motif_sequence(int(j), d.vocab_size, d.seq_len), d.vocab_size)] += w[j];
            return law;
        }
        case TaskKind::mnist_binary:
            throw PrereqError("the image law is not enumerable; no closed form exists");
    }
    throw ConfigError("unknown task kind");
}

// --------------------------------------------------------------------------
// IDX ingestion
// --------------------------------------------------------------------------

namespace {

// Reads a raw or gzip-compressed file fully; empty optional-style flag via
// found=false when neither variant exists.
std::vector<std::uint8_t> read_maybe_gz(const std::string& dir, const std::string& base,
                                        bool& found, std::string& stored_path) {
    namespace fs = std::filesystem;
    const std::string raw = dir + "/" + base;
    const std::string gz = raw + ".gz";
    found = true;
    if (fs::exists(raw)) {
        stored_path = raw;
        const std::string bytes = io::read_file(raw);
        return std::vector<std::uint8_t>(bytes.begin(), bytes.end());
    }
    if (fs::exists(gz)) {
        stored_path = gz;
        gzFile f = gzopen(gz.c_str(), "rb");
        if (f == nullptr) throw PrereqError("cannot open " + gz);
        std::vector<std::uint8_t> out;
        std::uint8_t buf[1 << 16];
        int n = 0;
        while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
        const bool bad = n < 0;
        gzclose(f);
        if (bad) throw CheckFailure("gzip decompression failed for " + gz);
        return out;
    }
    found = false;
    return {};
}

std::uint32_t be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

void check_sidecar_digest(const std::string& stored_path) {
    const std::string sidecar = stored_path + ".sha256";
    if (!io::file_exists(sidecar)) return;
    std::istringstream in(io::read_file(sidecar));
    std::string expect;
    in >> expect;
    const std::string got = io::sha256_file(stored_path);
    if (expect != got)
        throw CheckFailure("checksum mismatch for " + stored_path + ": expected " + expect +
                           ", file hashes to " + got);
}

}  // namespace

Dataset load_binary_images(const std::string& dir, const DataConfig& dcfg,
                           const std::string& split) {
    bool have_images = false, have_labels = false;
    std::string images_path, labels_path;
    const std::vector<std::uint8_t> img =
        read_maybe_gz(dir, split + "-images-idx3-ubyte", have_images, images_path);
    const std::vector<std::uint8_t> lab =
        read_maybe_gz(dir, split + "-labels-idx1-ubyte", have_labels, labels_path);
    if (!have_images || !have_labels)
        throw PrereqError("image dataset not found under '" + dir + "' for split '" + split +
                          "' (need <split>-images-idx3-ubyte[.gz] and "
                          "<split>-labels-idx1-ubyte[.gz])");
    check_sidecar_digest(images_path);
    check_sidecar_digest(labels_path);

    if (img.size() < 16 || be32(img.data()) != 0x803)
        throw CheckFailure("image file " + images_path + " is not an idx3 byte tensor");
    if (lab.size() < 8 || be32(lab.data()) != 0x801)
        throw CheckFailure("label file " + labels_path + " is not an idx1 byte vector");

    const std::size_t n = be32(img.data() + 4);
    const std::size_t h = be32(img.data() + 8);
    const std::size_t w = be32(img.data() + 12);
    if (img.size() != 16 + n * h * w)
        throw CheckFailure("image payload size mismatch in " + images_path);
    const std::size_t nl = be32(lab.data() + 4);
    if (nl != n) throw CheckFailure("image/label count mismatch: " + std::to_string(n) + " vs " +
                                    std::to_string(nl));
    if (lab.size() != 8 + nl) throw CheckFailure("label payload size mismatch in " + labels_path);

    Dataset out;
    out.vocab_size = 2;
    out.seq_len = int(h * w);
    out.items.reserve(n);
    out.labels.reserve(n);
    const double thr = dcfg.binarize_threshold;
    for (std::size_t i = 0; i < n; ++i) {
        TokenSequence x(h * w, 0);
        const std::uint8_t* px = img.data() + 16 + i * h * w;
        for (std::size_t p = 0; p < h * w; ++p) x[p] = (double(px[p]) / 255.0 >= thr) ? 1 : 0;
        out.items.push_back(std::move(x));
        const int y = lab[8 + i];
        if (y < 0 || y > 9) throw CheckFailure("label out of range in " + labels_path);
        out.labels.push_back(y);
    }
    return out;
}

std::string dataset_digest(const Dataset& d) {
    Sha256 h;
    const std::int64_t header[2] = {d.vocab_size, d.seq_len};
    h.update(header, sizeof header);
    for (const TokenSequence& x : d.items) {
        for (int tok : x) {
            const std::int32_t t = tok;
            h.update(&t, sizeof t);
        }
    }
    for (int y : d.labels) {
        const std::int32_t t = y;
        h.update(&t, sizeof t);
    }
    return h.hex_digest();
}

double ones_fraction(const Dataset& d) {
    std::size_t ones = 0, total = 0;
    for (const TokenSequence& x : d.items) {
        total += x.size();
        for (int tok : x) ones += (tok != 0);
    }
    return total == 0 ? 0.0 : double(ones) / double(total);
}

}  // namespace couplegen::data

namespace couplegen::eval {

// --------------------------------------------------------------------------
// Embeddings
// --------------------------------------------------------------------------

namespace {

const char* kind_name(EmbeddingKind k) {
    switch (k) {
        case EmbeddingKind::pixels: return "pixels";
        case EmbeddingKind::random_projection: return "random_projection";
        case EmbeddingKind::file: return "file";
    }
    return "?";
}

Tensor images_as_rows(const std::vector<TokenSequence>& images, std::size_t pixels) {
    Tensor rows({images.size(), pixels});
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].size() != pixels)
            throw std::invalid_argument("embedding: image length does not match the protocol");
        for (std::size_t p = 0; p < pixels; ++p) rows.data[i * pixels + p] = double(images[i][p]);
    }
    return rows;
}

}  // namespace

std::string FidProtocol::describe() const {
    std::ostringstream s;
    s << "embedding=" << kind_name(embedding);
    if (embedding == EmbeddingKind::random_projection)
        s << " dim=" << embed_dim << " seed=" << embed_seed;
    s << " image=" << image_h << "x" << image_w;
    return s.str();
}

std::string FidProtocol::digest() const {
    std::string fields = describe();
    fields += "|" + embeddings_file_samples + "|" + embeddings_file_reference;
    return Sha256::of_string(fields).substr(0, 16);
}

Tensor embed_images(const std::vector<TokenSequence>& images, const FidProtocol& proto,
                    bool reference_side) {
    if (images.size() < 2 && proto.embedding != EmbeddingKind::file)
        throw std::invalid_argument("embedding: need at least two images (covariance undefined)");
    const std::size_t pixels = std::size_t(proto.image_h) * std::size_t(proto.image_w);
    switch (proto.embedding) {
        case EmbeddingKind::pixels:
            return images_as_rows(images, pixels);
        case EmbeddingKind::random_projection: {
            if (proto.embed_dim < 1) throw ConfigError("embedding dim must be positive");
            const Tensor rows = images_as_rows(images, pixels);
            // Fixed-seed projection: both sides see the identical matrix.
            Rng prng = Rng::derive(proto.embed_seed, stream_tag::embedding, 0);
            Tensor w({pixels, std::size_t(proto.embed_dim)});
            const double inv = 1.0 / std::sqrt(double(pixels));
            for (double& v : w.data) v = inv * prng.normal();
            Tensor out({images.size(), std::size_t(proto.embed_dim)});
            kernels::matmul_nn(rows.data.data(), w.data.data(), out.data.data(), images.size(),
                               pixels, std::size_t(proto.embed_dim));
            return out;
        }
        case EmbeddingKind::file: {
            const std::string& path =
                reference_side ? proto.embeddings_file_reference : proto.embeddings_file_samples;
            if (path.empty())
                throw PrereqError("file embedding selected but no archive path configured");
            io::Archive a = io::Archive::load(path);
            auto it = a.tensors.find("embeddings");
            if (it == a.tensors.end())
                throw PrereqError("archive " + path + " has no 'embeddings' entry");
            if (it->second.rank() != 2)
                throw CheckFailure("embeddings in " + path + " must be [count x dim]");
            return it->second;
        }
    }
    throw ConfigError("unknown embedding kind");
}

// --------------------------------------------------------------------------
// Gaussian fit + Frechet distance
// --------------------------------------------------------------------------

GaussianFit fit_gaussian(const Tensor& rows) {
    if (rows.rank() != 2) throw std::invalid_argument("gaussian fit: rows must be [N x d]");
    const std::size_t n = rows.dim(0), d = rows.dim(1);
    if (n < 2) throw std::invalid_argument("gaussian fit: need at least two rows");
    GaussianFit fit;
    fit.mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) fit.mean[j] += rows.data[i * d + j];
    for (double& m : fit.mean) m /= double(n);
    fit.cov = Tensor({d, d});
    // Unbiased covariance via centered outer products.
    std::vector<double> c(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) c[j] = rows.data[i * d + j] - fit.mean[j];
        for (std::size_t a = 0; a < d; ++a)
            for (std::size_t b = a; b < d; ++b) fit.cov.data[a * d + b] += c[a] * c[b];
    }
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            fit.cov.data[a * d + b] /= double(n - 1);
            fit.cov.data[b * d + a] = fit.cov.data[a * d + b];
        }
    return fit;
}

double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
    const std::size_t d = a.mean.size();
    if (b.mean.size() != d || a.cov.dim(0) != d || b.cov.dim(0) != d)
        throw std::invalid_argument("frechet distance: dimension mismatch");
    using Mat = Eigen::MatrixXd;
    Mat ca = Eigen::Map<const Mat>(a.cov.data.data(), Eigen::Index(d), Eigen::Index(d));
    Mat cb = Eigen::Map<const Mat>(b.cov.data.data(), Eigen::Index(d), Eigen::Index(d));

    double mean_term = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double diff = a.mean[j] - b.mean[j];
        mean_term += diff * diff;
    }

    // sqrt(Ca) through the symmetric eigendecomposition, eigenvalues clamped
    // at zero against rounding.
    Eigen::SelfAdjointEigenSolver<Mat> ea(ca);
    if (ea.info() != Eigen::Success)
        throw CheckFailure("frechet distance: eigendecomposition failed");
    Mat sqrt_ca = ea.eigenvectors() *
                  ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                  ea.eigenvectors().transpose();

    Mat m = sqrt_ca * cb * sqrt_ca;
    // Symmetrize before the second decomposition; m is symmetric PSD in
    // exact arithmetic.
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> em(m);
    if (em.info() != Eigen::Success)
        throw CheckFailure("frechet distance: eigendecomposition failed");
    const double tr_cross = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    const double value = mean_term + ca.trace() + cb.trace() - 2.0 * tr_cross;
    // The distance is nonnegative; tiny negative values are rounding.
    return std::max(value, 0.0);
}

FidReport compute_fid(const std::vector<TokenSequence>& samples,
                      const std::vector<TokenSequence>& reference, const FidProtocol& proto) {
    const Tensor es = embed_images(samples, proto, /*reference_side=*/false);
    const Tensor er = embed_images(reference, proto, /*reference_side=*/true);
    if (es.dim(1) != er.dim(1))
        throw CheckFailure("fid: sample and reference embedding dims differ");
    FidReport rep;
    rep.value = frechet_distance(fit_gaussian(es), fit_gaussian(er));
    rep.sample_count = es.dim(0);
    rep.reference_count = er.dim(0);
    rep.protocol = proto.describe();
    rep.protocol_digest = proto.digest();
    return rep;
}

// --------------------------------------------------------------------------
// Diagnostics
// --------------------------------------------------------------------------

double unigram_entropy(const std::vector<TokenSequence>& samples, int vocab_size) {
    if (samples.empty()) throw std::invalid_argument("entropy: empty sample set");
    std::vector<std::size_t> counts(std::size_t(vocab_size), 0);
    std::size_t total = 0;
    for (const TokenSequence& x : samples)
        for (int tok : x) {
            if (tok < 0 || tok >= vocab_size)
                throw std::invalid_argument("entropy: token out of range");
            ++counts[std::size_t(tok)];
            ++total;
        }
    double h = 0.0;
    for (std::size_t c : counts) {
        if (c == 0) continue;
        const double p = double(c) / double(total);
        h -= p * std::log(p);
    }
    return h;
}

namespace {

double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

GaussianityReport gaussianity_diagnostics(const Tensor& latents) {
    if (latents.rank() != 2) throw std::invalid_argument("diagnostics: latents must be [N x D]");
    const std::size_t n = latents.dim(0), d = latents.dim(1);
    if (n < 100) throw PrereqError("diagnostics: need at least 100 latents");

    GaussianityReport rep;
    rep.per_dim_mean.assign(d, 0.0);
    rep.per_dim_std.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) rep.per_dim_mean[j] += latents.data[i * d + j];
    for (double& m : rep.per_dim_mean) m /= double(n);

    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            const double c = latents.data[i * d + j] - rep.per_dim_mean[j];
            var[j] += c * c;
        }
    for (std::size_t j = 0; j < d; ++j) {
        var[j] /= double(n - 1);
        rep.per_dim_std[j] = std::sqrt(var[j]);
        if (rep.per_dim_std[j] == 0.0) rep.degenerate = true;
    }

    for (std::size_t a = 0; a < d && !rep.degenerate; ++a)
        for (std::size_t b = a + 1; b < d; ++b) {
            double cov = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                cov += (latents.data[i * d + a] - rep.per_dim_mean[a]) *
                       (latents.data[i * d + b] - rep.per_dim_mean[b]);
            cov /= double(n - 1);
            rep.max_abs_offdiag_corr = std::max(
                rep.max_abs_offdiag_corr, std::abs(cov / (rep.per_dim_std[a] * rep.per_dim_std[b])));
        }

    std::vector<double> col(n);
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t i = 0; i < n; ++i) col[i] = latents.data[i * d + j];
        std::sort(col.begin(), col.end());
        double ks = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double f = std_normal_cdf(col[i]);
            ks = std::max(ks, std::max(std::abs(f - double(i) / double(n)),
                                       std::abs(f - double(i + 1) / double(n))));
        }
        rep.ks_stat_max = std::max(rep.ks_stat_max, ks);
    }
    return rep;
}

void write_image_grid(const std::string& path, const std::vector<TokenSequence>& images, int h,
                      int w, int grid_cols) {
    if (images.empty()) throw std::invalid_argument("image grid: no images");
    if (grid_cols < 1) throw std::invalid_argument("image grid: need at least one column");
    const std::size_t H = std::size_t(h), W = std::size_t(w);
    const std::size_t cols = std::size_t(grid_cols);
    const std::size_t rows = (images.size() + cols - 1) / cols;
    const std::size_t gw = cols * W + (cols - 1);
    const std::size_t gh = rows * H + (rows - 1);
    std::vector<double> canvas(gh * gw, 0.5);  // separators at mid-gray
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].size() != H * W)
            throw std::invalid_argument("image grid: image length mismatch");
        const std::size_t r0 = (i / cols) * (H + 1), c0 = (i % cols) * (W + 1);
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                canvas[(r0 + y) * gw + c0 + x] = double(images[i][y * W + x]);
    }
    io::write_pgm(path, canvas.data(), gh, gw);
}

}  // namespace couplegen::eval
