// Dataset synthesis, image ingestion, and evaluation metrics: exact laws,
// digests, Frechet distance against closed forms, entropy, diagnostics.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <zlib.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "couplegen/data_eval.hpp"
#include "couplegen/serialize.hpp"

using namespace couplegen;

namespace {

ExperimentConfig pair_config(int n) {
    ExperimentConfig cfg = validate_config(profile_json("toy-pair"));
    cfg.data.num_train = n;
    return cfg;
}

ExperimentConfig motif_config(int n) {
    ExperimentConfig cfg = validate_config(profile_json("toy-motif"));
    cfg.data.num_train = n;
    return cfg;
}

}  // namespace

TEST_CASE("pair synthesis: constant sequences only, balanced within binomial bands") {
    ExperimentConfig cfg = pair_config(10000);
    Rng rng = Rng::derive(cfg.seed, stream_tag::data, 0);
    const Dataset d = data::synth_dataset(cfg, rng);
    REQUIRE(d.items.size() == 10000);

    const TokenSequence zeros(std::size_t(cfg.data.seq_len), 0);
    const TokenSequence ones(std::size_t(cfg.data.seq_len), 1);
    std::size_t nz = 0;
    for (const auto& x : d.items) {
        const bool is_zero = (x == zeros), is_one = (x == ones);
        CHECK((is_zero || is_one));
        nz += is_zero;
    }
    // 3-sigma band around n/2 for a fair coin.
    const double sigma = std::sqrt(10000.0 * 0.25);
    CHECK(std::abs(double(nz) - 5000.0) < 3.0 * sigma);

    const oracle::ExactDistribution law = data::exact_law(cfg);
    CHECK(law.p[oracle::ExactDistribution::index_of(zeros, 2)] == 0.5);
    CHECK(law.p[oracle::ExactDistribution::index_of(ones, 2)] == 0.5);
    double mass = 0.0;
    for (double p : law.p) mass += p;
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("motif synthesis: law support equals the motif set with the configured weights") {
    ExperimentConfig cfg = motif_config(20000);
    cfg.data.motif_count = 4;
    cfg.data.motif_weights = {0.4, 0.3, 0.2, 0.1};

    const oracle::ExactDistribution law = data::exact_law(cfg);
    std::size_t support = 0;
    for (double p : law.p) support += (p > 0.0);
    CHECK(support == 4);
    for (int j = 0; j < 4; ++j) {
        const TokenSequence m = data::motif_sequence(j, cfg.data.vocab_size, cfg.data.seq_len);
        for (int p = 0; p < cfg.data.seq_len; ++p)
            CHECK(m[std::size_t(p)] == (j + p) % cfg.data.vocab_size);
        CHECK(law.p[oracle::ExactDistribution::index_of(m, cfg.data.vocab_size)] ==
              doctest::Approx(cfg.data.motif_weights[std::size_t(j)]).epsilon(1e-15));
    }

    Rng rng = Rng::derive(3, stream_tag::data, 0);
    const Dataset d = data::synth_dataset(cfg, rng);
    std::map<TokenSequence, std::size_t> hist;
    for (const auto& x : d.items) ++hist[x];
    CHECK(hist.size() <= 4);
    for (int j = 0; j < 4; ++j) {
        const double w = cfg.data.motif_weights[std::size_t(j)];
        const double mean = 20000.0 * w, sigma = std::sqrt(20000.0 * w * (1.0 - w));
        const auto it = hist.find(data::motif_sequence(j, cfg.data.vocab_size, cfg.data.seq_len));
        REQUIRE(it != hist.end());
        CHECK(std::abs(double(it->second) - mean) < 3.0 * sigma);
    }

    // Labels follow the motif index when the model is conditional.
    cfg.model.conditional = true;
    cfg.data.num_classes = 2;
    Rng rng2 = Rng::derive(3, stream_tag::data, 0);
    const Dataset dl = data::synth_dataset(cfg, rng2);
    REQUIRE(dl.labels.size() == dl.items.size());
    for (std::size_t i = 0; i < dl.items.size(); ++i) {
        int j = 0;
        while (dl.items[i] != data::motif_sequence(j, cfg.data.vocab_size, cfg.data.seq_len)) ++j;
        CHECK(dl.labels[i] == j % 2);
    }
}

TEST_CASE("bad mixture weights and non-synthesizable tasks are rejected") {
    ExperimentConfig cfg = motif_config(10);
    Rng rng = Rng::derive(1, stream_tag::data, 0);
    cfg.data.motif_weights = {0.5, 0.5};  // wrong count for 4 motifs
    CHECK_THROWS_AS(data::synth_dataset(cfg, rng), ConfigError);
    cfg.data.motif_weights = {-1.0, 1.0, 0.5, 0.5};
    CHECK_THROWS_AS(data::synth_dataset(cfg, rng), ConfigError);

    ExperimentConfig img = validate_config(profile_json("mnist-binary-mini"));
    CHECK_THROWS_AS(data::synth_dataset(img, rng), ConfigError);
    CHECK_THROWS_AS(data::exact_law(img), PrereqError);
}

TEST_CASE("dataset digest is deterministic and sensitive to tokens and labels") {
    ExperimentConfig cfg = pair_config(64);
    Rng r1 = Rng::derive(5, stream_tag::data, 0);
    Rng r2 = Rng::derive(5, stream_tag::data, 0);
    Dataset a = data::synth_dataset(cfg, r1);
    const Dataset b = data::synth_dataset(cfg, r2);
    CHECK(data::dataset_digest(a) == data::dataset_digest(b));

    Dataset mutated = a;
    mutated.items[0][0] ^= 1;
    CHECK(data::dataset_digest(mutated) != data::dataset_digest(a));
    Dataset labeled = a;
    labeled.labels.assign(a.items.size(), 0);
    CHECK(data::dataset_digest(labeled) != data::dataset_digest(a));

    Dataset tiny;
    tiny.vocab_size = 2;
    tiny.seq_len = 2;
    tiny.items = {{0, 1}, {1, 1}};
    CHECK(data::ones_fraction(tiny) == doctest::Approx(0.75));
}

TEST_CASE("unigram entropy: degenerate, uniform, and recount cases") {
    CHECK(eval::unigram_entropy({{2, 2}, {2, 2, 2}}, 4) == 0.0);
    CHECK(eval::unigram_entropy({{0, 1, 2, 3}}, 4) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // Random corpus: entropy matches an independent frequency recount.
    Rng rng = Rng::derive(9, stream_tag::data, 1);
    std::vector<TokenSequence> corpus;
    std::vector<std::size_t> counts(5, 0);
    for (int i = 0; i < 200; ++i) {
        TokenSequence x(7);
        for (auto& t : x) {
            t = int(rng.below(5));
            ++counts[std::size_t(t)];
        }
        corpus.push_back(x);
    }
    double expect = 0.0;
    const double total = 200.0 * 7.0;
    for (std::size_t c : counts)
        if (c > 0) expect -= (double(c) / total) * std::log(double(c) / total);
    CHECK(eval::unigram_entropy(corpus, 5) == doctest::Approx(expect).epsilon(1e-9));

    CHECK_THROWS_AS(eval::unigram_entropy({}, 4), std::invalid_argument);
    CHECK_THROWS_AS(eval::unigram_entropy({{4}}, 4), std::invalid_argument);
}

TEST_CASE("gaussian fit reproduces hand-computed moments") {
    const Tensor rows({4, 2}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0});
    const eval::GaussianFit f = eval::fit_gaussian(rows);
    CHECK(f.mean[0] == doctest::Approx(4.0));
    CHECK(f.mean[1] == doctest::Approx(5.0));
    // Centered column is (-3,-1,1,3): unbiased variance 20/3, full correlation.
    CHECK(f.cov.data[0] == doctest::Approx(20.0 / 3.0).epsilon(1e-12));
    CHECK(f.cov.data[1] == doctest::Approx(20.0 / 3.0).epsilon(1e-12));
    CHECK(f.cov.data[3] == doctest::Approx(20.0 / 3.0).epsilon(1e-12));
    CHECK_THROWS_AS(eval::fit_gaussian(Tensor({1, 2}, {0.0, 0.0})), std::invalid_argument);
}

TEST_CASE("frechet distance: zero at equality, symmetric, matches closed forms") {
    eval::GaussianFit a, b;
    a.mean = {0.3, -0.7};
    a.cov = Tensor({2, 2}, {1.5, 0.2, 0.2, 0.8});
    CHECK(eval::frechet_distance(a, a) == doctest::Approx(0.0).epsilon(1e-12));

    b.mean = {-0.1, 0.4};
    b.cov = Tensor({2, 2}, {0.9, -0.3, -0.3, 1.7});
    const double ab = eval::frechet_distance(a, b);
    const double ba = eval::frechet_distance(b, a);
    CHECK(ab == doctest::Approx(ba).epsilon(1e-10));
    CHECK(ab > 0.0);

    // Independent 2x2 oracle: the eigenvalues of C1^1/2 C2 C1^1/2 equal those
    // of C1 C2, so tr of its square root is sqrt(tr(C1 C2) + 2 sqrt(det C1 det C2)).
    const double tr_c1c2 = 1.5 * 0.9 + 0.2 * (-0.3) + 0.2 * (-0.3) + 0.8 * 1.7;
    const double det1 = 1.5 * 0.8 - 0.2 * 0.2, det2 = 0.9 * 1.7 - 0.3 * 0.3;
    const double tr_cross = std::sqrt(tr_c1c2 + 2.0 * std::sqrt(det1 * det2));
    const double mean_term = 0.4 * 0.4 + 1.1 * 1.1;
    const double expect = mean_term + (1.5 + 0.8) + (0.9 + 1.7) - 2.0 * tr_cross;
    CHECK(ab == doctest::Approx(expect).epsilon(1e-9));

    // 1-d closed form: (m1-m2)^2 + (s1-s2)^2 for standard deviations s.
    eval::GaussianFit u, v;
    u.mean = {2.0};
    u.cov = Tensor({1, 1}, {4.0});
    v.mean = {-1.0};
    v.cov = Tensor({1, 1}, {9.0});
    CHECK(eval::frechet_distance(u, v) == doctest::Approx(9.0 + 1.0).epsilon(1e-12));

    // Diagonal fits decompose into a sum of 1-d problems.
    eval::GaussianFit da, db;
    da.mean = {1.0, 0.0, -2.0};
    db.mean = {0.0, 0.5, 1.0};
    da.cov = Tensor({3, 3});
    db.cov = Tensor({3, 3});
    const double va[3] = {1.0, 2.0, 0.5}, vb[3] = {3.0, 0.25, 0.5};
    double diag_expect = 0.0;
    for (int i = 0; i < 3; ++i) {
        da.cov.data[std::size_t(i * 3 + i)] = va[i];
        db.cov.data[std::size_t(i * 3 + i)] = vb[i];
        const double dm = da.mean[std::size_t(i)] - db.mean[std::size_t(i)];
        const double ds = std::sqrt(va[i]) - std::sqrt(vb[i]);
        diag_expect += dm * dm + ds * ds;
    }
    CHECK(eval::frechet_distance(da, db) == doctest::Approx(diag_expect).epsilon(1e-10));
}

TEST_CASE("fid: zero against itself, protocol recorded, deterministic projection") {
    Rng rng = Rng::derive(31, stream_tag::data, 2);
    std::vector<TokenSequence> imgs;
    for (int i = 0; i < 24; ++i) {
        TokenSequence x(16);
        for (auto& t : x) t = int(rng.below(2));
        imgs.push_back(x);
    }
    eval::FidProtocol proto;
    proto.image_h = 4;
    proto.image_w = 4;
    proto.embed_dim = 8;

    const eval::FidReport self = eval::compute_fid(imgs, imgs, proto);
    CHECK(self.value < 1e-9);
    CHECK(self.sample_count == 24);
    CHECK(self.reference_count == 24);
    CHECK(self.protocol.find("random_projection") != std::string::npos);
    CHECK(self.protocol_digest.size() == 16);

    eval::FidProtocol reseeded = proto;
    reseeded.embed_seed = proto.embed_seed + 1;
    CHECK(reseeded.digest() != proto.digest());

    // Same protocol embeds identically; different image sets separate.
    const Tensor e1 = eval::embed_images(imgs, proto, false);
    const Tensor e2 = eval::embed_images(imgs, proto, true);
    CHECK(e1.data == e2.data);

    std::vector<TokenSequence> other;
    for (int i = 0; i < 24; ++i) other.push_back(TokenSequence(16, i % 2));
    const eval::FidReport diff = eval::compute_fid(other, imgs, proto);
    CHECK(diff.value > 0.1);

    eval::FidProtocol pix = proto;
    pix.embedding = eval::EmbeddingKind::pixels;
    CHECK(eval::compute_fid(imgs, imgs, pix).value < 1e-9);
    CHECK(pix.describe().find("pixels") != std::string::npos);

    CHECK_THROWS_AS(eval::embed_images({imgs[0]}, proto, false), std::invalid_argument);
}

TEST_CASE("fid file embeddings load from archives and mismatched dims fail") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "couplegen_fid_files").string();
    fs::create_directories(dir);

    Rng rng = Rng::derive(77, stream_tag::data, 3);
    Tensor rows({32, 5});
    for (double& v : rows.data) v = rng.normal();
    io::Archive a;
    a.put("embeddings", rows);
    a.save(dir + "/emb.bin");

    eval::FidProtocol proto;
    proto.embedding = eval::EmbeddingKind::file;
    proto.embeddings_file_samples = dir + "/emb.bin";
    proto.embeddings_file_reference = dir + "/emb.bin";
    const eval::FidReport rep = eval::compute_fid({}, {}, proto);
    CHECK(rep.value < 1e-9);
    CHECK(rep.sample_count == 32);

    proto.embeddings_file_samples.clear();
    CHECK_THROWS_AS(eval::compute_fid({}, {}, proto), PrereqError);
}

TEST_CASE("gaussianity diagnostics: prior draws pass, constants flag, misfits detected") {
    Rng rng = Rng::derive(41, stream_tag::data, 4);
    const std::size_t n = 10000, d = 4;
    Tensor z({n, d});
    for (double& v : z.data) v = rng.normal();
    const eval::GaussianityReport rep = eval::gaussianity_diagnostics(z);
    for (std::size_t j = 0; j < d; ++j) {
        CHECK(std::abs(rep.per_dim_mean[j]) < 0.05);
        CHECK(std::abs(rep.per_dim_std[j] - 1.0) < 0.05);
    }
    CHECK(rep.max_abs_offdiag_corr < 0.05);
    CHECK(rep.ks_stat_max < 0.03);
    CHECK_FALSE(rep.degenerate);

    Tensor flat({200, 2});
    for (std::size_t i = 0; i < 200; ++i) flat.data[i * 2] = 1.0;  // dim 0 constant
    const eval::GaussianityReport deg = eval::gaussianity_diagnostics(flat);
    CHECK(deg.degenerate);
    CHECK(deg.per_dim_std[0] == 0.0);

    CHECK_THROWS_AS(eval::gaussianity_diagnostics(Tensor({50, 2})), PrereqError);

    // Uniform(0,1) latents are far from the prior; the KS statistic says so.
    Tensor uni({2000, 2});
    for (double& v : uni.data) v = rng.uniform();
    CHECK(eval::gaussianity_diagnostics(uni).ks_stat_max > 0.1);
}

namespace {

void put_be32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back(std::uint8_t(x >> 24));
    v.push_back(std::uint8_t(x >> 16));
    v.push_back(std::uint8_t(x >> 8));
    v.push_back(std::uint8_t(x));
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

void write_gz(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    gzFile f = gzopen(path.c_str(), "wb");
    REQUIRE(f != nullptr);
    REQUIRE(gzwrite(f, bytes.data(), unsigned(bytes.size())) == int(bytes.size()));
    gzclose(f);
}

// Three 2x2 images: all-zero; all-255; {127, 128, 0, 255}.
std::vector<std::uint8_t> tiny_idx3() {
    std::vector<std::uint8_t> v;
    put_be32(v, 0x803);
    put_be32(v, 3);
    put_be32(v, 2);
    put_be32(v, 2);
    const std::uint8_t pix[12] = {0, 0, 0, 0, 255, 255, 255, 255, 127, 128, 0, 255};
    v.insert(v.end(), pix, pix + 12);
    return v;
}

std::vector<std::uint8_t> tiny_idx1() {
    std::vector<std::uint8_t> v;
    put_be32(v, 0x801);
    put_be32(v, 3);
    v.push_back(7);
    v.push_back(0);
    v.push_back(3);
    return v;
}

}  // namespace

TEST_CASE("idx ingestion: binarization, gz equivalence, checksums, structure checks") {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "couplegen_idx").string();
    fs::remove_all(dir);
    fs::create_directories(dir);

    write_bytes(dir + "/train-images-idx3-ubyte", tiny_idx3());
    write_bytes(dir + "/train-labels-idx1-ubyte", tiny_idx1());

    DataConfig dcfg;
    dcfg.binarize_threshold = 0.5;
    const Dataset d = data::load_binary_images(dir, dcfg, "train");
    REQUIRE(d.items.size() == 3);
    CHECK(d.vocab_size == 2);
    CHECK(d.seq_len == 4);
    CHECK(d.items[0] == TokenSequence{0, 0, 0, 0});
    CHECK(d.items[1] == TokenSequence{1, 1, 1, 1});
    // 127/255 < 0.5 <= 128/255: the threshold is on the scaled value.
    CHECK(d.items[2] == TokenSequence{0, 1, 0, 1});
    CHECK(d.labels == std::vector<int>{7, 0, 3});

    // The gz variant decodes to the identical dataset.
    const std::string gzdir = dir + "/gz";
    fs::create_directories(gzdir);
    write_gz(gzdir + "/train-images-idx3-ubyte.gz", tiny_idx3());
    write_gz(gzdir + "/train-labels-idx1-ubyte.gz", tiny_idx1());
    const Dataset dz = data::load_binary_images(gzdir, dcfg, "train");
    CHECK(data::dataset_digest(dz) == data::dataset_digest(d));

    // A matching sidecar digest passes; a corrupted one fails loudly.
    io::write_file_atomic(dir + "/train-images-idx3-ubyte.sha256",
                          io::sha256_file(dir + "/train-images-idx3-ubyte") + "\n");
    CHECK(data::load_binary_images(dir, dcfg, "train").items.size() == 3);
    io::write_file_atomic(dir + "/train-images-idx3-ubyte.sha256", std::string(64, 'f') + "\n");
    CHECK_THROWS_AS(data::load_binary_images(dir, dcfg, "train"), CheckFailure);
    fs::remove(dir + "/train-images-idx3-ubyte.sha256");

    // Missing directory or split is a prerequisite error, not a crash.
    CHECK_THROWS_AS(data::load_binary_images(dir + "/nowhere", dcfg, "train"), PrereqError);
    CHECK_THROWS_AS(data::load_binary_images(dir, dcfg, "t10k"), PrereqError);

    // Structural corruption: bad magic and truncated payloads.
    auto bad = tiny_idx3();
    bad[3] = 0x01;
    write_bytes(dir + "/bad/train-images-idx3-ubyte", {});  // ensure dir exists via ofstream fail
    fs::create_directories(dir + "/bad");
    write_bytes(dir + "/bad/train-images-idx3-ubyte", bad);
    write_bytes(dir + "/bad/train-labels-idx1-ubyte", tiny_idx1());
    CHECK_THROWS_AS(data::load_binary_images(dir + "/bad", dcfg, "train"), CheckFailure);

    auto truncated = tiny_idx3();
    truncated.pop_back();
    write_bytes(dir + "/bad/train-images-idx3-ubyte", truncated);
    CHECK_THROWS_AS(data::load_binary_images(dir + "/bad", dcfg, "train"), CheckFailure);

    // Image/label count mismatch.
    auto short_labels = tiny_idx1();
    short_labels[7] = 2;
    short_labels.pop_back();
    write_bytes(dir + "/bad/train-images-idx3-ubyte", tiny_idx3());
    write_bytes(dir + "/bad/train-labels-idx1-ubyte", short_labels);
    CHECK_THROWS_AS(data::load_binary_images(dir + "/bad", dcfg, "train"), CheckFailure);
}

TEST_CASE("image grid dumps a well-formed binary pgm") {
    namespace fs = std::filesystem;
    const std::string path = (fs::temp_directory_path() / "couplegen_grid.pgm").string();
    std::vector<TokenSequence> imgs(5, TokenSequence(4, 1));
    imgs[2] = TokenSequence{0, 1, 1, 0};
    eval::write_image_grid(path, imgs, 2, 2, 3);

    const std::string bytes = io::read_file(path);
    REQUIRE(bytes.size() > 2);
    CHECK(bytes.substr(0, 2) == "P5");
    // 3 columns of width 2 with separators -> 8; 2 rows of height 2 -> 5.
    CHECK(bytes.find("8 5") != std::string::npos);

    CHECK_THROWS_AS(eval::write_image_grid(path, {}, 2, 2, 3), std::invalid_argument);
    CHECK_THROWS_AS(eval::write_image_grid(path, imgs, 3, 3, 2), std::invalid_argument);
}
